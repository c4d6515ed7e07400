//! Conversion-given-click prediction and bidding.
//!
//! Clicks train as negative events and post-click conversions as additional
//! positive events — the two are never joined, because conversions can trail
//! their click by up to 30 days. The raw prediction therefore lands near
//! `c/(1+c)` for a true conversion-given-click rate `c`, and
//! [`correct_prediction`] maps it back with `raw/(1-raw)`.
//!
//! The final bid for a (user, product) pair is
//! `min(pconv * tcpa, bid_product_group)`; the target CPA comes from the
//! advertiser's retargeting CPA times 1.5, falling back to its best
//! prospecting CPA.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::click::ProductKey;
use crate::click::{ProductStats, AD_ADVERTISER, AD_PRODUCT, AD_PRODUCT_SET};
use crate::error::{Error, Result};
use crate::offset::{Event, EventKind, FeatureSchema, FrozenModel, Hyperparams, ModelState};
use crate::serving::SourceType;
use crate::Cents;

/// Attribution window for joining conversions to clicks.
pub const ATTRIBUTION_WINDOW_SECS: i64 = 30 * 86_400;

/// Default markup over the retargeting CPA when deriving the target CPA.
pub const DEFAULT_TCPA_MULTIPLIER: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvModelConfig {
    pub publish_k: usize,
    pub min_conversions: u64,
    pub publish_period_hours: u32,
    pub pair_width: usize,
    pub solo_width: usize,
}

impl Default for ConvModelConfig {
    fn default() -> Self {
        ConvModelConfig {
            publish_k: 1000,
            min_conversions: 10,
            publish_period_hours: 6,
            pair_width: 2,
            solo_width: 2,
        }
    }
}

pub const CONV_USER_FEATURES: [&str; 3] =
    ["ctr-campaign-top", "dpa-type-experiment-id", "page-section"];

impl ConvModelConfig {
    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            CONV_USER_FEATURES.map(String::from).to_vec(),
            self.pair_width,
            self.solo_width,
            [AD_PRODUCT, AD_PRODUCT_SET, AD_ADVERTISER]
                .map(String::from)
                .to_vec(),
            vec![],
        )
    }

    pub fn new_model(&self, hyper: Hyperparams, seed: u64) -> Result<ModelState> {
        Ok(ModelState::new(self.schema()?, hyper, seed))
    }
}

/// One logged DPA click with the user context captured at click time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub timestamp: i64,
    pub user_id: String,
    pub product: ProductKey,
    pub user_values: BTreeMap<String, Vec<(String, f64)>>,
}

/// One attributed purchase from the conversion feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub timestamp: i64,
    pub user_id: String,
    pub product_id: String,
}

/// Ad feature assignment used by the conversion model (no group level, no
/// default-product-group policy: publication already filters to products
/// with enough conversions).
pub fn conv_ad_values(key: &ProductKey) -> BTreeMap<String, String> {
    BTreeMap::from([
        (AD_PRODUCT.to_string(), key.product_id.clone()),
        (AD_PRODUCT_SET.to_string(), key.product_set_id.clone()),
        (AD_ADVERTISER.to_string(), key.advertiser_id.clone()),
    ])
}

fn click_event(click: &ClickRecord, label: u8, kind: EventKind, timestamp: i64) -> Event {
    Event {
        user_values: click.user_values.clone(),
        ad_values: conv_ad_values(&click.product),
        sim_bins: BTreeMap::new(),
        label,
        kind,
        timestamp,
    }
}

/// Turn click and conversion logs into a time-ordered training feed.
///
/// Every click becomes a label-0 event. Every conversion that matches a
/// prior click by (user, product) within the attribution window becomes an
/// *additional* label-1 event carrying that click's user context; the click
/// still contributes its negative. Conversions with no matching click are
/// dropped and counted.
pub fn build_conv_training_feed(
    clicks: &[ClickRecord],
    conversions: &[ConversionRecord],
) -> (Vec<Event>, u64) {
    let mut by_key: BTreeMap<(&str, &str), Vec<&ClickRecord>> = BTreeMap::new();
    for click in clicks {
        by_key
            .entry((click.user_id.as_str(), click.product.product_id.as_str()))
            .or_default()
            .push(click);
    }
    for list in by_key.values_mut() {
        list.sort_by_key(|c| c.timestamp);
    }

    let mut events: Vec<Event> = clicks
        .iter()
        .map(|c| click_event(c, 0, EventKind::Click, c.timestamp))
        .collect();
    let mut dropped = 0u64;
    for conv in conversions {
        let matched = by_key
            .get(&(conv.user_id.as_str(), conv.product_id.as_str()))
            .and_then(|list| {
                // Last-touch attribution: latest click at or before the
                // conversion, within the window.
                list.iter()
                    .rev()
                    .find(|c| {
                        c.timestamp <= conv.timestamp
                            && conv.timestamp - c.timestamp <= ATTRIBUTION_WINDOW_SECS
                    })
                    .copied()
            });
        match matched {
            Some(click) => events.push(click_event(click, 1, EventKind::Conversion, conv.timestamp)),
            None => dropped += 1,
        }
    }
    events.sort_by(|a, b| {
        (a.timestamp, a.label)
            .cmp(&(b.timestamp, b.label))
            .then_with(|| a.ad_values.cmp(&b.ad_values))
            .then_with(|| {
                a.user_values
                    .partial_cmp(&b.user_values)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    (events, dropped)
}

/// Undo the under-prediction induced by unjoined click/conversion training:
/// `raw/(1-raw)`, clamped to 1 where the approximation leaves the
/// probability range.
pub fn correct_prediction(raw: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&raw) {
        return Err(Error::InvalidInput(format!(
            "raw prediction {raw} outside [0, 1)"
        )));
    }
    Ok((raw / (1.0 - raw)).min(1.0))
}

/// Per-advertiser spend and conversion tallies, broken down by DPA type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserPerf {
    pub advertiser_id: String,
    pub spend_by_type: BTreeMap<SourceType, Cents>,
    pub conversions_by_type: BTreeMap<SourceType, u64>,
}

impl AdvertiserPerf {
    pub fn new(advertiser_id: &str) -> Self {
        AdvertiserPerf {
            advertiser_id: advertiser_id.to_string(),
            ..AdvertiserPerf::default()
        }
    }

    pub fn record(&mut self, ty: SourceType, spend: Cents, conversions: u64) {
        *self.spend_by_type.entry(ty).or_insert(0) += spend;
        *self.conversions_by_type.entry(ty).or_insert(0) += conversions;
    }

    fn cpa_of(&self, ty: SourceType) -> Option<f64> {
        let conv = *self.conversions_by_type.get(&ty).unwrap_or(&0);
        if conv == 0 {
            return None;
        }
        let spend = *self.spend_by_type.get(&ty).unwrap_or(&0);
        Some(spend as f64 / conv as f64)
    }
}

const PROSPECTING_TYPES: [SourceType; 4] = [
    SourceType::ConversionProspecting,
    SourceType::TrendingProspecting,
    SourceType::SearchStub,
    SourceType::LocationStub,
];

/// Target CPA for one advertiser: `multiplier` times the retargeting CPA,
/// falling back to the best (lowest) prospecting CPA. `None` when no
/// qualifying type has conversions — such advertisers are excluded from
/// publication.
pub fn compute_tcpa(perf: &AdvertiserPerf, multiplier: f64) -> Option<Cents> {
    let base = perf.cpa_of(SourceType::Retargeting).or_else(|| {
        PROSPECTING_TYPES
            .iter()
            .filter_map(|&ty| perf.cpa_of(ty))
            .fold(None, |best: Option<f64>, cpa| {
                Some(best.map_or(cpa, |b| b.min(cpa)))
            })
    })?;
    Some((multiplier * base).round() as Cents)
}

/// Final auction bid: `min(pconv * tcpa, bid_product_group)`, in cents.
pub fn bid_final(pconv: f64, tcpa: Cents, bid_pg: Cents) -> Cents {
    debug_assert!((0.0..=1.0).contains(&pconv));
    debug_assert!(tcpa >= 0 && bid_pg >= 0);
    ((pconv * tcpa as f64).round() as Cents).min(bid_pg)
}

/// Immutable serving snapshot of the conversion model: the frozen model
/// restricted to the selected products, plus the per-advertiser target CPAs
/// and per-group bids needed to evaluate the final-bid formula.
#[derive(Debug, Clone)]
pub struct PublishedConvModel {
    pub model: FrozenModel,
    /// Selected products with their conversion counts, highest first.
    pub products: Vec<(ProductKey, u64)>,
    pub tcpa: BTreeMap<String, Cents>,
    pub bids: BTreeMap<String, Cents>,
}

/// Select the published product set: at least `min_conversions` conversions,
/// top `publish_k` by conversion count (ties broken by product id), and only
/// advertisers with a computable target CPA.
pub fn publish_conv_model(
    model: &FrozenModel,
    stats: &BTreeMap<ProductKey, ProductStats>,
    tcpas: &BTreeMap<String, Cents>,
    group_bids: &BTreeMap<String, Cents>,
    config: &ConvModelConfig,
) -> PublishedConvModel {
    let mut selected: Vec<(ProductKey, u64)> = stats
        .iter()
        .filter(|(key, st)| {
            st.conversions >= config.min_conversions && tcpas.contains_key(&key.advertiser_id)
        })
        .map(|(key, st)| (key.clone(), st.conversions))
        .collect();
    selected.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.product_id.cmp(&b.0.product_id)));
    selected.truncate(config.publish_k);

    let keep_products: std::collections::BTreeSet<&str> =
        selected.iter().map(|(k, _)| k.product_id.as_str()).collect();
    let keep_sets: std::collections::BTreeSet<&str> = selected
        .iter()
        .map(|(k, _)| k.product_set_id.as_str())
        .collect();
    let keep_advs: std::collections::BTreeSet<&str> = selected
        .iter()
        .map(|(k, _)| k.advertiser_id.as_str())
        .collect();

    let mut published = model.clone();
    published.retain_ad_values(AD_PRODUCT, |v| keep_products.contains(v));
    published.retain_ad_values(AD_PRODUCT_SET, |v| keep_sets.contains(v));
    published.retain_ad_values(AD_ADVERTISER, |v| keep_advs.contains(v));

    let tcpa: BTreeMap<String, Cents> = tcpas
        .iter()
        .filter(|(adv, _)| keep_advs.contains(adv.as_str()))
        .map(|(adv, c)| (adv.clone(), *c))
        .collect();
    let bids: BTreeMap<String, Cents> = selected
        .iter()
        .filter_map(|(key, _)| {
            group_bids
                .get(&key.product_group_id)
                .map(|b| (key.product_group_id.clone(), *b))
        })
        .collect();

    PublishedConvModel {
        model: published,
        products: selected,
        tcpa,
        bids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn click(user: &str, product: &str, ts: i64) -> ClickRecord {
        ClickRecord {
            timestamp: ts,
            user_id: user.to_string(),
            product: ProductKey::new("adv1", "set1", "group1", product),
            user_values: BTreeMap::from([
                ("ctr-campaign-top".to_string(), vec![("c1".to_string(), 1.0)]),
                ("dpa-type-experiment-id".to_string(), vec![("retargeting".to_string(), 1.0)]),
                ("page-section".to_string(), vec![("s1".to_string(), 1.0)]),
            ]),
        }
    }

    fn conversion(user: &str, product: &str, ts: i64) -> ConversionRecord {
        ConversionRecord {
            timestamp: ts,
            user_id: user.to_string(),
            product_id: product.to_string(),
        }
    }

    #[test]
    fn click_without_conversion_is_one_negative() {
        let (events, dropped) = build_conv_training_feed(&[click("u1", "p1", 10)], &[]);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].label, 0);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn converting_click_contributes_negative_and_positive() {
        let (events, dropped) = build_conv_training_feed(
            &[click("u1", "p1", 10)],
            &[conversion("u1", "p1", 500)],
        );
        assert_eq!(dropped, 0);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].label, 0);
        assert_eq!(events[1].label, 1);
        // The positive reuses the click's user context.
        assert_eq!(events[0].user_values, events[1].user_values);
    }

    #[test]
    fn feed_counts_add_up() {
        let clicks: Vec<ClickRecord> = (0..100)
            .map(|i| click(&format!("u{i}"), "p1", i as i64))
            .collect();
        let convs: Vec<ConversionRecord> = (0..20)
            .map(|i| conversion(&format!("u{i}"), "p1", 1000 + i as i64))
            .collect();
        let (events, dropped) = build_conv_training_feed(&clicks, &convs);
        assert_eq!(dropped, 0);
        assert_eq!(events.len(), 120);
        assert_eq!(events.iter().filter(|e| e.label == 1).count(), 20);
    }

    #[test]
    fn unmatched_conversions_are_dropped_with_count() {
        // Wrong user, wrong product, before the click, and past the window.
        let clicks = vec![click("u1", "p1", 1000)];
        let convs = vec![
            conversion("u2", "p1", 1500),
            conversion("u1", "p2", 1500),
            conversion("u1", "p1", 500),
            conversion("u1", "p1", 1000 + ATTRIBUTION_WINDOW_SECS + 1),
            conversion("u1", "p1", 1000 + ATTRIBUTION_WINDOW_SECS),
        ];
        let (events, dropped) = build_conv_training_feed(&clicks, &convs);
        assert_eq!(dropped, 4);
        assert_eq!(events.iter().filter(|e| e.label == 1).count(), 1);
    }

    #[test]
    fn correction_formula_and_clamp() {
        assert_eq!(correct_prediction(0.0).unwrap(), 0.0);
        assert!((correct_prediction(0.2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(correct_prediction(0.6).unwrap(), 1.0);
        assert_eq!(correct_prediction(0.5).unwrap(), 1.0);
        assert!(correct_prediction(1.0).is_err());
        assert!(correct_prediction(-0.1).is_err());
    }

    #[test]
    fn correction_monotone_below_half_idempotent_at_endpoints() {
        let mut prev = -1.0;
        for i in 0..=50 {
            let raw = i as f64 / 100.0;
            let c = correct_prediction(raw).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert_eq!(
            correct_prediction(correct_prediction(0.0).unwrap()).unwrap(),
            0.0
        );
        // 1.0 is a fixed point of the clamped map via any raw >= 0.5.
        assert_eq!(correct_prediction(0.9).unwrap(), 1.0);
    }

    #[test]
    fn tcpa_prefers_retargeting() {
        let mut perf = AdvertiserPerf::new("adv1");
        perf.record(SourceType::Retargeting, 10_000, 100);
        perf.record(SourceType::SearchStub, 100, 1);
        assert_eq!(compute_tcpa(&perf, 1.5), Some(150));
    }

    #[test]
    fn tcpa_falls_back_to_best_prospecting_cpa() {
        let mut perf = AdvertiserPerf::new("adv1");
        perf.record(SourceType::SearchStub, 2000, 10); // CPA 200
        perf.record(SourceType::LocationStub, 1200, 10); // CPA 120
        assert_eq!(compute_tcpa(&perf, 1.5), Some(180));
    }

    #[test]
    fn tcpa_absent_without_conversions() {
        let mut perf = AdvertiserPerf::new("adv1");
        perf.record(SourceType::Retargeting, 10_000, 0);
        // Cross-sell conversions qualify neither as retargeting nor prospecting.
        perf.record(SourceType::CrossSell, 500, 5);
        assert_eq!(compute_tcpa(&perf, 1.5), None);
    }

    #[test]
    fn bid_final_examples() {
        assert_eq!(bid_final(0.02, 500, 20), 10);
        assert_eq!(bid_final(1.0, 500, 20), 20);
        assert_eq!(bid_final(0.0, 500, 20), 0);
    }

    fn product_stats(conversions: u64) -> ProductStats {
        ProductStats {
            conversions,
            ..ProductStats::default()
        }
    }

    #[test]
    fn publication_thresholds_and_truncation() {
        let cfg = ConvModelConfig::default();
        let model = cfg.new_model(Hyperparams::default(), 1).unwrap().freeze();
        let mut stats = BTreeMap::new();
        for (i, conv) in [5u64, 10, 50].iter().enumerate() {
            stats.insert(
                ProductKey::new("adv1", "set1", "group1", &format!("p{i}")),
                product_stats(*conv),
            );
        }
        let tcpas = BTreeMap::from([("adv1".to_string(), 150)]);
        let bids = BTreeMap::from([("group1".to_string(), 25)]);
        let published = publish_conv_model(&model, &stats, &tcpas, &bids, &cfg);
        let ids: Vec<&str> = published
            .products
            .iter()
            .map(|(k, _)| k.product_id.as_str())
            .collect();
        assert_eq!(ids, vec!["p2", "p1"]);
        assert_eq!(published.bids["group1"], 25);

        // The restricted model no longer holds dropped product vectors.
        assert!(!published.model.as_model().ad_table().contains(AD_PRODUCT, "p0"));
    }

    #[test]
    fn publication_excludes_advertisers_without_tcpa() {
        let cfg = ConvModelConfig::default();
        let model = cfg.new_model(Hyperparams::default(), 1).unwrap().freeze();
        let stats = BTreeMap::from([
            (
                ProductKey::new("adv1", "set1", "group1", "p1"),
                product_stats(100),
            ),
            (
                ProductKey::new("adv2", "set2", "group2", "p2"),
                product_stats(100),
            ),
        ]);
        let tcpas = BTreeMap::from([("adv1".to_string(), 150)]);
        let published = publish_conv_model(&model, &stats, &tcpas, &BTreeMap::new(), &cfg);
        assert_eq!(published.products.len(), 1);
        assert_eq!(published.products[0].0.advertiser_id, "adv1");
    }

    #[test]
    fn publication_is_deterministic_with_lexicographic_ties() {
        let cfg = ConvModelConfig {
            publish_k: 2,
            ..ConvModelConfig::default()
        };
        let model = cfg.new_model(Hyperparams::default(), 1).unwrap().freeze();
        let mut stats = BTreeMap::new();
        for name in ["pc", "pa", "pb"] {
            stats.insert(
                ProductKey::new("adv1", "set1", "group1", name),
                product_stats(10),
            );
        }
        let tcpas = BTreeMap::from([("adv1".to_string(), 150)]);
        let run = || {
            publish_conv_model(&model, &stats, &tcpas, &BTreeMap::new(), &cfg)
                .products
                .iter()
                .map(|(k, _)| k.product_id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), vec!["pa", "pb"]);
        assert_eq!(run(), run());
    }
}
