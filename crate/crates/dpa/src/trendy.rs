//! Trending-prospecting: a lookalike eligibility model for advertisers with
//! no event history on the platform.
//!
//! Positives come from advertiser pixel feeds (purchases and add-to-carts of
//! the top-N popular products); negatives are a fixed-size random sample of
//! platform impressions per product. Trained this way, the predictor
//! approximates `pos(u,p) / (pos(u,p) + neg(u))` per demographic cell — at
//! once a popularity signal and a lookalike similarity.
//!
//! Eligibility is thresholded per advertiser: a threshold-percentile curve
//! over a random user sample's maximal scores translates "x% of the
//! population" into a score cutoff.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::click::{ProductKey, AD_ADVERTISER, AD_PRODUCT, AD_PRODUCT_SET};
use crate::error::{Error, Result};
use crate::offset::{Event, EventKind, FeatureSchema, FrozenModel, Hyperparams, ModelState};
use crate::Cents;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

impl Gender {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        Some(match s {
            "female" => Gender::Female,
            "male" => Gender::Male,
            "unknown" => Gender::Unknown,
            _ => return None,
        })
    }
}

/// Five-year age bin label, e.g. `20-24`.
pub fn age_bin(age: u32) -> String {
    let lo = age / 5 * 5;
    format!("{}-{}", lo, lo + 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelKind {
    Purchase,
    AddToCart,
    View,
}

impl PixelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PixelKind::Purchase => "purchase",
            PixelKind::AddToCart => "add_to_cart",
            PixelKind::View => "view",
        }
    }

    pub fn parse(s: &str) -> Option<PixelKind> {
        Some(match s {
            "purchase" => PixelKind::Purchase,
            "add_to_cart" => PixelKind::AddToCart,
            "view" => PixelKind::View,
            _ => return None,
        })
    }

    /// Views are logged but do not count as engagement positives.
    pub fn is_positive(&self) -> bool {
        matches!(self, PixelKind::Purchase | PixelKind::AddToCart)
    }
}

/// One event from an advertiser's site pixel feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelEvent {
    pub timestamp: i64,
    pub user_id: String,
    pub age: Option<u32>,
    pub gender: Gender,
    pub product: ProductKey,
    pub kind: PixelKind,
}

/// One platform impression, as sampled for negatives and user test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub timestamp: i64,
    pub user_id: String,
    pub age: Option<u32>,
    pub gender: Gender,
    pub page_section: String,
}

impl ImpressionRecord {
    pub fn has_known_demographics(&self) -> bool {
        self.age.is_some() && self.gender != Gender::Unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookalikeConfig {
    /// Train only on this many most popular pixel-feed products.
    pub top_n_products: usize,
    /// Negatives sampled per product per daily update.
    pub negatives_per_product: usize,
    /// Evict a product absent from the inputs this many consecutive days.
    pub stale_days: u32,
    /// Published model size bound.
    pub publish_t: usize,
    /// Test-sample size for threshold-percentile curves.
    pub sample_r: usize,
    pub pair_width: usize,
    pub solo_width: usize,
}

impl Default for LookalikeConfig {
    fn default() -> Self {
        LookalikeConfig {
            top_n_products: 10_000,
            negatives_per_product: 2000,
            stale_days: 10,
            publish_t: 3500,
            sample_r: 20_000,
            pair_width: 4,
            solo_width: 2,
        }
    }
}

pub const USER_AGE: &str = "age";
pub const USER_GENDER: &str = "gender";

impl LookalikeConfig {
    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            vec![USER_AGE.to_string(), USER_GENDER.to_string()],
            self.pair_width,
            self.solo_width,
            [AD_ADVERTISER, AD_PRODUCT_SET, AD_PRODUCT]
                .map(String::from)
                .to_vec(),
            vec![],
        )
    }
}

/// Ad feature assignment for the lookalike model (no group level).
pub fn lookalike_ad_values(key: &ProductKey) -> BTreeMap<String, String> {
    BTreeMap::from([
        (AD_ADVERTISER.to_string(), key.advertiser_id.clone()),
        (AD_PRODUCT_SET.to_string(), key.product_set_id.clone()),
        (AD_PRODUCT.to_string(), key.product_id.clone()),
    ])
}

/// User side of a lookalike event; errors when demographics are unknown.
pub fn lookalike_user_event(age: Option<u32>, gender: Gender, timestamp: i64) -> Result<Event> {
    let age = age.ok_or_else(|| Error::NotScorable("unknown age".into()))?;
    if gender == Gender::Unknown {
        return Err(Error::NotScorable("unknown gender".into()));
    }
    Ok(Event::new(EventKind::Impression, 0, timestamp)
        .with_user_value(USER_AGE, &age_bin(age))
        .with_user_value(USER_GENDER, gender.as_str()))
}

/// The `n` products with the most positive pixel events (views excluded),
/// most popular first; ties break by product id.
pub fn select_top_products(pixel_feed: &[PixelEvent], n: usize) -> Vec<ProductKey> {
    let mut counts: BTreeMap<&ProductKey, u64> = BTreeMap::new();
    for ev in pixel_feed.iter().filter(|e| e.kind.is_positive()) {
        *counts.entry(&ev.product).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&ProductKey, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.product_id.cmp(&b.0.product_id)));
    ranked.truncate(n);
    ranked.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Label-1 events for the known-demographics positives of the selected
/// products.
pub fn positive_events(pixel_feed: &[PixelEvent], products: &BTreeSet<ProductKey>) -> Vec<Event> {
    pixel_feed
        .iter()
        .filter(|e| {
            e.kind.is_positive()
                && e.age.is_some()
                && e.gender != Gender::Unknown
                && products.contains(&e.product)
        })
        .map(|e| {
            let kind = match e.kind {
                PixelKind::Purchase => EventKind::Purchase,
                PixelKind::AddToCart => EventKind::AddToCart,
                PixelKind::View => unreachable!("views filtered above"),
            };
            let mut ev = lookalike_user_event(e.age, e.gender, e.timestamp)
                .expect("demographics checked above");
            ev.ad_values = lookalike_ad_values(&e.product);
            ev.label = 1;
            ev.kind = kind;
            ev
        })
        .collect()
}

/// For each product, `m` impressions sampled uniformly without replacement
/// (an independent seeded stream per product) become label-0 events.
/// Impressions with unknown age or gender are skipped before sampling.
/// Returns the events plus the number of products whose eligible pool fell
/// short of `m`.
pub fn sample_negatives(
    impressions: &[ImpressionRecord],
    products: &[ProductKey],
    m: usize,
    seed: u64,
) -> (Vec<Event>, u64) {
    let eligible: Vec<&ImpressionRecord> = impressions
        .iter()
        .filter(|r| r.has_known_demographics())
        .collect();
    let mut events = Vec::new();
    let mut shortfall = 0u64;
    for product in products {
        let take = m.min(eligible.len());
        if take < m {
            shortfall += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(product.product_id.as_bytes()));
        let picked = rand::seq::index::sample(&mut rng, eligible.len(), take);
        let mut idxs: Vec<usize> = picked.into_iter().collect();
        idxs.sort_unstable();
        for idx in idxs {
            let rec = eligible[idx];
            let mut ev = lookalike_user_event(rec.age, rec.gender, rec.timestamp)
                .expect("eligible pool has known demographics");
            ev.ad_values = lookalike_ad_values(product);
            ev.label = 0;
            events.push(ev);
        }
    }
    (events, shortfall)
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Outcome of one daily lookalike update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DailyUpdateReport {
    pub day: u32,
    pub positives: usize,
    pub negatives: usize,
    pub shortfall_products: u64,
    pub evicted: Vec<ProductKey>,
}

/// The lookalike model plus the per-product bookkeeping that drives daily
/// staleness eviction and publication ordering.
#[derive(Debug, Clone)]
pub struct LookalikeModel {
    pub model: ModelState,
    last_seen: BTreeMap<ProductKey, u32>,
    positive_counts: BTreeMap<ProductKey, u64>,
}

impl LookalikeModel {
    pub fn new(config: &LookalikeConfig, hyper: Hyperparams, seed: u64) -> Result<Self> {
        Ok(LookalikeModel {
            model: ModelState::new(config.schema()?, hyper, seed),
            last_seen: BTreeMap::new(),
            positive_counts: BTreeMap::new(),
        })
    }

    pub fn tracked_products(&self) -> impl Iterator<Item = &ProductKey> {
        self.last_seen.keys()
    }

    pub fn positive_count(&self, key: &ProductKey) -> u64 {
        *self.positive_counts.get(key).unwrap_or(&0)
    }

    /// One daily update: select the day's top products, build positives and
    /// sampled negatives, train over the merged time-ordered feed, then
    /// evict products absent for `stale_days` consecutive updates.
    pub fn daily_update(
        &mut self,
        day: u32,
        pixel_feed: &[PixelEvent],
        impressions: &[ImpressionRecord],
        config: &LookalikeConfig,
        seed: u64,
    ) -> Result<DailyUpdateReport> {
        let top = select_top_products(pixel_feed, config.top_n_products);
        let top_set: BTreeSet<ProductKey> = top.iter().cloned().collect();
        let positives = positive_events(pixel_feed, &top_set);
        for ev in pixel_feed {
            if ev.kind.is_positive() && top_set.contains(&ev.product) {
                *self.positive_counts.entry(ev.product.clone()).or_insert(0) += 1;
            }
        }
        let (negatives, shortfall) =
            sample_negatives(impressions, &top, config.negatives_per_product, seed ^ day as u64);
        self.train_daily(day, positives, negatives, shortfall, &top_set, config.stale_days)
    }

    /// Train over merged positives and negatives and apply staleness
    /// bookkeeping for the products present in this update's inputs.
    fn train_daily(
        &mut self,
        day: u32,
        positives: Vec<Event>,
        negatives: Vec<Event>,
        shortfall: u64,
        present: &BTreeSet<ProductKey>,
        stale_days: u32,
    ) -> Result<DailyUpdateReport> {
        let n_pos = positives.len();
        let n_neg = negatives.len();
        let mut feed = positives;
        feed.extend(negatives);
        feed.sort_by(|a, b| {
            (a.timestamp, a.label)
                .cmp(&(b.timestamp, b.label))
                .then_with(|| a.ad_values.cmp(&b.ad_values))
                .then_with(|| {
                    a.user_values
                        .partial_cmp(&b.user_values)
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        self.model.train_batch(&feed)?;

        for key in present {
            self.last_seen.insert(key.clone(), day);
        }
        let evicted: Vec<ProductKey> = self
            .last_seen
            .iter()
            .filter(|(_, &seen)| day.saturating_sub(seen) >= stale_days)
            .map(|(k, _)| k.clone())
            .collect();
        for key in &evicted {
            self.last_seen.remove(key);
            self.positive_counts.remove(key);
            self.model
                .ad_table_mut()
                .remove(AD_PRODUCT, &key.product_id);
        }

        Ok(DailyUpdateReport {
            day,
            positives: n_pos,
            negatives: n_neg,
            shortfall_products: shortfall,
            evicted,
        })
    }
}

/// Eligibility score of one user for one product (the model prediction).
pub fn eligibility_score(
    user_age: Option<u32>,
    gender: Gender,
    product: &ProductKey,
    model: &ModelState,
) -> Result<f64> {
    let mut event = lookalike_user_event(user_age, gender, 0)?;
    event.ad_values = lookalike_ad_values(product);
    model.predict(&event)
}

/// Precomputed ad vectors for scoring one user against many products.
pub struct ProductScorer<'a> {
    model: &'a FrozenModel,
    vectors: Vec<(ProductKey, Vec<f64>)>,
}

impl<'a> ProductScorer<'a> {
    pub fn new(model: &'a FrozenModel, products: &[ProductKey]) -> Result<Self> {
        let vectors = products
            .iter()
            .map(|p| Ok((p.clone(), model.ad_vector_from(&lookalike_ad_values(p))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProductScorer { model, vectors })
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Scores for every product, in the order given at construction.
    pub fn scores(&self, age: Option<u32>, gender: Gender) -> Result<Vec<(ProductKey, f64)>> {
        let event = lookalike_user_event(age, gender, 0)?;
        let user_vec = self.model.user_vector(&event)?;
        let empty = BTreeMap::new();
        Ok(self
            .vectors
            .iter()
            .map(|(key, av)| (key.clone(), self.model.predict_parts(&user_vec, av, &empty)))
            .collect())
    }

    /// Maximal score over the product set.
    pub fn max_score(&self, age: Option<u32>, gender: Gender) -> Result<f64> {
        let event = lookalike_user_event(age, gender, 0)?;
        let user_vec = self.model.user_vector(&event)?;
        let empty = BTreeMap::new();
        Ok(self
            .vectors
            .iter()
            .map(|(_, av)| self.model.predict_parts(&user_vec, av, &empty))
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Sorted per-user maxima of eligibility scores over one advertiser's
/// products, for an R-user test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub advertiser_id: String,
    /// Ascending; users with no scorable demographics are excluded.
    pub maxima: Vec<f64>,
}

/// Score every sampled user against the advertiser's products and collect
/// the per-user maxima into a sorted curve.
pub fn build_threshold_curve(
    model: &FrozenModel,
    advertiser_id: &str,
    products: &[ProductKey],
    users: &[(Option<u32>, Gender)],
) -> Result<ThresholdCurve> {
    if products.is_empty() {
        return Err(Error::EmptyCurve(advertiser_id.to_string()));
    }
    let scorer = ProductScorer::new(model, products)?;
    let mut maxima = Vec::with_capacity(users.len());
    for &(age, gender) in users {
        match scorer.max_score(age, gender) {
            Ok(m) => maxima.push(m),
            Err(Error::NotScorable(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    maxima.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    Ok(ThresholdCurve {
        advertiser_id: advertiser_id.to_string(),
        maxima,
    })
}

/// Smallest curve value `t` such that at most `pct`% of the sampled maxima
/// strictly exceed `t` — the (100-pct)th percentile of the curve.
pub fn threshold_for_percentile(curve: &ThresholdCurve, pct: f64) -> Result<f64> {
    if curve.maxima.is_empty() {
        return Err(Error::EmptyCurve(curve.advertiser_id.clone()));
    }
    if !(0.0 < pct && pct < 100.0) {
        return Err(Error::InvalidInput(format!(
            "percentile {pct} outside (0, 100)"
        )));
    }
    let n = curve.maxima.len();
    let allowed = (n as f64 * pct / 100.0).floor() as usize;
    let start = n.saturating_sub(allowed + 1);
    for i in start..n {
        let t = curve.maxima[i];
        let above = n - curve.maxima.partition_point(|&v| v <= t);
        if above <= allowed {
            return Ok(t);
        }
    }
    Ok(curve.maxima[n - 1])
}

/// Immutable published lookalike model: at most `t_cap` products, allocated
/// across product groups by previous-day spend, plus per-advertiser score
/// thresholds.
#[derive(Debug, Clone)]
pub struct PublishedTrendyModel {
    pub model: FrozenModel,
    pub by_advertiser: BTreeMap<String, Vec<ProductKey>>,
    pub thresholds: BTreeMap<String, f64>,
    /// Requested population percentile behind each threshold (manifest info).
    pub percentiles: BTreeMap<String, f64>,
}

impl PublishedTrendyModel {
    pub fn product_count(&self) -> usize {
        self.by_advertiser.values().map(Vec::len).sum()
    }
}

/// Proportional largest-remainder allocation of `t_cap` slots over groups,
/// capped by each group's product count. Zero total spend degrades to equal
/// weights. The result always sums to `min(t_cap, total capacity)`.
pub fn allocate_slots(
    groups: &[(String, usize, Cents)],
    t_cap: usize,
) -> BTreeMap<String, usize> {
    let mut alloc: BTreeMap<String, usize> =
        groups.iter().map(|(g, _, _)| (g.clone(), 0)).collect();
    let total_capacity: usize = groups.iter().map(|(_, c, _)| *c).sum();
    let mut remaining = t_cap.min(total_capacity);

    while remaining > 0 {
        let active: Vec<&(String, usize, Cents)> = groups
            .iter()
            .filter(|(g, cap, _)| alloc[g] < *cap)
            .collect();
        if active.is_empty() {
            break;
        }
        let total_spend: i128 = active.iter().map(|(_, _, s)| *s as i128).sum();
        let weights: Vec<f64> = if total_spend == 0 {
            vec![1.0; active.len()]
        } else {
            active.iter().map(|(_, _, s)| *s as f64).collect()
        };
        let wsum: f64 = weights.iter().sum();
        let quotas: Vec<f64> = weights
            .iter()
            .map(|w| remaining as f64 * w / wsum)
            .collect();
        let mut give: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let leftover = remaining - give.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - give[a] as f64;
            let fb = quotas[b] - give[b] as f64;
            fb.partial_cmp(&fa)
                .expect("finite fractions")
                .then_with(|| active[a].0.cmp(&active[b].0))
        });
        for &i in order.iter().take(leftover) {
            give[i] += 1;
        }

        let mut distributed = 0usize;
        for (i, entry) in active.iter().enumerate() {
            let (group, cap, _) = entry;
            let room = cap - alloc[group];
            let g = give[i].min(room);
            *alloc.get_mut(group).expect("seeded above") += g;
            distributed += g;
        }
        if distributed == 0 {
            break;
        }
        remaining -= distributed;
    }
    alloc
}

/// Publish the lookalike model: allocate the `t_cap` product slots across
/// groups proportionally to previous-day spend, keep each group's products
/// by descending positive-event count, and attach per-advertiser thresholds.
pub fn publish_trendy_model(
    model: &LookalikeModel,
    thresholds: &BTreeMap<String, (f64, f64)>,
    spend_by_group: &BTreeMap<String, Cents>,
    t_cap: usize,
) -> PublishedTrendyModel {
    let mut by_group: BTreeMap<&str, Vec<&ProductKey>> = BTreeMap::new();
    for key in model.tracked_products() {
        by_group.entry(&key.product_group_id).or_default().push(key);
    }
    for list in by_group.values_mut() {
        list.sort_by(|a, b| {
            model
                .positive_count(b)
                .cmp(&model.positive_count(a))
                .then_with(|| a.product_id.cmp(&b.product_id))
        });
    }

    let groups: Vec<(String, usize, Cents)> = by_group
        .iter()
        .map(|(g, list)| {
            (
                g.to_string(),
                list.len(),
                *spend_by_group.get(*g).unwrap_or(&0),
            )
        })
        .collect();
    let alloc = allocate_slots(&groups, t_cap);

    let mut by_advertiser: BTreeMap<String, Vec<ProductKey>> = BTreeMap::new();
    let mut keep_ids: BTreeSet<String> = BTreeSet::new();
    for (group, list) in &by_group {
        for key in list.iter().take(alloc[*group]) {
            keep_ids.insert(key.product_id.clone());
            by_advertiser
                .entry(key.advertiser_id.clone())
                .or_default()
                .push((*key).clone());
        }
    }

    let mut frozen = model.model.freeze();
    frozen.retain_ad_values(AD_PRODUCT, |v| keep_ids.contains(v));

    PublishedTrendyModel {
        model: frozen,
        by_advertiser,
        thresholds: thresholds.iter().map(|(a, (t, _))| (a.clone(), *t)).collect(),
        percentiles: thresholds.iter().map(|(a, (_, p))| (a.clone(), *p)).collect(),
    }
}
