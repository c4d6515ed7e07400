//! Request-path serving pipeline.
//!
//! For every incoming impression the pipeline runs gather → match → filter →
//! preliminary auction (prospecting types only) → rank → dedupe → group →
//! backfill → render, over an immutable snapshot bundle. Requests are
//! stateless; snapshot swaps happen between requests.

pub mod item2item;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::click::{product_ad_values, ClickModelConfig, ProductKey, ProductStats};
use crate::conv::{bid_final, conv_ad_values, correct_prediction, PublishedConvModel};
use crate::error::Result;
use crate::offset::{clamp_probability, Event, FrozenModel};
use crate::trendy::{Gender, PublishedTrendyModel, USER_AGE, USER_GENDER};
use crate::Cents;
pub use item2item::RecommendationModel;

/// Where a candidate came from. The stub variants are plugin points whose
/// eligibility logic lives outside this crate; they return configured
/// fixture lists.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    Retargeting,
    CrossSell,
    OutOfStockStub,
    SearchStub,
    LocationStub,
    ConversionProspecting,
    TrendingProspecting,
}

impl SourceType {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceType::Retargeting => "retargeting",
            SourceType::CrossSell => "cross_sell",
            SourceType::OutOfStockStub => "out_of_stock_stub",
            SourceType::SearchStub => "search_stub",
            SourceType::LocationStub => "location_stub",
            SourceType::ConversionProspecting => "conversion_prospecting",
            SourceType::TrendingProspecting => "trending_prospecting",
        }
    }

    pub fn parse(s: &str) -> Option<SourceType> {
        Some(match s {
            "retargeting" => SourceType::Retargeting,
            "cross_sell" => SourceType::CrossSell,
            "out_of_stock_stub" => SourceType::OutOfStockStub,
            "search_stub" => SourceType::SearchStub,
            "location_stub" => SourceType::LocationStub,
            "conversion_prospecting" => SourceType::ConversionProspecting,
            "trending_prospecting" => SourceType::TrendingProspecting,
            _ => return None,
        })
    }

    /// Prospecting candidates compete in the internal preliminary auction;
    /// retargeting-family candidates bypass it.
    pub fn is_prospecting(&self) -> bool {
        matches!(
            self,
            SourceType::SearchStub
                | SourceType::LocationStub
                | SourceType::ConversionProspecting
                | SourceType::TrendingProspecting
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Mobile,
    Desktop,
}

/// One incoming impression opportunity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeRequest {
    pub request_id: String,
    pub user_id: String,
    /// Event-shaped user context: user feature values and similarity bins;
    /// the timestamp doubles as "now" for expiration checks.
    pub user: Event,
    pub page_section: String,
    pub floor_price: Cents,
    pub supports_carousel: bool,
    pub device: Device,
}

impl ServeRequest {
    fn user_gender(&self) -> Gender {
        self.user
            .user_values
            .get(USER_GENDER)
            .and_then(|v| v.first())
            .and_then(|(g, _)| Gender::parse(g))
            .unwrap_or(Gender::Unknown)
    }

    fn user_age(&self) -> Option<u32> {
        // The age feature carries a bin label like "20-24"; the lower bound
        // is enough to re-bin identically.
        self.user
            .user_values
            .get(USER_AGE)
            .and_then(|v| v.first())
            .and_then(|(a, _)| a.split('-').next().map(str::to_string))
            .and_then(|s| s.parse().ok())
    }
}

/// Campaign attributes attached during the match stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignInfo {
    pub advertiser_id: String,
    pub product_group_id: String,
    pub bid_product_group: Cents,
    pub budget_remaining: Cents,
    /// Empty means no gender targeting.
    pub target_genders: Vec<Gender>,
    pub expiration_ts: i64,
    /// Publisher-policy conflicts: page sections this campaign must not
    /// serve on.
    pub blocked_page_sections: BTreeSet<String>,
}

pub type CampaignDb = BTreeMap<String, CampaignInfo>;

/// A scored product flowing through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub product: ProductKey,
    pub source_type: SourceType,
    pub bid: Cents,
    pub pctr: f64,
    /// Expected revenue `pctr * bid`; assigned at the rank stage.
    pub score: f64,
    pub campaign: Option<CampaignInfo>,
}

impl Candidate {
    fn new(product: ProductKey, source_type: SourceType) -> Self {
        Candidate {
            product,
            source_type,
            bid: 0,
            pctr: 0.0,
            score: 0.0,
            campaign: None,
        }
    }
}

/// Product assets for rendering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assets {
    pub title: String,
    pub image_ref: String,
    pub description: String,
}

impl Assets {
    pub fn is_complete(&self) -> bool {
        !self.title.is_empty() && !self.image_ref.is_empty() && !self.description.is_empty()
    }
}

/// Eligibility plugin interface for the DPA types whose internal logic is
/// out of scope here.
pub trait EligibilitySource {
    fn source_type(&self) -> SourceType;
    fn gather(&self, request: &ServeRequest) -> Vec<ProductKey>;
}

/// Fixture-backed source: returns the same configured list for every
/// request.
#[derive(Debug, Clone)]
pub struct FixtureSource {
    pub ty: SourceType,
    pub products: Vec<ProductKey>,
}

impl EligibilitySource for FixtureSource {
    fn source_type(&self) -> SourceType {
        self.ty
    }

    fn gather(&self, _request: &ServeRequest) -> Vec<ProductKey> {
        self.products.clone()
    }
}

/// Per-stage drop and flow counters, aggregated over requests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub requests: u64,
    pub gathered: u64,
    pub match_dropped_unknown: u64,
    pub filter_dropped_targeting: u64,
    pub filter_dropped_expired: u64,
    pub filter_dropped_policy: u64,
    pub filter_dropped_budget: u64,
    pub filter_dropped_floor: u64,
    pub prelim_dropped: u64,
    pub dedupe_dropped_product: u64,
    pub dedupe_dropped_advertiser: u64,
    pub backfill_item_to_item: u64,
    pub backfill_popularity: u64,
    pub degraded_to_single: u64,
    pub render_dropped_missing_asset: u64,
    pub ads_rendered: u64,
}

impl StageCounters {
    pub fn merge(&mut self, other: &StageCounters) {
        self.requests += other.requests;
        self.gathered += other.gathered;
        self.match_dropped_unknown += other.match_dropped_unknown;
        self.filter_dropped_targeting += other.filter_dropped_targeting;
        self.filter_dropped_expired += other.filter_dropped_expired;
        self.filter_dropped_policy += other.filter_dropped_policy;
        self.filter_dropped_budget += other.filter_dropped_budget;
        self.filter_dropped_floor += other.filter_dropped_floor;
        self.prelim_dropped += other.prelim_dropped;
        self.dedupe_dropped_product += other.dedupe_dropped_product;
        self.dedupe_dropped_advertiser += other.dedupe_dropped_advertiser;
        self.backfill_item_to_item += other.backfill_item_to_item;
        self.backfill_popularity += other.backfill_popularity;
        self.degraded_to_single += other.degraded_to_single;
        self.render_dropped_missing_asset += other.render_dropped_missing_asset;
        self.ads_rendered += other.ads_rendered;
    }
}

/// Multi-slot carousel ad: at least three products, the pivot (highest
/// score) in slot one. Backfilled slots may come from the recommendation
/// model's related set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarouselAd {
    pub advertiser_id: String,
    pub product_group_id: String,
    pub slots: Vec<ProductKey>,
    pub pivot_score: f64,
    pub backfilled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleAd {
    pub advertiser_id: String,
    pub product: ProductKey,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ad_type", rename_all = "snake_case")]
pub enum Ad {
    Single(SingleAd),
    Carousel(CarouselAd),
}

impl Ad {
    pub fn advertiser_id(&self) -> &str {
        match self {
            Ad::Single(ad) => &ad.advertiser_id,
            Ad::Carousel(ad) => &ad.advertiser_id,
        }
    }

    pub fn score(&self) -> f64 {
        match self {
            Ad::Single(ad) => ad.score,
            Ad::Carousel(ad) => ad.pivot_score,
        }
    }

    pub fn slots(&self) -> Vec<&ProductKey> {
        match self {
            Ad::Single(ad) => vec![&ad.product],
            Ad::Carousel(ad) => ad.slots.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedSlot {
    pub product: ProductKey,
    pub title: String,
    pub image_ref: String,
    pub description: String,
}

/// Terminal pipeline value: a fully rendered ad ready for the external
/// auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdResult {
    pub request_id: String,
    pub advertiser_id: String,
    pub carousel: bool,
    pub score: f64,
    pub slots: Vec<RenderedSlot>,
}

/// Everything one serving generation needs, all immutable: models, campaign
/// database, catalog (stats + assets), retargeting store, stub fixtures, and
/// the recommendation model for carousel backfill.
pub struct SnapshotBundle {
    pub click_model: FrozenModel,
    pub click_config: ClickModelConfig,
    pub conv: Option<PublishedConvModel>,
    pub trendy: Option<PublishedTrendyModel>,
    pub campaigns: CampaignDb,
    pub stats: BTreeMap<ProductKey, ProductStats>,
    pub assets: BTreeMap<ProductKey, Assets>,
    pub retarget_store: BTreeMap<String, Vec<ProductKey>>,
    pub stubs: Vec<Box<dyn EligibilitySource + Send + Sync>>,
    pub recommender: RecommendationModel,
    /// Preliminary-auction size bound L.
    pub prelim_top_l: usize,
}

pub const DEFAULT_PRELIM_TOP_L: usize = 40;

/// The pipeline: a snapshot bundle plus precomputed per-product vectors so
/// per-request scoring reduces to dot products.
pub struct Pipeline {
    bundle: SnapshotBundle,
    click_ad_vectors: BTreeMap<ProductKey, Vec<f64>>,
    conv_vectors: Vec<(ProductKey, Vec<f64>)>,
    trendy_scorers: BTreeMap<String, Vec<(ProductKey, Vec<f64>)>>,
}

impl Pipeline {
    pub fn new(bundle: SnapshotBundle) -> Result<Self> {
        let mut click_ad_vectors = BTreeMap::new();
        for (key, stats) in &bundle.stats {
            let values = product_ad_values(key, stats, &bundle.click_config);
            click_ad_vectors.insert(key.clone(), bundle.click_model.ad_vector_from(&values)?);
        }
        let mut conv_vectors = Vec::new();
        if let Some(conv) = &bundle.conv {
            for (key, _) in &conv.products {
                conv_vectors.push((key.clone(), conv.model.ad_vector_from(&conv_ad_values(key))?));
            }
        }
        let mut trendy_scorers = BTreeMap::new();
        if let Some(trendy) = &bundle.trendy {
            for (advertiser, products) in &trendy.by_advertiser {
                let mut vectors = Vec::with_capacity(products.len());
                for key in products {
                    vectors.push((
                        key.clone(),
                        trendy
                            .model
                            .ad_vector_from(&crate::trendy::lookalike_ad_values(key))?,
                    ));
                }
                trendy_scorers.insert(advertiser.clone(), vectors);
            }
        }
        Ok(Pipeline {
            bundle,
            click_ad_vectors,
            conv_vectors,
            trendy_scorers,
        })
    }

    pub fn bundle(&self) -> &SnapshotBundle {
        &self.bundle
    }

    /// Run the full pipeline for one request.
    pub fn serve(&self, request: &ServeRequest) -> Result<(Vec<AdResult>, StageCounters)> {
        let mut counters = StageCounters {
            requests: 1,
            ..StageCounters::default()
        };
        let candidates = self.gather(request, &mut counters)?;
        let candidates = match_candidates(candidates, &self.bundle.campaigns, &mut counters);
        let candidates = filter(candidates, request, &mut counters);
        let candidates = self.rank(candidates, request)?;

        let (prospecting, passthrough): (Vec<Candidate>, Vec<Candidate>) = candidates
            .into_iter()
            .partition(|c| c.source_type.is_prospecting());
        let kept = preliminary_auction(prospecting, self.bundle.prelim_top_l, &mut counters);
        let mut merged = passthrough;
        merged.extend(kept);
        sort_by_score(&mut merged);

        let deduped = dedupe(merged, &mut counters);
        let drafts = group(deduped, request);
        let ads: Vec<Ad> = drafts
            .into_iter()
            .map(|d| self.backfill(d, &mut counters))
            .collect();
        let results = self.render(request, ads, &mut counters);
        Ok((results, counters))
    }

    /// Union of per-type eligible products.
    fn gather(&self, request: &ServeRequest, counters: &mut StageCounters) -> Result<Vec<Candidate>> {
        let mut out = Vec::new();

        if let Some(products) = self.bundle.retarget_store.get(&request.user_id) {
            out.extend(
                products
                    .iter()
                    .map(|p| Candidate::new(p.clone(), SourceType::Retargeting)),
            );
        }

        for stub in &self.bundle.stubs {
            out.extend(
                stub.gather(request)
                    .into_iter()
                    .map(|p| Candidate::new(p, stub.source_type())),
            );
        }

        if let Some(conv) = &self.bundle.conv {
            let user = self.typed_user_context(request, SourceType::ConversionProspecting);
            let user_vec = conv.model.user_vector(&user)?;
            let empty = BTreeMap::new();
            for (key, ad_vec) in &self.conv_vectors {
                let Some(&tcpa) = conv.tcpa.get(&key.advertiser_id) else {
                    continue;
                };
                let Some(&bid_pg) = conv.bids.get(&key.product_group_id) else {
                    continue;
                };
                let raw = conv.model.predict_parts(&user_vec, ad_vec, &empty);
                let pconv = correct_prediction(clamp_probability(raw))?;
                let bid = bid_final(pconv, tcpa, bid_pg);
                if bid > request.floor_price {
                    let mut cand = Candidate::new(key.clone(), SourceType::ConversionProspecting);
                    cand.bid = bid;
                    out.push(cand);
                }
            }
        }

        if let Some(trendy) = &self.bundle.trendy {
            if let Ok(user_event) =
                crate::trendy::lookalike_user_event(request.user_age(), request.user_gender(), 0)
            {
                let user_vec = trendy.model.user_vector(&user_event)?;
                let empty = BTreeMap::new();
                for (advertiser, vectors) in &self.trendy_scorers {
                    let Some(&threshold) = trendy.thresholds.get(advertiser) else {
                        continue;
                    };
                    let max_score = vectors
                        .iter()
                        .map(|(_, av)| trendy.model.predict_parts(&user_vec, av, &empty))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if max_score > threshold {
                        out.extend(vectors.iter().map(|(key, _)| {
                            Candidate::new(key.clone(), SourceType::TrendingProspecting)
                        }));
                    }
                }
            }
        }

        counters.gathered += out.len() as u64;
        Ok(out)
    }

    /// User context with the DPA-type experiment feature pinned to the
    /// candidate's source type; the type is itself a predictive feature, so
    /// the same product scores differently per type.
    fn typed_user_context(&self, request: &ServeRequest, ty: SourceType) -> Event {
        let mut user = request.user.clone();
        user.user_values.insert(
            "dpa-type-experiment-id".to_string(),
            vec![(ty.as_str().to_string(), 1.0)],
        );
        user
    }

    /// Score candidates with the click model and sort by expected revenue.
    fn rank(&self, candidates: Vec<Candidate>, request: &ServeRequest) -> Result<Vec<Candidate>> {
        let mut user_vec_by_type: BTreeMap<SourceType, Vec<f64>> = BTreeMap::new();
        let mut scored = candidates;
        for cand in &mut scored {
            if !user_vec_by_type.contains_key(&cand.source_type) {
                let user = self.typed_user_context(request, cand.source_type);
                let v = self.bundle.click_model.user_vector(&user)?;
                user_vec_by_type.insert(cand.source_type, v);
            }
            let user_vec = &user_vec_by_type[&cand.source_type];
            let cold;
            let ad_vec = match self.click_ad_vectors.get(&cand.product) {
                Some(v) => v,
                // Product unknown to the catalog stats; score through the
                // cold-product path.
                None => {
                    let values = product_ad_values(
                        &cand.product,
                        &ProductStats::default(),
                        &self.bundle.click_config,
                    );
                    cold = self.bundle.click_model.ad_vector_from(&values)?;
                    &cold
                }
            };
            cand.pctr = self
                .bundle
                .click_model
                .predict_parts(user_vec, ad_vec, &request.user.sim_bins);
            cand.score = cand.pctr * cand.bid as f64;
        }
        sort_by_score(&mut scored);
        Ok(scored)
    }

    /// Fill short carousels from the recommendation model, or degrade to a
    /// single-product ad.
    fn backfill(&self, draft: AdDraft, counters: &mut StageCounters) -> Ad {
        let best_score = draft.slots[0].score;
        if !draft.wants_carousel {
            return Ad::Single(SingleAd {
                advertiser_id: draft.advertiser_id,
                product: draft.slots.into_iter().next().expect("non-empty draft").product,
                score: best_score,
            });
        }
        let mut slots: Vec<ProductKey> = draft.slots.iter().map(|c| c.product.clone()).collect();
        let mut backfilled = 0usize;
        if slots.len() < 3 {
            let pivot = &slots[0];
            let related = self.bundle.recommender.item_to_item(pivot);
            let from_popularity = related.len() < 2;
            let pool: Vec<ProductKey> = if from_popularity {
                self.bundle.recommender.popularity(&draft.advertiser_id)
            } else {
                related.into_iter().map(|(k, _)| k).collect()
            };
            for key in pool {
                if slots.len() >= 3 {
                    break;
                }
                if slots.contains(&key) {
                    continue;
                }
                slots.push(key);
                backfilled += 1;
                if from_popularity {
                    counters.backfill_popularity += 1;
                } else {
                    counters.backfill_item_to_item += 1;
                }
            }
        }
        if slots.len() < 3 {
            counters.degraded_to_single += 1;
            return Ad::Single(SingleAd {
                advertiser_id: draft.advertiser_id,
                product: slots.into_iter().next().expect("pivot present"),
                score: best_score,
            });
        }
        Ad::Carousel(CarouselAd {
            advertiser_id: draft.advertiser_id,
            product_group_id: draft.product_group_id,
            slots,
            pivot_score: best_score,
            backfilled,
        })
    }

    /// Attach assets per slot; ads with any missing asset are dropped.
    fn render(
        &self,
        request: &ServeRequest,
        ads: Vec<Ad>,
        counters: &mut StageCounters,
    ) -> Vec<AdResult> {
        let mut out = Vec::new();
        'ads: for ad in ads {
            let mut slots = Vec::new();
            for product in ad.slots() {
                match self.bundle.assets.get(product) {
                    Some(a) if a.is_complete() => slots.push(RenderedSlot {
                        product: product.clone(),
                        title: a.title.clone(),
                        image_ref: a.image_ref.clone(),
                        description: a.description.clone(),
                    }),
                    _ => {
                        counters.render_dropped_missing_asset += 1;
                        continue 'ads;
                    }
                }
            }
            counters.ads_rendered += 1;
            out.push(AdResult {
                request_id: request.request_id.clone(),
                advertiser_id: ad.advertiser_id().to_string(),
                carousel: matches!(ad, Ad::Carousel(_)),
                score: ad.score(),
                slots,
            });
        }
        out
    }
}

/// Deterministic pipeline order: score descending, then product id, then
/// source type, then advertiser.
fn sort_by_score(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.product.product_id.cmp(&b.product.product_id))
            .then_with(|| a.source_type.cmp(&b.source_type))
            .then_with(|| a.product.advertiser_id.cmp(&b.product.advertiser_id))
    });
}

/// Attach campaign information; candidates whose product group has no
/// campaign are dropped and counted.
pub fn match_candidates(
    candidates: Vec<Candidate>,
    campaigns: &CampaignDb,
    counters: &mut StageCounters,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for mut cand in candidates {
        match campaigns.get(&cand.product.product_group_id) {
            Some(info) => {
                if cand.source_type != SourceType::ConversionProspecting {
                    cand.bid = info.bid_product_group;
                }
                cand.campaign = Some(info.clone());
                out.push(cand);
            }
            None => counters.match_dropped_unknown += 1,
        }
    }
    out
}

/// Remove candidates that fail targeting, expiration, publisher policy,
/// budget, or the floor price.
pub fn filter(
    candidates: Vec<Candidate>,
    request: &ServeRequest,
    counters: &mut StageCounters,
) -> Vec<Candidate> {
    let gender = request.user_gender();
    let now = request.user.timestamp;
    let mut out = Vec::new();
    for cand in candidates {
        let info = cand.campaign.as_ref().expect("matched before filter");
        if !info.target_genders.is_empty() && !info.target_genders.contains(&gender) {
            counters.filter_dropped_targeting += 1;
            continue;
        }
        if now >= info.expiration_ts {
            counters.filter_dropped_expired += 1;
            continue;
        }
        if info.blocked_page_sections.contains(&request.page_section) {
            counters.filter_dropped_policy += 1;
            continue;
        }
        if info.budget_remaining < cand.bid {
            counters.filter_dropped_budget += 1;
            continue;
        }
        if cand.bid < request.floor_price {
            counters.filter_dropped_floor += 1;
            continue;
        }
        out.push(cand);
    }
    out
}

/// Internal preliminary auction over prospecting candidates: keep the top
/// `l` by score, ties broken by product id.
pub fn preliminary_auction(
    mut candidates: Vec<Candidate>,
    l: usize,
    counters: &mut StageCounters,
) -> Vec<Candidate> {
    sort_by_score(&mut candidates);
    if candidates.len() > l {
        counters.prelim_dropped += (candidates.len() - l) as u64;
        candidates.truncate(l);
    }
    candidates
}

/// Deduping: when one product appears under multiple source types, keep the
/// highest-score instance; then keep only each advertiser's best-scoring ad
/// line (its top product's group).
pub fn dedupe(ranked: Vec<Candidate>, counters: &mut StageCounters) -> Vec<Candidate> {
    let mut seen_products: BTreeSet<ProductKey> = BTreeSet::new();
    let mut product_unique = Vec::new();
    for cand in ranked {
        if seen_products.insert(cand.product.clone()) {
            product_unique.push(cand);
        } else {
            counters.dedupe_dropped_product += 1;
        }
    }

    let mut best_line: BTreeMap<&str, &str> = BTreeMap::new();
    for cand in &product_unique {
        best_line
            .entry(cand.product.advertiser_id.as_str())
            .or_insert(cand.product.product_group_id.as_str());
    }
    let keep: Vec<bool> = product_unique
        .iter()
        .map(|c| best_line[c.product.advertiser_id.as_str()] == c.product.product_group_id)
        .collect();
    let mut out = Vec::new();
    for (cand, keep) in product_unique.into_iter().zip(keep) {
        if keep {
            out.push(cand);
        } else {
            counters.dedupe_dropped_advertiser += 1;
        }
    }
    out
}

/// One advertiser's surviving ad line, pre-backfill.
#[derive(Debug, Clone)]
pub struct AdDraft {
    pub advertiser_id: String,
    pub product_group_id: String,
    /// Ordered by score, best first.
    pub slots: Vec<Candidate>,
    pub wants_carousel: bool,
}

/// Group same-group products of each advertiser line into carousel drafts
/// (or single-slot drafts when the page does not support carousels).
pub fn group(deduped: Vec<Candidate>, request: &ServeRequest) -> Vec<AdDraft> {
    let mut drafts: Vec<AdDraft> = Vec::new();
    for cand in deduped {
        match drafts
            .iter_mut()
            .find(|d| d.advertiser_id == cand.product.advertiser_id)
        {
            Some(draft) => {
                if request.supports_carousel {
                    draft.slots.push(cand);
                }
                // Without carousel support the advertiser's best single
                // product already occupies the draft.
            }
            None => drafts.push(AdDraft {
                advertiser_id: cand.product.advertiser_id.clone(),
                product_group_id: cand.product.product_group_id.clone(),
                slots: vec![cand],
                wants_carousel: request.supports_carousel,
            }),
        }
    }
    drafts
}

/// Convenience: run a batch of requests and aggregate counters.
pub fn serve_all(
    pipeline: &Pipeline,
    requests: &[ServeRequest],
) -> Result<(Vec<AdResult>, StageCounters)> {
    let mut results = Vec::new();
    let mut counters = StageCounters::default();
    for request in requests {
        let (ads, c) = pipeline.serve(request)?;
        results.extend(ads);
        counters.merge(&c);
    }
    Ok((results, counters))
}

impl std::fmt::Debug for SnapshotBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SnapshotBundle")
            .field("campaigns", &self.campaigns.len())
            .field("stats", &self.stats.len())
            .field("conv", &self.conv.is_some())
            .field("trendy", &self.trendy.is_some())
            .finish()
    }
}
