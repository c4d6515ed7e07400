//! Product click model: the four-level product hierarchy, the
//! default-product-group policy for cold products, and the feature set the
//! click predictor runs on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::offset::{Event, FeatureSchema, Hyperparams, ModelState};
use crate::Cents;

/// Four-level product hierarchy path. A product id maps to exactly one
/// (advertiser, set, group) path within a catalog.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProductKey {
    pub advertiser_id: String,
    pub product_set_id: String,
    pub product_group_id: String,
    pub product_id: String,
}

impl ProductKey {
    pub fn new(advertiser: &str, set: &str, group: &str, product: &str) -> Self {
        ProductKey {
            advertiser_id: advertiser.to_string(),
            product_set_id: set.to_string(),
            product_group_id: group.to_string(),
            product_id: product.to_string(),
        }
    }
}

/// Accumulated counters for one product.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductStats {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    pub spend: Cents,
    pub last_seen_day: u32,
}

pub const FREQUENCY_FEATURE: &str = "frequency";
pub const RECENCY_FEATURE: &str = "recency";
pub const SLOT_DEVICE_FEATURE: &str = "slot-device";

/// Click model configuration: promotion threshold plus the feature lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickModelConfig {
    /// A product gets its own vector once it has *more than* this many
    /// impressions; below that it trains through the group default.
    pub promote_threshold: u64,
    pub user_features: Vec<String>,
    pub sim_features: Vec<String>,
    pub pair_width: usize,
    pub solo_width: usize,
}

impl Default for ClickModelConfig {
    fn default() -> Self {
        ClickModelConfig {
            promote_threshold: 1000,
            user_features: [
                "techno-segments",
                "page-section",
                "dpa-type-experiment-id",
                "impression-history",
                "age",
                "user-clicked-category",
                "mobile-activity",
                "ctr-advertiser-top",
                "user-clicked-product-category",
            ]
            .map(String::from)
            .to_vec(),
            sim_features: [FREQUENCY_FEATURE, RECENCY_FEATURE, SLOT_DEVICE_FEATURE]
                .map(String::from)
                .to_vec(),
            pair_width: 2,
            solo_width: 2,
        }
    }
}

pub const AD_ADVERTISER: &str = "advertiser-id";
pub const AD_PRODUCT_SET: &str = "product-set-id";
pub const AD_PRODUCT_GROUP: &str = "product-group-id";
pub const AD_PRODUCT: &str = "product-id";

impl ClickModelConfig {
    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            self.user_features.clone(),
            self.pair_width,
            self.solo_width,
            [AD_ADVERTISER, AD_PRODUCT_SET, AD_PRODUCT_GROUP, AD_PRODUCT]
                .map(String::from)
                .to_vec(),
            self.sim_features.clone(),
        )
    }

    pub fn new_model(&self, hyper: Hyperparams, seed: u64) -> Result<ModelState> {
        Ok(ModelState::new(self.schema()?, hyper, seed))
    }
}

/// Pseudo-value standing in for all cold products of a group.
pub fn default_product_value(group_id: &str) -> String {
    format!("__default__@{group_id}")
}

/// Ad feature assignment for one product: the three upper hierarchy levels
/// always, and the product id itself only once the product has crossed the
/// promotion threshold — otherwise the group's default pseudo-value takes
/// its place.
pub fn product_ad_values(
    key: &ProductKey,
    stats: &ProductStats,
    config: &ClickModelConfig,
) -> BTreeMap<String, String> {
    let mut values = BTreeMap::new();
    values.insert(AD_ADVERTISER.to_string(), key.advertiser_id.clone());
    values.insert(AD_PRODUCT_SET.to_string(), key.product_set_id.clone());
    values.insert(AD_PRODUCT_GROUP.to_string(), key.product_group_id.clone());
    let product_value = if stats.impressions > config.promote_threshold {
        key.product_id.clone()
    } else {
        default_product_value(&key.product_group_id)
    };
    values.insert(AD_PRODUCT.to_string(), product_value);
    values
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromoteOutcome {
    Promoted,
    AlreadyPromoted,
}

/// Give a product its own vector, seeded from its group's default vector.
/// Idempotent: promoting twice reports `AlreadyPromoted` and changes
/// nothing.
pub fn promote_product(key: &ProductKey, model: &mut ModelState) -> Result<PromoteOutcome> {
    if model.ad_table().contains(AD_PRODUCT, &key.product_id) {
        return Ok(PromoteOutcome::AlreadyPromoted);
    }
    let seed = model.seed();
    let default_value = default_product_value(&key.product_group_id);
    let vec = model.ad_table().resolve(AD_PRODUCT, &default_value, seed);
    let dim = vec.len();
    model
        .ad_table_mut()
        .insert(AD_PRODUCT, &key.product_id, vec, vec![0.0; dim]);
    Ok(PromoteOutcome::Promoted)
}

/// Assemble the full event for one (user context, product) pair and predict
/// the click probability.
pub fn pctr(
    user: &Event,
    key: &ProductKey,
    model: &ModelState,
    stats: &ProductStats,
    config: &ClickModelConfig,
) -> Result<f64> {
    let mut event = user.clone();
    event.ad_values = product_ad_values(key, stats, config);
    model.predict(&event)
}

/// Weekly ad-view count bins for the frequency similarity feature.
pub fn frequency_bin(views_past_week: u64) -> &'static str {
    match views_past_week {
        0 => "0",
        1 => "1",
        2 => "2",
        3..=5 => "3-5",
        _ => "6+",
    }
}

/// Time-since-last-seen bins for the recency similarity feature.
pub fn recency_bin(seconds_since: Option<i64>) -> &'static str {
    match seconds_since {
        Some(s) if s < 3600 => "<1h",
        Some(s) if s < 86_400 => "<1d",
        Some(s) if s < 3 * 86_400 => "<3d",
        Some(s) if s < 7 * 86_400 => "<7d",
        _ => ">=7d",
    }
}

/// Carousel slot index crossed with device class, e.g. `slot1_nonMobile`.
pub fn slot_device_bin(slot: usize, mobile: bool) -> String {
    format!("slot{}_{}", slot, if mobile { "mobile" } else { "nonMobile" })
}
