use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offset::schema::FeatureSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Click,
    Skip,
    Conversion,
    Purchase,
    AddToCart,
    Impression,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Click => "click",
            EventKind::Skip => "skip",
            EventKind::Conversion => "conversion",
            EventKind::Purchase => "purchase",
            EventKind::AddToCart => "add_to_cart",
            EventKind::Impression => "impression",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        Some(match s {
            "click" => EventKind::Click,
            "skip" => EventKind::Skip,
            "conversion" => EventKind::Conversion,
            "purchase" => EventKind::Purchase,
            "add_to_cart" => EventKind::AddToCart,
            "impression" => EventKind::Impression,
            _ => return None,
        })
    }
}

/// One labeled training or serving record.
///
/// User features carry weighted value lists (single-value categorical
/// features are one-element lists with weight 1), ad features a single value
/// each, and similarity features the bin the event falls into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user_values: BTreeMap<String, Vec<(String, f64)>>,
    pub ad_values: BTreeMap<String, String>,
    pub sim_bins: BTreeMap<String, String>,
    pub label: u8,
    pub kind: EventKind,
    pub timestamp: i64,
}

impl Event {
    pub fn new(kind: EventKind, label: u8, timestamp: i64) -> Self {
        Event {
            user_values: BTreeMap::new(),
            ad_values: BTreeMap::new(),
            sim_bins: BTreeMap::new(),
            label,
            kind,
            timestamp,
        }
    }

    pub fn with_user(mut self, feature: &str, values: Vec<(String, f64)>) -> Self {
        self.user_values.insert(feature.to_string(), values);
        self
    }

    pub fn with_user_value(self, feature: &str, value: &str) -> Self {
        self.with_user(feature, vec![(value.to_string(), 1.0)])
    }

    pub fn with_ad(mut self, feature: &str, value: &str) -> Self {
        self.ad_values.insert(feature.to_string(), value.to_string());
        self
    }

    pub fn with_sim(mut self, feature: &str, bin: &str) -> Self {
        self.sim_bins.insert(feature.to_string(), bin.to_string());
        self
    }

    /// Ingestion-time hygiene check: every feature present must be known to
    /// the schema, value lists must be non-empty, and weights finite.
    pub fn validate_against(&self, schema: &FeatureSchema) -> Result<()> {
        for (name, values) in &self.user_values {
            if schema.user_feature_index(name).is_none() {
                return Err(Error::InvalidEvent(format!("unknown user feature {name:?}")));
            }
            if values.is_empty() {
                return Err(Error::InvalidEvent(format!(
                    "user feature {name:?} has an empty value list"
                )));
            }
            for (_, w) in values {
                if !w.is_finite() {
                    return Err(Error::InvalidEvent(format!(
                        "non-finite weight on user feature {name:?}"
                    )));
                }
            }
        }
        for name in self.ad_values.keys() {
            if !schema.ad_features().contains(name) {
                return Err(Error::InvalidEvent(format!("unknown ad feature {name:?}")));
            }
        }
        for name in self.sim_bins.keys() {
            if !schema.has_sim_feature(name) {
                return Err(Error::InvalidEvent(format!("unknown sim feature {name:?}")));
            }
        }
        if self.label > 1 {
            return Err(Error::InvalidEvent(format!("label {} not in {{0,1}}", self.label)));
        }
        Ok(())
    }
}
