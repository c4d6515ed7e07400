//! Declarative run configuration (TOML file plus CLI flag overrides).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Cents;

/// Planted demographic-affinity rule: users in the (age range, gender) cell
/// engage with one advertiser's pixel products `multiplier` times more often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityRule {
    pub age_lo: u32,
    pub age_hi: u32,
    pub gender: String,
    pub advertiser_index: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub users: usize,
    pub advertisers: usize,
    pub sets_per_advertiser: usize,
    pub groups_per_set: usize,
    pub products_per_group: usize,
    pub days: u32,
    pub impressions_per_day: usize,
    pub pixel_events_per_day: usize,
    pub page_sections: usize,
    pub base_ctr: f64,
    /// The first `hot_sections` page sections get this CTR multiplier.
    pub hot_sections: usize,
    pub hot_section_multiplier: f64,
    /// Conversion-given-click rates, cycled over advertisers.
    pub conversion_rates: Vec<f64>,
    /// Fraction of users with unknown age or gender.
    pub unknown_demo_rate: f64,
    pub affinity: Vec<AffinityRule>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            users: 5000,
            advertisers: 4,
            sets_per_advertiser: 2,
            groups_per_set: 2,
            products_per_group: 8,
            days: 7,
            impressions_per_day: 100_000,
            pixel_events_per_day: 8000,
            page_sections: 200,
            base_ctr: 0.03,
            hot_sections: 3,
            hot_section_multiplier: 3.0,
            conversion_rates: vec![0.05, 0.1, 0.3],
            unknown_demo_rate: 0.05,
            affinity: vec![AffinityRule {
                age_lo: 20,
                age_hi: 24,
                gender: "female".into(),
                advertiser_index: 0,
                multiplier: 3.0,
            }],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.conversion_rates.iter().all(|r| (0.0..=1.0).contains(r))
            && (0.0..=1.0).contains(&self.base_ctr)
            && (0.0..=1.0).contains(&self.unknown_demo_rate);
        if !rates_ok {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        if self.users == 0
            || self.advertisers == 0
            || self.sets_per_advertiser == 0
            || self.groups_per_set == 0
            || self.products_per_group == 0
            || self.days == 0
            || self.page_sections == 0
        {
            return Err(Error::Config("counts must be at least 1".into()));
        }
        if self.conversion_rates.is_empty() {
            return Err(Error::Config("need at least one conversion rate".into()));
        }
        Ok(())
    }

    pub fn product_count(&self) -> usize {
        self.advertisers * self.sets_per_advertiser * self.groups_per_set * self.products_per_group
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub pair_width: usize,
    pub solo_width: usize,
    pub eta0: f64,
    pub lambda: f64,
    pub init_variance: f64,
    pub promote_threshold: u64,
    pub publish_k: usize,
    pub min_conversions: u64,
    pub tcpa_multiplier: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            pair_width: 2,
            solo_width: 2,
            eta0: 0.05,
            lambda: 1e-5,
            init_variance: 0.01,
            promote_threshold: 1000,
            publish_k: 1000,
            min_conversions: 10,
            tcpa_multiplier: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookalikeSection {
    pub top_n_products: usize,
    pub negatives_per_product: usize,
    pub stale_days: u32,
    pub publish_t: usize,
    pub sample_r: usize,
    pub percentile: f64,
    pub pair_width: usize,
    pub solo_width: usize,
}

impl Default for LookalikeSection {
    fn default() -> Self {
        LookalikeSection {
            top_n_products: 100,
            negatives_per_product: 200,
            stale_days: 10,
            publish_t: 80,
            sample_r: 20_000,
            percentile: 5.0,
            pair_width: 4,
            solo_width: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSection {
    pub requests: usize,
    pub floor_price: Cents,
    pub prelim_top_l: usize,
    /// One request in `carousel_modulo` lands on a page without carousel
    /// support.
    pub carousel_modulo: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            requests: 2000,
            floor_price: 1,
            prelim_top_l: 40,
            carousel_modulo: 4,
        }
    }
}

/// Full run configuration: the synthetic world plus per-stage settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelSection,
    pub lookalike: LookalikeSection,
    pub serve: ServeSection,
    /// Days used for training; the rest of the simulated days are held out.
    pub train_days: Option<u32>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        config.world.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Training window: configured, or all but the last day.
    pub fn effective_train_days(&self) -> u32 {
        self.train_days
            .unwrap_or_else(|| self.world.days.saturating_sub(1).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let config = RunConfig::default();
        config.world.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        config.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), config);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[world]\nseed = 9\nusers = 10\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.world.seed, 9);
        assert_eq!(config.world.users, 10);
        assert_eq!(config.world.advertisers, WorldConfig::default().advertisers);
    }

    #[test]
    fn invalid_rates_rejected() {
        let mut config = RunConfig::default();
        config.world.base_ctr = 1.5;
        assert!(config.world.validate().is_err());
    }
}
