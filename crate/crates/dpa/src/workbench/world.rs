//! Deterministic synthetic world: users with demographics and feature
//! values, a four-level product catalog with assets, and one campaign per
//! product group.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::click::{ProductKey, ProductStats};
use crate::serving::{Assets, CampaignDb, CampaignInfo};
use crate::trendy::Gender;
use crate::workbench::codec::{CatalogEntry, UserProfile};
use crate::workbench::config::WorldConfig;

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<UserProfile>,
    pub catalog: Vec<CatalogEntry>,
    pub campaigns: CampaignDb,
}

impl World {
    pub fn catalog_map(&self) -> BTreeMap<ProductKey, CatalogEntry> {
        self.catalog
            .iter()
            .map(|e| (e.key.clone(), e.clone()))
            .collect()
    }
}

/// Named seed streams keep every generator independent of the others.
pub fn stream_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ index.wrapping_mul(0xd1b54a32d192ed03)
}

fn pick_some(rng: &mut ChaCha8Rng, prefix: &str, vocab: usize, lo: usize, hi: usize) -> Vec<String> {
    let n = rng.gen_range(lo..=hi);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = format!("{prefix}{}", rng.gen_range(0..vocab));
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

pub fn gen_users(config: &WorldConfig) -> Vec<UserProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "users", 0));
    let campaigns_vocab = config.advertisers * config.sets_per_advertiser;
    (0..config.users)
        .map(|i| {
            let unknown = rng.gen_bool(config.unknown_demo_rate);
            let age = if unknown { None } else { Some(rng.gen_range(18..70)) };
            let gender = if unknown {
                Gender::Unknown
            } else if rng.gen_bool(0.5) {
                Gender::Female
            } else {
                Gender::Male
            };
            UserProfile {
                user_id: format!("u{i}"),
                age,
                gender,
                mobile: rng.gen_bool(0.6),
                impression_history_bin: format!("h{}", rng.gen_range(0..5)),
                preferred_sections: pick_some(&mut rng, "sec", config.page_sections, 1, 3),
                techno: pick_some(&mut rng, "t", 30, 1, 3),
                clicked_categories: pick_some(&mut rng, "cat", 20, 1, 5),
                mobile_activities: pick_some(&mut rng, "app", 25, 1, 4),
                ctr_advertisers: pick_some(&mut rng, "a", config.advertisers, 1, 3),
                ctr_campaigns: pick_some(&mut rng, "camp", campaigns_vocab.max(1), 1, 3),
                clicked_product_categories: pick_some(&mut rng, "pcat", 15, 1, 4),
            }
        })
        .collect()
}

pub fn gen_catalog(config: &WorldConfig) -> Vec<CatalogEntry> {
    let mut out = Vec::with_capacity(config.product_count());
    for a in 0..config.advertisers {
        for s in 0..config.sets_per_advertiser {
            for g in 0..config.groups_per_set {
                for p in 0..config.products_per_group {
                    let advertiser = format!("a{a}");
                    let set = format!("a{a}-s{s}");
                    let group = format!("a{a}-s{s}-g{g}");
                    let product = format!("a{a}-s{s}-g{g}-p{p}");
                    out.push(CatalogEntry {
                        key: ProductKey::new(&advertiser, &set, &group, &product),
                        stats: ProductStats::default(),
                        assets: Assets {
                            title: format!("Product {product}"),
                            image_ref: format!("img://{product}.jpg"),
                            description: format!("Catalog item {product} from {advertiser}"),
                        },
                    });
                }
            }
        }
    }
    out
}

pub fn gen_campaigns(config: &WorldConfig, horizon_ts: i64) -> CampaignDb {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "campaigns", 0));
    let mut out = CampaignDb::new();
    for a in 0..config.advertisers {
        for s in 0..config.sets_per_advertiser {
            for g in 0..config.groups_per_set {
                let group = format!("a{a}-s{s}-g{g}");
                let target_genders = if rng.gen_bool(0.1) {
                    vec![if rng.gen_bool(0.5) { Gender::Female } else { Gender::Male }]
                } else {
                    Vec::new()
                };
                let blocked = if rng.gen_bool(0.1) {
                    std::iter::once(format!("sec{}", rng.gen_range(0..config.page_sections)))
                        .collect()
                } else {
                    Default::default()
                };
                out.insert(
                    group.clone(),
                    CampaignInfo {
                        advertiser_id: format!("a{a}"),
                        product_group_id: group,
                        bid_product_group: rng.gen_range(20..=80),
                        budget_remaining: 50_000_000,
                        target_genders,
                        expiration_ts: horizon_ts,
                        blocked_page_sections: blocked,
                    },
                );
            }
        }
    }
    out
}

/// Generate the full world. Deterministic in the config (seed included).
pub fn gen_world(config: &WorldConfig) -> crate::error::Result<World> {
    config.validate()?;
    // Campaigns stay live past the simulated horizon.
    let horizon_ts = (config.days as i64 + 40) * 86_400;
    Ok(World {
        users: gen_users(config),
        catalog: gen_catalog(config),
        campaigns: gen_campaigns(config, horizon_ts),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_deterministic_in_the_seed() {
        let config = WorldConfig {
            users: 50,
            impressions_per_day: 10,
            ..WorldConfig::default()
        };
        let a = gen_world(&config).unwrap();
        let b = gen_world(&config).unwrap();
        assert_eq!(a.users, b.users);
        assert_eq!(a.catalog, b.catalog);
        assert_eq!(a.campaigns, b.campaigns);

        let other = gen_world(&WorldConfig {
            seed: 2,
            ..config
        })
        .unwrap();
        assert_ne!(a.users, other.users);
    }

    #[test]
    fn catalog_size_is_the_product_of_shape_counts() {
        let config = WorldConfig {
            advertisers: 2,
            sets_per_advertiser: 2,
            groups_per_set: 2,
            products_per_group: 5,
            ..WorldConfig::default()
        };
        let world = gen_world(&config).unwrap();
        assert_eq!(world.catalog.len(), 40);
        assert_eq!(world.campaigns.len(), 8);
        // Product ids are unique and map to one path.
        let ids: std::collections::BTreeSet<&str> = world
            .catalog
            .iter()
            .map(|e| e.key.product_id.as_str())
            .collect();
        assert_eq!(ids.len(), 40);
    }
}
