//! Carousel backfill recommender: item-to-item collaborative filtering over
//! co-engagement counts, with a popularity fallback.

use std::collections::BTreeMap;

use crate::click::ProductKey;

/// Per-product engagement counts by user, ingested from feeds.
#[derive(Debug, Clone, Default)]
pub struct RecommendationModel {
    engagements: BTreeMap<ProductKey, BTreeMap<String, u64>>,
}

impl RecommendationModel {
    pub fn new() -> Self {
        RecommendationModel::default()
    }

    pub fn record(&mut self, user_id: &str, product: &ProductKey) {
        *self
            .engagements
            .entry(product.clone())
            .or_default()
            .entry(user_id.to_string())
            .or_insert(0) += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.engagements.is_empty()
    }

    fn norm(counts: &BTreeMap<String, u64>) -> f64 {
        counts
            .values()
            .map(|&c| (c * c) as f64)
            .sum::<f64>()
            .sqrt()
    }

    fn cosine(a: &BTreeMap<String, u64>, b: &BTreeMap<String, u64>) -> f64 {
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let dot: f64 = small
            .iter()
            .filter_map(|(user, &ca)| large.get(user).map(|&cb| (ca * cb) as f64))
            .sum();
        if dot == 0.0 {
            return 0.0;
        }
        dot / (Self::norm(a) * Self::norm(b))
    }

    /// Same-advertiser products ranked by cosine similarity of their
    /// co-engagement vectors with the pivot's; the pivot itself and
    /// never-co-engaged products are excluded. An unseen pivot yields an
    /// empty list.
    pub fn item_to_item(&self, pivot: &ProductKey) -> Vec<(ProductKey, f64)> {
        let Some(pivot_counts) = self.engagements.get(pivot) else {
            return Vec::new();
        };
        let mut ranked: Vec<(ProductKey, f64)> = self
            .engagements
            .iter()
            .filter(|(key, _)| *key != pivot && key.advertiser_id == pivot.advertiser_id)
            .filter_map(|(key, counts)| {
                let sim = Self::cosine(pivot_counts, counts);
                (sim > 0.0).then(|| (key.clone(), sim))
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite similarity")
                .then_with(|| a.0.product_id.cmp(&b.0.product_id))
        });
        ranked
    }

    /// One advertiser's products by total engagement count, most engaged
    /// first.
    pub fn popularity(&self, advertiser_id: &str) -> Vec<ProductKey> {
        let mut ranked: Vec<(&ProductKey, u64)> = self
            .engagements
            .iter()
            .filter(|(key, _)| key.advertiser_id == advertiser_id)
            .map(|(key, counts)| (key, counts.values().sum()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.product_id.cmp(&b.0.product_id)));
        ranked.into_iter().map(|(k, _)| k.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(adv: &str, product: &str) -> ProductKey {
        ProductKey::new(adv, "set", "group", product)
    }

    #[test]
    fn co_purchased_products_have_similarity_one() {
        let mut model = RecommendationModel::new();
        for user in ["u1", "u2", "u3"] {
            model.record(user, &key("adv", "a"));
            model.record(user, &key("adv", "b"));
        }
        let ranked = model.item_to_item(&key("adv", "a"));
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].0, key("adv", "b"));
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn never_co_engaged_products_are_excluded() {
        let mut model = RecommendationModel::new();
        model.record("u1", &key("adv", "a"));
        model.record("u2", &key("adv", "b"));
        assert!(model.item_to_item(&key("adv", "a")).is_empty());
        assert!(model.item_to_item(&key("other", "zz")).is_empty());
    }

    #[test]
    fn other_advertisers_products_never_recommended() {
        let mut model = RecommendationModel::new();
        model.record("u1", &key("adv", "a"));
        model.record("u1", &key("rival", "b"));
        assert!(model.item_to_item(&key("adv", "a")).is_empty());
    }

    #[test]
    fn five_product_fixture_matches_hand_computed_cosines() {
        // Engagement matrix (users x products), counts all 1:
        //        a  b  c  d  e
        //   u1   1  1  1  .  .
        //   u2   1  1  .  .  .
        //   u3   1  .  .  1  .
        //   u4   .  .  .  .  1
        let mut model = RecommendationModel::new();
        let pairs = [
            ("u1", "a"),
            ("u1", "b"),
            ("u1", "c"),
            ("u2", "a"),
            ("u2", "b"),
            ("u3", "a"),
            ("u3", "d"),
            ("u4", "e"),
        ];
        for (user, product) in pairs {
            model.record(user, &key("adv", product));
        }
        let ranked = model.item_to_item(&key("adv", "a"));
        // cos(a,b) = 2/(sqrt(3)*sqrt(2)); cos(a,c) = 1/sqrt(3); cos(a,d) = 1/sqrt(3); e disjoint.
        let expect = [
            ("b", 2.0 / (3f64.sqrt() * 2f64.sqrt())),
            ("c", 1.0 / 3f64.sqrt()),
            ("d", 1.0 / 3f64.sqrt()),
        ];
        assert_eq!(ranked.len(), 3);
        for ((got_key, got_sim), (want_id, want_sim)) in ranked.iter().zip(expect) {
            assert_eq!(got_key.product_id, want_id);
            assert!((got_sim - want_sim).abs() < 1e-12);
        }
    }

    #[test]
    fn popularity_ranks_by_engagement_count() {
        let mut model = RecommendationModel::new();
        for _ in 0..3 {
            model.record("u1", &key("adv", "hot"));
        }
        model.record("u1", &key("adv", "cold"));
        model.record("u1", &key("rival", "other"));
        assert_eq!(
            model.popularity("adv"),
            vec![key("adv", "hot"), key("adv", "cold")]
        );
    }
}
