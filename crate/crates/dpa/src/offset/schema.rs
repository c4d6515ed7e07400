use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Derive the per-feature and combined vector dimensions from the feature
/// count `k`, the pair-block width `o`, and the solo-block width `s`.
///
/// Each of a feature's `k-1` pair blocks interacts with one other feature,
/// and the solo block stands alone, so a single feature value vector has
/// `d = (k-1)*o + s` entries while the combined user (and ad) vector has
/// `D = C(k,2)*o + k*s`.
pub fn derive_dims(k: usize, o: usize, s: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(Error::InvalidSchema("need at least one user feature".into()));
    }
    let d = (k - 1) * o + s;
    let joint = k * (k - 1) / 2 * o + k * s;
    Ok((d, joint))
}

/// Feature layout of a model: which user, ad, and similarity features exist
/// and how wide the pair/solo blocks are.
///
/// The block layout is fixed: a single feature's `d`-vector holds its `k-1`
/// pair blocks (one per other feature, in schema order) followed by its solo
/// block; the combined `D`-vector holds all `C(k,2)` pair blocks in
/// lexicographic `(i,j)` order followed by the `k` solo blocks in schema
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    user_features: Vec<String>,
    pair_width: usize,
    solo_width: usize,
    ad_features: Vec<String>,
    sim_features: Vec<String>,
}

impl FeatureSchema {
    pub fn new(
        user_features: Vec<String>,
        pair_width: usize,
        solo_width: usize,
        ad_features: Vec<String>,
        sim_features: Vec<String>,
    ) -> Result<Self> {
        let (d, _) = derive_dims(user_features.len(), pair_width, solo_width)?;
        if d == 0 {
            return Err(Error::InvalidSchema(
                "feature vector dimension d must be at least 1".into(),
            ));
        }
        for (label, list) in [
            ("user", &user_features),
            ("ad", &ad_features),
            ("sim", &sim_features),
        ] {
            let mut seen = std::collections::BTreeSet::new();
            for name in list {
                if !seen.insert(name.as_str()) {
                    return Err(Error::InvalidSchema(format!(
                        "duplicate {label} feature {name:?}"
                    )));
                }
            }
        }
        Ok(FeatureSchema {
            user_features,
            pair_width,
            solo_width,
            ad_features,
            sim_features,
        })
    }

    pub fn user_features(&self) -> &[String] {
        &self.user_features
    }

    pub fn ad_features(&self) -> &[String] {
        &self.ad_features
    }

    pub fn sim_features(&self) -> &[String] {
        &self.sim_features
    }

    pub fn pair_width(&self) -> usize {
        self.pair_width
    }

    pub fn solo_width(&self) -> usize {
        self.solo_width
    }

    pub fn feature_count(&self) -> usize {
        self.user_features.len()
    }

    /// Dimension of one user feature value vector.
    pub fn user_dim(&self) -> usize {
        let k = self.feature_count();
        (k - 1) * self.pair_width + self.solo_width
    }

    /// Dimension of the combined user vector and of every ad feature vector.
    pub fn joint_dim(&self) -> usize {
        let k = self.feature_count();
        k * (k - 1) / 2 * self.pair_width + k * self.solo_width
    }

    pub fn user_feature_index(&self, name: &str) -> Option<usize> {
        self.user_features.iter().position(|f| f == name)
    }

    pub fn has_sim_feature(&self, name: &str) -> bool {
        self.sim_features.iter().any(|f| f == name)
    }

    /// Offset of feature `feat`'s pair block for partner `other` within the
    /// feature's own `d`-vector.
    pub fn pair_block_in_feature(&self, feat: usize, other: usize) -> usize {
        debug_assert_ne!(feat, other);
        // Partners appear in schema order, skipping the feature itself.
        let slot = if other < feat { other } else { other - 1 };
        slot * self.pair_width
    }

    /// Offset of feature `feat`'s solo block within its own `d`-vector.
    pub fn solo_block_in_feature(&self) -> usize {
        (self.feature_count() - 1) * self.pair_width
    }

    /// Offset of the `(i,j)` pair block (`i < j`) within the combined vector.
    pub fn pair_block_in_joint(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        let k = self.feature_count();
        // Rank of (i,j) in lexicographic pair order.
        let rank = i * k - i * (i + 1) / 2 + (j - i - 1);
        rank * self.pair_width
    }

    /// Offset of feature `feat`'s solo block within the combined vector.
    pub fn solo_block_in_joint(&self, feat: usize) -> usize {
        let k = self.feature_count();
        k * (k - 1) / 2 * self.pair_width + feat * self.solo_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_dims_matches_reference_instance() {
        assert_eq!(derive_dims(3, 4, 2).unwrap(), (10, 18));
    }

    #[test]
    fn derive_dims_degenerate_cases() {
        // No pairs with a single feature: d = s = D.
        assert_eq!(derive_dims(1, 7, 5).unwrap(), (5, 5));
        assert_eq!(derive_dims(4, 2, 3).unwrap(), (9, 24));
    }

    #[test]
    fn derive_dims_rejects_zero_features() {
        assert!(matches!(derive_dims(0, 4, 2), Err(Error::InvalidSchema(_))));
    }

    #[test]
    fn joint_layout_is_a_partition() {
        // Every pair block plus every solo block tiles [0, D) exactly.
        for k in 1..=8usize {
            for o in 0..=6usize {
                for s in 0..=6usize {
                    if (k - 1) * o + s == 0 {
                        continue;
                    }
                    let schema = FeatureSchema::new(
                        (0..k).map(|i| format!("f{i}")).collect(),
                        o,
                        s,
                        vec!["ad".into()],
                        vec![],
                    )
                    .unwrap();
                    let mut covered = vec![false; schema.joint_dim()];
                    for i in 0..k {
                        for j in (i + 1)..k {
                            let base = schema.pair_block_in_joint(i, j);
                            for r in 0..o {
                                assert!(!covered[base + r]);
                                covered[base + r] = true;
                            }
                        }
                    }
                    for i in 0..k {
                        let base = schema.solo_block_in_joint(i);
                        for r in 0..s {
                            assert!(!covered[base + r]);
                            covered[base + r] = true;
                        }
                    }
                    assert!(covered.iter().all(|&c| c));
                }
            }
        }
    }

    #[test]
    fn feature_layout_is_a_partition() {
        let schema = FeatureSchema::new(
            vec!["a".into(), "b".into(), "c".into()],
            4,
            2,
            vec!["ad".into()],
            vec![],
        )
        .unwrap();
        let mut covered = vec![false; schema.user_dim()];
        for other in [1usize, 2] {
            let base = schema.pair_block_in_feature(0, other);
            for r in 0..4 {
                assert!(!covered[base + r]);
                covered[base + r] = true;
            }
        }
        let base = schema.solo_block_in_feature();
        for r in 0..2 {
            covered[base + r] = true;
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn duplicate_feature_names_rejected() {
        let err = FeatureSchema::new(
            vec!["age".into(), "age".into()],
            1,
            1,
            vec!["ad".into()],
            vec![],
        );
        assert!(matches!(err, Err(Error::InvalidSchema(_))));
    }
}
