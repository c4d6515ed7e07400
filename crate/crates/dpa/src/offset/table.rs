use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Which side of the model a table belongs to. Feeds the lazy-init key so
/// user and ad vectors for the same (feature, value) pair differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Ad,
}

impl Side {
    fn tag(&self) -> u8 {
        match self {
            Side::User => b'u',
            Side::Ad => b'a',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TableEntry {
    pub vec: Vec<f64>,
    pub acc: Vec<f64>,
}

/// Latent factor vectors for one side of the model, keyed by
/// (feature name, feature value).
///
/// Vectors are created lazily: the first time a value is touched by training
/// it is drawn from a zero-mean Gaussian whose stream is keyed by
/// (side, feature, value, seed), so the same value always starts from the
/// same vector regardless of when it first appears. Read paths use the same
/// draw without storing it, which keeps prediction on immutable snapshots
/// deterministic too.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    side: Side,
    dim: usize,
    init_variance: f64,
    entries: BTreeMap<(String, String), TableEntry>,
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Stable 64-bit key for one (side, feature, value, seed) stream.
fn stream_key(side: Side, feature: &str, value: &str, seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    h = fnv1a(&[side.tag()], h);
    h = fnv1a(feature.as_bytes(), h);
    h = fnv1a(&[0], h);
    h = fnv1a(value.as_bytes(), h);
    h = fnv1a(&[0], h);
    h = fnv1a(&seed.to_le_bytes(), h);
    h
}

impl LatentTable {
    pub fn new(side: Side, dim: usize, init_variance: f64) -> Self {
        LatentTable {
            side,
            dim,
            init_variance,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn init_variance(&self) -> f64 {
        self.init_variance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, feature: &str, value: &str) -> bool {
        self.entries
            .contains_key(&(feature.to_string(), value.to_string()))
    }

    pub fn get(&self, feature: &str, value: &str) -> Option<&[f64]> {
        self.entries
            .get(&(feature.to_string(), value.to_string()))
            .map(|e| e.vec.as_slice())
    }

    /// The vector a fresh value would be initialized with.
    pub fn init_vector(&self, feature: &str, value: &str, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(self.side, feature, value, seed));
        let normal = Normal::new(0.0, self.init_variance.sqrt()).expect("valid variance");
        (0..self.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Stored vector if present, otherwise the deterministic init draw.
    pub fn resolve(&self, feature: &str, value: &str, seed: u64) -> Vec<f64> {
        match self.get(feature, value) {
            Some(v) => v.to_vec(),
            None => self.init_vector(feature, value, seed),
        }
    }

    /// Materialize the entry, lazily initializing it on first touch.
    pub(crate) fn materialize(&mut self, feature: &str, value: &str, seed: u64) -> &mut TableEntry {
        let key = (feature.to_string(), value.to_string());
        if !self.entries.contains_key(&key) {
            let vec = self.init_vector(feature, value, seed);
            let acc = vec![0.0; self.dim];
            self.entries.insert(key.clone(), TableEntry { vec, acc });
        }
        self.entries.get_mut(&key).expect("just inserted")
    }

    /// Insert an explicit entry (promotion, snapshot load).
    pub(crate) fn insert(&mut self, feature: &str, value: &str, vec: Vec<f64>, acc: Vec<f64>) {
        debug_assert_eq!(vec.len(), self.dim);
        debug_assert_eq!(acc.len(), self.dim);
        self.entries
            .insert((feature.to_string(), value.to_string()), TableEntry { vec, acc });
    }

    pub(crate) fn remove(&mut self, feature: &str, value: &str) -> bool {
        self.entries
            .remove(&(feature.to_string(), value.to_string()))
            .is_some()
    }

    pub(crate) fn entry_mut(&mut self, feature: &str, value: &str) -> Option<&mut TableEntry> {
        self.entries
            .get_mut(&(feature.to_string(), value.to_string()))
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&(String, String), &TableEntry)> {
        self.entries.iter()
    }

    /// Keep only entries whose (feature, value) passes the predicate.
    pub(crate) fn retain(&mut self, mut pred: impl FnMut(&str, &str) -> bool) {
        self.entries.retain(|(f, v), _| pred(f, v));
    }

    /// Values stored under one feature.
    pub fn values_of(&self, feature: &str) -> Vec<&str> {
        self.entries
            .range((feature.to_string(), String::new())..)
            .take_while(|((f, _), _)| f == feature)
            .map(|((_, v), _)| v.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_init_is_deterministic_per_key() {
        let table = LatentTable::new(Side::User, 6, 0.01);
        let a = table.init_vector("age", "20-24", 7);
        let b = table.init_vector("age", "20-24", 7);
        assert_eq!(a, b);
        // Different value, seed, or side changes the draw.
        assert_ne!(a, table.init_vector("age", "25-29", 7));
        assert_ne!(a, table.init_vector("age", "20-24", 8));
        let ad = LatentTable::new(Side::Ad, 6, 0.01);
        assert_ne!(a, ad.init_vector("age", "20-24", 7));
    }

    #[test]
    fn resolve_matches_materialize() {
        let mut table = LatentTable::new(Side::User, 4, 0.01);
        let drawn = table.resolve("f", "x", 3);
        let stored = table.materialize("f", "x", 3).vec.clone();
        assert_eq!(drawn, stored);
        assert_eq!(table.resolve("f", "x", 3), stored);
    }

    #[test]
    fn init_scale_tracks_variance() {
        let table = LatentTable::new(Side::User, 2000, 0.01);
        let v = table.init_vector("f", "x", 1);
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 0.01).abs() < 0.002, "sample variance {var}");
    }
}
