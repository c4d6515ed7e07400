use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::offset::event::Event;
use crate::offset::schema::FeatureSchema;
use crate::offset::table::{LatentTable, Side};

/// Denominator guard for the AdaGrad step size on first touch.
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Clamp range applied to predictions before taking logs.
pub const PRED_CLAMP: f64 = 1e-12;

/// Training hyperparameters. The defaults converge on a constant-rate
/// Bernoulli feed within 10K events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub eta0: f64,
    pub lambda: f64,
    pub init_variance: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            eta0: 0.05,
            lambda: 1e-5,
            init_variance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WeightEntry {
    pub w: f64,
    pub acc: f64,
}

/// Address of one scalar parameter, for gradient introspection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamId {
    Bias,
    User {
        feature: String,
        value: String,
        index: usize,
    },
    Ad {
        feature: String,
        value: String,
        index: usize,
    },
    Sim {
        feature: String,
        bin: String,
    },
}

/// Clamp a probability into `[PRED_CLAMP, 1 - PRED_CLAMP]` so downstream
/// logs and odds ratios stay finite.
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
}

/// Numerically stable logistic function; satisfies
/// `sigmoid(x) + sigmoid(-x) == 1` exactly in floating point.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// All learned parameters of one factorization model: the bias, the user and
/// ad latent tables, and the additive similarity weights, together with the
/// per-parameter AdaGrad accumulators.
///
/// The predicted event probability is `sigmoid(b + dot(v_u, v_a) + sum of
/// present similarity weights)`, where the user vector is built from
/// entry-wise products of per-feature pair blocks plus copied solo blocks,
/// and the ad vector is the sum of the present ad feature vectors.
///
/// Training is single-writer one-pass online gradient descent with AdaGrad
/// step sizes; prediction never mutates, so a frozen clone can serve any
/// number of concurrent readers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub(crate) schema: FeatureSchema,
    pub(crate) bias: f64,
    pub(crate) bias_acc: f64,
    pub(crate) user_table: LatentTable,
    pub(crate) ad_table: LatentTable,
    pub(crate) sim_weights: BTreeMap<(String, String), WeightEntry>,
    pub(crate) hyper: Hyperparams,
    pub(crate) seed: u64,
}

/// Per-feature unique values with their aggregation coefficients
/// `sum(w_i) / sqrt(n)`, where `n` counts listed occurrences.
fn value_coeffs<'a>(values: &'a [(String, f64)]) -> Result<Vec<(&'a str, f64)>> {
    if values.is_empty() {
        return Err(Error::InvalidEvent("empty value list".into()));
    }
    let norm = 1.0 / (values.len() as f64).sqrt();
    let mut out: Vec<(&str, f64)> = Vec::with_capacity(values.len());
    for (value, weight) in values {
        if !weight.is_finite() {
            return Err(Error::InvalidEvent(format!(
                "non-finite weight for value {value:?}"
            )));
        }
        match out.iter_mut().find(|(v, _)| *v == value.as_str()) {
            Some((_, c)) => *c += weight * norm,
            None => out.push((value.as_str(), weight * norm)),
        }
    }
    Ok(out)
}

/// Gradients of one event's loss with respect to every touched parameter.
pub(crate) struct GradSet<'a> {
    pub bias: f64,
    pub user: Vec<(usize, &'a str, Vec<f64>)>,
    pub ad: Vec<(usize, &'a str, Vec<f64>)>,
    pub sim: Vec<(&'a str, &'a str, f64)>,
}

impl ModelState {
    pub fn new(schema: FeatureSchema, hyper: Hyperparams, seed: u64) -> Self {
        let d = schema.user_dim();
        let joint = schema.joint_dim();
        ModelState {
            user_table: LatentTable::new(Side::User, d, hyper.init_variance),
            ad_table: LatentTable::new(Side::Ad, joint, hyper.init_variance),
            schema,
            bias: 0.0,
            bias_acc: 0.0,
            sim_weights: BTreeMap::new(),
            hyper,
            seed,
        }
    }

    pub fn with_defaults(schema: FeatureSchema, seed: u64) -> Self {
        ModelState::new(schema, Hyperparams::default(), seed)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn hyper(&self) -> Hyperparams {
        self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn user_table(&self) -> &LatentTable {
        &self.user_table
    }

    pub fn ad_table(&self) -> &LatentTable {
        &self.ad_table
    }

    pub(crate) fn ad_table_mut(&mut self) -> &mut LatentTable {
        &mut self.ad_table
    }

    pub fn sim_weight(&self, feature: &str, bin: &str) -> f64 {
        self.sim_weights
            .get(&(feature.to_string(), bin.to_string()))
            .map_or(0.0, |e| e.w)
    }

    /// Weighted multi-value aggregation: `(1/sqrt(n)) * sum w_i * v(value_i)`
    /// over the stored (or lazily drawn) vectors of one user feature.
    pub fn aggregate_user_feature(&self, feature: &str, values: &[(String, f64)]) -> Result<Vec<f64>> {
        let coeffs = value_coeffs(values)?;
        let mut out = vec![0.0; self.user_table.dim()];
        for (value, coeff) in coeffs {
            let vec = self.user_table.resolve(feature, value, self.seed);
            for (o, v) in out.iter_mut().zip(vec.iter()) {
                *o += coeff * v;
            }
        }
        Ok(out)
    }

    fn user_aggregates(&self, event: &Event) -> Result<Vec<Vec<f64>>> {
        self.schema
            .user_features()
            .iter()
            .map(|feature| {
                let values = event
                    .user_values
                    .get(feature)
                    .ok_or_else(|| Error::IncompleteEvent(format!("user feature {feature:?}")))?;
                self.aggregate_user_feature(feature, values)
            })
            .collect()
    }

    /// Combined user vector: entry-wise products of matching pair blocks in
    /// lexicographic (i,j) order, then the solo blocks in schema order.
    pub fn build_user_vector(&self, event: &Event) -> Result<Vec<f64>> {
        let aggs = self.user_aggregates(event)?;
        Ok(self.combine_user_aggregates(&aggs))
    }

    fn combine_user_aggregates(&self, aggs: &[Vec<f64>]) -> Vec<f64> {
        let schema = &self.schema;
        let k = schema.feature_count();
        let o = schema.pair_width();
        let s = schema.solo_width();
        let mut out = vec![0.0; schema.joint_dim()];
        for i in 0..k {
            for j in (i + 1)..k {
                let dst = schema.pair_block_in_joint(i, j);
                let bi = schema.pair_block_in_feature(i, j);
                let bj = schema.pair_block_in_feature(j, i);
                for r in 0..o {
                    out[dst + r] = aggs[i][bi + r] * aggs[j][bj + r];
                }
            }
        }
        let solo = schema.solo_block_in_feature();
        for i in 0..k {
            let dst = schema.solo_block_in_joint(i);
            out[dst..dst + s].copy_from_slice(&aggs[i][solo..solo + s]);
        }
        out
    }

    /// Ad vector: sum of the present ad features' vectors.
    pub fn build_ad_vector(&self, event: &Event) -> Result<Vec<f64>> {
        self.ad_vector_from(&event.ad_values)
    }

    pub fn ad_vector_from(&self, ad_values: &BTreeMap<String, String>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.ad_table.dim()];
        let mut any = false;
        for feature in self.schema.ad_features() {
            if let Some(value) = ad_values.get(feature) {
                any = true;
                let vec = self.ad_table.resolve(feature, value, self.seed);
                for (o, v) in out.iter_mut().zip(vec.iter()) {
                    *o += v;
                }
            }
        }
        if !any {
            return Err(Error::IncompleteEvent("no ad features present".into()));
        }
        Ok(out)
    }

    /// Sum of similarity weights over the event's bins (absent weights are 0).
    pub fn sim_sum(&self, sim_bins: &BTreeMap<String, String>) -> f64 {
        sim_bins
            .iter()
            .filter(|(f, _)| self.schema.has_sim_feature(f))
            .map(|(f, bin)| self.sim_weight(f, bin))
            .sum()
    }

    pub fn score_parts(
        &self,
        user_vec: &[f64],
        ad_vec: &[f64],
        sim_bins: &BTreeMap<String, String>,
    ) -> f64 {
        let dot: f64 = user_vec.iter().zip(ad_vec.iter()).map(|(u, a)| u * a).sum();
        self.bias + dot + self.sim_sum(sim_bins)
    }

    /// Raw score `b + dot(v_u, v_a) + sum of similarity weights`.
    pub fn score(&self, event: &Event) -> Result<f64> {
        let user_vec = self.build_user_vector(event)?;
        let ad_vec = self.build_ad_vector(event)?;
        Ok(self.score_parts(&user_vec, &ad_vec, &event.sim_bins))
    }

    /// Predicted event probability `sigmoid(score)`.
    pub fn predict(&self, event: &Event) -> Result<f64> {
        Ok(sigmoid(self.score(event)?))
    }

    /// Single-event loss: clamped log loss plus the L2 term of the
    /// parameters this event touches. Used by the gradient oracle.
    pub fn loss(&self, event: &Event) -> Result<f64> {
        let p = self.predict(event)?.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        let y = event.label as f64;
        let data = -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
        let mut sq = self.bias * self.bias;
        for (feature, values) in self.touched_user_values(event)? {
            for (value, _) in value_coeffs(values)? {
                let v = self.user_table.resolve(feature, value, self.seed);
                sq += v.iter().map(|x| x * x).sum::<f64>();
            }
        }
        for (feature, value) in self.touched_ad_values(event)? {
            let v = self.ad_table.resolve(feature, value, self.seed);
            sq += v.iter().map(|x| x * x).sum::<f64>();
        }
        for (feature, bin) in self.touched_sims(event) {
            let w = self.sim_weight(feature, bin);
            sq += w * w;
        }
        Ok(data + 0.5 * self.hyper.lambda * sq)
    }

    fn touched_user_values<'a>(&'a self, event: &'a Event) -> Result<Vec<(&'a str, &'a [(String, f64)])>> {
        self.schema
            .user_features()
            .iter()
            .map(|feature| {
                event
                    .user_values
                    .get(feature)
                    .map(|v| (feature.as_str(), v.as_slice()))
                    .ok_or_else(|| Error::IncompleteEvent(format!("user feature {feature:?}")))
            })
            .collect()
    }

    fn touched_ad_values<'a>(&'a self, event: &'a Event) -> Result<Vec<(&'a str, &'a str)>> {
        let present: Vec<_> = self
            .schema
            .ad_features()
            .iter()
            .filter_map(|f| event.ad_values.get(f).map(|v| (f.as_str(), v.as_str())))
            .collect();
        if present.is_empty() {
            return Err(Error::IncompleteEvent("no ad features present".into()));
        }
        Ok(present)
    }

    fn touched_sims<'a>(&self, event: &'a Event) -> Vec<(&'a str, &'a str)> {
        event
            .sim_bins
            .iter()
            .filter(|(f, _)| self.schema.has_sim_feature(f))
            .map(|(f, b)| (f.as_str(), b.as_str()))
            .collect()
    }

    /// Analytic gradients of `loss(event)` for every touched parameter.
    pub(crate) fn compute_gradients<'a>(&self, event: &'a Event) -> Result<GradSet<'a>> {
        if event.label > 1 {
            return Err(Error::InvalidEvent(format!(
                "label {} not in {{0,1}}",
                event.label
            )));
        }
        let schema = &self.schema;
        let aggs = self.user_aggregates(event)?;
        let user_vec = self.combine_user_aggregates(&aggs);
        let ad_vec = self.build_ad_vector(event)?;
        let score = self.score_parts(&user_vec, &ad_vec, &event.sim_bins);
        let p = sigmoid(score);
        let err = p - event.label as f64;
        let lambda = self.hyper.lambda;

        let k = schema.feature_count();
        let o = schema.pair_width();
        let s = schema.solo_width();

        // d(score)/d(agg_k): pair entries see the partner block of the other
        // feature times the matching ad entries; solo entries see the ad
        // entries directly.
        let mut partners: Vec<Vec<f64>> = Vec::with_capacity(k);
        for i in 0..k {
            let mut partner = vec![0.0; schema.user_dim()];
            for j in 0..k {
                if j == i {
                    continue;
                }
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                let dst = schema.pair_block_in_joint(lo, hi);
                let bi = schema.pair_block_in_feature(i, j);
                let bj = schema.pair_block_in_feature(j, i);
                for r in 0..o {
                    partner[bi + r] = ad_vec[dst + r] * aggs[j][bj + r];
                }
            }
            let solo = schema.solo_block_in_feature();
            let dst = schema.solo_block_in_joint(i);
            partner[solo..solo + s].copy_from_slice(&ad_vec[dst..dst + s]);
            partners.push(partner);
        }

        let mut user_grads = Vec::new();
        for (i, feature) in schema.user_features().iter().enumerate() {
            let values = &event.user_values[feature];
            for (value, coeff) in value_coeffs(values)? {
                let stored = self.user_table.resolve(feature, value, self.seed);
                let grad: Vec<f64> = partners[i]
                    .iter()
                    .zip(stored.iter())
                    .map(|(pt, th)| err * coeff * pt + lambda * th)
                    .collect();
                user_grads.push((i, value, grad));
            }
        }

        let mut ad_grads = Vec::new();
        for (fi, feature) in schema.ad_features().iter().enumerate() {
            if let Some(value) = event.ad_values.get(feature) {
                let stored = self.ad_table.resolve(feature, value, self.seed);
                let grad: Vec<f64> = user_vec
                    .iter()
                    .zip(stored.iter())
                    .map(|(uv, th)| err * uv + lambda * th)
                    .collect();
                ad_grads.push((fi, value.as_str(), grad));
            }
        }

        let sim_grads = self
            .touched_sims(event)
            .into_iter()
            .map(|(f, b)| (f, b, err + lambda * self.sim_weight(f, b)))
            .collect();

        Ok(GradSet {
            bias: err + lambda * self.bias,
            user: user_grads,
            ad: ad_grads,
            sim: sim_grads,
        })
    }

    /// Owned view of the analytic gradients, for external oracles.
    pub fn gradients(&self, event: &Event) -> Result<Vec<(ParamId, f64)>> {
        let grads = self.compute_gradients(event)?;
        let schema = &self.schema;
        let mut out = vec![(ParamId::Bias, grads.bias)];
        for (i, value, grad) in grads.user {
            let feature = schema.user_features()[i].clone();
            for (index, g) in grad.into_iter().enumerate() {
                out.push((
                    ParamId::User {
                        feature: feature.clone(),
                        value: value.to_string(),
                        index,
                    },
                    g,
                ));
            }
        }
        for (fi, value, grad) in grads.ad {
            let feature = schema.ad_features()[fi].clone();
            for (index, g) in grad.into_iter().enumerate() {
                out.push((
                    ParamId::Ad {
                        feature: feature.clone(),
                        value: value.to_string(),
                        index,
                    },
                    g,
                ));
            }
        }
        for (f, b, g) in grads.sim {
            out.push((
                ParamId::Sim {
                    feature: f.to_string(),
                    bin: b.to_string(),
                },
                g,
            ));
        }
        Ok(out)
    }

    /// Current value of one parameter (the lazy-init draw if untouched).
    pub fn param(&self, id: &ParamId) -> f64 {
        match id {
            ParamId::Bias => self.bias,
            ParamId::User {
                feature,
                value,
                index,
            } => self.user_table.resolve(feature, value, self.seed)[*index],
            ParamId::Ad {
                feature,
                value,
                index,
            } => self.ad_table.resolve(feature, value, self.seed)[*index],
            ParamId::Sim { feature, bin } => self.sim_weight(feature, bin),
        }
    }

    /// Overwrite one parameter, materializing its entry if needed.
    pub fn set_param(&mut self, id: &ParamId, x: f64) {
        let seed = self.seed;
        match id {
            ParamId::Bias => self.bias = x,
            ParamId::User {
                feature,
                value,
                index,
            } => self.user_table.materialize(feature, value, seed).vec[*index] = x,
            ParamId::Ad {
                feature,
                value,
                index,
            } => self.ad_table.materialize(feature, value, seed).vec[*index] = x,
            ParamId::Sim { feature, bin } => {
                self.sim_weights
                    .entry((feature.clone(), bin.clone()))
                    .or_insert(WeightEntry { w: 0.0, acc: 0.0 })
                    .w = x;
            }
        }
    }

    /// Lazily initialize every parameter the event touches.
    pub fn materialize(&mut self, event: &Event) -> Result<()> {
        let seed = self.seed;
        let user_features: Vec<String> = self.schema.user_features().to_vec();
        for feature in &user_features {
            let values = event
                .user_values
                .get(feature)
                .ok_or_else(|| Error::IncompleteEvent(format!("user feature {feature:?}")))?;
            for (value, _) in value_coeffs(values)? {
                self.user_table.materialize(feature, value, seed);
            }
        }
        let ad_present: Vec<(String, String)> = self
            .schema
            .ad_features()
            .iter()
            .filter_map(|f| event.ad_values.get(f).map(|v| (f.clone(), v.clone())))
            .collect();
        if ad_present.is_empty() {
            return Err(Error::IncompleteEvent("no ad features present".into()));
        }
        for (feature, value) in ad_present {
            self.ad_table.materialize(&feature, &value, seed);
        }
        let sims: Vec<(String, String)> = self
            .touched_sims(event)
            .into_iter()
            .map(|(f, b)| (f.to_string(), b.to_string()))
            .collect();
        for key in sims {
            self.sim_weights
                .entry(key)
                .or_insert(WeightEntry { w: 0.0, acc: 0.0 });
        }
        Ok(())
    }

    /// One online gradient descent step with AdaGrad step sizes. Only
    /// parameters reachable from the event (plus the bias) change.
    pub fn train_step(&mut self, event: &Event) -> Result<()> {
        self.materialize(event)?;
        let eta0 = self.hyper.eta0;
        let step = |theta: &mut f64, acc: &mut f64, g: f64| {
            *acc += g * g;
            *theta -= eta0 / (*acc + ADAGRAD_EPS).sqrt() * g;
        };

        let grads = self.compute_gradients(event)?;
        let user_updates: Vec<(String, String, Vec<f64>)> = grads
            .user
            .iter()
            .map(|(i, value, grad)| {
                (
                    self.schema.user_features()[*i].clone(),
                    value.to_string(),
                    grad.clone(),
                )
            })
            .collect();
        let ad_updates: Vec<(String, String, Vec<f64>)> = grads
            .ad
            .iter()
            .map(|(fi, value, grad)| {
                (
                    self.schema.ad_features()[*fi].clone(),
                    value.to_string(),
                    grad.clone(),
                )
            })
            .collect();
        let sim_updates: Vec<(String, String, f64)> = grads
            .sim
            .iter()
            .map(|(f, b, g)| (f.to_string(), b.to_string(), *g))
            .collect();
        let bias_grad = grads.bias;

        step(&mut self.bias, &mut self.bias_acc, bias_grad);
        for (feature, value, grad) in user_updates {
            let entry = self
                .user_table
                .entry_mut(&feature, &value)
                .expect("materialized above");
            for (idx, g) in grad.into_iter().enumerate() {
                step(&mut entry.vec[idx], &mut entry.acc[idx], g);
            }
        }
        for (feature, value, grad) in ad_updates {
            let entry = self
                .ad_table
                .entry_mut(&feature, &value)
                .expect("materialized above");
            for (idx, g) in grad.into_iter().enumerate() {
                step(&mut entry.vec[idx], &mut entry.acc[idx], g);
            }
        }
        for (feature, bin, g) in sim_updates {
            let entry = self
                .sim_weights
                .get_mut(&(feature, bin))
                .expect("materialized above");
            step(&mut entry.w, &mut entry.acc, g);
        }
        Ok(())
    }

    /// Fold `train_step` over a time-ordered batch.
    pub fn train_batch(&mut self, events: &[Event]) -> Result<()> {
        for (index, event) in events.iter().enumerate() {
            self.train_step(event).map_err(|e| e.at_event(index))?;
        }
        Ok(())
    }

    /// Produce an immutable serving snapshot.
    pub fn freeze(&self) -> FrozenModel {
        FrozenModel {
            inner: self.clone(),
        }
    }
}

/// Immutable model snapshot. Safe to share across any number of concurrent
/// readers; there is no mutation surface.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    inner: ModelState,
}

impl FrozenModel {
    pub fn schema(&self) -> &FeatureSchema {
        self.inner.schema()
    }

    pub fn bias(&self) -> f64 {
        self.inner.bias()
    }

    pub fn predict(&self, event: &Event) -> Result<f64> {
        self.inner.predict(event)
    }

    pub fn score(&self, event: &Event) -> Result<f64> {
        self.inner.score(event)
    }

    /// Combined user vector, for callers that score one user against many ads.
    pub fn user_vector(&self, event: &Event) -> Result<Vec<f64>> {
        self.inner.build_user_vector(event)
    }

    /// Ad vector built from an explicit feature assignment.
    pub fn ad_vector_from(&self, ad_values: &BTreeMap<String, String>) -> Result<Vec<f64>> {
        self.inner.ad_vector_from(ad_values)
    }

    /// Prediction from precomputed vectors; identical to `predict` on the
    /// equivalent event.
    pub fn predict_parts(
        &self,
        user_vec: &[f64],
        ad_vec: &[f64],
        sim_bins: &BTreeMap<String, String>,
    ) -> f64 {
        sigmoid(self.inner.score_parts(user_vec, ad_vec, sim_bins))
    }

    pub fn as_model(&self) -> &ModelState {
        &self.inner
    }

    pub fn into_model(self) -> ModelState {
        self.inner
    }

    /// Restrict one ad feature to an allowed value set (model publication).
    pub(crate) fn retain_ad_values(&mut self, feature: &str, keep: impl Fn(&str) -> bool) {
        self.inner
            .ad_table
            .retain(|f, v| f != feature || keep(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offset::event::EventKind;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn schema(k: usize, o: usize, s: usize) -> FeatureSchema {
        FeatureSchema::new(
            (0..k).map(|i| format!("uf{i}")).collect(),
            o,
            s,
            vec!["af0".into(), "af1".into(), "af2".into(), "af3".into()],
            vec!["recency".into(), "slot-device".into()],
        )
        .unwrap()
    }

    fn set_user_vec(model: &mut ModelState, feature: &str, value: &str, vec: Vec<f64>) {
        let acc = vec![0.0; vec.len()];
        model.user_table.insert(feature, value, vec, acc);
    }

    fn set_ad_vec(model: &mut ModelState, feature: &str, value: &str, vec: Vec<f64>) {
        let acc = vec![0.0; vec.len()];
        model.ad_table.insert(feature, value, vec, acc);
    }

    #[test]
    fn aggregate_single_value_is_identity() {
        let mut model = ModelState::with_defaults(schema(2, 2, 1), 1);
        set_user_vec(&mut model, "uf0", "x", vec![1.0, -2.0, 0.5]);
        let agg = model
            .aggregate_user_feature("uf0", &[("x".into(), 1.0)])
            .unwrap();
        assert_eq!(agg, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn aggregate_duplicate_value_scales_by_sqrt2() {
        let mut model = ModelState::with_defaults(schema(2, 2, 1), 1);
        set_user_vec(&mut model, "uf0", "x", vec![1.0, -2.0, 0.5]);
        let agg = model
            .aggregate_user_feature("uf0", &[("x".into(), 1.0), ("x".into(), 1.0)])
            .unwrap();
        let expect: Vec<f64> = [1.0, -2.0, 0.5].iter().map(|v| 2.0 / 2f64.sqrt() * v).collect();
        for (a, e) in agg.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_weighted_pair_hand_computed() {
        // [(x, 2), (y, 0)] -> (1/sqrt(2)) * (2*v(x) + 0*v(y)) = sqrt(2)*v(x)
        let mut model = ModelState::with_defaults(schema(2, 2, 1), 1);
        set_user_vec(&mut model, "uf0", "x", vec![0.3, 0.1, -0.7]);
        set_user_vec(&mut model, "uf0", "y", vec![5.0, 5.0, 5.0]);
        let agg = model
            .aggregate_user_feature("uf0", &[("x".into(), 2.0), ("y".into(), 0.0)])
            .unwrap();
        for (a, v) in agg.iter().zip(&[0.3, 0.1, -0.7]) {
            assert!((a - 2.0 / 2f64.sqrt() * v).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_rejects_non_finite_weight() {
        let model = ModelState::with_defaults(schema(2, 2, 1), 1);
        let err = model.aggregate_user_feature("uf0", &[("x".into(), f64::NAN)]);
        assert!(matches!(err, Err(Error::InvalidEvent(_))));
    }

    #[test]
    fn user_vector_all_ones_stays_all_ones() {
        for (k, o, s) in [(2usize, 1usize, 0usize), (3, 4, 2), (5, 2, 3), (1, 0, 4)] {
            let sch = schema(k, o, s);
            let d = sch.user_dim();
            let mut model = ModelState::with_defaults(sch, 1);
            let mut event = Event::new(EventKind::Click, 1, 0);
            for i in 0..k {
                set_user_vec(&mut model, &format!("uf{i}"), "v", vec![1.0; d]);
                event = event.with_user_value(&format!("uf{i}"), "v");
            }
            let got = model.build_user_vector(&event).unwrap();
            assert_eq!(got, vec![1.0; model.schema().joint_dim()]);
        }
    }

    #[test]
    fn user_vector_single_pair_product() {
        let sch = FeatureSchema::new(
            vec!["f0".into(), "f1".into()],
            1,
            0,
            vec!["a".into()],
            vec![],
        )
        .unwrap();
        let mut model = ModelState::with_defaults(sch, 1);
        set_user_vec(&mut model, "f0", "x", vec![3.0]);
        set_user_vec(&mut model, "f1", "y", vec![5.0]);
        let event = Event::new(EventKind::Click, 1, 0)
            .with_user_value("f0", "x")
            .with_user_value("f1", "y");
        assert_eq!(model.build_user_vector(&event).unwrap(), vec![15.0]);
    }

    /// Independent re-derivation of the block layout: push pair blocks in
    /// lexicographic order, then solo blocks, recomputing every offset from
    /// first principles.
    fn oracle_user_vector(k: usize, o: usize, s: usize, aggs: &[Vec<f64>]) -> Vec<f64> {
        let slot = |feat: usize, other: usize| -> usize {
            (0..k).filter(|&j| j != feat).position(|j| j == other).unwrap()
        };
        let mut out = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                for r in 0..o {
                    out.push(aggs[i][slot(i, j) * o + r] * aggs[j][slot(j, i) * o + r]);
                }
            }
        }
        for agg in aggs.iter().take(k) {
            for r in 0..s {
                out.push(agg[(k - 1) * o + r]);
            }
        }
        out
    }

    #[test]
    fn user_vector_matches_scalar_loop_oracle() {
        let (k, o, s) = (3usize, 4usize, 2usize);
        let sch = schema(k, o, s);
        let d = sch.user_dim();
        let mut model = ModelState::with_defaults(sch, 1);
        let mut rng = StdRng::seed_from_u64(9);
        let mut event = Event::new(EventKind::Click, 1, 0);
        let mut aggs = Vec::new();
        for i in 0..k {
            let vec: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set_user_vec(&mut model, &format!("uf{i}"), "v", vec.clone());
            aggs.push(vec);
            event = event.with_user_value(&format!("uf{i}"), "v");
        }
        let got = model.build_user_vector(&event).unwrap();
        let want = oracle_user_vector(k, o, s, &aggs);
        assert_eq!(got.len(), 18);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn ad_vector_sums_and_cancels() {
        let sch = schema(2, 2, 1);
        let joint = sch.joint_dim();
        let mut model = ModelState::with_defaults(sch, 1);
        let v: Vec<f64> = (0..joint).map(|i| i as f64 + 1.0).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        set_ad_vec(&mut model, "af0", "p", v.clone());
        set_ad_vec(&mut model, "af1", "q", neg);

        let single = Event::new(EventKind::Click, 1, 0).with_ad("af0", "p");
        assert_eq!(model.build_ad_vector(&single).unwrap(), v);

        let both = single.clone().with_ad("af1", "q");
        assert_eq!(model.build_ad_vector(&both).unwrap(), vec![0.0; joint]);

        let empty = Event::new(EventKind::Click, 1, 0);
        assert!(matches!(
            model.build_ad_vector(&empty),
            Err(Error::IncompleteEvent(_))
        ));
    }

    #[test]
    fn ad_vector_four_level_sum_matches_scalar_loop() {
        let sch = schema(2, 2, 1);
        let joint = sch.joint_dim();
        let mut model = ModelState::with_defaults(sch, 1);
        let mut rng = StdRng::seed_from_u64(11);
        let mut event = Event::new(EventKind::Click, 1, 0);
        let mut vecs = Vec::new();
        for i in 0..4 {
            let v: Vec<f64> = (0..joint).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set_ad_vec(&mut model, &format!("af{i}"), "x", v.clone());
            vecs.push(v);
            event = event.with_ad(&format!("af{i}"), "x");
        }
        let got = model.build_ad_vector(&event).unwrap();
        for t in 0..joint {
            let want: f64 = vecs.iter().map(|v| v[t]).sum();
            assert!((got[t] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn score_is_additive_in_bias_and_sim_weights() {
        let sch = schema(1, 0, 2);
        let mut model = ModelState::with_defaults(sch, 1);
        set_user_vec(&mut model, "uf0", "v", vec![0.0, 0.0]);
        set_ad_vec(&mut model, "af0", "p", vec![1.0, 1.0]);
        model.bias = 0.3;
        model.sim_weights.insert(
            ("slot-device".into(), "slot1_nonMobile".into()),
            WeightEntry { w: -0.1, acc: 0.0 },
        );
        let event = Event::new(EventKind::Click, 1, 0)
            .with_user_value("uf0", "v")
            .with_ad("af0", "p")
            .with_sim("slot-device", "slot1_nonMobile");
        let s = model.score(&event).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
    }

    #[test]
    fn predict_known_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-9);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn predict_symmetry_and_monotonicity() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..2000 {
            let x: f64 = rng.gen_range(-30.0..30.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
        for _ in 0..2000 {
            let x: f64 = rng.gen_range(-20.0..20.0);
            let gap: f64 = rng.gen_range(1e-6..2.0);
            assert!(sigmoid(x + gap) > sigmoid(x));
        }
    }

    #[test]
    fn zero_loss_event_leaves_parameters_in_place() {
        let sch = schema(1, 0, 2);
        let mut model = ModelState::new(
            sch,
            Hyperparams {
                lambda: 0.0,
                ..Hyperparams::default()
            },
            1,
        );
        set_user_vec(&mut model, "uf0", "v", vec![0.0, 0.0]);
        set_ad_vec(&mut model, "af0", "p", vec![0.0, 0.0]);
        // sigmoid(bias) == 1 - 1e-12
        model.bias = -((1e-12f64) / (1.0 - 1e-12)).ln();
        let event = Event::new(EventKind::Click, 1, 0)
            .with_user_value("uf0", "v")
            .with_ad("af0", "p");
        assert!((model.predict(&event).unwrap() - (1.0 - 1e-12)).abs() < 1e-13);

        for (_, g) in model.gradients(&event).unwrap() {
            assert!(g.abs() < 1e-9, "gradient {g} not ~0");
        }
        let before = model.clone();
        model.train_step(&event).unwrap();
        assert!((model.bias - before.bias).abs() < 1e-9);
        for ((_, a), (_, b)) in model.user_table.iter().zip(before.user_table.iter()) {
            for (x, y) in a.vec.iter().zip(&b.vec) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    fn random_event(rng: &mut StdRng, k: usize) -> Event {
        let mut event = Event::new(EventKind::Click, rng.gen_range(0..=1), 0);
        for i in 0..k {
            let n = rng.gen_range(1..=3);
            let values: Vec<(String, f64)> = (0..n)
                .map(|_| {
                    (
                        format!("v{}", rng.gen_range(0..4)),
                        rng.gen_range(-1.5..1.5),
                    )
                })
                .collect();
            event = event.with_user(&format!("uf{i}"), values);
        }
        for i in 0..4 {
            if i == 0 || rng.gen_bool(0.7) {
                event = event.with_ad(&format!("af{i}"), &format!("x{}", rng.gen_range(0..3)));
            }
        }
        if rng.gen_bool(0.8) {
            event = event.with_sim("recency", "<1d");
        }
        if rng.gen_bool(0.5) {
            event = event.with_sim("slot-device", "slot2_mobile");
        }
        event
    }

    /// Central finite differences of the per-event loss, parameter by
    /// parameter, against the analytic gradients.
    fn check_gradients(model: &ModelState, event: &Event) {
        let h = 1e-4;
        for (id, analytic) in model.gradients(event).unwrap() {
            let base = model.param(&id);
            let mut plus = model.clone();
            plus.set_param(&id, base + h);
            let mut minus = model.clone();
            minus.set_param(&id, base - h);
            let numeric = (plus.loss(event).unwrap() - minus.loss(event).unwrap()) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-4 {
                let rel = (analytic - numeric).abs() / scale;
                assert!(
                    rel < 1e-5,
                    "{id:?}: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            } else {
                assert!(
                    (analytic - numeric).abs() < 1e-9,
                    "{id:?}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(77);
        for trial in 0..40 {
            let k = rng.gen_range(1..=3);
            let o = rng.gen_range(0..=3);
            let s = rng.gen_range(0..=2);
            if (k - 1) * o + s == 0 {
                continue;
            }
            let mut model = ModelState::with_defaults(schema(k, o, s), trial);
            // Walk the model off its initialization first.
            for _ in 0..20 {
                let ev = random_event(&mut rng, k);
                model.train_step(&ev).unwrap();
            }
            let probe = random_event(&mut rng, k);
            check_gradients(&model, &probe);
        }
    }

    #[test]
    fn train_rejects_bad_label() {
        let mut model = ModelState::with_defaults(schema(1, 0, 2), 1);
        let mut event = Event::new(EventKind::Click, 2, 0)
            .with_user_value("uf0", "v")
            .with_ad("af0", "p");
        assert!(matches!(
            model.train_step(&event),
            Err(Error::InvalidEvent(_))
        ));
        event.label = 1;
        assert!(model.train_step(&event).is_ok());
    }

    #[test]
    fn train_batch_folds_in_order_and_is_deterministic() {
        let sch = schema(2, 2, 1);
        let mut rng = StdRng::seed_from_u64(3);
        let events: Vec<Event> = (0..50).map(|_| random_event(&mut rng, 2)).collect();

        let mut unchanged = ModelState::with_defaults(sch.clone(), 9);
        let before = unchanged.clone();
        unchanged.train_batch(&[]).unwrap();
        assert_eq!(unchanged, before);

        let mut stepped = ModelState::with_defaults(sch.clone(), 9);
        stepped.train_step(&events[0]).unwrap();
        let mut batched = ModelState::with_defaults(sch.clone(), 9);
        batched.train_batch(&events[0..1]).unwrap();
        assert_eq!(stepped, batched);

        let mut run1 = ModelState::with_defaults(sch.clone(), 9);
        run1.train_batch(&events).unwrap();
        let mut run2 = ModelState::with_defaults(sch, 9);
        run2.train_batch(&events).unwrap();
        assert_eq!(run1, run2);
    }

    #[test]
    fn training_touches_only_reachable_parameters() {
        let sch = schema(2, 2, 1);
        let mut model = ModelState::with_defaults(sch, 4);
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..30 {
            let ev = random_event(&mut rng, 2);
            model.train_step(&ev).unwrap();
        }
        let before = model.clone();
        let event = Event::new(EventKind::Click, 1, 0)
            .with_user_value("uf0", "v0")
            .with_user_value("uf1", "v1")
            .with_ad("af0", "x0")
            .with_sim("recency", "<1d");
        model.train_step(&event).unwrap();

        for ((key, b), (_, a)) in before.user_table.iter().zip(model.user_table.iter()) {
            let touched = (key.0 == "uf0" && key.1 == "v0") || (key.0 == "uf1" && key.1 == "v1");
            if !touched {
                assert_eq!(b.vec, a.vec, "untouched user vector {key:?} changed");
            }
        }
        for ((key, b), (_, a)) in before.ad_table.iter().zip(model.ad_table.iter()) {
            if !(key.0 == "af0" && key.1 == "x0") {
                assert_eq!(b.vec, a.vec, "untouched ad vector {key:?} changed");
            }
        }
        for (key, b) in &before.sim_weights {
            if key.0 != "recency" {
                assert_eq!(b.w, model.sim_weights[key].w);
            }
        }
    }

    #[test]
    fn bernoulli_calibration_converges() {
        // Constant feature on each side, labels i.i.d. Bernoulli(0.3).
        let sch = FeatureSchema::new(
            vec!["u".into()],
            0,
            4,
            vec!["a".into()],
            vec![],
        )
        .unwrap();
        let mut model = ModelState::with_defaults(sch, 17);
        let mut rng = StdRng::seed_from_u64(0xbe57);
        let make = |label: u8, ts: i64| {
            Event::new(EventKind::Click, label, ts)
                .with_user_value("u", "only")
                .with_ad("a", "only")
        };
        for t in 0..10_000 {
            let label = u8::from(rng.gen_bool(0.3));
            model.train_step(&make(label, t)).unwrap();
        }
        let p = model.predict(&make(0, 10_000)).unwrap();
        assert!((0.28..=0.32).contains(&p), "probe prediction {p}");
    }
}
