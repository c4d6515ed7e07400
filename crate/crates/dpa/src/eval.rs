//! Evaluation harness: log loss, AUC, lifts, wrapper forward selection, and
//! the CPA / advertiser-happiness / bucket-lift business reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offset::{clamp_probability, Event, FeatureSchema, Hyperparams, ModelState};
use crate::Cents;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub logloss: f64,
    pub auc: f64,
    pub n_events: usize,
    pub n_positives: usize,
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidInput(format!("label {bad} not in {{0,1}}")));
    }
    Ok(())
}

/// Summed logistic loss over clamped predictions.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    check_labels(labels)?;
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let q = clamp_probability(p);
            if y == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum())
}

/// Probability that a random (positive, negative) pair is ordered correctly,
/// ties counting half. Computed from rank statistics; exactly equal to the
/// O(n^2) pairwise count.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    check_labels(labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average rank within each tie group (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Percent improvement of `metric_model` over `metric_baseline`.
pub fn lift(metric_model: f64, metric_baseline: f64, direction: Direction) -> Result<f64> {
    if metric_model <= 0.0 || metric_baseline <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "lift needs positive metrics, got {metric_model} and {metric_baseline}"
        )));
    }
    Ok(match direction {
        Direction::HigherBetter => (metric_model / metric_baseline - 1.0) * 100.0,
        Direction::LowerBetter => (metric_baseline / metric_model - 1.0) * 100.0,
    })
}

/// Predict every event and report log loss and AUC.
pub fn evaluate_model(model: &ModelState, events: &[Event]) -> Result<MetricReport> {
    let mut predictions = Vec::with_capacity(events.len());
    let mut labels = Vec::with_capacity(events.len());
    for (index, event) in events.iter().enumerate() {
        let p = model.predict(event).map_err(|e| e.at_event(index))?;
        predictions.push(clamp_probability(p));
        labels.push(event.label);
    }
    Ok(MetricReport {
        logloss: logloss(&predictions, &labels)?,
        auc: auc(&predictions, &labels)?,
        n_events: events.len(),
        n_positives: labels.iter().filter(|&&y| y == 1).count(),
    })
}

/// Constant user feature carried by every event in selection experiments, so
/// the product-features-only baseline still has a (degenerate) user side.
pub const ANCHOR_FEATURE: &str = "__anchor__";

/// Clone events with the anchor feature added.
pub fn with_anchor_feature(events: &[Event]) -> Vec<Event> {
    events
        .iter()
        .map(|e| e.clone().with_user_value(ANCHOR_FEATURE, "all"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSelectionConfig {
    pub ad_features: Vec<String>,
    pub candidates: Vec<String>,
    pub pair_width: usize,
    pub solo_width: usize,
    pub seed: u64,
    /// Passes over the training feed per candidate model.
    pub epochs: usize,
    /// Minimum relative log loss improvement (percent) over the incumbent
    /// required to accept a candidate. Keeps sampling-noise features out.
    pub min_lift_pct: f64,
}

pub const DEFAULT_MIN_LIFT_PCT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub feature: String,
    /// Cumulative lifts against the product-features-only baseline.
    pub auc_lift: f64,
    pub logloss_lift: f64,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSelectionReport {
    pub baseline: MetricReport,
    pub steps: Vec<SelectionStep>,
    pub rejected: Vec<String>,
}

impl ForwardSelectionReport {
    pub fn accepted(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.feature.as_str()).collect()
    }

    /// Rows shaped `# Feature / AUC lift / Logloss lift`, with the
    /// cumulative numbering style `1 (1)`, `2 (1+2)`, ...
    pub fn rows(&self) -> Vec<(String, String, f64, f64)> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let cumulative: Vec<String> = (1..=i + 1).map(|n| n.to_string()).collect();
                (
                    format!("{} ({})", i + 1, cumulative.join("+")),
                    s.feature.clone(),
                    s.auc_lift,
                    s.logloss_lift,
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# Feature,User feature,AUC lift,Logloss lift\n");
        for (label, feature, auc_lift, logloss_lift) in self.rows() {
            out.push_str(&format!(
                "{label},{feature},{auc_lift:.2}%,{logloss_lift:.2}%\n"
            ));
        }
        out
    }
}

fn mix_seed(seed: u64, step: usize, candidate: &str) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15u64.wrapping_mul(step as u64 + 1);
    for &b in candidate.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn train_and_eval(
    user_features: &[String],
    cfg: &ForwardSelectionConfig,
    train: &[Event],
    test: &[Event],
    seed: u64,
) -> Result<MetricReport> {
    let schema = FeatureSchema::new(
        user_features.to_vec(),
        cfg.pair_width,
        cfg.solo_width,
        cfg.ad_features.clone(),
        vec![],
    )?;
    let mut model = ModelState::new(schema, Hyperparams::default(), seed);
    for _ in 0..cfg.epochs.max(1) {
        model.train_batch(train)?;
    }
    evaluate_model(&model, test)
}

/// Wrapper forward selection: per step, train one model from scratch per
/// remaining candidate (fixed per-candidate seed), add the candidate with
/// the best test log loss if it improves on the incumbent, stop otherwise.
/// AUC rides along for reporting.
pub fn forward_selection(
    cfg: &ForwardSelectionConfig,
    train: &[Event],
    test: &[Event],
) -> Result<ForwardSelectionReport> {
    let train = with_anchor_feature(train);
    let test = with_anchor_feature(test);
    let anchor = vec![ANCHOR_FEATURE.to_string()];
    let baseline = train_and_eval(&anchor, cfg, &train, &test, mix_seed(cfg.seed, 0, "baseline"))?;

    let mut accepted: Vec<String> = Vec::new();
    let mut remaining: Vec<String> = cfg.candidates.clone();
    let mut steps = Vec::new();
    let mut incumbent_logloss = baseline.logloss;

    for step in 1.. {
        if remaining.is_empty() {
            break;
        }
        let mut best: Option<(usize, MetricReport)> = None;
        for (i, candidate) in remaining.iter().enumerate() {
            let mut features = anchor.clone();
            features.extend(accepted.iter().cloned());
            features.push(candidate.clone());
            let report =
                train_and_eval(&features, cfg, &train, &test, mix_seed(cfg.seed, step, candidate))?;
            if best
                .as_ref()
                .map_or(true, |(_, b)| report.logloss < b.logloss)
            {
                best = Some((i, report));
            }
        }
        let (idx, report) = best.expect("remaining non-empty");
        let improvement = (incumbent_logloss / report.logloss - 1.0) * 100.0;
        if improvement <= cfg.min_lift_pct.max(0.0) {
            break;
        }
        let feature = remaining.remove(idx);
        incumbent_logloss = report.logloss;
        steps.push(SelectionStep {
            feature,
            auc_lift: lift(report.auc, baseline.auc, Direction::HigherBetter)?,
            logloss_lift: lift(report.logloss, baseline.logloss, Direction::LowerBetter)?,
            auc: report.auc,
            logloss: report.logloss,
        });
        accepted = steps.iter().map(|s| s.feature.clone()).collect();
    }

    Ok(ForwardSelectionReport {
        baseline,
        steps,
        rejected: remaining,
    })
}

/// Cost per action in cents. Undefined without conversions: such advertisers
/// are excluded from reports.
pub fn cpa(spend: Cents, conversions: u64) -> Result<Cents> {
    if conversions == 0 {
        return Err(Error::UndefinedMetric("CPA with zero conversions".into()));
    }
    Ok((spend as f64 / conversions as f64).round() as Cents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserOutcome {
    pub advertiser_id: String,
    pub cpa: Cents,
    pub tcpa: Option<Cents>,
    pub spend: Cents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HappinessReport {
    /// Spend-weighted percentage of happy advertisers.
    pub happy_spend_pct: f64,
    pub happy: u64,
    pub unhappy: u64,
    pub excluded_missing_tcpa: u64,
    pub total_spend: Cents,
    pub happy_spend: Cents,
}

/// An advertiser is happy iff `CPA / tCPA <= 1 + error`; the report is the
/// percentage of total spend owned by happy advertisers. Advertisers without
/// a target CPA are excluded and counted.
pub fn happiness(outcomes: &[AdvertiserOutcome], error: f64) -> HappinessReport {
    let mut report = HappinessReport {
        happy_spend_pct: 0.0,
        happy: 0,
        unhappy: 0,
        excluded_missing_tcpa: 0,
        total_spend: 0,
        happy_spend: 0,
    };
    for outcome in outcomes {
        let Some(tcpa) = outcome.tcpa else {
            report.excluded_missing_tcpa += 1;
            continue;
        };
        report.total_spend += outcome.spend;
        // Multiplicative comparison keeps the boundary exact in floats.
        if outcome.cpa as f64 <= (1.0 + error) * tcpa as f64 {
            report.happy += 1;
            report.happy_spend += outcome.spend;
        } else {
            report.unhappy += 1;
        }
    }
    if report.total_spend > 0 {
        report.happy_spend_pct = 100.0 * report.happy_spend as f64 / report.total_spend as f64;
    }
    report
}

/// One bucket-day of spend and delivery, with per-advertiser breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDay {
    pub day: u32,
    pub spend: Cents,
    pub impressions: u64,
    /// advertiser -> (spend, conversions)
    pub advertisers: BTreeMap<String, (Cents, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayLift {
    pub day: u32,
    pub spend_lift: f64,
    pub delivery_lift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketLiftReport {
    pub days: Vec<DayLift>,
    pub avg_spend_lift: f64,
    pub avg_delivery_lift: f64,
    /// Days missing from either bucket, or with nonpositive metrics.
    pub skipped_days: Vec<u32>,
}

impl BucketLiftReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,spend_lift_pct,delivery_lift_pct\n");
        for d in &self.days {
            out.push_str(&format!("{},{:.4},{:.4}\n", d.day, d.spend_lift, d.delivery_lift));
        }
        out.push_str(&format!(
            "average,{:.4},{:.4}\n",
            self.avg_spend_lift, self.avg_delivery_lift
        ));
        out
    }
}

/// Per-day spend and delivery lifts of the test bucket over the control
/// bucket, plus period averages.
pub fn bucket_lift_report(test: &[BucketDay], control: &[BucketDay]) -> BucketLiftReport {
    let control_by_day: BTreeMap<u32, &BucketDay> = control.iter().map(|d| (d.day, d)).collect();
    let test_by_day: BTreeMap<u32, &BucketDay> = test.iter().map(|d| (d.day, d)).collect();

    let mut days = Vec::new();
    let mut skipped = Vec::new();
    let all_days: std::collections::BTreeSet<u32> = test_by_day
        .keys()
        .chain(control_by_day.keys())
        .copied()
        .collect();
    for day in all_days {
        let (Some(t), Some(c)) = (test_by_day.get(&day), control_by_day.get(&day)) else {
            skipped.push(day);
            continue;
        };
        let spend_lift = lift(t.spend as f64, c.spend as f64, Direction::HigherBetter);
        let delivery_lift = lift(t.impressions as f64, c.impressions as f64, Direction::HigherBetter);
        match (spend_lift, delivery_lift) {
            (Ok(s), Ok(d)) => days.push(DayLift {
                day,
                spend_lift: s,
                delivery_lift: d,
            }),
            _ => skipped.push(day),
        }
    }
    let n = days.len().max(1) as f64;
    BucketLiftReport {
        avg_spend_lift: days.iter().map(|d| d.spend_lift).sum::<f64>() / n,
        avg_delivery_lift: days.iter().map(|d| d.delivery_lift).sum::<f64>() / n,
        days,
        skipped_days: skipped,
    }
}
