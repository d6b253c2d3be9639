//! Evaluation metrics: interval coverage rate, optimum RMSE, mAP@5 and
//! accuracy, plus per-field / per-group report aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{AnswerValue, Family, FieldId, Schema, TaskGroup, TraitField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub strain_id: String,
    pub field: FieldId,
    pub truth: AnswerValue,
    pub prediction: Option<AnswerValue>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric `{metric}` expects {expected:?} fields but got `{got}`")]
    FamilyMismatch { metric: &'static str, expected: Vec<Family>, got: FieldId },
    #[error("no instances to score")]
    Empty,
}

fn check_family(metric: &'static str, instances: &[EvalInstance], expected: &[Family]) -> Result<(), MetricError> {
    if instances.is_empty() {
        return Err(MetricError::Empty);
    }
    for inst in instances {
        if !expected.contains(&inst.field.family()) {
            return Err(MetricError::FamilyMismatch { metric, expected: expected.to_vec(), got: inst.field });
        }
    }
    Ok(())
}

/// Indicator that `pred` fully contains `truth` (boundary equality counts).
pub fn covers(pred: &AnswerValue, truth: &AnswerValue) -> bool {
    match (pred, truth) {
        (AnswerValue::Interval { lower: pl, upper: pu }, AnswerValue::Interval { lower: tl, upper: tu }) => {
            pl <= tl && pu >= tu
        }
        _ => false,
    }
}

/// Fraction of instances whose predicted interval covers the truth interval.
pub fn interval_coverage_rate(instances: &[EvalInstance]) -> Result<f64, MetricError> {
    check_family("icr", instances, &[Family::Interval])?;
    let hits = instances.iter().filter(|i| i.prediction.as_ref().is_some_and(|p| covers(p, &i.truth))).count();
    Ok(hits as f64 / instances.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    /// `None` when no instance could be scored.
    pub value: Option<f64>,
    pub n: usize,
    pub failures: usize,
}

/// RMSE between interval midpoints; absent predictions are excluded and
/// counted in `failures`.
pub fn rmse_optimum(instances: &[EvalInstance]) -> Result<RmseSummary, MetricError> {
    check_family("rmse", instances, &[Family::Optimum])?;
    let mut sq = 0.0;
    let mut n = 0;
    let mut failures = 0;
    for inst in instances {
        match (inst.prediction.as_ref().and_then(AnswerValue::midpoint), inst.truth.midpoint()) {
            (Some(p), Some(t)) => {
                sq += (p - t).powi(2);
                n += 1;
            }
            _ => failures += 1,
        }
    }
    let value = (n > 0).then(|| (sq / n as f64).sqrt());
    Ok(RmseSummary { value, n, failures })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApAt5 {
    pub value: f64,
    /// The truth set was empty; `value` is defined as 0.
    pub empty_truth: bool,
}

/// Average precision over the first five ranked labels.
pub fn ap_at_5(ranked: &[String], truth: &BTreeSet<String>) -> ApAt5 {
    if truth.is_empty() {
        return ApAt5 { value: 0.0, empty_truth: true };
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, label) in ranked.iter().take(5).enumerate() {
        if truth.contains(label) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    ApAt5 { value: sum / truth.len().min(5) as f64, empty_truth: false }
}

fn canonical_set(field: &TraitField, labels: &[String]) -> BTreeSet<String> {
    labels.iter().map(|l| field.canonicalize(l).unwrap_or(l).to_string()).collect()
}

fn canonical_ranked(field: &TraitField, labels: &[String]) -> Vec<String> {
    field.dedupe_ranked(labels.iter().map(String::as_str))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub value: f64,
    pub n: usize,
    pub empty_truth: usize,
}

/// Mean AP@5 over multi-label instances; absent predictions score 0.
pub fn mean_ap_at_5(schema: &Schema, instances: &[EvalInstance]) -> Result<MapSummary, MetricError> {
    check_family("map@5", instances, &[Family::MultiLabel])?;
    let mut sum = 0.0;
    let mut empty_truth = 0;
    for inst in instances {
        let field = schema.field(inst.field);
        let truth = match &inst.truth {
            AnswerValue::Ranked(t) => canonical_set(field, t),
            _ => BTreeSet::new(),
        };
        let ranked = match &inst.prediction {
            Some(AnswerValue::Ranked(p)) => canonical_ranked(field, p),
            _ => Vec::new(),
        };
        let ap = ap_at_5(&ranked, &truth);
        empty_truth += usize::from(ap.empty_truth);
        sum += ap.value;
    }
    Ok(MapSummary { value: sum / instances.len() as f64, n: instances.len(), empty_truth })
}

/// Whether a single-label prediction matches after canonicalization.
pub fn label_matches(field: &TraitField, pred: &AnswerValue, truth: &AnswerValue) -> bool {
    let as_label = |v: &AnswerValue| -> Option<String> {
        match v {
            AnswerValue::Label(s) => field.canonicalize(s).map(str::to_string),
            AnswerValue::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    };
    match (as_label(pred), as_label(truth)) {
        (Some(p), Some(t)) => p == t,
        _ => false,
    }
}

/// Exact canonical-match rate over categorical / boolean instances.
pub fn accuracy(schema: &Schema, instances: &[EvalInstance]) -> Result<f64, MetricError> {
    check_family("accuracy", instances, &[Family::Categorical, Family::Boolean])?;
    let hits = instances
        .iter()
        .filter(|i| i.prediction.as_ref().is_some_and(|p| label_matches(schema.field(i.field), p, &i.truth)))
        .count();
    Ok(hits as f64 / instances.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMetric {
    pub metric: String,
    pub value: Option<f64>,
    pub n: usize,
    /// Absent or invalid predictions.
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub metric: String,
    pub value: Option<f64>,
    pub fields: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_field: BTreeMap<String, FieldMetric>,
    pub per_group: BTreeMap<String, GroupMetric>,
}

pub fn metric_name(family: Family) -> &'static str {
    match family {
        Family::Interval => "ICR",
        Family::Optimum => "RMSE",
        Family::MultiLabel => "mAP@5",
        Family::Categorical | Family::Boolean => "accuracy",
    }
}

/// Scores every field that has at least one instance and averages fields
/// within each task group.
pub fn build_report(schema: &Schema, instances: &[EvalInstance]) -> MetricReport {
    let mut by_field: BTreeMap<FieldId, Vec<EvalInstance>> = BTreeMap::new();
    for inst in instances {
        by_field.entry(inst.field).or_default().push(inst.clone());
    }
    let mut report = MetricReport::default();
    for (field, insts) in &by_field {
        let failures = insts.iter().filter(|i| i.prediction.is_none()).count();
        let family = field.family();
        let value = match family {
            Family::Interval => interval_coverage_rate(insts).ok(),
            Family::Optimum => rmse_optimum(insts).ok().and_then(|r| r.value),
            Family::MultiLabel => mean_ap_at_5(schema, insts).ok().map(|m| m.value),
            Family::Categorical | Family::Boolean => accuracy(schema, insts).ok(),
        };
        let n = match family {
            Family::Optimum => insts.len() - failures,
            _ => insts.len(),
        };
        report.per_field.insert(
            field.name().to_string(),
            FieldMetric { metric: metric_name(family).to_string(), value, n, failures },
        );
    }
    for group in TaskGroup::ALL {
        let values: Vec<f64> =
            group.fields().filter_map(|f| report.per_field.get(f.name()).and_then(|m| m.value)).collect();
        if values.is_empty() && !group.fields().any(|f| by_field.contains_key(&f)) {
            continue;
        }
        let metric = metric_name(group.fields().next().expect("groups are non-empty").family());
        let value = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        report
            .per_group
            .insert(group.name().to_string(), GroupMetric { metric: metric.to_string(), value, fields: values.len() });
    }
    report
}

/// Aligned-column text table, one row per field in benchmark order followed
/// by the group means.
pub fn render_table(report: &MetricReport) -> String {
    let mut out = String::new();
    let fmt_val = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let _ = writeln!(out, "{:<24} {:<28} {:<9} {:>8} {:>6} {:>8}", "group", "field", "metric", "value", "n", "failed");
    for group in TaskGroup::ALL {
        for f in group.fields() {
            if let Some(m) = report.per_field.get(f.name()) {
                let _ = writeln!(
                    out,
                    "{:<24} {:<28} {:<9} {:>8} {:>6} {:>8}",
                    group.name(),
                    f.name(),
                    m.metric,
                    fmt_val(m.value),
                    m.n,
                    m.failures
                );
            }
        }
    }
    for group in TaskGroup::ALL {
        if let Some(g) = report.per_group.get(group.name()) {
            let _ = writeln!(
                out,
                "{:<24} {:<28} {:<9} {:>8} {:>6} {:>8}",
                group.name(),
                "(group mean)",
                g.metric,
                fmt_val(g.value),
                g.fields,
                ""
            );
        }
    }
    out
}

/// Set of truth labels for a multi-label answer, canonicalized.
pub fn truth_label_set(field: &TraitField, truth: &AnswerValue) -> HashSet<String> {
    match truth {
        AnswerValue::Ranked(t) => canonical_set(field, t).into_iter().collect(),
        _ => HashSet::new(),
    }
}
