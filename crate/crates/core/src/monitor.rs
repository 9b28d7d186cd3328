//! Drift monitoring between importance reports, and before/after evaluation
//! of an intervention on a macro KPI.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::{spearman, ImportanceError, ImportanceReport};
use crate::kpi::{Direction, MacroKpi};
use crate::scalar::{mean, median, Scalar};
use crate::seed::{self, Stream};
use crate::tabular::Table;

pub const MONITOR_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RHO_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("baseline and fresh reports cover different features")]
    FeatureSetMismatch,
    #[error("top_k must be between 1 and {features}, got {top_k}")]
    InvalidTopK { top_k: usize, features: usize },
    #[error("rho threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error("{0} window has no rows")]
    EmptyWindow(&'static str),
    #[error("{window} window targets '{found}', macro KPI expects '{expected}'")]
    TargetMismatch {
        window: &'static str,
        expected: String,
        found: String,
    },
    #[error("target '{0}' is categorical; intervention effects need a numeric target")]
    NonNumericTarget(String),
    #[error("bootstrap needs at least one resample and a confidence in (0, 1)")]
    InvalidResampling,
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed report: {0}")]
    Format(String),
}

pub type Result<T, E = MonitorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankDelta {
    pub name: String,
    pub baseline_rank: usize,
    pub fresh_rank: usize,
    /// `fresh_rank - baseline_rank`; negative means the feature moved up.
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DriftReport<T> {
    pub format_version: u32,
    pub baseline_fingerprint: String,
    pub fresh_fingerprint: String,
    /// Spearman correlation of the permutation rankings.
    pub spearman_rho: T,
    /// Same statistic on the MDI rankings; informational only.
    pub mdi_spearman_rho: T,
    pub rank_deltas: Vec<RankDelta>,
    pub top_k: usize,
    /// Features that entered or left the permutation top-k.
    pub flagged_features: Vec<String>,
    pub refresh_recommended: bool,
    pub threshold_used: T,
}

/// Compares the permutation rankings of two reports over the same features.
/// Features are matched by name; rank deltas follow the baseline order.
pub fn detect_drift<T: Scalar>(
    baseline: &ImportanceReport<T>,
    fresh: &ImportanceReport<T>,
    top_k: usize,
    rho_threshold: T,
) -> Result<DriftReport<T>> {
    let p = baseline.features.len();
    let mut fresh_of = Vec::with_capacity(p);
    for f in &baseline.features {
        fresh_of.push(fresh.feature(&f.name).ok_or(MonitorError::FeatureSetMismatch)?);
    }
    if fresh.features.len() != p {
        return Err(MonitorError::FeatureSetMismatch);
    }
    if top_k == 0 || top_k > p {
        return Err(MonitorError::InvalidTopK { top_k, features: p });
    }
    if !(rho_threshold >= -T::one() && rho_threshold <= T::one()) {
        return Err(MonitorError::InvalidThreshold(rho_threshold.as_f64()));
    }

    let base_perm: Vec<usize> = baseline.features.iter().map(|f| f.rank_perm).collect();
    let fresh_perm: Vec<usize> = fresh_of.iter().map(|f| f.rank_perm).collect();
    let base_mdi: Vec<usize> = baseline.features.iter().map(|f| f.rank_mdi).collect();
    let fresh_mdi: Vec<usize> = fresh_of.iter().map(|f| f.rank_mdi).collect();
    let spearman_rho: T = spearman(&base_perm, &fresh_perm)?;
    let mdi_spearman_rho: T = spearman(&base_mdi, &fresh_mdi)?;

    let rank_deltas: Vec<RankDelta> = baseline
        .features
        .iter()
        .zip(&fresh_perm)
        .map(|(f, &r)| RankDelta {
            name: f.name.clone(),
            baseline_rank: f.rank_perm,
            fresh_rank: r,
            delta: r as i64 - f.rank_perm as i64,
        })
        .collect();
    let mut flagged: Vec<(usize, String)> = rank_deltas
        .iter()
        .filter(|d| (d.baseline_rank <= top_k) != (d.fresh_rank <= top_k))
        .map(|d| (d.baseline_rank.min(d.fresh_rank), d.name.clone()))
        .collect();
    flagged.sort();
    let flagged_features: Vec<String> = flagged.into_iter().map(|(_, n)| n).collect();

    Ok(DriftReport {
        format_version: MONITOR_FORMAT_VERSION,
        baseline_fingerprint: baseline.fingerprint(),
        fresh_fingerprint: fresh.fingerprint(),
        refresh_recommended: spearman_rho < rho_threshold || !flagged_features.is_empty(),
        spearman_rho,
        mdi_spearman_rho,
        rank_deltas,
        top_k,
        flagged_features,
        threshold_used: rho_threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapSettings {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            resamples: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Interval<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> Interval<T> {
    pub fn contains(&self, x: T) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Observational before/after comparison of a macro KPI.
///
/// `improvement` is signed by the KPI's direction, so it is positive when the
/// after-window is better. `relative_improvement` divides by `|before_mean|`
/// and is absent when that is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EffectSummary<T> {
    pub format_version: u32,
    pub macro_kpi_id: String,
    pub target_column: String,
    pub direction: Direction,
    pub n_before: usize,
    pub n_after: usize,
    pub before_mean: T,
    pub after_mean: T,
    pub before_median: T,
    pub after_median: T,
    pub mean_change: T,
    pub improvement: T,
    pub relative_improvement: Option<T>,
    pub improvement_ci: Interval<T>,
    pub relative_improvement_ci: Option<Interval<T>>,
    pub bootstrap: BootstrapSettings,
}

fn window_target<T: Scalar>(table: &Table<T>, kpi: &MacroKpi, window: &'static str) -> Result<Vec<T>> {
    let found = &table.schema().target().name;
    if *found != kpi.target_column {
        return Err(MonitorError::TargetMismatch {
            window,
            expected: kpi.target_column.clone(),
            found: found.clone(),
        });
    }
    let values = table
        .target()
        .as_numeric()
        .ok_or_else(|| MonitorError::NonNumericTarget(found.clone()))?;
    if values.is_empty() {
        return Err(MonitorError::EmptyWindow(window));
    }
    Ok(values.to_vec())
}

fn signed<T: Scalar>(direction: Direction, before: T, after: T) -> T {
    match direction {
        Direction::Minimize => before - after,
        Direction::Maximize => after - before,
    }
}

fn relative<T: Scalar>(improvement: T, before: T) -> Option<T> {
    (before != T::zero()).then(|| improvement / before.abs())
}

/// Percentile interval of `samples`, widened to contain `estimate`.
fn percentile_interval<T: Scalar>(mut samples: Vec<T>, confidence: f64, estimate: T) -> Interval<T> {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite bootstrap statistics"));
    let b = samples.len();
    let alpha = (1.0 - confidence) / 2.0;
    let lo = ((alpha * b as f64).floor() as usize).min(b - 1);
    let hi = (((1.0 - alpha) * b as f64).ceil() as usize).clamp(1, b) - 1;
    Interval {
        lower: samples[lo].min(estimate),
        upper: samples[hi].max(estimate),
    }
}

/// Before/after summary of `kpi` with a two-sample percentile bootstrap
/// interval on the mean improvement. Deterministic for a fixed seed.
pub fn evaluate_intervention<T: Scalar>(
    before: &Table<T>,
    after: &Table<T>,
    kpi: &MacroKpi,
    settings: &BootstrapSettings,
) -> Result<EffectSummary<T>> {
    if settings.resamples == 0 || !(settings.confidence > 0.0 && settings.confidence < 1.0) {
        return Err(MonitorError::InvalidResampling);
    }
    let xs = window_target(before, kpi, "before")?;
    let ys = window_target(after, kpi, "after")?;
    let before_mean = mean(&xs);
    let after_mean = mean(&ys);
    let improvement = signed(kpi.direction, before_mean, after_mean);
    let relative_improvement = relative(improvement, before_mean);

    let mut rng = seed::rng(settings.seed, Stream::Resample, &[]);
    let mut diffs = Vec::with_capacity(settings.resamples);
    let mut ratios = Vec::with_capacity(settings.resamples);
    let resample_mean = |values: &[T], rng: &mut rand_chacha::ChaCha8Rng| {
        let n = values.len();
        let total: T = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
        total / T::from_count(n)
    };
    for _ in 0..settings.resamples {
        let b = resample_mean(&xs, &mut rng);
        let a = resample_mean(&ys, &mut rng);
        let d = signed(kpi.direction, b, a);
        diffs.push(d);
        if let Some(r) = relative(d, b) {
            ratios.push(r);
        }
    }
    let improvement_ci = percentile_interval(diffs, settings.confidence, improvement);
    let relative_improvement_ci = match relative_improvement {
        Some(r) if ratios.len() == settings.resamples => Some(percentile_interval(ratios, settings.confidence, r)),
        _ => None,
    };

    Ok(EffectSummary {
        format_version: MONITOR_FORMAT_VERSION,
        macro_kpi_id: kpi.id.clone(),
        target_column: kpi.target_column.clone(),
        direction: kpi.direction,
        n_before: xs.len(),
        n_after: ys.len(),
        before_mean,
        after_mean,
        before_median: median(&xs),
        after_median: median(&ys),
        mean_change: after_mean - before_mean,
        improvement,
        relative_improvement,
        improvement_ci,
        relative_improvement_ci,
        bootstrap: *settings,
    })
}

fn check_version(text: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Versioned {
        format_version: u32,
    }
    let v: Versioned = serde_json::from_str(text).map_err(|e| MonitorError::Format(e.to_string()))?;
    if v.format_version != MONITOR_FORMAT_VERSION {
        return Err(MonitorError::Format(format!(
            "unsupported format version {}",
            v.format_version
        )));
    }
    Ok(())
}

/// JSON persistence shared by [`DriftReport`] and [`EffectSummary`].
pub trait MonitorArtifact: Serialize + DeserializeOwned {
    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn from_json(text: &str) -> Result<Self> {
        check_version(text)?;
        serde_json::from_str(text).map_err(|e| MonitorError::Format(e.to_string()))
    }

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| MonitorError::Io {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MonitorError::Io {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

impl<T: Scalar> MonitorArtifact for DriftReport<T> {}
impl<T: Scalar> MonitorArtifact for EffectSummary<T> {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{EvaluationMode, FeatureImportance};
    use crate::tabular::{Column, ColumnKind, ColumnSpec, Schema};

    fn report(perm_ranks: &[usize]) -> ImportanceReport<f64> {
        ImportanceReport {
            format_version: 1,
            forest_fingerprint: "f".into(),
            schema_fingerprint: "s".into(),
            metric: "accuracy".into(),
            baseline_metric: 0.9,
            mode: EvaluationMode::Oob,
            seed: 0,
            features: perm_ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| FeatureImportance {
                    name: format!("f{i}"),
                    mdi_raw: 0.0,
                    mdi_normalized: 0.0,
                    perm_mean: 1.0 / r as f64,
                    perm_std: 0.0,
                    perm_repeats: 1,
                    perm_drops: vec![1.0 / r as f64],
                    rank_mdi: r,
                    rank_perm: r,
                })
                .collect(),
        }
    }

    fn kpi(direction: Direction) -> MacroKpi {
        MacroKpi {
            id: "m".into(),
            name: "Processing time".into(),
            description: String::new(),
            target_column: "days".into(),
            direction,
            unit: "days".into(),
            goal_ref: String::new(),
        }
    }

    fn window(values: Vec<f64>) -> Table<f64> {
        let schema = Schema::new(vec![
            ColumnSpec::feature("x", ColumnKind::Numeric),
            ColumnSpec::target("days", ColumnKind::Numeric),
        ])
        .unwrap();
        let x = Column::numeric("x", vec![0.0; values.len()]);
        Table::new(schema, vec![x, Column::numeric("days", values)]).unwrap()
    }

    #[test]
    fn identical_reports_do_not_drift() {
        let r = report(&[2, 1, 3, 4]);
        let d = detect_drift(&r, &r, 2, 0.7).unwrap();
        assert_eq!(d.spearman_rho, 1.0);
        assert!(d.flagged_features.is_empty());
        assert!(!d.refresh_recommended);
    }

    #[test]
    fn top_k_change_is_flagged() {
        let a = report(&[1, 2, 3, 4, 5]);
        let b = report(&[1, 3, 2, 4, 5]);
        let d = detect_drift(&a, &b, 2, 0.7).unwrap();
        assert_eq!(d.flagged_features, vec!["f1", "f2"]);
        assert!(d.refresh_recommended);
        assert!(d.spearman_rho > 0.7);
        assert_eq!(d.rank_deltas[1].delta, 1);
    }

    #[test]
    fn rho_is_symmetric() {
        let a = report(&[1, 2, 3, 4, 5]);
        let b = report(&[4, 1, 5, 2, 3]);
        let ab = detect_drift(&a, &b, 2, 0.7).unwrap();
        let ba = detect_drift(&b, &a, 2, 0.7).unwrap();
        assert_eq!(ab.spearman_rho, ba.spearman_rho);
        assert!(ab.refresh_recommended);
    }

    #[test]
    fn feature_sets_must_match() {
        let a = report(&[1, 2, 3]);
        let mut b = report(&[1, 2, 3]);
        b.features[2].name = "other".into();
        assert!(matches!(detect_drift(&a, &b, 2, 0.7), Err(MonitorError::FeatureSetMismatch)));
        let c = report(&[1, 2]);
        assert!(matches!(detect_drift(&a, &c, 1, 0.7), Err(MonitorError::FeatureSetMismatch)));
        assert!(matches!(detect_drift(&a, &a, 4, 0.7), Err(MonitorError::InvalidTopK { .. })));
    }

    #[test]
    fn identical_windows_show_no_change() {
        let w = window((0..50).map(|i| (i % 7) as f64 + 10.0).collect());
        let s = evaluate_intervention(&w, &w, &kpi(Direction::Minimize), &BootstrapSettings::default()).unwrap();
        assert_eq!(s.improvement, 0.0);
        assert_eq!(s.mean_change, 0.0);
        assert!(s.improvement_ci.contains(0.0));
    }

    #[test]
    fn constant_shift_is_exact_improvement() {
        let before: Vec<f64> = (0..40).map(|i| 20.0 + (i % 5) as f64).collect();
        let after: Vec<f64> = before.iter().map(|v| v - 3.0).collect();
        let s = evaluate_intervention(
            &window(before),
            &window(after),
            &kpi(Direction::Minimize),
            &BootstrapSettings::default(),
        )
        .unwrap();
        assert!((s.improvement - 3.0).abs() < 1e-12);
        assert!(s.improvement_ci.lower > 0.0);
        let m = evaluate_intervention(
            &window(vec![1.0, 2.0]),
            &window(vec![3.0, 4.0]),
            &kpi(Direction::Maximize),
            &BootstrapSettings::default(),
        )
        .unwrap();
        assert_eq!(m.improvement, 2.0);
        assert_eq!(m.relative_improvement, Some(2.0 / 1.5));
    }

    #[test]
    fn bootstrap_is_seeded() {
        let b = window((0..30).map(|i| (i * 7 % 11) as f64).collect());
        let a = window((0..30).map(|i| (i * 5 % 13) as f64).collect());
        let k = kpi(Direction::Minimize);
        let s = BootstrapSettings { seed: 9, ..Default::default() };
        assert_eq!(
            evaluate_intervention(&b, &a, &k, &s).unwrap(),
            evaluate_intervention(&b, &a, &k, &s).unwrap()
        );
    }

    #[test]
    fn empty_and_mismatched_windows() {
        let k = kpi(Direction::Minimize);
        let s = BootstrapSettings::default();
        let e = evaluate_intervention(&window(vec![1.0]), &window(vec![]), &k, &s);
        assert!(matches!(e, Err(MonitorError::EmptyWindow("after"))));
        let mut other = kpi(Direction::Minimize);
        other.target_column = "cost".into();
        let w = window(vec![1.0]);
        assert!(matches!(
            evaluate_intervention(&w, &w, &other, &s),
            Err(MonitorError::TargetMismatch { .. })
        ));
    }

    #[test]
    fn artifacts_round_trip() {
        let d = detect_drift(&report(&[1, 2, 3]), &report(&[2, 1, 3]), 1, 0.7).unwrap();
        assert_eq!(DriftReport::<f64>::from_json(&d.to_json()).unwrap(), d);
        let w = window(vec![1.0, 5.0, 2.0]);
        let e = evaluate_intervention(&w, &w, &kpi(Direction::Maximize), &BootstrapSettings::default()).unwrap();
        assert_eq!(EffectSummary::<f64>::from_json(&e.to_json()).unwrap(), e);
        let bumped = e.to_json().replace("\"format_version\": 1", "\"format_version\": 7");
        assert!(EffectSummary::<f64>::from_json(&bumped).is_err());
    }
}
