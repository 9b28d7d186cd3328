//! Synthetic event-log tables with a known set of relevant features.
//!
//! Numeric features are standard normal; categorical features are uniform
//! codes. The target is driven by a linear score over the informative
//! features only: thresholded for classification (at 0 for two classes, at
//! empirical quantiles otherwise) with optional label flips, or passed through
//! with Gaussian noise for regression. A generator spec is a TOML document:
//!
//! ```toml
//! n_rows = 500
//! seed = 11
//!
//! [target]
//! name = "late"
//! type = "classification"   # or "regression" with noise_std / offset / scale
//! classes = 2
//! noise_rate = 0.05
//!
//! [[feature]]
//! name = "hearings"
//! generator = "informative"
//! weight = 2.0
//!
//! [[feature]]
//! name = "clerk_load"
//! generator = "correlated_with"
//! source = "hearings"
//! rho = 0.6
//!
//! [[feature]]
//! name = "office"
//! kind = "categorical"
//! levels = 4
//! generator = "noise"
//! ```

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed::{self, Stream};
use crate::tabular::{Column, ColumnKind, ColumnSpec, Schema, Table, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("mutation does not apply: {0}")]
    InapplicableMutation(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    Informative { weight: f64 },
    Noise,
    CorrelatedWith { source: String, rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub kind: FeatureKind,
    /// Number of codes for categorical features.
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(flatten)]
    pub generator: Generator,
}

fn default_levels() -> usize {
    2
}

impl FeatureSpec {
    pub fn informative(name: &str, weight: f64) -> Self {
        Self {
            name: name.to_owned(),
            kind: FeatureKind::Numeric,
            levels: 2,
            generator: Generator::Informative { weight },
        }
    }

    pub fn noise(name: &str) -> Self {
        Self {
            generator: Generator::Noise,
            ..Self::informative(name, 0.0)
        }
    }

    pub fn correlated(name: &str, source: &str, rho: f64) -> Self {
        Self {
            generator: Generator::CorrelatedWith {
                source: source.to_owned(),
                rho,
            },
            ..Self::informative(name, 0.0)
        }
    }

    pub fn categorical(mut self, levels: usize) -> Self {
        self.kind = FeatureKind::Categorical;
        self.levels = levels;
        self
    }

    fn weight(&self) -> f64 {
        match self.generator {
            Generator::Informative { weight } => weight,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetKind {
    Classification {
        classes: usize,
        noise_rate: f64,
    },
    /// `offset + scale * (score + noise_std * e)`, `e` standard normal.
    Regression {
        noise_std: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TargetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_rows: usize,
    #[serde(default)]
    pub seed: u64,
    pub target: TargetSpec,
    #[serde(rename = "feature")]
    pub features: Vec<FeatureSpec>,
}

/// Names and weights of the features that drive the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub target: String,
    pub task: TaskKind,
    pub informative: Vec<InformativeFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformativeFeature {
    pub name: String,
    pub weight: f64,
}

impl GroundTruth {
    pub fn is_informative(&self, name: &str) -> bool {
        self.informative.iter().any(|f| f.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.informative.iter().map(|f| f.name.as_str()).collect()
    }
}

/// Ways to derive a follow-up window from a spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Each informative feature trades generators with the first unused noise
    /// feature of the same kind, moving the signal onto irrelevant columns.
    SwapInformative,
    /// Multiplies the regression target (offset and scale).
    ScaleTarget(f64),
    /// Adds to the regression target's offset.
    ShiftTarget(f64),
}

impl GeneratorSpec {
    /// Two-class spec: informative features `f_informative_{k}` with the given
    /// weights followed by `n_noise` features `f_noise_{k}`.
    pub fn classification(n_rows: usize, weights: &[f64], n_noise: usize, noise_rate: f64, seed: u64) -> Self {
        Self {
            n_rows,
            seed,
            target: TargetSpec {
                name: "target".into(),
                kind: TargetKind::Classification {
                    classes: 2,
                    noise_rate,
                },
            },
            features: standard_features(weights, n_noise),
        }
    }

    pub fn regression(n_rows: usize, weights: &[f64], n_noise: usize, noise_std: f64, offset: f64, seed: u64) -> Self {
        Self {
            n_rows,
            seed,
            target: TargetSpec {
                name: "target".into(),
                kind: TargetKind::Regression {
                    noise_std,
                    offset,
                    scale: 1.0,
                },
            },
            features: standard_features(weights, n_noise),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SynthError::InvalidSpec(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn task(&self) -> TaskKind {
        match self.target.kind {
            TargetKind::Classification { .. } => TaskKind::Classification,
            TargetKind::Regression { .. } => TaskKind::Regression,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_rows < 2 {
            return bad("n_rows must be at least 2".into());
        }
        let mut names = HashSet::new();
        for f in &self.features {
            if f.name.trim().is_empty() || f.name == self.target.name || !names.insert(f.name.as_str()) {
                return bad(format!("feature name '{}' is empty or repeated", f.name));
            }
            if f.kind == FeatureKind::Categorical && f.levels < 2 {
                return bad(format!("feature '{}' needs at least 2 levels", f.name));
            }
            match &f.generator {
                Generator::Informative { weight } if !weight.is_finite() => {
                    return bad(format!("feature '{}' has a non-finite weight", f.name));
                }
                Generator::CorrelatedWith { source, rho } => {
                    if !(*rho > -1.0 && *rho < 1.0) {
                        return bad(format!("feature '{}': rho must lie in (-1, 1)", f.name));
                    }
                    let src = self.features.iter().position(|g| &g.name == source);
                    let me = self.features.iter().position(|g| g.name == f.name);
                    match src {
                        Some(s) if s < me.unwrap_or(0) && self.features[s].kind == FeatureKind::Numeric => {}
                        _ => {
                            return bad(format!(
                                "feature '{}' must correlate with an earlier numeric feature",
                                f.name
                            ))
                        }
                    }
                    if f.kind != FeatureKind::Numeric {
                        return bad(format!("correlated feature '{}' must be numeric", f.name));
                    }
                }
                _ => {}
            }
        }
        if !self.features.iter().any(|f| f.weight() != 0.0) {
            return bad("at least one informative feature with a nonzero weight is required".into());
        }
        match self.target.kind {
            TargetKind::Classification { classes, noise_rate } => {
                if classes < 2 {
                    return bad("classification needs at least 2 classes".into());
                }
                if !(0.0..0.5).contains(&noise_rate) {
                    return bad("noise_rate must lie in [0, 0.5)".into());
                }
            }
            TargetKind::Regression { noise_std, offset, scale } => {
                if !(noise_std >= 0.0 && noise_std.is_finite() && offset.is_finite() && scale.is_finite()) {
                    return bad("regression noise_std must be >= 0 and all parameters finite".into());
                }
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            target: self.target.name.clone(),
            task: self.task(),
            informative: self
                .features
                .iter()
                .filter(|f| f.weight() != 0.0)
                .map(|f| InformativeFeature {
                    name: f.name.clone(),
                    weight: f.weight(),
                })
                .collect(),
        }
    }

    pub fn schema(&self) -> Schema {
        let mut cols: Vec<ColumnSpec> = self
            .features
            .iter()
            .map(|f| {
                ColumnSpec::feature(
                    &f.name,
                    match f.kind {
                        FeatureKind::Numeric => ColumnKind::Numeric,
                        FeatureKind::Categorical => ColumnKind::Categorical,
                    },
                )
            })
            .collect();
        cols.push(ColumnSpec::target(
            &self.target.name,
            match self.task() {
                TaskKind::Classification => ColumnKind::Categorical,
                TaskKind::Regression => ColumnKind::Numeric,
            },
        ));
        Schema::new(cols).expect("validated spec yields a valid schema")
    }

    /// Expected value of a regression target (features are centred).
    pub fn expected_target_mean(&self) -> Option<f64> {
        match self.target.kind {
            TargetKind::Regression { offset, .. } => Some(offset),
            TargetKind::Classification { .. } => None,
        }
    }
}

fn standard_features(weights: &[f64], n_noise: usize) -> Vec<FeatureSpec> {
    weights
        .iter()
        .enumerate()
        .map(|(k, &w)| FeatureSpec::informative(&format!("f_informative_{}", k + 1), w))
        .chain((0..n_noise).map(|k| FeatureSpec::noise(&format!("f_noise_{}", k + 1))))
        .collect()
}

/// Raw draw from a spec, before conversion to a table.
struct Draw {
    /// Feature values; categorical features hold their codes.
    values: Vec<Vec<f64>>,
    /// Linear score over informative features.
    score: Vec<f64>,
    /// Observed class per row after label flips (classification).
    class: Vec<usize>,
    /// Observed regression target.
    y: Vec<f64>,
    /// Class cut points on the score.
    cuts: Vec<f64>,
}

/// Standardized contribution of a categorical code (uniform over `levels`).
fn standardize_code(code: f64, levels: usize) -> f64 {
    let l = levels as f64;
    (code - (l - 1.0) / 2.0) / ((l * l - 1.0) / 12.0).sqrt()
}

fn contribution(f: &FeatureSpec, value: f64) -> f64 {
    match f.kind {
        FeatureKind::Numeric => value,
        FeatureKind::Categorical => standardize_code(value, f.levels),
    }
}

fn score_rows(spec: &GeneratorSpec, values: &[Vec<f64>]) -> Vec<f64> {
    let n = values.first().map_or(0, Vec::len);
    let mut score = vec![0.0; n];
    for (f, col) in spec.features.iter().zip(values) {
        let w = f.weight();
        if w == 0.0 {
            continue;
        }
        for (s, &v) in score.iter_mut().zip(col) {
            *s += w * contribution(f, v);
        }
    }
    score
}

fn classify(score: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| score > c).count()
}

/// Mixes fresh noise with `source` so the sample correlation is exactly `rho`
/// and the spread matches the source's.
fn correlated_column(source: &[f64], noise: &[f64], rho: f64) -> Vec<f64> {
    let n = source.len() as f64;
    let ms = source.iter().sum::<f64>() / n;
    let me = noise.iter().sum::<f64>() / n;
    let sc: Vec<f64> = source.iter().map(|x| x - ms).collect();
    let ec: Vec<f64> = noise.iter().map(|x| x - me).collect();
    let ss: f64 = sc.iter().map(|x| x * x).sum();
    let proj = ec.iter().zip(&sc).map(|(a, b)| a * b).sum::<f64>() / ss;
    let orth: Vec<f64> = ec.iter().zip(&sc).map(|(e, s)| e - proj * s).collect();
    let so: f64 = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_s = ss.sqrt();
    let k = (1.0 - rho * rho).sqrt();
    sc.iter()
        .zip(&orth)
        .map(|(s, o)| ms + norm_s * (rho * s / norm_s + k * o / so))
        .collect()
}

fn draw(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Draw {
    let n = spec.n_rows;
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(spec.features.len());
    for f in &spec.features {
        let col = match (&f.generator, f.kind) {
            (Generator::CorrelatedWith { source, rho }, _) => {
                let src = spec.features.iter().position(|g| &g.name == source).expect("validated");
                let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                correlated_column(&values[src], &noise, *rho)
            }
            (_, FeatureKind::Numeric) => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            (_, FeatureKind::Categorical) => (0..n).map(|_| rng.random_range(0..f.levels) as f64).collect(),
        };
        values.push(col);
    }
    let score = score_rows(spec, &values);
    match spec.target.kind {
        TargetKind::Classification { classes, noise_rate } => {
            let cuts = if classes == 2 {
                vec![0.0]
            } else {
                let mut sorted = score.clone();
                sorted.sort_by(f64::total_cmp);
                (1..classes).map(|k| sorted[(k * n / classes).min(n - 1)]).collect()
            };
            let class = score
                .iter()
                .map(|&s| {
                    let c = classify(s, &cuts);
                    if noise_rate > 0.0 && rng.random::<f64>() < noise_rate {
                        let other = rng.random_range(0..classes - 1);
                        if other >= c {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        c
                    }
                })
                .collect();
            Draw {
                values,
                score,
                class,
                y: Vec::new(),
                cuts,
            }
        }
        TargetKind::Regression { noise_std, offset, scale } => {
            let y = score
                .iter()
                .map(|&s| {
                    let e: f64 = rng.sample(StandardNormal);
                    offset + scale * (s + noise_std * e)
                })
                .collect();
            Draw {
                values,
                score,
                class: Vec::new(),
                y,
                cuts: Vec::new(),
            }
        }
    }
}

/// Draws the table described by `spec` together with its ground truth.
pub fn generate<T: Scalar>(spec: &GeneratorSpec) -> Result<(Table<T>, GroundTruth)> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, Stream::Synth, &[]);
    let d = draw(spec, &mut rng);
    let mut columns: Vec<Column<T>> = spec
        .features
        .iter()
        .zip(&d.values)
        .map(|(f, v)| match f.kind {
            FeatureKind::Numeric => Column::numeric(&f.name, v.iter().map(|&x| T::lit(x)).collect()),
            FeatureKind::Categorical => {
                let labels: Vec<Option<String>> = v.iter().map(|&c| Some(format!("L{c}"))).collect();
                Column::categorical(&f.name, &labels)
            }
        })
        .collect();
    columns.push(match spec.task() {
        TaskKind::Classification => {
            let labels: Vec<Option<String>> = d.class.iter().map(|c| Some(format!("c{c}"))).collect();
            Column::categorical(&spec.target.name, &labels)
        }
        TaskKind::Regression => Column::numeric(&spec.target.name, d.y.iter().map(|&y| T::lit(y)).collect()),
    });
    let table = Table::new(spec.schema(), columns).expect("generated columns match the schema");
    Ok((table, spec.ground_truth()))
}

/// Permutation drop of each feature for the generating model itself
/// (noise-free link scored against the noisy target) on a fresh draw of
/// `spec` with `seed`. Features outside the score have a drop of exactly 0.
///
/// The drop uses accuracy for classification and R² for regression.
pub fn true_permutation_drops(spec: &GeneratorSpec, seed: u64, repeats: usize) -> Result<Vec<(String, f64)>> {
    spec.validate()?;
    let spec = spec.clone().with_seed(seed);
    let mut rng = seed::rng(spec.seed, Stream::Synth, &[]);
    let d = draw(&spec, &mut rng);
    let n = spec.n_rows;
    let metric = |score: &[f64]| -> f64 {
        match spec.target.kind {
            TargetKind::Classification { .. } => {
                let hit = score
                    .iter()
                    .zip(&d.class)
                    .filter(|(&s, &c)| classify(s, &d.cuts) == c)
                    .count();
                hit as f64 / n as f64
            }
            TargetKind::Regression { offset, scale, .. } => {
                let mean = d.y.iter().sum::<f64>() / n as f64;
                let ss_tot: f64 = d.y.iter().map(|y| (y - mean).powi(2)).sum();
                let ss_res: f64 = score.iter().zip(&d.y).map(|(s, y)| (y - offset - scale * s).powi(2)).sum();
                1.0 - ss_res / ss_tot
            }
        }
    };
    let baseline = metric(&d.score);
    let mut shuffle_rng = seed::rng(seed, Stream::Permutation, &[u64::MAX]);
    let mut out = Vec::with_capacity(spec.features.len());
    for (j, f) in spec.features.iter().enumerate() {
        if f.weight() == 0.0 {
            out.push((f.name.clone(), 0.0));
            continue;
        }
        let mut total = 0.0;
        for _ in 0..repeats.max(1) {
            let mut values = d.values.clone();
            rand::seq::SliceRandom::shuffle(values[j].as_mut_slice(), &mut shuffle_rng);
            total += baseline - metric(&score_rows(&spec, &values));
        }
        out.push((f.name.clone(), total / repeats.max(1) as f64));
    }
    Ok(out)
}

/// Returns a copy of `spec` changed by `mutation`.
pub fn shift_window(spec: &GeneratorSpec, mutation: Mutation) -> Result<GeneratorSpec> {
    let mut out = spec.clone();
    match mutation {
        Mutation::SwapInformative => {
            let informative: Vec<usize> = (0..spec.features.len())
                .filter(|&i| matches!(spec.features[i].generator, Generator::Informative { .. }))
                .collect();
            let noise: Vec<usize> = (0..spec.features.len())
                .filter(|&i| matches!(spec.features[i].generator, Generator::Noise))
                .collect();
            if informative.is_empty() {
                return Err(SynthError::InapplicableMutation("spec has no informative feature".into()));
            }
            let sources: HashSet<&str> = spec
                .features
                .iter()
                .filter_map(|f| match &f.generator {
                    Generator::CorrelatedWith { source, .. } => Some(source.as_str()),
                    _ => None,
                })
                .collect();
            let mut unused = noise;
            for &i in &informative {
                let pos = unused
                    .iter()
                    .position(|&k| spec.features[k].kind == spec.features[i].kind)
                    .ok_or_else(|| {
                        SynthError::InapplicableMutation(format!(
                            "no unused noise feature of the same kind as '{}'",
                            spec.features[i].name
                        ))
                    })?;
                let k = unused.remove(pos);
                if sources.contains(spec.features[i].name.as_str()) || sources.contains(spec.features[k].name.as_str()) {
                    return Err(SynthError::InapplicableMutation(
                        "swapping a correlation source would change its dependents".into(),
                    ));
                }
                let g = out.features[i].generator.clone();
                out.features[i].generator = out.features[k].generator.clone();
                out.features[k].generator = g;
            }
        }
        Mutation::ScaleTarget(factor) | Mutation::ShiftTarget(factor) if !factor.is_finite() => {
            return Err(SynthError::InapplicableMutation("factor must be finite".into()));
        }
        Mutation::ScaleTarget(factor) => match &mut out.target.kind {
            TargetKind::Regression { offset, scale, .. } => {
                *offset *= factor;
                *scale *= factor;
            }
            TargetKind::Classification { .. } => {
                return Err(SynthError::InapplicableMutation("cannot scale a class label".into()));
            }
        },
        Mutation::ShiftTarget(delta) => match &mut out.target.kind {
            TargetKind::Regression { offset, .. } => *offset += delta,
            TargetKind::Classification { .. } => {
                return Err(SynthError::InapplicableMutation("cannot shift a class label".into()));
            }
        },
    }
    Ok(out)
}
