//! Variable importance: mean decrease in impurity and permutation importance.
//!
//! MDI reads the impurity decreases stored in the fitted trees. Permutation
//! importance shuffles one feature column at a time and measures how much the
//! forest's accuracy (or R²) falls; by default the forest is scored on each
//! row's out-of-bag trees, so no holdout is needed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cart::Node;
use crate::forest::{self, Evaluation, ForestError, ForestModel, ForestParams, Permuted, Workers};
use crate::scalar::{descending_ranks, mean, sample_std, Scalar};
use crate::seed::{self, Stream};
use crate::tabular::{Table, TaskKind};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("permutation repeats must be at least 1")]
    RepeatsZero,
    #[error("rank agreement needs at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("stability selection needs at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("seed {0} is used more than once")]
    SeedCollision(u64),
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("holdout evaluation requested without a holdout table")]
    MissingHoldout,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Format(String),
}

pub type Result<T, E = ImportanceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    #[default]
    Oob,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationSettings {
    pub repeats: usize,
    pub seed: u64,
    pub mode: EvaluationMode,
}

impl Default for PermutationSettings {
    fn default() -> Self {
        Self {
            repeats: 10,
            seed: 0,
            mode: EvaluationMode::Oob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdiScores<T> {
    pub raw: Vec<T>,
    pub normalized: Vec<T>,
}

/// Mean decrease in impurity per feature.
///
/// Each split contributes its stored impurity decrease weighted by the share
/// of the tree's root sample that reached it; contributions are averaged over
/// trees. Normalized scores sum to one unless no tree split at all.
pub fn mdi<T: Scalar>(forest: &ForestModel<T>) -> MdiScores<T> {
    let p = forest.n_features();
    let mut raw = vec![T::zero(); p];
    for tree in forest.trees() {
        let root = T::from_count(tree.root().n_samples());
        for node in tree.nodes() {
            if let Node::Internal {
                feature,
                n_samples,
                impurity_decrease,
                ..
            } = node
            {
                raw[*feature] = raw[*feature] + T::from_count(*n_samples) / root * *impurity_decrease;
            }
        }
    }
    let n_trees = T::from_count(forest.trees().len());
    for r in &mut raw {
        *r = *r / n_trees;
    }
    let total: T = raw.iter().copied().sum();
    let normalized = if total > T::zero() {
        raw.iter().map(|&r| r / total).collect()
    } else {
        vec![T::zero(); p]
    };
    MdiScores { raw, normalized }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationScores<T> {
    pub baseline: T,
    /// `drops[j][r]`: baseline minus the metric with feature `j` shuffled in repeat `r`.
    pub drops: Vec<Vec<T>>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Permutation importance of every feature.
///
/// `table` is the training table in OOB mode or the held-out table in holdout
/// mode. Repeat `r` of feature `j` shuffles with a generator seeded by
/// `(settings.seed, j, r)`, so results do not depend on `workers`. The input
/// table is never modified: shuffled values are read through an index map.
pub fn permutation_importance<T: Scalar>(
    forest: &ForestModel<T>,
    table: &Table<T>,
    settings: &PermutationSettings,
    workers: Workers,
) -> Result<PermutationScores<T>> {
    permutation_with(forest, table, settings, workers, |n, feature, repeat| {
        let mut source: Vec<usize> = (0..n).collect();
        source.shuffle(&mut seed::rng(
            settings.seed,
            Stream::Permutation,
            &[feature as u64, repeat as u64],
        ));
        source
    })
}

fn permutation_with<T, F>(
    forest: &ForestModel<T>,
    table: &Table<T>,
    settings: &PermutationSettings,
    workers: Workers,
    shuffle: F,
) -> Result<PermutationScores<T>>
where
    T: Scalar,
    F: Fn(usize, usize, usize) -> Vec<usize> + Sync,
{
    if settings.repeats == 0 {
        return Err(ImportanceError::RepeatsZero);
    }
    let table = forest.prepare(table)?;
    let mode = match settings.mode {
        EvaluationMode::Oob => {
            forest.check_oob(&table)?;
            Evaluation::OutOfBag
        }
        EvaluationMode::Holdout => Evaluation::AllTrees,
    };
    let baseline = forest.evaluate(&table, mode, None).headline();
    let p = table.n_features();
    let n = table.n_rows();
    let repeats = settings.repeats;
    let flat: Vec<T> = workers.install(|| {
        (0..p * repeats)
            .into_par_iter()
            .map(|k| {
                let (feature, repeat) = (k / repeats, k % repeats);
                let source = shuffle(n, feature, repeat);
                let permuted = Permuted {
                    feature,
                    source: &source,
                };
                baseline - forest.evaluate(&table, mode, Some(permuted)).headline()
            })
            .collect()
    })?;
    let drops: Vec<Vec<T>> = flat.chunks(repeats).map(<[T]>::to_vec).collect();
    Ok(PermutationScores {
        baseline,
        mean: drops.iter().map(|d| mean(d)).collect(),
        std: drops.iter().map(|d| sample_std(d)).collect(),
        drops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeatureImportance<T> {
    pub name: String,
    pub mdi_raw: T,
    pub mdi_normalized: T,
    pub perm_mean: T,
    pub perm_std: T,
    pub perm_repeats: usize,
    pub perm_drops: Vec<T>,
    pub rank_mdi: usize,
    pub rank_perm: usize,
}

/// Both importance measures for every feature of one fitted forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImportanceReport<T> {
    pub format_version: u32,
    pub forest_fingerprint: String,
    pub schema_fingerprint: String,
    pub metric: String,
    pub baseline_metric: T,
    pub mode: EvaluationMode,
    pub seed: u64,
    pub features: Vec<FeatureImportance<T>>,
}

/// Runs MDI and permutation importance and assembles the ranked report.
///
/// `holdout` is required in holdout mode and ignored otherwise.
pub fn importance_report<T: Scalar>(
    forest: &ForestModel<T>,
    training: &Table<T>,
    holdout: Option<&Table<T>>,
    settings: &PermutationSettings,
    workers: Workers,
) -> Result<ImportanceReport<T>> {
    let eval_table = match settings.mode {
        EvaluationMode::Oob => training,
        EvaluationMode::Holdout => holdout.ok_or(ImportanceError::MissingHoldout)?,
    };
    let perm = permutation_importance(forest, eval_table, settings, workers)?;
    let mdi = mdi(forest);
    let rank_mdi = descending_ranks(&mdi.raw);
    let rank_perm = descending_ranks(&perm.mean);
    let features = forest
        .feature_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| FeatureImportance {
            name,
            mdi_raw: mdi.raw[j],
            mdi_normalized: mdi.normalized[j],
            perm_mean: perm.mean[j],
            perm_std: perm.std[j],
            perm_repeats: settings.repeats,
            perm_drops: perm.drops[j].clone(),
            rank_mdi: rank_mdi[j],
            rank_perm: rank_perm[j],
        })
        .collect();
    Ok(ImportanceReport {
        format_version: REPORT_FORMAT_VERSION,
        forest_fingerprint: forest.fingerprint(),
        schema_fingerprint: forest.schema_fingerprint().to_owned(),
        metric: match forest.task() {
            TaskKind::Classification => "accuracy",
            TaskKind::Regression => "r2",
        }
        .to_owned(),
        baseline_metric: perm.baseline,
        mode: settings.mode,
        seed: settings.seed,
        features,
    })
}

impl<T: Scalar> ImportanceReport<T> {
    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureImportance<T>> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn perm_means(&self) -> Vec<T> {
        self.features.iter().map(|f| f.perm_mean).collect()
    }

    /// Feature names ordered by permutation rank.
    pub fn by_perm_rank(&self) -> Vec<&FeatureImportance<T>> {
        let mut v: Vec<_> = self.features.iter().collect();
        v.sort_by_key(|f| f.rank_perm);
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| ImportanceError::Format(e.to_string()))?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(ImportanceError::Format(format!(
                "unsupported report format version {}",
                report.format_version
            )));
        }
        Ok(report)
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| ImportanceError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ImportanceError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Plain-text table sorted by permutation rank.
    pub fn render_table(&self) -> String {
        let width = self.features.iter().map(|f| f.name.len()).max().unwrap_or(7).max(7);
        let mut out = format!(
            "forest {}  baseline {} = {:.6}  ({:?}, {} repeats, seed {})\n",
            &self.forest_fingerprint[..self.forest_fingerprint.len().min(12)],
            self.metric,
            self.baseline_metric.as_f64(),
            self.mode,
            self.features.first().map_or(0, |f| f.perm_repeats),
            self.seed,
        );
        out.push_str(&format!(
            "{:>4}  {:<width$}  {:>10}  {:>10}  {:>8}  {:>10}\n",
            "rank", "feature", "perm_mean", "perm_std", "mdi_rank", "mdi_norm"
        ));
        for f in self.by_perm_rank() {
            out.push_str(&format!(
                "{:>4}  {:<width$}  {:>10.6}  {:>10.6}  {:>8}  {:>10.6}\n",
                f.rank_perm,
                f.name,
                f.perm_mean.as_f64(),
                f.perm_std.as_f64(),
                f.rank_mdi,
                f.mdi_normalized.as_f64(),
            ));
        }
        out
    }
}

/// Spearman correlation of two rank vectors without ties:
/// `1 - 6 sum d^2 / (p (p^2 - 1))`.
pub fn spearman<T: Scalar>(a: &[usize], b: &[usize]) -> Result<T> {
    assert_eq!(a.len(), b.len(), "rank vectors must have equal length");
    let p = a.len();
    if p < 2 {
        return Err(ImportanceError::TooFewFeatures(p));
    }
    let d2: usize = a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y).pow(2)).sum();
    let p = T::from_count(p);
    Ok(T::one() - T::lit(6.0) * T::from_count(d2) / (p * (p * p - T::one())))
}

/// Rank agreement between the MDI and permutation orderings of a report.
pub fn compare_measures<T: Scalar>(report: &ImportanceReport<T>) -> Result<T> {
    let mdi: Vec<usize> = report.features.iter().map(|f| f.rank_mdi).collect();
    let perm: Vec<usize> = report.features.iter().map(|f| f.rank_perm).collect();
    spearman(&mdi, &perm)
}

/// How often each feature lands in the permutation top-k across seeded refits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StabilityReport<T> {
    pub features: Vec<String>,
    pub frequency: Vec<T>,
    pub seeds: Vec<u64>,
    pub top_k: usize,
}

impl<T: Scalar> StabilityReport<T> {
    pub fn frequency_of(&self, name: &str) -> Option<T> {
        self.features.iter().position(|f| f == name).map(|i| self.frequency[i])
    }
}

/// `n` distinct run seeds derived from `master`.
pub fn stability_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed::derive(master, Stream::Stability, &[i])).collect()
}

/// Refits the forest once per seed (OOB permutation importance each time) and
/// counts how often every feature ranks within the top `top_k`.
pub fn stability_selection<T: Scalar>(
    table: &Table<T>,
    params: &ForestParams,
    seeds: &[u64],
    top_k: usize,
    settings: &PermutationSettings,
    workers: Workers,
) -> Result<StabilityReport<T>> {
    if seeds.len() < 2 {
        return Err(ImportanceError::TooFewSeeds(seeds.len()));
    }
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(ImportanceError::SeedCollision(*s));
        }
    }
    if top_k == 0 {
        return Err(ImportanceError::InvalidTopK);
    }
    let p = table.n_features();
    let mut hits = vec![0usize; p];
    for &s in seeds {
        let forest = forest::fit_forest_with(table, &params.clone().with_seed(s), workers)?;
        let run = PermutationSettings {
            seed: seed::derive(settings.seed, Stream::Stability, &[s]),
            mode: EvaluationMode::Oob,
            ..*settings
        };
        let perm = permutation_importance(&forest, table, &run, workers)?;
        for (j, rank) in descending_ranks(&perm.mean).into_iter().enumerate() {
            if rank <= top_k {
                hits[j] += 1;
            }
        }
    }
    let runs = T::from_count(seeds.len());
    Ok(StabilityReport {
        features: table.feature_names(),
        frequency: hits.into_iter().map(|h| T::from_count(h) / runs).collect(),
        seeds: seeds.to_vec(),
        top_k,
    })
}
