//! Bagged CART ensembles with out-of-bag bookkeeping.
//!
//! Tree `i` draws its bootstrap sample and its per-node feature subsets from
//! two streams seeded by `(master_seed, i)` (see [`crate::seed`]), so a
//! forest is a pure function of the table and its parameters no matter how
//! many worker threads trained it. The first `k` trees of an `n`-tree forest
//! are exactly the trees of the `k`-tree forest with the same seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cart::{self, check_row, CartError, Criterion, LeafValue, Mtry, TreeModel, TreeParams};
use crate::scalar::{argmax, Scalar};
use crate::seed::{self, Stream};
use crate::tabular::{ColumnKind, Dictionaries, FeatureValue, RowAccess, Schema, Table, TableError, TaskKind};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error(transparent)]
    Tree(#[from] CartError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("no training rows")]
    EmptyTrainingSet,
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("table still has missing values; run clean first")]
    MissingValues,
    #[error("{} row(s) are in-bag for every tree (first: {:?})", .0.len(), .0.first())]
    NoOobCoverage(Vec<usize>),
    #[error("data does not match the model schema: {0}")]
    SchemaMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model format version {0} is not supported (expected {MODEL_FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T, E = ForestError> = std::result::Result<T, E>;

/// How many threads a parallel step may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Workers {
    /// The global rayon pool.
    #[default]
    Available,
    Fixed(usize),
}

impl Workers {
    pub(crate) fn install<R: Send>(self, job: impl FnOnce() -> R + Send) -> Result<R> {
        match self {
            Workers::Available => Ok(job()),
            Workers::Fixed(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| ForestError::ThreadPool(e.to_string()))?;
                Ok(pool.install(job))
            }
        }
    }
}

/// Forest hyperparameters. Unset tree fields take task-dependent defaults when
/// the forest is fitted: `mtry` is `ceil(sqrt(p))` for classification and
/// `max(1, floor(p/3))` for regression; the criterion is gini or variance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    pub mtry: Option<Mtry>,
    pub criterion: Option<Criterion>,
    pub bootstrap: bool,
    pub master_seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            min_samples_split: 2,
            mtry: None,
            criterion: None,
            bootstrap: true,
            master_seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn default_mtry(task: TaskKind, n_features: usize) -> usize {
        match task {
            TaskKind::Classification => (n_features as f64).sqrt().ceil() as usize,
            TaskKind::Regression => (n_features / 3).max(1),
        }
        .min(n_features)
    }

    /// Tree parameters with defaults filled in, validated against the table shape.
    pub fn tree_params(&self, task: TaskKind, n_features: usize) -> Result<TreeParams> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidParams("n_trees must be >= 1".into()));
        }
        let params = TreeParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            min_samples_split: self.min_samples_split,
            mtry: self
                .mtry
                .unwrap_or(Mtry::Count(Self::default_mtry(task, n_features))),
            criterion: self.criterion.unwrap_or(Criterion::default_for(task)),
        };
        params.validate(n_features, task).map_err(|e| match e {
            CartError::InvalidParams(m) => ForestError::InvalidParams(m),
            other => other.into(),
        })?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T> {
    Class(usize),
    Value(T),
}

impl<T: Scalar> Prediction<T> {
    pub fn point(&self) -> T {
        match self {
            Prediction::Class(c) => T::from_count(*c),
            Prediction::Value(v) => *v,
        }
    }
}

/// Classification accuracy or regression fit of a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", rename_all = "snake_case", tag = "kind")]
pub enum Metric<T> {
    Accuracy { accuracy: T },
    Regression { r2: T, mse: T },
}

impl<T: Scalar> Metric<T> {
    /// Higher-is-better headline value: accuracy or R².
    pub fn headline(&self) -> T {
        match self {
            Metric::Accuracy { accuracy } => *accuracy,
            Metric::Regression { r2, .. } => *r2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy { .. } => "accuracy",
            Metric::Regression { .. } => "r2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OobReport<T> {
    pub metric: Metric<T>,
    pub n_rows: usize,
    pub n_trees: usize,
    /// Mean over trees of the fraction of rows left out of the bootstrap sample.
    pub mean_oob_fraction: T,
}

/// A feature column with one value taken from other rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Permuted<'a> {
    pub feature: usize,
    /// `source[r]` is the row whose value row `r` sees.
    pub source: &'a [usize],
}

struct EvalRow<'a, T> {
    table: &'a Table<T>,
    row: usize,
    permuted: Option<Permuted<'a>>,
}

impl<T: Scalar> EvalRow<'_, T> {
    #[inline]
    fn source(&self, feature: usize) -> usize {
        match self.permuted {
            Some(p) if p.feature == feature => p.source[self.row],
            _ => self.row,
        }
    }
}

impl<T: Scalar> RowAccess<T> for EvalRow<'_, T> {
    fn numeric(&self, feature: usize) -> T {
        self.table.numeric_value(feature, self.source(feature))
    }

    fn code(&self, feature: usize) -> u32 {
        self.table.code_value(feature, self.source(feature))
    }
}

/// Which rows and trees an evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Evaluation {
    /// Each training row scored by the trees it was out-of-bag for.
    OutOfBag,
    /// Every row scored by every tree.
    AllTrees,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ForestModel<T> {
    format_version: u32,
    params: ForestParams,
    tree_params: TreeParams,
    task: TaskKind,
    schema: Schema,
    schema_fingerprint: String,
    dictionaries: Dictionaries,
    n_rows: usize,
    trees: Vec<TreeModel<T>>,
    /// Bootstrap multiplicity of every training row, per tree.
    in_bag: Vec<Vec<u32>>,
}

/// Fits a forest using the global thread pool.
pub fn fit_forest<T: Scalar>(table: &Table<T>, params: &ForestParams) -> Result<ForestModel<T>> {
    fit_forest_with(table, params, Workers::Available)
}

pub fn fit_forest_with<T: Scalar>(table: &Table<T>, params: &ForestParams, workers: Workers) -> Result<ForestModel<T>> {
    let n = table.n_rows();
    if n == 0 {
        return Err(ForestError::EmptyTrainingSet);
    }
    if n < 2 {
        return Err(ForestError::InvalidParams("a forest needs at least 2 rows".into()));
    }
    if table.has_missing() {
        return Err(ForestError::MissingValues);
    }
    let tree_params = params.tree_params(table.task(), table.n_features())?;
    let grown: Vec<(TreeModel<T>, Vec<u32>)> = workers.install(|| {
        (0..params.n_trees)
            .into_par_iter()
            .map(|i| grow_member(table, params, &tree_params, i))
            .collect::<std::result::Result<_, CartError>>()
    })??;
    let (trees, in_bag) = grown.into_iter().unzip();
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        params: params.clone(),
        tree_params,
        task: table.task(),
        schema: table.schema().clone(),
        schema_fingerprint: table.schema().fingerprint(),
        dictionaries: table.dictionaries(),
        n_rows: n,
        trees,
        in_bag,
    })
}

fn grow_member<T: Scalar>(
    table: &Table<T>,
    params: &ForestParams,
    tree_params: &TreeParams,
    index: usize,
) -> std::result::Result<(TreeModel<T>, Vec<u32>), CartError> {
    let n = table.n_rows();
    let mut counts = vec![0u32; n];
    if params.bootstrap {
        let mut rng = seed::rng(params.master_seed, Stream::Bootstrap, &[index as u64]);
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
    } else {
        counts.fill(1);
    }
    let rows: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(r, &c)| std::iter::repeat_n(r, c as usize))
        .collect();
    let mut rng = seed::rng(params.master_seed, Stream::TreeGrowth, &[index as u64]);
    let tree = cart::fit_tree(table, &rows, tree_params, &mut rng)?;
    Ok((tree, counts))
}

impl<T: Scalar> ForestModel<T> {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn tree_params(&self) -> &TreeParams {
        &self.tree_params
    }

    pub fn trees(&self) -> &[TreeModel<T>] {
        &self.trees
    }

    pub fn in_bag(&self) -> &[Vec<u32>] {
        &self.in_bag
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_fingerprint(&self) -> &str {
        &self.schema_fingerprint
    }

    pub fn dictionaries(&self) -> &Dictionaries {
        &self.dictionaries
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.dictionaries.features.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.schema.features().map(|c| c.name.clone()).collect()
    }

    pub fn class_labels(&self) -> Option<&[String]> {
        self.dictionaries.target.as_deref()
    }

    fn n_classes(&self) -> usize {
        self.dictionaries.target.as_ref().map_or(0, Vec::len)
    }

    /// Fraction of training rows out-of-bag, averaged over trees.
    pub fn mean_oob_fraction(&self) -> T {
        let total: T = self
            .in_bag
            .iter()
            .map(|c| T::from_count(c.iter().filter(|&&m| m == 0).count()) / T::from_count(self.n_rows))
            .sum();
        total / T::from_count(self.trees.len())
    }

    /// Checks `table` against the model schema and recodes its categorical
    /// columns to the training dictionaries.
    pub fn prepare(&self, table: &Table<T>) -> Result<Table<T>> {
        if table.schema().fingerprint() != self.schema_fingerprint {
            return Err(ForestError::SchemaMismatch(format!(
                "schema fingerprint {} differs from the model's {}",
                table.schema().fingerprint(),
                self.schema_fingerprint
            )));
        }
        if table.has_missing() {
            return Err(ForestError::MissingValues);
        }
        if table.dictionaries() == self.dictionaries {
            return Ok(table.clone());
        }
        Ok(table.align_to(&self.dictionaries)?)
    }

    fn aggregate<'a, R, I>(&self, row: &R, trees: I) -> Option<Prediction<T>>
    where
        R: RowAccess<T> + ?Sized,
        I: IntoIterator<Item = &'a TreeModel<T>>,
    {
        match self.task {
            TaskKind::Classification => {
                let mut votes = vec![T::zero(); self.n_classes()];
                let mut any = false;
                for tree in trees {
                    if let LeafValue::Distribution(d) = tree.predict(row) {
                        for (v, p) in votes.iter_mut().zip(d) {
                            *v = *v + *p;
                        }
                        any = true;
                    }
                }
                any.then(|| Prediction::Class(argmax(&votes)))
            }
            TaskKind::Regression => {
                let mut sum = T::zero();
                let mut k = 0usize;
                for tree in trees {
                    sum = sum + tree.predict(row).point();
                    k += 1;
                }
                (k > 0).then(|| Prediction::Value(sum / T::from_count(k)))
            }
        }
    }

    /// Majority vote over summed leaf distributions (lowest class code on
    /// ties) or the mean of the tree predictions.
    pub fn predict(&self, row: &[FeatureValue<T>]) -> Result<Prediction<T>> {
        let kinds: Vec<ColumnKind> = self.schema.features().map(|c| c.kind).collect();
        check_row(row, &kinds)?;
        Ok(self.aggregate(row, &self.trees).expect("forest has trees"))
    }

    /// Predictions for every row of a table already passed through [`Self::prepare`].
    pub fn predict_table(&self, table: &Table<T>) -> Result<Vec<Prediction<T>>> {
        let table = self.prepare(table)?;
        Ok((0..table.n_rows())
            .map(|r| self.aggregate(&table.row(r), &self.trees).expect("forest has trees"))
            .collect())
    }

    /// Rows that are in-bag for every tree.
    pub fn uncovered_rows(&self) -> Vec<usize> {
        (0..self.n_rows)
            .filter(|&r| self.in_bag.iter().all(|c| c[r] > 0))
            .collect()
    }

    pub(crate) fn check_oob(&self, table: &Table<T>) -> Result<()> {
        if table.n_rows() != self.n_rows {
            return Err(ForestError::SchemaMismatch(format!(
                "out-of-bag evaluation needs the {} training rows, got {}",
                self.n_rows,
                table.n_rows()
            )));
        }
        let uncovered = self.uncovered_rows();
        if !uncovered.is_empty() {
            return Err(ForestError::NoOobCoverage(uncovered));
        }
        Ok(())
    }

    /// Scores `table` (already prepared) with an optional permuted column.
    pub(crate) fn evaluate(&self, table: &Table<T>, mode: Evaluation, permuted: Option<Permuted<'_>>) -> Metric<T> {
        let predictions: Vec<Prediction<T>> = (0..table.n_rows())
            .map(|r| {
                let row = EvalRow { table, row: r, permuted };
                let p = match mode {
                    Evaluation::AllTrees => self.aggregate(&row, &self.trees),
                    Evaluation::OutOfBag => self.aggregate(
                        &row,
                        self.trees.iter().zip(&self.in_bag).filter(|(_, c)| c[r] == 0).map(|(t, _)| t),
                    ),
                };
                p.expect("coverage checked by caller")
            })
            .collect();
        metric(table, &predictions)
    }

    /// Out-of-bag accuracy (classification) or R² and MSE (regression) on the training table.
    pub fn oob_score(&self, table: &Table<T>) -> Result<OobReport<T>> {
        let table = self.prepare(table)?;
        self.check_oob(&table)?;
        Ok(OobReport {
            metric: self.evaluate(&table, Evaluation::OutOfBag, None),
            n_rows: self.n_rows,
            n_trees: self.trees.len(),
            mean_oob_fraction: self.mean_oob_fraction(),
        })
    }

    /// Metric of the full ensemble on held-out rows.
    pub fn holdout_score(&self, table: &Table<T>) -> Result<Metric<T>> {
        let table = self.prepare(table)?;
        Ok(self.evaluate(&table, Evaluation::AllTrees, None))
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("model serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_slice(bytes).map_err(|e| ForestError::Format(e.to_string()))?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(ForestError::UnsupportedVersion(header.format_version));
        }
        let model: Self = serde_json::from_slice(bytes).map_err(|e| ForestError::Format(e.to_string()))?;
        if model.trees.len() != model.in_bag.len() || model.trees.is_empty() {
            return Err(ForestError::Format("tree and in-bag counts disagree".into()));
        }
        Ok(model)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_bytes()).map_err(|source| ForestError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ForestError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json_bytes(&bytes)
    }
}

fn metric<T: Scalar>(table: &Table<T>, predictions: &[Prediction<T>]) -> Metric<T> {
    let n = T::from_count(predictions.len());
    match table.task() {
        TaskKind::Classification => {
            let codes = table.target().as_codes().expect("classification target");
            let correct = predictions
                .iter()
                .zip(codes)
                .filter(|(p, &c)| matches!(p, Prediction::Class(k) if *k == c as usize))
                .count();
            Metric::Accuracy {
                accuracy: T::from_count(correct) / n,
            }
        }
        TaskKind::Regression => {
            let ys = table.target().as_numeric().expect("regression target");
            let mean = ys.iter().copied().sum::<T>() / n;
            let ss_res: T = predictions
                .iter()
                .zip(ys)
                .map(|(p, &y)| {
                    let e = y - p.point();
                    e * e
                })
                .sum();
            let ss_tot: T = ys.iter().map(|&y| (y - mean) * (y - mean)).sum();
            let r2 = if ss_tot > T::zero() {
                T::one() - ss_res / ss_tot
            } else if ss_res == T::zero() {
                T::one()
            } else {
                T::zero()
            };
            Metric::Regression { r2, mse: ss_res / n }
        }
    }
}
