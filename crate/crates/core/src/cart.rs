//! CART trees: impurity measures, exhaustive split search and recursive growth.
//!
//! Every internal node records its sample count, its impurity and the
//! weighted impurity decrease of its split as computed during growth, so the
//! mean-decrease-in-impurity importance can be read straight off the fitted
//! trees.
//!
//! Numeric splits test `value <= threshold` with thresholds at midpoints of
//! consecutive distinct values. Categorical splits are one-vs-rest tests on a
//! single code: the code goes left, everything else (including codes unseen
//! at training time) goes right.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{argmax, comparison_slack, Scalar};
use crate::tabular::{ColumnData, ColumnKind, FeatureValue, RowAccess, Table, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum CartError {
    #[error("impurity of an empty node is undefined")]
    EmptyNode,
    #[error("no training rows")]
    EmptyTrainingSet,
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
    #[error("criterion {criterion:?} cannot be used for {task:?}")]
    CriterionMismatch { criterion: Criterion, task: TaskKind },
    #[error("row does not match the training schema: {0}")]
    SchemaMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
    Entropy,
    Variance,
}

impl Criterion {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Criterion::Gini,
            TaskKind::Regression => Criterion::Variance,
        }
    }

    pub fn supports(self, task: TaskKind) -> bool {
        matches!(
            (self, task),
            (Criterion::Gini | Criterion::Entropy, TaskKind::Classification)
                | (Criterion::Variance, TaskKind::Regression)
        )
    }
}

/// Node population handed to [`impurity`].
#[derive(Debug, Clone, Copy)]
pub enum Population<'a, T> {
    ClassCounts(&'a [usize]),
    Targets(&'a [T]),
}

/// Gini `1 - sum p^2`, entropy `-sum p log2 p`, or the population variance of the targets.
pub fn impurity<T: Scalar>(criterion: Criterion, population: Population<'_, T>) -> Result<T, CartError> {
    match (criterion, population) {
        (Criterion::Gini | Criterion::Entropy, Population::ClassCounts(counts)) => {
            let n: usize = counts.iter().sum();
            if n == 0 {
                return Err(CartError::EmptyNode);
            }
            Ok(class_impurity(criterion, counts, n))
        }
        (Criterion::Variance, Population::Targets(ys)) => {
            if ys.is_empty() {
                return Err(CartError::EmptyNode);
            }
            Ok(variance(ys))
        }
        (c, Population::ClassCounts(_)) => Err(CartError::CriterionMismatch {
            criterion: c,
            task: TaskKind::Classification,
        }),
        (c, Population::Targets(_)) => Err(CartError::CriterionMismatch {
            criterion: c,
            task: TaskKind::Regression,
        }),
    }
}

fn class_impurity<T: Scalar>(criterion: Criterion, counts: &[usize], n: usize) -> T {
    let n = T::from_count(n);
    match criterion {
        Criterion::Gini => {
            let sq: T = counts
                .iter()
                .map(|&c| {
                    let p = T::from_count(c) / n;
                    p * p
                })
                .sum();
            (T::one() - sq).max(T::zero())
        }
        Criterion::Entropy => counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = T::from_count(c) / n;
                -p * p.log2()
            })
            .sum::<T>()
            .max(T::zero()),
        Criterion::Variance => unreachable!("variance is not a class impurity"),
    }
}

fn variance<T: Scalar>(ys: &[T]) -> T {
    let n = T::from_count(ys.len());
    let m = ys.iter().copied().sum::<T>() / n;
    ys.iter().map(|&y| (y - m) * (y - m)).sum::<T>() / n
}

/// Split test stored at an internal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Split<T> {
    /// `value <= threshold` goes left.
    Threshold(T),
    /// Membership goes left. Training only produces singleton sets.
    Categories(Vec<u32>),
}

impl<T: Scalar> Split<T> {
    fn goes_left<R: RowAccess<T> + ?Sized>(&self, row: &R, feature: usize) -> bool {
        match self {
            Split::Threshold(t) => row.numeric(feature) <= *t,
            Split::Categories(set) => set.contains(&row.code(feature)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum LeafValue<T> {
    /// Class frequencies within the leaf, indexed by class code.
    Distribution(Vec<T>),
    Mean(T),
}

impl<T: Scalar> LeafValue<T> {
    /// Majority class (lowest code on ties) or the mean.
    pub fn point(&self) -> T {
        match self {
            LeafValue::Distribution(d) => T::from_count(argmax(d)),
            LeafValue::Mean(m) => *m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", rename_all = "snake_case")]
pub enum Node<T> {
    Internal {
        feature: usize,
        split: Split<T>,
        left: usize,
        right: usize,
        n_samples: usize,
        impurity: T,
        impurity_decrease: T,
    },
    Leaf {
        value: LeafValue<T>,
        n_samples: usize,
        impurity: T,
    },
}

impl<T: Scalar> Node<T> {
    pub fn n_samples(&self) -> usize {
        match self {
            Node::Internal { n_samples, .. } | Node::Leaf { n_samples, .. } => *n_samples,
        }
    }

    pub fn impurity(&self) -> T {
        match self {
            Node::Internal { impurity, .. } | Node::Leaf { impurity, .. } => *impurity,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mtry {
    #[default]
    All,
    Count(usize),
}

impl Mtry {
    pub fn resolve(self, n_features: usize) -> Result<usize, CartError> {
        match self {
            Mtry::All => Ok(n_features),
            Mtry::Count(k) if k >= 1 && k <= n_features => Ok(k),
            Mtry::Count(k) => Err(CartError::InvalidParams(format!(
                "mtry {k} outside 1..={n_features}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until the other stopping rules fire.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    pub mtry: Mtry,
    pub criterion: Criterion,
}

impl TreeParams {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            max_depth: None,
            min_samples_leaf: 1,
            min_samples_split: 2,
            mtry: Mtry::All,
            criterion: Criterion::default_for(task),
        }
    }

    pub fn validate(&self, n_features: usize, task: TaskKind) -> Result<usize, CartError> {
        if self.min_samples_leaf < 1 {
            return Err(CartError::InvalidParams("min_samples_leaf must be >= 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(CartError::InvalidParams("min_samples_split must be >= 2".into()));
        }
        if !self.criterion.supports(task) {
            return Err(CartError::CriterionMismatch {
                criterion: self.criterion,
                task,
            });
        }
        self.mtry.resolve(n_features)
    }
}

/// Best split found for a node.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate<T> {
    pub feature: usize,
    pub split: Split<T>,
    pub impurity_decrease: T,
}

/// Targets as seen by the split search.
enum Targets<'a, T> {
    Classes { codes: &'a [u32], n_classes: usize },
    Values(&'a [T]),
}

impl<'a, T: Scalar> Targets<'a, T> {
    fn of(table: &'a Table<T>) -> Self {
        match &table.target().data {
            ColumnData::Categorical { codes, dictionary } => Targets::Classes {
                codes,
                n_classes: dictionary.len(),
            },
            ColumnData::Numeric(v) => Targets::Values(v),
        }
    }
}

/// Running statistics of one side of a candidate split.
#[derive(Clone)]
enum Side<T> {
    Counts(Vec<usize>),
    /// Sum of node-centred targets.
    Sum(T),
}

struct NodeContext<'a, T> {
    criterion: Criterion,
    n: usize,
    parent_impurity: T,
    parent: Side<T>,
    targets: &'a Targets<'a, T>,
    node_mean: T,
}

impl<T: Scalar> NodeContext<'_, T> {
    fn empty_side(&self) -> Side<T> {
        match &self.parent {
            Side::Counts(c) => Side::Counts(vec![0; c.len()]),
            Side::Sum(_) => Side::Sum(T::zero()),
        }
    }

    fn add(&self, side: &mut Side<T>, row: usize) {
        match (side, self.targets) {
            (Side::Counts(c), Targets::Classes { codes, .. }) => c[codes[row] as usize] += 1,
            (Side::Sum(s), Targets::Values(v)) => *s = *s + (v[row] - self.node_mean),
            _ => unreachable!("side kind matches target kind"),
        }
    }

    /// `I(parent) - n_l/n I(left) - n_r/n I(right)` for a left side holding `n_left` rows.
    fn decrease(&self, left: &Side<T>, n_left: usize) -> T {
        let n_right = self.n - n_left;
        let n = T::from_count(self.n);
        match (left, &self.parent) {
            (Side::Counts(l), Side::Counts(p)) => {
                let r: Vec<usize> = p.iter().zip(l).map(|(a, b)| a - b).collect();
                let il: T = class_impurity(self.criterion, l, n_left);
                let ir: T = class_impurity(self.criterion, &r, n_right);
                self.parent_impurity
                    - T::from_count(n_left) / n * il
                    - T::from_count(n_right) / n * ir
            }
            (Side::Sum(sl), Side::Sum(s)) => {
                // Variance decrease from centred sums only:
                // (S_l^2/n_l + S_r^2/n_r)/n - (S/n)^2.
                let sr = *s - *sl;
                let between = (*sl * *sl / T::from_count(n_left) + sr * sr / T::from_count(n_right)) / n;
                between - (*s / n) * (*s / n)
            }
            _ => unreachable!("side kind matches target kind"),
        }
    }
}

fn node_stats<T: Scalar>(targets: &Targets<'_, T>, rows: &[usize], criterion: Criterion) -> (Side<T>, T, T) {
    match targets {
        Targets::Classes { codes, n_classes } => {
            let mut counts = vec![0usize; *n_classes];
            for &r in rows {
                counts[codes[r] as usize] += 1;
            }
            let imp = class_impurity(criterion, &counts, rows.len());
            (Side::Counts(counts), imp, T::zero())
        }
        Targets::Values(v) => {
            let ys: Vec<T> = rows.iter().map(|&r| v[r]).collect();
            let n = T::from_count(ys.len());
            let mean = ys.iter().copied().sum::<T>() / n;
            let centred_sum: T = ys.iter().map(|&y| y - mean).sum();
            (Side::Sum(centred_sum), variance(&ys), mean)
        }
    }
}

/// Midpoint of two consecutive distinct values, kept strictly below `hi`.
fn midpoint<T: Scalar>(lo: T, hi: T) -> T {
    let mid = lo + (hi - lo) / T::lit(2.0);
    if mid < hi {
        mid
    } else {
        lo
    }
}

/// Exhaustive search for the split with the largest weighted impurity decrease.
///
/// Candidates are visited in (feature, threshold or code) order. Decreases
/// within a relative `1024 * epsilon` of the maximum count as ties and the
/// first such candidate wins, so the choice does not hinge on the last bit of
/// rounding. Returns `None` when no admissible split decreases impurity.
pub fn best_split<T: Scalar>(
    table: &Table<T>,
    rows: &[usize],
    candidate_features: &[usize],
    criterion: Criterion,
    min_samples_leaf: usize,
) -> Option<SplitCandidate<T>> {
    if rows.len() < 2 {
        return None;
    }
    let targets = Targets::of(table);
    let (parent, parent_impurity, node_mean) = node_stats(&targets, rows, criterion);
    let ctx = NodeContext {
        criterion,
        n: rows.len(),
        parent_impurity,
        parent,
        targets: &targets,
        node_mean,
    };
    let msl = min_samples_leaf.max(1);
    if ctx.n < 2 * msl {
        return None;
    }

    let mut found: Vec<SplitCandidate<T>> = Vec::new();
    let mut features = candidate_features.to_vec();
    features.sort_unstable();
    features.dedup();
    for &f in &features {
        match &table.feature(f).data {
            ColumnData::Numeric(values) => scan_numeric(&ctx, values, rows, f, msl, &mut found),
            ColumnData::Categorical { codes, dictionary } => {
                scan_categorical(&ctx, codes, dictionary.len(), rows, f, msl, &mut found)
            }
        }
    }
    select_best(found, ctx.parent_impurity)
}

fn scan_numeric<T: Scalar>(
    ctx: &NodeContext<'_, T>,
    values: &[T],
    rows: &[usize],
    feature: usize,
    msl: usize,
    out: &mut Vec<SplitCandidate<T>>,
) {
    let mut sorted: Vec<usize> = rows.to_vec();
    sorted.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut left = ctx.empty_side();
    for i in 0..sorted.len() - 1 {
        ctx.add(&mut left, sorted[i]);
        let (lo, hi) = (values[sorted[i]], values[sorted[i + 1]]);
        let n_left = i + 1;
        if !(lo < hi) || n_left < msl || ctx.n - n_left < msl {
            continue;
        }
        out.push(SplitCandidate {
            feature,
            split: Split::Threshold(midpoint(lo, hi)),
            impurity_decrease: ctx.decrease(&left, n_left),
        });
    }
}

fn scan_categorical<T: Scalar>(
    ctx: &NodeContext<'_, T>,
    codes: &[u32],
    n_codes: usize,
    rows: &[usize],
    feature: usize,
    msl: usize,
    out: &mut Vec<SplitCandidate<T>>,
) {
    let mut sides = vec![ctx.empty_side(); n_codes];
    let mut sizes = vec![0usize; n_codes];
    for &r in rows {
        let c = codes[r] as usize;
        ctx.add(&mut sides[c], r);
        sizes[c] += 1;
    }
    for (code, (side, &size)) in sides.iter().zip(&sizes).enumerate() {
        if size < msl || ctx.n - size < msl {
            continue;
        }
        out.push(SplitCandidate {
            feature,
            split: Split::Categories(vec![code as u32]),
            impurity_decrease: ctx.decrease(side, size),
        });
    }
}

fn select_best<T: Scalar>(found: Vec<SplitCandidate<T>>, parent_impurity: T) -> Option<SplitCandidate<T>> {
    let tol = comparison_slack::<T>() * parent_impurity;
    let max = found
        .iter()
        .map(|c| c.impurity_decrease)
        .fold(T::neg_infinity(), T::max);
    if !(max > tol) {
        return None;
    }
    found.into_iter().find(|c| c.impurity_decrease >= max - tol)
}

/// A fitted CART tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TreeModel<T> {
    nodes: Vec<Node<T>>,
    task: TaskKind,
    feature_kinds: Vec<ColumnKind>,
    n_classes: Option<usize>,
}

impl<T: Scalar> TreeModel<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn root(&self) -> &Node<T> {
        &self.nodes[0]
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn n_features(&self) -> usize {
        self.feature_kinds.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk<T: Scalar>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn uses_feature(&self, feature: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, Node::Internal { feature: f, .. } if *f == feature))
    }

    /// Index of the leaf `row` lands in.
    pub fn leaf_index<R: RowAccess<T> + ?Sized>(&self, row: &R) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                    ..
                } => i = if split.goes_left(row, *feature) { *left } else { *right },
            }
        }
    }

    pub fn predict<R: RowAccess<T> + ?Sized>(&self, row: &R) -> &LeafValue<T> {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { value, .. } => value,
            Node::Internal { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    /// Checks an owned row against the training schema before routing it.
    pub fn predict_row(&self, row: &[FeatureValue<T>]) -> Result<&LeafValue<T>, CartError> {
        check_row(row, &self.feature_kinds)?;
        Ok(self.predict(row))
    }
}

pub(crate) fn check_row<T>(row: &[FeatureValue<T>], kinds: &[ColumnKind]) -> Result<(), CartError> {
    if row.len() != kinds.len() {
        return Err(CartError::SchemaMismatch(format!(
            "expected {} features, got {}",
            kinds.len(),
            row.len()
        )));
    }
    for (i, (v, k)) in row.iter().zip(kinds).enumerate() {
        let ok = matches!(
            (v, k),
            (FeatureValue::Numeric(_), ColumnKind::Numeric) | (FeatureValue::Code(_), ColumnKind::Categorical)
        );
        if !ok {
            return Err(CartError::SchemaMismatch(format!("feature {i} should be {k:?}")));
        }
    }
    Ok(())
}

/// Grows a tree on `rows` (duplicates allowed, as in a bootstrap sample).
///
/// At each node `mtry` candidate features are drawn without replacement from
/// `rng`; when `mtry` covers every feature no randomness is consumed.
pub fn fit_tree<T: Scalar, R: Rng + ?Sized>(
    table: &Table<T>,
    rows: &[usize],
    params: &TreeParams,
    rng: &mut R,
) -> Result<TreeModel<T>, CartError> {
    if rows.is_empty() || table.n_rows() == 0 {
        return Err(CartError::EmptyTrainingSet);
    }
    let p = table.n_features();
    let mtry = params.validate(p, table.task())?;
    let targets = Targets::of(table);
    let mut grower = Grower {
        table,
        targets: &targets,
        params,
        mtry,
        nodes: Vec::new(),
    };
    let mut rows = rows.to_vec();
    grower.grow(&mut rows, 0, rng);
    Ok(TreeModel {
        nodes: grower.nodes,
        task: table.task(),
        feature_kinds: table.features().iter().map(|c| c.kind()).collect(),
        n_classes: table.n_classes(),
    })
}

struct Grower<'a, T> {
    table: &'a Table<T>,
    targets: &'a Targets<'a, T>,
    params: &'a TreeParams,
    mtry: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Grower<'_, T> {
    fn grow<R: Rng + ?Sized>(&mut self, rows: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let id = self.nodes.len();
        let (stats, node_impurity, mean) = node_stats(self.targets, rows, self.params.criterion);
        let n = rows.len();
        let can_split = self.params.max_depth.is_none_or(|d| depth < d)
            && n >= self.params.min_samples_split
            && n >= 2 * self.params.min_samples_leaf
            && node_impurity > T::zero();
        let found = if can_split {
            let features = self.draw_features(rng);
            best_split(self.table, rows, &features, self.params.criterion, self.params.min_samples_leaf)
        } else {
            None
        };
        let Some(found) = found else {
            let value = match stats {
                Side::Counts(counts) => {
                    let total = T::from_count(n);
                    LeafValue::Distribution(counts.iter().map(|&c| T::from_count(c) / total).collect())
                }
                Side::Sum(_) => LeafValue::Mean(mean),
            };
            self.nodes.push(Node::Leaf {
                value,
                n_samples: n,
                impurity: node_impurity,
            });
            return id;
        };

        let split_at = partition(rows, |&r| found.split.goes_left(&self.table.row(r), found.feature));
        self.nodes.push(Node::Leaf {
            value: LeafValue::Mean(T::zero()),
            n_samples: n,
            impurity: node_impurity,
        });
        let (left_rows, right_rows) = rows.split_at_mut(split_at);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[id] = Node::Internal {
            feature: found.feature,
            split: found.split,
            left,
            right,
            n_samples: n,
            impurity: node_impurity,
            impurity_decrease: found.impurity_decrease.max(T::zero()),
        };
        id
    }

    fn draw_features<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let p = self.table.n_features();
        if self.mtry >= p {
            return (0..p).collect();
        }
        let mut picked = index::sample(rng, p, self.mtry).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Stable partition: rows satisfying `pred` first; returns their count.
fn partition<F: Fn(&usize) -> bool>(rows: &mut [usize], pred: F) -> usize {
    let (mut yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|r| pred(r));
    let k = yes.len();
    yes.extend(no);
    rows.copy_from_slice(&yes);
    k
}
