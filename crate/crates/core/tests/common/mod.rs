//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the split search or the impurity helpers of the
//! library; impurities are recomputed from raw target values.

#![allow(dead_code)]

use kpiforge::cart::{Criterion, Node, Split, TreeModel};
use kpiforge::tabular::{Column, ColumnKind, ColumnSpec, Schema, Table};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random missing-free table with at most `max_rows` rows and `max_features`
/// features. Numeric columns sometimes use a coarse grid so ties occur.
pub fn random_table(seed: u64, max_rows: usize, max_features: usize, regression: bool) -> Table<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_rows);
    let p = rng.random_range(1..=max_features);
    let mut specs = Vec::new();
    let mut columns = Vec::new();
    for j in 0..p {
        let name = format!("x{j}");
        if rng.random_bool(0.3) {
            let levels = rng.random_range(1..=4);
            let labels: Vec<Option<String>> = (0..n)
                .map(|_| Some(format!("v{}", rng.random_range(0..levels))))
                .collect();
            specs.push(ColumnSpec::feature(&name, ColumnKind::Categorical));
            columns.push(Column::categorical(&name, &labels));
        } else {
            let grid = rng.random_bool(0.5);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    if grid {
                        rng.random_range(0..5) as f64 * 0.5
                    } else {
                        rng.random_range(-3.0..3.0)
                    }
                })
                .collect();
            specs.push(ColumnSpec::feature(&name, ColumnKind::Numeric));
            columns.push(Column::numeric(&name, values));
        }
    }
    if regression {
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        specs.push(ColumnSpec::target("y", ColumnKind::Numeric));
        columns.push(Column::numeric("y", ys));
    } else {
        let classes = rng.random_range(2..=3);
        let ys: Vec<Option<String>> = (0..n)
            .map(|_| Some(format!("c{}", rng.random_range(0..classes))))
            .collect();
        specs.push(ColumnSpec::target("y", ColumnKind::Categorical));
        columns.push(Column::categorical("y", &ys));
    }
    Table::new(Schema::new(specs).unwrap(), columns).unwrap()
}

/// Target values of `rows` as class codes or numbers.
pub enum RowTargets {
    Classes(Vec<u32>),
    Values(Vec<f64>),
}

pub fn row_targets(table: &Table<f64>, rows: &[usize]) -> RowTargets {
    match table.target().as_codes() {
        Some(codes) => RowTargets::Classes(rows.iter().map(|&r| codes[r]).collect()),
        None => {
            let v = table.target().as_numeric().unwrap();
            RowTargets::Values(rows.iter().map(|&r| v[r]).collect())
        }
    }
}

pub fn reference_impurity(criterion: Criterion, targets: &RowTargets) -> f64 {
    match targets {
        RowTargets::Classes(codes) => {
            let n = codes.len() as f64;
            let max = codes.iter().copied().max().unwrap_or(0) as usize;
            let mut counts = vec![0usize; max + 1];
            for &c in codes {
                counts[c as usize] += 1;
            }
            let ps = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n);
            match criterion {
                Criterion::Gini => 1.0 - ps.map(|p| p * p).sum::<f64>(),
                Criterion::Entropy => ps.map(|p| -p * p.log2()).sum(),
                Criterion::Variance => panic!("variance on classes"),
            }
        }
        RowTargets::Values(ys) => {
            let n = ys.len() as f64;
            let m = ys.iter().sum::<f64>() / n;
            ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n
        }
    }
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid < hi {
        mid
    } else {
        lo
    }
}

/// Every admissible (feature, split, decrease) in (feature, threshold/code) order.
pub fn enumerate_splits(
    table: &Table<f64>,
    rows: &[usize],
    features: &[usize],
    criterion: Criterion,
    min_samples_leaf: usize,
) -> Vec<(usize, Split<f64>, f64)> {
    let msl = min_samples_leaf.max(1);
    let parent = reference_impurity(criterion, &row_targets(table, rows));
    let n = rows.len() as f64;
    let mut features = features.to_vec();
    features.sort_unstable();
    features.dedup();
    let mut out = Vec::new();
    for f in features {
        let col = table.feature(f);
        let mut candidates: Vec<(Split<f64>, Vec<usize>, Vec<usize>)> = Vec::new();
        if let Some(values) = col.as_numeric() {
            let mut distinct: Vec<f64> = rows.iter().map(|&r| values[r]).collect();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
            distinct.dedup();
            for w in distinct.windows(2) {
                let t = midpoint(w[0], w[1]);
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| values[i] <= t);
                candidates.push((Split::Threshold(t), l, r));
            }
        } else {
            let codes = col.as_codes().unwrap();
            for code in 0..col.dictionary().unwrap().len() as u32 {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| codes[i] == code);
                candidates.push((Split::Categories(vec![code]), l, r));
            }
        }
        for (split, l, r) in candidates {
            if l.len() < msl || r.len() < msl {
                continue;
            }
            let il = reference_impurity(criterion, &row_targets(table, &l));
            let ir = reference_impurity(criterion, &row_targets(table, &r));
            let delta = parent - l.len() as f64 / n * il - r.len() as f64 / n * ir;
            out.push((f, split, delta));
        }
    }
    out
}

/// Brute-force best split under the documented tie rule: decreases within
/// `1024 * eps * I(parent)` of the maximum tie, the first one wins, and the
/// maximum itself must exceed that slack.
pub fn brute_force_best_split(
    table: &Table<f64>,
    rows: &[usize],
    features: &[usize],
    criterion: Criterion,
    min_samples_leaf: usize,
) -> Option<(usize, Split<f64>, f64)> {
    if rows.len() < 2 || rows.len() < 2 * min_samples_leaf.max(1) {
        return None;
    }
    let all = enumerate_splits(table, rows, features, criterion, min_samples_leaf);
    let parent = reference_impurity(criterion, &row_targets(table, rows));
    let tol = 1024.0 * f64::EPSILON * parent;
    let max = all.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    if !(max > tol) {
        return None;
    }
    all.into_iter().find(|c| c.2 >= max - tol)
}

/// `|sum_internal w * decrease - (I(root) - sum_leaves w * I(leaf))|` with
/// `w = n_node / n_root`.
pub fn telescoping_gap(tree: &TreeModel<f64>) -> f64 {
    let root_n = tree.root().n_samples() as f64;
    let mut decreases = 0.0;
    let mut leaves = 0.0;
    for node in tree.nodes() {
        let w = node.n_samples() as f64 / root_n;
        match node {
            Node::Internal { impurity_decrease, .. } => decreases += w * impurity_decrease,
            Node::Leaf { impurity, .. } => leaves += w * impurity,
        }
    }
    (decreases - (tree.root().impurity() - leaves)).abs()
}

/// Bitwise equality of two `f64` slices.
pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
