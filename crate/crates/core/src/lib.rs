//! Micro-KPI derivation for public-administration processes.
//!
//! A from-scratch Random Forest is trained against a macro-KPI target, input
//! variables are ranked by mean decrease in impurity and by permutation
//! importance, stable high-ranking variables become micro-KPI candidates in an
//! auditable registry, and the rankings are monitored for drift on new data.
//!
//! Numerical code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, with `F32`-suffixed variants for `f32`.
//!
//! ```
//! use kpiforge::{synth, forest, importance, forest::Workers};
//!
//! let spec = synth::GeneratorSpec::classification(200, &[2.0, 1.0], 2, 0.0, 7);
//! let (table, _truth) = synth::generate::<f64>(&spec).unwrap();
//! let params = forest::ForestParams { n_trees: 50, ..Default::default() };
//! let model = forest::fit_forest(&table, &params).unwrap();
//! let report = importance::importance_report(
//!     &model, &table, None, &Default::default(), Workers::Available,
//! ).unwrap();
//! assert_eq!(report.features.len(), 4);
//! ```

pub mod cart;
pub mod forest;
pub mod importance;
pub mod kpi;
pub mod monitor;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tabular;

pub use kpi::{KpiRegistry, MacroKpi, MicroKpiCandidate};
pub use scalar::Scalar;
pub use tabular::Schema;

pub type Table = tabular::Table<f64>;
pub type TableF32 = tabular::Table<f32>;
pub type TreeModel = cart::TreeModel<f64>;
pub type TreeModelF32 = cart::TreeModel<f32>;
pub type ForestModel = forest::ForestModel<f64>;
pub type ForestModelF32 = forest::ForestModel<f32>;
pub type ImportanceReport = importance::ImportanceReport<f64>;
pub type ImportanceReportF32 = importance::ImportanceReport<f32>;
pub type StabilityReport = importance::StabilityReport<f64>;
pub type StabilityReportF32 = importance::StabilityReport<f32>;
pub type DriftReport = monitor::DriftReport<f64>;
pub type DriftReportF32 = monitor::DriftReport<f32>;
pub type EffectSummary = monitor::EffectSummary<f64>;
pub type EffectSummaryF32 = monitor::EffectSummary<f32>;
