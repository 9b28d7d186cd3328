//! KPI registry: macro-KPI definitions, micro-KPI candidates derived from
//! importance results, and the stakeholder decision ledger.
//!
//! The ledger is the source of truth. [`KpiRegistry`] keeps an append-only
//! list of [`LedgerEvent`]s and a state that is always `fold(ledger)`; every
//! mutation validates against the current state, appends one event and
//! applies it through the same code path replay uses.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::{ImportanceReport, StabilityReport};
use crate::scalar::Scalar;
use crate::tabular::{ColumnRole, Schema};

pub const REGISTRY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum KpiError {
    #[error("invalid derivation thresholds: {0}")]
    ThresholdInvalid(String),
    #[error("importance and stability reports cover different features")]
    FeatureSetMismatch,
    #[error("unknown macro KPI '{0}'")]
    UnknownMacro(String),
    #[error("macro KPI '{0}' is already registered")]
    DuplicateMacro(String),
    #[error("macro KPI '{id}': column '{column}' is not the schema's target")]
    TargetNotInSchema { id: String, column: String },
    #[error("unknown candidate '{0}'")]
    UnknownCandidate(String),
    #[error("candidate '{id}' is already {status}")]
    AlreadyDecided { id: String, status: String },
    #[error("candidates belong to different macro KPIs")]
    CrossMacroMerge,
    #[error("a merge needs at least two distinct candidates")]
    TooFewToMerge,
    #[error("a candidate needs at least one feature")]
    EmptyFeatureSet,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed registry file: {0}")]
    Format(String),
    #[error("registry snapshot disagrees with its ledger")]
    Corrupt,
}

pub type Result<T, E = KpiError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

/// A top-level outcome indicator; its target column is what the forest predicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroKpi {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub target_column: String,
    pub direction: Direction,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub goal_ref: String,
}

impl MacroKpi {
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        let ok = schema
            .columns()
            .iter()
            .any(|c| c.name == self.target_column && c.role == ColumnRole::Target);
        if ok {
            Ok(())
        } else {
            Err(KpiError::TargetNotInSchema {
                id: self.id.clone(),
                column: self.target_column.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum CandidateStatus {
    Proposed,
    Confirmed,
    Rejected,
    Merged { into: String },
}

impl CandidateStatus {
    pub fn label(&self) -> String {
        match self {
            CandidateStatus::Proposed => "proposed".into(),
            CandidateStatus::Confirmed => "confirmed".into(),
            CandidateStatus::Rejected => "rejected".into(),
            CandidateStatus::Merged { into } => format!("merged into {into}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Confirmed,
    Rejected,
}

/// One feature of a candidate with the evidence it was proposed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeature {
    pub name: String,
    pub perm_mean: f64,
    pub stability_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroKpiCandidate {
    pub id: String,
    pub macro_kpi_id: String,
    pub features: Vec<CandidateFeature>,
    /// Measurement definition written by reviewers; empty until someone does.
    pub proposed_metric: String,
    pub status: CandidateStatus,
    pub decided_by: Option<String>,
    pub decided_at: Option<DateTime<Utc>>,
    pub rationale: Option<String>,
}

impl MicroKpiCandidate {
    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }
}

/// A feature that passed the derivation filter, before it gets a registry id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProposal {
    pub feature: CandidateFeature,
    pub feature_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum DropThreshold {
    Absolute { min: f64 },
    /// At least `factor` times the largest drop among features whose
    /// stability frequency is below `unstable_below` (0 if there are none).
    RelativeToUnstable { factor: f64, unstable_below: f64 },
}

impl Default for DropThreshold {
    fn default() -> Self {
        DropThreshold::RelativeToUnstable {
            factor: 2.0,
            unstable_below: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerivationThresholds {
    pub min_perm_drop: DropThreshold,
    pub min_stability: f64,
    /// `None` keeps every feature that passes.
    pub max_candidates: Option<usize>,
}

impl Default for DerivationThresholds {
    fn default() -> Self {
        Self {
            min_perm_drop: DropThreshold::default(),
            min_stability: 0.8,
            max_candidates: None,
        }
    }
}

impl DerivationThresholds {
    pub fn absolute(min_perm_drop: f64, min_stability: f64) -> Self {
        Self {
            min_perm_drop: DropThreshold::Absolute { min: min_perm_drop },
            min_stability,
            max_candidates: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_stability) {
            return Err(KpiError::ThresholdInvalid(format!(
                "min_stability {} outside [0, 1]",
                self.min_stability
            )));
        }
        match self.min_perm_drop {
            DropThreshold::Absolute { min } if min.is_nan() => {
                Err(KpiError::ThresholdInvalid("min_perm_drop is NaN".into()))
            }
            DropThreshold::RelativeToUnstable { factor, unstable_below }
                if !(factor >= 0.0 && factor.is_finite()) || !(0.0..=1.0).contains(&unstable_below) =>
            {
                Err(KpiError::ThresholdInvalid(format!(
                    "relative rule needs factor >= 0 and unstable_below in [0, 1], got {factor}, {unstable_below}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Features important and stable enough to become singleton micro-KPI
/// candidates, ordered by permutation drop (ties: lower feature index).
pub fn derive_micro_kpis<T: Scalar>(
    report: &ImportanceReport<T>,
    stability: &StabilityReport<T>,
    thresholds: &DerivationThresholds,
) -> Result<Vec<CandidateProposal>> {
    thresholds.validate()?;
    if report.feature_names() != stability.features.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(KpiError::FeatureSetMismatch);
    }
    let drops: Vec<f64> = report.features.iter().map(|f| f.perm_mean.as_f64()).collect();
    let freq: Vec<f64> = stability.frequency.iter().map(|f| f.as_f64()).collect();
    let min_drop = match thresholds.min_perm_drop {
        DropThreshold::Absolute { min } => min,
        DropThreshold::RelativeToUnstable { factor, unstable_below } => {
            let worst = drops
                .iter()
                .zip(&freq)
                .filter(|(_, &s)| s < unstable_below)
                .map(|(&d, _)| d)
                .fold(0.0f64, f64::max);
            factor * worst
        }
    };
    let mut passed: Vec<CandidateProposal> = report
        .features
        .iter()
        .enumerate()
        .filter(|(j, _)| drops[*j] >= min_drop && freq[*j] >= thresholds.min_stability)
        .map(|(j, f)| CandidateProposal {
            feature: CandidateFeature {
                name: f.name.clone(),
                perm_mean: drops[j],
                stability_frequency: freq[j],
            },
            feature_index: j,
        })
        .collect();
    passed.sort_by(|a, b| {
        b.feature
            .perm_mean
            .total_cmp(&a.feature.perm_mean)
            .then(a.feature_index.cmp(&b.feature_index))
    });
    if let Some(max) = thresholds.max_candidates {
        passed.truncate(max);
    }
    Ok(passed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum LedgerEvent {
    MacroRegistered {
        macro_kpi: MacroKpi,
        at: DateTime<Utc>,
    },
    CandidateProposed {
        candidate: MicroKpiCandidate,
        report_fingerprint: String,
        at: DateTime<Utc>,
    },
    CandidatesMerged {
        sources: Vec<String>,
        merged: MicroKpiCandidate,
        decided_by: String,
        at: DateTime<Utc>,
    },
    DecisionRecorded {
        candidate_id: String,
        decision: Decision,
        decided_by: String,
        rationale: String,
        metric: Option<String>,
        at: DateTime<Utc>,
    },
}

/// Registry contents derived from the ledger.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryState {
    pub macros: Vec<MacroKpi>,
    pub candidates: Vec<MicroKpiCandidate>,
    pub next_candidate: u64,
    pub version: u64,
}

impl RegistryState {
    pub fn macro_kpi(&self, id: &str) -> Option<&MacroKpi> {
        self.macros.iter().find(|m| m.id == id)
    }

    pub fn candidate(&self, id: &str) -> Option<&MicroKpiCandidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    fn candidate_mut(&mut self, id: &str) -> Result<&mut MicroKpiCandidate> {
        self.candidates
            .iter_mut()
            .find(|c| c.id == id)
            .ok_or_else(|| KpiError::UnknownCandidate(id.to_owned()))
    }

    fn require_proposed(&self, id: &str) -> Result<&MicroKpiCandidate> {
        let c = self.candidate(id).ok_or_else(|| KpiError::UnknownCandidate(id.to_owned()))?;
        if c.status != CandidateStatus::Proposed {
            return Err(KpiError::AlreadyDecided {
                id: id.to_owned(),
                status: c.status.label(),
            });
        }
        Ok(c)
    }

    fn new_id(&self) -> String {
        format!("mk-{:04}", self.next_candidate + 1)
    }

    fn add_candidate(&mut self, candidate: &MicroKpiCandidate) -> Result<()> {
        if self.macro_kpi(&candidate.macro_kpi_id).is_none() {
            return Err(KpiError::UnknownMacro(candidate.macro_kpi_id.clone()));
        }
        if candidate.features.is_empty() {
            return Err(KpiError::EmptyFeatureSet);
        }
        if candidate.id != self.new_id() || candidate.status != CandidateStatus::Proposed {
            return Err(KpiError::Format(format!("unexpected new candidate {}", candidate.id)));
        }
        self.candidates.push(candidate.clone());
        self.next_candidate += 1;
        Ok(())
    }

    /// Applies one event, validating it against the current state.
    pub fn apply(&mut self, event: &LedgerEvent) -> Result<()> {
        match event {
            LedgerEvent::MacroRegistered { macro_kpi, .. } => {
                if self.macro_kpi(&macro_kpi.id).is_some() {
                    return Err(KpiError::DuplicateMacro(macro_kpi.id.clone()));
                }
                self.macros.push(macro_kpi.clone());
            }
            LedgerEvent::CandidateProposed { candidate, .. } => self.add_candidate(candidate)?,
            LedgerEvent::CandidatesMerged {
                sources,
                merged,
                decided_by,
                at,
            } => {
                let mut distinct = sources.clone();
                distinct.sort();
                distinct.dedup();
                if distinct.len() < 2 || distinct.len() != sources.len() {
                    return Err(KpiError::TooFewToMerge);
                }
                for s in sources {
                    let c = self.require_proposed(s)?;
                    if c.macro_kpi_id != merged.macro_kpi_id {
                        return Err(KpiError::CrossMacroMerge);
                    }
                }
                self.add_candidate(merged)?;
                for s in sources {
                    let c = self.candidate_mut(s)?;
                    c.status = CandidateStatus::Merged { into: merged.id.clone() };
                    c.decided_by = Some(decided_by.clone());
                    c.decided_at = Some(*at);
                }
            }
            LedgerEvent::DecisionRecorded {
                candidate_id,
                decision,
                decided_by,
                rationale,
                metric,
                at,
            } => {
                self.require_proposed(candidate_id)?;
                let c = self.candidate_mut(candidate_id)?;
                c.status = match decision {
                    Decision::Confirmed => CandidateStatus::Confirmed,
                    Decision::Rejected => CandidateStatus::Rejected,
                };
                c.decided_by = Some(decided_by.clone());
                c.decided_at = Some(*at);
                c.rationale = Some(rationale.clone());
                if let Some(m) = metric {
                    c.proposed_metric = m.clone();
                }
            }
        }
        self.version += 1;
        Ok(())
    }
}

/// Replays a ledger from the empty state.
pub fn fold(ledger: &[LedgerEvent]) -> Result<RegistryState> {
    let mut state = RegistryState::default();
    for e in ledger {
        state.apply(e)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KpiRegistry {
    ledger: Vec<LedgerEvent>,
    state: RegistryState,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    format_version: u32,
    ledger: Vec<LedgerEvent>,
    snapshot: RegistryState,
}

impl KpiRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ledger(ledger: Vec<LedgerEvent>) -> Result<Self> {
        let state = fold(&ledger)?;
        Ok(Self { ledger, state })
    }

    pub fn ledger(&self) -> &[LedgerEvent] {
        &self.ledger
    }

    pub fn state(&self) -> &RegistryState {
        &self.state
    }

    pub fn version(&self) -> u64 {
        self.state.version
    }

    fn commit(&mut self, event: LedgerEvent) -> Result<()> {
        self.state.apply(&event)?;
        self.ledger.push(event);
        Ok(())
    }

    pub fn register_macro(&mut self, macro_kpi: MacroKpi, at: DateTime<Utc>) -> Result<()> {
        self.commit(LedgerEvent::MacroRegistered { macro_kpi, at })
    }

    /// Feature names already covered by a live (proposed or confirmed) candidate of `macro_id`.
    pub fn open_features(&self, macro_id: &str) -> Vec<String> {
        let mut out: Vec<String> = self
            .state
            .candidates
            .iter()
            .filter(|c| {
                c.macro_kpi_id == macro_id
                    && matches!(c.status, CandidateStatus::Proposed | CandidateStatus::Confirmed)
            })
            .flat_map(|c| c.features.iter().map(|f| f.name.clone()))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Confirmed feature names of a macro KPI, in candidate order.
    pub fn confirmed_features(&self, macro_id: Option<&str>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.state.candidates {
            if c.status == CandidateStatus::Confirmed && macro_id.is_none_or(|m| m == c.macro_kpi_id) {
                for f in &c.features {
                    if !out.contains(&f.name) {
                        out.push(f.name.clone());
                    }
                }
            }
        }
        out
    }

    /// Appends each proposal as a singleton candidate; returns the new ids.
    pub fn propose(
        &mut self,
        macro_id: &str,
        proposals: &[CandidateProposal],
        report_fingerprint: &str,
        at: DateTime<Utc>,
    ) -> Result<Vec<String>> {
        if self.state.macro_kpi(macro_id).is_none() {
            return Err(KpiError::UnknownMacro(macro_id.to_owned()));
        }
        let mut ids = Vec::with_capacity(proposals.len());
        for p in proposals {
            let candidate = MicroKpiCandidate {
                id: self.state.new_id(),
                macro_kpi_id: macro_id.to_owned(),
                features: vec![p.feature.clone()],
                proposed_metric: String::new(),
                status: CandidateStatus::Proposed,
                decided_by: None,
                decided_at: None,
                rationale: None,
            };
            ids.push(candidate.id.clone());
            self.commit(LedgerEvent::CandidateProposed {
                candidate,
                report_fingerprint: report_fingerprint.to_owned(),
                at,
            })?;
        }
        Ok(ids)
    }

    /// Unifies proposed candidates of one macro KPI into a new proposed
    /// candidate; the originals become `merged`.
    pub fn merge_candidates(
        &mut self,
        ids: &[String],
        metric: &str,
        decided_by: &str,
        at: DateTime<Utc>,
    ) -> Result<MicroKpiCandidate> {
        let mut features: Vec<CandidateFeature> = Vec::new();
        let mut macro_id: Option<&str> = None;
        for id in ids {
            let c = self.state.require_proposed(id)?;
            match macro_id {
                None => macro_id = Some(&c.macro_kpi_id),
                Some(m) if m != c.macro_kpi_id => return Err(KpiError::CrossMacroMerge),
                Some(_) => {}
            }
            for f in &c.features {
                if !features.iter().any(|g| g.name == f.name) {
                    features.push(f.clone());
                }
            }
        }
        let macro_id = macro_id.ok_or(KpiError::TooFewToMerge)?.to_owned();
        let merged = MicroKpiCandidate {
            id: self.state.new_id(),
            macro_kpi_id: macro_id,
            features,
            proposed_metric: metric.to_owned(),
            status: CandidateStatus::Proposed,
            decided_by: None,
            decided_at: None,
            rationale: None,
        };
        self.commit(LedgerEvent::CandidatesMerged {
            sources: ids.to_vec(),
            merged: merged.clone(),
            decided_by: decided_by.to_owned(),
            at,
        })?;
        Ok(merged)
    }

    pub fn record_decision(
        &mut self,
        candidate_id: &str,
        decision: Decision,
        decided_by: &str,
        rationale: &str,
        metric: Option<&str>,
        at: DateTime<Utc>,
    ) -> Result<&MicroKpiCandidate> {
        self.commit(LedgerEvent::DecisionRecorded {
            candidate_id: candidate_id.to_owned(),
            decision,
            decided_by: decided_by.to_owned(),
            rationale: rationale.to_owned(),
            metric: metric.map(str::to_owned),
            at,
        })?;
        Ok(self.state.candidate(candidate_id).expect("just decided"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RegistryFile {
            format_version: REGISTRY_FORMAT_VERSION,
            ledger: self.ledger.clone(),
            snapshot: self.state.clone(),
        })
        .expect("registry serializes")
    }

    /// Parses a registry file, replays its ledger and checks the stored snapshot.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| KpiError::Format(e.to_string()))?;
        if file.format_version != REGISTRY_FORMAT_VERSION {
            return Err(KpiError::Format(format!(
                "unsupported registry format version {}",
                file.format_version
            )));
        }
        let registry = Self::from_ledger(file.ledger)?;
        if registry.state != file.snapshot {
            return Err(KpiError::Corrupt);
        }
        Ok(registry)
    }

    /// Loads `path`, or returns an empty registry when the file does not exist.
    pub fn load_or_new(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(KpiError::Io {
                path: path.to_owned(),
                message: e.to_string(),
            }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| KpiError::Io {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{EvaluationMode, FeatureImportance};

    fn at() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2026-03-01T09:00:00Z").unwrap().with_timezone(&Utc)
    }

    fn macro_kpi(id: &str) -> MacroKpi {
        MacroKpi {
            id: id.into(),
            name: "Judgement processing time".into(),
            description: String::new(),
            target_column: "days".into(),
            direction: Direction::Minimize,
            unit: "days".into(),
            goal_ref: "G1".into(),
        }
    }

    fn report(drops: &[f64]) -> (ImportanceReport<f64>, StabilityReport<f64>) {
        let names: Vec<String> = (0..drops.len()).map(|i| format!("f{i}")).collect();
        let features = drops
            .iter()
            .enumerate()
            .map(|(i, &d)| FeatureImportance {
                name: names[i].clone(),
                mdi_raw: 0.0,
                mdi_normalized: 0.0,
                perm_mean: d,
                perm_std: 0.0,
                perm_repeats: 1,
                perm_drops: vec![d],
                rank_mdi: i + 1,
                rank_perm: i + 1,
            })
            .collect();
        let report = ImportanceReport {
            format_version: 1,
            forest_fingerprint: "f".into(),
            schema_fingerprint: "s".into(),
            metric: "accuracy".into(),
            baseline_metric: 0.9,
            mode: EvaluationMode::Oob,
            seed: 0,
            features,
        };
        let stability = StabilityReport {
            features: names,
            frequency: vec![1.0; drops.len()],
            seeds: vec![1, 2],
            top_k: 2,
        };
        (report, stability)
    }

    fn registry_with(n: usize) -> (KpiRegistry, Vec<String>) {
        let mut reg = KpiRegistry::new();
        reg.register_macro(macro_kpi("processing_time"), at()).unwrap();
        let drops: Vec<f64> = (0..n).map(|i| 0.1 * (n - i) as f64).collect();
        let (r, s) = report(&drops);
        let proposals = derive_micro_kpis(&r, &s, &DerivationThresholds::absolute(0.0, 0.0)).unwrap();
        let ids = reg.propose("processing_time", &proposals, "fp", at()).unwrap();
        (reg, ids)
    }

    #[test]
    fn zero_thresholds_keep_everything_in_drop_order() {
        let (r, s) = report(&[0.1, 0.3, 0.3, 0.0]);
        let out = derive_micro_kpis(&r, &s, &DerivationThresholds::absolute(0.0, 0.0)).unwrap();
        let names: Vec<&str> = out.iter().map(|p| p.feature.name.as_str()).collect();
        assert_eq!(names, vec!["f1", "f2", "f0", "f3"]);
    }

    #[test]
    fn thresholds_are_validated() {
        let (r, s) = report(&[0.1]);
        let bad = DerivationThresholds::absolute(0.0, 1.01);
        assert!(matches!(derive_micro_kpis(&r, &s, &bad), Err(KpiError::ThresholdInvalid(_))));
        let bad = DerivationThresholds::absolute(0.0, -0.1);
        assert!(matches!(derive_micro_kpis(&r, &s, &bad), Err(KpiError::ThresholdInvalid(_))));
    }

    #[test]
    fn relative_rule_uses_unstable_features() {
        let (r, mut s) = report(&[0.30, 0.05, 0.12, 0.02]);
        s.frequency = vec![1.0, 0.2, 0.9, 0.1];
        let t = DerivationThresholds {
            min_stability: 0.0,
            ..Default::default()
        };
        // unstable max drop 0.05, so keep drops >= 0.10
        let names: Vec<String> = derive_micro_kpis(&r, &s, &t).unwrap().into_iter().map(|p| p.feature.name).collect();
        assert_eq!(names, vec!["f0", "f2"]);
    }

    #[test]
    fn max_candidates_truncates() {
        let (r, s) = report(&[0.1, 0.2, 0.3]);
        let t = DerivationThresholds {
            max_candidates: Some(2),
            ..DerivationThresholds::absolute(0.0, 0.0)
        };
        assert_eq!(derive_micro_kpis(&r, &s, &t).unwrap().len(), 2);
    }

    #[test]
    fn mismatched_stability_is_rejected() {
        let (r, mut s) = report(&[0.1, 0.2]);
        s.features.swap(0, 1);
        assert_eq!(
            derive_micro_kpis(&r, &s, &DerivationThresholds::default()),
            Err(KpiError::FeatureSetMismatch)
        );
    }

    #[test]
    fn confirm_once() {
        let (mut reg, ids) = registry_with(2);
        let v = reg.version();
        let c = reg.record_decision(&ids[0], Decision::Confirmed, "ana", "matches audit", None, at()).unwrap();
        assert_eq!(c.status, CandidateStatus::Confirmed);
        assert_eq!(reg.version(), v + 1);
        let again = reg.record_decision(&ids[0], Decision::Confirmed, "ana", "", None, at());
        assert!(matches!(again, Err(KpiError::AlreadyDecided { .. })));
        assert_eq!(reg.version(), v + 1);
        assert!(matches!(
            reg.record_decision("mk-9999", Decision::Rejected, "ana", "", None, at()),
            Err(KpiError::UnknownCandidate(_))
        ));
    }

    #[test]
    fn merge_unions_features() {
        let (mut reg, ids) = registry_with(3);
        let merged = reg
            .merge_candidates(&ids[..2], "hearings per case x adjournments", "board", at())
            .unwrap();
        assert_eq!(merged.feature_names(), vec!["f0", "f1"]);
        assert_eq!(
            reg.state().candidate(&ids[0]).unwrap().status,
            CandidateStatus::Merged { into: merged.id.clone() }
        );
        reg.record_decision(&ids[2], Decision::Confirmed, "ana", "", None, at()).unwrap();
        let r = reg.merge_candidates(&[merged.id.clone(), ids[2].clone()], "", "board", at());
        assert!(matches!(r, Err(KpiError::AlreadyDecided { .. })));
        assert!(matches!(
            reg.merge_candidates(&[merged.id.clone()], "", "board", at()),
            Err(KpiError::TooFewToMerge)
        ));
    }

    #[test]
    fn cross_macro_merge_rejected() {
        let (mut reg, ids) = registry_with(1);
        reg.register_macro(macro_kpi("backlog"), at()).unwrap();
        let (r, s) = report(&[0.5]);
        let p = derive_micro_kpis(&r, &s, &DerivationThresholds::absolute(0.0, 0.0)).unwrap();
        let other = reg.propose("backlog", &p, "fp", at()).unwrap();
        assert_eq!(
            reg.merge_candidates(&[ids[0].clone(), other[0].clone()], "", "board", at()),
            Err(KpiError::CrossMacroMerge)
        );
    }

    #[test]
    fn unknown_macro_and_duplicates() {
        let mut reg = KpiRegistry::new();
        assert_eq!(reg.propose("nope", &[], "fp", at()), Err(KpiError::UnknownMacro("nope".into())));
        reg.register_macro(macro_kpi("m"), at()).unwrap();
        assert_eq!(reg.register_macro(macro_kpi("m"), at()), Err(KpiError::DuplicateMacro("m".into())));
    }

    #[test]
    fn macro_target_must_be_schema_target() {
        use crate::tabular::{ColumnKind, ColumnSpec};
        let schema = Schema::new(vec![
            ColumnSpec::feature("hearings", ColumnKind::Numeric),
            ColumnSpec::target("days", ColumnKind::Numeric),
        ])
        .unwrap();
        assert!(macro_kpi("m").check_schema(&schema).is_ok());
        let mut wrong = macro_kpi("m");
        wrong.target_column = "hearings".into();
        assert!(matches!(wrong.check_schema(&schema), Err(KpiError::TargetNotInSchema { .. })));
    }

    #[test]
    fn file_round_trip_and_tamper_detection() {
        let (mut reg, ids) = registry_with(2);
        reg.record_decision(&ids[1], Decision::Rejected, "ana", "duplicate of f0", Some("n/a"), at()).unwrap();
        let text = reg.to_json();
        assert_eq!(KpiRegistry::from_json(&text).unwrap(), reg);
        let tampered = text.replacen("\"rejected\"", "\"confirmed\"", 1);
        assert!(KpiRegistry::from_json(&tampered).is_err());
    }
}
