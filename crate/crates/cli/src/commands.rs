use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use kpiforge::forest::{self, ForestModel, Metric, OobReport};
use kpiforge::importance::{self, EvaluationMode, ImportanceReport, StabilityReport};
use kpiforge::kpi::{CandidateStatus, Decision, DerivationThresholds, DropThreshold, KpiRegistry};
use kpiforge::monitor::{self, DriftReport, EffectSummary, MonitorArtifact};
use kpiforge::synth::{self, GeneratorSpec, Mutation};
use kpiforge::tabular::{self, Schema, Table};
use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::error::{exit, CliError};
use crate::{Cli, Command, DeriveArgs, MonitorArgs, ReportCommand, ReviewArgs, ReviewDecision, SynthArgs};

type Result<T, E = CliError> = std::result::Result<T, E>;

pub const CLI_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CONFIG_FILE: &str = "kpiforge.toml";

/// Metrics written next to a trained model.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub model_fingerprint: String,
    pub schema_fingerprint: String,
    pub n_rows: usize,
    pub n_trees: usize,
    pub oob: Option<OobReport<f64>>,
    pub holdout: Option<Metric<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StabilityFile {
    pub format_version: u32,
    pub schema_fingerprint: String,
    pub stability: StabilityReport<f64>,
}

pub(crate) fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    if let Command::Synth(args) = &cli.command {
        return synth_cmd(args, out);
    }
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Train { data } => train(&config, data.as_deref(), out),
        Command::Importance { model, data } => importance_cmd(&config, model.as_deref(), data.as_deref(), out),
        Command::Derive(args) => derive(&config, &args, out),
        Command::Review(args) => review(&config, &args, out),
        Command::Monitor(args) => monitor_cmd(&config, &args, out),
        Command::Report { what } => report(&config, what, out),
        Command::Synth(_) => unreachable!(),
    }
}

fn load_config(path: Option<&Path>) -> Result<ProjectConfig> {
    match path {
        Some(p) => ProjectConfig::load(p),
        None if Path::new(DEFAULT_CONFIG_FILE).exists() => ProjectConfig::load(Path::new(DEFAULT_CONFIG_FILE)),
        None => Ok(ProjectConfig::empty(Path::new("."))),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::data(format!("stdout: {e}")))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::in_file(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::in_file(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::in_file(path, e))
}

fn timestamp(arg: Option<&str>) -> Result<DateTime<Utc>> {
    match arg {
        None => Ok(Utc::now()),
        Some(s) => DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| CliError::config(format!("--at '{s}': {e}"))),
    }
}

fn load_schema(config: &ProjectConfig) -> Result<Schema> {
    let path = config.schema_path()?;
    Schema::load(&path).map_err(|e| CliError::config(e.to_string()))
}

fn load_data(config: &ProjectConfig, schema: &Schema, data: Option<&Path>) -> Result<Table<f64>> {
    let path = config.data_path(data)?;
    let table: Table<f64> = tabular::load_table(&path, schema).map_err(|e| match e {
        tabular::TableError::Io { .. } => CliError::data(e.to_string()),
        _ => CliError::in_file(&path, e),
    })?;
    tabular::clean(&table).map_err(|e| CliError::in_file(&path, e))
}

/// Training and holdout parts of the project data, per the importance mode.
fn split(config: &ProjectConfig, table: Table<f64>) -> Result<(Table<f64>, Option<Table<f64>>)> {
    match config.importance.mode {
        EvaluationMode::Oob => Ok((table, None)),
        EvaluationMode::Holdout => {
            let (holdout, train) =
                tabular::split_holdout(&table, config.importance.holdout_fraction, config.importance.seed)?;
            Ok((train, Some(holdout)))
        }
    }
}

fn describe(metric: &Metric<f64>) -> String {
    match metric {
        Metric::Accuracy { accuracy } => format!("accuracy {accuracy:.4}"),
        Metric::Regression { r2, mse } => format!("r2 {r2:.4}  mse {mse:.6}"),
    }
}

fn train(config: &ProjectConfig, data: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let schema = load_schema(config)?;
    let (training, holdout) = split(config, load_data(config, &schema, data)?)?;
    let model = forest::fit_forest_with(&training, &config.forest, config.workers())?;
    let model_path = config.model_path();
    write_file(&model_path, model.to_json_bytes())?;

    let oob = model.oob_score(&training).ok();
    let holdout_metric = holdout.as_ref().map(|h| model.holdout_score(h)).transpose()?;
    let report = TrainReport {
        format_version: CLI_FORMAT_VERSION,
        model_fingerprint: model.fingerprint(),
        schema_fingerprint: model.schema_fingerprint().to_owned(),
        n_rows: training.n_rows(),
        n_trees: model.trees().len(),
        oob,
        holdout: holdout_metric,
    };
    let report_path = config.report_dir().join("train.json");
    write_file(&report_path, serde_json::to_string_pretty(&report).expect("serializable"))?;

    say(out, format!("model   {}", model_path.display()))?;
    say(out, format!("trees   {}  rows {}", report.n_trees, report.n_rows))?;
    match &report.oob {
        Some(o) => say(
            out,
            format!("oob     {}  (mean oob fraction {:.3})", describe(&o.metric), o.mean_oob_fraction),
        )?,
        None => say(out, "oob     unavailable: some rows are in-bag for every tree")?,
    }
    if let Some(h) = &report.holdout {
        say(out, format!("holdout {}", describe(h)))?;
    }
    say(out, format!("report  {}", report_path.display()))?;
    Ok(exit::OK)
}

fn default_stability_top_k(p: usize) -> usize {
    ((p as f64).sqrt().round() as usize).clamp(1, p.max(1))
}

/// Importance report for `model`, plus a stability report when configured.
fn compute_importance(
    config: &ProjectConfig,
    model: &ForestModel<f64>,
    training: &Table<f64>,
    holdout: Option<&Table<f64>>,
) -> Result<(ImportanceReport<f64>, Option<StabilityReport<f64>>)> {
    let settings = config.importance.permutation();
    let report = importance::importance_report(model, training, holdout, &settings, config.workers())?;
    let stability = if config.importance.stability_seeds >= 2 {
        let seeds = importance::stability_seeds(config.forest.master_seed, config.importance.stability_seeds);
        let top_k = config
            .importance
            .stability_top_k
            .unwrap_or_else(|| default_stability_top_k(training.n_features()));
        Some(importance::stability_selection(
            training,
            &config.forest,
            &seeds,
            top_k,
            &settings,
            config.workers(),
        )?)
    } else {
        None
    };
    Ok((report, stability))
}

fn importance_cmd(config: &ProjectConfig, model: Option<&Path>, data: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let model_path = model.map(Path::to_owned).unwrap_or_else(|| config.model_path());
    let model = ForestModel::<f64>::load(&model_path)?;
    let (training, holdout) = split(config, load_data(config, model.schema(), data)?)?;
    let (report, stability) = compute_importance(config, &model, &training, holdout.as_ref())?;

    let dir = config.report_dir();
    let json = dir.join("importance.json");
    let txt = dir.join("importance.txt");
    write_file(&json, report.to_json())?;
    write_file(&txt, report.render_table())?;
    say(out, report.render_table())?;
    if let Ok(rho) = importance::compare_measures(&report) {
        say(out, format!("mdi/permutation rank agreement (spearman) {rho:.3}"))?;
    }
    say(out, format!("report  {}", json.display()))?;
    if let Some(stability) = stability {
        let path = dir.join("stability.json");
        let file = StabilityFile {
            format_version: CLI_FORMAT_VERSION,
            schema_fingerprint: model.schema_fingerprint().to_owned(),
            stability,
        };
        write_file(&path, serde_json::to_string_pretty(&file).expect("serializable"))?;
        say(out, format!("stability ({} seeds, top {})", file.stability.seeds.len(), file.stability.top_k))?;
        for (name, f) in file.stability.features.iter().zip(&file.stability.frequency) {
            say(out, format!("  {name:<24} {f:.2}"))?;
        }
        say(out, format!("report  {}", path.display()))?;
    }
    Ok(exit::OK)
}

fn load_stability(path: &Path) -> Result<StabilityFile> {
    let file: StabilityFile =
        serde_json::from_str(&read_file(path)?).map_err(|e| CliError::in_file(path, e))?;
    if file.format_version != CLI_FORMAT_VERSION {
        return Err(CliError::in_file(path, format!("unsupported format version {}", file.format_version)));
    }
    Ok(file)
}

fn load_registry(config: &ProjectConfig) -> Result<KpiRegistry> {
    let path = config.registry_path();
    KpiRegistry::load_or_new(&path).map_err(|e| CliError::in_file(&path, e))
}

fn save_registry(config: &ProjectConfig, registry: &KpiRegistry) -> Result<()> {
    write_file(&config.registry_path(), registry.to_json())
}

fn derive(config: &ProjectConfig, args: &DeriveArgs, out: &mut dyn Write) -> Result<i32> {
    let macro_kpi = config
        .macro_kpi(&args.macro_id)
        .ok_or_else(|| CliError::config(format!("unknown macro KPI '{}'", args.macro_id)))?;
    if config.paths.schema.is_some() {
        macro_kpi.check_schema(&load_schema(config)?)?;
    }
    let dir = config.report_dir();
    let report_path = args.report.clone().unwrap_or_else(|| dir.join("importance.json"));
    let stability_path = args.stability.clone().unwrap_or_else(|| dir.join("stability.json"));
    let report = ImportanceReport::<f64>::load(&report_path)?;
    let stability = load_stability(&stability_path)?;

    let mut thresholds: DerivationThresholds = config.derivation;
    if let Some(min) = args.min_perm_drop {
        thresholds.min_perm_drop = DropThreshold::Absolute { min };
    }
    if let Some(s) = args.min_stability {
        thresholds.min_stability = s;
    }
    if args.max_candidates.is_some() {
        thresholds.max_candidates = args.max_candidates;
    }
    let at = timestamp(args.at.as_deref())?;

    let mut registry = load_registry(config)?;
    if registry.state().macro_kpi(&macro_kpi.id).is_none() {
        registry.register_macro(macro_kpi.clone(), at)?;
    }
    let open = registry.open_features(&macro_kpi.id);
    let proposals: Vec<_> = kpiforge::kpi::derive_micro_kpis(&report, &stability.stability, &thresholds)?
        .into_iter()
        .filter(|p| !open.contains(&p.feature.name))
        .collect();
    let ids = registry.propose(&macro_kpi.id, &proposals, &report.fingerprint(), at)?;
    save_registry(config, &registry)?;

    say(
        out,
        format!(
            "proposed {} candidate(s) for {} (registry version {})",
            ids.len(),
            macro_kpi.id,
            registry.version()
        ),
    )?;
    for (id, p) in ids.iter().zip(&proposals) {
        say(
            out,
            format!(
                "  [ ] {id}  {:<24} perm_mean {:.6}  stability {:.2}",
                p.feature.name, p.feature.perm_mean, p.feature.stability_frequency
            ),
        )?;
    }
    if !ids.is_empty() {
        say(out, "review: kpiforge review <id> confirm|reject --by <name> --rationale <text> [--metric <definition>]")?;
        say(out, "merge:  kpiforge review --merge <id> --merge <id> --by <name> --metric <definition>")?;
    }
    Ok(exit::OK)
}

fn review(config: &ProjectConfig, args: &ReviewArgs, out: &mut dyn Write) -> Result<i32> {
    let at = timestamp(args.at.as_deref())?;
    let mut registry = load_registry(config)?;
    if !args.merge.is_empty() {
        let merged = registry.merge_candidates(&args.merge, args.metric.as_deref().unwrap_or(""), &args.by, at)?;
        save_registry(config, &registry)?;
        say(
            out,
            format!(
                "{} merged into {} [{}] (registry version {})",
                args.merge.join(", "),
                merged.id,
                merged.feature_names().join(", "),
                registry.version()
            ),
        )?;
        return Ok(exit::OK);
    }
    let id = args.candidate.as_deref().expect("clap requires a candidate");
    let decision = match args.decision.expect("clap requires a decision") {
        ReviewDecision::Confirm => Decision::Confirmed,
        ReviewDecision::Reject => Decision::Rejected,
    };
    let c = registry
        .record_decision(id, decision, &args.by, &args.rationale, args.metric.as_deref(), at)?
        .clone();
    save_registry(config, &registry)?;
    say(out, format!("{} {} by {} (registry version {})", c.id, c.status.label(), args.by, registry.version()))?;
    Ok(exit::OK)
}

fn monitor_cmd(config: &ProjectConfig, args: &MonitorArgs, out: &mut dyn Write) -> Result<i32> {
    let dir = config.report_dir();
    let baseline_path = args.baseline.clone().unwrap_or_else(|| dir.join("importance.json"));
    let baseline = ImportanceReport::<f64>::load(&baseline_path)?;
    let schema = load_schema(config)?;
    if schema.fingerprint() != baseline.schema_fingerprint {
        return Err(CliError::data(format!(
            "{}: baseline report was computed for a different schema",
            baseline_path.display()
        )));
    }
    let (training, holdout) = split(config, load_data(config, &schema, Some(&args.data))?)?;
    let model = forest::fit_forest_with(&training, &config.forest, config.workers())?;
    let settings = config.importance.permutation();
    let fresh = importance::importance_report(&model, &training, holdout.as_ref(), &settings, config.workers())?;

    let p = baseline.features.len();
    let top_k = match args.top_k.or(config.monitor.top_k) {
        Some(k) => k,
        None => {
            let registry = load_registry(config)?;
            let confirmed = registry.confirmed_features(args.macro_id.as_deref()).len();
            if (1..=p).contains(&confirmed) {
                confirmed
            } else {
                p.min(2)
            }
        }
    };
    let threshold = args.rho_threshold.unwrap_or(config.monitor.rho_threshold);
    let drift = monitor::detect_drift(&baseline, &fresh, top_k, threshold)?;

    let fresh_path = dir.join("importance_fresh.json");
    let drift_path = dir.join("drift.json");
    write_file(&fresh_path, fresh.to_json())?;
    write_file(&drift_path, drift.to_json())?;
    say(out, render_drift(&drift))?;
    say(out, format!("report  {}", drift_path.display()))?;
    Ok(if drift.refresh_recommended { exit::REFRESH } else { exit::OK })
}

fn render_drift(d: &DriftReport<f64>) -> String {
    let mut s = format!(
        "spearman rho {:.3} (threshold {:.2}), mdi rho {:.3}, top-{}\n",
        d.spearman_rho, d.threshold_used, d.mdi_spearman_rho, d.top_k
    );
    for r in &d.rank_deltas {
        s.push_str(&format!("  {:<24} {:>3} -> {:>3}  ({:+})\n", r.name, r.baseline_rank, r.fresh_rank, r.delta));
    }
    if !d.flagged_features.is_empty() {
        s.push_str(&format!("flagged: {}\n", d.flagged_features.join(", ")));
    }
    s.push_str(if d.refresh_recommended {
        "refresh recommended"
    } else {
        "stable"
    });
    s
}

fn parse_mutation(text: &str) -> Result<Mutation> {
    let bad = || CliError::config(format!("--mutate '{text}': expected swap, scale=<factor> or shift=<delta>"));
    match text.split_once('=') {
        None if text == "swap" => Ok(Mutation::SwapInformative),
        Some(("scale", v)) => v.parse().map(Mutation::ScaleTarget).map_err(|_| bad()),
        Some(("shift", v)) => v.parse().map(Mutation::ShiftTarget).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn synth_cmd(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let mut spec = GeneratorSpec::load(&args.spec).map_err(|e| CliError::config(format!("{}: {e}", args.spec.display())))?;
    if let Some(seed) = args.seed {
        spec = spec.with_seed(seed);
    }
    if let Some(m) = &args.mutate {
        spec = synth::shift_window(&spec, parse_mutation(m)?)?;
    }
    let (table, truth) = synth::generate::<f64>(&spec)?;
    let mut csv = Vec::new();
    tabular::write_table(&table, &mut csv)?;
    write_file(&args.out, csv)?;
    let truth_path = sidecar(&args.out, "truth.json");
    let schema_path = sidecar(&args.out, "schema.toml");
    write_file(&truth_path, serde_json::to_string_pretty(&truth).expect("serializable"))?;
    write_file(&schema_path, spec.schema().to_toml_string())?;
    say(out, format!("wrote {} rows to {}", table.n_rows(), args.out.display()))?;
    say(out, format!("informative: {}", truth.names().join(", ")))?;
    say(out, format!("ground truth {}", truth_path.display()))?;
    say(out, format!("schema {}", schema_path.display()))?;
    Ok(exit::OK)
}

fn render_registry(registry: &KpiRegistry) -> String {
    let state = registry.state();
    let mut s = format!("registry version {}\n", registry.version());
    for m in &state.macros {
        let unit = if m.unit.is_empty() { String::new() } else { format!(", {}", m.unit) };
        s.push_str(&format!(
            "macro {}  {}  ({:?}{unit}, target '{}')\n",
            m.id, m.name, m.direction, m.target_column
        ));
        for c in state.candidates.iter().filter(|c| c.macro_kpi_id == m.id) {
            let mark = match c.status {
                CandidateStatus::Proposed => "[ ]",
                CandidateStatus::Confirmed => "[x]",
                CandidateStatus::Rejected => "[-]",
                CandidateStatus::Merged { .. } => "[>]",
            };
            s.push_str(&format!("  {mark} {}  {}  {}", c.id, c.feature_names().join(" + "), c.status.label()));
            if let Some(by) = &c.decided_by {
                s.push_str(&format!(" by {by}"));
            }
            if !c.proposed_metric.is_empty() {
                s.push_str(&format!("  metric: {}", c.proposed_metric));
            }
            s.push('\n');
        }
    }
    s.trim_end().to_owned()
}

fn render_effect(e: &EffectSummary<f64>) -> String {
    let mut s = format!(
        "{} ({:?}) before n={} mean {:.4} median {:.4} | after n={} mean {:.4} median {:.4}\n",
        e.macro_kpi_id, e.direction, e.n_before, e.before_mean, e.before_median, e.n_after, e.after_mean, e.after_median
    );
    s.push_str(&format!(
        "improvement {:.4}  {:.0}% CI [{:.4}, {:.4}]",
        e.improvement,
        e.bootstrap.confidence * 100.0,
        e.improvement_ci.lower,
        e.improvement_ci.upper
    ));
    if let (Some(r), Some(ci)) = (e.relative_improvement, e.relative_improvement_ci) {
        s.push_str(&format!(
            "\nrelative improvement {:.2}%  CI [{:.2}%, {:.2}%]",
            r * 100.0,
            ci.lower * 100.0,
            ci.upper * 100.0
        ));
    }
    s
}

fn report(config: &ProjectConfig, what: ReportCommand, out: &mut dyn Write) -> Result<i32> {
    match what {
        ReportCommand::Registry => say(out, render_registry(&load_registry(config)?))?,
        ReportCommand::Show { path } => say(out, show(&path)?)?,
        ReportCommand::Intervention {
            macro_id,
            before,
            after,
            seed,
        } => {
            let kpi = config
                .macro_kpi(&macro_id)
                .ok_or_else(|| CliError::config(format!("unknown macro KPI '{macro_id}'")))?;
            let schema = load_schema(config)?;
            let before = load_data(config, &schema, Some(&before))?;
            let after = load_data(config, &schema, Some(&after))?;
            let mut settings = config.bootstrap();
            if let Some(seed) = seed {
                settings.seed = seed;
            }
            let effect = monitor::evaluate_intervention(&before, &after, kpi, &settings)?;
            let path = config.report_dir().join("intervention.json");
            write_file(&path, effect.to_json())?;
            say(out, render_effect(&effect))?;
            say(out, format!("report  {}", path.display()))?;
        }
    }
    Ok(exit::OK)
}

fn show(path: &Path) -> Result<String> {
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::in_file(path, e))?;
    let has = |k: &str| value.get(k).is_some();
    let bad = |e: &dyn std::fmt::Display| CliError::in_file(path, e);
    Ok(if has("ledger") {
        render_registry(&KpiRegistry::from_json(&text).map_err(|e| bad(&e))?)
    } else if has("spearman_rho") {
        render_drift(&DriftReport::from_json(&text).map_err(|e| bad(&e))?)
    } else if has("improvement") {
        render_effect(&EffectSummary::from_json(&text).map_err(|e| bad(&e))?)
    } else if has("baseline_metric") {
        ImportanceReport::<f64>::from_json(&text).map_err(|e| bad(&e))?.render_table()
    } else if has("trees") {
        let model = ForestModel::<f64>::from_json_bytes(text.as_bytes()).map_err(|e| bad(&e))?;
        format!(
            "forest {}  {:?}  {} trees  {} rows  features: {}",
            &model.fingerprint()[..12],
            model.task(),
            model.trees().len(),
            model.n_rows(),
            model.feature_names().join(", ")
        )
    } else {
        serde_json::to_string_pretty(&value).expect("serializable")
    })
}
