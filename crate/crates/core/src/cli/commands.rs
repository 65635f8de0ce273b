//! `accountant`, `train` and `compare`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, ResolvedPrivacy, VERSION};
use crate::accountant::{solve_sigma0_with_overhead, tcdp_to_dp, threshold_update_budget, TcdpBudget};
use crate::clipping::ClipKind;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, FairnessReport};
use crate::numerics::splitmix64;
use crate::trainer::{evaluate_model, train_observed, IterationRecord, RunRecord, TrainerConfig};

pub const TRAJECTORY_COLUMNS: [&str; 6] = ["t", "e", "sigma2", "z_e", "avg_grad_norm", "loss"];

/// Distinguishes bad input (exit 1) from failures while running (exit 2).
#[derive(Debug)]
pub enum CommandError {
    Config(Error),
    Runtime(Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 1,
            CommandError::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            CommandError::Config(e) | CommandError::Runtime(e) => e,
        }
    }
}

pub type CommandResult<T> = std::result::Result<T, CommandError>;

fn config_err<T>(r: Result<T>) -> CommandResult<T> {
    r.map_err(CommandError::Config)
}

fn runtime_err<T>(r: Result<T>) -> CommandResult<T> {
    r.map_err(CommandError::Runtime)
}

/// Seed of run `index` (0 is the non-private reference).
pub fn run_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

fn dataset_size(config: &ExperimentConfig) -> Result<usize> {
    match config.accountant_dataset_size {
        Some(n) => Ok(n),
        None => Ok(config.load_data()?.0.len()),
    }
}

/// Forward budget or inverse solve, plus the optional ε table and ρ sweep.
pub fn cmd_accountant(config: &ExperimentConfig) -> CommandResult<Value> {
    config_err(config.validate())?;
    let n = runtime_err(dataset_size(config))?;
    let mut report = serde_json::Map::new();
    report.insert("dataset_size".into(), n.into());
    report.insert("batch_size".into(), config.batch_size.into());
    report.insert("epochs".into(), config.epochs.into());
    report.insert("delta".into(), config.delta.into());
    report.insert("sampling_rate".into(), (config.batch_size as f64 / n as f64).into());

    if let Some(ResolvedPrivacy {
        sigma0_squared,
        report: r,
    }) = config_err(config.resolve_privacy(n))?
    {
        let mode = if config.epsilon.is_some() { "inverse" } else { "forward" };
        report.insert("mode".into(), mode.into());
        report.insert("sigma0_squared".into(), sigma0_squared.into());
        report.insert("rho_total".into(), r.rho_total.into());
        report.insert("omega_total".into(), r.omega_total.into());
        report.insert("epsilon".into(), r.epsilon.into());
        report.insert(
            "warnings".into(),
            config_err(serde_json::to_value(&r.warnings).map_err(Error::from))?,
        );
    }

    if !config.accountant_epsilons.is_empty() {
        let global_adapt = config_err(config.algorithm_parts())?.0 == Some(ClipKind::GlobalAdapt);
        let mut table = Vec::new();
        for kind in config_err(config.accountant_kinds())? {
            let unit = config_err(config.privacy_spec_for_kind(kind, n, 1.0))?;
            let overhead = if global_adapt {
                Some(config_err(threshold_update_budget(&unit, config.count_noise.powi(2)))?)
            } else {
                None
            };
            for &eps in &config.accountant_epsilons {
                let s0 = config_err(solve_sigma0_with_overhead(eps, &unit, overhead.map_or(0.0, |o| o.rho)))?;
                let spec = config_err(config.privacy_spec_for_kind(kind, n, s0))?;
                let mut budget = config_err(crate::accountant::compose_closed_form(&spec))?;
                if let Some(o) = overhead {
                    budget = budget.compose(o);
                }
                let check = config_err(tcdp_to_dp(budget, config.delta))?;
                table.push(json!({
                    "kind": kind.as_str(),
                    "epsilon": eps,
                    "sigma0_squared": s0,
                    "rho_total": budget.rho,
                    "omega_total": budget.omega,
                    "epsilon_check": check.budget.epsilon,
                }));
            }
        }
        report.insert("table".into(), Value::Array(table));
    }

    if !config.rho_sweep.is_empty() {
        let mut sweep = Vec::new();
        for &rho in &config.rho_sweep {
            let conv = config_err(tcdp_to_dp(
                TcdpBudget {
                    rho,
                    omega: f64::INFINITY,
                },
                config.delta,
            ))?;
            sweep.push(json!({ "rho": rho, "epsilon": conv.budget.epsilon }));
        }
        report.insert("rho_sweep".into(), Value::Array(sweep));
    }
    Ok(Value::Object(report))
}

/// The outcome of one configured experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub algorithm: String,
    pub privacy: Option<ResolvedPrivacy>,
    pub train_size: usize,
    pub test_size: usize,
    pub nonprivate: Evaluation,
    pub runs: Vec<Evaluation>,
    pub report: FairnessReport,
    #[serde(skip)]
    pub first_run: RunRecord,
}

struct Prepared {
    train: LabeledDataset,
    test: LabeledDataset,
    privacy: Option<ResolvedPrivacy>,
    reference: TrainerConfig,
    private: Vec<TrainerConfig>,
}

fn prepare(config: &ExperimentConfig) -> CommandResult<Prepared> {
    config_err(config.validate())?;
    let (train, test) = runtime_err(config.load_data())?;
    let privacy = config_err(config.resolve_privacy(train.len()))?;
    let s0 = privacy.as_ref().map(|p| p.sigma0_squared);
    let mut reference = config_err(config.trainer_config(s0, run_seed(config.seed, 0)))?;
    reference.privacy = None;
    let private = (0..config.repetitions)
        .map(|i| config.trainer_config(s0, run_seed(config.seed, i as u64 + 1)))
        .collect::<Result<Vec<_>>>();
    Ok(Prepared {
        train,
        test,
        privacy,
        reference,
        private: config_err(private)?,
    })
}

/// Trains the reference and every repetition; `first_observer` sees the
/// iterations of repetition 0.
fn run_experiment(
    config: &ExperimentConfig,
    first_observer: &mut dyn FnMut(&IterationRecord) -> Result<()>,
) -> CommandResult<ExperimentOutcome> {
    let p = prepare(config)?;
    let reference = runtime_err(train_observed(&p.reference, &p.train, None, &mut |_| Ok(())))?;
    let nonprivate = runtime_err(evaluate_reference(&p.reference, &reference, &p.test))?;
    let mut runs = Vec::with_capacity(p.private.len());
    let mut first_run = None;
    for (i, tc) in p.private.iter().enumerate() {
        let record = if i == 0 {
            runtime_err(train_observed(tc, &p.train, Some(&p.test), first_observer))?
        } else {
            runtime_err(train_observed(tc, &p.train, Some(&p.test), &mut |_| Ok(())))?
        };
        let eval = record
            .final_evaluation()
            .cloned()
            .ok_or_else(|| CommandError::Runtime(Error::Metric("run produced no evaluation".into())))?;
        eprintln!("run {i}: accuracy {:.4} auc {:.4}", eval.accuracy, eval.auc);
        runs.push(eval);
        if i == 0 {
            first_run = Some(record);
        }
    }
    let report = runtime_err(FairnessReport::build(
        &nonprivate,
        &runs,
        config.gap_groups(p.test.classes()),
    ))?;
    Ok(ExperimentOutcome {
        algorithm: config.algorithm.clone(),
        privacy: p.privacy,
        train_size: p.train.len(),
        test_size: p.test.len(),
        nonprivate,
        runs,
        report,
        first_run: first_run.expect("at least one repetition"),
    })
}

fn evaluate_reference(tc: &TrainerConfig, record: &RunRecord, test: &LabeledDataset) -> Result<Evaluation> {
    let arch = crate::trainer::architecture_for(tc, test);
    let model = crate::model::ModelState::new(arch, record.final_params.clone())?;
    evaluate_model(&model, test)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_pretty(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    Ok(text)
}

/// Full manifest: resolved flat config, seed and version.
pub fn manifest(config: &ExperimentConfig) -> Value {
    json!({
        "version": VERSION,
        "seed": config.seed,
        "config": Value::Object(config.to_map()),
    })
}

/// Runs an experiment and writes `metrics.json`, `trajectory.csv` and
/// `manifest.json` into `out`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> CommandResult<ExperimentOutcome> {
    // reject bad configs before touching the output directory
    config_err(config.validate())?;
    runtime_err(fs::create_dir_all(out).map_err(|e| Error::io(out, e)))?;
    let manifest_text = runtime_err(to_pretty(&manifest(config)))?;
    runtime_err(write_file(&out.join("manifest.json"), &manifest_text))?;

    let trajectory_path = out.join("trajectory.csv");
    let mut writer = runtime_err(
        csv::Writer::from_path(&trajectory_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", trajectory_path.display()))),
    )?;
    runtime_err(
        writer
            .write_record(TRAJECTORY_COLUMNS)
            .map_err(csv_error(&trajectory_path)),
    )?;
    let result = run_experiment(config, &mut |r: &IterationRecord| {
        writer
            .write_record(trajectory_row(r))
            .map_err(csv_error(&trajectory_path))
    });
    // keep whatever was recorded, also on failure
    let flushed = writer.flush().map_err(|e| Error::io(&trajectory_path, e));
    let outcome = result?;
    runtime_err(flushed)?;

    let metrics = json!({
        "version": VERSION,
        "algorithm": outcome.algorithm,
        "train_size": outcome.train_size,
        "test_size": outcome.test_size,
        "privacy": outcome.privacy,
        "nonprivate": outcome.nonprivate,
        "runs": outcome.runs,
        "report": outcome.report,
    });
    runtime_err(write_file(
        &out.join("metrics.json"),
        &runtime_err(to_pretty(&metrics))?,
    ))?;
    Ok(outcome)
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Dataset(format!("{}: {e}", path.display()))
}

fn trajectory_row(r: &IterationRecord) -> [String; 6] {
    [
        r.t.to_string(),
        r.epoch.to_string(),
        r.sigma2.to_string(),
        r.threshold.to_string(),
        r.avg_grad_norm.to_string(),
        r.loss.to_string(),
    ]
}

/// One row per config: accuracy, AUC, mean group accuracies and the gap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub epsilon: Option<f64>,
    pub sigma0_squared: Option<f64>,
    pub accuracy: f64,
    pub auc: f64,
    pub group_accuracy: Vec<(usize, f64)>,
    pub pi_a: Option<f64>,
    pub pi_b: Option<f64>,
    pub gap: Option<f64>,
}

pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub csv: String,
    pub text: String,
}

/// Runs every config (they must share dataset keys) and tabulates them.
pub fn cmd_compare(configs: &[ExperimentConfig], out: Option<&Path>) -> CommandResult<Comparison> {
    if configs.len() < 2 {
        return Err(CommandError::Config(Error::Config(
            "compare needs at least two configs".into(),
        )));
    }
    let dataset = configs[0].dataset_keys();
    if let Some(i) = configs.iter().position(|c| c.dataset_keys() != dataset) {
        return Err(CommandError::Config(Error::Config(format!(
            "config {} uses a different dataset than config 0",
            i
        ))));
    }
    for c in configs {
        config_err(c.validate())?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let o = run_experiment(c, &mut |_| Ok(()))?;
        let gap = o.report.gap;
        rows.push(ComparisonRow {
            algorithm: o.algorithm.clone(),
            epsilon: o.privacy.as_ref().map(|p| p.report.epsilon),
            sigma0_squared: o.privacy.as_ref().map(|p| p.sigma0_squared),
            accuracy: o.report.accuracy,
            auc: o.report.auc,
            group_accuracy: o.report.group_accuracy.iter().map(|(&g, &a)| (g, a)).collect(),
            pi_a: gap.map(|g| g.pi_a),
            pi_b: gap.map(|g| g.pi_b),
            gap: gap.map(|g| g.gap),
        });
    }
    let (csv, text) = runtime_err(render_comparison(&rows))?;
    if let Some(out) = out {
        runtime_err(fs::create_dir_all(out).map_err(|e| Error::io(out, e)))?;
        runtime_err(write_file(&out.join("comparison.csv"), csv.as_bytes()))?;
        runtime_err(write_file(&out.join("comparison.txt"), text.as_bytes()))?;
    }
    Ok(Comparison { rows, csv, text })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn render_comparison(rows: &[ComparisonRow]) -> Result<(String, String)> {
    let groups: BTreeSet<usize> = rows.iter().flat_map(|r| r.group_accuracy.iter().map(|g| g.0)).collect();
    let mut header = vec![
        "algorithm".to_string(),
        "epsilon".into(),
        "sigma0_squared".into(),
        "accuracy".into(),
        "auc".into(),
    ];
    header.extend(groups.iter().map(|g| format!("acc_group_{g}")));
    header.extend(["pi_a".into(), "pi_b".into(), "gap".into()]);

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.algorithm.clone(),
                opt(r.epsilon),
                opt(r.sigma0_squared),
                r.accuracy.to_string(),
                r.auc.to_string(),
            ];
            cells.extend(
                groups
                    .iter()
                    .map(|g| opt(r.group_accuracy.iter().find(|(id, _)| id == g).map(|(_, a)| *a))),
            );
            cells.extend([opt(r.pi_a), opt(r.pi_b), opt(r.gap)]);
            cells
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(|e| Error::Dataset(e.to_string()))?;
    for row in &table {
        w.write_record(row).map_err(|e| Error::Dataset(e.to_string()))?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?)
        .map_err(|e| Error::Dataset(e.to_string()))?;

    // aligned text with rounded numbers
    let pretty: Vec<Vec<String>> = table
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| match c.parse::<f64>() {
                    Ok(v) if !c.is_empty() && c.contains('.') => format!("{v:.4}"),
                    _ => c.clone(),
                })
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            pretty
                .iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for row in std::iter::once(&header).chain(pretty.iter()) {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    }
    Ok((csv, text))
}

/// Default output directory.
pub fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
