//! `train`, `attack` and `ablate`: plan every seed once, train each listed
//! model against the shared plan, and write per-run artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use qinn::checkpoint::Checkpoint;
use qinn::experiment::{load_data, plan_seed, run_model, ExperimentConfig, ModelChoice, ModelRun, SeedPlan};
use qinn::metrics::{mean_variance, window_stats_from_counts, WindowStats};
use qinn::noise::{AttackSpec, CorruptionManifest, NoiseSpec};
use qinn::training::{fmt_f64, fmt_opt, log_attacked_gradient, write_epochs_csv};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::load_config;
use crate::hashing::{combined_data_hash, config_hash, hash_files, sha256_hex, FileHash};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    Ablate,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Option<String>,
    pub parallel: usize,
}

/// Fixed statements about modelling choices, copied into every summary.
#[derive(Debug, Clone, Serialize)]
pub struct Notes {
    pub loss: &'static str,
    pub hyperparameters: &'static str,
    pub outer_attack: &'static str,
    pub mlp_activation: &'static str,
}

pub const NOTES: Notes = Notes {
    loss: "softmax cross-entropy, probabilities clamped at 1e-12",
    hyperparameters: "optimizer, learning rate and batch size are configurable defaults, not values from the original experiments",
    outer_attack: "form 2 adds epsilon to both the sine and the cosine entries of the attacked gate",
    mlp_activation: "tanh stands in for the unavailable rot-relu activation",
};

#[derive(Debug, Clone, Serialize)]
pub struct AttackSummary {
    pub target: qinn::noise::AttackTarget,
    pub layer: usize,
    pub param_indices: Vec<usize>,
    pub form: u8,
    pub epsilons: Vec<f64>,
    pub noise: NoiseSpec,
    /// Flat parameter indices of this model touched by the attack.
    pub attacked_parameters: Vec<usize>,
    pub orthogonality_broken: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
    pub pr_area: Option<f64>,
    pub roc_area: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowSummary {
    pub range: (usize, usize),
    pub truncated: bool,
    pub mean_accuracy: Option<f64>,
    pub accuracy_variance: Option<f64>,
    pub mean_pr_area: Option<f64>,
    pub mean_roc_area: Option<f64>,
    pub stats: WindowStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub model: String,
    pub choice: String,
    pub model_order: usize,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub data_files: Vec<FileHash>,
    pub manifest_sha256: Option<String>,
    pub attack: Option<AttackSummary>,
    pub epochs_configured: usize,
    pub epochs_run: usize,
    pub halted: bool,
    pub initial_train_loss: Option<f64>,
    pub final_epoch: Option<FinalMetrics>,
    pub window: Option<WindowSummary>,
    pub nonfinite_epochs: Vec<usize>,
    pub max_log10_attacked_grad: Option<f64>,
    pub flags: Vec<String>,
    pub notes: Notes,
    pub config: ExperimentConfig,
}

/// What a command produced, for callers that post-process in memory.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out: PathBuf,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub runs: Vec<RunSummary>,
}

struct Provenance {
    config_hash: String,
    data_hash: String,
    files: Vec<FileHash>,
}

impl Provenance {
    fn columns(&self) -> [(&str, &str); 2] {
        [("config_hash", &self.config_hash), ("data_hash", &self.data_hash)]
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn manifest_bytes(m: &CorruptionManifest) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(buf)
}

/// Manifest rows with the provenance columns appended.
fn write_manifest(path: &Path, m: &CorruptionManifest, prov: &Provenance) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| io_err(path, e);
    w.write_record(["sample_id", "feature_index", "epsilon", "config_hash", "data_hash"]).map_err(err)?;
    for e in &m.entries {
        w.write_record([
            e.sample_id.to_string(),
            e.feature_index.to_string(),
            fmt_f64(e.epsilon),
            prov.config_hash.clone(),
            prov.data_hash.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn attack_summary(run: &ModelRun, spec: &AttackSpec) -> AttackSummary {
    AttackSummary {
        target: spec.target,
        layer: spec.layer,
        param_indices: spec.param_indices.clone(),
        form: spec.form.number(),
        epsilons: spec.epsilons.clone(),
        noise: spec.noise,
        attacked_parameters: run.record.attacked_parameters.clone(),
        orthogonality_broken: matches!(run.choice, ModelChoice::Qinn(_)) && spec.breaks_orthogonality(),
    }
}

fn summarise(
    command: Command,
    cfg: &ExperimentConfig,
    prov: &Provenance,
    plan: &SeedPlan,
    manifest_hash: Option<String>,
    order: usize,
    run: &ModelRun,
) -> Result<RunSummary, CliError> {
    let r = &run.record;
    let tc = cfg.train_config(plan.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let window = match tc.effective_window(r.epochs.len()) {
        Some(w) => {
            let stats = window_stats_from_counts(&r.counts_by_epoch(), w).map_err(|e| CliError::Runtime(e.to_string()))?;
            let inside: Vec<_> = r.epochs.iter().filter(|e| (w.0..=w.1).contains(&e.epoch)).collect();
            let finite = |xs: Vec<f64>| xs.into_iter().filter(|v| v.is_finite()).collect::<Vec<_>>();
            let (mean_accuracy, accuracy_variance) = mean_variance(&finite(inside.iter().map(|e| e.accuracy).collect()));
            let (mean_pr_area, _) = mean_variance(&finite(inside.iter().filter_map(|e| e.pr_area).collect()));
            let (mean_roc_area, _) = mean_variance(&finite(inside.iter().filter_map(|e| e.roc_area).collect()));
            Some(WindowSummary {
                range: w,
                truncated: w != tc.window,
                mean_accuracy,
                accuracy_variance,
                mean_pr_area,
                mean_roc_area,
                stats,
            })
        }
        None => None,
    };
    let grad = log_attacked_gradient(r);
    let max_log10 = grad.iter().map(|g| g.log10).filter(|v| !v.is_nan()).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let nonfinite_epochs: Vec<usize> = r.epochs.iter().filter(|e| e.nonfinite).map(|e| e.epoch).collect();
    let attack = plan.attack.as_ref().map(|a| attack_summary(run, a));
    let mut flags = Vec::new();
    if attack.as_ref().is_some_and(|a| a.orthogonality_broken) {
        flags.push("orthogonality broken".to_string());
    }
    if !nonfinite_epochs.is_empty() {
        flags.push(format!("non-finite at epoch {}", nonfinite_epochs[0]));
    }
    if grad.iter().any(|g| g.flagged) {
        flags.push("attacked gradient sentinel".to_string());
    }
    if r.halted {
        flags.push("halted".to_string());
    }
    Ok(RunSummary {
        command: command.as_str().into(),
        model: run.choice.label(),
        choice: run.choice.to_string(),
        model_order: order,
        seed: plan.seed,
        config_hash: prov.config_hash.clone(),
        data_hash: prov.data_hash.clone(),
        data_files: prov.files.clone(),
        manifest_sha256: manifest_hash,
        attack,
        epochs_configured: cfg.train.epochs,
        epochs_run: r.epochs.len(),
        halted: r.halted,
        initial_train_loss: r.initial_train_loss,
        final_epoch: r.epochs.last().map(|e| FinalMetrics {
            epoch: e.epoch,
            train_loss: e.train_loss,
            test_loss: e.test_loss,
            accuracy: e.accuracy,
            pr_area: e.pr_area,
            roc_area: e.roc_area,
        }),
        window,
        nonfinite_epochs,
        max_log10_attacked_grad: max_log10,
        flags,
        notes: NOTES,
        config: cfg.clone(),
    })
}

fn write_run(dir: &Path, run: &ModelRun, summary: &RunSummary, classes: usize, prov: &Provenance) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("epochs.csv");
    write_epochs_csv(&run.record, classes, &prov.columns(), create(&path)?).map_err(|e| io_err(&path, e))?;

    if summary.attack.is_some() {
        let path = dir.join("grad.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        let err = |e: csv::Error| io_err(&path, e);
        w.write_record(["epoch", "grad_attacked", "log10_grad_attacked", "flagged", "config_hash", "data_hash"]).map_err(err)?;
        for g in log_attacked_gradient(&run.record) {
            w.write_record([
                g.epoch.to_string(),
                fmt_f64(g.magnitude),
                fmt_f64(g.log10),
                g.flagged.to_string(),
                prov.config_hash.clone(),
                prov.data_hash.clone(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }

    let mut ckpt = serde_json::to_value(Checkpoint::from(&run.model)).map_err(|e| CliError::Runtime(e.to_string()))?;
    ckpt["provenance"] = serde_json::json!({
        "seed": summary.seed,
        "config_hash": prov.config_hash,
        "data_hash": prov.data_hash,
    });
    write_json(&dir.join("checkpoint.json"), &ckpt)?;
    write_json(&dir.join("summary.json"), summary)
}

fn models_for(command: Command, cfg: &ExperimentConfig) -> Vec<ModelChoice> {
    match command {
        Command::Ablate => cfg.model.ablate.iter().map(|&m| ModelChoice::Qinn(m)).collect(),
        _ => cfg.model.list.clone(),
    }
}

/// Runs one of the training commands end to end.
pub fn run(command: Command, opts: &RunOptions) -> Result<Outcome, CliError> {
    let mut cfg = load_config(opts.config.as_deref(), opts.seeds.as_deref())?;
    match command {
        Command::Attack if cfg.attack.is_none() => {
            return Err(CliError::Config("the attack command needs an [attack] section".into()));
        }
        Command::Train | Command::Ablate if cfg.attack.is_some() => {
            warn!("[attack] section ignored by `{}`", command.as_str());
            cfg.attack = None;
        }
        _ => {}
    }
    if command == Command::Ablate {
        if cfg.model.ablate.is_empty() {
            return Err(CliError::Config("model.ablate lists no modes".into()));
        }
        if cfg.seeds.len() < 3 {
            warn!("ablation with {} seed(s); at least 3 are recommended", cfg.seeds.len());
        }
    }
    let models = models_for(command, &cfg);

    // Everything that can fail on bad input happens before the first write.
    let inputs = cfg.data.input_paths().map_err(|e| CliError::Config(e.to_string()))?;
    for p in &inputs {
        if !p.is_file() {
            return Err(CliError::Data(format!("dataset file not found: {}", p.display())));
        }
    }
    let files = hash_files(&inputs)?;
    let prov = Provenance {
        config_hash: config_hash(&cfg)?,
        data_hash: combined_data_hash(&files),
        files,
    };
    let data = load_data(&cfg.data).map_err(|e| CliError::Data(e.to_string()))?;
    info!(
        "loaded {} samples, {} features, per-class counts {:?}",
        data.len(),
        data.dim(),
        data.class_counts()
    );
    let plans: Vec<SeedPlan> = cfg
        .seeds
        .iter()
        .map(|&s| plan_seed(&cfg, &data, s, &models, command == Command::Attack))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    for m in &models {
        cfg.build_model(*m, data.dim(), data.num_classes(), 0)
            .map_err(|e| CliError::Config(format!("{m}: {e}")))?;
    }

    fs::create_dir_all(&opts.out).map_err(|e| io_err(&opts.out, e))?;
    let resolved = toml::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let header = format!("# config_hash = \"{}\"\n# data_hash = \"{}\"\n", prov.config_hash, prov.data_hash);
    let path = opts.out.join("config.resolved.toml");
    fs::write(&path, header + &resolved).map_err(|e| io_err(&path, e))?;

    let mut manifest_hashes = Vec::new();
    for plan in &plans {
        let dir = seed_dir(&opts.out, plan.seed);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let hash = match &plan.manifest {
            Some(m) => {
                write_manifest(&dir.join("manifest.csv"), m, &prov)?;
                Some(sha256_hex(&manifest_bytes(m)?))
            }
            None => None,
        };
        if let Some(a) = &plan.attack {
            write_json(&dir.join("attack.json"), a)?;
        }
        manifest_hashes.push(hash);
    }

    let jobs: Vec<(usize, usize)> = (0..plans.len()).flat_map(|p| (0..models.len()).map(move |m| (p, m))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let classes = data.num_classes();
    let results: Vec<Result<RunSummary, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, m)| {
                let plan = &plans[p];
                let choice = models[m];
                info!("{} seed {}: training {}", command.as_str(), plan.seed, choice.label());
                let run = run_model(&cfg, plan, choice).map_err(|e| CliError::Runtime(format!("{choice} seed {}: {e}", plan.seed)))?;
                let summary = summarise(command, &cfg, &prov, plan, manifest_hashes[p].clone(), m, &run)?;
                write_run(&seed_dir(&opts.out, plan.seed).join(choice.to_string()), &run, &summary, classes, &prov)?;
                Ok(summary)
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_index(&opts.out.join("runs.csv"), &runs)?;

    let outcome = Outcome {
        out: opts.out.clone(),
        config: cfg,
        config_hash: prov.config_hash,
        data_hash: prov.data_hash,
        runs,
    };
    match command {
        Command::Ablate => write_ablation(&outcome)?,
        _ => print_runs(&outcome),
    }
    Ok(outcome)
}

fn window_accuracy(s: &RunSummary) -> Option<f64> {
    s.window.as_ref().and_then(|w| w.mean_accuracy)
}

/// One row per (seed, model) with headline numbers and flags.
fn write_index(path: &Path, runs: &[RunSummary]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| io_err(path, e);
    w.write_record([
        "seed",
        "model",
        "epochs_run",
        "final_accuracy",
        "window_accuracy",
        "nonfinite_epochs",
        "max_log10_grad_attacked",
        "flags",
        "config_hash",
        "data_hash",
    ])
    .map_err(err)?;
    for s in runs {
        w.write_record([
            s.seed.to_string(),
            s.model.clone(),
            s.epochs_run.to_string(),
            fmt_opt(s.final_epoch.as_ref().map(|f| f.accuracy)),
            fmt_opt(window_accuracy(s)),
            s.nonfinite_epochs.len().to_string(),
            fmt_opt(s.max_log10_attacked_grad),
            s.flags.join("; "),
            s.config_hash.clone(),
            s.data_hash.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn print_runs(o: &Outcome) {
    println!("{:<6} {:<16} {:>9} {:>9} {:>10}  flags", "seed", "model", "final", "window", "max log10");
    for s in &o.runs {
        println!(
            "{:<6} {:<16} {:>9} {:>9} {:>10}  {}",
            s.seed,
            s.model,
            fmt_pct(s.final_epoch.as_ref().map(|f| f.accuracy)),
            fmt_pct(window_accuracy(s)),
            s.max_log10_attacked_grad.map_or("-".into(), |v| format!("{v:.3}")),
            s.flags.join("; ")
        );
    }
    println!("outputs in {}", o.out.display());
}

fn fmt_pct(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or("NA".into(), |x| format!("{:.2}%", 100.0 * x))
}

/// Per-mode mean and standard deviation (over seeds) of the window accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub seeds: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_final_accuracy: Option<f64>,
}

pub fn ablation_rows(runs: &[RunSummary]) -> Vec<AblationRow> {
    let mut order: Vec<(usize, String)> = runs.iter().map(|r| (r.model_order, r.model.clone())).collect();
    order.sort();
    order.dedup();
    order
        .into_iter()
        .map(|(_, model)| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.model == model).collect();
            let acc: Vec<f64> = mine.iter().filter_map(|r| window_accuracy(r)).filter(|v| v.is_finite()).collect();
            let fin: Vec<f64> = mine.iter().filter_map(|r| r.final_epoch.as_ref().map(|f| f.accuracy)).filter(|v| v.is_finite()).collect();
            let (mean, var) = mean_variance(&acc);
            AblationRow {
                model,
                seeds: mine.len(),
                mean_accuracy: mean,
                std_accuracy: var.map(f64::sqrt),
                mean_final_accuracy: mean_variance(&fin).0,
            }
        })
        .collect()
}

fn write_ablation(o: &Outcome) -> Result<(), CliError> {
    let rows = ablation_rows(&o.runs);
    let path = o.out.join("ablation.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let err = |e: csv::Error| io_err(&path, e);
    w.write_record(["model", "seeds", "mean_accuracy", "std_accuracy", "mean_final_accuracy", "config_hash", "data_hash"])
        .map_err(err)?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.seeds.to_string(),
            fmt_opt(r.mean_accuracy),
            fmt_opt(r.std_accuracy),
            fmt_opt(r.mean_final_accuracy),
            o.config_hash.clone(),
            o.data_hash.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let window = o.config.train.window;
    let mut table = format!(
        "accuracy over epochs {}-{} (mean ± std over seeds)\n{:<12} {:>6} {:>10} {:>8}\n",
        window.0, window.1, "model", "seeds", "mean", "std"
    );
    for r in &rows {
        table += &format!(
            "{:<12} {:>6} {:>10} {:>8}\n",
            r.model,
            r.seeds,
            fmt_pct(r.mean_accuracy),
            r.std_accuracy.map_or("NA".into(), |s| format!("{:.2}", 100.0 * s))
        );
    }
    let path = o.out.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| io_err(&path, e))?;
    print!("{table}");
    Ok(())
}
