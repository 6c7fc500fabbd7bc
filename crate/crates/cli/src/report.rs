//! `report`: aggregate finished run directories into tables and curves.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::warn;
use qinn::metrics::{mean_variance, window_stats_from_counts, ClassMetric, WindowStats};
use qinn::training::{fmt_opt, read_epochs_csv, EpochReport};
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// One completed run found on disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub model: String,
    pub order: usize,
    pub seed: u64,
    pub window: (usize, usize),
    pub classes: usize,
    pub config_hash: String,
    pub data_hash: String,
    pub epochs: Vec<EpochReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub dir: String,
    pub reason: String,
}

fn load_run(dir: &Path) -> Result<LoadedRun, String> {
    let summary: Value = File::open(dir.join("summary.json"))
        .map_err(|e| e.to_string())
        .and_then(|f| serde_json::from_reader(BufReader::new(f)).map_err(|e| e.to_string()))?;
    let text = |k: &str| summary[k].as_str().map(str::to_owned).ok_or(format!("summary.json lacks '{k}'"));
    let window = &summary["config"]["train"]["window"];
    let window = match (window[0].as_u64(), window[1].as_u64()) {
        (Some(a), Some(b)) => (a as usize, b as usize),
        _ => return Err("summary.json lacks config.train.window".into()),
    };
    let classes = summary["config"]["data"]["classes"].as_array().map(Vec::len).unwrap_or(0);
    let f = File::open(dir.join("epochs.csv")).map_err(|e| e.to_string())?;
    let epochs = read_epochs_csv(BufReader::new(f)).map_err(|e| e.to_string())?;
    let expected = summary["epochs_run"].as_u64().ok_or("summary.json lacks 'epochs_run'")? as usize;
    if epochs.len() != expected {
        return Err(format!("epochs.csv has {} rows, summary says {expected}", epochs.len()));
    }
    if epochs.iter().enumerate().any(|(i, e)| e.epoch != i + 1) {
        return Err("epochs.csv rows are not consecutive from 1".into());
    }
    let classes = epochs.first().map_or(classes, |e| e.confusion.classes.len());
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        model: text("model")?,
        order: summary["model_order"].as_u64().unwrap_or(u64::MAX) as usize,
        seed: summary["seed"].as_u64().ok_or("summary.json lacks 'seed'")?,
        window,
        classes,
        config_hash: text("config_hash")?,
        data_hash: text("data_hash")?,
        epochs,
    })
}

fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if dir.join("summary.json").is_file() {
        found.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    children.sort();
    for c in children {
        walk(&c, found)?;
    }
    Ok(())
}

/// Finds every directory holding a `summary.json` below `roots`. Runs that
/// fail to parse are returned separately rather than aborting.
pub fn collect_runs(roots: &[PathBuf]) -> Result<(Vec<LoadedRun>, Vec<Skipped>), CliError> {
    let mut dirs = Vec::new();
    for r in roots {
        if !r.is_dir() {
            return Err(CliError::Usage(format!("not a directory: {}", r.display())));
        }
        walk(r, &mut dirs).map_err(|e| CliError::Runtime(format!("{}: {e}", r.display())))?;
    }
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for d in dirs {
        match load_run(&d) {
            Ok(r) => runs.push(r),
            Err(reason) => {
                warn!("skipping {}: {reason}", d.display());
                skipped.push(Skipped { dir: d.display().to_string(), reason });
            }
        }
    }
    Ok((runs, skipped))
}

/// Model labels in configured order.
fn model_order(runs: &[LoadedRun]) -> Vec<String> {
    let mut keys: Vec<(usize, String)> = Vec::new();
    for r in runs {
        match keys.iter_mut().find(|(_, m)| *m == r.model) {
            Some(k) => k.0 = k.0.min(r.order),
            None => keys.push((r.order, r.model.clone())),
        }
    }
    keys.sort();
    keys.into_iter().map(|(_, m)| m).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub mean: Option<f64>,
    /// Standard deviation across the epochs of the window, averaged over runs.
    pub std_window: Option<f64>,
    /// Standard deviation of the per-run window means across seeds.
    pub std_seeds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    pub model: String,
    pub seeds: Vec<u64>,
    pub accuracy: Cell,
    pub pr_area: Cell,
    pub roc_area: Cell,
    /// Per-run window statistics, one entry per seed.
    pub window_stats: Vec<WindowStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scope: String,
    pub window: (usize, usize),
    pub truncated: bool,
    pub config_hashes: Vec<String>,
    pub data_hashes: Vec<String>,
    pub models: Vec<ModelReport>,
    pub skipped: Vec<Skipped>,
}

fn cell(per_run: &[Vec<f64>]) -> Cell {
    let means: Vec<f64> = per_run.iter().filter_map(|v| mean_variance(v).0).collect();
    let stds: Vec<f64> = per_run.iter().filter_map(|v| mean_variance(v).1).map(f64::sqrt).collect();
    let (mean, var) = mean_variance(&means);
    Cell {
        mean,
        std_window: mean_variance(&stds).0,
        std_seeds: var.map(f64::sqrt),
    }
}

fn in_window(r: &LoadedRun, w: (usize, usize)) -> impl Iterator<Item = &EpochReport> {
    r.epochs.iter().filter(move |e| (w.0..=w.1).contains(&e.epoch))
}

/// Builds the report. The window comes from the first run's config and is
/// cut to the shortest run when lengths differ.
pub fn build_report(runs: &[LoadedRun], skipped: Vec<Skipped>) -> Result<Report, CliError> {
    let first = runs.first().ok_or_else(|| CliError::Runtime("no completed runs found".into()))?;
    let common = runs.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    if common == 0 {
        return Err(CliError::Runtime("a run has no epochs".into()));
    }
    let wanted = first.window;
    if runs.iter().any(|r| r.window != wanted) {
        warn!("runs were configured with different windows; using {}-{}", wanted.0, wanted.1);
    }
    let window = (wanted.0.clamp(1, common), wanted.1.min(common));
    let truncated = window != wanted;
    if truncated {
        warn!("window {}-{} truncated to {}-{} (shortest run has {common} epochs)", wanted.0, wanted.1, window.0, window.1);
    }

    let mut models = Vec::new();
    for model in model_order(runs) {
        let mine: Vec<&LoadedRun> = runs.iter().filter(|r| r.model == model).collect();
        let finite = |xs: Vec<f64>| xs.into_iter().filter(|v| v.is_finite()).collect::<Vec<_>>();
        let acc: Vec<Vec<f64>> = mine.iter().map(|r| finite(in_window(r, window).map(|e| e.accuracy).collect())).collect();
        let pr: Vec<Vec<f64>> = mine.iter().map(|r| finite(in_window(r, window).filter_map(|e| e.pr_area).collect())).collect();
        let roc: Vec<Vec<f64>> = mine.iter().map(|r| finite(in_window(r, window).filter_map(|e| e.roc_area).collect())).collect();
        let window_stats = mine
            .iter()
            .map(|r| {
                let counts: Vec<_> = r.epochs.iter().map(|e| (e.epoch, &e.confusion)).collect();
                window_stats_from_counts(&counts, window).map_err(|e| CliError::Runtime(format!("{}: {e}", r.dir.display())))
            })
            .collect::<Result<_, _>>()?;
        models.push(ModelReport {
            model,
            seeds: mine.iter().map(|r| r.seed).collect(),
            accuracy: cell(&acc),
            pr_area: cell(&pr),
            roc_area: cell(&roc),
            window_stats,
        });
    }
    let multi = models.iter().any(|m| m.seeds.len() > 1);
    let set = |f: fn(&LoadedRun) -> &String| runs.iter().map(|r| f(r).clone()).collect::<BTreeSet<_>>().into_iter().collect();
    Ok(Report {
        scope: if multi { "mean over seeds".into() } else { "single run".into() },
        window,
        truncated,
        config_hashes: set(|r| &r.config_hash),
        data_hashes: set(|r| &r.data_hash),
        models,
        skipped,
    })
}

/// Mean over runs of one per-class window statistic, NA when no run has it.
fn pooled(m: &ModelReport, class: usize, metric: ClassMetric, variance: bool) -> Option<f64> {
    let vals: Vec<f64> = m
        .window_stats
        .iter()
        .filter_map(|w| w.per_class.get(class))
        .filter_map(|c| {
            let s = c.get(metric);
            if variance { s.variance } else { s.mean }
        })
        .collect();
    mean_variance(&vals).0
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn provenance(report: &Report) -> [String; 2] {
    [report.config_hashes.join(";"), report.data_hashes.join(";")]
}

/// Rows: class × {mean, variance} × {recall, precision, f1}; one column per model.
fn write_window_stats(path: &Path, report: &Report) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["class".to_string(), "statistic".into(), "metric".into()];
    header.extend(report.models.iter().map(|m| m.model.clone()));
    header.extend(["scope".into(), "config_hash".into(), "data_hash".into()]);
    w.write_record(&header).map_err(csv_err(path))?;
    let classes = report.models.iter().flat_map(|m| m.window_stats.iter().map(|w| w.per_class.len())).max().unwrap_or(0);
    for class in 0..classes {
        for (stat, variance) in [("mean", false), ("variance", true)] {
            for metric in [ClassMetric::Recall, ClassMetric::Precision, ClassMetric::F1] {
                let mut row = vec![class.to_string(), stat.into(), metric.as_str().into()];
                row.extend(report.models.iter().map(|m| fmt_opt(pooled(m, class, metric, variance))));
                row.push(report.scope.clone());
                row.extend(provenance(report));
                w.write_record(&row).map_err(csv_err(path))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Rows: pr_area, roc_area, accuracy; three columns per model.
fn write_table(path: &Path, report: &Report) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["metric".to_string()];
    for m in &report.models {
        header.extend([format!("{} mean", m.model), format!("{} std_window", m.model), format!("{} std_seeds", m.model)]);
    }
    header.extend(["scope".into(), "config_hash".into(), "data_hash".into()]);
    w.write_record(&header).map_err(csv_err(path))?;
    let rows: [(&str, fn(&ModelReport) -> &Cell); 3] =
        [("pr_area", |m| &m.pr_area), ("roc_area", |m| &m.roc_area), ("accuracy", |m| &m.accuracy)];
    for (name, get) in rows {
        let mut row = vec![name.to_string()];
        for m in &report.models {
            let c = get(m);
            row.extend([fmt_opt(c.mean), fmt_opt(c.std_window), fmt_opt(c.std_seeds)]);
        }
        row.push(report.scope.clone());
        row.extend(provenance(report));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Long-format accuracy and log-gradient curves for plotting.
fn write_curves(path: &Path, runs: &[LoadedRun]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["model", "seed", "epoch", "accuracy", "test_loss", "log10_grad_attacked", "nonfinite", "config_hash", "data_hash"])
        .map_err(csv_err(path))?;
    for r in runs {
        for e in &r.epochs {
            w.write_record([
                r.model.clone(),
                r.seed.to_string(),
                e.epoch.to_string(),
                fmt_opt(Some(e.accuracy)),
                fmt_opt(Some(e.test_loss)),
                fmt_opt(e.attacked_grad.map(f64::log10)),
                e.nonfinite.to_string(),
                r.config_hash.clone(),
                r.data_hash.clone(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

fn pct(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{:.2}", 100.0 * x))
}

pub fn render_table(report: &Report) -> String {
    let mut s = format!(
        "window {}-{}{} ({})\n{:<14} {:>16} {:>16} {:>16}\n",
        report.window.0,
        report.window.1,
        if report.truncated { " (truncated)" } else { "" },
        report.scope,
        "model",
        "P-R area",
        "ROC area",
        "accuracy %"
    );
    for m in &report.models {
        let f = |c: &Cell| format!("{}±{}", pct(c.mean), pct(c.std_seeds.or(c.std_window)));
        s += &format!("{:<14} {:>16} {:>16} {:>16}\n", m.model, f(&m.pr_area), f(&m.roc_area), f(&m.accuracy));
    }
    for k in &report.skipped {
        s += &format!("skipped {}: {}\n", k.dir, k.reason);
    }
    s
}

/// Runs `report` over `dirs`, writing into `out`.
pub fn run(dirs: &[PathBuf], out: &Path) -> Result<Report, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let (runs, skipped) = collect_runs(dirs)?;
    let report = build_report(&runs, skipped)?;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write_window_stats(&out.join("window_stats.csv"), &report)?;
    write_table(&out.join("table.csv"), &report)?;
    write_curves(&out.join("curves.csv"), &runs)?;
    let path = out.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    print!("{}", render_table(&report));
    Ok(report)
}
