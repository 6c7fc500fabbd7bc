//! Loading the TOML experiment config and resolving seeds and paths.

use std::fs;
use std::path::{Path, PathBuf};

use qinn::experiment::{ExperimentConfig, SourceKind};

use crate::CliError;

/// Environment variable that replaces the config's seed list.
pub const SEED_ENV: &str = "QINN_SEED";

/// Parses `"0,1,2"`, `"0-4"` (inclusive) or a mix such as `"0-2,7"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || CliError::Usage(format!("bad seed list entry '{part}'"));
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("empty seed list".into()));
    }
    Ok(out)
}

fn resolve_path(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Reads `path` (or the built-in defaults), applies seed overrides
/// (`--seeds` beats `QINN_SEED` beats the file) and makes data paths
/// relative to the config file absolute.
pub fn load_config(path: Option<&Path>, seeds: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let (mut cfg, base) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    if let Some(s) = seeds {
        cfg.seeds = parse_seeds(s)?;
    } else if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seeds = parse_seeds(&s)?;
    }
    match cfg.data.source {
        SourceKind::Iris => resolve_path(&base, &mut cfg.data.path),
        SourceKind::Idx => {
            resolve_path(&base, &mut cfg.data.images);
            resolve_path(&base, &mut cfg.data.labels);
        }
    }
    cfg.resolve().map_err(|e| CliError::Config(e.to_string()))
}
