//! Experiment configuration and per-seed planning shared by every model in
//! a run: one split, one corruption manifest and one attack per seed.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{downsample_flatten, load_idx, load_iris_csv, stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::model::{AnyModel, Classifier};
use crate::networks::{skip_edges, Activation, ConnectionMode, MlpModel, QinnModel};
use crate::noise::{corrupt_dataset, AttackForm, AttackSpec, AttackTarget, CorruptionManifest, NoiseFamily, NoiseSpec, Symmetry};
use crate::rng::{rng_for, Stream};
use crate::training::{train, OptimizerKind, RunRecord, TrainConfig};
use crate::circuit::gate_count;

/// A model entry in an experiment list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelChoice {
    Qinn(ConnectionMode),
    Mlp(Activation),
}

impl ModelChoice {
    pub fn label(&self) -> String {
        match self {
            ModelChoice::Qinn(m) => m.model_name().to_string(),
            ModelChoice::Mlp(a) => format!("MLP-{}", a.as_str()),
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelChoice::Qinn(m) => f.write_str(&m.model_name().to_ascii_lowercase()),
            ModelChoice::Mlp(a) => write!(f, "mlp-{}", a.as_str()),
        }
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "mlp" {
            return Ok(ModelChoice::Mlp(Activation::LeakyRelu));
        }
        if let Some(act) = lower.strip_prefix("mlp-") {
            return Ok(ModelChoice::Mlp(act.parse()?));
        }
        lower
            .parse::<ConnectionMode>()
            .map(ModelChoice::Qinn)
            .map_err(|_| Error::InvalidArgument(format!("unknown model '{s}'")))
    }
}

impl TryFrom<String> for ModelChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelChoice> for String {
    fn from(m: ModelChoice) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Iris,
    Idx,
}

/// Per-feature rescaling applied to the clean data before anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    None,
    Minmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Iris CSV.
    pub path: Option<PathBuf>,
    /// IDX image and label files.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub classes: Vec<u8>,
    pub downsample: usize,
    /// Keep only the first `n` samples of each class (IDX only).
    pub per_class: Option<usize>,
    pub scaling: Scaling,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Iris,
            path: Some(PathBuf::from("data/iris.csv")),
            images: None,
            labels: None,
            classes: vec![0, 1, 2, 3],
            downsample: 4,
            per_class: None,
            scaling: Scaling::None,
            train_fraction: 0.75,
        }
    }
}

impl DataConfig {
    /// Every input file the config reads, in a fixed order.
    pub fn input_paths(&self) -> Result<Vec<PathBuf>> {
        match self.source {
            SourceKind::Iris => Ok(vec![self
                .path
                .clone()
                .ok_or_else(|| Error::InvalidArgument("iris data needs `path`".into()))?]),
            SourceKind::Idx => {
                let images = self.images.clone().ok_or_else(|| Error::InvalidArgument("idx data needs `images`".into()))?;
                let labels = self.labels.clone().ok_or_else(|| Error::InvalidArgument("idx data needs `labels`".into()))?;
                Ok(vec![images, labels])
            }
        }
    }
}

/// Loads, filters, pools and rescales the clean dataset.
pub fn load_data(cfg: &DataConfig) -> Result<Dataset> {
    let paths = cfg.input_paths()?;
    let mut ds = match cfg.source {
        SourceKind::Iris => load_iris_csv(&paths[0])?,
        SourceKind::Idx => {
            let mut ds = load_idx(&paths[0], &paths[1], &cfg.classes)?;
            if let Some(n) = cfg.per_class {
                let mut seen = vec![0usize; ds.num_classes()];
                let keep: Vec<usize> = (0..ds.len())
                    .filter(|&i| {
                        let y = ds.labels[i];
                        seen[y] += 1;
                        seen[y] <= n
                    })
                    .collect();
                ds = ds.subset(&keep);
            }
            if cfg.downsample > 1 {
                ds = downsample_flatten(&ds, cfg.downsample)?;
            }
            ds
        }
    };
    if cfg.scaling == Scaling::Minmax {
        ds.min_max_scale();
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub list: Vec<ModelChoice>,
    /// Number of quantum-inspired layers; also the MLP hidden depth.
    pub depth: usize,
    /// MLP hidden widths; defaults to `depth` layers of the input width.
    pub mlp_hidden: Option<Vec<usize>>,
    /// Modes compared by an ablation.
    pub ablate: Vec<ConnectionMode>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            list: vec![
                ModelChoice::Qinn(ConnectionMode::Residual),
                ModelChoice::Qinn(ConnectionMode::Dense),
                ModelChoice::Mlp(Activation::LeakyRelu),
            ],
            depth: 3,
            mlp_hidden: None,
            ablate: vec![ConnectionMode::None, ConnectionMode::Residual, ConnectionMode::Dense],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Defaults to 16 for iris and 64 for image data.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub window: (usize, usize),
    pub halt_on_nonfinite: bool,
    pub resample_attack: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: None,
            learning_rate: d.learning_rate,
            optimizer: d.optimizer,
            window: d.window,
            halt_on_nonfinite: d.halt_on_nonfinite,
            resample_attack: d.resample_attack,
        }
    }
}

fn noise_spec(family: NoiseFamily, symmetry: Symmetry, scale: f64, shift: Option<f64>) -> Result<NoiseSpec> {
    let mut s = NoiseSpec::new(family, symmetry, scale);
    if let Some(shift) = shift {
        s.shift = shift;
    }
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub family: NoiseFamily,
    pub symmetry: Symmetry,
    pub scale: f64,
    /// Mean of the asymmetric gaussian; defaults to `scale`.
    pub shift: Option<f64>,
    /// Range of the fraction of samples that receive noise.
    pub fraction: (f64, f64),
    /// Range of the fraction of features noised within a chosen sample.
    pub features: (f64, f64),
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            symmetry: Symmetry::Symmetric,
            scale: 0.5,
            shift: None,
            fraction: (0.2, 0.4),
            features: (0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub family: NoiseFamily,
    pub symmetry: Symmetry,
    pub scale: f64,
    /// Mean of the asymmetric gaussian; defaults to `scale`.
    pub shift: Option<f64>,
    pub form: AttackForm,
    pub target: AttackTarget,
    /// Number of attacked parameters.
    pub count: usize,
    /// Fixed layer; drawn from the seed when unset.
    pub layer: Option<usize>,
    /// Fixed indices; drawn from the seed when unset.
    pub indices: Option<Vec<usize>>,
}

impl CorruptionConfig {
    pub fn noise(&self) -> Result<NoiseSpec> {
        noise_spec(self.family, self.symmetry, self.scale, self.shift)
    }
}

impl AttackConfig {
    pub fn noise(&self) -> Result<NoiseSpec> {
        noise_spec(self.family, self.symmetry, self.scale, self.shift)
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            symmetry: Symmetry::Asymmetric,
            scale: 1.0,
            shift: None,
            form: AttackForm::Inner,
            target: AttackTarget::Layer,
            count: 2,
            layer: None,
            indices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub corruption: Option<CorruptionConfig>,
    pub attack: Option<AttackConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            corruption: None,
            attack: None,
        }
    }
}

impl ExperimentConfig {
    /// Fills dataset-dependent defaults and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if self.train.batch_size.is_none() {
            self.train.batch_size = Some(match self.data.source {
                SourceKind::Iris => 16,
                SourceKind::Idx => 64,
            });
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.model.list.is_empty() {
            return Err(Error::InvalidArgument("model list is empty".into()));
        }
        if self.model.depth == 0 {
            return Err(Error::InvalidArgument("depth must be at least 1".into()));
        }
        self.data.input_paths()?;
        if self.data.source == SourceKind::Idx && (self.data.classes.len() < 2 || self.data.downsample == 0) {
            return Err(Error::InvalidArgument("idx data needs ≥ 2 classes and a positive downsample factor".into()));
        }
        let mut classes = self.data.classes.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() != self.data.classes.len() {
            return Err(Error::InvalidArgument("data.classes must be distinct".into()));
        }
        self.train_config(0)?.validate()?;
        if let Some(c) = &self.corruption {
            c.noise()?;
        }
        if let Some(a) = &self.attack {
            a.noise()?;
            if a.count == 0 {
                return Err(Error::InvalidArgument("attack.count must be positive".into()));
            }
            if let Some(ix) = &a.indices {
                if ix.len() != a.count {
                    return Err(Error::InvalidArgument(format!(
                        "attack.indices has {} entries but attack.count is {}",
                        ix.len(),
                        a.count
                    )));
                }
            }
            if a.target == AttackTarget::Skip {
                for m in &self.model.list {
                    match m {
                        ModelChoice::Mlp(_) => {
                            return Err(Error::InvalidArgument("skip attacks cannot target an MLP".into()));
                        }
                        ModelChoice::Qinn(mode) if skip_edges(*mode, self.model.depth).is_empty() => {
                            return Err(Error::InvalidArgument(format!(
                                "skip attack on {} which has no skip parameters",
                                mode.model_name()
                            )));
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size.unwrap_or(16),
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            seed,
            window: self.train.window,
            halt_on_nonfinite: self.train.halt_on_nonfinite,
            resample_attack: self.train.resample_attack,
        })
    }

    fn mlp_hidden(&self, dim: usize) -> Vec<usize> {
        self.model.mlp_hidden.clone().unwrap_or_else(|| vec![dim; self.model.depth])
    }

    pub fn build_model(&self, choice: ModelChoice, dim: usize, classes: usize, seed: u64) -> Result<AnyModel> {
        Ok(match choice {
            ModelChoice::Qinn(mode) => AnyModel::Qinn(QinnModel::new(dim, self.model.depth, classes, mode, seed)?),
            ModelChoice::Mlp(act) => AnyModel::Mlp(MlpModel::new(dim, &self.mlp_hidden(dim), classes, act, seed)?),
        })
    }

    /// Largest layer and per-layer index range valid for every listed model.
    fn attack_bounds(&self, models: &[ModelChoice], dim: usize, target: AttackTarget) -> (usize, usize) {
        let mut layers = usize::MAX;
        let mut per_layer = usize::MAX;
        for m in models {
            match (m, target) {
                (ModelChoice::Qinn(_), AttackTarget::Layer) => {
                    layers = layers.min(self.model.depth);
                    per_layer = per_layer.min(gate_count(dim));
                }
                (ModelChoice::Qinn(mode), AttackTarget::Skip) => {
                    layers = 1;
                    per_layer = per_layer.min(skip_edges(*mode, self.model.depth).len());
                }
                (ModelChoice::Mlp(_), _) => {
                    let hidden = self.mlp_hidden(dim);
                    layers = layers.min(hidden.len());
                    let mut fan_in = dim;
                    for &w in &hidden {
                        per_layer = per_layer.min(fan_in * w);
                        fan_in = w;
                    }
                }
            }
        }
        (layers, per_layer)
    }
}

/// Everything shared by the models trained under one seed.
#[derive(Debug, Clone)]
pub struct SeedPlan {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: Option<CorruptionManifest>,
    pub attack: Option<AttackSpec>,
}

/// Corrupts (if configured), splits, and draws the attack for `seed`.
///
/// Corruption is applied to the whole dataset before splitting, so train
/// and test come from the same noisy instance.
pub fn plan_seed(cfg: &ExperimentConfig, clean: &Dataset, seed: u64, models: &[ModelChoice], with_attack: bool) -> Result<SeedPlan> {
    let (data, manifest) = match &cfg.corruption {
        Some(c) => {
            let spec = c.noise()?;
            let (ds, m) = corrupt_dataset(clean, &spec, &mut rng_for(seed, Stream::Corruption), c.fraction, c.features)?;
            (ds, Some(m))
        }
        None => (clean.clone(), None),
    };
    let (train, test) = stratified_split(&data, cfg.data.train_fraction, seed)?;
    let attack = match (&cfg.attack, with_attack) {
        (Some(a), true) => Some(draw_attack(cfg, a, models, clean.dim(), seed)?),
        (None, true) => return Err(Error::InvalidArgument("attack run without an [attack] section".into())),
        _ => None,
    };
    Ok(SeedPlan {
        seed,
        train,
        test,
        manifest,
        attack,
    })
}

fn draw_attack(cfg: &ExperimentConfig, a: &AttackConfig, models: &[ModelChoice], dim: usize, seed: u64) -> Result<AttackSpec> {
    let noise = a.noise()?;
    let (layers, per_layer) = cfg.attack_bounds(models, dim, a.target);
    let mut rng = rng_for(seed, Stream::Attack);
    let spec = match (&a.layer, &a.indices) {
        (None, None) if a.target == AttackTarget::Layer => AttackSpec::random(layers, per_layer, a.count, a.form, noise, &mut rng)?,
        _ => {
            let layer = match a.layer {
                Some(l) => l,
                None if a.target == AttackTarget::Skip => 0,
                None => rand::Rng::random_range(&mut rng, 0..layers),
            };
            let indices = match &a.indices {
                Some(ix) => ix.clone(),
                None => {
                    if a.count > per_layer {
                        return Err(Error::InvalidArgument(format!("cannot attack {} of {per_layer} parameters", a.count)));
                    }
                    let mut ix = rand::seq::index::sample(&mut rng, per_layer, a.count).into_vec();
                    ix.sort_unstable();
                    ix
                }
            };
            if a.target == AttackTarget::Layer && layer >= layers {
                return Err(Error::IndexOutOfRange { index: layer, limit: layers });
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= per_layer) {
                return Err(Error::IndexOutOfRange { index: bad, limit: per_layer });
            }
            AttackSpec::new(a.target, layer, indices, a.form, noise, &mut rng)?
        }
    };
    Ok(spec)
}

/// A trained model and its history.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub choice: ModelChoice,
    pub model: AnyModel,
    pub record: RunRecord,
}

pub fn run_model(cfg: &ExperimentConfig, plan: &SeedPlan, choice: ModelChoice) -> Result<ModelRun> {
    let mut model = cfg.build_model(choice, plan.train.dim(), plan.train.num_classes(), plan.seed)?;
    let tc = cfg.train_config(plan.seed)?;
    let mut record = train(&mut model, &plan.train, &plan.test, &tc, plan.attack.as_ref())?;
    record.model = model.name();
    Ok(ModelRun { choice, model, record })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_choice_names() {
        for s in ["qrfnn", "qdfnn", "tqfnn", "resqfnn-all", "resqfnn-2", "mlp-leaky-relu", "mlp-tanh"] {
            let m: ModelChoice = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("mlp".parse::<ModelChoice>().unwrap(), ModelChoice::Mlp(Activation::LeakyRelu));
        assert_eq!("dense".parse::<ModelChoice>().unwrap(), ModelChoice::Qinn(ConnectionMode::Dense));
        assert!("cnn".parse::<ModelChoice>().is_err());
    }

    #[test]
    fn skip_attack_on_plain_stack_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.list = vec![ModelChoice::Qinn(ConnectionMode::None)];
        cfg.attack = Some(AttackConfig {
            target: AttackTarget::Skip,
            count: 1,
            ..AttackConfig::default()
        });
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn attack_bounds_cover_all_models() {
        let cfg = ExperimentConfig::default();
        let (layers, per_layer) = cfg.attack_bounds(&cfg.model.list, 4, AttackTarget::Layer);
        assert_eq!(layers, 3);
        assert_eq!(per_layer, gate_count(4));
    }

    #[test]
    fn batch_size_defaults_follow_the_data() {
        let c = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(c.train.batch_size, Some(16));
        let mut idx = ExperimentConfig::default();
        idx.data.source = SourceKind::Idx;
        idx.data.images = Some("a".into());
        idx.data.labels = Some("b".into());
        assert_eq!(idx.resolve().unwrap().train.batch_size, Some(64));
    }
}
