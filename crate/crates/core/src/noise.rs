//! Noise families, dataset corruption, and parameter attacks.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    /// Fair coin flip between the gaussian and uniform components.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

/// Distribution of additive noise.
///
/// Symmetric: `N(0, scale²)`, `U[−scale, scale]`. Asymmetric: `N(shift, scale²)`
/// with `shift ≠ 0`, `U[0, 2·scale]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub symmetry: Symmetry,
    pub scale: f64,
    /// Mean of the asymmetric gaussian; ignored otherwise.
    pub shift: f64,
}

impl NoiseSpec {
    /// Spec with the default asymmetric shift (`shift = scale`).
    pub fn new(family: NoiseFamily, symmetry: Symmetry, scale: f64) -> Self {
        Self {
            family,
            symmetry,
            scale,
            shift: scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("noise scale must be positive, got {}", self.scale)));
        }
        if self.symmetry == Symmetry::Asymmetric && self.family != NoiseFamily::Uniform && (self.shift == 0.0 || !self.shift.is_finite()) {
            return Err(Error::InvalidArgument("asymmetric gaussian noise needs a nonzero shift".into()));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, gaussian: &Normal<f64>, rng: &mut R) -> f64 {
        let family = match self.family {
            NoiseFamily::Mixed => {
                if rng.random_bool(0.5) {
                    NoiseFamily::Gaussian
                } else {
                    NoiseFamily::Uniform
                }
            }
            f => f,
        };
        match (family, self.symmetry) {
            (NoiseFamily::Gaussian, _) => gaussian.sample(rng),
            (NoiseFamily::Uniform, Symmetry::Symmetric) => rng.random_range(-self.scale..=self.scale),
            (NoiseFamily::Uniform, Symmetry::Asymmetric) => rng.random_range(0.0..=2.0 * self.scale),
            (NoiseFamily::Mixed, _) => unreachable!("mixed resolved above"),
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{} {}",
            match self.symmetry {
                Symmetry::Symmetric => "symmetric",
                Symmetry::Asymmetric => "asymmetric",
            },
            match self.family {
                NoiseFamily::Gaussian => "gaussian",
                NoiseFamily::Uniform => "uniform",
                NoiseFamily::Mixed => "mixed",
            }
        )
    }
}

/// `count` i.i.d. draws from `spec`.
pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R, count: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    let mean = match spec.symmetry {
        Symmetry::Symmetric => 0.0,
        Symmetry::Asymmetric => spec.shift,
    };
    let gaussian = Normal::new(mean, spec.scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..count).map(|_| spec.draw(&gaussian, rng)).collect())
}

/// One additive perturbation of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub feature_index: usize,
    pub epsilon: f64,
}

/// Record of every perturbation made by [`corrupt_dataset`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorruptionManifest {
    /// Adds every recorded `ε` to a copy of `clean`.
    pub fn apply(&self, clean: &Dataset) -> Result<Dataset> {
        let mut out = clean.clone();
        let d = clean.dim();
        for e in &self.entries {
            if e.sample_id >= clean.len() || e.feature_index >= d {
                return Err(Error::IndexOutOfRange {
                    index: e.sample_id.max(e.feature_index),
                    limit: clean.len().max(d),
                });
            }
            out.features[e.sample_id][e.feature_index] += e.epsilon;
        }
        Ok(out)
    }

    /// CSV with columns `sample_id,feature_index,epsilon`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for e in &self.entries {
            wtr.serialize(e)?;
        }
        if self.entries.is_empty() {
            wtr.write_record(["sample_id", "feature_index", "epsilon"])?;
        }
        wtr.flush().map_err(|e| Error::io("manifest", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { entries })
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1")));
    }
    Ok(())
}

/// Adds noise to a random fraction of samples (`p ~ U[fraction]`), each at
/// a random fraction of feature positions (`q ~ U[features]`, per sample).
pub fn corrupt_dataset<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &NoiseSpec,
    rng: &mut R,
    fraction: (f64, f64),
    features: (f64, f64),
) -> Result<(Dataset, CorruptionManifest)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot corrupt an empty dataset".into()));
    }
    check_range("sample fraction", fraction)?;
    check_range("feature fraction", features)?;
    spec.validate()?;
    let m = dataset.len();
    let d = dataset.dim();
    let p = uniform_in(rng, fraction);
    let n_samples = ((p * m as f64).round() as usize).min(m);
    let mut chosen = sample(rng, m, n_samples).into_vec();
    chosen.sort_unstable();
    let mut entries = Vec::new();
    for sample_id in chosen {
        let q = uniform_in(rng, features);
        let k = ((q * d as f64).round() as usize).min(d);
        let mut positions = sample(rng, d, k).into_vec();
        positions.sort_unstable();
        let eps = sample_noise(spec, rng, k)?;
        entries.extend(positions.into_iter().zip(eps).map(|(feature_index, epsilon)| ManifestEntry {
            sample_id,
            feature_index,
            epsilon,
        }));
    }
    let manifest = CorruptionManifest { entries };
    let corrupted = manifest.apply(dataset)?;
    Ok((corrupted, manifest))
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Where the attack perturbation enters.
///
/// `Inner` is `σ(θ + ε)`: for a circuit the gate rotates by `α + ε`, for an
/// MLP the affine map uses `w + ε`. `Outer` is `σ(θ) + ε`: the gate's sine
/// and cosine entries each get `+ε`, or the MLP unit's activated output does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackForm {
    Inner,
    Outer,
}

impl AttackForm {
    pub fn number(&self) -> u8 {
        match self {
            AttackForm::Inner => 1,
            AttackForm::Outer => 2,
        }
    }
}

/// Which parameter family is attacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    /// Circuit angles of a QINN layer, or weights of an MLP hidden layer.
    Layer,
    /// Skip coefficients `λ` of a QINN (index into the λ vector).
    Skip,
}

/// A frozen parameter attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub target: AttackTarget,
    /// 0-based layer index; ignored for [`AttackTarget::Skip`].
    pub layer: usize,
    pub param_indices: Vec<usize>,
    pub form: AttackForm,
    pub noise: NoiseSpec,
    /// One `ε` per index, drawn once at construction.
    pub epsilons: Vec<f64>,
}

impl AttackSpec {
    pub fn new<R: Rng + ?Sized>(
        target: AttackTarget,
        layer: usize,
        param_indices: Vec<usize>,
        form: AttackForm,
        noise: NoiseSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let epsilons = sample_noise(&noise, rng, param_indices.len())?;
        Self::with_epsilons(target, layer, param_indices, form, noise, epsilons)
    }

    pub fn with_epsilons(
        target: AttackTarget,
        layer: usize,
        param_indices: Vec<usize>,
        form: AttackForm,
        noise: NoiseSpec,
        epsilons: Vec<f64>,
    ) -> Result<Self> {
        if epsilons.len() != param_indices.len() {
            return Err(Error::DimensionMismatch {
                expected: param_indices.len(),
                actual: epsilons.len(),
            });
        }
        let mut sorted = param_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != param_indices.len() {
            return Err(Error::InvalidArgument("attacked parameter indices must be distinct".into()));
        }
        Ok(Self {
            target,
            layer,
            param_indices,
            form,
            noise,
            epsilons,
        })
    }

    /// Random layer among `layers` and `count` distinct indices below `per_layer`.
    pub fn random<R: Rng + ?Sized>(
        layers: usize,
        per_layer: usize,
        count: usize,
        form: AttackForm,
        noise: NoiseSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 || count == 0 || count > per_layer {
            return Err(Error::InvalidArgument(format!(
                "cannot attack {count} of {per_layer} parameters in {layers} layer(s)"
            )));
        }
        let layer = rng.random_range(0..layers);
        let mut indices = sample(rng, per_layer, count).into_vec();
        indices.sort_unstable();
        Self::new(AttackTarget::Layer, layer, indices, form, noise, rng)
    }

    /// Same layer, parameter count, form, and noise values.
    pub fn aligned_with(&self, other: &AttackSpec) -> bool {
        self.target == other.target
            && self.layer == other.layer
            && self.param_indices.len() == other.param_indices.len()
            && self.form == other.form
            && self.epsilons.len() == other.epsilons.len()
            && self.epsilons.iter().zip(&other.epsilons).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Fresh `ε` values from the same noise spec, same positions.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.epsilons = sample_noise(&self.noise, rng, self.param_indices.len())?;
        Ok(())
    }

    /// True when the attack makes a circuit layer non-orthogonal.
    pub fn breaks_orthogonality(&self) -> bool {
        self.target == AttackTarget::Layer && self.form == AttackForm::Outer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    fn spec(family: NoiseFamily, symmetry: Symmetry, scale: f64) -> NoiseSpec {
        NoiseSpec::new(family, symmetry, scale)
    }

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn symmetric_uniform_draws() {
        let mut rng = rng_for(1, Stream::Corruption);
        let xs = sample_noise(&spec(NoiseFamily::Uniform, Symmetry::Symmetric, 1.0), &mut rng, 100_000).unwrap();
        assert!(xs.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(mean(&xs).abs() < 0.02);
    }

    #[test]
    fn asymmetric_uniform_draws() {
        let mut rng = rng_for(2, Stream::Corruption);
        let xs = sample_noise(&spec(NoiseFamily::Uniform, Symmetry::Asymmetric, 1.0), &mut rng, 100_000).unwrap();
        assert!(xs.iter().all(|x| (0.0..=2.0).contains(x)));
        assert!((mean(&xs) - 1.0).abs() < 0.02);
    }

    #[test]
    fn empty_and_invalid() {
        let mut rng = rng_for(0, Stream::Corruption);
        assert!(sample_noise(&spec(NoiseFamily::Gaussian, Symmetry::Symmetric, 1.0), &mut rng, 0).unwrap().is_empty());
        assert!(sample_noise(&spec(NoiseFamily::Gaussian, Symmetry::Symmetric, 0.0), &mut rng, 3).is_err());
        assert!(sample_noise(&spec(NoiseFamily::Gaussian, Symmetry::Symmetric, -1.0), &mut rng, 3).is_err());
        let mut zero_shift = spec(NoiseFamily::Gaussian, Symmetry::Asymmetric, 1.0);
        zero_shift.shift = 0.0;
        assert!(sample_noise(&zero_shift, &mut rng, 3).is_err());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let s = spec(NoiseFamily::Mixed, Symmetry::Asymmetric, 0.5);
        let a = sample_noise(&s, &mut rng_for(9, Stream::Attack), 50).unwrap();
        let b = sample_noise(&s, &mut rng_for(9, Stream::Attack), 50).unwrap();
        assert_eq!(a, b);
    }

    fn toy() -> Dataset {
        Dataset::new(
            (0..20).map(|i| vec![i as f64, 1.0, 2.0, 3.0]).collect(),
            (0..20).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let d = toy();
        let (c, m) = corrupt_dataset(&d, &spec(NoiseFamily::Gaussian, Symmetry::Symmetric, 0.5), &mut rng_for(1, Stream::Corruption), (0.0, 0.0), (0.5, 1.0)).unwrap();
        assert_eq!(c, d);
        assert!(m.entries.is_empty());
    }

    #[test]
    fn tiny_scale_full_coverage() {
        let d = toy();
        let (c, m) = corrupt_dataset(&d, &spec(NoiseFamily::Uniform, Symmetry::Symmetric, 1e-9), &mut rng_for(1, Stream::Corruption), (1.0, 1.0), (1.0, 1.0)).unwrap();
        assert_eq!(m.entries.len(), 80);
        for (a, b) in c.features.iter().flatten().zip(d.features.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_replays_and_roundtrips() {
        let d = toy();
        let (c, m) = corrupt_dataset(&d, &spec(NoiseFamily::Mixed, Symmetry::Asymmetric, 0.5), &mut rng_for(4, Stream::Corruption), (0.2, 0.8), (0.25, 0.75)).unwrap();
        assert!(!m.entries.is_empty());
        assert_eq!(m.apply(&d).unwrap(), c);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,feature_index,epsilon\n"));
        let back = CorruptionManifest::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.apply(&d).unwrap(), c);
    }

    #[test]
    fn corruption_rejects_bad_input() {
        let d = toy();
        let s = spec(NoiseFamily::Gaussian, Symmetry::Symmetric, 0.5);
        let mut rng = rng_for(1, Stream::Corruption);
        assert!(corrupt_dataset(&d, &s, &mut rng, (0.6, 0.4), (0.0, 1.0)).is_err());
        assert!(corrupt_dataset(&d, &s, &mut rng, (0.0, 1.2), (0.0, 1.0)).is_err());
        let empty = d.subset(&[]);
        assert!(corrupt_dataset(&empty, &s, &mut rng, (0.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn attack_alignment() {
        let noise = spec(NoiseFamily::Gaussian, Symmetry::Asymmetric, 1.0);
        let a = AttackSpec::random(3, 5, 2, AttackForm::Inner, noise, &mut rng_for(3, Stream::Attack)).unwrap();
        let b = AttackSpec::random(3, 5, 2, AttackForm::Inner, noise, &mut rng_for(3, Stream::Attack)).unwrap();
        assert!(a.aligned_with(&b));
        assert_eq!(a, b);
        let mut c = b.clone();
        c.form = AttackForm::Outer;
        assert!(!a.aligned_with(&c));
        assert!(c.breaks_orthogonality());
        assert!(AttackSpec::random(3, 5, 6, AttackForm::Inner, noise, &mut rng_for(3, Stream::Attack)).is_err());
        assert!(AttackSpec::with_epsilons(AttackTarget::Layer, 0, vec![1, 1], AttackForm::Inner, noise, vec![0.0, 0.0]).is_err());
    }
}
