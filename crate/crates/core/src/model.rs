//! A common interface over the hybrid network and the MLP baseline, and the
//! translation of an [`AttackSpec`] into each model's forward-pass perturbation.

use serde::{Deserialize, Serialize};

use crate::circuit::GateShift;
use crate::error::{Error, Result};
use crate::networks::{MlpModel, MlpPerturbation, QinnModel, QinnPerturbation};
use crate::noise::{AttackForm, AttackSpec, AttackTarget};
use crate::training::cross_entropy;

pub trait Classifier {
    type Perturbation: Clone + Default + Send + Sync;

    fn name(&self) -> String;
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, params: &[f64]) -> Result<()>;

    /// Resolves `attack` against this model's parameters.
    fn perturbation(&self, attack: &AttackSpec) -> Result<Self::Perturbation>;

    /// Flat parameter indices touched by `attack`.
    fn attacked_parameters(&self, attack: &AttackSpec) -> Result<Vec<usize>>;

    fn probabilities(&self, x: &[f64], pert: &Self::Perturbation) -> Result<Vec<f64>>;

    /// Cross-entropy loss and its gradient w.r.t. the flat parameters.
    fn loss_and_gradient(&self, x: &[f64], label: usize, pert: &Self::Perturbation) -> Result<(f64, Vec<f64>)>;
}

fn check_indices(indices: &[usize], limit: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= limit) {
        Some(&i) => Err(Error::IndexOutOfRange { index: i, limit }),
        None => Ok(()),
    }
}

impl Classifier for QinnModel {
    type Perturbation = QinnPerturbation;

    fn name(&self) -> String {
        self.mode().model_name().to_string()
    }

    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn parameters(&self) -> Vec<f64> {
        QinnModel::parameters(self)
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        QinnModel::set_parameters(self, params)
    }

    fn perturbation(&self, attack: &AttackSpec) -> Result<QinnPerturbation> {
        match attack.target {
            AttackTarget::Layer => {
                if attack.layer >= self.depth() {
                    return Err(Error::IndexOutOfRange {
                        index: attack.layer,
                        limit: self.depth(),
                    });
                }
                check_indices(&attack.param_indices, self.layers()[attack.layer].len())?;
                let gates = attack
                    .param_indices
                    .iter()
                    .zip(&attack.epsilons)
                    .map(|(&r, &eps)| {
                        let shift = match attack.form {
                            AttackForm::Inner => GateShift::Angle(eps),
                            AttackForm::Outer => GateShift::Entries(eps),
                        };
                        (attack.layer, r, shift)
                    })
                    .collect();
                Ok(QinnPerturbation { gates, lambdas: vec![] })
            }
            AttackTarget::Skip => {
                if self.lambdas().is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "{} has no skip parameters to attack",
                        self.mode().model_name()
                    )));
                }
                check_indices(&attack.param_indices, self.lambdas().len())?;
                Ok(QinnPerturbation {
                    gates: vec![],
                    lambdas: attack.param_indices.iter().copied().zip(attack.epsilons.iter().copied()).collect(),
                })
            }
        }
    }

    fn attacked_parameters(&self, attack: &AttackSpec) -> Result<Vec<usize>> {
        self.perturbation(attack)?;
        let base = match attack.target {
            AttackTarget::Layer => self.alpha_offset(attack.layer),
            AttackTarget::Skip => self.lambda_offset(),
        };
        Ok(attack.param_indices.iter().map(|i| base + i).collect())
    }

    fn probabilities(&self, x: &[f64], pert: &QinnPerturbation) -> Result<Vec<f64>> {
        Ok(self.forward_perturbed(x, pert)?.probabilities)
    }

    fn loss_and_gradient(&self, x: &[f64], label: usize, pert: &QinnPerturbation) -> Result<(f64, Vec<f64>)> {
        let f = self.forward_perturbed(x, pert)?;
        let (loss, g) = cross_entropy(&f.probabilities, label)?;
        Ok((loss, self.backward(&f.cache, &g)?.flatten()))
    }
}

impl Classifier for MlpModel {
    type Perturbation = MlpPerturbation;

    fn name(&self) -> String {
        format!("MLP-{}", self.activation().as_str())
    }

    fn input_dim(&self) -> usize {
        MlpModel::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn parameters(&self) -> Vec<f64> {
        MlpModel::parameters(self)
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        MlpModel::set_parameters(self, params)
    }

    fn perturbation(&self, attack: &AttackSpec) -> Result<MlpPerturbation> {
        if attack.target == AttackTarget::Skip {
            return Err(Error::InvalidArgument("an MLP has no skip parameters to attack".into()));
        }
        if attack.layer >= self.hidden_layers() {
            return Err(Error::IndexOutOfRange {
                index: attack.layer,
                limit: self.hidden_layers(),
            });
        }
        let n_in = self.sizes()[attack.layer];
        check_indices(&attack.param_indices, self.weights()[attack.layer].len())?;
        let pairs = attack.param_indices.iter().copied().zip(attack.epsilons.iter().copied());
        Ok(match attack.form {
            AttackForm::Inner => MlpPerturbation {
                layer: attack.layer,
                weights: pairs.collect(),
                outputs: vec![],
            },
            AttackForm::Outer => MlpPerturbation {
                layer: attack.layer,
                weights: vec![],
                outputs: pairs.map(|(i, eps)| (i / n_in, eps)).collect(),
            },
        })
    }

    fn attacked_parameters(&self, attack: &AttackSpec) -> Result<Vec<usize>> {
        self.perturbation(attack)?;
        let base = self.weight_offset(attack.layer);
        Ok(attack.param_indices.iter().map(|i| base + i).collect())
    }

    fn probabilities(&self, x: &[f64], pert: &MlpPerturbation) -> Result<Vec<f64>> {
        Ok(self.forward_perturbed(x, pert)?.probabilities)
    }

    fn loss_and_gradient(&self, x: &[f64], label: usize, pert: &MlpPerturbation) -> Result<(f64, Vec<f64>)> {
        let f = self.forward_perturbed(x, pert)?;
        let (loss, g) = cross_entropy(&f.probabilities, label)?;
        Ok((loss, self.backward(&f.cache, &g)?.flatten()))
    }
}

/// Either model family, for heterogeneous experiment lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnyModel {
    Qinn(QinnModel),
    Mlp(MlpModel),
}

#[derive(Debug, Clone, Default)]
pub enum AnyPerturbation {
    #[default]
    None,
    Qinn(QinnPerturbation),
    Mlp(MlpPerturbation),
}

impl AnyModel {
    fn qinn_pert<'a>(&self, p: &'a AnyPerturbation) -> Result<std::borrow::Cow<'a, QinnPerturbation>> {
        match p {
            AnyPerturbation::None => Ok(std::borrow::Cow::Owned(QinnPerturbation::default())),
            AnyPerturbation::Qinn(q) => Ok(std::borrow::Cow::Borrowed(q)),
            AnyPerturbation::Mlp(_) => Err(Error::Contract("MLP perturbation passed to a QINN".into())),
        }
    }

    fn mlp_pert<'a>(&self, p: &'a AnyPerturbation) -> Result<std::borrow::Cow<'a, MlpPerturbation>> {
        match p {
            AnyPerturbation::None => Ok(std::borrow::Cow::Owned(MlpPerturbation::default())),
            AnyPerturbation::Mlp(m) => Ok(std::borrow::Cow::Borrowed(m)),
            AnyPerturbation::Qinn(_) => Err(Error::Contract("QINN perturbation passed to an MLP".into())),
        }
    }
}

impl Classifier for AnyModel {
    type Perturbation = AnyPerturbation;

    fn name(&self) -> String {
        match self {
            AnyModel::Qinn(m) => m.name(),
            AnyModel::Mlp(m) => m.name(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            AnyModel::Qinn(m) => m.dim(),
            AnyModel::Mlp(m) => m.input_dim(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            AnyModel::Qinn(m) => m.classes(),
            AnyModel::Mlp(m) => m.classes(),
        }
    }

    fn parameters(&self) -> Vec<f64> {
        match self {
            AnyModel::Qinn(m) => m.parameters(),
            AnyModel::Mlp(m) => m.parameters(),
        }
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        match self {
            AnyModel::Qinn(m) => m.set_parameters(params),
            AnyModel::Mlp(m) => m.set_parameters(params),
        }
    }

    fn perturbation(&self, attack: &AttackSpec) -> Result<AnyPerturbation> {
        Ok(match self {
            AnyModel::Qinn(m) => AnyPerturbation::Qinn(m.perturbation(attack)?),
            AnyModel::Mlp(m) => AnyPerturbation::Mlp(m.perturbation(attack)?),
        })
    }

    fn attacked_parameters(&self, attack: &AttackSpec) -> Result<Vec<usize>> {
        match self {
            AnyModel::Qinn(m) => m.attacked_parameters(attack),
            AnyModel::Mlp(m) => m.attacked_parameters(attack),
        }
    }

    fn probabilities(&self, x: &[f64], pert: &AnyPerturbation) -> Result<Vec<f64>> {
        match self {
            AnyModel::Qinn(m) => m.probabilities(x, &*self.qinn_pert(pert)?),
            AnyModel::Mlp(m) => m.probabilities(x, &*self.mlp_pert(pert)?),
        }
    }

    fn loss_and_gradient(&self, x: &[f64], label: usize, pert: &AnyPerturbation) -> Result<(f64, Vec<f64>)> {
        match self {
            AnyModel::Qinn(m) => m.loss_and_gradient(x, label, &*self.qinn_pert(pert)?),
            AnyModel::Mlp(m) => m.loss_and_gradient(x, label, &*self.mlp_pert(pert)?),
        }
    }
}

/// A model bound to a frozen attack: every forward pass is perturbed.
pub struct AttackedForward<'a, M: Classifier> {
    model: &'a M,
    perturbation: M::Perturbation,
}

impl<M: Classifier> AttackedForward<'_, M> {
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.probabilities(x, &self.perturbation)
    }

    pub fn loss_and_gradient(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.model.loss_and_gradient(x, label, &self.perturbation)
    }

    pub fn perturbation(&self) -> &M::Perturbation {
        &self.perturbation
    }
}

pub fn attack_forward_hook<'a, M: Classifier>(model: &'a M, attack: &AttackSpec) -> Result<AttackedForward<'a, M>> {
    Ok(AttackedForward {
        model,
        perturbation: model.perturbation(attack)?,
    })
}
