//! Quantum-inspired feedforward networks built from planar rotation
//! circuits, with residual and dense skip connections, an MLP baseline,
//! parameter-noise attacks and classification metrics.

pub mod checkpoint;
pub mod circuit;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod networks;
pub mod noise;
pub mod rng;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use circuit::{apply_gate, gate_count, gate_index_sequence, vlayer_backward, vlayer_forward, GateShift, PlanarGate, StateVector, VLayerParams};
pub use data::{load_idx, load_iris_csv, stratified_split, Dataset, Split};
pub use error::{Error, Result};
pub use experiment::{load_data, plan_seed, run_model, ExperimentConfig, ModelChoice};
pub use metrics::{basic_metrics, window_stats_from_counts, BasicMetrics, ConfusionCounts, WindowStats};
pub use model::{attack_forward_hook, AnyModel, Classifier};
pub use networks::{encode, skip_edges, Activation, ConnectionMode, MlpModel, QinnModel};
pub use noise::{AttackForm, AttackSpec, AttackTarget, CorruptionManifest, NoiseFamily, NoiseSpec, Symmetry};
pub use training::{evaluate, train, OptimizerKind, RunRecord, TrainConfig};
