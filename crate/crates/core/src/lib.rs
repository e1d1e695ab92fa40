//! Deterministic simulator for federated adversarial training.
//!
//! Clients hold non-iid shards of a labelled dataset, run PGD adversarial
//! training locally for a scheduled number of epochs, and a server fuses
//! their models with FedAvg or FedCurv. Runs are reproducible bit for bit
//! from a master seed, independent of the worker count.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod interpolation;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod schedule;
pub mod seeds;
pub mod svcca;

pub use adversary::{pgd_attack, AttackConfig};
pub use checkpoint::{ArrayKind, Checkpoint};
pub use config::ExperimentConfig;
pub use data::{partition_iid, partition_non_iid, Dataset, Partition, PartitionSpec};
pub use error::{Error, Result};
pub use fusion::{curv_penalty, fedavg_fuse, fedcurv_fuse, FusionPayload};
pub use interpolation::{default_grid, interpolate_models, loss_sweep};
pub use matrix::Matrix;
pub use metrics::{MetricsSink, RoundReport};
pub use nn::{Activation, Batch, ModelSpec, ParamVector};
pub use orchestrator::{evaluate, local_adversarial_train, run_experiment, Experiment};
pub use schedule::{epochs_for_round, ESchedule};
pub use svcca::{svcca_score, ActivationMatrix};
