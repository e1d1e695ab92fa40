//! The federated round loop.
//!
//! Each round the server broadcasts `θ^t`, every client runs `E_t` epochs of
//! local (adversarial) training from it, and the server fuses the results.
//! Clients are independent within a round and may run on a worker pool;
//! fusion waits for all of them. Every random draw comes from a stream keyed
//! by `(master seed, purpose, client, round, epoch)`, so a run is a pure
//! function of its config regardless of the number of workers.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::adversary::{pgd_attack, AttackConfig};
use crate::checkpoint::{atomic_write, Checkpoint};
use crate::config::{DataSource, ExperimentConfig, FusionKind, NaturalAdvReport, PartitionKind};
use crate::data::{self, Dataset, Partition, PartitionSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::{
    add_penalty_grad, fedavg_fuse, fedcurv_fuse, fisher_diag, CurvContext, FusionPayload,
};
use crate::metrics::{read_metrics, write_summary_csv, JsonlSink, MetricsSink, RoundReport};
use crate::nn::{self, init_params, loss_and_grads, Batch, ModelSpec, ParamVector};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::schedule::{epochs_for_round, ESchedule};
use crate::seeds;
use crate::svcca::drift_report;

/// One client's fixed shard plus the state it carries between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Batch,
    pub optimizer: OptimizerState,
    /// Penalty anchors frozen for the current round.
    pub curv: CurvContext,
}

impl ClientState {
    pub fn new(id: usize, shard: Batch, param_count: usize) -> Self {
        Self {
            id,
            shard,
            optimizer: OptimizerState::new(param_count),
            curv: CurvContext::default(),
        }
    }
}

/// Shared, read-only inputs to local training in one round.
#[derive(Debug, Clone, Copy)]
pub struct LocalJob<'a> {
    pub spec: &'a ModelSpec,
    /// `None` trains on clean batches.
    pub attack: Option<&'a AttackConfig>,
    pub optimizer: &'a OptimizerConfig,
    pub master_seed: u64,
    pub round: u64,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamVector,
    /// Mean minibatch training loss; 0 when no batch was processed.
    pub mean_loss: f64,
    pub batches: usize,
}

/// Runs `epochs` passes over the client's shard starting from `global`.
///
/// Per minibatch: build the adversarial batch at the current local
/// parameters, take the loss gradient on it, add the curvature penalty
/// gradient, and step the optimizer.
pub fn local_adversarial_train(
    client: &mut ClientState,
    global: &ParamVector,
    epochs: u32,
    job: &LocalJob<'_>,
) -> Result<LocalOutcome> {
    local_train_inner(client, global, epochs, job).map_err(|e| e.for_client(client.id))
}

fn local_train_inner(
    client: &mut ClientState,
    global: &ParamVector,
    epochs: u32,
    job: &LocalJob<'_>,
) -> Result<LocalOutcome> {
    let mut params = global.clone();
    if job.optimizer.reset_each_round {
        client.optimizer.reset();
    }
    let n = client.shard.len();
    if n == 0 {
        return Err(Error::Empty("client shard".into()));
    }
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for epoch in 0..epochs {
        let mut rng = seeds::rng(
            job.master_seed,
            &[seeds::TRAIN, client.id as u64, job.round, u64::from(epoch)],
        );
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(job.optimizer.batch_size) {
            let clean = client.shard.select(chunk);
            let batch = match job.attack {
                Some(attack) => pgd_attack(&params, job.spec, &clean, attack, &mut rng)?,
                None => clean,
            };
            let (loss, grads) = loss_and_grads(&params, job.spec, &batch)?;
            let mut grad = grads.param_grad;
            add_penalty_grad(&mut grad, &params, &client.curv)?;
            optim::step(&mut params, &grad, job.optimizer, &mut client.optimizer)?;
            loss_sum += loss;
            batches += 1;
        }
    }
    Ok(LocalOutcome {
        params,
        mean_loss: if batches == 0 {
            0.0
        } else {
            loss_sum / batches as f64
        },
        batches,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub nat_acc: f64,
    pub nat_loss: f64,
    pub adv_acc: Option<f64>,
    pub adv_loss: Option<f64>,
}

fn accuracy(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<f64> {
    let pred = nn::predict(params, spec, &batch.inputs)?;
    let hits = pred
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Natural accuracy, plus accuracy on PGD inputs when `attack` is given.
pub fn evaluate<R: Rng + ?Sized>(
    params: &ParamVector,
    spec: &ModelSpec,
    testset: &Batch,
    attack: Option<&AttackConfig>,
    rng: &mut R,
) -> Result<Evaluation> {
    if testset.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let nat_acc = accuracy(params, spec, testset)?;
    let nat_loss = nn::mean_loss(params, spec, testset)?;
    let (adv_acc, adv_loss) = match attack {
        Some(a) => {
            let adv = pgd_attack(params, spec, testset, a, rng)?;
            (
                Some(accuracy(params, spec, &adv)?),
                Some(nn::mean_loss(params, spec, &adv)?),
            )
        }
        None => (None, None),
    };
    Ok(Evaluation {
        nat_acc,
        nat_loss,
        adv_acc,
        adv_loss,
    })
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub params: ParamVector,
    pub report: RoundReport,
    /// Client parameters after local training, before fusion.
    pub client_params: Vec<ParamVector>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub final_params: ParamVector,
    pub client_params: Vec<ParamVector>,
}

/// A fully materialized experiment: data, shards and model spec.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub schedule: ESchedule,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let master = config.run.seed;
        let d = &config.data;
        let (train, test) = match d.source {
            DataSource::Synthetic => {
                let base = SyntheticSpec {
                    class_count: d.class_count,
                    per_class: d.per_class,
                    input_dim: d.input_dim,
                    separation: d.separation,
                    noise: d.noise,
                    seed: 0,
                };
                let data_seed = d.seed.unwrap_or(master);
                let train = data::make_synthetic(&SyntheticSpec {
                    seed: seeds::derive(data_seed, &[seeds::DATA_TRAIN]),
                    ..base.clone()
                })?;
                let test = data::make_synthetic(&SyntheticSpec {
                    per_class: d.test_per_class,
                    seed: seeds::derive(data_seed, &[seeds::DATA_TEST]),
                    ..base
                })?;
                (train, test)
            }
            DataSource::Csv => {
                let train_path = d.train_csv.as_deref().expect("validated");
                let test_path = d.test_csv.as_deref().expect("validated");
                let train = data::load_csv(train_path, d.rescale)?;
                let test = data::load_csv(test_path, d.rescale)?;
                if test.input_dim() != train.input_dim() || test.class_count() > train.class_count()
                {
                    return Err(Error::InvalidConfig(vec![format!(
                        "test csv has {} features / {} classes, train csv has {} / {}",
                        test.input_dim(),
                        test.class_count(),
                        train.input_dim(),
                        train.class_count()
                    )]));
                }
                (train, test)
            }
        };

        let p = &config.partition;
        let partition_seed = seeds::derive(master, &[seeds::PARTITION]);
        let partition = match p.kind {
            PartitionKind::Iid => data::partition_iid(&train, p.clients, partition_seed)?,
            PartitionKind::NonIid => data::partition_non_iid(
                &train,
                &PartitionSpec {
                    clients: p.clients,
                    skew: p.skew,
                    seed: partition_seed,
                },
            )?,
        };
        if let Some(k) = partition.shards.iter().position(Vec::is_empty) {
            return Err(Error::InvalidPartition(format!(
                "client {k} received no samples"
            )));
        }

        let mut sizes = vec![train.input_dim()];
        sizes.extend(&config.model.hidden);
        sizes.push(train.class_count());
        let spec = ModelSpec::new(
            sizes,
            config.model.activation,
            config
                .model
                .seed
                .unwrap_or_else(|| seeds::derive(master, &[seeds::MODEL_INIT])),
        )?;
        let schedule = config.schedule()?;
        Ok(Self {
            config,
            spec,
            schedule,
            train,
            test,
            partition,
        })
    }

    pub fn initial_params(&self) -> Result<ParamVector> {
        init_params(&self.spec)
    }

    pub fn clients(&self) -> Vec<ClientState> {
        self.partition
            .shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                ClientState::new(k, self.train.select(shard), self.spec.param_count())
            })
            .collect()
    }

    fn training_attack(&self) -> Option<&AttackConfig> {
        (!self.config.run.natural_training).then_some(&self.config.attack)
    }

    fn should_evaluate(&self, t: u64) -> bool {
        let every = self.config.run.eval_every;
        t + 1 == self.config.run.rounds || (every > 0 && (t + 1).is_multiple_of(every))
    }

    fn should_probe(&self, t: u64) -> bool {
        let every = self.config.run.svcca_every;
        every > 0 && (t + 1).is_multiple_of(every)
    }

    /// Empirical Fisher on the client's training distribution: adversarial
    /// examples at the final local parameters, or clean data for natural runs.
    fn client_fisher(
        &self,
        client: &ClientState,
        params: &ParamVector,
        t: u64,
    ) -> Result<Vec<f64>> {
        let shard = match self.training_attack() {
            Some(attack) => {
                let mut rng =
                    seeds::rng(self.config.run.seed, &[seeds::FISHER, client.id as u64, t]);
                pgd_attack(params, &self.spec, &client.shard, attack, &mut rng)?
            }
            None => client.shard.clone(),
        };
        fisher_diag(params, &self.spec, &shard)
    }

    /// One round: local training on every client from `global`, then fusion.
    /// Clients run on `pool` when given, sequentially otherwise.
    pub fn run_round(
        &self,
        t: u64,
        global: &ParamVector,
        clients: &mut [ClientState],
        pool: Option<&ThreadPool>,
    ) -> Result<RoundOutcome> {
        let start = Instant::now();
        let e_t = epochs_for_round(t, &self.schedule);
        let job = LocalJob {
            spec: &self.spec,
            attack: self.training_attack(),
            optimizer: &self.config.optimizer,
            master_seed: self.config.run.seed,
            round: t,
        };
        let fedcurv = self.config.fusion.kind == FusionKind::Fedcurv;
        let train_one = |client: &mut ClientState| -> Result<(LocalOutcome, Option<Vec<f64>>)> {
            let out = local_adversarial_train(client, global, e_t, &job)?;
            let fisher = if fedcurv {
                Some(
                    self.client_fisher(client, &out.params, t)
                        .map_err(|e| e.for_client(client.id))?,
                )
            } else {
                None
            };
            Ok((out, fisher))
        };
        let results: Vec<Result<_>> = match pool {
            Some(pool) => pool.install(|| clients.par_iter_mut().map(train_one).collect()),
            None => clients.iter_mut().map(train_one).collect(),
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let payloads: Vec<FusionPayload> = results
            .iter()
            .zip(clients.iter())
            .map(|((out, fisher), c)| FusionPayload {
                params: out.params.clone(),
                shard_size: c.shard.len(),
                fisher: fisher.clone(),
            })
            .collect();
        let params = if fedcurv {
            let (fused, broadcast) = fedcurv_fuse(&payloads)?;
            for c in clients.iter_mut() {
                c.curv = CurvContext::for_client(self.config.fusion.lambda, &broadcast, c.id);
            }
            fused
        } else {
            fedavg_fuse(&payloads)?
        };

        let client_losses: Vec<f64> = results.iter().map(|(o, _)| o.mean_loss).collect();
        let client_params: Vec<ParamVector> = payloads.into_iter().map(|p| p.params).collect();

        let (nat_acc, adv_acc) = if self.should_evaluate(t) {
            let natural = self.config.run.natural_training;
            let attack = match (natural, self.config.run.natural_adv_accuracy) {
                (false, _) | (true, NaturalAdvReport::Measured) => Some(self.config.eval_attack()),
                _ => None,
            };
            let mut rng = seeds::rng(self.config.run.seed, &[seeds::EVAL, t]);
            let ev = evaluate(&params, &self.spec, self.test.as_batch(), attack, &mut rng)?;
            let adv = match (natural, self.config.run.natural_adv_accuracy) {
                (true, NaturalAdvReport::Zero) => Some(0.0),
                _ => ev.adv_acc,
            };
            (Some(ev.nat_acc), adv)
        } else {
            (None, None)
        };

        let svcca = if self.should_probe(t) && client_params.len() >= 2 {
            let layers: Vec<usize> = if self.config.run.svcca_layers.is_empty() {
                (0..self.spec.num_layers()).collect()
            } else {
                self.config.run.svcca_layers.clone()
            };
            let probe = self.probe_inputs();
            let drift = drift_report(
                &client_params,
                &self.spec,
                &probe,
                &layers,
                self.config.run.variance_keep,
            )?;
            layers.into_iter().zip(drift.mean).collect()
        } else {
            Vec::new()
        };

        let report = RoundReport {
            round: t,
            e_t,
            nat_acc,
            adv_acc,
            mean_loss: client_losses.iter().sum::<f64>() / client_losses.len() as f64,
            client_losses,
            svcca,
            wall_time: start.elapsed(),
        };
        Ok(RoundOutcome {
            params,
            report,
            client_params,
        })
    }

    /// Test inputs used to probe layer activations.
    pub fn probe_inputs(&self) -> crate::matrix::Matrix {
        let n = match self.config.run.svcca_probe {
            0 => self.test.len(),
            k => k.min(self.test.len()),
        };
        let idx: Vec<usize> = (0..n).collect();
        self.test.inputs().select_rows(&idx)
    }

    /// Runs every round, handing each outcome to `on_round` before the next.
    pub fn run_with<F>(
        &self,
        workers: usize,
        sink: &mut dyn MetricsSink,
        mut on_round: F,
    ) -> Result<RunOutcome>
    where
        F: FnMut(&RoundOutcome) -> Result<()>,
    {
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        let mut clients = self.clients();
        let mut global = self.initial_params()?;
        let mut reports = Vec::with_capacity(self.config.run.rounds as usize);
        let mut last_clients = Vec::new();
        for t in 0..self.config.run.rounds {
            let outcome = self.run_round(t, &global, &mut clients, pool.as_ref())?;
            sink.record(&outcome.report)?;
            on_round(&outcome)?;
            reports.push(outcome.report);
            global = outcome.params;
            last_clients = outcome.client_params;
        }
        Ok(RunOutcome {
            reports,
            final_params: global,
            client_params: last_clients,
        })
    }

    pub fn run(&self, workers: usize, sink: &mut dyn MetricsSink) -> Result<RunOutcome> {
        self.run_with(workers, sink, |_| Ok(()))
    }
}

/// Files written by [`run_experiment`] inside the output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Runs `config`, writing the metrics stream, summary CSV, resolved config
/// and final checkpoint (plus per-round checkpoints when configured) to
/// `out_dir`.
pub fn run_experiment(
    config: ExperimentConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<RunOutcome> {
    let experiment = Experiment::new(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(
        &out_dir.join(RESOLVED_CONFIG),
        experiment.config.to_toml_string().as_bytes(),
    )?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut sink = JsonlSink::create(&metrics_path)?;
    let every = experiment.config.run.checkpoint_every;
    let spec = experiment.spec.clone();
    let outcome = experiment.run_with(workers, &mut sink, |round| {
        if every > 0 && (round.report.round + 1).is_multiple_of(every) {
            let path = out_dir
                .join("checkpoints")
                .join(format!("round_{:04}.ckpt", round.report.round));
            Checkpoint::params(spec.clone(), round.params.clone()).write(&path)?;
        }
        Ok(())
    })?;
    sink.finish()?;
    write_summary_csv(&out_dir.join(SUMMARY_FILE), &read_metrics(&metrics_path)?)?;
    Checkpoint::params(experiment.spec.clone(), outcome.final_params.clone())
        .write(&out_dir.join(FINAL_CHECKPOINT))?;
    Ok(outcome)
}
