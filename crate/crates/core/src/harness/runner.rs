//! The round loop: dispatch, local training, aggregation, evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::config::{ExperimentConfig, Mode};
use super::metrics::{metrics_csv, server_csv, steps_csv, RoundRecord, StepRow};
use super::overhead::{model_bytes, offset_bytes};
use crate::client::{ClientState, StepKind};
use crate::datagen::{
    class_embedding, distributional_heterogeneity, make_blobs, partition, train_test_split,
    LabeledDataset, Partition,
};
use crate::derive_seed;
use crate::dualnet::{combine, forward, Alpha, Architecture, ModelParams, Offset};
use crate::error::{Error, Result};
use crate::exec::{Executor, Parallelism};
use crate::server::{ServerState, Strategy};
use crate::tensor::Tensor;

const SEED_DATA: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_PARTITION: u64 = 3;
const SEED_MODEL: u64 = 4;
const SEED_NEGATIVES: u64 = 5;
const SEED_CLIENT: u64 = 0x100;

/// Dataset, split and partition of a run. The partition indexes the
/// training split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub dh: f64,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let data = make_blobs(
        cfg.num_classes,
        cfg.per_class,
        cfg.dim,
        cfg.spread,
        derive_seed(cfg.seed, SEED_DATA),
    )?;
    let split = train_test_split(&data, cfg.train_fraction, derive_seed(cfg.seed, SEED_SPLIT))?;
    let train = data.subset(&split.train);
    let test = data.subset(&split.test);
    let partition = match &cfg.partition {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read partition {}: {e}", path.display()))
            })?;
            let p = Partition::from_json(&text, &train)
                .map_err(|e| Error::Config(format!("partition {}: {e}", path.display())))?;
            if p.num_clients() != cfg.num_clients {
                return Err(Error::Config(format!(
                    "partition has {} clients, config asks for {}",
                    p.num_clients(),
                    cfg.num_clients
                )));
            }
            p
        }
        None => partition(
            &train,
            cfg.num_clients,
            cfg.classes_per_client,
            derive_seed(cfg.seed, SEED_PARTITION),
        )?,
    };
    if let Some(i) = partition.assignments.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "client {i} received no training samples"
        )));
    }
    let dh = distributional_heterogeneity(&partition).map_err(|e| Error::Config(e.to_string()))?;
    Ok(PreparedData {
        train,
        test,
        partition,
        dh,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub model: ModelParams,
    /// Offsets dispatched after the last round.
    pub offsets: Vec<Offset>,
    pub partition: Partition,
    pub dh: f64,
    pub strategy: Strategy,
    pub steps: Vec<StepRow>,
}

impl ExperimentOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, RoundRecord::mean_test_acc)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let exec = Executor::new(Parallelism::from_workers(cfg.workers))?;
    run_experiment_with(cfg, &exec)
}

/// Runs the protocol on `exec` and, when `output_dir` is set, writes
/// `metrics.csv`, `server_log.csv`, `partition.json`, `config.txt`,
/// `steps.csv` (if enabled) and `checkpoint/`.
pub fn run_experiment_with(cfg: &ExperimentConfig, exec: &Executor) -> Result<ExperimentOutput> {
    let prepared = prepare_data(cfg)?;
    let out = simulate(cfg, &prepared, exec)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, cfg, &out)?;
    }
    Ok(out)
}

struct Evaluator {
    inputs: Tensor,
    labels: Vec<usize>,
    /// Rows that belong to classes the client never saw; they count as
    /// correct only when rejected.
    negatives: usize,
}

fn build_evaluators(cfg: &ExperimentConfig, data: &PreparedData) -> Vec<Evaluator> {
    let by_class = data.test.indices_by_class();
    (0..data.partition.num_clients())
        .map(|i| {
            let own = data.partition.client_classes(i);
            let pos: Vec<usize> = own
                .iter()
                .flat_map(|&c| by_class[c].iter().copied())
                .collect();
            let mut rows = pos.clone();
            let mut negatives = 0;
            if cfg.negative_eval {
                let others: Vec<usize> = (0..data.test.len())
                    .filter(|&j| !own.contains(&data.test.labels[j]))
                    .collect();
                if !others.is_empty() {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        SEED_NEGATIVES + ((i as u64) << 8),
                    ));
                    rows.extend((0..pos.len()).map(|_| others[rng.random_range(0..others.len())]));
                    negatives = pos.len();
                }
            }
            let sub = data.test.subset(&rows);
            Evaluator {
                inputs: sub.inputs,
                labels: sub.labels,
                negatives,
            }
        })
        .collect()
}

impl Evaluator {
    fn accuracy(&self, client: &ClientState, model: &ModelParams, alpha: Alpha) -> Result<f64> {
        if self.negatives == 0 {
            return client.evaluate_local(model, alpha, &self.inputs, &self.labels);
        }
        let (ch1, ch2) = combine(&self.inputs, client.offset(), alpha)?;
        let logits = forward(model, &ch1, &ch2)?;
        let k = model.num_classes();
        let positives = self.labels.len() - self.negatives;
        let correct = logits
            .data()
            .chunks(k)
            .enumerate()
            .filter(|(row, z)| {
                let rejected = softmax_max(z) < 2.0 / k as f64;
                if *row < positives {
                    !rejected && Tensor::argmax(z) == self.labels[*row]
                } else {
                    rejected
                }
            })
            .count();
        Ok(correct as f64 / self.labels.len() as f64)
    }
}

/// Largest softmax probability of one logit row.
fn softmax_max(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    1.0 / z.iter().map(|v| (v - m).exp()).sum::<f64>()
}

struct Slot {
    client: ClientState,
    eval: Evaluator,
}

fn simulate(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    exec: &Executor,
) -> Result<ExperimentOutput> {
    let alpha = Alpha::new(cfg.effective_alpha())?;
    let sgd = cfg.sgd();
    let arch = Architecture {
        input_dim: cfg.dim,
        hidden: cfg.hidden.clone(),
        dense_width: cfg.dense_width,
        num_classes: cfg.num_classes,
        channels: cfg.channels(),
    };
    let model = ModelParams::init(&arch, derive_seed(cfg.seed, SEED_MODEL))?;
    let c = data.partition.num_clients();
    let embeddings = (0..c)
        .map(|i| class_embedding(&data.partition, i))
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::new(model, embeddings, data.dh, cfg.server())?;

    let evals = build_evaluators(cfg, data);
    let mut slots = data
        .partition
        .assignments
        .iter()
        .zip(evals)
        .enumerate()
        .map(|(i, (idx, eval))| {
            let local = data.train.subset(idx);
            let client = ClientState::new(
                i,
                local.inputs,
                local.labels,
                derive_seed(cfg.seed, SEED_CLIENT + i as u64),
            )?;
            Ok(Slot { client, eval })
        })
        .collect::<Result<Vec<_>>>()?;

    let exchange_offsets = cfg.mode != Mode::Fedavg;
    let per_client_bytes = model_bytes(&server.global_model)
        + if exchange_offsets {
            offset_bytes(&server.offsets[0])
        } else {
            0
        };

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut steps = Vec::new();
    for round in 0..cfg.rounds {
        let global = &server.global_model;
        let dispatched = &server.offsets;
        let results = exec.map_mut(&mut slots, |i, slot| {
            slot.client
                .local_round(global, &dispatched[i], &sgd, cfg.epochs, alpha)
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        if cfg.log_steps {
            for (i, r) in results.iter().enumerate() {
                steps.extend(
                    r.steps
                        .iter()
                        .filter(|s| s.kind == StepKind::Model)
                        .map(|s| StepRow {
                            round,
                            client: i,
                            batch: s.batch,
                            loss: s.loss,
                        }),
                );
            }
        }
        let train_loss: Vec<f64> = results.iter().map(|r| r.mean_train_loss).collect();
        let mut models = Vec::with_capacity(c);
        let mut offsets = Vec::with_capacity(c);
        for r in results {
            models.push(r.model);
            offsets.push(r.offset);
        }
        let log = server.aggregate_round(round, &models, offsets)?;

        for (slot, o) in slots.iter_mut().zip(&server.offsets) {
            slot.client.set_offset(o.clone())?;
        }
        let global = &server.global_model;
        let test_acc = exec
            .map(&slots, |_, slot| {
                slot.eval.accuracy(&slot.client, global, alpha)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        records.push(RoundRecord {
            round,
            train_loss,
            test_acc,
            dh: data.dh,
            strategy: server.strategy(),
            bytes_up: vec![per_client_bytes; c],
            bytes_down: vec![per_client_bytes; c],
            server: log,
        });
    }

    Ok(ExperimentOutput {
        records,
        strategy: server.strategy(),
        model: server.global_model,
        offsets: server.offsets,
        partition: data.partition.clone(),
        dh: data.dh,
        steps,
    })
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), out.metrics_csv())?;
    std::fs::write(dir.join("server_log.csv"), server_csv(&out.records))?;
    std::fs::write(dir.join("partition.json"), out.partition.to_json()?)?;
    std::fs::write(dir.join("config.txt"), cfg.to_config_string())?;
    if cfg.log_steps {
        std::fs::write(dir.join("steps.csv"), steps_csv(&out.steps))?;
    }
    checkpoint::save(
        &dir.join("checkpoint"),
        &out.model,
        &out.offsets,
        Alpha::new(cfg.effective_alpha())?,
    )
}
