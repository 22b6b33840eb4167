//! Experiment runner: loads data, builds the selected trainer, evaluates on
//! the validation set at fixed points, and emits metrics.
//!
//! CSV schema (stable): the resolved configuration as `# key = value` comment
//! lines, then the header `iter,participant,train_loss,val_loss,val_acc,ms`
//! and one row per evaluation point and reporting participant. `iter` counts
//! completed updates, so `0` is the initial model. `val_acc` is `NaN` for
//! regression. Sweeps prepend a `sweep` column holding the axis value.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

pub use config::{DatasetKind, DeltaSpec, Mode, RunConfig, TopologyKind, TransportKind};

use crate::baselines::{centralized_train, fedsgd_train, local_train, FedOptions};
use crate::data::{apply_partition, load_mnist_dir, synthetic_linreg, Dataset, GridShards, PartitionPlan};
use crate::engine::{InitPolicy, RateSchedule};
use crate::error::{Error, Result};
use crate::fnn::{run_fnn_cgd, FnnOptions, FnnSpec, Grid, GridId, GridModels};
use crate::linalg::{forward_fc, loss_value, Activation, Architecture, LossKind, Matrix};
use crate::ring::{FixedPointCodec, ParticipantId};
use crate::rng::{global_stream, Purpose};
use crate::transport::{EndpointMap, LocalBus, SumMode, SumTransport, TcpSession, Topology};

pub const CSV_HEADER: &str = "iter,participant,train_loss,val_loss,val_acc,ms";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iter: u32,
    /// `(i,j)`, `central`, or `shared`.
    pub participant: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub ms: u64,
}

impl MetricsRecord {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.participant, self.train_loss, self.val_loss, self.val_acc, self.ms
        )
    }
}

/// Final report of one run: the worst participant at the last evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: &'static str,
    pub grid: String,
    pub iters: u32,
    pub seed: u64,
    pub participant: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub ms: u64,
    pub clipped: u64,
}

impl RunSummary {
    pub fn json(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn csv(&self) -> String {
        let mut out = String::new();
        for line in self.config.render().lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "{CSV_HEADER}");
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv());
        }
        out
    }
}

/// Training and validation data for a config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let (train, test) = load_mnist_dir(&cfg.mnist_dir)?;
            if train.n() < cfg.n_train || test.n() < cfg.n_val {
                return Err(Error::arg(format!(
                    "{} holds {}/{} samples, {}/{} requested",
                    cfg.mnist_dir.display(),
                    train.n(),
                    test.n(),
                    cfg.n_train,
                    cfg.n_val
                )));
            }
            Ok((train.head(cfg.n_train), test.head(cfg.n_val)))
        }
        DatasetKind::Synth => {
            let task = synthetic_linreg(cfg.n_train + cfg.n_val, cfg.synth_d, cfg.synth_noise, cfg.seed)?;
            let split = |r: std::ops::Range<usize>, name: &str| {
                Dataset::new(name, task.data.x.row_range(r.clone()), task.data.y.row_range(r))
            };
            let n = cfg.n_train + cfg.n_val;
            Ok((split(0..cfg.n_train, "synth-train")?, split(cfg.n_train..n, "synth-val")?))
        }
    }
}

pub fn architecture(cfg: &RunConfig) -> Result<Architecture> {
    let hidden = vec![Activation::Relu; cfg.hidden.len()];
    let last = match cfg.loss {
        LossKind::CrossEntropySoftmax => Activation::Softmax,
        LossKind::MeanSquaredError => Activation::Identity,
    };
    let acts = hidden.into_iter().chain([last]).collect();
    Architecture::new(acts, cfg.loss, cfg.l2)
}

/// Per-participant initialization scale.
pub fn resolve_deltas(cfg: &RunConfig, grid: Grid) -> BTreeMap<GridId, f64> {
    let ids = grid.ids();
    match &cfg.delta {
        DeltaSpec::Scalar(d) => ids.into_iter().map(|g| (g, *d)).collect(),
        DeltaSpec::PerParticipant(v) => ids.into_iter().zip(v.iter().copied()).collect(),
        DeltaSpec::UniformRandom { lo, hi } => {
            let mut rng = global_stream(cfg.seed, Purpose::Delta, 0);
            ids.into_iter()
                .map(|g| (g, if lo == hi { *lo } else { rng.random_range(*lo..*hi) }))
                .collect()
        }
    }
}

fn open_session(cfg: &RunConfig, parties: &[ParticipantId]) -> Result<Box<dyn SumTransport>> {
    let topology = match cfg.topology {
        TopologyKind::AllToAll => Topology::AllToAll,
        TopologyKind::Aggregator => Topology::Aggregator(ParticipantId(parties.len() as u16)),
    };
    match cfg.transport {
        TransportKind::Local => Ok(Box::new(LocalBus::new(cfg.seed).with_topology(topology))),
        TransportKind::Tcp => match &cfg.endpoints {
            Some(path) => Ok(Box::new(TcpSession::from_endpoints(
                EndpointMap::from_file(path)?,
                topology,
                cfg.seed,
            )?)),
            None => Ok(Box::new(TcpSession::launch(parties, topology, cfg.seed)?)),
        },
    }
}

/// Validation loss and accuracy (accuracy only for classifiers).
pub fn evaluate(pred: &Matrix, y: &Matrix, loss: LossKind) -> Result<(f64, f64)> {
    let l = loss_value(pred, y, loss)?;
    let acc = match loss {
        LossKind::CrossEntropySoftmax => {
            let hits = pred
                .argmax_rows()
                .iter()
                .zip(y.argmax_rows())
                .filter(|(a, b)| **a == *b)
                .count();
            hits as f64 / pred.rows() as f64
        }
        LossKind::MeanSquaredError => f64::NAN,
    };
    Ok((l, acc))
}

struct Clock {
    start: Instant,
    on: bool,
}

impl Clock {
    fn ms(&self) -> u64 {
        if self.on {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

fn is_eval_point(k: u32, every: u32) -> bool {
    (k - 1) % every == 0
}

fn schedule(cfg: &RunConfig) -> Result<RateSchedule> {
    RateSchedule::from_params(cfg.alpha, cfg.mu, cfg.iters)
}

/// Executes one configured run.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, val) = load_data(cfg)?;
    run_on(cfg, &train, &val)
}

/// Executes one configured run on already loaded data.
pub fn run_on(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    if train.d() != val.d() || train.y.cols() != val.y.cols() {
        return Err(Error::shape(
            "validation set",
            format!("{}x{}", train.d(), train.y.cols()),
            format!("{}x{}", val.d(), val.y.cols()),
        ));
    }
    let clock = Clock {
        start: Instant::now(),
        on: cfg.timing,
    };
    let arch = architecture(cfg)?;
    let grid = Grid::new(cfg.grid.0, cfg.grid.1)?;
    let plan = PartitionPlan::contiguous(train.n(), train.d(), grid.mh, grid.mv)?;
    let shards = apply_partition(train, &plan)?;
    let codec = FixedPointCodec::new(cfg.frac_bits, cfg.clip)?;
    let sched = schedule(cfg)?;
    let deltas = resolve_deltas(cfg, grid);
    let spec = FnnSpec::new(arch.clone(), cfg.hidden.clone(), train.y.cols(), cfg.forward)?;
    let widths: Vec<usize> = plan.feature_ranges.iter().map(|r| r.len()).collect();
    let models = GridModels::init(grid, &spec, &widths, &deltas, cfg.seed)?;
    let parties: Vec<ParticipantId> = grid.ids().into_iter().map(|g| grid.pid(g)).collect();
    let mut records = Vec::new();
    let mut clipped = 0;
    match cfg.mode {
        Mode::Cgd => {
            let mut session = open_session(cfg, &parties)?;
            let opts = FnnOptions {
                schedule: sched,
                iters: cfg.iters,
                codec,
            };
            let mut emit = |iter: u32, m: &GridModels, train_losses: &BTreeMap<GridId, f64>| -> Result<()> {
                let preds = m.predict_all(&val.x, &plan.feature_ranges, &spec)?;
                for (id, pass) in preds {
                    let (vl, va) = evaluate(pass.prediction(), &val.y, arch.loss())?;
                    records.push(MetricsRecord {
                        iter,
                        participant: id.to_string(),
                        train_loss: train_losses[&id],
                        val_loss: vl,
                        val_acc: va,
                        ms: clock.ms(),
                    });
                }
                Ok(())
            };
            let out = run_fnn_cgd(models, &shards, &spec, &opts, session.as_mut(), &mut |k, m, tl| {
                if is_eval_point(k, cfg.eval_every) {
                    emit(k - 1, m, tl)?;
                }
                Ok(None)
            })?;
            let tl = out.models.shard_losses(&shards, &spec)?;
            emit(cfg.iters, &out.models, &tl)?;
            clipped = out.clipped;
        }
        Mode::Centralized => {
            // the same draw participant (1,1) would make over all features
            let full_init = InitPolicy::new(deltas[&GridId::new(1, 1)], cfg.seed)?
                .init(ParticipantId(0), &spec.shapes(train.d()))
                .layers()
                .to_vec();
            let mut emit = |iter: u32, w: &[Matrix], tl: f64| -> Result<()> {
                let pass = forward_fc(&val.x, w, arch.activations())?;
                let (vl, va) = evaluate(pass.prediction(), &val.y, arch.loss())?;
                records.push(MetricsRecord {
                    iter,
                    participant: "central".into(),
                    train_loss: tl,
                    val_loss: vl,
                    val_acc: va,
                    ms: clock.ms(),
                });
                Ok(())
            };
            let out = centralized_train(&train.x, &train.y, full_init, &arch, &sched, cfg.iters, &mut |k, w, tl| {
                if is_eval_point(k, cfg.eval_every) {
                    emit(k - 1, w, tl)?;
                }
                Ok(None)
            })?;
            let pass = forward_fc(&train.x, &out.layers, arch.activations())?;
            let tl = loss_value(pass.prediction(), &train.y, arch.loss())?;
            emit(cfg.iters, &out.layers, tl)?;
        }
        Mode::Local => {
            let init: BTreeMap<GridId, Vec<Matrix>> =
                models.models.iter().map(|(g, m)| (*g, m.layers().to_vec())).collect();
            let val_slices: Vec<Matrix> = plan.feature_ranges.iter().map(|r| val.x.col_range(r.clone())).collect();
            let mut emit = |id: GridId, iter: u32, w: &[Matrix], tl: f64| -> Result<()> {
                let pass = forward_fc(&val_slices[usize::from(id.j) - 1], w, arch.activations())?;
                let (vl, va) = evaluate(pass.prediction(), &val.y, arch.loss())?;
                records.push(MetricsRecord {
                    iter,
                    participant: id.to_string(),
                    train_loss: tl,
                    val_loss: vl,
                    val_acc: va,
                    ms: clock.ms(),
                });
                Ok(())
            };
            let out = local_train(&shards, &init, &arch, &sched, cfg.iters, &mut |id, k, w, tl| {
                if is_eval_point(k, cfg.eval_every) {
                    emit(id, k - 1, w, tl)?;
                }
                Ok(None)
            })?;
            for (id, o) in &out {
                let s = shards.get(*id);
                let pass = forward_fc(&s.x, &o.layers, arch.activations())?;
                let tl = loss_value(pass.prediction(), &s.y, arch.loss())?;
                emit(*id, cfg.iters, &o.layers, tl)?;
            }
            // participants train one after another; present rows by iteration
            let order: BTreeMap<String, usize> = grid.ids().iter().enumerate().map(|(n, g)| (g.to_string(), n)).collect();
            records.sort_by_key(|r| (r.iter, order[&r.participant]));
        }
        Mode::FedsgdPlain | Mode::FedsgdSecure => {
            let mut session = open_session(cfg, &parties)?;
            let opts = FedOptions {
                schedule: sched,
                iters: cfg.iters,
                codec,
                mode: if cfg.mode == Mode::FedsgdPlain {
                    SumMode::Plain
                } else {
                    SumMode::Secure
                },
                batch: cfg.batch,
                seed: cfg.seed,
            };
            let init = models.get(GridId::new(1, 1)).layers().to_vec();
            let n = train.n() as f64;
            let mut emit = |iter: u32, w: &[Matrix], tl: f64| -> Result<()> {
                let pass = forward_fc(&val.x, w, arch.activations())?;
                let (vl, va) = evaluate(pass.prediction(), &val.y, arch.loss())?;
                records.push(MetricsRecord {
                    iter,
                    participant: "shared".into(),
                    train_loss: tl,
                    val_loss: vl,
                    val_acc: va,
                    ms: clock.ms(),
                });
                Ok(())
            };
            let weighted = |losses: &BTreeMap<GridId, f64>, shards: &GridShards| {
                losses
                    .iter()
                    .map(|(g, l)| l * shards.get(*g).x.rows() as f64)
                    .sum::<f64>()
                    / n
            };
            let out = fedsgd_train(&shards, init, &arch, &opts, session.as_mut(), &mut |k, m, losses| {
                if is_eval_point(k, cfg.eval_every) {
                    emit(k - 1, &m.layers, weighted(losses, &shards))?;
                }
                Ok(None)
            })?;
            let pass = forward_fc(&train.x, &out.model.layers, arch.activations())?;
            let tl = loss_value(pass.prediction(), &train.y, arch.loss())?;
            emit(cfg.iters, &out.model.layers, tl)?;
            clipped = out.clipped;
        }
    }
    let summary = summarize(cfg, &records, clipped)?;
    Ok(RunReport {
        config: cfg.clone(),
        records,
        summary,
    })
}

/// The worst (highest validation loss) participant at the final iteration.
fn summarize(cfg: &RunConfig, records: &[MetricsRecord], clipped: u64) -> Result<RunSummary> {
    let worst = records
        .iter()
        .filter(|r| r.iter == cfg.iters)
        .max_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .ok_or_else(|| Error::arg("run produced no final metrics"))?;
    Ok(RunSummary {
        mode: cfg.mode.as_str(),
        grid: format!("{}x{}", cfg.grid.0, cfg.grid.1),
        iters: cfg.iters,
        seed: cfg.seed,
        participant: worst.participant.clone(),
        train_loss: worst.train_loss,
        val_loss: worst.val_loss,
        val_acc: worst.val_acc,
        ms: worst.ms,
        clipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Delta,
    Mu,
    Grid,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::Mu => "mu",
            SweepAxis::Grid => "grid",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepAxis::Delta),
            "mu" => Ok(SweepAxis::Mu),
            "grid" => Ok(SweepAxis::Grid),
            _ => Err(Error::arg(format!("unknown sweep axis {s:?} (delta|mu|grid)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Combined CSV; empty when there were no values.
    pub csv: String,
    /// One entry per value, in order: the summary or the failure message.
    pub runs: Vec<(String, std::result::Result<RunSummary, String>)>,
}

/// One run per axis value with the base seed; failures are recorded and the
/// sweep continues.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> SweepReport {
    let mut csv = String::new();
    let mut runs = Vec::new();
    if values.is_empty() {
        return SweepReport { csv, runs };
    }
    for line in base.render().lines() {
        let _ = writeln!(csv, "# {line}");
    }
    let _ = writeln!(csv, "# sweep axis = {}", axis.key());
    let _ = writeln!(csv, "sweep,{CSV_HEADER}");
    let mut data: Option<(Dataset, Dataset)> = None;
    for value in values {
        let mut cfg = base.clone();
        let outcome = cfg
            .apply([(axis.key(), value.as_str())])
            .and_then(|_| cfg.validate())
            .and_then(|_| {
                if data.is_none() {
                    data = Some(load_data(&cfg)?);
                }
                let (train, val) = data.as_ref().expect("loaded above");
                run_on(&cfg, train, val)
            });
        match outcome {
            Ok(report) => {
                for r in &report.records {
                    let _ = writeln!(csv, "{value},{}", r.csv());
                }
                runs.push((value.clone(), Ok(report.summary)));
            }
            Err(e) => {
                let msg = e.to_string().replace('\n', " ");
                let _ = writeln!(csv, "# sweep value {value} failed: {msg}");
                runs.push((value.clone(), Err(msg)));
            }
        }
    }
    SweepReport { csv, runs }
}
