//! Reference trainers: centralized batch gradient descent, local-only
//! training, and federated SGD over one shared model (plain or securely
//! aggregated).

use std::collections::BTreeMap;

use rand::seq::index;

use crate::data::{GridId, GridShards};
use crate::engine::{decode_layer, encode_layer, RateSchedule, RegretTrace};
use crate::error::{Error, ProtocolError, Result};
use crate::linalg::{backward, forward_fc, local_gradient, loss_value, Architecture, Matrix};
use crate::ring::{FixedPointCodec, ParticipantId};
use crate::rng::{substream, Purpose};
use crate::transport::{LocalNote, SumInstance, SumMode, SumTransport};

/// Called with `k`, the weights `w_k`, and the training loss at `w_k`
/// before the `k`-th update; a returned value is appended to the trace.
pub type GdMonitor<'a> = dyn FnMut(u32, &[Matrix], f64) -> Result<Option<f64>> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct GdOutcome {
    pub layers: Vec<Matrix>,
    pub trace: RegretTrace,
}

/// Full-batch gradient descent `w ← w − α_k ∇F(w)` on `(x, y)`.
pub fn centralized_train(
    x: &Matrix,
    y: &Matrix,
    init: Vec<Matrix>,
    arch: &Architecture,
    schedule: &RateSchedule,
    iters: u32,
    monitor: &mut GdMonitor<'_>,
) -> Result<GdOutcome> {
    if iters == 0 {
        return Err(Error::arg("training needs T >= 1 iterations"));
    }
    let mut layers = init;
    let mut trace = RegretTrace::default();
    for k in 1..=iters {
        let pass = forward_fc(x, &layers, arch.activations())?;
        let loss = loss_value(pass.prediction(), y, arch.loss())?;
        if let Some(v) = monitor(k, &layers, loss)? {
            trace.push(k, v);
        }
        let grads = backward(x, &layers, &pass, y, arch)?;
        let alpha_k = schedule.rate_at(k)?;
        for (w, g) in layers.iter_mut().zip(&grads) {
            w.axpy(-alpha_k, g)?;
        }
    }
    Ok(GdOutcome { layers, trace })
}

/// Independent gradient descent on every shard, without any exchange.
pub fn local_train(
    shards: &GridShards,
    init: &BTreeMap<GridId, Vec<Matrix>>,
    arch: &Architecture,
    schedule: &RateSchedule,
    iters: u32,
    monitor: &mut dyn FnMut(GridId, u32, &[Matrix], f64) -> Result<Option<f64>>,
) -> Result<BTreeMap<GridId, GdOutcome>> {
    let mut out = BTreeMap::new();
    for (&id, shard) in &shards.shards {
        let w0 = init
            .get(&id)
            .ok_or_else(|| Error::arg(format!("no initial model for {id}")))?
            .clone();
        let trained = centralized_train(&shard.x, &shard.y, w0, arch, schedule, iters, &mut |k, w, l| {
            monitor(id, k, w, l)
        })?;
        out.insert(id, trained);
    }
    Ok(out)
}

/// The single model every federated participant reads and updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGlobalModel {
    pub layers: Vec<Matrix>,
}

impl SharedGlobalModel {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.data().iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FedOptions {
    pub schedule: RateSchedule,
    pub iters: u32,
    pub codec: FixedPointCodec,
    /// `Plain` sends every gradient in clear, `Secure` only reveals the sum.
    pub mode: SumMode,
    /// Rows sampled per participant per round; `None` uses the whole shard.
    pub batch: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub model: SharedGlobalModel,
    pub trace: RegretTrace,
    pub clipped: u64,
}

/// Federated SGD: `w ← w − α_k Σ_l g^l(w)` on one shared model. Only
/// horizontal partitions are accepted.
pub fn fedsgd_train(
    shards: &GridShards,
    init: Vec<Matrix>,
    arch: &Architecture,
    opts: &FedOptions,
    session: &mut dyn SumTransport,
    monitor: &mut dyn FnMut(u32, &SharedGlobalModel, &BTreeMap<GridId, f64>) -> Result<Option<f64>>,
) -> Result<FedOutcome> {
    if shards.plan.mv != 1 {
        return Err(Error::arg(format!(
            "federated SGD needs a horizontal partition, got {} vertical groups",
            shards.plan.mv
        )));
    }
    if opts.iters == 0 {
        return Err(Error::arg("training needs T >= 1 iterations"));
    }
    if opts.batch == Some(0) {
        return Err(Error::arg("mini-batch size must be positive"));
    }
    let m = shards.shards.len();
    if opts.mode == SumMode::Secure && m > opts.codec.max_addends() {
        return Err(Error::arg(format!(
            "{m} participants overflow the ring at {} fractional bits",
            opts.codec.frac_bits()
        )));
    }
    let pid = |id: GridId| id.participant(1);
    let everyone: Vec<ParticipantId> = shards.shards.keys().map(|&g| pid(g)).collect();
    let shapes: Vec<(usize, usize)> = init.iter().map(Matrix::shape).collect();
    let mut model = SharedGlobalModel { layers: init };
    let mut trace = RegretTrace::default();
    let mut clipped = 0u64;
    for k in 1..=opts.iters {
        let round = session.round();
        if session.transcript().is_some() {
            let weights = model.flatten();
            for &p in &everyone {
                session.note(
                    p,
                    LocalNote::SharedModel {
                        round,
                        weights: weights.clone(),
                    },
                );
            }
        }
        let mut losses = BTreeMap::new();
        let mut instances: Vec<SumInstance> = (0..shapes.len())
            .map(|r| SumInstance {
                layer_tag: (r + 1) as u8,
                group_tag: 0,
                mode: opts.mode,
                inputs: Vec::with_capacity(m),
                delivery: everyone.clone(),
            })
            .collect();
        for (&id, shard) in &shards.shards {
            let pass = forward_fc(&shard.x, &model.layers, arch.activations())?;
            losses.insert(id, loss_value(pass.prediction(), &shard.y, arch.loss())?);
            let grads = match opts.batch {
                Some(b) if b < shard.x.rows() => {
                    let mut rng = substream(opts.seed, Purpose::Shuffle, pid(id), round, 0);
                    let mut rows = index::sample(&mut rng, shard.x.rows(), b).into_vec();
                    rows.sort_unstable();
                    local_gradient(&shard.x.select_rows(&rows), &shard.y.select_rows(&rows), &model.layers, arch)?
                }
                _ => backward(&shard.x, &model.layers, &pass, &shard.y, arch)?,
            };
            for (inst, g) in instances.iter_mut().zip(&grads) {
                inst.inputs.push((pid(id), encode_layer(&opts.codec, g, &mut clipped)));
            }
        }
        if let Some(v) = monitor(k, &model, &losses)? {
            trace.push(k, v);
        }
        let outputs = session.exchange(instances)?;
        // every participant received the same sum; apply the first copy
        let alpha_k = opts.schedule.rate_at(k)?;
        for (out, (w, &shape)) in outputs.iter().zip(model.layers.iter_mut().zip(&shapes)) {
            let v = out.delivered.values().next().ok_or_else(|| {
                Error::from(ProtocolError::Unexpected {
                    round,
                    detail: format!("no layer {} sum delivered", out.layer_tag),
                })
            })?;
            w.axpy(-alpha_k, &decode_layer(&opts.codec, v, shape, round)?)?;
        }
    }
    Ok(FedOutcome {
        model,
        trace,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_partition, synthetic_linreg, PartitionPlan};
    use crate::engine::InitPolicy;
    use crate::transport::{LocalBus, MessageKind};

    fn fixed(alpha: f64) -> RateSchedule {
        RateSchedule::Fixed { alpha }
    }

    fn none() -> impl FnMut(u32, &[Matrix], f64) -> Result<Option<f64>> {
        |_, _, _| Ok(None)
    }

    #[test]
    fn quadratic_converges_to_stationarity() {
        let t = synthetic_linreg(200, 5, 0.1, 3).unwrap();
        let arch = Architecture::linear_regression();
        let out = centralized_train(&t.data.x, &t.data.y, vec![Matrix::zeros(5, 1)], &arch, &fixed(0.5), 3000, &mut none()).unwrap();
        let g = local_gradient(&t.data.x, &t.data.y, &out.layers, &arch).unwrap();
        assert!(g[0].frobenius_norm() <= 1e-6);
        for (a, b) in out.layers[0].data().iter().zip(&t.w_star) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn zero_gradient_data_leaves_model_unchanged() {
        let x = Matrix::zeros(4, 3);
        let y = Matrix::zeros(4, 1);
        let out = centralized_train(&x, &y, vec![Matrix::zeros(3, 1)], &Architecture::linear_regression(), &fixed(1.0), 1, &mut none()).unwrap();
        assert_eq!(out.layers, vec![Matrix::zeros(3, 1)]);
        assert!(centralized_train(&x, &y, vec![Matrix::zeros(3, 1)], &Architecture::linear_regression(), &fixed(1.0), 0, &mut none()).is_err());
    }

    fn linreg_shards(mh: u16, mv: u16) -> (GridShards, Architecture) {
        let t = synthetic_linreg(60, 4, 0.2, 5).unwrap();
        let plan = PartitionPlan::contiguous(60, 4, mh, mv).unwrap();
        (apply_partition(&t.data, &plan).unwrap(), Architecture::linear_regression())
    }

    #[test]
    fn local_training_equals_per_shard_centralized() {
        let (shards, arch) = linreg_shards(3, 2);
        let init: BTreeMap<_, _> = shards
            .shards
            .keys()
            .map(|&g| (g, InitPolicy::new(0.1, 7).unwrap().init(g.participant(2), &[(2, 1)]).layers().to_vec()))
            .collect();
        let mut seen = 0;
        let out = local_train(&shards, &init, &arch, &fixed(0.1), 50, &mut |_, _, _, _| {
            seen += 1;
            Ok(None)
        })
        .unwrap();
        assert_eq!(seen, 6 * 50);
        for (id, o) in &out {
            let s = shards.get(*id);
            let solo = centralized_train(&s.x, &s.y, init[id].clone(), &arch, &fixed(0.1), 50, &mut none()).unwrap();
            assert!(o.layers[0].sub(&solo.layers[0]).unwrap().max_abs() <= 1e-12);
        }
    }

    fn fed(mode: SumMode, iters: u32) -> FedOptions {
        FedOptions {
            schedule: fixed(0.05),
            iters,
            codec: FixedPointCodec::default(),
            mode,
            batch: None,
            seed: 1,
        }
    }

    fn no_fed_monitor() -> impl FnMut(u32, &SharedGlobalModel, &BTreeMap<GridId, f64>) -> Result<Option<f64>> {
        |_, _, _| Ok(None)
    }

    #[test]
    fn vertical_partitions_are_rejected() {
        let (shards, arch) = linreg_shards(2, 2);
        let mut bus = LocalBus::new(1);
        assert!(fedsgd_train(&shards, vec![Matrix::zeros(4, 1)], &arch, &fed(SumMode::Secure, 1), &mut bus, &mut no_fed_monitor()).is_err());
    }

    #[test]
    fn single_participant_secure_is_centralized() {
        let (shards, arch) = linreg_shards(1, 1);
        let s = shards.get(GridId::new(1, 1));
        let mut bus = LocalBus::new(1);
        let f = fedsgd_train(&shards, vec![Matrix::zeros(4, 1)], &arch, &fed(SumMode::Secure, 40), &mut bus, &mut no_fed_monitor()).unwrap();
        let c = centralized_train(&s.x, &s.y, vec![Matrix::zeros(4, 1)], &arch, &fixed(0.05), 40, &mut none()).unwrap();
        assert!(f.model.layers[0].sub(&c.layers[0]).unwrap().max_abs() <= 1e-3);
    }

    #[test]
    fn plain_and_secure_follow_the_same_trajectory() {
        let (shards, arch) = linreg_shards(3, 1);
        let step_tol = 3.0 * 2f64.powi(-16);
        let mut plain_traj = Vec::new();
        let mut secure_traj = Vec::new();
        for (mode, traj) in [(SumMode::Plain, &mut plain_traj), (SumMode::Secure, &mut secure_traj)] {
            let mut bus = LocalBus::new(2);
            fedsgd_train(&shards, vec![Matrix::zeros(4, 1)], &arch, &fed(mode, 20), &mut bus, &mut |_, m, _| {
                traj.push(m.layers[0].clone());
                Ok(None)
            })
            .unwrap();
        }
        assert_eq!(plain_traj.len(), 20);
        for (k, (a, b)) in plain_traj.iter().zip(&secure_traj).enumerate() {
            // each step adds at most α·m·2^−16 of sum error per entry
            assert!(a.sub(b).unwrap().max_abs() <= k as f64 * 0.05 * step_tol);
        }
    }

    #[test]
    fn transcripts_expose_gradients_only_in_plain_mode() {
        let (shards, arch) = linreg_shards(3, 1);
        let mut plain = LocalBus::new(3).recording(true);
        fedsgd_train(&shards, vec![Matrix::zeros(4, 1)], &arch, &fed(SumMode::Plain, 1), &mut plain, &mut no_fed_monitor()).unwrap();
        let mut secure = LocalBus::new(3).recording(true);
        fedsgd_train(&shards, vec![Matrix::zeros(4, 1)], &arch, &fed(SumMode::Secure, 1), &mut secure, &mut no_fed_monitor()).unwrap();
        let codec = FixedPointCodec::default();
        for (bus, clear) in [(&plain, true), (&secure, false)] {
            let t = bus.transcript().unwrap();
            let observed = t.observed(ParticipantId(0));
            for id in shards.shards.keys().filter(|g| g.i != 1) {
                let s = shards.get(*id);
                let g = local_gradient(&s.x, &s.y, &[Matrix::zeros(4, 1)], &arch).unwrap();
                let enc = codec.encode(g[0].data());
                let found = observed
                    .iter()
                    .any(|(_, m)| m.kind == MessageKind::Partial && m.payload == enc);
                assert_eq!(found, clear);
            }
            assert!(t.notes.values().all(|n| matches!(n[0], LocalNote::SharedModel { .. })));
        }
    }

    #[test]
    fn minibatches_are_deterministic_and_distinct_from_full_batch() {
        let (shards, arch) = linreg_shards(2, 1);
        let run = |batch| {
            let mut bus = LocalBus::new(4);
            let mut o = fed(SumMode::Secure, 5);
            o.batch = batch;
            fedsgd_train(&shards, vec![Matrix::zeros(4, 1)], &arch, &o, &mut bus, &mut no_fed_monitor()).unwrap().model
        };
        assert_eq!(run(Some(7)), run(Some(7)));
        assert_ne!(run(Some(7)), run(None));
        assert_eq!(run(Some(1000)), run(None));
    }
}
