//! Confined gradient descent: private models, the common summed-gradient
//! update, learning-rate schedules, and convergence monitors.

use std::collections::BTreeSet;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, ProtocolError, Result};
use crate::linalg::{local_gradient, Architecture, Matrix};
use crate::ring::{FixedPointCodec, ParticipantId, RingVec};
use crate::rng::{substream, Purpose};
use crate::transport::{LocalNote, SumInstance, SumMode, SumTransport};

/// A participant's private model. Deliberately not serializable: it never
/// leaves its owner.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfinedModel {
    owner: ParticipantId,
    layers: Vec<Matrix>,
}

impl ConfinedModel {
    pub fn new(owner: ParticipantId, layers: Vec<Matrix>) -> Self {
        ConfinedModel { owner, layers }
    }

    pub fn owner(&self) -> ParticipantId {
        self.owner
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }

    /// All weights, layer after layer, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.data().iter().copied()).collect()
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }
}

/// Initial weights are `delta · N(0, 1)` drawn from the owner's own stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitPolicy {
    pub delta: f64,
    pub seed: u64,
}

impl InitPolicy {
    pub fn new(delta: f64, seed: u64) -> Result<Self> {
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::arg(format!("init scale delta={delta} must be finite and non-negative")));
        }
        Ok(InitPolicy { delta, seed })
    }

    pub fn init(&self, owner: ParticipantId, shapes: &[(usize, usize)]) -> ConfinedModel {
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(idx, &(rows, cols))| {
                let mut rng = substream(self.seed, Purpose::Init, owner, 0, idx as u32);
                Matrix::from_fn(rows, cols, |_, _| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    self.delta * g
                })
            })
            .collect();
        ConfinedModel { owner, layers }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateSchedule {
    Fixed { alpha: f64 },
    /// `alpha / (k + mu · horizon)²` for `k` in `1..=horizon`.
    Diminishing { alpha: f64, mu: f64, horizon: u32 },
}

impl RateSchedule {
    /// `mu == 0` selects the fixed rate.
    pub fn from_params(alpha: f64, mu: f64, horizon: u32) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::arg(format!("learning rate alpha={alpha} must be positive")));
        }
        if mu == 0.0 {
            return Ok(RateSchedule::Fixed { alpha });
        }
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::arg(format!("mu={mu} must lie in [0, 1)")));
        }
        if horizon == 0 {
            return Err(Error::arg("diminishing schedule needs a horizon T >= 1"));
        }
        Ok(RateSchedule::Diminishing { alpha, mu, horizon })
    }

    pub fn rate_at(&self, k: u32) -> Result<f64> {
        match *self {
            RateSchedule::Fixed { alpha } => Ok(alpha),
            RateSchedule::Diminishing { alpha, mu, horizon } => {
                if !(1..=horizon).contains(&k) {
                    return Err(Error::arg(format!("iteration {k} outside 1..={horizon}")));
                }
                let denom = f64::from(k) + mu * f64::from(horizon);
                Ok(alpha / (denom * denom))
            }
        }
    }
}

/// `w ← w − alpha_k · s`, layer by layer.
pub fn cgd_step(model: &mut ConfinedModel, summed: &[Matrix], alpha_k: f64) -> Result<()> {
    if summed.len() != model.layers.len() {
        return Err(Error::shape("cgd_step layers", model.layers.len(), summed.len()));
    }
    for (w, s) in model.layers.iter_mut().zip(summed) {
        w.axpy(-alpha_k, s)?;
    }
    Ok(())
}

/// Loss of the designated participant at recorded iterations, plus the
/// centralized reference loss `F(w*)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretTrace {
    pub iters: Vec<u32>,
    pub losses: Vec<f64>,
    pub reference: Option<f64>,
}

impl RegretTrace {
    pub fn push(&mut self, k: u32, loss: f64) {
        self.iters.push(k);
        self.losses.push(loss);
    }
}

/// `(1/T) · Σ_k (F(w_k) − F(w*))` over the recorded iterations.
pub fn regret(trace: &RegretTrace) -> Result<f64> {
    let Some(reference) = trace.reference else {
        return Err(Error::arg("regret needs the reference loss F(w*)"));
    };
    if trace.losses.is_empty() {
        return Err(Error::arg("regret of an empty trace"));
    }
    let total: f64 = trace.losses.iter().map(|l| l - reference).sum();
    Ok(total / trace.losses.len() as f64)
}

/// `m · ‖mean_j (w_1^l − w_1^j)‖₂` with the mean over every `j`, `l` included.
pub fn epsilon_bound(initial: &[Vec<f64>], reference: usize) -> Result<f64> {
    let Some(wl) = initial.get(reference) else {
        return Err(Error::arg(format!(
            "reference participant {reference} out of {} models",
            initial.len()
        )));
    };
    let m = initial.len() as f64;
    let mut mean = vec![0.0; wl.len()];
    for wj in initial {
        if wj.len() != wl.len() {
            return Err(Error::shape("epsilon_bound", wl.len(), wj.len()));
        }
        for ((acc, a), b) in mean.iter_mut().zip(wl).zip(wj) {
            *acc += a - b;
        }
    }
    let norm = mean.iter().map(|v| (v / m).powi(2)).sum::<f64>().sqrt();
    Ok(m * norm)
}

/// Flattens and encodes per-layer real matrices for the ring.
pub(crate) fn encode_layer(codec: &FixedPointCodec, m: &Matrix, clipped: &mut u64) -> RingVec {
    let (v, c) = codec.encode_counted(m.data());
    *clipped += c as u64;
    v
}

pub(crate) fn decode_layer(
    codec: &FixedPointCodec,
    v: &RingVec,
    shape: (usize, usize),
    round: u32,
) -> Result<Matrix> {
    if v.len() != shape.0 * shape.1 {
        return Err(ProtocolError::LengthMismatch {
            round,
            expected: shape.0 * shape.1,
            got: v.len(),
        }
        .into());
    }
    Matrix::new(shape.0, shape.1, codec.decode(v))
}

/// One participant of a flat (shape-uniform) CGD run.
#[derive(Debug, Clone)]
pub struct CgdParticipant {
    pub model: ConfinedModel,
    pub x: Matrix,
    pub y: Matrix,
}

#[derive(Debug, Clone)]
pub struct CgdOptions {
    pub arch: Architecture,
    pub schedule: RateSchedule,
    pub iters: u32,
    pub codec: FixedPointCodec,
}

#[derive(Debug, Clone)]
pub struct CgdOutcome {
    pub models: Vec<ConfinedModel>,
    pub trace: RegretTrace,
    /// Gradient entries that hit the codec clip bound over the whole run.
    pub clipped: u64,
}

/// Called with `k` and the models `w_k` before the `k`-th update; a returned
/// loss is appended to the trace.
pub type Monitor<'a, S> = dyn FnMut(u32, &S) -> Result<Option<f64>> + 'a;

/// Every participant computes its full-batch local gradient, the gradients
/// are securely summed (one instance per layer), and every model descends
/// along the common sum.
pub fn run_cgd(
    participants: Vec<CgdParticipant>,
    opts: &CgdOptions,
    session: &mut dyn SumTransport,
    monitor: &mut Monitor<'_, [ConfinedModel]>,
) -> Result<CgdOutcome> {
    if opts.iters == 0 {
        return Err(Error::arg("CGD needs T >= 1 iterations"));
    }
    let Some(first) = participants.first() else {
        return Err(Error::arg("CGD needs at least one participant"));
    };
    let shapes = first.model.shapes();
    let mut owners = BTreeSet::new();
    for p in &participants {
        if p.model.shapes() != shapes {
            return Err(Error::shape(
                "run_cgd model shapes",
                format!("{shapes:?}"),
                format!("{:?}", p.model.shapes()),
            ));
        }
        if !owners.insert(p.model.owner) {
            return Err(Error::arg(format!("{} appears twice", p.model.owner)));
        }
    }
    if participants.len() > opts.codec.max_addends() {
        return Err(Error::arg(format!(
            "{} participants overflow the ring at {} fractional bits (max {})",
            participants.len(),
            opts.codec.frac_bits(),
            opts.codec.max_addends()
        )));
    }
    let delivery: Vec<ParticipantId> = owners.into_iter().collect();
    let mut models: Vec<ConfinedModel> = Vec::with_capacity(participants.len());
    let mut data = Vec::with_capacity(participants.len());
    for p in participants {
        models.push(p.model);
        data.push((p.x, p.y));
    }
    let mut trace = RegretTrace::default();
    let mut clipped = 0u64;
    for k in 1..=opts.iters {
        if let Some(loss) = monitor(k, &models)? {
            trace.push(k, loss);
        }
        let round = session.round();
        let recording = session.transcript().is_some();
        let mut instances: Vec<SumInstance> = (0..shapes.len())
            .map(|r| SumInstance {
                layer_tag: (r + 1) as u8,
                group_tag: 0,
                mode: SumMode::Secure,
                inputs: Vec::with_capacity(models.len()),
                delivery: delivery.clone(),
            })
            .collect();
        for (model, (x, y)) in models.iter().zip(&data) {
            if recording {
                session.note(
                    model.owner,
                    LocalNote::ConfinedModel {
                        round,
                        weights: model.flatten(),
                    },
                );
            }
            let grads = local_gradient(x, y, &model.layers, &opts.arch)?;
            for (inst, g) in instances.iter_mut().zip(&grads) {
                inst.inputs
                    .push((model.owner, encode_layer(&opts.codec, g, &mut clipped)));
            }
        }
        let outputs = session.exchange(instances)?;
        let alpha_k = opts.schedule.rate_at(k)?;
        for model in &mut models {
            let summed = outputs
                .iter()
                .zip(&shapes)
                .map(|(out, &shape)| {
                    let v = out.delivered.get(&model.owner).ok_or_else(|| {
                        Error::from(ProtocolError::Unexpected {
                            round,
                            detail: format!("no layer {} sum for {}", out.layer_tag, model.owner),
                        })
                    })?;
                    decode_layer(&opts.codec, v, shape, round)
                })
                .collect::<Result<Vec<_>>>()?;
            cgd_step(model, &summed, alpha_k)?;
        }
    }
    Ok(CgdOutcome {
        models,
        trace,
        clipped,
    })
}
