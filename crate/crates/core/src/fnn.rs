//! Confined gradient descent for fully connected networks on an
//! `m_h × m_v` grid of participants.
//!
//! Participant `(i, j)` holds the rows of horizontal slice `i` restricted to
//! the columns of vertical slice `j`. Its first layer therefore has `d_j`
//! rows and is only summed within vertical group `j`; every deeper layer has
//! the same shape everywhere and is summed over all participants.
//!
//! Two forward modes exist. [`VerticalForward::Isolated`] computes each
//! prediction from the participant's own feature slice only.
//! [`VerticalForward::GroupSum`] first securely sums the first-layer
//! pre-activations `x_(i,j)·W¹_(i,j)` across horizontal group `i`, so every
//! member sees `z¹` computed over all features of its rows.

use std::collections::BTreeMap;

use crate::data::GridShards;
pub use crate::data::GridId;
use crate::engine::{cgd_step, decode_layer, encode_layer, ConfinedModel, InitPolicy, RateSchedule, RegretTrace};
use crate::error::{Error, ProtocolError, Result};
use crate::linalg::{backward, forward_fc, forward_tail, loss_value, Architecture, ForwardPass, Matrix};
use crate::ring::{FixedPointCodec, ParticipantId};
use crate::transport::{LocalNote, SumInstance, SumMode, SumTransport};

/// Layer tag offset for the first-layer forward sums.
pub const FORWARD_TAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VerticalForward {
    /// Each participant predicts from its own feature slice.
    #[default]
    Isolated,
    /// First-layer pre-activations are securely summed across the horizontal group.
    GroupSum,
}

impl std::str::FromStr for VerticalForward {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolated" => Ok(VerticalForward::Isolated),
            "group-sum" => Ok(VerticalForward::GroupSum),
            _ => Err(Error::arg(format!("unknown forward mode {s:?} (isolated|group-sum)"))),
        }
    }
}

/// Grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub mh: u16,
    pub mv: u16,
}

impl Grid {
    pub fn new(mh: u16, mv: u16) -> Result<Self> {
        if mh == 0 || mv == 0 {
            return Err(Error::arg(format!("grid {mh}x{mv} must be at least 1x1")));
        }
        Ok(Grid { mh, mv })
    }

    pub fn ids(&self) -> Vec<GridId> {
        (1..=self.mh)
            .flat_map(|i| (1..=self.mv).map(move |j| GridId::new(i, j)))
            .collect()
    }

    pub fn len(&self) -> usize {
        usize::from(self.mh) * usize::from(self.mv)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pid(&self, id: GridId) -> ParticipantId {
        id.participant(self.mv)
    }

    pub fn contains(&self, id: GridId) -> bool {
        (1..=self.mh).contains(&id.i) && (1..=self.mv).contains(&id.j)
    }

    /// Members of vertical group `j`: `(1, j) … (m_h, j)`.
    pub fn vertical_group(&self, j: u16) -> Vec<GridId> {
        (1..=self.mh).map(|i| GridId::new(i, j)).collect()
    }

    /// Members of horizontal group `i`: `(i, 1) … (i, m_v)`.
    pub fn horizontal_group(&self, i: u16) -> Vec<GridId> {
        (1..=self.mv).map(|j| GridId::new(i, j)).collect()
    }
}

/// Network layout shared by every participant; only the first layer's row
/// count varies with the feature slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FnnSpec {
    pub arch: Architecture,
    /// Widths of the hidden layers, `H_1 … H_{N−1}`.
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub forward: VerticalForward,
}

impl FnnSpec {
    pub fn new(arch: Architecture, hidden: Vec<usize>, outputs: usize, forward: VerticalForward) -> Result<Self> {
        if arch.layers() != hidden.len() + 1 {
            return Err(Error::arg(format!(
                "{} activations for {} hidden widths",
                arch.layers(),
                hidden.len()
            )));
        }
        if hidden.contains(&0) || outputs == 0 {
            return Err(Error::arg("layer widths must be positive"));
        }
        Ok(FnnSpec {
            arch,
            hidden,
            outputs,
            forward,
        })
    }

    pub fn shapes(&self, features: usize) -> Vec<(usize, usize)> {
        let mut widths = vec![features];
        widths.extend(&self.hidden);
        widths.push(self.outputs);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// The confined models of a whole grid, keyed by grid coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModels {
    pub grid: Grid,
    pub models: BTreeMap<GridId, ConfinedModel>,
}

impl GridModels {
    /// Initializes every participant with its own `δ` and stream.
    pub fn init(
        grid: Grid,
        spec: &FnnSpec,
        feature_widths: &[usize],
        deltas: &BTreeMap<GridId, f64>,
        seed: u64,
    ) -> Result<Self> {
        if feature_widths.len() != usize::from(grid.mv) {
            return Err(Error::shape("feature widths", grid.mv, feature_widths.len()));
        }
        let mut models = BTreeMap::new();
        for id in grid.ids() {
            let delta = *deltas
                .get(&id)
                .ok_or_else(|| Error::arg(format!("no delta for participant {id}")))?;
            let policy = InitPolicy::new(delta, seed)?;
            let shapes = spec.shapes(feature_widths[usize::from(id.j) - 1]);
            models.insert(id, policy.init(grid.pid(id), &shapes));
        }
        Ok(GridModels { grid, models })
    }

    pub fn get(&self, id: GridId) -> &ConfinedModel {
        &self.models[&id]
    }

    /// The model that actually produces `(i, j)`'s predictions: its own in
    /// isolated mode, or the horizontal group's stacked first layers plus its
    /// own deeper layers in group-sum mode.
    pub fn effective_layers(&self, id: GridId, forward: VerticalForward) -> Result<Vec<Matrix>> {
        let own = self.get(id).layers();
        match forward {
            VerticalForward::Isolated => Ok(own.to_vec()),
            VerticalForward::GroupSum => {
                let firsts: Vec<&Matrix> = self
                    .grid
                    .horizontal_group(id.i)
                    .into_iter()
                    .map(|g| &self.get(g).layers()[0])
                    .collect();
                let mut layers = vec![Matrix::vstack(&firsts)?];
                layers.extend(own[1..].iter().cloned());
                Ok(layers)
            }
        }
    }

    /// Prediction of participant `id` on full-width inputs `x`. Isolated mode
    /// reads only the participant's own columns (other features are treated
    /// as absent).
    pub fn predict(
        &self,
        id: GridId,
        x: &Matrix,
        feature_ranges: &[std::ops::Range<usize>],
        spec: &FnnSpec,
    ) -> Result<ForwardPass> {
        let z1 = self.first_preactivation(id, x, feature_ranges, spec.forward)?;
        forward_tail(z1, &self.get(id).layers()[1..], spec.arch.activations())
    }

    /// Predictions of every participant on full-width inputs. In group-sum
    /// mode the members of a horizontal group share `z¹`, so it is computed
    /// once per group.
    pub fn predict_all(
        &self,
        x: &Matrix,
        feature_ranges: &[std::ops::Range<usize>],
        spec: &FnnSpec,
    ) -> Result<BTreeMap<GridId, ForwardPass>> {
        let mut out = BTreeMap::new();
        for i in 1..=self.grid.mh {
            let row = self.grid.horizontal_group(i);
            let shared = match spec.forward {
                VerticalForward::GroupSum => Some(self.first_preactivation(row[0], x, feature_ranges, spec.forward)?),
                VerticalForward::Isolated => None,
            };
            for id in row {
                let z1 = match &shared {
                    Some(z) => z.clone(),
                    None => self.first_preactivation(id, x, feature_ranges, spec.forward)?,
                };
                out.insert(id, forward_tail(z1, &self.get(id).layers()[1..], spec.arch.activations())?);
            }
        }
        Ok(out)
    }

    /// Each participant's loss on its own training rows.
    pub fn shard_losses(&self, shards: &GridShards, spec: &FnnSpec) -> Result<BTreeMap<GridId, f64>> {
        let mut out = BTreeMap::new();
        for i in 1..=self.grid.mh {
            let row = self.grid.horizontal_group(i);
            let mut shared: Option<Matrix> = None;
            if spec.forward == VerticalForward::GroupSum {
                for &g in &row {
                    let part = shards.get(g).x.matmul(&self.get(g).layers()[0])?;
                    match shared.as_mut() {
                        Some(acc) => acc.add_assign(&part)?,
                        None => shared = Some(part),
                    }
                }
            }
            for id in row {
                let shard = shards.get(id);
                let pass = match &shared {
                    Some(z) => forward_tail(z.clone(), &self.get(id).layers()[1..], spec.arch.activations())?,
                    None => forward_fc(&shard.x, self.get(id).layers(), spec.arch.activations())?,
                };
                out.insert(id, loss_value(pass.prediction(), &shard.y, spec.arch.loss())?);
            }
        }
        Ok(out)
    }

    /// `z¹` for `id` on full-width inputs.
    pub fn first_preactivation(
        &self,
        id: GridId,
        x: &Matrix,
        feature_ranges: &[std::ops::Range<usize>],
        forward: VerticalForward,
    ) -> Result<Matrix> {
        let cols_of = |j: u16| feature_ranges[usize::from(j) - 1].clone();
        match forward {
            VerticalForward::Isolated => x.col_range(cols_of(id.j)).matmul(&self.get(id).layers()[0]),
            VerticalForward::GroupSum => {
                let mut z: Option<Matrix> = None;
                for g in self.grid.horizontal_group(id.i) {
                    let part = x.col_range(cols_of(g.j)).matmul(&self.get(g).layers()[0])?;
                    match z.as_mut() {
                        Some(acc) => acc.add_assign(&part)?,
                        None => z = Some(part),
                    }
                }
                Ok(z.expect("horizontal group is nonempty"))
            }
        }
    }
}

/// Activations of one participant for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalForward {
    pub owner: GridId,
    pub round: u32,
    pub pass: ForwardPass,
}

/// Purely local forward pass (isolated mode).
pub fn forward_local(
    owner: GridId,
    round: u32,
    x: &Matrix,
    model: &ConfinedModel,
    arch: &Architecture,
) -> Result<LocalForward> {
    if x.cols() != model.layers()[0].rows() {
        return Err(Error::shape("forward_local features", model.layers()[0].rows(), x.cols()));
    }
    Ok(LocalForward {
        owner,
        round,
        pass: forward_fc(x, model.layers(), arch.activations())?,
    })
}

/// Forward pass continuing from a group-summed `z¹`.
pub fn forward_from_sum(
    owner: GridId,
    round: u32,
    z1: Matrix,
    model: &ConfinedModel,
    arch: &Architecture,
) -> Result<LocalForward> {
    Ok(LocalForward {
        owner,
        round,
        pass: forward_tail(z1, &model.layers()[1..], arch.activations())?,
    })
}

/// Per-layer local gradients of one participant. Layer 1 belongs to the
/// owner's vertical group `owner.j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradientBundle {
    pub owner: GridId,
    pub round: u32,
    pub layers: Vec<Matrix>,
}

pub fn backward_local(
    fwd: &LocalForward,
    owner: GridId,
    round: u32,
    x: &Matrix,
    y: &Matrix,
    model: &ConfinedModel,
    arch: &Architecture,
) -> Result<LayerGradientBundle> {
    if fwd.owner != owner || fwd.round != round {
        return Err(Error::arg(format!(
            "activations of {} round {} used for {} round {}",
            fwd.owner, fwd.round, owner, round
        )));
    }
    Ok(LayerGradientBundle {
        owner,
        round,
        layers: backward(x, model.layers(), &fwd.pass, y, arch)?,
    })
}

/// Securely sums the bundles: layers 2..N over every participant, layer 1
/// within each vertical group (delivered only to that group). Returns, per
/// participant, the sums it received.
pub fn aggregate_round(
    grid: Grid,
    bundles: &BTreeMap<GridId, LayerGradientBundle>,
    codec: &FixedPointCodec,
    session: &mut dyn SumTransport,
    clipped: &mut u64,
) -> Result<BTreeMap<GridId, Vec<Matrix>>> {
    let round = session.round();
    for id in grid.ids() {
        if !bundles.contains_key(&id) {
            return Err(ProtocolError::MissingSubmission {
                round,
                grid: id.to_string(),
            }
            .into());
        }
    }
    let first = &bundles[&GridId::new(1, 1)];
    let n_layers = first.layers.len();
    let upper_shapes: Vec<(usize, usize)> = first.layers.iter().skip(1).map(Matrix::shape).collect();
    for b in bundles.values() {
        let shapes: Vec<(usize, usize)> = b.layers.iter().skip(1).map(Matrix::shape).collect();
        if b.layers.len() != n_layers || shapes != upper_shapes {
            return Err(ProtocolError::Unexpected {
                round,
                detail: format!("gradient shapes of {} differ from (1,1)", b.owner),
            }
            .into());
        }
    }
    let everyone: Vec<ParticipantId> = grid.ids().into_iter().map(|g| grid.pid(g)).collect();
    let mut batch = Vec::new();
    for r in (1..n_layers).rev() {
        batch.push(SumInstance {
            layer_tag: (r + 1) as u8,
            group_tag: 0,
            mode: SumMode::Secure,
            inputs: grid
                .ids()
                .into_iter()
                .map(|g| (grid.pid(g), encode_layer(codec, &bundles[&g].layers[r], clipped)))
                .collect(),
            delivery: everyone.clone(),
        });
    }
    for j in 1..=grid.mv {
        let members = grid.vertical_group(j);
        batch.push(SumInstance {
            layer_tag: 1,
            group_tag: j,
            mode: SumMode::Secure,
            inputs: members
                .iter()
                .map(|&g| (grid.pid(g), encode_layer(codec, &bundles[&g].layers[0], clipped)))
                .collect(),
            delivery: members.iter().map(|&g| grid.pid(g)).collect(),
        });
    }
    let outputs = session.exchange(batch)?;
    let mut sums: BTreeMap<GridId, Vec<Matrix>> = grid
        .ids()
        .into_iter()
        .map(|g| (g, vec![Matrix::zeros(0, 0); n_layers]))
        .collect();
    for out in outputs {
        let r = usize::from(out.layer_tag) - 1;
        for (pid, v) in &out.delivered {
            let g = GridId::new(pid.0 / grid.mv + 1, pid.0 % grid.mv + 1);
            let shape = bundles[&g].layers[r].shape();
            sums.get_mut(&g).expect("grid member")[r] = decode_layer(codec, v, shape, round)?;
        }
    }
    Ok(sums)
}

/// Applies each participant's received sums.
pub fn descend_round(
    models: &mut GridModels,
    sums: &BTreeMap<GridId, Vec<Matrix>>,
    alpha_k: f64,
) -> Result<()> {
    for (id, model) in models.models.iter_mut() {
        let s = sums
            .get(id)
            .ok_or_else(|| Error::arg(format!("no sums for participant {id}")))?;
        cgd_step(model, s, alpha_k)?;
    }
    Ok(())
}

/// Securely sums `x_(i,j)·W¹_(i,j)` across each horizontal group.
pub fn group_forward_sums(
    models: &GridModels,
    shards: &GridShards,
    codec: &FixedPointCodec,
    session: &mut dyn SumTransport,
    clipped: &mut u64,
) -> Result<BTreeMap<GridId, Matrix>> {
    let grid = models.grid;
    let round = session.round();
    let mut batch = Vec::new();
    let mut shapes = BTreeMap::new();
    for i in 1..=grid.mh {
        let members = grid.horizontal_group(i);
        let mut inputs = Vec::new();
        for &g in &members {
            let part = shards.get(g).x.matmul(&models.get(g).layers()[0])?;
            shapes.insert(g, part.shape());
            inputs.push((grid.pid(g), encode_layer(codec, &part, clipped)));
        }
        batch.push(SumInstance {
            layer_tag: FORWARD_TAG + 1,
            group_tag: i,
            mode: SumMode::Secure,
            inputs,
            delivery: members.iter().map(|&g| grid.pid(g)).collect(),
        });
    }
    let outputs = session.exchange(batch)?;
    let mut z = BTreeMap::new();
    for out in outputs {
        for (pid, v) in &out.delivered {
            let g = GridId::new(pid.0 / grid.mv + 1, pid.0 % grid.mv + 1);
            z.insert(g, decode_layer(codec, v, shapes[&g], round)?);
        }
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct FnnOptions {
    pub schedule: RateSchedule,
    pub iters: u32,
    pub codec: FixedPointCodec,
}

#[derive(Debug, Clone)]
pub struct FnnOutcome {
    pub models: GridModels,
    pub trace: RegretTrace,
    pub clipped: u64,
}

/// Called once per iteration `k` with the models `w_k` and each
/// participant's training loss on its own rows at `w_k`.
pub type FnnMonitor<'a> =
    dyn FnMut(u32, &GridModels, &BTreeMap<GridId, f64>) -> Result<Option<f64>> + 'a;

/// Runs `opts.iters` rounds of forward, backward, aggregate, and descend.
pub fn run_fnn_cgd(
    mut models: GridModels,
    shards: &GridShards,
    spec: &FnnSpec,
    opts: &FnnOptions,
    session: &mut dyn SumTransport,
    monitor: &mut FnnMonitor<'_>,
) -> Result<FnnOutcome> {
    if opts.iters == 0 {
        return Err(Error::arg("CGD needs T >= 1 iterations"));
    }
    let grid = models.grid;
    if shards.plan.mh != grid.mh || shards.plan.mv != grid.mv {
        return Err(Error::arg(format!(
            "shards are cut {}x{}, models are {}x{}",
            shards.plan.mh, shards.plan.mv, grid.mh, grid.mv
        )));
    }
    if grid.len() > opts.codec.max_addends() {
        return Err(Error::arg(format!(
            "{} addends overflow the ring at {} fractional bits",
            grid.len(),
            opts.codec.frac_bits()
        )));
    }
    let arch = &spec.arch;
    let mut trace = RegretTrace::default();
    let mut clipped = 0u64;
    for k in 1..=opts.iters {
        if session.transcript().is_some() {
            let round = session.round();
            for (id, m) in &models.models {
                session.note(
                    grid.pid(*id),
                    LocalNote::ConfinedModel {
                        round,
                        weights: m.flatten(),
                    },
                );
            }
        }
        let mut z1 = match spec.forward {
            VerticalForward::Isolated => None,
            VerticalForward::GroupSum => Some(group_forward_sums(
                &models,
                shards,
                &opts.codec,
                session,
                &mut clipped,
            )?),
        };
        let round = session.round();
        let mut forwards = BTreeMap::new();
        let mut train_losses = BTreeMap::new();
        for (&id, model) in &models.models {
            let shard = shards.get(id);
            let fwd = match z1.as_mut() {
                None => forward_local(id, round, &shard.x, model, arch)?,
                Some(z) => {
                    let zi = z.remove(&id).ok_or_else(|| {
                        Error::from(ProtocolError::MissingSubmission {
                            round,
                            grid: id.to_string(),
                        })
                    })?;
                    forward_from_sum(id, round, zi, model, arch)?
                }
            };
            train_losses.insert(id, loss_value(fwd.pass.prediction(), &shard.y, arch.loss())?);
            forwards.insert(id, fwd);
        }
        if let Some(loss) = monitor(k, &models, &train_losses)? {
            trace.push(k, loss);
        }
        let mut bundles = BTreeMap::new();
        for (&id, model) in &models.models {
            let shard = shards.get(id);
            bundles.insert(
                id,
                backward_local(&forwards[&id], id, round, &shard.x, &shard.y, model, arch)?,
            );
        }
        drop(forwards);
        let sums = aggregate_round(grid, &bundles, &opts.codec, session, &mut clipped)?;
        descend_round(&mut models, &sums, opts.schedule.rate_at(k)?)?;
    }
    Ok(FnnOutcome {
        models,
        trace,
        clipped,
    })
}
