//! Run configuration: a flat `key = value` text format with `#` comments,
//! named profiles, and field-by-field validation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, FieldError, Result};
use crate::fnn::VerticalForward;
use crate::linalg::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Cgd,
    Centralized,
    Local,
    FedsgdPlain,
    FedsgdSecure,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cgd => "cgd",
            Mode::Centralized => "centralized",
            Mode::Local => "local",
            Mode::FedsgdPlain => "fedsgd-plain",
            Mode::FedsgdSecure => "fedsgd-secure",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [Mode::Cgd, Mode::Centralized, Mode::Local, Mode::FedsgdPlain, Mode::FedsgdSecure]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| "expected cgd|centralized|local|fedsgd-plain|fedsgd-secure".into())
    }
}

/// Initialization scale per participant.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaSpec {
    Scalar(f64),
    PerParticipant(Vec<f64>),
    UniformRandom { lo: f64, hi: f64 },
}

impl fmt::Display for DeltaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaSpec::Scalar(d) => write!(f, "{d}"),
            DeltaSpec::PerParticipant(v) => {
                let parts: Vec<String> = v.iter().map(f64::to_string).collect();
                write!(f, "{}", parts.join(","))
            }
            DeltaSpec::UniformRandom { lo, hi } => write!(f, "uniform-random({lo},{hi})"),
        }
    }
}

impl FromStr for DeltaSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("uniform-random(").and_then(|r| r.strip_suffix(')')) {
            let (lo, hi) = inner.split_once(',').ok_or("expected uniform-random(lo,hi)")?;
            let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower bound {lo:?}"))?;
            let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper bound {hi:?}"))?;
            return Ok(DeltaSpec::UniformRandom { lo, hi });
        }
        let values = parse_list::<f64>(s)?;
        match values.as_slice() {
            [] => Err("expected a number, a list, or uniform-random(lo,hi)".into()),
            [d] => Ok(DeltaSpec::Scalar(*d)),
            _ => Ok(DeltaSpec::PerParticipant(values)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Local,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    AllToAll,
    Aggregator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub grid: (u16, u16),
    pub delta: DeltaSpec,
    pub alpha: f64,
    pub mu: f64,
    pub iters: u32,
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub l2: f64,
    pub forward: VerticalForward,
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub synth_d: usize,
    pub synth_noise: f64,
    pub transport: TransportKind,
    pub topology: TopologyKind,
    pub endpoints: Option<PathBuf>,
    pub seed: u64,
    pub frac_bits: u32,
    pub clip: f64,
    pub eval_every: u32,
    pub batch: Option<usize>,
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Cgd,
            grid: (1, 1),
            delta: DeltaSpec::Scalar(0.1),
            alpha: 0.01,
            mu: 0.0,
            iters: 100,
            hidden: vec![],
            loss: LossKind::MeanSquaredError,
            l2: 0.0,
            forward: VerticalForward::GroupSum,
            dataset: DatasetKind::Synth,
            mnist_dir: PathBuf::from("data/mnist-desk"),
            n_train: 1000,
            n_val: 200,
            synth_d: 20,
            synth_noise: 0.1,
            transport: TransportKind::Local,
            topology: TopologyKind::AllToAll,
            endpoints: None,
            seed: 1,
            frac_bits: 16,
            clip: 64.0,
            eval_every: 10,
            batch: None,
            timing: true,
        }
    }
}

/// Every accepted key, in the order the resolved config is rendered.
pub const KEYS: &[&str] = &[
    "mode",
    "grid",
    "delta",
    "alpha",
    "mu",
    "iters",
    "hidden",
    "loss",
    "l2",
    "forward",
    "dataset",
    "mnist_dir",
    "n_train",
    "n_val",
    "synth_d",
    "synth_noise",
    "transport",
    "topology",
    "endpoints",
    "seed",
    "frac_bits",
    "clip",
    "eval_every",
    "batch",
    "timing",
];

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad list element {p:?}")))
        .collect()
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true|false, got {v:?}")),
    }
}

pub fn parse_grid(v: &str) -> std::result::Result<(u16, u16), String> {
    let (h, w) = v
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("expected MHxMV, got {v:?}"))?;
    Ok((parse_num(h.trim())?, parse_num(w.trim())?))
}

impl RunConfig {
    /// Named preset. `desk` is the MNIST subset used for quick checks;
    /// `paper` the full dataset.
    pub fn profile(name: &str) -> Result<Self> {
        let base = RunConfig {
            mode: Mode::Cgd,
            grid: (10, 7),
            delta: DeltaSpec::Scalar(0.1),
            alpha: 0.01,
            mu: 0.0,
            hidden: vec![64],
            loss: LossKind::CrossEntropySoftmax,
            forward: VerticalForward::GroupSum,
            dataset: DatasetKind::Mnist,
            eval_every: 50,
            ..RunConfig::default()
        };
        match name {
            "desk" => Ok(RunConfig {
                mnist_dir: PathBuf::from("data/mnist-desk"),
                n_train: 6000,
                n_val: 1000,
                iters: 1000,
                ..base
            }),
            "paper" => Ok(RunConfig {
                mnist_dir: PathBuf::from("data/mnist"),
                n_train: 60000,
                n_val: 10000,
                iters: 2000,
                eval_every: 100,
                ..base
            }),
            _ => Err(Error::Config(vec![FieldError::new("profile", format!("unknown profile {name:?} (desk|paper)"))])),
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "grid" => self.grid = parse_grid(v)?,
            "delta" => self.delta = v.parse()?,
            "alpha" => self.alpha = parse_num(v)?,
            "mu" => self.mu = parse_num(v)?,
            "iters" => self.iters = parse_num(v)?,
            "hidden" => self.hidden = parse_list(v)?,
            "loss" => {
                self.loss = match v {
                    "ce" | "cross-entropy" => LossKind::CrossEntropySoftmax,
                    "mse" => LossKind::MeanSquaredError,
                    _ => return Err("expected ce|mse".into()),
                }
            }
            "l2" => self.l2 = parse_num(v)?,
            "forward" => self.forward = v.parse().map_err(|e: Error| e.to_string())?,
            "dataset" => {
                self.dataset = match v {
                    "mnist" => DatasetKind::Mnist,
                    "synth" => DatasetKind::Synth,
                    _ => return Err("expected mnist|synth".into()),
                }
            }
            "mnist_dir" => self.mnist_dir = PathBuf::from(v),
            "n_train" => self.n_train = parse_num(v)?,
            "n_val" => self.n_val = parse_num(v)?,
            "synth_d" => self.synth_d = parse_num(v)?,
            "synth_noise" => self.synth_noise = parse_num(v)?,
            "transport" => {
                self.transport = match v {
                    "local" => TransportKind::Local,
                    "tcp" => TransportKind::Tcp,
                    _ => return Err("expected local|tcp".into()),
                }
            }
            "topology" => {
                self.topology = match v {
                    "all-to-all" => TopologyKind::AllToAll,
                    "aggregator" => TopologyKind::Aggregator,
                    _ => return Err("expected all-to-all|aggregator".into()),
                }
            }
            "endpoints" => self.endpoints = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seed" => self.seed = parse_num(v)?,
            "frac_bits" => self.frac_bits = parse_num(v)?,
            "clip" => self.clip = parse_num(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "batch" => self.batch = if v.is_empty() { None } else { Some(parse_num(v)?) },
            "timing" => self.timing = parse_bool(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies assignments in order, collecting every failure.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut errors = Vec::new();
        for (k, v) in pairs {
            if let Err(msg) = self.set(k, v) {
                errors.push(FieldError::new(k, msg));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Parses the text format into assignments; a `profile = name` line
    /// must come first if present and selects the starting preset.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        let mut errors = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => errors.push(FieldError::new(format!("line {}", no + 1), format!("expected key = value, got {line:?}"))),
            }
        }
        if errors.is_empty() {
            Ok(pairs)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Builds a config from an optional profile, then file assignments,
    /// then overrides, and validates the result.
    pub fn resolve(profile: Option<&str>, file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file_text {
            Some(t) => Self::parse_text(t)?,
            None => Vec::new(),
        };
        let file_profile = pairs.iter().position(|(k, _)| k == "profile").map(|i| pairs.remove(i).1);
        let mut cfg = match profile.map(str::to_string).or(file_profile) {
            Some(p) => Self::profile(&p)?,
            None => RunConfig::default(),
        };
        pairs.extend(overrides.iter().cloned());
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn participants(&self) -> usize {
        usize::from(self.grid.0) * usize::from(self.grid.1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let mut bad = |f: &str, m: String| e.push(FieldError::new(f, m));
        if self.grid.0 == 0 || self.grid.1 == 0 {
            bad("grid", format!("{}x{} must be at least 1x1", self.grid.0, self.grid.1));
        }
        if self.iters == 0 {
            bad("iters", "T must be at least 1".into());
        }
        match &self.delta {
            DeltaSpec::Scalar(d) if !(*d > 0.0 && d.is_finite()) => bad("delta", format!("{d} must be positive")),
            DeltaSpec::PerParticipant(v) => {
                if v.len() != self.participants() {
                    bad("delta", format!("{} values for {} participants", v.len(), self.participants()));
                }
                if v.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                    bad("delta", "every value must be positive".into());
                }
            }
            DeltaSpec::UniformRandom { lo, hi } if !(*lo > 0.0 && lo <= hi && hi.is_finite()) => {
                bad("delta", format!("need 0 < lo <= hi, got ({lo},{hi})"))
            }
            _ => {}
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad("alpha", format!("{} must be positive", self.alpha));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            bad("mu", format!("{} must be non-negative", self.mu));
        }
        if self.hidden.contains(&0) {
            bad("hidden", "widths must be positive".into());
        }
        if !(self.l2 >= 0.0) {
            bad("l2", "must be non-negative".into());
        }
        if !(8..=24).contains(&self.frac_bits) {
            bad("frac_bits", format!("{} is outside [8, 24]", self.frac_bits));
        }
        if self.eval_every == 0 {
            bad("eval_every", "must be at least 1".into());
        }
        if self.n_train == 0 || self.n_val == 0 {
            bad("n_train", "training and validation sizes must be positive".into());
        }
        if self.n_train < usize::from(self.grid.0) {
            bad("grid", format!("{} horizontal slices for {} samples", self.grid.0, self.n_train));
        }
        if self.dataset == DatasetKind::Synth {
            if self.synth_d == 0 {
                bad("synth_d", "must be positive".into());
            }
            if self.loss != LossKind::MeanSquaredError {
                bad("loss", "synthetic regression needs mse".into());
            }
        }
        if matches!(self.mode, Mode::FedsgdPlain | Mode::FedsgdSecure) && self.grid.1 != 1 {
            bad("grid", "federated SGD needs a horizontal partition (MV = 1)".into());
        }
        if self.batch == Some(0) {
            bad("batch", "must be positive".into());
        }
        if self.endpoints.is_some() && self.transport != TransportKind::Tcp {
            bad("endpoints", "only meaningful with transport = tcp".into());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "mode" => self.mode.as_str().into(),
            "grid" => format!("{}x{}", self.grid.0, self.grid.1),
            "delta" => self.delta.to_string(),
            "alpha" => self.alpha.to_string(),
            "mu" => self.mu.to_string(),
            "iters" => self.iters.to_string(),
            "hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "loss" => match self.loss {
                LossKind::CrossEntropySoftmax => "ce".into(),
                LossKind::MeanSquaredError => "mse".into(),
            },
            "l2" => self.l2.to_string(),
            "forward" => match self.forward {
                VerticalForward::Isolated => "isolated".into(),
                VerticalForward::GroupSum => "group-sum".into(),
            },
            "dataset" => match self.dataset {
                DatasetKind::Mnist => "mnist".into(),
                DatasetKind::Synth => "synth".into(),
            },
            "mnist_dir" => self.mnist_dir.display().to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "synth_d" => self.synth_d.to_string(),
            "synth_noise" => self.synth_noise.to_string(),
            "transport" => match self.transport {
                TransportKind::Local => "local".into(),
                TransportKind::Tcp => "tcp".into(),
            },
            "topology" => match self.topology {
                TopologyKind::AllToAll => "all-to-all".into(),
                TopologyKind::Aggregator => "aggregator".into(),
            },
            "endpoints" => self.endpoints.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "seed" => self.seed.to_string(),
            "frac_bits" => self.frac_bits.to_string(),
            "clip" => self.clip.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "batch" => self.batch.map(|b| b.to_string()).unwrap_or_default(),
            "timing" => self.timing.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }

    /// The resolved configuration in the text format; parsing it back
    /// yields the same config.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::profile("desk").unwrap();
        cfg.delta = DeltaSpec::UniformRandom { lo: 0.001, hi: 0.1 };
        cfg.batch = Some(32);
        let back = RunConfig::resolve(None, Some(&cfg.render()), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_then_overrides() {
        let text = "profile = desk\n# comment\ngrid = 4x2  # trailing\nalpha=0.5\n";
        let cfg = RunConfig::resolve(None, Some(text), &[("alpha".into(), "0.25".into())]).unwrap();
        assert_eq!(cfg.grid, (4, 2));
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.hidden, vec![64]);
    }

    #[test]
    fn errors_are_listed_per_field() {
        let text = "grid = 0x2\nalpha = -1\niters = 0\nfrac_bits = 30\nbogus = 1\ndelta = abc\n";
        let Err(Error::Config(fields)) = RunConfig::resolve(None, Some(text), &[]) else {
            panic!("expected config error");
        };
        let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        assert_eq!(names, vec!["bogus", "delta"]);
        let Err(Error::Config(fields)) = RunConfig::resolve(None, Some("grid = 0x2\nalpha = -1\niters = 0\nfrac_bits = 30\n"), &[]) else {
            panic!("expected config error");
        };
        let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        assert_eq!(names, vec!["grid", "iters", "alpha", "frac_bits"]);
    }

    #[test]
    fn delta_forms() {
        assert_eq!("0.1".parse::<DeltaSpec>().unwrap(), DeltaSpec::Scalar(0.1));
        assert_eq!("0.1, 0.2".parse::<DeltaSpec>().unwrap(), DeltaSpec::PerParticipant(vec![0.1, 0.2]));
        assert_eq!(
            "uniform-random(0.001,0.1)".parse::<DeltaSpec>().unwrap(),
            DeltaSpec::UniformRandom { lo: 0.001, hi: 0.1 }
        );
        let mut cfg = RunConfig::default();
        cfg.delta = DeltaSpec::PerParticipant(vec![0.1, 0.2]);
        assert!(cfg.validate().is_err());
        cfg.grid = (2, 1);
        assert!(cfg.validate().is_ok());
        cfg.delta = DeltaSpec::Scalar(0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fedsgd_rejects_vertical_grids() {
        let cfg = RunConfig {
            mode: Mode::FedsgdSecure,
            grid: (2, 2),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(f)) if f[0].field == "grid"));
        assert!(parse_grid("10x7").unwrap() == (10, 7));
        assert!(parse_grid("10-7").is_err());
        assert!(RunConfig::profile("huge").is_err());
    }
}
