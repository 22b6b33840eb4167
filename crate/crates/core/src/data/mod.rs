//! Datasets, synthetic generators, and grid partitioning.

mod idx;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};

pub use idx::{load_mnist, load_mnist_dir, one_hot, parse_images, parse_labels, CLASSES};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ring::ParticipantId;
use crate::rng::{global_stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    /// One-hot rows for classification, one real column for regression.
    pub y: Matrix,
    /// Raw class labels when the dataset is a classification set.
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::shape("Dataset rows", x.rows(), y.rows()));
        }
        Ok(Dataset {
            name: name.into(),
            x,
            y,
            labels: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.n());
        Dataset {
            name: self.name.clone(),
            x: self.x.row_range(0..n),
            y: self.y.row_range(0..n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }
}

/// Synthetic linear-regression task with its closed-form optimum.
#[derive(Debug, Clone)]
pub struct LinregTask {
    pub data: Dataset,
    pub w_true: Vec<f64>,
    /// Normal-equation solution `(XᵀX)⁻¹Xᵀy`.
    pub w_star: Vec<f64>,
    /// `F(w*) = (1/2n)‖Xw* − y‖²`.
    pub f_star: f64,
}

const LINREG_ATTEMPTS: u32 = 3;

/// `x ~ N(0, 1)`, `y = x·w_true + N(0, noise_sd²)`, with `w_true ~ N(0, 1)`.
pub fn synthetic_linreg(n: usize, d: usize, noise_sd: f64, seed: u64) -> Result<LinregTask> {
    if d == 0 || n <= d {
        return Err(Error::arg(format!("synthetic_linreg needs n > d >= 1 (n={n}, d={d})")));
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::arg(format!("noise_sd={noise_sd} must be non-negative")));
    }
    for attempt in 0..LINREG_ATTEMPTS {
        let mut rng = global_stream(seed, Purpose::Data, attempt);
        let x = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        let w_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
        let y: Vec<f64> = (0..n)
            .map(|r| {
                let clean: f64 = x.row(r).iter().zip(&w_true).map(|(a, b)| a * b).sum();
                if noise_sd == 0.0 {
                    clean
                } else {
                    clean + noise.sample(&mut rng)
                }
            })
            .collect();
        let Some(w_star) = normal_equations(&x, &y) else {
            continue;
        };
        let f_star = x
            .data()
            .chunks(d)
            .zip(&y)
            .map(|(row, t)| {
                let p: f64 = row.iter().zip(&w_star).map(|(a, b)| a * b).sum();
                (p - t).powi(2)
            })
            .sum::<f64>()
            / (2.0 * n as f64);
        let data = Dataset::new(format!("linreg-n{n}-d{d}"), x, Matrix::column(y))?;
        return Ok(LinregTask {
            data,
            w_true,
            w_star,
            f_star,
        });
    }
    Err(Error::RankDeficient(format!(
        "XᵀX singular in {LINREG_ATTEMPTS} attempts"
    )))
}

fn normal_equations(x: &Matrix, y: &[f64]) -> Option<Vec<f64>> {
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
    let yv = DVector::from_column_slice(y);
    let gram = xm.transpose() * &xm;
    let rhs = xm.transpose() * yv;
    gram.cholesky().map(|c| c.solve(&rhs).as_slice().to_vec())
}

/// Grid coordinate of a participant, both indices 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridId {
    pub i: u16,
    pub j: u16,
}

impl GridId {
    pub fn new(i: u16, j: u16) -> Self {
        GridId { i, j }
    }

    /// Row-major participant id: `(i − 1)·m_v + (j − 1)`.
    pub fn participant(self, mv: u16) -> ParticipantId {
        ParticipantId((self.i - 1) * mv + (self.j - 1))
    }
}

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.i, self.j)
    }
}

/// Splits samples into `mh` contiguous row ranges and features into `mv`
/// contiguous column ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub mh: u16,
    pub mv: u16,
    pub sample_ranges: Vec<Range<usize>>,
    pub feature_ranges: Vec<Range<usize>>,
    /// Optional row permutation applied before slicing.
    pub row_order: Option<Vec<usize>>,
}

/// `parts` contiguous ranges covering `0..len`; earlier ranges take the remainder.
pub fn split_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let size = base + usize::from(p < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

impl PartitionPlan {
    pub fn contiguous(n: usize, d: usize, mh: u16, mv: u16) -> Result<Self> {
        if mh == 0 || mv == 0 {
            return Err(Error::arg(format!("grid {mh}x{mv} must be at least 1x1")));
        }
        if usize::from(mh) > n || usize::from(mv) > d {
            return Err(Error::arg(format!(
                "grid {mh}x{mv} leaves empty shards on {n} samples x {d} features"
            )));
        }
        Ok(PartitionPlan {
            mh,
            mv,
            sample_ranges: split_ranges(n, mh.into()),
            feature_ranges: split_ranges(d, mv.into()),
            row_order: None,
        })
    }

    /// Shuffles samples with a seeded permutation before slicing.
    pub fn shuffled(mut self, seed: u64) -> Self {
        let n = self.sample_ranges.last().map_or(0, |r| r.end);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut global_stream(seed, Purpose::Shuffle, 0));
        self.row_order = Some(order);
        self
    }

    pub fn ids(&self) -> Vec<GridId> {
        (1..=self.mh)
            .flat_map(|i| (1..=self.mv).map(move |j| GridId::new(i, j)))
            .collect()
    }

    pub fn participants(&self) -> usize {
        usize::from(self.mh) * usize::from(self.mv)
    }

    pub fn n(&self) -> usize {
        self.sample_ranges.last().map_or(0, |r| r.end)
    }

    pub fn d(&self) -> usize {
        self.feature_ranges.last().map_or(0, |r| r.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub x: Matrix,
    pub y: Matrix,
}

#[derive(Debug, Clone)]
pub struct GridShards {
    pub plan: PartitionPlan,
    pub shards: BTreeMap<GridId, Shard>,
}

impl GridShards {
    pub fn get(&self, id: GridId) -> &Shard {
        &self.shards[&id]
    }

    /// Reassembles the (possibly permuted) feature matrix from all shards.
    pub fn reassemble(&self) -> Result<Matrix> {
        let mut bands = Vec::new();
        for i in 1..=self.plan.mh {
            let row: Vec<&Matrix> = (1..=self.plan.mv)
                .map(|j| &self.shards[&GridId::new(i, j)].x)
                .collect();
            bands.push(Matrix::hstack(&row)?);
        }
        Matrix::vstack(&bands.iter().collect::<Vec<_>>())
    }
}

/// Cuts the dataset along the plan; each shard carries the labels of its rows.
pub fn apply_partition(ds: &Dataset, plan: &PartitionPlan) -> Result<GridShards> {
    if plan.n() != ds.n() || plan.d() != ds.d() {
        return Err(Error::arg(format!(
            "plan covers {}x{}, dataset is {}x{}",
            plan.n(),
            plan.d(),
            ds.n(),
            ds.d()
        )));
    }
    let (x, y) = match &plan.row_order {
        Some(order) => (ds.x.select_rows(order), ds.y.select_rows(order)),
        None => (ds.x.clone(), ds.y.clone()),
    };
    let mut shards = BTreeMap::new();
    for (i, rows) in plan.sample_ranges.iter().enumerate() {
        let xb = x.row_range(rows.clone());
        let yb = y.row_range(rows.clone());
        for (j, cols) in plan.feature_ranges.iter().enumerate() {
            shards.insert(
                GridId::new(i as u16 + 1, j as u16 + 1),
                Shard {
                    x: xb.col_range(cols.clone()),
                    y: yb.clone(),
                },
            );
        }
    }
    Ok(GridShards {
        plan: plan.clone(),
        shards,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::linalg::{local_gradient, Architecture};

    #[test]
    fn noiseless_linreg_recovers_truth() {
        let t = synthetic_linreg(200, 5, 0.0, 1).unwrap();
        assert!(t.f_star <= 1e-20, "{}", t.f_star);
        for (a, b) in t.w_star.iter().zip(&t.w_true) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn linreg_optimum_is_stationary() {
        let t = synthetic_linreg(300, 6, 0.5, 2).unwrap();
        let g = local_gradient(
            &t.data.x,
            &t.data.y,
            &[Matrix::column(t.w_star.clone())],
            &Architecture::linear_regression(),
        )
        .unwrap();
        assert!(g[0].max_abs() <= 1e-10);
    }

    #[test]
    fn linreg_optimum_matches_long_gradient_descent() {
        // oracle: iterative solver, centralized GD run to convergence
        let t = synthetic_linreg(400, 4, 0.3, 3).unwrap();
        let arch = Architecture::linear_regression();
        let mut w = Matrix::column(vec![0.0; 4]);
        for _ in 0..5000 {
            let g = local_gradient(&t.data.x, &t.data.y, &[w.clone()], &arch).unwrap();
            w.axpy(-0.5, &g[0]).unwrap();
        }
        for (a, b) in w.data().iter().zip(&t.w_star) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn linreg_rejects_bad_sizes() {
        assert!(synthetic_linreg(3, 3, 0.1, 0).is_err());
        assert!(synthetic_linreg(3, 0, 0.1, 0).is_err());
    }

    #[test]
    fn remainder_goes_to_earliest_ranges() {
        assert_eq!(split_ranges(10, 3), vec![0..4, 4..7, 7..10]);
        let p = PartitionPlan::contiguous(784, 784, 1, 112).unwrap();
        assert!(p.feature_ranges.iter().all(|r| r.len() == 7));
        assert!(PartitionPlan::contiguous(2, 5, 3, 1).is_err());
        assert!(PartitionPlan::contiguous(2, 5, 0, 1).is_err());
    }

    #[test]
    fn paper_grid_shard_sizes() {
        let p = PartitionPlan::contiguous(60_000, 784, 1000, 112).unwrap();
        assert!(p.sample_ranges.iter().all(|r| r.len() == 60));
        assert!(p.feature_ranges.iter().all(|r| r.len() == 7));
    }

    fn toy(n: usize, d: usize) -> Dataset {
        let x = Matrix::from_fn(n, d, |r, c| (r * 100 + c) as f64);
        let y = Matrix::from_fn(n, 1, |r, _| r as f64);
        Dataset::new("toy", x, y).unwrap()
    }

    #[test]
    fn single_cell_grid_is_the_dataset() {
        let ds = toy(5, 3);
        let g = apply_partition(&ds, &PartitionPlan::contiguous(5, 3, 1, 1).unwrap()).unwrap();
        assert_eq!(g.get(GridId::new(1, 1)), &Shard { x: ds.x.clone(), y: ds.y.clone() });
    }

    #[test]
    fn labels_follow_rows_to_every_column_group() {
        let ds = toy(6, 4);
        let g = apply_partition(&ds, &PartitionPlan::contiguous(6, 4, 2, 2).unwrap()).unwrap();
        assert_eq!(g.get(GridId::new(2, 1)).y, g.get(GridId::new(2, 2)).y);
        assert_eq!(g.get(GridId::new(2, 1)).y.data(), &[3.0, 4.0, 5.0]);
        assert_eq!(g.get(GridId::new(2, 2)).x.row(0), &[302.0, 303.0]);
    }

    #[test]
    fn plan_mismatch_is_rejected() {
        let ds = toy(6, 4);
        assert!(apply_partition(&ds, &PartitionPlan::contiguous(7, 4, 2, 2).unwrap()).is_err());
    }

    #[test]
    fn grid_participant_ids_are_row_major() {
        assert_eq!(GridId::new(1, 1).participant(7), ParticipantId(0));
        assert_eq!(GridId::new(2, 3).participant(7), ParticipantId(9));
    }

    proptest! {
        #[test]
        fn partition_is_lossless(n in 1usize..40, d in 1usize..12, mh in 1u16..6, mv in 1u16..6, seed in any::<u64>(), shuffle: bool) {
            prop_assume!(usize::from(mh) <= n && usize::from(mv) <= d);
            let ds = toy(n, d);
            let mut plan = PartitionPlan::contiguous(n, d, mh, mv).unwrap();
            if shuffle {
                plan = plan.shuffled(seed);
            }
            let g = apply_partition(&ds, &plan).unwrap();
            prop_assert!(g.shards.values().all(|s| s.x.rows() > 0 && s.x.cols() > 0));
            let expected = match &plan.row_order {
                Some(o) => ds.x.select_rows(o),
                None => ds.x.clone(),
            };
            prop_assert_eq!(g.reassemble().unwrap(), expected);
        }
    }
}
