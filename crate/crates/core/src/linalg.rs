//! Dense row-major matrices, activations, losses, and backpropagation for
//! bias-free fully connected networks.

use std::ops::Range;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector.
    pub fn column(v: Vec<f64>) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn row_range(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn col_range(&self, range: Range<usize>) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * range.len());
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Matrix {
            rows: self.rows,
            cols: range.len(),
            data,
        }
    }

    /// Stacks blocks with equal column counts on top of each other.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::shape("vstack", cols, b.cols));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Places blocks with equal row counts side by side.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::shape("hstack", rows, b.rows));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// `self · b`
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} rows on the right", self.cols),
                b.rows,
            ));
        }
        Ok(gemm(self, false, b, false))
    }

    /// `selfᵀ · b`
    pub fn t_matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::shape("t_matmul", self.rows, b.rows));
        }
        Ok(gemm(self, true, b, false))
    }

    /// `self · bᵀ`
    pub fn matmul_t(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::shape("matmul_t", self.cols, b.cols));
        }
        Ok(gemm(self, false, b, true))
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest entry of each row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers above, whose lengths
    // were validated by the shape checks in the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    /// Row-wise softmax; only valid on the output layer.
    Softmax,
}

impl Activation {
    pub fn apply(self, z: &Matrix) -> Matrix {
        let mut out = z.clone();
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in &mut out.data {
                    *v = v.max(0.0);
                }
            }
            Activation::Softmax => {
                let cols = out.cols;
                for row in out.data.chunks_mut(cols.max(1)) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropySoftmax,
    /// `F = (1/2n) · ‖pred − y‖²`
    MeanSquaredError,
}

/// Floor added inside the logarithm of the cross-entropy loss.
pub const CE_FLOOR: f64 = 1e-12;

/// Activations per layer, output loss, and optional L2 weight `λ` (the
/// objective gains `λ · Σ‖W‖²`).
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    activations: Vec<Activation>,
    loss: LossKind,
    l2: f64,
}

impl Architecture {
    pub fn new(activations: Vec<Activation>, loss: LossKind, l2: f64) -> Result<Self> {
        let Some((&last, hidden)) = activations.split_last() else {
            return Err(Error::arg("architecture needs at least one layer"));
        };
        if hidden.contains(&Activation::Softmax) {
            return Err(Error::arg("softmax is only supported on the output layer"));
        }
        match (loss, last) {
            (LossKind::CrossEntropySoftmax, Activation::Softmax) => {}
            (LossKind::CrossEntropySoftmax, _) => {
                return Err(Error::arg("cross-entropy requires a softmax output layer"))
            }
            (LossKind::MeanSquaredError, Activation::Softmax) => {
                return Err(Error::arg("squared error with a softmax output is not supported"))
            }
            (LossKind::MeanSquaredError, _) => {}
        }
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(Error::arg(format!("l2 weight {l2} must be finite and non-negative")));
        }
        Ok(Architecture {
            activations,
            loss,
            l2,
        })
    }

    /// ReLU hidden layers of the given count, softmax cross-entropy output.
    pub fn classifier(layers: usize) -> Self {
        let mut acts = vec![Activation::Relu; layers.saturating_sub(1)];
        acts.push(Activation::Softmax);
        Architecture::new(acts, LossKind::CrossEntropySoftmax, 0.0).expect("valid by construction")
    }

    /// Single identity layer with squared error: linear regression.
    pub fn linear_regression() -> Self {
        Architecture::new(vec![Activation::Identity], LossKind::MeanSquaredError, 0.0)
            .expect("valid by construction")
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layers(&self) -> usize {
        self.activations.len()
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn with_l2(mut self, l2: f64) -> Result<Self> {
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(Error::arg(format!("l2 weight {l2} must be finite and non-negative")));
        }
        self.l2 = l2;
        Ok(self)
    }
}

/// Pre-activations `z` and activations `a` for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub z: Vec<Matrix>,
    pub a: Vec<Matrix>,
}

impl ForwardPass {
    pub fn prediction(&self) -> &Matrix {
        self.a.last().expect("at least one layer")
    }
}

/// `z¹ = input·W¹`, `aʳ = σʳ(zʳ)`, `zʳ⁺¹ = aʳ·Wʳ⁺¹`.
pub fn forward_fc(input: &Matrix, layers: &[Matrix], activations: &[Activation]) -> Result<ForwardPass> {
    let Some(first) = layers.first() else {
        return Err(Error::arg("forward pass needs at least one layer"));
    };
    if input.cols != first.rows {
        return Err(Error::shape("forward_fc", first.rows, input.cols));
    }
    forward_tail(input.matmul(first)?, &layers[1..], activations)
}

/// Continues a forward pass from a given first pre-activation `z¹`, applying
/// `activations[0]` to it and then the `upper` layers.
pub fn forward_tail(z1: Matrix, upper: &[Matrix], activations: &[Activation]) -> Result<ForwardPass> {
    if activations.len() != upper.len() + 1 {
        return Err(Error::shape("forward activations", upper.len() + 1, activations.len()));
    }
    let mut a1 = activations[0].apply(&z1);
    let mut z = vec![z1];
    let mut a = Vec::with_capacity(activations.len());
    for (w, &act) in upper.iter().zip(&activations[1..]) {
        if a1.cols != w.rows {
            return Err(Error::shape("forward_fc", w.rows, a1.cols));
        }
        let zr = a1.matmul(w)?;
        let ar = act.apply(&zr);
        a.push(a1);
        z.push(zr);
        a1 = ar;
    }
    a.push(a1);
    Ok(ForwardPass { z, a })
}

/// Mean loss over rows.
pub fn loss_value(pred: &Matrix, y: &Matrix, loss: LossKind) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::shape(
            "loss_value",
            format!("{:?}", y.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if pred.rows == 0 {
        return Err(Error::arg("loss of an empty batch"));
    }
    let n = pred.rows as f64;
    let total: f64 = match loss {
        LossKind::CrossEntropySoftmax => pred
            .data
            .iter()
            .zip(&y.data)
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * (p + CE_FLOOR).ln())
            .sum(),
        LossKind::MeanSquaredError => {
            0.5 * pred
                .data
                .iter()
                .zip(&y.data)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
        }
    };
    Ok(total / n)
}

/// Loss plus the L2 term.
pub fn objective(x: &Matrix, y: &Matrix, layers: &[Matrix], arch: &Architecture) -> Result<f64> {
    let pass = forward_fc(x, layers, arch.activations())?;
    let reg: f64 = layers
        .iter()
        .map(|w| w.data.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(loss_value(pass.prediction(), y, arch.loss())? + arch.l2() * reg)
}

/// Gradients of the mean objective with respect to every layer, given the
/// forward pass that produced the prediction. `x` is the first layer's input.
pub fn backward(
    x: &Matrix,
    layers: &[Matrix],
    pass: &ForwardPass,
    y: &Matrix,
    arch: &Architecture,
) -> Result<Vec<Matrix>> {
    let n_layers = layers.len();
    if n_layers != arch.layers() || pass.z.len() != n_layers || pass.a.len() != n_layers {
        return Err(Error::shape("backward layers", arch.layers(), n_layers));
    }
    let pred = pass.prediction();
    if pred.shape() != y.shape() {
        return Err(Error::shape(
            "backward labels",
            format!("{:?}", pred.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    if x.rows != pred.rows || x.cols != layers[0].rows {
        return Err(Error::shape(
            "backward input",
            format!("({}, {})", pred.rows, layers[0].rows),
            format!("{:?}", x.shape()),
        ));
    }
    if x.rows == 0 {
        return Err(Error::arg("gradient of an empty batch"));
    }
    let inv_n = 1.0 / x.rows as f64;
    let acts = arch.activations();

    // Output delta: for softmax + CE and for identity + MSE both reduce to (ŷ − y)/n.
    let mut delta = pred.sub(y)?;
    delta.scale(inv_n);
    if acts[n_layers - 1] == Activation::Relu {
        relu_mask(&mut delta, &pass.z[n_layers - 1]);
    }

    let mut grads = vec![Matrix::zeros(0, 0); n_layers];
    for r in (0..n_layers).rev() {
        let input = if r == 0 { x } else { &pass.a[r - 1] };
        let mut g = input.t_matmul(&delta)?;
        if arch.l2() > 0.0 {
            g.axpy(2.0 * arch.l2(), &layers[r])?;
        }
        if r > 0 {
            let mut next = delta.matmul_t(&layers[r])?;
            if acts[r - 1] == Activation::Relu {
                relu_mask(&mut next, &pass.z[r - 1]);
            }
            delta = next;
        }
        grads[r] = g;
    }
    Ok(grads)
}

fn relu_mask(delta: &mut Matrix, z: &Matrix) {
    for (d, &zv) in delta.data.iter_mut().zip(&z.data) {
        if zv <= 0.0 {
            *d = 0.0;
        }
    }
}

/// `(1/|batch|)·∇F` for every layer.
pub fn local_gradient(x: &Matrix, y: &Matrix, layers: &[Matrix], arch: &Architecture) -> Result<Vec<Matrix>> {
    if x.rows == 0 {
        return Err(Error::arg("gradient of an empty batch"));
    }
    let pass = forward_fc(x, layers, arch.activations())?;
    backward(x, layers, &pass, y, arch)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn randn(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha20Rng) -> Matrix {
        let d = Normal::new(0.0, sd).unwrap();
        Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
    }

    fn one_hot(labels: &[usize], classes: usize) -> Matrix {
        Matrix::from_fn(labels.len(), classes, |r, c| f64::from(labels[r] == c))
    }

    // Naive scalar-loop forward pass used as an independent oracle.
    fn naive_forward(x: &Matrix, layers: &[Matrix], acts: &[Activation]) -> Vec<Vec<f64>> {
        let mut cur: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for (w, act) in layers.iter().zip(acts) {
            cur = cur
                .iter()
                .map(|row| {
                    let mut z: Vec<f64> = (0..w.cols())
                        .map(|c| (0..w.rows()).map(|k| row[k] * w.get(k, c)).sum())
                        .collect();
                    match act {
                        Activation::Identity => {}
                        Activation::Relu => z.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 }),
                        Activation::Softmax => {
                            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                            let s: f64 = e.iter().sum();
                            z = e.iter().map(|v| v / s).collect();
                        }
                    }
                    z
                })
                .collect();
        }
        cur
    }

    #[test]
    fn zero_weights_relu_predicts_zero() {
        let x = Matrix::from_fn(3, 2, |r, c| (r + c) as f64);
        let pass = forward_fc(&x, &[Matrix::zeros(2, 4)], &[Activation::Relu]).unwrap();
        assert!(pass.prediction().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = Activation::Softmax.apply(&Matrix::new(1, 2, vec![0.0, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = randn(7, 5, 1.0, &mut rng);
        let layers = vec![randn(5, 6, 0.5, &mut rng), randn(6, 3, 0.5, &mut rng)];
        let acts = [Activation::Relu, Activation::Softmax];
        let fast = forward_fc(&x, &layers, &acts).unwrap();
        let slow = naive_forward(&x, &layers, &acts);
        for r in 0..7 {
            for c in 0..3 {
                assert!((fast.prediction().get(r, c) - slow[r][c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let x = Matrix::zeros(2, 3);
        assert!(forward_fc(&x, &[Matrix::zeros(4, 2)], &[Activation::Relu]).is_err());
        let layers = [Matrix::zeros(3, 2), Matrix::zeros(3, 2)];
        assert!(forward_fc(&x, &layers, &[Activation::Relu, Activation::Softmax]).is_err());
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = randn(4, 3, 1.0, &mut rng);
        let b = randn(4, 5, 1.0, &mut rng);
        let c = randn(6, 3, 1.0, &mut rng);
        let d1 = a.t_matmul(&b).unwrap().sub(&a.transpose().matmul(&b).unwrap()).unwrap();
        let d2 = a.matmul_t(&c).unwrap().sub(&a.matmul(&c.transpose()).unwrap()).unwrap();
        assert!(d1.max_abs() < 1e-14 && d2.max_abs() < 1e-14);
    }

    #[test]
    fn uniform_prediction_loss_is_ln10() {
        let pred = Matrix::from_fn(4, 10, |_, _| 0.1);
        let y = one_hot(&[0, 3, 7, 9], 10);
        let l = loss_value(&pred, &y, LossKind::CrossEntropySoftmax).unwrap();
        assert!((l - 10f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let y = one_hot(&[1, 2], 3);
        assert!(loss_value(&y, &y, LossKind::CrossEntropySoftmax).unwrap() <= 1e-6);
    }

    #[test]
    fn loss_matches_naive_loops() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let logits = randn(5, 4, 1.0, &mut rng);
        let pred = Activation::Softmax.apply(&logits);
        let y = one_hot(&[0, 1, 2, 3, 0], 4);
        let mut naive = 0.0;
        for r in 0..5 {
            for c in 0..4 {
                if y.get(r, c) == 1.0 {
                    naive -= (pred.get(r, c) + 1e-12).ln();
                }
            }
        }
        naive /= 5.0;
        let fast = loss_value(&pred, &y, LossKind::CrossEntropySoftmax).unwrap();
        assert!((fast - naive).abs() <= 1e-12);

        let t = randn(5, 4, 1.0, &mut rng);
        let mut sq = 0.0;
        for r in 0..5 {
            for c in 0..4 {
                sq += (logits.get(r, c) - t.get(r, c)).powi(2);
            }
        }
        let mse = loss_value(&logits, &t, LossKind::MeanSquaredError).unwrap();
        assert!((mse - sq / 10.0).abs() <= 1e-12);
    }

    #[test]
    fn single_sample_first_layer_gradient_by_hand() {
        // one layer softmax: g = xᵀ(ŷ − y)
        let x = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Matrix::new(2, 3, vec![0.2, -0.1, 0.4, 1.0, 2.0, 3.0]).unwrap();
        let y = one_hot(&[2], 3);
        let g = local_gradient(&x, &y, &[w.clone()], &Architecture::classifier(1)).unwrap();
        let logits = [0.2f64, -0.1, 0.4];
        let s: f64 = logits.iter().map(|v| v.exp()).sum();
        let expected = [
            logits[0].exp() / s,
            logits[1].exp() / s,
            logits[2].exp() / s - 1.0,
        ];
        for c in 0..3 {
            assert!((g[0].get(0, c) - expected[c]).abs() <= 1e-15);
            assert_eq!(g[0].get(1, c), 0.0);
        }
    }

    #[test]
    fn least_squares_optimum_is_stationary() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = randn(50, 4, 1.0, &mut rng);
        let y = randn(50, 1, 1.0, &mut rng);
        // oracle: normal equations solved by nalgebra
        let xn = nalgebra::DMatrix::from_row_slice(50, 4, x.data());
        let yn = nalgebra::DVector::from_column_slice(y.data());
        let w = (xn.transpose() * &xn).lu().solve(&(xn.transpose() * yn)).unwrap();
        let w = Matrix::column(w.as_slice().to_vec());
        let g = local_gradient(&x, &y, &[w], &Architecture::linear_regression()).unwrap();
        assert!(g[0].max_abs() <= 1e-10, "{}", g[0].max_abs());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let g = local_gradient(
            &Matrix::zeros(0, 2),
            &Matrix::zeros(0, 1),
            &[Matrix::zeros(2, 1)],
            &Architecture::linear_regression(),
        );
        assert!(matches!(g, Err(Error::Argument(_))));
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![], LossKind::MeanSquaredError, 0.0).is_err());
        assert!(Architecture::new(vec![Activation::Relu], LossKind::CrossEntropySoftmax, 0.0).is_err());
        assert!(Architecture::new(vec![Activation::Softmax], LossKind::MeanSquaredError, 0.0).is_err());
        assert!(Architecture::new(
            vec![Activation::Softmax, Activation::Softmax],
            LossKind::CrossEntropySoftmax,
            0.0
        )
        .is_err());
        assert!(Architecture::classifier(2).with_l2(-1.0).is_err());
    }

    fn finite_difference_check(arch: &Architecture, widths: &[usize], seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 6;
        let x = randn(n, widths[0], 1.0, &mut rng);
        let out = *widths.last().unwrap();
        let y = match arch.loss() {
            LossKind::CrossEntropySoftmax => one_hot(&(0..n).map(|r| r % out).collect::<Vec<_>>(), out),
            LossKind::MeanSquaredError => randn(n, out, 1.0, &mut rng),
        };
        let mut layers: Vec<Matrix> = widths
            .windows(2)
            .map(|w| randn(w[0], w[1], 0.1, &mut rng))
            .collect();
        let grads = local_gradient(&x, &y, &layers, arch).unwrap();
        let h = 1e-5;
        for l in 0..layers.len() {
            for i in 0..layers[l].data().len() {
                let orig = layers[l].data()[i];
                layers[l].data_mut()[i] = orig + h;
                let up = objective(&x, &y, &layers, arch).unwrap();
                layers[l].data_mut()[i] = orig - h;
                let down = objective(&x, &y, &layers, arch).unwrap();
                layers[l].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let bp = grads[l].data()[i];
                let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-3);
                assert!(rel <= 1e-6, "layer {l} entry {i}: fd {fd} bp {bp}");
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for n_layers in 1..=3 {
            let widths: Vec<usize> = [5, 4, 6, 3][..=n_layers].to_vec();
            finite_difference_check(&Architecture::classifier(n_layers), &widths, n_layers as u64);
            let mut acts = vec![Activation::Relu; n_layers - 1];
            acts.push(Activation::Identity);
            let mse = Architecture::new(acts, LossKind::MeanSquaredError, 0.0).unwrap();
            finite_difference_check(&mse, &widths, 10 + n_layers as u64);
            let reg = Architecture::classifier(n_layers).with_l2(0.05).unwrap();
            finite_difference_check(&reg, &widths, 20 + n_layers as u64);
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = randn(9, 4, 1.0, &mut rng);
        let y = one_hot(&[0, 1, 2, 0, 1, 2, 0, 1, 2], 3);
        let layers = vec![randn(4, 5, 0.3, &mut rng), randn(5, 3, 0.3, &mut rng)];
        let arch = Architecture::classifier(2);
        assert_eq!(
            local_gradient(&x, &y, &layers, &arch).unwrap(),
            local_gradient(&x, &y, &layers, &arch).unwrap()
        );
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let m = Matrix::new(3, 4, v).unwrap();
            let s = Activation::Softmax.apply(&m);
            for r in 0..3 {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn relu_is_elementwise_max(v in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let m = Matrix::new(2, 3, v.clone()).unwrap();
            let r = Activation::Relu.apply(&m);
            for (a, b) in r.data().iter().zip(&v) {
                prop_assert_eq!(*a, b.max(0.0));
            }
        }
    }
}
