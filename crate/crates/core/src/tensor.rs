//! Dense row-major matrices and the kernels the rest of the crate builds on.
//!
//! Batched activations are stored feature-major: a `[features x batch]`
//! matrix holds one sample per column. Weights are `[out x in]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Column vector.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers the given rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let src = self.row(r);
            data.extend(cols.iter().map(|&c| src[c]));
        }
        Tensor {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    /// Gathers whole columns (samples) in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let src = self.row(r);
            data.extend(cols.iter().map(|&c| src[c]));
        }
        Tensor {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Largest elementwise relative difference, with `floor` guarding
    /// the denominator near zero.
    pub fn max_rel_diff(&self, other: &Tensor, floor: f64) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

fn check_finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    check_finite(out, "matmul")
}

/// `a[m x k] * b[n x k]^T`, without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out.data[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k x m]^T * b[k x n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Adds the column vector `b[m x 1]` to every column of `x[m x n]`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.cols != 1 || b.rows != x.rows {
        return Err(Error::Shape {
            op: "add_bias",
            left: x.shape(),
            right: b.shape(),
        });
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        let bv = b.data[r];
        for v in out.row_mut(r) {
            *v += bv;
        }
    }
    check_finite(out, "add_bias")
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v < 0.0 { slope * v } else { v })
}

/// Column-wise softmax probabilities, stabilized by max-subtraction.
pub(crate) fn softmax_columns(logits: &Tensor) -> Tensor {
    let (c, b) = logits.shape();
    let mut out = Tensor::zeros(c, b);
    for j in 0..b {
        let max = (0..c).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..c {
            let e = (logits.get(i, j) - max).exp();
            out.set(i, j, e);
            z += e;
        }
        for i in 0..c {
            out.set(i, j, out.get(i, j) / z);
        }
    }
    out
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.cols {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.rows) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.rows,
        });
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let (c, b) = logits.shape();
    let mut total = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        let max = (0..c).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|i| (logits.get(i, j) - max).exp()).sum::<f64>().ln();
        total += lse - logits.get(label, j);
    }
    let loss = total / b as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("softmax_cross_entropy"))
    }
}

/// Index of the largest logit in each column.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    (0..logits.cols)
        .map(|j| {
            let mut best = 0;
            for i in 1..logits.rows {
                if logits.get(i, j) > logits.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = Tensor::identity(2);
        let x = Tensor::column(vec![3.0, 4.0]);
        assert_eq!(matmul(&i, &x).unwrap(), x);
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::column(vec![3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.get(i, p) * b.get(p, j);
                }
                let g = got.get(i, j);
                assert!((g - s).abs() <= 1e-12 * s.abs().max(1e-300), "{g} vs {s}");
            }
        }
        assert!(matmul_nt(&a, &b.transpose()).max_rel_diff(&got, 1e-12) < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).max_rel_diff(&got, 1e-12) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn bias_add() {
        let x = Tensor::column(vec![1.0, 2.0]);
        assert_eq!(add_bias(&x, &Tensor::zeros(2, 1)).unwrap(), x);
        let b = Tensor::column(vec![10.0, 20.0]);
        assert_eq!(add_bias(&x, &b).unwrap().data(), &[11.0, 22.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 6);
        let b = random(&mut rng, 4, 1);
        let got = add_bias(&x, &b).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(got.get(r, c), x.get(r, c) + b.get(r, 0));
            }
        }
        assert!(add_bias(&x, &Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::column(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let y = Tensor::column(vec![-2.0, 3.0]);
        assert_eq!(leaky_relu(&y, 0.01).data(), &[-0.02, 3.0]);
        assert_eq!(relu(&Tensor::zeros(5, 1)), Tensor::zeros(5, 1));
        assert_eq!(leaky_relu(&Tensor::zeros(5, 1), 0.2), Tensor::zeros(5, 1));
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let uniform = Tensor::filled(10, 1, 0.3);
        let loss = softmax_cross_entropy(&uniform, &[4]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let saturated = Tensor::column(vec![20.0, -20.0]);
        assert!(softmax_cross_entropy(&saturated, &[0]).unwrap() < 1e-8);

        let huge = Tensor::column(vec![1e300, -1e300]);
        assert!(softmax_cross_entropy(&huge, &[1]).unwrap().is_finite());

        assert!(matches!(
            softmax_cross_entropy(&uniform, &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_log_sum_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&mut rng, 4, 3).scale(3.0);
        let labels = [0, 3, 2];
        // direct, unstabilized log-sum-exp is safe at this magnitude
        let mut expect = 0.0;
        for (j, &l) in labels.iter().enumerate() {
            let z: f64 = (0..4).map(|i| logits.get(i, j).exp()).sum();
            expect += z.ln() - logits.get(l, j);
        }
        expect /= 3.0;
        let got = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.abs());
    }
}
