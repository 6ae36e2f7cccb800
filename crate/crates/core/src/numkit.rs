//! Small deterministic numeric kernel: dense row-major matrices, softmax,
//! first principal component, Pearson correlation and sampling helpers.
//!
//! Everything here is a pure function over its inputs and runs in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance eigendecomposition is used up to this many columns; power
/// iteration above it.
pub const PCA_EXACT_MAX_DIM: usize = 64;
pub const POWER_ITER_TOL: f64 = 1e-10;
pub const POWER_ITER_MAX: usize = 10_000;

/// Loading coordinates with magnitude at or below this are treated as zero
/// when orienting the principal component.
const SIGN_EPS: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite matrix entry {bad}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    left: r.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(
            &self.data, self.rows, self.cols, &rhs.data, rhs.cols, &mut out.data,
        );
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn matmul_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn matmul_at_b_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub fn matmul_a_bt_into(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Sample Pearson correlation coefficient.
///
/// Returns [`Error::UndefinedCorrelation`] when either argument has zero
/// variance instead of propagating a NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: x.len(),
        });
    }
    if is_constant(x) {
        return Err(Error::UndefinedCorrelation("x"));
    }
    if is_constant(y) {
        return Err(Error::UndefinedCorrelation("y"));
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("x"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("y"));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// First principal component of the rows of `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalComponent {
    /// Projection of each centered row onto `loading`.
    pub scores: Vec<f64>,
    /// Unit-norm direction, oriented so its first nonzero coordinate is positive.
    pub loading: Vec<f64>,
    pub eigenvalue: f64,
}

pub fn pca_first_component(data: &Matrix) -> Result<PrincipalComponent> {
    let (n, d) = (data.rows, data.cols);
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if d == 0 {
        return Err(Error::InvalidArgument("PCA needs at least one column".into()));
    }
    let centered = center_columns(data);
    if centered.data.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVariance);
    }

    let (mut loading, eigenvalue) = if d <= PCA_EXACT_MAX_DIM {
        let cov = covariance(&centered);
        let (vals, vecs) = jacobi_eigen(&cov);
        let top = (0..d)
            .max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a)))
            .expect("d >= 1");
        ((0..d).map(|r| vecs.get(r, top)).collect::<Vec<_>>(), vals[top])
    } else {
        power_iteration(&centered)
    };
    if eigenvalue <= 0.0 {
        return Err(Error::ZeroVariance);
    }

    let norm = l2_norm(&loading);
    loading.iter_mut().for_each(|v| *v /= norm);
    if let Some(first) = loading.iter().find(|v| v.abs() > SIGN_EPS) {
        if *first < 0.0 {
            loading.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let scores = (0..n).map(|r| dot(centered.row(r), &loading)).collect();
    Ok(PrincipalComponent {
        scores,
        loading,
        eigenvalue,
    })
}

/// Subtract column means. Constant columns become exact zeros.
fn center_columns(data: &Matrix) -> Matrix {
    let (n, d) = (data.rows, data.cols);
    let mut out = data.clone();
    for c in 0..d {
        let first = data.get(0, c);
        if (0..n).all(|r| data.get(r, c) == first) {
            (0..n).for_each(|r| out.set(r, c, 0.0));
            continue;
        }
        let m = (0..n).map(|r| data.get(r, c)).sum::<f64>() / n as f64;
        (0..n).for_each(|r| out.set(r, c, data.get(r, c) - m));
    }
    out
}

fn covariance(centered: &Matrix) -> Matrix {
    let (n, d) = (centered.rows, centered.cols);
    let mut cov = Matrix::zeros(d, d);
    matmul_at_b_into(&centered.data, n, d, &centered.data, d, &mut cov.data);
    let denom = (n - 1) as f64;
    cov.data.iter_mut().for_each(|v| *v /= denom);
    cov
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues and a matrix whose columns are the eigenvectors.
fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let d = sym.rows;
    let mut a = sym.clone();
    let mut v = Matrix::zeros(d, d);
    (0..d).for_each(|i| v.set(i, i, 1.0));
    let scale: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();

    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a.get(p, q).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..d).map(|i| a.get(i, i)).collect(), v)
}

/// Dominant eigenvector of `XᵀX/(n-1)` without forming the covariance.
fn power_iteration(centered: &Matrix) -> (Vec<f64>, f64) {
    let (n, d) = (centered.rows, centered.cols);
    // Start from the row with the largest norm; deterministic and never
    // orthogonal to the dominant direction in practice.
    let start = (0..n)
        .max_by(|&a, &b| l2_norm(centered.row(a)).total_cmp(&l2_norm(centered.row(b))))
        .expect("n >= 2");
    let mut v: Vec<f64> = centered.row(start).to_vec();
    let nv = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut eigenvalue = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let proj: Vec<f64> = (0..n).map(|r| dot(centered.row(r), &v)).collect();
        let mut next = vec![0.0; d];
        matmul_at_b_into(&centered.data, n, d, &proj, 1, &mut next);
        next.iter_mut().for_each(|x| *x /= (n - 1) as f64);
        let norm = l2_norm(&next);
        if norm == 0.0 {
            return (v, 0.0);
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        eigenvalue = norm;
        v = next;
        if delta < POWER_ITER_TOL {
            break;
        }
    }
    (v, eigenvalue)
}

/// Numerically stable softmax. `-inf` entries map to exactly zero.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    if v.iter().any(|x| x.is_nan()) {
        v.iter_mut().for_each(|x| *x = f64::NAN);
        return Ok(());
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            (*x - max).exp()
        };
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
    Ok(())
}

/// Token ids ordered by descending probability, ties by ascending id.
pub fn sorted_by_probability(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Keep the smallest probability-sorted prefix whose mass reaches `p` and
/// renormalize it.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("nucleus p={p} not in (0, 1]")));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".into()));
    }
    let order = sorted_by_probability(probs);
    let mut kept = 0.0;
    let mut cut = order.len();
    for (i, &tok) in order.iter().enumerate() {
        kept += probs[tok];
        if kept >= p {
            cut = i + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    let mass: f64 = order[..cut].iter().map(|&t| probs[t]).sum();
    for &tok in &order[..cut] {
        out[tok] = probs[tok] / mass;
    }
    Ok(out)
}

/// Inverse-CDF draw from a distribution on the simplex.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mix a base seed with a path of sub-indices (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Named sub-seed, so independent stages draw from unrelated streams.
pub fn named_seed(base: u64, name: &str) -> u64 {
    let path: Vec<u64> = name.bytes().map(u64::from).collect();
    derive_seed(base, &path)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
