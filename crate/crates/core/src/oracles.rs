//! Independent brute-force references used by tests and acceptance checks.
//!
//! Nothing in this module calls into the main numerical kernels: the forward
//! reference re-derives the encoder arithmetic with straight-line loops, the
//! constrained minimizer solves raw KKT systems by Gaussian elimination
//! rather than reusing the Cholesky path, and the covariance reference uses
//! compensated summation. Agreement between these and the production code is
//! evidence, not tautology.
//!
//! The references are only run at small dimensions (constrained systems up
//! to 8, encoders up to d_model 32); they exist for correctness, not speed.

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::vocab::TokenSequence;

/// Tolerance with a context label so failures say which comparison broke.
#[derive(Debug, Clone)]
pub struct OracleTolerance {
    pub absolute: f64,
    pub relative: f64,
    pub context: String,
}

impl OracleTolerance {
    pub fn new(absolute: f64, relative: f64, context: impl Into<String>) -> Self {
        assert!(absolute >= 0.0 && relative >= 0.0, "negative tolerance");
        assert!(
            absolute > 0.0 || relative > 0.0,
            "tolerance must not be all-zero"
        );
        Self {
            absolute,
            relative,
            context: context.into(),
        }
    }

    /// Check |a - b| <= absolute + relative·|b| for every pair.
    pub fn check_slices(&self, actual: &[f64], expected: &[f64]) -> Result<()> {
        if actual.len() != expected.len() {
            return Err(Error::Validation(format!(
                "[{}] length mismatch: {} vs {}",
                self.context,
                actual.len(),
                expected.len()
            )));
        }
        for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
            let bound = self.absolute + self.relative * e.abs();
            let diff = (a - e).abs();
            if diff > bound || diff.is_nan() {
                return Err(Error::Validation(format!(
                    "[{}] element {i}: {a:e} vs {e:e} exceeds tolerance {bound:e}",
                    self.context
                )));
            }
        }
        Ok(())
    }
}

/// Trace produced by the dense forward reference, in plain nested vectors.
#[derive(Debug, Clone)]
pub struct ReferenceTrace {
    /// Per layer, per position: residual-stream vector after the block.
    pub residuals: Vec<Vec<Vec<f64>>>,
    /// Per layer, per position: post-nonlinearity MLP activation.
    pub keys: Vec<Vec<Vec<f64>>>,
    /// Per layer, per position: MLP branch output (after substitution).
    pub mlp_outputs: Vec<Vec<Vec<f64>>>,
    pub eos_embedding: Vec<f64>,
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn ref_layer_norm(x: &[f64], scale: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let denom = (var + eps).sqrt();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[i] = scale[i] * ((x[i] - mean) / denom) + shift[i];
    }
    out
}

fn ref_linear(w: &Mat, bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows];
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = bias[r];
        for c in 0..w.cols {
            acc += w.data[r * w.cols + c] * x[c];
        }
        *o = acc;
    }
    out
}

/// Straight-line re-implementation of the encoder forward pass, optionally
/// with an MLP-output substitution, used as an equality oracle for `encode`
/// and `encode_with_substitution`.
pub fn dense_forward_reference(
    w: &EncoderWeights,
    seq: &TokenSequence,
    substitution: Option<(usize, usize, &[f64])>,
) -> ReferenceTrace {
    let cfg = &w.config;
    let t = seq.ids.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = d / heads;
    let eps = cfg.ln_epsilon;

    let mut h: Vec<Vec<f64>> = Vec::with_capacity(t);
    for (pos, &id) in seq.ids.iter().enumerate() {
        let mut row = vec![0.0; d];
        for c in 0..d {
            row[c] = w.token_embedding.data[id as usize * d + c]
                + w.positional_embedding.data[pos * d + c];
        }
        h.push(row);
    }

    let mut residuals = Vec::new();
    let mut keys = Vec::new();
    let mut mlp_outputs = Vec::new();

    for (layer_idx, layer) in w.layers.iter().enumerate() {
        let ln1: Vec<Vec<f64>> = h
            .iter()
            .map(|row| ref_layer_norm(row, &layer.ln1.scale, &layer.ln1.shift, eps))
            .collect();
        let q: Vec<Vec<f64>> = ln1
            .iter()
            .map(|x| ref_linear(&layer.attn.w_q, &layer.attn.b_q, x))
            .collect();
        let k: Vec<Vec<f64>> = ln1
            .iter()
            .map(|x| ref_linear(&layer.attn.w_k, &layer.attn.b_k, x))
            .collect();
        let v: Vec<Vec<f64>> = ln1
            .iter()
            .map(|x| ref_linear(&layer.attn.w_v, &layer.attn.b_v, x))
            .collect();

        let mut attn = vec![vec![0.0; d]; t];
        for i in 0..t {
            for head in 0..heads {
                let off = head * hd;
                let mut logits = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[i][off + c] * k[j][off + c];
                    }
                    logits.push(s / (hd as f64).sqrt());
                }
                let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|&l| (l - peak).exp()).collect();
                let total: f64 = weights.iter().sum();
                for j in 0..=i {
                    let p = weights[j] / total;
                    for c in 0..hd {
                        attn[i][off + c] += p * v[j][off + c];
                    }
                }
            }
        }

        let mut h_mid = vec![vec![0.0; d]; t];
        for i in 0..t {
            let proj = ref_linear(&layer.attn.w_o, &layer.attn.b_o, &attn[i]);
            for c in 0..d {
                h_mid[i][c] = h[i][c] + proj[c];
            }
        }

        let mut layer_keys = Vec::with_capacity(t);
        let mut layer_mlp = Vec::with_capacity(t);
        let mut h_out = vec![vec![0.0; d]; t];
        for i in 0..t {
            let ln2 = ref_layer_norm(&h_mid[i], &layer.ln2.scale, &layer.ln2.shift, eps);
            let pre = ref_linear(&layer.w_fc, &layer.b_fc, &ln2);
            let act: Vec<f64> = pre.iter().map(|&x| ref_gelu(x)).collect();
            let mut out = ref_linear(&layer.w_proj, &layer.b_proj, &act);
            if let Some((sl, st, sv)) = substitution {
                if sl == layer_idx && st == i {
                    out = sv.to_vec();
                }
            }
            for c in 0..d {
                h_out[i][c] = h_mid[i][c] + out[c];
            }
            layer_keys.push(act);
            layer_mlp.push(out);
        }
        residuals.push(h_out.clone());
        keys.push(layer_keys);
        mlp_outputs.push(layer_mlp);
        h = h_out;
    }

    let eos_embedding = ref_layer_norm(&h[t - 1], &w.final_ln.scale, &w.final_ln.shift, eps);
    ReferenceTrace {
        residuals,
        keys,
        mlp_outputs,
        eos_embedding,
    }
}

/// Central finite differences: (f(v+εeᵢ) − f(v−εeᵢ)) / 2ε per coordinate.
pub fn finite_diff_grad<F>(f: F, v: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; v.len()];
    let mut probe = v.to_vec();
    for i in 0..v.len() {
        probe[i] = v[i] + epsilon;
        let up = f(&probe)?;
        probe[i] = v[i] - epsilon;
        let down = f(&probe)?;
        probe[i] = v[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "finite differences hit a non-finite value at coordinate {i}"
            )));
        }
        grad[i] = (up - down) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Gaussian elimination with partial pivoting on a dense square system.
fn gaussian_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Numeric(format!(
                "singular constraint system at column {col}"
            )));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in (row + 1)..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Reference solution of  min ‖Δ·C_reg^{1/2}‖_F  subject to  Δ·k* = r.
///
/// The problem decouples row-wise into  min δᵀC_regδ  s.t.  δᵀk* = rᵢ, each
/// solved here through its raw KKT system with a general pivoted eliminator.
pub fn constrained_min_reference(c_reg: &Mat, k_star: &[f64], r: &[f64]) -> Result<Mat> {
    let n = k_star.len();
    assert_eq!(c_reg.rows, n);
    assert_eq!(c_reg.cols, n);
    let mut delta = Mat::zeros(r.len(), n);
    for (row, &target) in r.iter().enumerate() {
        // [ 2C  -k ] [δ]   [0 ]
        // [ kᵀ   0 ] [ν] = [rᵢ]
        let mut a = vec![vec![0.0; n + 1]; n + 1];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = 2.0 * c_reg.at(i, j);
            }
            a[i][n] = -k_star[i];
            a[n][i] = k_star[i];
        }
        let mut b = vec![0.0; n + 1];
        b[n] = target;
        let solution = gaussian_solve(a, b)?;
        delta.row_mut(row).copy_from_slice(&solution[..n]);
    }
    Ok(delta)
}

/// Naive (1/n)·Σ k·kᵀ with Kahan-compensated accumulation.
pub fn covariance_reference(keys: &[Vec<f64>]) -> Result<Mat> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::Validation("covariance reference needs >= 1 key".into()));
    }
    let dim = keys[0].len();
    let mut sum = vec![0.0; dim * dim];
    let mut comp = vec![0.0; dim * dim];
    for key in keys {
        assert_eq!(key.len(), dim, "inconsistent key dimensions");
        for i in 0..dim {
            for j in 0..dim {
                let term = key[i] * key[j] - comp[i * dim + j];
                let fresh = sum[i * dim + j] + term;
                comp[i * dim + j] = (fresh - sum[i * dim + j]) - term;
                sum[i * dim + j] = fresh;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for v in sum.iter_mut() {
        *v *= inv;
    }
    Ok(Mat::from_vec(dim, dim, sum))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let mut a = m.data.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Singular values (descending) by one-sided Jacobi: rotate column pairs of
/// the (possibly transposed) matrix until mutually orthogonal; the singular
/// values are the remaining column norms. Working on the matrix itself
/// rather than its Gram matrix keeps small singular values accurate to
/// machine precision relative to the largest one, which the rank checks
/// need.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    // Arrange as tall-or-square: rows >= cols.
    let (rows, cols) = (m.rows.max(m.cols), m.rows.min(m.cols));
    let mut a = vec![0.0; rows * cols]; // column-major columns
    for r in 0..m.rows {
        for c in 0..m.cols {
            let (rr, cc) = if m.rows >= m.cols { (r, c) } else { (c, r) };
            a[cc * rows + rr] = m.at(r, c);
        }
    }
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return vec![0.0; cols];
    }
    let tol = 1e-15 * frob * frob;
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let (ci, cj) = (i * rows, j * rows);
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..rows {
                    app += a[ci + r] * a[ci + r];
                    aqq += a[cj + r] * a[cj + r];
                    apq += a[ci + r] * a[cj + r];
                }
                if apq.abs() <= tol * 1e-2 || apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..rows {
                    let vi = a[ci + r];
                    let vj = a[cj + r];
                    a[ci + r] = c * vi - s * vj;
                    a[cj + r] = s * vi + c * vj;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|i| {
            (0..rows)
                .map(|r| a[i * rows + r] * a[i * rows + r])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}
