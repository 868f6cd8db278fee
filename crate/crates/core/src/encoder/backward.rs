//! Reverse-mode gradient with respect to a substituted MLP branch output.
//!
//! The substituted vector v enters the residual stream at (layer, token) and
//! reaches the EOS embedding through every downstream block. Given
//! dLoss/d(eos_embedding), this walks the chain backwards: final layer norm,
//! then blocks n_layers-1 .. layer+1 (MLP, layer norms, causal attention
//! mixing), and reads off the gradient at the residual-stream entry the
//! substitution wrote to.

use crate::error::Result;
use crate::linalg::Mat;
use crate::vocab::TokenSequence;

use super::forward::{LayerCache, LnCache};
use super::{gelu_tanh_prime, EncoderWeights, LayerNormParams, LayerWeights};

fn layer_norm_backward(
    params: &LayerNormParams,
    cache: &LnCache,
    pos: usize,
    dy: &[f64],
) -> Vec<f64> {
    let dim = dy.len();
    let x_hat = cache.x_hat.row(pos);
    let inv_std = cache.inv_std[pos];
    let mut dxhat = vec![0.0; dim];
    for c in 0..dim {
        dxhat[c] = dy[c] * params.scale[c];
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / dim as f64;
    let mean_dxhat_xhat = dxhat
        .iter()
        .zip(x_hat)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / dim as f64;
    let mut dx = vec![0.0; dim];
    for c in 0..dim {
        dx[c] = inv_std * (dxhat[c] - mean_dxhat - x_hat[c] * mean_dxhat_xhat);
    }
    dx
}

/// Backward through one block: gradient w.r.t. the block output becomes the
/// gradient w.r.t. the block input.
fn block_backward(
    weights: &LayerWeights,
    cache: &LayerCache,
    n_heads: usize,
    head_dim: usize,
    d_out: &Mat,
) -> Mat {
    let t = d_out.rows;
    let d = d_out.cols;
    let scale = 1.0 / (head_dim as f64).sqrt();

    // h_out = h_mid + mlp_out
    let mut d_h_mid = d_out.clone();
    for pos in 0..t {
        // mlp_out = W_proj σ(mlp_pre) + b_proj
        let d_act = weights.w_proj.matvec_t(d_out.row(pos));
        let mut d_pre = d_act;
        for (g, &pre) in d_pre.iter_mut().zip(cache.mlp_pre.row(pos)) {
            *g *= gelu_tanh_prime(pre);
        }
        let d_ln2_out = weights.w_fc.matvec_t(&d_pre);
        let dx = layer_norm_backward(&weights.ln2, &cache.ln2, pos, &d_ln2_out);
        for c in 0..d {
            d_h_mid.row_mut(pos)[c] += dx[c];
        }
    }

    // h_mid = h_in + W_o ctx + b_o
    let mut d_h_in = d_h_mid.clone();
    let mut d_ctx = Mat::zeros(t, d);
    for pos in 0..t {
        let g = weights.attn.w_o.matvec_t(d_h_mid.row(pos));
        d_ctx.row_mut(pos).copy_from_slice(&g);
    }

    let mut d_q = Mat::zeros(t, d);
    let mut d_k = Mat::zeros(t, d);
    let mut d_v = Mat::zeros(t, d);
    for head in 0..n_heads {
        let off = head * head_dim;
        let probs = &cache.probs[head];
        for i in 0..t {
            let d_ctx_i = &d_ctx.row(i)[off..off + head_dim];
            // dp[j] = d_ctx_i · v_j ; dv_j += p_ij d_ctx_i
            let mut dp = vec![0.0; i + 1];
            for (j, dp_j) in dp.iter_mut().enumerate() {
                let p = probs.at(i, j);
                let vj = &cache.v.row(j)[off..off + head_dim];
                *dp_j = d_ctx_i.iter().zip(vj).map(|(a, b)| a * b).sum();
                for c in 0..head_dim {
                    d_v.row_mut(j)[off + c] += p * d_ctx_i[c];
                }
            }
            // softmax backward within the causal row
            let dot: f64 = (0..=i).map(|j| probs.at(i, j) * dp[j]).sum();
            for (j, &dp_j) in dp.iter().enumerate() {
                let ds = probs.at(i, j) * (dp_j - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[off..off + head_dim];
                let qi = &cache.q.row(i)[off..off + head_dim];
                for c in 0..head_dim {
                    d_q.row_mut(i)[off + c] += ds * kj[c];
                    d_k.row_mut(j)[off + c] += ds * qi[c];
                }
            }
        }
    }

    for pos in 0..t {
        let mut d_ln1_out = weights.attn.w_q.matvec_t(d_q.row(pos));
        let from_k = weights.attn.w_k.matvec_t(d_k.row(pos));
        let from_v = weights.attn.w_v.matvec_t(d_v.row(pos));
        for c in 0..d {
            d_ln1_out[c] += from_k[c] + from_v[c];
        }
        let dx = layer_norm_backward(&weights.ln1, &cache.ln1, pos, &d_ln1_out);
        for c in 0..d {
            d_h_in.row_mut(pos)[c] += dx[c];
        }
    }
    d_h_in
}

impl EncoderWeights {
    /// d(loss)/dv for a substituted MLP output at (layer, token), given
    /// d(loss)/d(eos_embedding). Linear in `eos_grad`.
    pub fn grad_wrt_substitution(
        &self,
        seq: &TokenSequence,
        layer: usize,
        token: usize,
        v: &[f64],
        eos_grad: &[f64],
    ) -> Result<Vec<f64>> {
        let cache = self.forward_cache(seq, Some((layer, token, v)))?;
        Ok(self.backward_from_eos(seq, &cache, layer, token, eos_grad))
    }

    /// Shared backward walk used by both the public gradient op and the
    /// value optimizer (which reuses the forward cache from its loss
    /// evaluation).
    pub(crate) fn backward_from_eos_cache(
        &self,
        seq: &TokenSequence,
        cache: &super::ForwardCache,
        layer: usize,
        token: usize,
        eos_grad: &[f64],
    ) -> Vec<f64> {
        self.backward_from_eos(seq, cache, layer, token, eos_grad)
    }

    fn backward_from_eos(
        &self,
        seq: &TokenSequence,
        cache: &super::ForwardCache,
        layer: usize,
        token: usize,
        eos_grad: &[f64],
    ) -> Vec<f64> {
        let t = seq.ids.len();
        let d = self.config.d_model;
        assert_eq!(eos_grad.len(), d, "eos_grad dimension mismatch");

        // Through the final layer norm; only the EOS row carries gradient.
        let mut d_h = Mat::zeros(t, d);
        let eos = seq.eos_position();
        let dx = layer_norm_backward(&self.final_ln, &cache.final_ln, eos, eos_grad);
        d_h.row_mut(eos).copy_from_slice(&dx);

        for l in ((layer + 1)..self.config.n_layers).rev() {
            d_h = block_backward(
                &self.layers[l],
                &cache.layers[l],
                self.config.n_heads,
                self.config.head_dim(),
                &d_h,
            );
        }
        // h_out[layer][token] = h_mid[token] + v, so dL/dv is the gradient
        // at that residual-stream entry.
        d_h.row(token).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::SplitMix64;
    use crate::vocab::{tokenize, Vocabulary};

    fn setup(seed: u64) -> (EncoderWeights, Vocabulary) {
        let vocab = Vocabulary::build_from_corpus("a b c d e f g h", 16).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            d_mlp: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 16,
            seed,
            ..EncoderConfig::default()
        };
        (EncoderWeights::init(cfg).unwrap(), vocab)
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let (w, vocab) = setup(0);
        let seq = tokenize("a b c", &vocab, 16).unwrap();
        let v = vec![0.1; w.config.d_model];
        let zero = vec![0.0; w.config.d_model];
        let g = w.grad_wrt_substitution(&seq, 0, 1, &v, &zero).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let (w, vocab) = setup(1);
        let seq = tokenize("a b c d", &vocab, 16).unwrap();
        let v = vec![0.05; w.config.d_model];
        let mut rng = SplitMix64::new(9);
        let eos_grad: Vec<f64> = (0..w.config.d_model).map(|_| rng.next_normal()).collect();
        let doubled: Vec<f64> = eos_grad.iter().map(|&x| 2.0 * x).collect();
        let g1 = w.grad_wrt_substitution(&seq, 0, 2, &v, &eos_grad).unwrap();
        let g2 = w.grad_wrt_substitution(&seq, 0, 2, &v, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        use crate::linalg::dot;
        use crate::oracles::finite_diff_grad;

        let mut failures = Vec::new();
        for case in 0..8u64 {
            let (w, vocab) = setup(case);
            let seq = tokenize("a b c d e", &vocab, 16).unwrap();
            let mut rng = SplitMix64::new(1000 + case);
            let layer = (case % 2) as usize;
            let token = 1 + (case as usize % 3);
            let v: Vec<f64> = (0..w.config.d_model)
                .map(|_| 0.1 * rng.next_normal())
                .collect();
            let probe: Vec<f64> = (0..w.config.d_model).map(|_| rng.next_normal()).collect();

            // loss(v) = probe · eos(v), so dL/d(eos) = probe.
            let analytic = w
                .grad_wrt_substitution(&seq, layer, token, &v, &probe)
                .unwrap();
            let numeric = finite_diff_grad(
                |vv| {
                    let eos = w.encode_with_substitution(&seq, layer, token, vv)?;
                    Ok(dot(&probe, &eos))
                },
                &v,
                1e-4,
            )
            .unwrap();
            let err_norm = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale = numeric.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-8);
            if err_norm / scale > 1e-4 {
                failures.push(format!(
                    "case {case} layer {layer} token {token}: rel err {:.2e}",
                    err_norm / scale
                ));
            }
        }
        assert!(failures.is_empty(), "{failures:?}");
    }

    #[test]
    fn last_layer_non_eos_substitution_has_zero_gradient() {
        // No attention runs after the final block, so a non-EOS position
        // cannot influence the EOS output from there.
        let (w, vocab) = setup(2);
        let seq = tokenize("a b c", &vocab, 16).unwrap();
        let v = vec![0.3; w.config.d_model];
        let ones = vec![1.0; w.config.d_model];
        let g = w
            .grad_wrt_substitution(&seq, w.config.n_layers - 1, 1, &v, &ones)
            .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }
}
