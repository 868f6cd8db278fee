//! Forward pass with activation capture and MLP-output substitution.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::vocab::TokenSequence;

use super::{gelu_tanh, EncoderWeights, LayerNormParams};

/// Public per-layer activations captured during `encode`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per layer: residual stream after the block, seq x d_model.
    pub residuals: Vec<Mat>,
    /// Per layer: post-nonlinearity MLP activation (the candidate key),
    /// seq x d_mlp.
    pub mlp_keys: Vec<Mat>,
    /// Per layer: MLP branch output before the residual addition,
    /// seq x d_model.
    pub mlp_outputs: Vec<Mat>,
    /// Final-layer-norm output at the EOS position.
    pub eos_embedding: Vec<f64>,
}

/// Layer-norm activations needed for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    /// Normalized inputs (before scale/shift), seq x dim.
    pub x_hat: Mat,
    /// 1/sqrt(var + eps) per position.
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per head: seq x seq attention probabilities (causal lower triangle).
    pub probs: Vec<Mat>,
    pub ln2: LnCache,
    /// Pre-nonlinearity MLP activations, seq x d_mlp.
    pub mlp_pre: Mat,
    /// Post-nonlinearity MLP activations, seq x d_mlp.
    pub mlp_act: Mat,
    /// MLP branch output after any substitution, seq x d_model.
    pub mlp_out: Mat,
    /// Residual stream after the block, seq x d_model.
    pub h_out: Mat,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub final_ln: LnCache,
    pub eos_embedding: Vec<f64>,
}

fn layer_norm_rows(params: &LayerNormParams, x: &Mat, eps: f64) -> (Mat, LnCache) {
    let (rows, dim) = (x.rows, x.cols);
    let mut out = Mat::zeros(rows, dim);
    let mut x_hat = Mat::zeros(rows, dim);
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..dim {
            let normed = (row[c] - mean) * istd;
            x_hat.row_mut(r)[c] = normed;
            out.row_mut(r)[c] = params.scale[c] * normed + params.shift[c];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

impl EncoderWeights {
    /// Full forward pass. `substitution` replaces the MLP branch output
    /// (before the residual addition) at one (layer, token) position.
    pub(crate) fn forward_cache(
        &self,
        seq: &TokenSequence,
        substitution: Option<(usize, usize, &[f64])>,
    ) -> Result<ForwardCache> {
        self.check_positions(seq)?;
        if let Some((layer, token, v)) = substitution {
            if layer >= self.config.n_layers {
                return Err(Error::Validation(format!(
                    "substitution layer {layer} out of range (n_layers {})",
                    self.config.n_layers
                )));
            }
            if token >= seq.eos_position() {
                return Err(Error::Validation(format!(
                    "substitution token {token} must be strictly before the EOS position {}",
                    seq.eos_position()
                )));
            }
            if v.len() != self.config.d_model {
                return Err(Error::Validation(format!(
                    "substitution vector has dimension {}, expected {}",
                    v.len(),
                    self.config.d_model
                )));
            }
        }

        let t = seq.ids.len();
        let d = self.config.d_model;
        let f = self.config.d_mlp;
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let eps = self.config.ln_epsilon;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut h = Mat::zeros(t, d);
        for (pos, &id) in seq.ids.iter().enumerate() {
            let tok = self.token_embedding.row(id as usize);
            let pe = self.positional_embedding.row(pos);
            for c in 0..d {
                h.row_mut(pos)[c] = tok[c] + pe[c];
            }
        }

        let mut layer_caches = Vec::with_capacity(self.config.n_layers);
        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let (ln1_out, ln1) = layer_norm_rows(&layer.ln1, &h, eps);

            let mut q = Mat::zeros(t, d);
            let mut k = Mat::zeros(t, d);
            let mut v = Mat::zeros(t, d);
            for pos in 0..t {
                let x = ln1_out.row(pos);
                let qq = layer.attn.w_q.matvec(x);
                let kk = layer.attn.w_k.matvec(x);
                let vv = layer.attn.w_v.matvec(x);
                for c in 0..d {
                    q.row_mut(pos)[c] = qq[c] + layer.attn.b_q[c];
                    k.row_mut(pos)[c] = kk[c] + layer.attn.b_k[c];
                    v.row_mut(pos)[c] = vv[c] + layer.attn.b_v[c];
                }
            }

            // Causal attention: position i sees positions 0..=i only.
            let mut probs = vec![Mat::zeros(t, t); heads];
            let mut ctx = Mat::zeros(t, d);
            for head in 0..heads {
                let off = head * hd;
                for i in 0..t {
                    let qi = &q.row(i)[off..off + hd];
                    let mut logits = vec![0.0; i + 1];
                    let mut max = f64::NEG_INFINITY;
                    for (j, logit) in logits.iter_mut().enumerate() {
                        let kj = &k.row(j)[off..off + hd];
                        *logit = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(*logit);
                    }
                    let mut denom = 0.0;
                    for logit in logits.iter_mut() {
                        *logit = (*logit - max).exp();
                        denom += *logit;
                    }
                    for (j, &e) in logits.iter().enumerate() {
                        let p = e / denom;
                        *probs[head].at_mut(i, j) = p;
                        let vj = &v.row(j)[off..off + hd];
                        for c in 0..hd {
                            ctx.row_mut(i)[off + c] += p * vj[c];
                        }
                    }
                }
            }

            let mut h_mid = Mat::zeros(t, d);
            for pos in 0..t {
                let attn_out = layer.attn.w_o.matvec(ctx.row(pos));
                for c in 0..d {
                    h_mid.row_mut(pos)[c] = h.row(pos)[c] + attn_out[c] + layer.attn.b_o[c];
                }
            }

            let (ln2_out, ln2) = layer_norm_rows(&layer.ln2, &h_mid, eps);
            let mut mlp_pre = Mat::zeros(t, f);
            let mut mlp_act = Mat::zeros(t, f);
            let mut mlp_out = Mat::zeros(t, d);
            for pos in 0..t {
                let pre = layer.w_fc.matvec(ln2_out.row(pos));
                for c in 0..f {
                    let x = pre[c] + layer.b_fc[c];
                    mlp_pre.row_mut(pos)[c] = x;
                    mlp_act.row_mut(pos)[c] = gelu_tanh(x);
                }
                let out = layer.w_proj.matvec(mlp_act.row(pos));
                for c in 0..d {
                    mlp_out.row_mut(pos)[c] = out[c] + layer.b_proj[c];
                }
            }
            if let Some((sub_layer, sub_token, sub_v)) = substitution {
                if sub_layer == layer_idx {
                    mlp_out.row_mut(sub_token).copy_from_slice(sub_v);
                }
            }

            let mut h_out = Mat::zeros(t, d);
            for pos in 0..t {
                for c in 0..d {
                    h_out.row_mut(pos)[c] = h_mid.row(pos)[c] + mlp_out.row(pos)[c];
                }
            }
            if !h_out.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activations leaving layer {layer_idx}"
                )));
            }

            layer_caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ln2,
                mlp_pre,
                mlp_act,
                mlp_out,
                h_out: h_out.clone(),
            });
            h = h_out;
        }

        let (final_out, final_ln) = layer_norm_rows(&self.final_ln, &h, eps);
        let eos_embedding = final_out.row(seq.eos_position()).to_vec();
        if !eos_embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite EOS embedding".into()));
        }
        Ok(ForwardCache {
            layers: layer_caches,
            final_ln,
            eos_embedding,
        })
    }

    /// Encode a sequence, returning the EOS embedding and the trace of
    /// per-layer activations.
    pub fn encode(&self, seq: &TokenSequence) -> Result<(Vec<f64>, ForwardTrace)> {
        let cache = self.forward_cache(seq, None)?;
        let trace = ForwardTrace {
            residuals: cache.layers.iter().map(|l| l.h_out.clone()).collect(),
            mlp_keys: cache.layers.iter().map(|l| l.mlp_act.clone()).collect(),
            mlp_outputs: cache.layers.iter().map(|l| l.mlp_out.clone()).collect(),
            eos_embedding: cache.eos_embedding.clone(),
        };
        Ok((cache.eos_embedding, trace))
    }

    /// EOS embedding only.
    pub fn encode_embedding(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.forward_cache(seq, None)?.eos_embedding)
    }

    /// Encode with the MLP branch output at (layer, token) replaced by `v`
    /// before the residual addition; downstream computation is unchanged.
    pub fn encode_with_substitution(
        &self,
        seq: &TokenSequence,
        layer: usize,
        token: usize,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self
            .forward_cache(seq, Some((layer, token, v)))?
            .eos_embedding)
    }

    /// The key candidate at (layer, token): the post-nonlinearity MLP
    /// activation σ(W_fc·LN2(h) + b_fc), i.e. the input W_proj sees.
    pub fn collect_mlp_key(
        &self,
        seq: &TokenSequence,
        layer: usize,
        token: usize,
    ) -> Result<Vec<f64>> {
        self.check_layer_token(seq, layer, token)?;
        let cache = self.forward_cache(seq, None)?;
        Ok(cache.layers[layer].mlp_act.row(token).to_vec())
    }

    /// The model's own MLP branch output at (layer, token) — the value the
    /// optimizer starts from.
    pub fn mlp_output_at(
        &self,
        seq: &TokenSequence,
        layer: usize,
        token: usize,
    ) -> Result<Vec<f64>> {
        self.check_layer_token(seq, layer, token)?;
        let cache = self.forward_cache(seq, None)?;
        Ok(cache.layers[layer].mlp_out.row(token).to_vec())
    }

    fn check_layer_token(&self, seq: &TokenSequence, layer: usize, token: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::Validation(format!(
                "layer {layer} out of range (n_layers {})",
                self.config.n_layers
            )));
        }
        if token >= seq.ids.len() {
            return Err(Error::Validation(format!(
                "token index {token} out of range for sequence of length {}",
                seq.ids.len()
            )));
        }
        Ok(())
    }
}
