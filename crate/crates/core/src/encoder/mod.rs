//! Minimal GPT-2-style unidirectional text encoder.
//!
//! Pre-layer-norm residual blocks, learned positional embeddings, causal
//! multi-head attention, and a two-matrix MLP with a tanh-approximated GELU:
//! `h += Attn(LN1(h)); h += W_proj·σ(W_fc·LN2(h) + b_fc) + b_proj`. The
//! sequence embedding is the final-layer-norm output at the EOS position,
//! the only position that can attend to the whole input.
//!
//! Everything is an immutable value: encoding never mutates weights, so any
//! number of threads may share one `EncoderWeights`.

mod backward;
mod forward;

pub use forward::ForwardTrace;
pub(crate) use forward::ForwardCache;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{quantize_f32, Container};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::SplitMix64;
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    #[serde(rename = "gelu-tanh")]
    GeluTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_ln_epsilon")]
    pub ln_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_nonlinearity() -> Nonlinearity {
    Nonlinearity::GeluTanh
}

fn default_ln_epsilon() -> f64 {
    1e-5
}

impl Default for EncoderConfig {
    /// Desk-scale defaults: 2 layers, d_model 32, d_mlp 128.
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 32,
            d_mlp: 128,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 16,
            nonlinearity: Nonlinearity::GeluTanh,
            ln_epsilon: 1e-5,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_mlp < self.d_model {
            return Err(Error::Validation(format!(
                "d_mlp {} must be >= d_model {}",
                self.d_mlp, self.d_model
            )));
        }
        if self.ln_epsilon <= 0.0 || !self.ln_epsilon.is_finite() {
            return Err(Error::Validation("ln_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNormParams {
    fn unit(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Mat,
    pub b_q: Vec<f64>,
    pub w_k: Mat,
    pub b_k: Vec<f64>,
    pub w_v: Mat,
    pub b_v: Vec<f64>,
    pub w_o: Mat,
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormParams,
    pub attn: AttentionWeights,
    pub ln2: LayerNormParams,
    /// d_mlp x d_model.
    pub w_fc: Mat,
    pub b_fc: Vec<f64>,
    /// d_model x d_mlp — the matrix rank-one edits rewrite.
    pub w_proj: Mat,
    pub b_proj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    /// vocab_size x d_model.
    pub token_embedding: Mat,
    /// max_seq_len x d_model.
    pub positional_embedding: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_ln: LayerNormParams,
    /// Digest of the vocabulary this model was initialized against, when known.
    pub vocab_digest: Option<String>,
}

impl EncoderWeights {
    /// Seeded random initialization: every matrix ~ N(0, 0.02²), rounded to
    /// f32 precision so that saving and reloading is bit-lossless; biases and
    /// layer-norm shifts start at zero, layer-norm scales at one.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let mut gaussian = |rows: usize, cols: usize| -> Mat {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(0.02 * rng.next_normal());
            }
            quantize_f32(&mut data);
            Mat::from_vec(rows, cols, data)
        };
        let d = config.d_model;
        let f = config.d_mlp;
        let token_embedding = gaussian(config.vocab_size, d);
        let positional_embedding = gaussian(config.max_seq_len, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1: LayerNormParams::unit(d),
                attn: AttentionWeights {
                    w_q: gaussian(d, d),
                    b_q: vec![0.0; d],
                    w_k: gaussian(d, d),
                    b_k: vec![0.0; d],
                    w_v: gaussian(d, d),
                    b_v: vec![0.0; d],
                    w_o: gaussian(d, d),
                    b_o: vec![0.0; d],
                },
                ln2: LayerNormParams::unit(d),
                w_fc: gaussian(f, d),
                b_fc: vec![0.0; f],
                w_proj: gaussian(d, f),
                b_proj: vec![0.0; d],
            });
        }
        let final_ln = LayerNormParams::unit(d);
        Ok(Self {
            config,
            token_embedding,
            positional_embedding,
            layers,
            final_ln,
            vocab_digest: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let f = self.config.d_mlp;
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(format!("weight shape mismatch: {what}")))
            }
        };
        check(
            self.token_embedding.rows == self.config.vocab_size && self.token_embedding.cols == d,
            "token_embedding",
        )?;
        check(
            self.positional_embedding.rows == self.config.max_seq_len
                && self.positional_embedding.cols == d,
            "positional_embedding",
        )?;
        check(self.layers.len() == self.config.n_layers, "layer count")?;
        for (i, layer) in self.layers.iter().enumerate() {
            let square = |m: &Mat| m.rows == d && m.cols == d;
            check(
                square(&layer.attn.w_q)
                    && square(&layer.attn.w_k)
                    && square(&layer.attn.w_v)
                    && square(&layer.attn.w_o),
                &format!("layer {i} attention"),
            )?;
            check(
                layer.w_fc.rows == f && layer.w_fc.cols == d,
                &format!("layer {i} w_fc"),
            )?;
            check(
                layer.w_proj.rows == d && layer.w_proj.cols == f,
                &format!("layer {i} w_proj"),
            )?;
            check(
                layer.b_fc.len() == f && layer.b_proj.len() == d,
                &format!("layer {i} mlp biases"),
            )?;
            check(
                layer.ln1.scale.len() == d
                    && layer.ln1.shift.len() == d
                    && layer.ln2.scale.len() == d
                    && layer.ln2.shift.len() == d,
                &format!("layer {i} layer norms"),
            )?;
        }
        check(
            self.final_ln.scale.len() == d && self.final_ln.shift.len() == d,
            "final layer norm",
        )?;
        for (name, values) in self.named_tensors() {
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!(
                    "tensor {name} contains non-finite entries"
                )));
            }
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("token_embedding".into(), &self.token_embedding.data),
            ("positional_embedding".into(), &self.positional_embedding.data),
            ("final_ln.scale".into(), &self.final_ln.scale),
            ("final_ln.shift".into(), &self.final_ln.shift),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let parts: [(&str, &[f64]); 16] = [
                ("ln1.scale", &layer.ln1.scale),
                ("ln1.shift", &layer.ln1.shift),
                ("attn.w_q", &layer.attn.w_q.data),
                ("attn.b_q", &layer.attn.b_q),
                ("attn.w_k", &layer.attn.w_k.data),
                ("attn.b_k", &layer.attn.b_k),
                ("attn.w_v", &layer.attn.w_v.data),
                ("attn.b_v", &layer.attn.b_v),
                ("attn.w_o", &layer.attn.w_o.data),
                ("attn.b_o", &layer.attn.b_o),
                ("ln2.scale", &layer.ln2.scale),
                ("ln2.shift", &layer.ln2.shift),
                ("mlp.w_fc", &layer.w_fc.data),
                ("mlp.b_fc", &layer.b_fc),
                ("mlp.w_proj", &layer.w_proj.data),
                ("mlp.b_proj", &layer.b_proj),
            ];
            for (suffix, data) in parts {
                out.push((format!("layers.{i}.{suffix}"), data));
            }
        }
        out
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "vocab_digest": self.vocab_digest,
        });
        let mut c = Container::new(meta);
        let d = self.config.d_model;
        let f = self.config.d_mlp;
        c.insert(
            "token_embedding",
            vec![self.config.vocab_size, d],
            self.token_embedding.data.clone(),
        );
        c.insert(
            "positional_embedding",
            vec![self.config.max_seq_len, d],
            self.positional_embedding.data.clone(),
        );
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            c.insert(&p("ln1.scale"), vec![d], layer.ln1.scale.clone());
            c.insert(&p("ln1.shift"), vec![d], layer.ln1.shift.clone());
            c.insert(&p("attn.w_q"), vec![d, d], layer.attn.w_q.data.clone());
            c.insert(&p("attn.b_q"), vec![d], layer.attn.b_q.clone());
            c.insert(&p("attn.w_k"), vec![d, d], layer.attn.w_k.data.clone());
            c.insert(&p("attn.b_k"), vec![d], layer.attn.b_k.clone());
            c.insert(&p("attn.w_v"), vec![d, d], layer.attn.w_v.data.clone());
            c.insert(&p("attn.b_v"), vec![d], layer.attn.b_v.clone());
            c.insert(&p("attn.w_o"), vec![d, d], layer.attn.w_o.data.clone());
            c.insert(&p("attn.b_o"), vec![d], layer.attn.b_o.clone());
            c.insert(&p("ln2.scale"), vec![d], layer.ln2.scale.clone());
            c.insert(&p("ln2.shift"), vec![d], layer.ln2.shift.clone());
            c.insert(&p("mlp.w_fc"), vec![f, d], layer.w_fc.data.clone());
            c.insert(&p("mlp.b_fc"), vec![f], layer.b_fc.clone());
            c.insert(&p("mlp.w_proj"), vec![d, f], layer.w_proj.data.clone());
            c.insert(&p("mlp.b_proj"), vec![d], layer.b_proj.clone());
        }
        c.insert("final_ln.scale", vec![d], self.final_ln.scale.clone());
        c.insert("final_ln.shift", vec![d], self.final_ln.shift.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Validation(format!("container meta lacks encoder config: {e}")))?;
        config.validate()?;
        let vocab_digest = match &c.meta["vocab_digest"] {
            Value::String(s) => Some(s.clone()),
            _ => None,
        };
        let d = config.d_model;
        let f = config.d_mlp;
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Mat> {
            let (shape, data) = c.get(name)?;
            if shape != [rows, cols] {
                return Err(Error::Validation(format!(
                    "tensor {name} has shape {shape:?}, expected [{rows}, {cols}]"
                )));
            }
            Ok(Mat::from_vec(rows, cols, data.to_vec()))
        };
        let vec1 = |name: &str, len: usize| -> Result<Vec<f64>> {
            let (shape, data) = c.get(name)?;
            if shape != [len] {
                return Err(Error::Validation(format!(
                    "tensor {name} has shape {shape:?}, expected [{len}]"
                )));
            }
            Ok(data.to_vec())
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerWeights {
                ln1: LayerNormParams {
                    scale: vec1(&p("ln1.scale"), d)?,
                    shift: vec1(&p("ln1.shift"), d)?,
                },
                attn: AttentionWeights {
                    w_q: mat(&p("attn.w_q"), d, d)?,
                    b_q: vec1(&p("attn.b_q"), d)?,
                    w_k: mat(&p("attn.w_k"), d, d)?,
                    b_k: vec1(&p("attn.b_k"), d)?,
                    w_v: mat(&p("attn.w_v"), d, d)?,
                    b_v: vec1(&p("attn.b_v"), d)?,
                    w_o: mat(&p("attn.w_o"), d, d)?,
                    b_o: vec1(&p("attn.b_o"), d)?,
                },
                ln2: LayerNormParams {
                    scale: vec1(&p("ln2.scale"), d)?,
                    shift: vec1(&p("ln2.shift"), d)?,
                },
                w_fc: mat(&p("mlp.w_fc"), f, d)?,
                b_fc: vec1(&p("mlp.b_fc"), f)?,
                w_proj: mat(&p("mlp.w_proj"), d, f)?,
                b_proj: vec1(&p("mlp.b_proj"), d)?,
            });
        }
        let weights = Self {
            token_embedding: mat("token_embedding", config.vocab_size, d)?,
            positional_embedding: mat("positional_embedding", config.max_seq_len, d)?,
            layers,
            final_ln: LayerNormParams {
                scale: vec1("final_ln.scale", d)?,
                shift: vec1("final_ln.shift", d)?,
            },
            config,
            vocab_digest,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    fn check_positions(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.len() < 2 {
            return Err(Error::Validation(
                "token sequence must contain at least BOS and EOS".into(),
            ));
        }
        if seq.ids.len() > self.config.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.ids.len(),
                self.config.max_seq_len
            )));
        }
        for &id in &seq.ids {
            if (id as usize) >= self.config.vocab_size {
                return Err(Error::Validation(format!(
                    "token id {id} out of range for vocab_size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Tanh-approximated GELU, σ(0) = 0.
pub fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Derivative of `gelu_tanh`.
pub fn gelu_tanh_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants_enforced() {
        let bad_heads = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let narrow_mlp = EncoderConfig {
            d_mlp: 8,
            ..EncoderConfig::default()
        };
        assert!(narrow_mlp.validate().is_err());
        let no_layers = EncoderConfig {
            n_layers: 0,
            ..EncoderConfig::default()
        };
        assert!(no_layers.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = EncoderWeights::init(EncoderConfig::default()).unwrap();
        let b = EncoderWeights::init(EncoderConfig::default()).unwrap();
        assert_eq!(a, b);
        let cfg = EncoderConfig {
            seed: 1,
            ..EncoderConfig::default()
        };
        let c = EncoderWeights::init(cfg).unwrap();
        assert_ne!(a.token_embedding, c.token_embedding);
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let w = EncoderWeights::init(EncoderConfig::default()).unwrap();
        let bytes = w.to_container().to_bytes().unwrap();
        let back =
            EncoderWeights::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(w, back);
        // And the byte stream itself is stable.
        assert_eq!(bytes, back.to_container().to_bytes().unwrap());
    }

    #[test]
    fn gelu_is_zero_at_zero_and_matches_slope() {
        assert_eq!(gelu_tanh(0.0), 0.0);
        assert!((gelu_tanh_prime(0.0) - 0.5).abs() < 1e-12);
        // numeric derivative check at a few points
        for &x in &[-2.0, -0.3, 0.7, 1.9] {
            let eps = 1e-6;
            let fd = (gelu_tanh(x + eps) - gelu_tanh(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_tanh_prime(x)).abs() < 1e-8, "x = {x}");
        }
    }
}
