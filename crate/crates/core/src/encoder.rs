//! Bidirectional transformer encoder: embeddings, post-norm self-attention
//! layers and a pooler.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_cols, Tensor};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::layout::layer_prefix;
use crate::params::ParamRegistry;
use crate::tokenizer::EncodedInput;

/// Added to attention scores of padded keys before the softmax.
pub const MASK_SCORE: f64 = -1e9;

/// Generator behind initialisation, sampling and dropout.
pub type ModelRng = ChaCha8Rng;

/// Forward-pass mode. Dropout only runs in training mode.
pub struct Mode<'a> {
    rng: Option<&'a mut ModelRng>,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ModelRng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => x.dropout(rate, rng),
            _ => Ok(x.clone()),
        }
    }
}

pub(crate) fn fetch(reg: &ParamRegistry, name: &str) -> Result<Tensor> {
    reg.get(name)
        .cloned()
        .ok_or_else(|| Error::Consistency(format!("parameter {name} not registered")))
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_bias(b)
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn fetch(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: fetch(reg, &format!("{prefix}.gamma"))?,
            beta: fetch(reg, &format!("{prefix}.beta"))?,
        })
    }

    pub fn apply(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, eps)
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub token_table: Tensor,
    pub position_table: Tensor,
    pub segment_table: Tensor,
    pub layer_norm: LayerNormParams,
}

impl EmbeddingTables {
    pub fn fetch(reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            token_table: fetch(reg, "embeddings.token_table")?,
            position_table: fetch(reg, "embeddings.position_table")?,
            segment_table: fetch(reg, "embeddings.segment_table")?,
            layer_norm: LayerNormParams::fetch(reg, "embeddings.layer_norm")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl AttentionParams {
    fn fetch(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        let f = |n: &str| fetch(reg, &format!("{prefix}.{n}"));
        Ok(Self {
            w_q: f("W_q")?,
            b_q: f("b_q")?,
            w_k: f("W_k")?,
            b_k: f("b_k")?,
            w_v: f("W_v")?,
            b_v: f("b_v")?,
            w_o: f("W_o")?,
            b_o: f("b_o")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl FeedForwardParams {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        linear(&linear(x, &self.w_in, &self.b_in)?.gelu(), &self.w_out, &self.b_out)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attention: AttentionParams,
    pub attention_norm: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub ffn_norm: LayerNormParams,
}

impl EncoderLayerParams {
    pub fn fetch(reg: &ParamRegistry, index: usize) -> Result<Self> {
        let p = layer_prefix(index);
        let f = |n: &str| fetch(reg, &format!("{p}.ffn.{n}"));
        Ok(Self {
            attention: AttentionParams::fetch(reg, &format!("{p}.attention"))?,
            attention_norm: LayerNormParams::fetch(reg, &format!("{p}.attention.layer_norm"))?,
            ffn: FeedForwardParams {
                w_in: f("W_in")?,
                b_in: f("b_in")?,
                w_out: f("W_out")?,
                b_out: f("b_out")?,
            },
            ffn_norm: LayerNormParams::fetch(reg, &format!("{p}.ffn.layer_norm"))?,
        })
    }
}

/// Token + position + segment embedding per position, before normalisation.
pub fn embedding_sum(input: &EncodedInput, tables: &EmbeddingTables) -> Result<Tensor> {
    let n = input.max_len();
    let positions = tables.position_table.shape()[0];
    if n > positions {
        return Err(Error::usage(format!(
            "sequence length {n} exceeds {positions} learned positions"
        )));
    }
    let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
    let segments: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
    let pos: Vec<usize> = (0..n).collect();
    let tok = tables.token_table.gather_rows(&ids)?;
    let seg = tables.segment_table.gather_rows(&segments)?;
    tok.add(&tables.position_table.gather_rows(&pos)?)?.add(&seg)
}

/// Input representation `[max_len, d]`: embedding sum, layer norm, dropout.
pub fn embed(
    input: &EncodedInput,
    tables: &EmbeddingTables,
    config: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let x = tables
        .layer_norm
        .apply(&embedding_sum(input, tables)?, config.layer_norm_eps)?;
    mode.dropout(&x, config.dropout)
}

fn mask_bias(mask: &[bool]) -> Result<Tensor> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::usage("attention mask has no unmasked position"));
    }
    Tensor::from_vec(mask.iter().map(|&m| if m { 0.0 } else { MASK_SCORE }).collect())
}

/// Row-stochastic attention weights `softmax(QKᵀ/√d_k + mask)`, `[n,n]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let n = k.shape()[0];
    if mask.len() != n {
        return Err(Error::Dimension {
            op: "attention_mask",
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    let dk = k.shape().get(1).copied().unwrap_or(1) as f64;
    q.matmul(&k.transpose()?)?
        .scale(1.0 / dk.sqrt())
        .add_bias(&mask_bias(mask)?)?
        .softmax_rows()
}

pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    attention_weights(q, k, mask)?.matmul(v)
}

pub fn multi_head_attention(x: &Tensor, params: &AttentionParams, num_heads: usize, mask: &[bool]) -> Result<Tensor> {
    let d = params.w_q.shape()[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::usage(format!("{num_heads} heads do not divide width {d}")));
    }
    let dk = d / num_heads;
    let q = linear(x, &params.w_q, &params.b_q)?;
    let k = linear(x, &params.w_k, &params.b_k)?;
    let v = linear(x, &params.w_v, &params.b_v)?;
    let heads = (0..num_heads)
        .map(|h| {
            let cols = |t: &Tensor| t.slice_cols(h * dk, (h + 1) * dk);
            scaled_dot_product_attention(&cols(&q)?, &cols(&k)?, &cols(&v)?, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let z = if heads.len() == 1 {
        heads[0].clone()
    } else {
        concat_cols(&heads)?
    };
    linear(&z, &params.w_o, &params.b_o)
}

/// One post-norm layer: attention and feed-forward sublayers, each wrapped in
/// dropout, a residual connection and layer norm.
pub fn encoder_layer(
    x: &Tensor,
    layer: &EncoderLayerParams,
    mask: &[bool],
    config: &EncoderConfig,
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let eps = config.layer_norm_eps;
    let att = multi_head_attention(x, &layer.attention, config.num_heads, mask)?;
    let y1 = layer
        .attention_norm
        .apply(&x.add(&mode.dropout(&att, config.dropout)?)?, eps)?;
    let ff = layer.ffn.apply(&y1)?;
    layer.ffn_norm.apply(&y1.add(&mode.dropout(&ff, config.dropout)?)?, eps)
}

/// Embeddings plus the layer stack, sharing parameter storage with the
/// registry it was built from.
#[derive(Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embeddings: EmbeddingTables,
    pub layers: Vec<EncoderLayerParams>,
    pub pooler_weight: Tensor,
    pub pooler_bias: Tensor,
    passes: AtomicUsize,
}

impl Encoder {
    pub fn fetch(config: &EncoderConfig, reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            embeddings: EmbeddingTables::fetch(reg)?,
            layers: (0..config.num_layers)
                .map(|i| EncoderLayerParams::fetch(reg, i))
                .collect::<Result<_>>()?,
            pooler_weight: fetch(reg, "encoder.pooler.weight")?,
            pooler_bias: fetch(reg, "encoder.pooler.bias")?,
            passes: AtomicUsize::new(0),
        })
    }

    /// Final hidden states `[max_len, d]` for every position, padding included.
    pub fn encode(&self, input: &EncodedInput, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut h = embed(input, &self.embeddings, &self.config, mode)?;
        for layer in &self.layers {
            h = encoder_layer(&h, layer, &input.attention_mask, &self.config, mode)?;
        }
        Ok(h)
    }

    /// `tanh(h[0]·W + b)` over the first (`[CLS]`) position. Neither head uses it.
    pub fn pool(&self, hidden: &Tensor) -> Result<Tensor> {
        let d = self.config.embed_dim;
        Ok(
            linear(&hidden.slice_rows(0, 1)?, &self.pooler_weight, &self.pooler_bias)?
                .reshape(&[d])?
                .tanh(),
        )
    }

    /// Number of `encode` calls so far.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Plain nested-loop reference implementations.

    pub type Mat = Vec<Vec<f64>>;

    pub fn from_flat(v: &[f64], cols: usize) -> Mat {
        v.chunks(cols).map(<[f64]>::to_vec).collect()
    }

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        let mut c = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                for t in 0..k {
                    c[i][j] += a[i][t] * b[t][j];
                }
            }
        }
        c
    }

    pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
        a.iter()
            .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(i, x)| gamma[i] * (x - mu) / (var + eps).sqrt() + beta[i])
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// Single-head attention with a key mask, computed score by score.
    pub fn attention(q: &Mat, k: &Mat, v: &Mat, mask: &[bool]) -> Mat {
        let dk = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let scores: Vec<f64> = k
                    .iter()
                    .zip(mask)
                    .map(|(kj, &m)| {
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt();
                        if m {
                            s
                        } else {
                            s - 1e9
                        }
                    })
                    .collect();
                let w = softmax(&scores);
                (0..v[0].len())
                    .map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum())
                    .collect()
            })
            .collect()
    }
}
