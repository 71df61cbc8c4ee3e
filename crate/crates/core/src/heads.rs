//! Condensers from encoder states to a fixed-length vector, and the softmax
//! classifier on top.

use crate::autodiff::{concat, Tensor};
use crate::config::{CnnConfig, HeadKind};
use crate::encoder::fetch;
use crate::error::{Error, Result};
use crate::layout::filter_prefix;
use crate::params::ParamRegistry;

/// Convolution filters grouped by window width. Each width's filters are also
/// kept stacked as one `[g*d, F]` matrix so a width costs a single matmul.
#[derive(Clone, Debug)]
pub struct ConvFilterBank {
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
    /// `filters[w][j]` is `(weight [g,d], bias [1])` for width `widths[w]`.
    pub filters: Vec<Vec<(Tensor, Tensor)>>,
}

impl ConvFilterBank {
    pub fn fetch(config: &CnnConfig, reg: &ParamRegistry) -> Result<Self> {
        let filters = config
            .widths
            .iter()
            .map(|&g| {
                (0..config.filters_per_width)
                    .map(|j| {
                        let p = filter_prefix(g, j);
                        Ok((fetch(reg, &format!("{p}.weight"))?, fetch(reg, &format!("{p}.bias"))?))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            widths: config.widths.clone(),
            filters_per_width: config.filters_per_width,
            filters,
        })
    }

    pub fn total_filters(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }
}

/// A condensed sequence representation and the head that produced it.
#[derive(Clone, Debug)]
pub struct CondensedVector {
    pub values: Tensor,
    pub provenance: HeadKind,
}

impl CondensedVector {
    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `e_i = relu(<w, X[i..i+g]> + b)` for every full window: `[n-g+1]`.
pub fn conv_feature_map(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, g) = (x.shape()[0], w.shape()[0]);
    if n < g {
        return Err(Error::usage(format!(
            "sequence of length n={n} is shorter than filter width g={g}"
        )));
    }
    let windows = x.unfold_windows(g)?;
    let col = w.reshape(&[w.numel(), 1])?;
    Ok(windows.matmul(&col)?.add_bias(b)?.relu().reshape(&[n - g + 1])?)
}

pub fn max_over_time(e: &Tensor) -> Result<Tensor> {
    if e.numel() == 0 {
        return Err(Error::usage("max_over_time of an empty feature map"));
    }
    e.max_over_time()
}

/// Length of the unpadded prefix; masks must be a run of `true` then `false`.
fn prefix_len(mask: &[bool]) -> Result<usize> {
    let len = mask.iter().take_while(|&&m| m).count();
    if mask[len..].iter().any(|&m| m) {
        return Err(Error::usage("mask is not a contiguous prefix"));
    }
    Ok(len)
}

/// Max-over-time pooled feature for every filter, in width order then filter
/// order. Only windows inside the unpadded prefix are convolved.
pub fn cnn_condense(x: &Tensor, bank: &ConvFilterBank, mask: &[bool]) -> Result<CondensedVector> {
    let len = prefix_len(mask)?;
    if len < bank.max_width() {
        return Err(Error::Input(format!(
            "input has {len} tokens, fewer than the widest filter ({})",
            bank.max_width()
        )));
    }
    let prefix = x.slice_rows(0, len)?;
    let d = x.shape()[1];
    let mut pooled = Vec::with_capacity(bank.widths.len());
    for (&g, filters) in bank.widths.iter().zip(&bank.filters) {
        let weights: Vec<Tensor> = filters.iter().map(|(w, _)| w.clone()).collect();
        let biases: Vec<Tensor> = filters.iter().map(|(_, b)| b.clone()).collect();
        let stacked = concat(&weights)?.reshape(&[filters.len(), g * d])?.transpose()?;
        let maps = prefix
            .unfold_windows(g)?
            .matmul(&stacked)?
            .add_bias(&concat(&biases)?)?
            .relu();
        pooled.push(maps.max_rows()?);
    }
    Ok(CondensedVector {
        values: concat(&pooled)?,
        provenance: HeadKind::Cnn,
    })
}

/// Mean of the rows at unmasked positions.
pub fn mean_pool(x: &Tensor, mask: &[bool]) -> Result<CondensedVector> {
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::usage("mean_pool needs at least one unmasked position"));
    }
    Ok(CondensedVector {
        values: x.gather_rows(&rows)?.mean_rows()?,
        provenance: HeadKind::MeanPool,
    })
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierParams {
    pub fn fetch(reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            weight: fetch(reg, "classifier.weight")?,
            bias: fetch(reg, "classifier.bias")?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Class probabilities `softmax(h·W + b)` as a length-2 vector.
pub fn classify(h: &Tensor, params: &ClassifierParams) -> Result<Tensor> {
    if h.ndim() != 1 || h.numel() != params.input_dim() {
        return Err(Error::usage(format!(
            "classifier expects a vector of width {}, got shape {:?}",
            params.input_dim(),
            h.shape()
        )));
    }
    let logits = h
        .reshape(&[1, h.numel()])?
        .matmul(&params.weight)?
        .add_bias(&params.bias)?;
    logits.softmax_rows()?.reshape(&[2])
}

/// Argmax of a probability pair with ties going to label 0, plus its probability.
pub fn decide(probs: &[f64]) -> (u8, f64) {
    if probs[1] > probs[0] {
        (1, probs[1])
    } else {
        (0, probs[0])
    }
}
