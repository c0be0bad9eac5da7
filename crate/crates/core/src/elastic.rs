//! Sliceable layers and the bottlenecked elastic Transformer layer.
//!
//! Weights are always stored at their maximum size. A layer is narrowed by
//! configuring how many leading rows and columns each weight contributes; the
//! storage itself is never copied or resized. Two sub-networks whose widths are
//! ordered therefore share the leading block of every weight.
//!
//! Inside a layer, the input bottleneck maps the model width down to the
//! layer's hidden width `d_h`; attention, the feed-forward block, residuals and
//! layer norms all run at `d_h`; the output bottleneck maps back up. Attention
//! and feed-forward inner widths (`d_attn`, `d_ff`) and the head count are
//! fixed per backbone.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the active part of a stored tensor depends on a layer's hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slicing {
    /// Always used in full.
    Full,
    /// Leading `d_h` rows of a matrix, every column.
    Rows { layer: usize },
    /// Every row, leading `d_h` columns.
    Cols { layer: usize },
    /// Leading `d_h` entries of a vector.
    Prefix { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Identity,
    TruncatedNormal,
    Zeros,
    Ones,
}

/// Name, stored dims, slicing rule and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub slicing: Slicing,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, dims: Vec<usize>, slicing: Slicing, init: Init) -> Self {
        ParamSpec {
            name,
            dims,
            slicing,
            init,
        }
    }

    /// Number of scalars read when layer widths are `hidden`.
    pub fn active_elements(&self, hidden: &[usize]) -> usize {
        let total: usize = self.dims.iter().product();
        match self.slicing {
            Slicing::Full => total,
            Slicing::Rows { layer } => hidden[layer] * self.dims[1],
            Slicing::Cols { layer } => self.dims[0] * hidden[layer],
            Slicing::Prefix { layer } => hidden[layer],
        }
    }

    pub fn initialize<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> Tensor {
        let mut t = Tensor::zeros(&self.dims);
        match self.init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
            Init::Identity => {
                let (rows, cols) = t.matrix_dims();
                for i in 0..rows.min(cols) {
                    t.data_mut()[i * cols + i] = 1.0;
                }
            }
            Init::TruncatedNormal => {
                for v in t.data_mut() {
                    *v = truncated_normal(rng) * std;
                }
            }
        }
        t
    }
}

/// Standard normal sample rejected outside two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// A linear layer over a `max_out × max_in` weight of which only the
/// top-left `active_out × active_in` block is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElasticLinear {
    weight: ParamId,
    bias: ParamId,
    max_in: usize,
    max_out: usize,
    active_in: usize,
    active_out: usize,
}

impl ElasticLinear {
    /// Binds to `{prefix}.weight` and `{prefix}.bias` in `store`.
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{prefix}.weight"))?;
        let bias = lookup(store, &format!("{prefix}.bias"))?;
        let (max_out, max_in) = match store.get(weight).dims() {
            [o, i] => (*o, *i),
            d => return Err(Error::InvalidShape(format!("{prefix}.weight has dims {d:?}"))),
        };
        if store.get(bias).dims() != [max_out] {
            return Err(Error::InvalidShape(format!("{prefix}.bias does not match weight rows")));
        }
        Ok(ElasticLinear {
            weight,
            bias,
            max_in,
            max_out,
            active_in: max_in,
            active_out: max_out,
        })
    }

    pub fn set_sample_config(&mut self, in_dim: usize, out_dim: usize) -> Result<()> {
        if !(1..=self.max_in).contains(&in_dim) || !(1..=self.max_out).contains(&out_dim) {
            return Err(Error::Config(format!(
                "slice {out_dim}x{in_dim} outside {}x{}",
                self.max_out, self.max_in
            )));
        }
        self.active_in = in_dim;
        self.active_out = out_dim;
        Ok(())
    }

    pub fn active(&self) -> (usize, usize) {
        (self.active_in, self.active_out)
    }

    pub fn max(&self) -> (usize, usize) {
        (self.max_in, self.max_out)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn active_params(&self) -> usize {
        self.active_out * self.active_in + self.active_out
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.linear(x, w, Some(b), self.active_in, self.active_out)
    }
}

/// Layer norm whose affine parameters are sliced to the leading `active_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElasticLayerNorm {
    gamma: ParamId,
    beta: ParamId,
    max_dim: usize,
    active_dim: usize,
}

impl ElasticLayerNorm {
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let gamma = lookup(store, &format!("{prefix}.gamma"))?;
        let beta = lookup(store, &format!("{prefix}.beta"))?;
        let max_dim = store.get(gamma).len();
        if store.get(beta).len() != max_dim {
            return Err(Error::InvalidShape(format!("{prefix} gamma/beta lengths differ")));
        }
        Ok(ElasticLayerNorm {
            gamma,
            beta,
            max_dim,
            active_dim: max_dim,
        })
    }

    pub fn set_active_dim(&mut self, dim: usize) -> Result<()> {
        if !(1..=self.max_dim).contains(&dim) {
            return Err(Error::Config(format!("layer norm width {dim} outside 1..={}", self.max_dim)));
        }
        self.active_dim = dim;
        Ok(())
    }

    pub fn active_dim(&self) -> usize {
        self.active_dim
    }

    pub fn active_params(&self) -> usize {
        2 * self.active_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        tape.layer_norm(x, g, b, self.active_dim)
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
}

/// Fixed widths of one elastic layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_model: usize,
    pub d_attn: usize,
    pub d_ff: usize,
    pub heads: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_attn == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(Error::Validation(format!("layer dims must be positive: {self:?}")));
        }
        if !self.d_attn.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "d_attn {} not divisible by {} heads",
                self.d_attn, self.heads
            )));
        }
        Ok(())
    }
}

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("layer.{layer:03}")
}

/// Transformer layer wrapped in input/output bottleneck matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElasticTransformerLayer {
    dims: LayerDims,
    in_bottleneck: ElasticLinear,
    query: ElasticLinear,
    key: ElasticLinear,
    value: ElasticLinear,
    attn_out: ElasticLinear,
    attn_norm: ElasticLayerNorm,
    ffn_in: ElasticLinear,
    ffn_out: ElasticLinear,
    ffn_norm: ElasticLayerNorm,
    out_bottleneck: ElasticLinear,
    hidden: Option<usize>,
}

impl ElasticTransformerLayer {
    /// Every tensor of layer `layer`, at max size.
    pub fn param_specs(layer: usize, dims: &LayerDims) -> Vec<ParamSpec> {
        let p = layer_prefix(layer);
        let LayerDims {
            d_model: d,
            d_attn: a,
            d_ff: f,
            ..
        } = *dims;
        let rows = Slicing::Rows { layer };
        let cols = Slicing::Cols { layer };
        let prefix = Slicing::Prefix { layer };
        let mut specs = Vec::new();
        let mut linear = |name: &str, out: usize, inp: usize, ws: Slicing, bs: Slicing, init: Init| {
            specs.push(ParamSpec::new(format!("{p}.{name}.weight"), vec![out, inp], ws, init));
            specs.push(ParamSpec::new(format!("{p}.{name}.bias"), vec![out], bs, Init::Zeros));
        };
        linear("in_bottleneck", d, d, rows, prefix, Init::Identity);
        linear("query", a, d, cols, Slicing::Full, Init::TruncatedNormal);
        linear("key", a, d, cols, Slicing::Full, Init::TruncatedNormal);
        linear("value", a, d, cols, Slicing::Full, Init::TruncatedNormal);
        linear("attn_out", d, a, rows, prefix, Init::TruncatedNormal);
        linear("ffn_in", f, d, cols, Slicing::Full, Init::TruncatedNormal);
        linear("ffn_out", d, f, rows, prefix, Init::TruncatedNormal);
        linear("out_bottleneck", d, d, cols, Slicing::Full, Init::Identity);
        for norm in ["attn_norm", "ffn_norm"] {
            specs.push(ParamSpec::new(format!("{p}.{norm}.gamma"), vec![d], prefix, Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.{norm}.beta"), vec![d], prefix, Init::Zeros));
        }
        specs
    }

    pub fn bind(store: &ParamStore, layer: usize, dims: LayerDims) -> Result<Self> {
        dims.validate()?;
        let p = layer_prefix(layer);
        let lin = |n: &str| ElasticLinear::bind(store, &format!("{p}.{n}"));
        let norm = |n: &str| ElasticLayerNorm::bind(store, &format!("{p}.{n}"));
        let layer = ElasticTransformerLayer {
            dims,
            in_bottleneck: lin("in_bottleneck")?,
            query: lin("query")?,
            key: lin("key")?,
            value: lin("value")?,
            attn_out: lin("attn_out")?,
            attn_norm: norm("attn_norm")?,
            ffn_in: lin("ffn_in")?,
            ffn_out: lin("ffn_out")?,
            ffn_norm: norm("ffn_norm")?,
            out_bottleneck: lin("out_bottleneck")?,
            hidden: None,
        };
        let d = dims.d_model;
        let expect = [
            (&layer.in_bottleneck, (d, d)),
            (&layer.query, (d, dims.d_attn)),
            (&layer.key, (d, dims.d_attn)),
            (&layer.value, (d, dims.d_attn)),
            (&layer.attn_out, (dims.d_attn, d)),
            (&layer.ffn_in, (d, dims.d_ff)),
            (&layer.ffn_out, (dims.d_ff, d)),
            (&layer.out_bottleneck, (d, d)),
        ];
        if let Some((l, want)) = expect.iter().find(|(l, want)| l.max() != *want) {
            return Err(Error::InvalidShape(format!(
                "{p}: linear has (in, out) {:?}, expected {want:?}",
                l.max()
            )));
        }
        Ok(layer)
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    pub fn hidden(&self) -> Option<usize> {
        self.hidden
    }

    pub fn in_bottleneck(&self) -> &ElasticLinear {
        &self.in_bottleneck
    }

    pub fn out_bottleneck(&self) -> &ElasticLinear {
        &self.out_bottleneck
    }

    /// Sets the hidden width `d_h` of every sliced component.
    pub fn set_hidden(&mut self, d_h: usize) -> Result<()> {
        let LayerDims {
            d_model,
            d_attn,
            d_ff,
            ..
        } = self.dims;
        if !(1..=d_model).contains(&d_h) {
            return Err(Error::Config(format!("hidden width {d_h} outside 1..={d_model}")));
        }
        self.in_bottleneck.set_sample_config(d_model, d_h)?;
        self.query.set_sample_config(d_h, d_attn)?;
        self.key.set_sample_config(d_h, d_attn)?;
        self.value.set_sample_config(d_h, d_attn)?;
        self.attn_out.set_sample_config(d_attn, d_h)?;
        self.attn_norm.set_active_dim(d_h)?;
        self.ffn_in.set_sample_config(d_h, d_ff)?;
        self.ffn_out.set_sample_config(d_ff, d_h)?;
        self.ffn_norm.set_active_dim(d_h)?;
        self.out_bottleneck.set_sample_config(d_h, d_model)?;
        self.hidden = Some(d_h);
        Ok(())
    }

    /// Scalars read by a forward pass at the current configuration.
    pub fn active_params(&self) -> usize {
        [
            &self.in_bottleneck,
            &self.query,
            &self.key,
            &self.value,
            &self.attn_out,
            &self.ffn_in,
            &self.ffn_out,
            &self.out_bottleneck,
        ]
        .iter()
        .map(|l| l.active_params())
        .sum::<usize>()
            + self.attn_norm.active_params()
            + self.ffn_norm.active_params()
    }

    /// `x` is `(batch·seq) × d_model`; the result has the same dims.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        if self.hidden.is_none() {
            return Err(Error::Config("layer hidden width not configured".into()));
        }
        let h = self.in_bottleneck.forward(tape, x)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let a = tape.attention(q, k, v, batch, seq, self.dims.heads)?;
        let o = self.attn_out.forward(tape, a)?;
        let r = tape.add(h, o)?;
        let h1 = self.attn_norm.forward(tape, r)?;
        let f = self.ffn_in.forward(tape, h1)?;
        let f = tape.gelu(f)?;
        let f = self.ffn_out.forward(tape, f)?;
        let r = tape.add(h1, f)?;
        let h2 = self.ffn_norm.forward(tape, r)?;
        self.out_bottleneck.forward(tape, h2)
    }
}
