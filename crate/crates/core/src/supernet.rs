//! The full backbone: embeddings, elastic layers and a tied masked-LM head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::elastic::{
    ElasticLayerNorm, ElasticLinear, ElasticTransformerLayer, Init, LayerDims, ParamSpec, Slicing,
};
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::space::{DesignSpace, ShapeVector};
use crate::tensor::Tensor;

/// Architecture of a supernet. `d_model` is the widest allowed hidden dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub allowed_dims: Vec<usize>,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk()
    }
}

impl BackboneConfig {
    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        BackboneConfig {
            num_layers: 4,
            d_model: 64,
            d_attn: 64,
            d_ff: 256,
            heads: 4,
            vocab_size: 2000,
            max_seq_len: 64,
            allowed_dims: vec![16, 32, 48, 64],
            init_std: 0.02,
        }
    }

    /// BERT-base sized backbone with the 7-option hidden-dim space.
    /// Only used for accounting; building it needs several GB.
    pub fn bert_base() -> Self {
        BackboneConfig {
            num_layers: 12,
            d_model: 768,
            d_attn: 768,
            d_ff: 3072,
            heads: 12,
            vocab_size: 28996,
            max_seq_len: 512,
            allowed_dims: DesignSpace::bert_base().allowed_dims().to_vec(),
            init_std: 0.02,
        }
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.d_model,
            d_attn: self.d_attn,
            d_ff: self.d_ff,
            heads: self.heads,
        }
    }

    pub fn design_space(&self) -> Result<DesignSpace> {
        DesignSpace::new(self.allowed_dims.clone(), self.num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.design_space()?;
        self.layer_dims().validate()?;
        if space.max_dim() != self.d_model {
            return Err(Error::Validation(format!(
                "d_model {} must equal the largest allowed dim {}",
                self.d_model,
                space.max_dim()
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Validation("vocab must hold the 5 specials plus one token".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Validation("max_seq_len must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Validation("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter tensor of the supernet, at max size, in build order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let spec = |name: &str, dims: Vec<usize>, init| ParamSpec {
            name: name.to_string(),
            dims,
            slicing: Slicing::Full,
            init,
        };
        let mut specs = vec![
            spec("embeddings.token", vec![self.vocab_size, d], Init::TruncatedNormal),
            spec("embeddings.position", vec![self.max_seq_len, d], Init::TruncatedNormal),
            spec("embeddings.norm.gamma", vec![d], Init::Ones),
            spec("embeddings.norm.beta", vec![d], Init::Zeros),
        ];
        let dims = self.layer_dims();
        for layer in 0..self.num_layers {
            specs.extend(ElasticTransformerLayer::param_specs(layer, &dims));
        }
        specs.extend([
            spec("head.transform.weight", vec![d, d], Init::TruncatedNormal),
            spec("head.transform.bias", vec![d], Init::Zeros),
            spec("head.norm.gamma", vec![d], Init::Ones),
            spec("head.norm.beta", vec![d], Init::Zeros),
            spec("head.bias", vec![self.vocab_size], Init::Zeros),
        ]);
        specs
    }
}

/// Exact number of scalar parameters a forward pass reads under `shape`,
/// counted by enumerating every sliced tensor (embeddings and head included).
pub fn count_params(config: &BackboneConfig, shape: &ShapeVector) -> Result<u64> {
    config.design_space()?.check(shape)?;
    Ok(config
        .param_specs()
        .iter()
        .map(|s| s.active_elements(shape.dims()) as u64)
        .sum())
}

/// Closed-form weight count of one bottlenecked layer:
/// `d_h · 2 · (2·d_attn + d_ff + d_h)`.
pub fn layer_params_formula(d_h: u64, d_attn: u64, d_ff: u64) -> u64 {
    d_h * (2 * (2 * d_attn + d_ff + d_h))
}

/// Closed-form FLOP figure of one layer:
/// `d_h · 4 · (2·d_attn + d_ff + d_h) + 2·seq_len·d_attn`.
pub fn layer_flops_formula(d_h: u64, d_attn: u64, d_ff: u64, seq_len: u64) -> u64 {
    d_h * (4 * (2 * d_attn + d_ff + d_h)) + 2 * seq_len * d_attn
}

/// Token ids and MLM labels for `batch_size` sequences of `seq_len` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl MlmBatch {
    pub fn masked_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let n = self.batch_size * self.seq_len;
        if n == 0 || self.input_ids.len() != n || self.labels.len() != n {
            return Err(Error::Data(format!(
                "batch of {}x{} has {} ids and {} labels",
                self.batch_size,
                self.seq_len,
                self.input_ids.len(),
                self.labels.len()
            )));
        }
        if self.seq_len > config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds {}",
                self.seq_len, config.max_seq_len
            )));
        }
        let vocab = config.vocab_size;
        if self.input_ids.iter().chain(self.labels.iter().flatten()).any(|&t| t >= vocab) {
            return Err(Error::Data(format!("token id outside vocab of {vocab}")));
        }
        Ok(())
    }
}

/// The weight-sharing supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    config: BackboneConfig,
    params: ParamStore,
    layers: Vec<ElasticTransformerLayer>,
    token_emb: ParamId,
    pos_emb: ParamId,
    emb_norm: ElasticLayerNorm,
    head_transform: ElasticLinear,
    head_norm: ElasticLayerNorm,
    head_bias: ParamId,
    active: Option<ShapeVector>,
}

impl Supernet {
    /// Fresh supernet: identity bottlenecks with zero bias, truncated-normal
    /// weights elsewhere, unit/zero layer norms, zero biases.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in config.param_specs() {
            let t = spec.initialize(config.init_std, &mut rng);
            params.insert(spec.name, t)?;
        }
        Self::from_params(config, params)
    }

    /// Binds an existing parameter store (e.g. a loaded checkpoint).
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in config.param_specs() {
            let id = params
                .id(&spec.name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {}", spec.name)))?;
            if params.get(id).dims() != spec.dims.as_slice() {
                return Err(Error::Validation(format!(
                    "{} has dims {:?}, expected {:?}",
                    spec.name,
                    params.get(id).dims(),
                    spec.dims
                )));
            }
        }
        let dims = config.layer_dims();
        let layers = (0..config.num_layers)
            .map(|l| ElasticTransformerLayer::bind(&params, l, dims))
            .collect::<Result<Vec<_>>>()?;
        let id = |n: &str| params.id(n).expect("checked above");
        Ok(Supernet {
            token_emb: id("embeddings.token"),
            pos_emb: id("embeddings.position"),
            emb_norm: ElasticLayerNorm::bind(&params, "embeddings.norm")?,
            head_transform: ElasticLinear::bind(&params, "head.transform")?,
            head_norm: ElasticLayerNorm::bind(&params, "head.norm")?,
            head_bias: id("head.bias"),
            config,
            params,
            layers,
            active: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn design_space(&self) -> DesignSpace {
        self.config.design_space().expect("validated at construction")
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[ElasticTransformerLayer] {
        &self.layers
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_emb
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_bias
    }

    /// Configures layer `i` with hidden width `shape[i]`.
    pub fn apply_shape(&mut self, shape: &ShapeVector) -> Result<()> {
        self.layers = self.configured_layers(shape)?;
        self.active = Some(shape.clone());
        Ok(())
    }

    pub fn active_shape(&self) -> Option<&ShapeVector> {
        self.active.as_ref()
    }

    /// Layer descriptors configured for `shape`, leaving `self` untouched.
    pub fn configured_layers(&self, shape: &ShapeVector) -> Result<Vec<ElasticTransformerLayer>> {
        self.design_space().check(shape)?;
        let mut layers = self.layers.clone();
        for (layer, &d_h) in layers.iter_mut().zip(shape.dims()) {
            layer.set_hidden(d_h)?;
        }
        Ok(layers)
    }

    pub fn count_params(&self, shape: &ShapeVector) -> Result<u64> {
        count_params(&self.config, shape)
    }

    /// Parameter count of the currently applied shape, summed over the bound
    /// modules rather than the spec list.
    pub fn active_param_count(&self) -> Result<u64> {
        if self.active.is_none() {
            return Err(Error::Config("no shape applied".into()));
        }
        let c = &self.config;
        let fixed = c.vocab_size * c.d_model
            + c.max_seq_len * c.d_model
            + self.emb_norm.active_params()
            + self.head_transform.active_params()
            + self.head_norm.active_params()
            + c.vocab_size;
        let layers: usize = self.layers.iter().map(|l| l.active_params()).sum();
        Ok((fixed + layers) as u64)
    }

    fn require_active(&self) -> Result<&[ElasticTransformerLayer]> {
        match self.active {
            Some(_) => Ok(&self.layers),
            None => Err(Error::Config("no shape applied".into())),
        }
    }

    /// Final hidden states, `(batch·seq) × d_model`.
    pub(crate) fn encode(
        &self,
        tape: &mut Tape<'_>,
        layers: &[ElasticTransformerLayer],
        input_ids: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let tok = tape.param(self.token_emb)?;
        let pos = tape.param(self.pos_emb)?;
        let x = tape.embedding(tok, input_ids)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let p = tape.embedding(pos, &positions)?;
        let x = tape.add(x, p)?;
        let mut x = self.emb_norm.forward(tape, x)?;
        for layer in layers {
            x = layer.forward(tape, x, batch, seq)?;
        }
        Ok(x)
    }

    /// Logits for the masked positions of `batch`, in row-major position order.
    fn masked_logits(
        &self,
        tape: &mut Tape<'_>,
        layers: &[ElasticTransformerLayer],
        batch: &MlmBatch,
    ) -> Result<(Var, Vec<Option<usize>>)> {
        batch.validate(&self.config)?;
        let rows: Vec<usize> = (0..batch.labels.len())
            .filter(|&i| batch.labels[i].is_some())
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyBatch("batch has no masked positions".into()));
        }
        let h = self.encode(tape, layers, &batch.input_ids, batch.batch_size, batch.seq_len)?;
        let h = tape.gather_rows(h, &rows)?;
        let h = self.head_transform.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.head_norm.forward(tape, h)?;
        let tok = tape.param(self.token_emb)?;
        let bias = tape.param(self.head_bias)?;
        let logits = tape.linear(h, tok, Some(bias), self.config.d_model, self.config.vocab_size)?;
        let labels = rows.iter().map(|&r| batch.labels[r]).collect();
        Ok((logits, labels))
    }

    fn loss_on_tape(
        &self,
        tape: &mut Tape<'_>,
        layers: &[ElasticTransformerLayer],
        batch: &MlmBatch,
    ) -> Result<(Var, usize)> {
        let (logits, labels) = self.masked_logits(tape, layers, batch)?;
        let count = labels.len();
        Ok((tape.cross_entropy(logits, &labels)?, count))
    }

    /// Mean masked-token cross-entropy under the applied shape.
    pub fn mlm_forward(&self, batch: &MlmBatch) -> Result<(f64, usize)> {
        let layers = self.require_active()?;
        let mut tape = Tape::with_params(&self.params);
        let (loss, count) = self.loss_on_tape(&mut tape, layers, batch)?;
        Ok((tape.value(loss).data()[0], count))
    }

    /// Like [`Supernet::mlm_forward`] for an explicit shape, without
    /// reconfiguring `self`.
    pub fn mlm_forward_shape(&self, shape: &ShapeVector, batch: &MlmBatch) -> Result<(f64, usize)> {
        let layers = self.configured_layers(shape)?;
        let mut tape = Tape::with_params(&self.params);
        let (loss, count) = self.loss_on_tape(&mut tape, &layers, batch)?;
        Ok((tape.value(loss).data()[0], count))
    }

    /// Loss and parameter gradients of the sub-network `shape` on `batch`.
    pub fn loss_and_grads(&self, shape: &ShapeVector, batch: &MlmBatch) -> Result<(f64, ParamGrads)> {
        let layers = self.configured_layers(shape)?;
        let mut tape = Tape::with_params(&self.params);
        let (loss, _) = self.loss_on_tape(&mut tape, &layers, batch)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.param_grads(&tape);
        Ok((value, grads))
    }

    /// Masked-position logits (`masked × vocab`) of sub-network `shape`.
    pub fn mlm_logits(&self, shape: &ShapeVector, batch: &MlmBatch) -> Result<Tensor> {
        let layers = self.configured_layers(shape)?;
        let mut tape = Tape::with_params(&self.params);
        let (logits, _) = self.masked_logits(&mut tape, &layers, batch)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference-only encoder pass, used for latency measurement.
    pub fn encode_with(
        &self,
        layers: &[ElasticTransformerLayer],
        input_ids: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let h = self.encode(&mut tape, layers, input_ids, batch, seq)?;
        Ok(tape.value(h).clone())
    }

    /// Rounds every weight to `f32`, the checkpoint storage precision.
    pub fn round_to_storage_precision(&mut self) {
        self.params.round_to_f32();
    }
}
