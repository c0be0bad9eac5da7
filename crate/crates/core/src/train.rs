//! Sub-network sampling and the weight-sharing pre-training loop.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_batches, mask_batch, BatchStream, Corpus, MaskingPolicy};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::params::ParamGrads;
use crate::space::{DesignSpace, ShapeVector};
use crate::supernet::{MlmBatch, Supernet};

/// One shape with every layer drawn uniformly from the allowed dims.
pub fn sample_random<R: rand::Rng + ?Sized>(space: &DesignSpace, rng: &mut R) -> ShapeVector {
    space.sample(rng)
}

/// `[S+, S-]` followed by `n - 2` uniform random shapes.
pub fn sample_sandwich<R: rand::Rng + ?Sized>(
    space: &DesignSpace,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ShapeVector>> {
    if n < 2 {
        return Err(Error::Config(format!("sandwich sampling needs n >= 2, got {n}")));
    }
    let mut shapes = vec![space.largest(), space.smallest()];
    shapes.extend((2..n).map(|_| space.sample(rng)));
    Ok(shapes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Random,
    Sandwich,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub sampler: SamplerMode,
    pub shapes_per_step: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub eval_seed: u64,
    /// Cap on held-out sequences used for each evaluation.
    pub eval_max_sequences: usize,
    pub adamw: AdamWConfig,
    pub masking: MaskingPolicy,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::desk()
    }
}

impl TrainingConfig {
    pub fn desk() -> Self {
        TrainingConfig {
            steps: 2000,
            batch_size: 16,
            seq_len: 64,
            peak_lr: 1e-3,
            warmup_steps: 100,
            sampler: SamplerMode::Sandwich,
            shapes_per_step: 4,
            seed: 0,
            eval_interval: 250,
            eval_seed: 0x5eed,
            eval_max_sequences: 128,
            adamw: AdamWConfig::default(),
            masking: MaskingPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes_per_step == 0 {
            return Err(Error::Config("shapes_per_step must be at least 1".into()));
        }
        if self.sampler == SamplerMode::Sandwich && self.shapes_per_step < 2 {
            return Err(Error::Config("sandwich mode needs shapes_per_step >= 2".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch_size must be positive and seq_len at least 2".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.eval_interval == 0 || self.eval_max_sequences == 0 {
            return Err(Error::Config("eval_interval and eval_max_sequences must be positive".into()));
        }
        self.masking.validate()
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            peak: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

/// Forward and backward for every shape on the same batch, gradients averaged,
/// then a single optimizer step over the union of touched parameters.
/// Returns the per-shape losses.
pub fn train_step(
    model: &mut Supernet,
    optimizer: &mut AdamW,
    batch: &MlmBatch,
    shapes: &[ShapeVector],
    lr: f64,
    step: usize,
) -> Result<Vec<f64>> {
    if shapes.is_empty() {
        return Err(Error::Config("train_step needs at least one shape".into()));
    }
    let at_step = |e: Error| match e {
        Error::Numeric { .. } => Error::NumericAtStep {
            step,
            source: Box::new(e),
        },
        e => e,
    };
    let mut total = ParamGrads::new(model.params().len());
    let mut losses = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let (loss, grads) = model.loss_and_grads(shape, batch).map_err(at_step)?;
        losses.push(loss);
        total.accumulate(&grads);
    }
    total.scale(1.0 / shapes.len() as f64);
    let ids = total.touched_ids();
    optimizer.step(model.params_mut(), &ids, &total, lr)?;
    if let Some(id) = ids.iter().find(|&&id| !model.params().get(id).is_finite()) {
        return Err(Error::NumericAtStep {
            step,
            source: Box::new(Error::numeric("adamw", format!("{} became non-finite", model.params().name(*id)))),
        });
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub shapes: Vec<ShapeVector>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub shape: ShapeVector,
    pub perplexity: f64,
}

/// Append-only record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.evals.is_empty()
    }

    /// `step,shape,loss`, one row per sampled shape.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,shape,loss\n");
        for r in &self.steps {
            for (shape, loss) in r.shapes.iter().zip(&r.losses) {
                writeln!(s, "{},{},{}", r.step, shape.to_key(), loss).unwrap();
            }
        }
        s
    }

    /// `step,shape,perplexity`.
    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,shape,perplexity\n");
        for r in &self.evals {
            writeln!(s, "{},{},{}", r.step, r.shape.to_key(), r.perplexity).unwrap();
        }
        s
    }

    /// Perplexity of `shape` at the given eval step, if recorded.
    pub fn perplexity(&self, step: usize, shape: &ShapeVector) -> Option<f64> {
        self.evals
            .iter()
            .find(|r| r.step == step && &r.shape == shape)
            .map(|r| r.perplexity)
    }

    pub fn last_eval_step(&self) -> Option<usize> {
        self.evals.last().map(|r| r.step)
    }
}

/// Held-out batches masked once with a fixed seed.
#[derive(Debug, Clone)]
pub struct EvalSet {
    batches: Vec<MlmBatch>,
}

impl EvalSet {
    pub fn new(
        sequences: &[Vec<usize>],
        batch_size: usize,
        vocab_size: usize,
        policy: &MaskingPolicy,
        seed: u64,
    ) -> Result<Self> {
        Ok(EvalSet {
            batches: eval_batches(sequences, batch_size, vocab_size, policy, seed)?,
        })
    }

    pub fn from_batches(batches: Vec<MlmBatch>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        Ok(EvalSet { batches })
    }

    pub fn batches(&self) -> &[MlmBatch] {
        &self.batches
    }

    pub fn masked_tokens(&self) -> usize {
        self.batches.iter().map(MlmBatch::masked_count).sum()
    }
}

/// `exp` of the mean masked-token cross-entropy over the whole eval set.
///
/// Per-batch sums are added in sorted order, so the result does not depend on
/// batch order.
pub fn evaluate_perplexity(model: &Supernet, shape: &ShapeVector, eval: &EvalSet) -> Result<f64> {
    let mut terms = Vec::with_capacity(eval.batches.len());
    let mut count = 0usize;
    for batch in &eval.batches {
        let (loss, n) = model.mlm_forward_shape(shape, batch)?;
        terms.push(loss * n as f64);
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("evaluation set has no masked tokens".into()));
    }
    terms.sort_by(f64::total_cmp);
    Ok((terms.iter().sum::<f64>() / count as f64).exp())
}

/// Shapes evaluated during training: `S-`, `S+` and two fixed probes.
pub fn eval_shapes(space: &DesignSpace, seed: u64) -> Vec<ShapeVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    vec![space.smallest(), space.largest(), space.sample(&mut rng), space.sample(&mut rng)]
}

/// Runs the full pre-training loop. `on_eval` sees each eval record as it
/// is produced.
pub fn super_pretrain_with(
    model: &mut Supernet,
    train: &Corpus,
    eval: &Corpus,
    config: &TrainingConfig,
    on_eval: &mut dyn FnMut(&EvalRecord),
) -> Result<TrainLog> {
    config.validate()?;
    if config.seq_len > model.config().max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            config.seq_len,
            model.config().max_seq_len
        )));
    }
    let mut log = TrainLog::default();
    if config.steps == 0 {
        return Ok(log);
    }
    let space = model.design_space();
    let vocab_size = model.config().vocab_size;
    let mut stream = BatchStream::new(train.sequences(config.seq_len)?, config.batch_size, config.seed)?;
    let mut eval_seqs = eval.sequences(config.seq_len)?;
    eval_seqs.truncate(config.eval_max_sequences);
    let eval_set = EvalSet::new(&eval_seqs, config.batch_size, vocab_size, &config.masking, config.eval_seed)?;
    let probes = eval_shapes(&space, config.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut optimizer = AdamW::new(config.adamw);
    let schedule = config.schedule();

    let mut evaluate = |model: &Supernet, step: usize, log: &mut TrainLog| -> Result<()> {
        for shape in &probes {
            let record = EvalRecord {
                step,
                shape: shape.clone(),
                perplexity: evaluate_perplexity(model, shape, &eval_set)?,
            };
            on_eval(&record);
            log.evals.push(record);
        }
        Ok(())
    };

    evaluate(model, 0, &mut log)?;
    for step in 0..config.steps {
        let tokens = stream.next_tokens();
        let batch = loop {
            match mask_batch(&tokens, config.batch_size, config.seq_len, vocab_size, &config.masking, &mut rng) {
                Err(Error::EmptyBatch(_)) => continue,
                other => break other?,
            }
        };
        let shapes = match config.sampler {
            SamplerMode::Sandwich => sample_sandwich(&space, config.shapes_per_step, &mut rng)?,
            SamplerMode::Random => (0..config.shapes_per_step)
                .map(|_| sample_random(&space, &mut rng))
                .collect(),
        };
        let losses = train_step(model, &mut optimizer, &batch, &shapes, schedule.lr(step), step)?;
        log.steps.push(StepRecord {
            step: step + 1,
            shapes,
            losses,
        });
        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.steps {
            evaluate(model, done, &mut log)?;
        }
    }
    Ok(log)
}

pub fn super_pretrain(
    model: &mut Supernet,
    train: &Corpus,
    eval: &Corpus,
    config: &TrainingConfig,
) -> Result<TrainLog> {
    super_pretrain_with(model, train, eval, config, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::supernet::BackboneConfig;

    fn space() -> DesignSpace {
        DesignSpace::new(vec![16, 32, 48, 64], 2).unwrap()
    }

    #[test]
    fn sandwich_contains_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = space();
        assert_eq!(sample_sandwich(&s, 2, &mut rng).unwrap(), vec![s.largest(), s.smallest()]);
        for _ in 0..50 {
            let v = sample_sandwich(&s, 4, &mut rng).unwrap();
            assert_eq!(v.len(), 4);
            assert_eq!(v[0], ShapeVector::new(vec![64, 64]));
            assert_eq!(v[1], ShapeVector::new(vec![16, 16]));
            assert!(v.iter().all(|x| s.contains(x)));
        }
        assert!(matches!(sample_sandwich(&s, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn random_sampling_is_seeded() {
        let s = DesignSpace::bert_base();
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| sample_random(&s, &mut r)).collect()
        };
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let b: Vec<_> = (0..5).map(|_| sample_random(&s, &mut r)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainingConfig::desk();
        c.shapes_per_step = 1;
        assert!(c.validate().is_err());
        c.sampler = SamplerMode::Random;
        assert!(c.validate().is_ok());
        c.shapes_per_step = 0;
        assert!(c.validate().is_err());
    }

    fn tiny_setup() -> (Supernet, Corpus, TrainingConfig) {
        let text = crate::synth::generate(&crate::synth::SynthConfig {
            target_bytes: 6_000,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocab::build(&text, 200).unwrap();
        let corpus = Corpus::from_text(&text, &vocab);
        let model = Supernet::build(
            BackboneConfig {
                num_layers: 2,
                d_model: 8,
                d_attn: 8,
                d_ff: 16,
                heads: 2,
                vocab_size: 200,
                max_seq_len: 16,
                allowed_dims: vec![4, 8],
                init_std: 0.02,
            },
            0,
        )
        .unwrap();
        let config = TrainingConfig {
            steps: 6,
            batch_size: 4,
            seq_len: 16,
            warmup_steps: 2,
            eval_interval: 3,
            eval_max_sequences: 8,
            ..TrainingConfig::desk()
        };
        (model, corpus, config)
    }

    #[test]
    fn zero_steps_is_empty_and_untouched() {
        let (mut model, corpus, mut config) = tiny_setup();
        config.steps = 0;
        let before = model.clone();
        let log = super_pretrain(&mut model, &corpus, &corpus, &config).unwrap();
        assert!(log.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn tiny_run_logs_and_is_reproducible() {
        let (model, corpus, config) = tiny_setup();
        let mut a = model.clone();
        let mut b = model;
        let la = super_pretrain(&mut a, &corpus, &corpus, &config).unwrap();
        let lb = super_pretrain(&mut b, &corpus, &corpus, &config).unwrap();
        assert_eq!(la.steps_csv(), lb.steps_csv());
        assert_eq!(la.evals_csv(), lb.evals_csv());
        assert_eq!(la.steps.len(), 6);
        assert!(la.steps.windows(2).all(|w| w[0].step < w[1].step));
        // Evaluations at 0, 3 and 6 for four probe shapes.
        assert_eq!(la.evals.len(), 12);
        assert_eq!(la.last_eval_step(), Some(6));
    }

    #[test]
    fn corpus_too_small_is_data_error() {
        let (mut model, _, config) = tiny_setup();
        let vocab = Vocab::build("a b c", 10).unwrap();
        let small = Corpus::from_text("a b c", &vocab);
        assert!(matches!(
            super_pretrain(&mut model, &small, &small, &config),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn perplexity_is_order_invariant() {
        let (model, corpus, config) = tiny_setup();
        let seqs = corpus.sequences(config.seq_len).unwrap();
        let eval = EvalSet::new(&seqs[..12], 4, 200, &config.masking, 1).unwrap();
        let mut reversed = eval.batches().to_vec();
        reversed.reverse();
        let rev = EvalSet::from_batches(reversed).unwrap();
        let shape = ShapeVector::new(vec![8, 4]);
        assert_eq!(
            evaluate_perplexity(&model, &shape, &eval).unwrap().to_bits(),
            evaluate_perplexity(&model, &shape, &rev).unwrap().to_bits()
        );
    }
}
