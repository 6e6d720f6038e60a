//! Optimization loops for the base LM, the keyword-prefixed baseline and the
//! auxiliary pathway.
//!
//! All three share one resumable loop: batch `k` is drawn from a generator
//! seeded by `(seed, k)`, so a run restored from a checkpoint replays the
//! uninterrupted run exactly.

use crate::autodiff::{Tape, Tensor, Var};
use crate::auxtune::{AuxBatch, AuxTunedModel, VariantKind};
use crate::checkpoint::Checkpoint;
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::transformer::{CausalLM, TokenBatch, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            learning_rate: 3e-4,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            eval_every: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0)
        {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be non-negative");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return bad("eval_every must lie in 1..=steps");
        }
        Ok(())
    }

    /// Learning rate at 1-based `step` under linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }

    /// Writes every field under `prefix` (used by manifests and checkpoints).
    pub fn write_meta(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (k, v) in self.entries() {
            ckpt.set(&format!("{prefix}{k}"), v);
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self { m, v }
    }
}

/// One Adam update at 1-based `step`: global-norm clipping first, then
/// moments, bias correction and the warmed-up learning rate. Returns the
/// pre-clipping gradient norm.
pub fn adam_step(
    params: &mut [(String, &mut Tensor<f32>)],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    config: &TrainConfig,
    step: usize,
) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidConfig("adam step counts from 1".into()));
    }
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len(), state.m.len()],
            right: vec![grads.len()],
        });
    }
    let mut sq = 0.0f64;
    for ((name, p), g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        for &x in g {
            if !x.is_finite() {
                return Err(Error::NonFiniteGradient {
                    step,
                    param: name.clone(),
                });
            }
            sq += f64::from(x) * f64::from(x);
        }
    }
    let norm = sq.sqrt();
    let scale = if norm > config.grad_clip_norm {
        config.grad_clip_norm / norm
    } else {
        1.0
    };
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    // bias corrections folded into the step size and epsilon
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let alpha = (config.lr_at(step) * c2.sqrt() / c1) as f32;
    let eps = (config.adam_eps * c2.sqrt()) as f32;
    let (b1, b2, nb1, nb2, scale) = (
        b1 as f32,
        b2 as f32,
        (1.0 - b1) as f32,
        (1.0 - b2) as f32,
        scale as f32,
    );
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p
            .values_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g * scale;
            *m = b1 * *m + nb1 * g;
            *v = b2 * *v + nb2 * g * g;
            *w -= alpha * *m / (v.sqrt() + eps);
        }
    }
    Ok(norm)
}

/// A token sequence trained with next-token loss on positions
/// `first_target..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmRow {
    pub tokens: Vec<usize>,
    pub first_target: usize,
}

impl LmRow {
    /// Every token after the first is a target.
    pub fn sentence(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            first_target: 1,
        }
    }

    /// `[attribute.., sep, prefix.., continuation..]` with loss on the
    /// continuation only.
    pub fn keyword_prefixed(ex: &Example, sep: usize) -> Self {
        let mut tokens = ex.attribute.clone();
        tokens.push(sep);
        tokens.extend(&ex.prefix);
        let first_target = tokens.len();
        tokens.extend(&ex.continuation);
        Self {
            tokens,
            first_target,
        }
    }
}

/// Attribute plus `[bos, prefix.., continuation..]` with loss on the
/// continuation only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuxRow {
    pub attribute: Vec<usize>,
    pub text: Vec<usize>,
    pub first_target: usize,
}

impl AuxRow {
    pub fn from_example(ex: &Example, bos: usize) -> Self {
        let mut text = vec![bos];
        text.extend(&ex.prefix);
        let first_target = text.len();
        text.extend(&ex.continuation);
        Self {
            attribute: ex.attribute.clone(),
            text,
            first_target,
        }
    }
}

fn targets_of(rows: &[&[usize]], firsts: &[usize], seq: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut read, mut targets) = (Vec::new(), Vec::new());
    for (r, (tokens, &first)) in rows.iter().zip(firsts).enumerate() {
        for t in first..tokens.len() {
            read.push(r * seq + t - 1);
            targets.push(tokens[t]);
        }
    }
    (read, targets)
}

/// A model the shared loop can optimize.
pub trait Trainable: Sized {
    type Row;

    /// Parameters updated by the optimizer, in a fixed order.
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)>;

    /// Mean per-token loss of `rows` and, when `with_grads`, gradients in
    /// [`Trainable::trainable_mut`] order.
    fn loss(&self, rows: &[&Self::Row], with_grads: bool) -> Result<(f64, Vec<Vec<f32>>)>;

    fn validate_rows(&self, rows: &[Self::Row]) -> Result<()>;

    fn to_checkpoint(&self) -> Checkpoint;

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;
}

fn finish(
    tape: &Tape<f32>,
    loss: Var,
    vars: &[Var],
    sizes: &[usize],
    with_grads: bool,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let value = f64::from(tape.value(loss)[0]);
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((
        value,
        vars.iter()
            .zip(sizes)
            .map(|(&v, &n)| grads.get(v).map_or_else(|| vec![0.0; n], <[f32]>::to_vec))
            .collect(),
    ))
}

impl Trainable for CausalLM<f32> {
    type Row = LmRow;

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        self.tensors_mut()
    }

    fn loss(&self, rows: &[&LmRow], with_grads: bool) -> Result<(f64, Vec<Vec<f32>>)> {
        let seqs: Vec<Vec<usize>> = rows.iter().map(|r| r.tokens.clone()).collect();
        let batch = TokenBatch::padded(&seqs, 0)?;
        let slices: Vec<&[usize]> = rows.iter().map(|r| r.tokens.as_slice()).collect();
        let firsts: Vec<usize> = rows.iter().map(|r| r.first_target).collect();
        let (read, targets) = targets_of(&slices, &firsts, batch.seq);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = vars.hidden(&mut tape, &batch, true)?;
        let h = tape.gather_rows(h, &read)?;
        let logits = vars.head(&mut tape, h)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let sizes: Vec<usize> = self.tensors().iter().map(|(_, t)| t.numel()).collect();
        finish(&tape, loss, &vars.vars(), &sizes, with_grads)
    }

    fn validate_rows(&self, rows: &[LmRow]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        for r in rows {
            self.check_tokens(&r.tokens)?;
            if r.first_target == 0 || r.first_target >= r.tokens.len() {
                return Err(Error::InvalidConfig(
                    "training row has no target positions".into(),
                ));
            }
        }
        Ok(())
    }

    fn to_checkpoint(&self) -> Checkpoint {
        CausalLM::to_checkpoint(self)
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        CausalLM::from_checkpoint(ckpt)
    }
}

impl Trainable for AuxTunedModel<f32> {
    type Row = AuxRow;

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        self.trainable_parameters_mut()
    }

    fn loss(&self, rows: &[&AuxRow], with_grads: bool) -> Result<(f64, Vec<Vec<f32>>)> {
        let seqs: Vec<Vec<usize>> = rows.iter().map(|r| r.text.clone()).collect();
        let text = TokenBatch::padded(&seqs, 0)?;
        let slices: Vec<&[usize]> = rows.iter().map(|r| r.text.as_slice()).collect();
        let firsts: Vec<usize> = rows.iter().map(|r| r.first_target).collect();
        let (read, targets) = targets_of(&slices, &firsts, text.seq);
        let batch = AuxBatch {
            attributes: rows.iter().map(|r| r.attribute.clone()).collect(),
            text,
            read,
        };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let fused = vars.forward(&mut tape, &batch)?;
        let loss = tape.cross_entropy(fused.combined, &targets)?;
        let sizes: Vec<usize> = self
            .trainable_parameters()
            .iter()
            .map(|(_, t)| t.numel())
            .collect();
        finish(&tape, loss, &vars.trainable_vars(), &sizes, with_grads)
    }

    fn validate_rows(&self, rows: &[AuxRow]) -> Result<()> {
        let first = rows.first().ok_or(Error::Empty("conditional corpus"))?;
        let m = first.attribute.len();
        let v = self.base.config.vocab_size;
        for r in rows {
            if r.attribute.len() != m {
                return Err(Error::InvalidConfig("attribute lengths must agree".into()));
            }
            if let Some(&id) = r.attribute.iter().chain(&r.text).find(|&&id| id >= v) {
                return Err(Error::VocabMismatch(format!(
                    "token id {id} outside the base vocabulary of {v}"
                )));
            }
            if r.first_target == 0 || r.first_target >= r.text.len() {
                return Err(Error::InvalidConfig(
                    "training row has no target positions".into(),
                ));
            }
            let limit = match self.kind() {
                VariantKind::Direct => self.aux_config.max_seq_len,
                VariantKind::FeatureExtraction { .. } => self.base.config.max_seq_len + m,
            };
            if r.text.len() > self.base.config.max_seq_len || m + r.text.len() > limit {
                return Err(Error::SequenceTooLong {
                    len: m + r.text.len(),
                    max: limit.min(self.base.config.max_seq_len + m),
                });
            }
        }
        Ok(())
    }

    fn to_checkpoint(&self) -> Checkpoint {
        AuxTunedModel::to_checkpoint(self)
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        AuxTunedModel::from_checkpoint(ckpt)
    }
}

/// Evaluation metrics attached to a report row; `None` prints as empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub slor: Option<f64>,
    pub keyword_accuracy: Option<f64>,
    pub kl_to_oracle: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    /// Mean training loss since the previous row; at step 0, the loss of
    /// the first batch before any update.
    pub loss: f64,
    pub metrics: Metrics,
}

pub const CSV_HEADER: &str = "step,loss,slor,keyword_accuracy,kl_to_oracle";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    /// Per-step training loss; entry `i` belongs to step `first_step + i`.
    pub step_losses: Vec<f64>,
    pub first_step: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{}",
                r.step,
                r.loss,
                f(r.metrics.slor),
                f(r.metrics.keyword_accuracy),
                f(r.metrics.kl_to_oracle)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean loss over the `window` steps ending at `step` (inclusive).
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        let end = step.checked_sub(self.first_step)?;
        if end >= self.step_losses.len() || window == 0 {
            return None;
        }
        let start = (end + 1).saturating_sub(window);
        let w = &self.step_losses[start..=end];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn summary(&self) -> String {
        match self.rows.last() {
            None => "no steps run".to_string(),
            Some(r) => {
                let mut s = format!("step {} loss {:.4}", r.step, r.loss);
                if let Some(v) = r.metrics.slor {
                    let _ = write!(s, " slor {v:.4}");
                }
                if let Some(v) = r.metrics.keyword_accuracy {
                    let _ = write!(s, " keyword_accuracy {v:.4}");
                }
                if let Some(v) = r.metrics.kl_to_oracle {
                    let _ = write!(s, " kl_to_oracle {v:.5}");
                }
                s
            }
        }
    }
}

/// Evaluation hook called at step 0, every `eval_every` steps and at the end.
pub type EvalFn<'a, M> = dyn FnMut(usize, &M) -> Result<Metrics> + 'a;

pub fn no_eval<M>(_: usize, _: &M) -> Result<Metrics> {
    Ok(Metrics::default())
}

/// Model, optimizer state and position of one training run.
#[derive(Clone, Debug)]
pub struct TrainRun<M> {
    pub model: M,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Number of completed optimizer steps.
    pub step: usize,
}

fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

impl<M: Trainable> TrainRun<M> {
    pub fn new(mut model: M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.trainable_mut().iter().map(|(_, t)| t.numel()));
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
        })
    }

    /// Runs until `config.steps`, starting from the current step.
    pub fn run(&mut self, rows: &[M::Row], eval: &mut EvalFn<'_, M>) -> Result<TrainReport> {
        self.model.validate_rows(rows)?;
        let mut report = TrainReport {
            first_step: self.step + 1,
            ..Default::default()
        };
        let initial = if self.step == 0 {
            Some(eval(0, &self.model)?)
        } else {
            None
        };
        let mut window = Vec::new();
        while self.step < self.config.steps {
            let step = self.step + 1;
            let mut rng = batch_rng(self.config.seed, step);
            let batch: Vec<&M::Row> = (0..self.config.batch_size)
                .map(|_| &rows[rng.gen_range(0..rows.len())])
                .collect();
            let (loss, grads) = self.model.loss(&batch, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient {
                    step,
                    param: "loss".into(),
                });
            }
            if let Some(metrics) = initial.filter(|_| step == 1) {
                report.rows.push(ReportRow {
                    step: 0,
                    loss,
                    metrics,
                });
            }
            adam_step(
                &mut self.model.trainable_mut(),
                &grads,
                &mut self.adam,
                &self.config,
                step,
            )?;
            self.step = step;
            report.step_losses.push(loss);
            window.push(loss);
            if step % self.config.eval_every == 0 || step == self.config.steps {
                let metrics = eval(step, &self.model)?;
                report.rows.push(ReportRow {
                    step,
                    loss: window.iter().sum::<f64>() / window.len() as f64,
                    metrics,
                });
                window.clear();
            }
        }
        Ok(report)
    }

    /// Model checkpoint extended with the optimizer moments and step.
    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.set("train.step", self.step);
        self.config.write_meta(&mut ckpt, "train.");
        let shapes: Vec<Vec<usize>> = self
            .model
            .trainable_mut()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        for (i, shape) in shapes.iter().enumerate() {
            let m = Tensor::new(shape, self.adam.m[i].clone()).expect("moment matches parameter");
            let v = Tensor::new(shape, self.adam.v[i].clone()).expect("moment matches parameter");
            ckpt.push_tensor(&format!("adam.m.{i}"), m);
            ckpt.push_tensor(&format!("adam.v.{i}"), v);
        }
        ckpt
    }

    /// Restores a run saved by [`TrainRun::to_checkpoint`]; `config` may
    /// extend `steps` but should otherwise match the original run.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = M::from_checkpoint(ckpt)?;
        let step: usize = ckpt.parse("train.step")?;
        let n = model.trainable_mut().len();
        let mut adam = AdamState::default();
        for i in 0..n {
            adam.m
                .push(ckpt.tensor(&format!("adam.m.{i}"))?.values().to_vec());
            adam.v
                .push(ckpt.tensor(&format!("adam.v.{i}"))?.values().to_vec());
        }
        if step > config.steps {
            return Err(Error::InvalidConfig(format!(
                "checkpoint is at step {step}, beyond the requested {}",
                config.steps
            )));
        }
        Ok(Self {
            model,
            adam,
            config,
            step,
        })
    }
}

/// Trains a fresh base LM on `[bos] words [eos]` sequences.
pub fn pretrain(
    config: &TrainConfig,
    corpus: &[Vec<usize>],
    model_config: TransformerConfig,
) -> Result<(CausalLM<f32>, TrainReport)> {
    let rows: Vec<LmRow> = corpus.iter().cloned().map(LmRow::sentence).collect();
    let mut run = TrainRun::new(CausalLM::init(model_config)?, *config)?;
    let report = run.run(&rows, &mut no_eval)?;
    Ok((run.model, report))
}

/// Trains an auxiliary pathway on top of a frozen `base`.
pub fn train_auxiliary(
    config: &TrainConfig,
    base: CausalLM<f32>,
    examples: &[Example],
    aux_config: TransformerConfig,
    kind: VariantKind,
    bos: usize,
    eval: &mut EvalFn<'_, AuxTunedModel<f32>>,
) -> Result<(AuxTunedModel<f32>, TrainReport)> {
    let rows: Vec<AuxRow> = examples
        .iter()
        .map(|e| AuxRow::from_example(e, bos))
        .collect();
    let mut run = TrainRun::new(AuxTunedModel::new(base, aux_config, kind)?, *config)?;
    let report = run.run(&rows, eval)?;
    Ok((run.model, report))
}

/// Trains the keyword-as-prefix baseline from scratch.
pub fn train_baseline(
    config: &TrainConfig,
    examples: &[Example],
    model_config: TransformerConfig,
    sep: usize,
    eval: &mut EvalFn<'_, CausalLM<f32>>,
) -> Result<(CausalLM<f32>, TrainReport)> {
    let rows: Vec<LmRow> = examples
        .iter()
        .map(|e| LmRow::keyword_prefixed(e, sep))
        .collect();
    let mut run = TrainRun::new(CausalLM::init(model_config)?, *config)?;
    let report = run.run(&rows, eval)?;
    Ok((run.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 30,
            learning_rate: 3e-3,
            warmup_steps: 5,
            eval_every: 10,
            ..Default::default()
        }
    }

    fn tiny() -> TransformerConfig {
        TransformerConfig::new(12, 16, 1, 2, 12, 3)
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..cfg()
            },
            TrainConfig { steps: 0, ..cfg() },
            TrainConfig {
                adam_beta1: 1.0,
                ..cfg()
            },
            TrainConfig {
                adam_beta2: 0.0,
                ..cfg()
            },
            TrainConfig {
                eval_every: 31,
                ..cfg()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..cfg()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn warmup_schedule() {
        let c = cfg();
        assert!((c.lr_at(1) - 3e-3 / 5.0).abs() < 1e-15);
        assert_eq!(c.lr_at(5), 3e-3);
        assert_eq!(c.lr_at(100), 3e-3);
    }

    fn one_param(values: Vec<f32>) -> Tensor<f32> {
        Tensor::new(&[values.len()], values).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(vec![0.5, -1.0]);
        let mut state = AdamState::new([2]);
        let c = TrainConfig {
            warmup_steps: 0,
            ..cfg()
        };
        adam_step(
            &mut [("p".into(), &mut p)],
            &[vec![0.0, 0.0]],
            &mut state,
            &c,
            1,
        )
        .unwrap();
        assert_eq!(p.values(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one_param(vec![0.0, 0.0]);
        let mut state = AdamState::new([2]);
        let c = TrainConfig {
            warmup_steps: 0,
            learning_rate: 0.01,
            grad_clip_norm: 100.0,
            ..cfg()
        };
        adam_step(
            &mut [("p".into(), &mut p)],
            &[vec![0.3, -2.0]],
            &mut state,
            &c,
            1,
        )
        .unwrap();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        let expect = |g: f64| -0.01 * g / (g.abs() + 1e-8);
        assert!((f64::from(p.values()[0]) - expect(0.3)).abs() < 1e-8);
        assert!((f64::from(p.values()[1]) - expect(-2.0)).abs() < 1e-8);
    }

    #[test]
    fn clipping_scales_before_moments() {
        let mut p = one_param(vec![0.0, 0.0]);
        let mut state = AdamState::new([2]);
        let c = TrainConfig {
            grad_clip_norm: 1.0,
            ..cfg()
        };
        let norm = adam_step(
            &mut [("p".into(), &mut p)],
            &[vec![6.0, 8.0]],
            &mut state,
            &c,
            1,
        )
        .unwrap();
        assert_eq!(norm, 10.0);
        assert!((state.m[0][0] - 0.1 * 0.6).abs() < 1e-7);
        assert!((state.m[0][1] - 0.1 * 0.8).abs() < 1e-7);
        assert!((state.v[0][1] - 0.001 * 0.64).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = one_param(vec![0.0]);
        let mut state = AdamState::new([1]);
        let err = adam_step(
            &mut [("w".into(), &mut p)],
            &[vec![f32::NAN]],
            &mut state,
            &cfg(),
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 7, ref param } if param == "w"));
    }

    fn repeated() -> Vec<Vec<usize>> {
        vec![vec![1, 5, 6, 7, 8, 2]; 8]
    }

    #[test]
    fn memorizes_repeated_sequence() {
        let c = TrainConfig {
            steps: 150,
            eval_every: 50,
            learning_rate: 1e-2,
            ..cfg()
        };
        let (_, report) = pretrain(&c, &repeated(), tiny()).unwrap();
        assert!(report.step_losses[0] > 2.0);
        assert!(report.final_loss().unwrap() < 0.05, "{}", report.summary());
    }

    #[test]
    fn report_rows_and_determinism() {
        let (m1, r1) = pretrain(&cfg(), &repeated(), tiny()).unwrap();
        let (m2, r2) = pretrain(&cfg(), &repeated(), tiny()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.param_hash(), m2.param_hash());
        let steps: Vec<usize> = r1.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30]);
        assert_eq!(r1.rows[0].loss, r1.step_losses[0]);
        let csv = r1.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().ends_with(",,,"));
    }

    #[test]
    fn empty_corpus_and_bad_tokens() {
        assert!(matches!(
            pretrain(&cfg(), &[], tiny()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            pretrain(&cfg(), &[vec![1, 99]], tiny()),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let rows: Vec<LmRow> = [vec![1, 5, 6, 2], vec![1, 7, 8, 9, 2], vec![1, 10, 2]]
            .into_iter()
            .map(LmRow::sentence)
            .collect();
        let full_cfg = cfg();
        let mut full = TrainRun::new(CausalLM::init(tiny()).unwrap(), full_cfg).unwrap();
        let full_report = full.run(&rows, &mut no_eval).unwrap();

        let half = TrainConfig {
            steps: 10,
            ..full_cfg
        };
        let mut first = TrainRun::new(CausalLM::init(tiny()).unwrap(), half).unwrap();
        first.run(&rows, &mut no_eval).unwrap();
        let ckpt = Checkpoint::from_bytes(&first.to_checkpoint().to_bytes()).unwrap();
        let mut resumed = TrainRun::<CausalLM<f32>>::resume(&ckpt, full_cfg).unwrap();
        assert_eq!(resumed.step, 10);
        let tail = resumed.run(&rows, &mut no_eval).unwrap();
        assert_eq!(tail.first_step, 11);
        for (a, b) in tail.step_losses.iter().zip(&full_report.step_losses[10..]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(resumed.model.param_hash(), full.model.param_hash());
    }

    fn aux_examples() -> Vec<Example> {
        (0..6)
            .map(|i| Example {
                prefix: vec![6 + i % 3],
                attribute: vec![4 + i % 2],
                continuation: vec![8 + i % 2, 10, 2],
            })
            .collect()
    }

    #[test]
    fn auxiliary_keeps_base_bit_identical() {
        let base = CausalLM::init(tiny()).unwrap();
        let hash = base.param_hash();
        let aux = TransformerConfig::new(0, 8, 1, 2, 12, 5);
        for kind in [
            VariantKind::Direct,
            VariantKind::FeatureExtraction { layers: 1 },
        ] {
            let (model, report) = train_auxiliary(
                &cfg(),
                base.clone(),
                &aux_examples(),
                aux,
                kind,
                1,
                &mut no_eval,
            )
            .unwrap();
            assert_eq!(model.base_hash(), hash);
            assert!(report.step_losses.last().unwrap() < &report.step_losses[0]);
        }
    }

    #[test]
    fn initial_aux_loss_tracks_base_loss() {
        let base = CausalLM::init(tiny()).unwrap();
        let model = AuxTunedModel::new(
            base.clone(),
            TransformerConfig::new(0, 8, 1, 2, 12, 5),
            VariantKind::Direct,
        )
        .unwrap();
        let aux_rows: Vec<AuxRow> = aux_examples()
            .iter()
            .map(|e| AuxRow::from_example(e, 1))
            .collect();
        let base_rows: Vec<LmRow> = aux_rows
            .iter()
            .map(|r| LmRow {
                tokens: r.text.clone(),
                first_target: r.first_target,
            })
            .collect();
        let (a, _) = model
            .loss(&aux_rows.iter().collect::<Vec<_>>(), false)
            .unwrap();
        let (b, _) = base
            .loss(&base_rows.iter().collect::<Vec<_>>(), false)
            .unwrap();
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }

    #[test]
    fn loss_reads_continuation_positions_only() {
        let ex = aux_examples()[0].clone();
        let row = LmRow::keyword_prefixed(&ex, 3);
        assert_eq!(row.tokens[..3], [4, 3, 6]);
        let slices = [row.tokens.as_slice()];
        let (read, targets) = targets_of(&slices, &[row.first_target], row.tokens.len());
        assert_eq!(targets, ex.continuation);
        assert!(read.iter().all(|&r| r + 1 >= row.first_target));

        let aux = AuxRow::from_example(&ex, 1);
        let slices = [aux.text.as_slice()];
        let (_, targets) = targets_of(&slices, &[aux.first_target], aux.text.len());
        assert_eq!(targets, ex.continuation);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let base = CausalLM::init(tiny()).unwrap();
        let mut ex = aux_examples();
        ex[0].continuation[0] = 40;
        let err = train_auxiliary(
            &cfg(),
            base,
            &ex,
            TransformerConfig::new(0, 8, 1, 2, 12, 5),
            VariantKind::Direct,
            1,
            &mut no_eval,
        )
        .unwrap_err();
        assert!(matches!(err, Error::VocabMismatch(_)));
    }
}
