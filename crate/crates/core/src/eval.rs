//! Decoding, fluency and keyword metrics, and oracle diagnostics.

use crate::autodiff::Tape;
use crate::auxtune::{softmax64, AuxTunedModel};
use crate::datagen::{exact_symbol_ids, ExactTask};
use crate::error::{Error, Result};
use crate::training::Metrics;
use crate::transformer::{log_softmax_at, CausalLM, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rows per forward pass during batched decoding and scoring.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    /// Argmax decoding; ignores temperature, top-k and seed.
    pub greedy: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 24,
            temperature: 0.8,
            top_k: None,
            greedy: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig(
                "max_new_tokens must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "top_k must lie in 1..={vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

/// A conditioning request: attribute tokens and prefix word ids (no
/// begin-of-sequence marker).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub attribute: Vec<usize>,
    pub prefix: Vec<usize>,
}

/// How a model turns a prompt into a context.
#[derive(Clone, Copy, Debug)]
pub enum Generator<'a> {
    /// `[bos] prefix`; the attribute is ignored.
    Plain {
        model: &'a CausalLM<f32>,
        bos: usize,
    },
    /// `[attribute.. sep] prefix`.
    KeywordPrefixed {
        model: &'a CausalLM<f32>,
        sep: usize,
    },
    /// Attribute to the auxiliary pathway, `[bos] prefix` as text.
    Aux {
        model: &'a AuxTunedModel<f32>,
        bos: usize,
    },
}

impl Generator<'_> {
    fn config(&self) -> &crate::transformer::TransformerConfig {
        match self {
            Self::Plain { model, .. } | Self::KeywordPrefixed { model, .. } => &model.config,
            Self::Aux { model, .. } => &model.base.config,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    /// `(attribute, text)` fed to the model for a prompt.
    fn context(&self, prompt: &Prompt) -> (Vec<usize>, Vec<usize>) {
        match *self {
            Self::Plain { bos, .. } => (vec![], [&[bos][..], &prompt.prefix].concat()),
            Self::KeywordPrefixed { sep, .. } => (
                vec![],
                [&prompt.attribute[..], &[sep], &prompt.prefix].concat(),
            ),
            Self::Aux { bos, .. } => (
                prompt.attribute.clone(),
                [&[bos][..], &prompt.prefix].concat(),
            ),
        }
    }

    fn max_text(&self, attr_len: usize) -> usize {
        match self {
            Self::Aux { model, .. } => match model.kind() {
                crate::auxtune::VariantKind::Direct => model
                    .base
                    .config
                    .max_seq_len
                    .min(model.aux_config.max_seq_len.saturating_sub(attr_len)),
                crate::auxtune::VariantKind::FeatureExtraction { .. } => {
                    model.base.config.max_seq_len
                }
            },
            _ => self.config().max_seq_len,
        }
    }

    /// Next-token logits (summed in double precision for the auxiliary
    /// model) at the end of each context.
    pub fn next_logits(&self, contexts: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(CHUNK) {
            match self {
                Self::Plain { model, .. } | Self::KeywordPrefixed { model, .. } => {
                    let seqs: Vec<Vec<usize>> = chunk.iter().map(|c| c.1.clone()).collect();
                    for row in lm_next_logits(model, &seqs)? {
                        out.push(row.into_iter().map(f64::from).collect());
                    }
                }
                Self::Aux { model, .. } => {
                    let attrs: Vec<Vec<usize>> = chunk.iter().map(|c| c.0.clone()).collect();
                    let texts: Vec<Vec<usize>> = chunk.iter().map(|c| c.1.clone()).collect();
                    for (b, a) in model.next_logits_batch(&attrs, &texts)? {
                        out.push(
                            b.iter()
                                .zip(&a)
                                .map(|(&x, &y)| f64::from(x) + f64::from(y))
                                .collect(),
                        );
                    }
                }
            }
        }
        Ok(out)
    }

    /// Next-token distribution for one prompt.
    pub fn distribution(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let ctx = self.context(prompt);
        let logits = self.next_logits(&[ctx])?.pop().expect("one row");
        Ok(softmax64(&logits))
    }
}

/// Last-position logits of each (unpadded) sequence.
pub fn lm_next_logits(model: &CausalLM<f32>, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
    for s in seqs {
        model.check_tokens(s)?;
    }
    let batch = TokenBatch::padded(seqs, 0)?;
    let read: Vec<usize> = seqs
        .iter()
        .enumerate()
        .map(|(r, s)| r * batch.seq + s.len() - 1)
        .collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let h = vars.hidden(&mut tape, &batch, true)?;
    let h = tape.gather_rows(h, &read)?;
    let logits = vars.head(&mut tape, h)?;
    let v = model.config.vocab_size;
    Ok(tape.value(logits).chunks(v).map(<[f32]>::to_vec).collect())
}

/// `log P(tokens[t] | tokens[..t])` for `t ≥ from[r]`, per row.
pub fn lm_token_logprobs(
    model: &CausalLM<f32>,
    seqs: &[Vec<usize>],
    from: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for (chunk, firsts) in seqs.chunks(CHUNK).zip(from.chunks(CHUNK)) {
        for s in chunk {
            model.check_tokens(s)?;
        }
        let batch = TokenBatch::padded(chunk, 0)?;
        let mut read = Vec::new();
        for (r, (s, &f)) in chunk.iter().zip(firsts).enumerate() {
            if f == 0 {
                return Err(Error::InvalidConfig(
                    "the first token has no prediction".into(),
                ));
            }
            read.extend((f..s.len()).map(|t| r * batch.seq + t - 1));
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let h = vars.hidden(&mut tape, &batch, true)?;
        let h = tape.gather_rows(h, &read)?;
        let logits = vars.head(&mut tape, h)?;
        let values = tape.value(logits);
        let v = model.config.vocab_size;
        let mut k = 0;
        for (s, &f) in chunk.iter().zip(firsts) {
            let mut row = Vec::with_capacity(s.len() - f);
            for &tok in &s[f..] {
                row.push(log_softmax_at(&values[k * v..(k + 1) * v], tok));
                k += 1;
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Draws one token from `logits` under `cfg`.
pub fn sample_token<R: Rng>(logits: &[f64], cfg: &DecodeConfig, rng: &mut R) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    };
    if cfg.greedy || cfg.top_k == Some(1) {
        return argmax();
    }
    let mut scaled: Vec<f64> = logits.iter().map(|&l| l / cfg.temperature).collect();
    if let Some(k) = cfg.top_k {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        for &i in &order[k..] {
            scaled[i] = f64::NEG_INFINITY;
        }
    }
    let probs = softmax64(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples a continuation for every prompt. Row `i` draws from its own
/// stream of `cfg.seed`, so results do not depend on batch composition.
/// Generation stops at end-of-sequence (not included in the output), after
/// `max_new_tokens`, or when the context is full.
pub fn sample_continuations(
    gen: &Generator<'_>,
    prompts: &[Prompt],
    cfg: &DecodeConfig,
    eos: usize,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate(gen.vocab_size())?;
    let mut contexts: Vec<(Vec<usize>, Vec<usize>)> =
        prompts.iter().map(|p| gen.context(p)).collect();
    for (attr, text) in &contexts {
        let max = gen.max_text(attr.len());
        if text.len() > max {
            return Err(Error::SequenceTooLong {
                len: text.len(),
                max,
            });
        }
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..prompts.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut outputs = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..cfg.max_new_tokens {
        active.retain(|&i| contexts[i].1.len() < gen.max_text(contexts[i].0.len()));
        if active.is_empty() {
            break;
        }
        let batch: Vec<(Vec<usize>, Vec<usize>)> =
            active.iter().map(|&i| contexts[i].clone()).collect();
        let logits = gen.next_logits(&batch)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, row) in active.iter().zip(&logits) {
            let tok = sample_token(row, cfg, &mut rngs[i]);
            if tok == eos {
                continue;
            }
            outputs[i].push(tok);
            contexts[i].1.push(tok);
            still.push(i);
        }
        active = still;
    }
    Ok(outputs)
}

pub fn sample_continuation(
    gen: &Generator<'_>,
    prompt: &Prompt,
    cfg: &DecodeConfig,
    eos: usize,
) -> Result<Vec<usize>> {
    Ok(sample_continuations(gen, std::slice::from_ref(prompt), cfg, eos)?.remove(0))
}

/// Add-one smoothed unigram log-probabilities. The first token of each
/// sequence is context and is not counted.
pub fn unigram_table(corpus: &[Vec<usize>], vocab_size: usize) -> Result<Vec<f64>> {
    let mut counts = vec![1.0f64; vocab_size];
    for s in corpus {
        for &t in s.iter().skip(1) {
            *counts.get_mut(t).ok_or(Error::TokenOutOfRange {
                id: t,
                vocab: vocab_size,
            })? += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|c| (c / total).ln()).collect())
}

/// `(Σ log P_M − Σ log P_unigram) / |x|` from per-token log-probabilities.
pub fn slor_value(model_logprobs: &[f64], unigram_logprobs: &[f64]) -> Result<f64> {
    if model_logprobs.is_empty() {
        return Err(Error::Empty("text"));
    }
    let diff: f64 = model_logprobs.iter().sum::<f64>() - unigram_logprobs.iter().sum::<f64>();
    Ok(diff / model_logprobs.len() as f64)
}

/// A fluency scorer independent of the generating models.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringLM {
    pub model: CausalLM<f32>,
    pub unigram: Vec<f64>,
    pub bos: usize,
}

impl ScoringLM {
    pub fn new(model: CausalLM<f32>, unigram: Vec<f64>, bos: usize) -> Result<Self> {
        if unigram.len() != model.config.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "unigram table covers {} tokens, scorer vocabulary has {}",
                unigram.len(),
                model.config.vocab_size
            )));
        }
        if unigram.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("unigram table".into()));
        }
        Ok(Self {
            model,
            unigram,
            bos,
        })
    }

    /// SLOR of `text` read from the start of a sequence.
    pub fn slor(&self, text: &[usize]) -> Result<f64> {
        self.slor_in_context(&[], text)
    }

    /// SLOR of `text` following `[bos] context`; only `text` is scored.
    pub fn slor_in_context(&self, context: &[usize], text: &[usize]) -> Result<f64> {
        Ok(self.slor_batch(&[(context.to_vec(), text.to_vec())])?[0])
    }

    pub fn slor_batch(&self, items: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<f64>> {
        if items.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::Empty("text"));
        }
        let seqs: Vec<Vec<usize>> = items
            .iter()
            .map(|(c, t)| [&[self.bos][..], c, t].concat())
            .collect();
        let from: Vec<usize> = items.iter().map(|(c, _)| 1 + c.len()).collect();
        let lps = lm_token_logprobs(&self.model, &seqs, &from)?;
        items
            .iter()
            .zip(&lps)
            .map(|((_, t), lp)| {
                let uni: Vec<f64> = t.iter().map(|&x| self.unigram[x]).collect();
                slor_value(lp, &uni)
            })
            .collect()
    }
}

/// Fraction of samples whose generated tokens contain the keyword token.
pub fn keyword_accuracy(samples: &[(usize, Vec<usize>)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    let hits = samples.iter().filter(|(k, s)| s.contains(k)).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// One dev prompt with the surface token of its keyword.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DevExample {
    pub prompt: Prompt,
    pub keyword_surface: usize,
}

/// Generates one sample per dev prompt; returns mean SLOR of the
/// continuations (in their prefix context) and keyword accuracy.
pub fn eval_snapshot(
    gen: &Generator<'_>,
    dev: &[DevExample],
    scorer: &ScoringLM,
    cfg: &DecodeConfig,
    eos: usize,
) -> Result<Metrics> {
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let prompts: Vec<Prompt> = dev.iter().map(|d| d.prompt.clone()).collect();
    let samples = sample_continuations(gen, &prompts, cfg, eos)?;
    // an immediately terminated sample scores its end-of-sequence token
    let items: Vec<(Vec<usize>, Vec<usize>)> = dev
        .iter()
        .zip(&samples)
        .map(|(d, s)| {
            (
                d.prompt.prefix.clone(),
                if s.is_empty() { vec![eos] } else { s.clone() },
            )
        })
        .collect();
    let slors = scorer.slor_batch(&items)?;
    let acc = keyword_accuracy(
        &dev.iter()
            .zip(samples)
            .map(|(d, s)| (d.keyword_surface, s))
            .collect::<Vec<_>>(),
    )?;
    Ok(Metrics {
        slor: Some(slors.iter().sum::<f64>() / slors.len() as f64),
        keyword_accuracy: Some(acc),
        kl_to_oracle: None,
    })
}

/// Context `[bos, symbols..]` and attribute token for each (attribute,
/// enumerated prefix) pair, with its oracle weight `P(a) P(prefix | a)`.
fn oracle_contexts(task: &ExactTask) -> Vec<(usize, Vec<usize>, f64)> {
    let mut out = Vec::new();
    for a in 0..task.num_attributes {
        for ctx in task.contexts() {
            out.push((
                a,
                ctx.clone(),
                task.prior[a] * task.prefix_likelihood(a, &ctx),
            ));
        }
    }
    out
}

fn check_task_vocab(model: &AuxTunedModel<f32>, task: &ExactTask) -> Result<()> {
    let need = 4 + task.num_attributes + task.vocab_size;
    if model.base.config.vocab_size != need {
        return Err(Error::VocabMismatch(format!(
            "task needs {need} tokens, model has {}",
            model.base.config.vocab_size
        )));
    }
    Ok(())
}

/// Evaluates base and auxiliary logits for every oracle context.
fn oracle_logits(
    model: &AuxTunedModel<f32>,
    task: &ExactTask,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let ids = exact_symbol_ids(task);
    let mut attrs = Vec::new();
    let mut texts = Vec::new();
    for (a, ctx, _) in oracle_contexts(task) {
        attrs.push(vec![4 + a]);
        texts.push(
            std::iter::once(1)
                .chain(ctx.iter().map(|&x| ids[x]))
                .collect::<Vec<usize>>(),
        );
    }
    let mut out = Vec::with_capacity(texts.len());
    for (a, t) in attrs.chunks(CHUNK * 4).zip(texts.chunks(CHUNK * 4)) {
        out.extend(model.next_logits_batch(a, t)?);
    }
    Ok(out)
}

/// Oracle-weighted mean of `KL(exact_conditional ‖ model)` over attributes
/// and every enumerated prefix. Model mass outside the task symbols counts
/// against it.
pub fn kl_to_oracle(model: &AuxTunedModel<f32>, task: &ExactTask) -> Result<f64> {
    check_task_vocab(model, task)?;
    let ids = exact_symbol_ids(task);
    let logits = oracle_logits(model, task)?;
    let (mut total, mut weight) = (0.0, 0.0);
    for ((a, ctx, w), (b, x)) in oracle_contexts(task).into_iter().zip(&logits) {
        let q = crate::auxtune::fuse(b, x);
        let p = task.exact_conditional(a, &ctx)?;
        total += w * kl(&p, &ids.iter().map(|&i| q[i]).collect::<Vec<_>>());
        weight += w;
    }
    Ok(total / weight)
}

/// `KL(p ‖ q)` over aligned entries.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Mean over contexts with prefix mass above `min_mass` (and over
/// attributes) of the variance across task symbols of
/// `aux_logit − log P(a | x_t; x_{<t})`. Small values mean the auxiliary
/// logits recover the attribute posterior up to a per-context constant.
pub fn posterior_variance(
    model: &AuxTunedModel<f32>,
    task: &ExactTask,
    min_mass: f64,
) -> Result<f64> {
    check_task_vocab(model, task)?;
    let ids = exact_symbol_ids(task);
    let logits = oracle_logits(model, task)?;
    let (mut total, mut count) = (0.0, 0usize);
    for ((a, ctx, _), (_, aux)) in oracle_contexts(task).into_iter().zip(&logits) {
        let mass: f64 = (0..task.num_attributes)
            .map(|b| task.prior[b] * task.prefix_likelihood(b, &ctx))
            .sum();
        if mass <= min_mass {
            continue;
        }
        let diffs: Vec<f64> = (0..task.vocab_size)
            .map(|x| Ok(f64::from(aux[ids[x]]) - task.exact_posterior(a, &ctx, x)?.ln()))
            .collect::<Result<_>>()?;
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        total += diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("contexts above the mass threshold"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxtune::VariantKind;
    use crate::transformer::TransformerConfig;

    fn lm() -> CausalLM<f32> {
        CausalLM::init(TransformerConfig::new(14, 16, 1, 2, 16, 4)).unwrap()
    }

    fn prompt(prefix: Vec<usize>) -> Prompt {
        Prompt {
            attribute: vec![4],
            prefix,
        }
    }

    #[test]
    fn decode_config_validation() {
        assert!(DecodeConfig::default().validate(10).is_ok());
        assert!(DecodeConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate(10)
        .is_err());
        assert!(DecodeConfig {
            top_k: Some(11),
            ..Default::default()
        }
        .validate(10)
        .is_err());
        assert!(DecodeConfig {
            max_new_tokens: 0,
            ..Default::default()
        }
        .validate(10)
        .is_err());
    }

    #[test]
    fn greedy_is_seed_independent_and_top1_matches() {
        let m = lm();
        let gen = Generator::Plain { model: &m, bos: 1 };
        let prompts = vec![prompt(vec![6, 7]), prompt(vec![8])];
        let g = |seed, greedy, top_k| {
            let cfg = DecodeConfig {
                greedy,
                top_k,
                seed,
                max_new_tokens: 6,
                ..Default::default()
            };
            sample_continuations(&gen, &prompts, &cfg, 2).unwrap()
        };
        assert_eq!(g(1, true, None), g(99, true, None));
        assert_eq!(g(1, true, None), g(5, false, Some(1)));
        assert_eq!(g(3, false, None), g(3, false, None));
    }

    #[test]
    fn rows_are_independent_of_batch() {
        let m = lm();
        let gen = Generator::KeywordPrefixed { model: &m, sep: 3 };
        let cfg = DecodeConfig {
            max_new_tokens: 5,
            ..Default::default()
        };
        let both =
            sample_continuations(&gen, &[prompt(vec![6]), prompt(vec![9, 9])], &cfg, 2).unwrap();
        let first = sample_continuations(&gen, &[prompt(vec![6])], &cfg, 2).unwrap();
        assert_eq!(both[0], first[0]);
    }

    #[test]
    fn context_overflow() {
        let m = lm();
        let gen = Generator::Plain { model: &m, bos: 1 };
        let err = sample_continuation(&gen, &prompt(vec![6; 16]), &DecodeConfig::default(), 2)
            .unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
        // a prompt that just fits stops when the context fills up
        let out = sample_continuation(
            &gen,
            &prompt(vec![6; 13]),
            &DecodeConfig {
                greedy: true,
                ..Default::default()
            },
            99,
        )
        .unwrap();
        assert!(out.len() <= 2);
    }

    #[test]
    fn top_k_restricts_support() {
        let logits = [0.0, 3.0, 1.0, 2.5];
        let cfg = DecodeConfig {
            top_k: Some(2),
            temperature: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = sample_token(&logits, &cfg, &mut rng);
            assert!(t == 1 || t == 3);
        }
    }

    #[test]
    fn aux_generator_uses_fused_distribution() {
        let base = lm();
        let m = AuxTunedModel::new(
            base,
            TransformerConfig::new(0, 8, 1, 2, 18, 5),
            VariantKind::Direct,
        )
        .unwrap();
        let gen = Generator::Aux { model: &m, bos: 1 };
        let p = prompt(vec![6, 7]);
        let d = gen.distribution(&p).unwrap();
        let e = m.conditional_distribution(&[4], &[1, 6, 7]).unwrap();
        for (a, b) in d.iter().zip(&e) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn slor_basics() {
        assert_eq!(slor_value(&[-1.0], &[-3.0]).unwrap(), 2.0);
        assert_eq!(slor_value(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        assert!(slor_value(&[], &[]).is_err());
        let m = lm();
        let corpus = vec![vec![1, 6, 7, 2], vec![1, 6, 2]];
        let uni = unigram_table(&corpus, 14).unwrap();
        // counts: 6 → 2+1, total = 5 + 14
        assert!((uni[6] - (3.0f64 / 19.0).ln()).abs() < 1e-12);
        assert!((uni[0] - (1.0f64 / 19.0).ln()).abs() < 1e-12);
        let scorer = ScoringLM::new(m.clone(), uni.clone(), 1).unwrap();
        let one = scorer.slor(&[6]).unwrap();
        let lp = m.sequence_logprob(&[1, 6]).unwrap();
        assert!((one - (lp - uni[6])).abs() < 1e-5);
        let ctx = scorer.slor_in_context(&[7, 8], &[6, 9]).unwrap();
        let lp =
            m.sequence_logprob(&[1, 7, 8, 6, 9]).unwrap() - m.sequence_logprob(&[1, 7, 8]).unwrap();
        assert!((ctx - (lp - uni[6] - uni[9]) / 2.0).abs() < 1e-5);
        assert!(scorer.slor(&[]).is_err());
        assert!(ScoringLM::new(m, vec![0.0; 3], 1).is_err());
    }

    #[test]
    fn keyword_accuracy_cases() {
        let s = |k, v: Vec<usize>| (k, v);
        assert_eq!(
            keyword_accuracy(&[s(5, vec![5]), s(6, vec![1, 6])]).unwrap(),
            1.0
        );
        assert_eq!(
            keyword_accuracy(&[s(5, vec![4]), s(6, vec![])]).unwrap(),
            0.0
        );
        let four = [
            s(5, vec![5]),
            s(5, vec![5, 7]),
            s(6, vec![6]),
            s(6, vec![7]),
        ];
        assert_eq!(keyword_accuracy(&four).unwrap(), 0.75);
        let mut rev = four.to_vec();
        rev.reverse();
        assert_eq!(keyword_accuracy(&rev).unwrap(), 0.75);
        assert!(keyword_accuracy(&[]).is_err());
    }

    #[test]
    fn snapshot_requires_dev_set() {
        let m = lm();
        let scorer = ScoringLM::new(m.clone(), vec![-1.0; 14], 1).unwrap();
        let gen = Generator::Plain { model: &m, bos: 1 };
        assert!(eval_snapshot(&gen, &[], &scorer, &DecodeConfig::default(), 2).is_err());
        let dev = vec![DevExample {
            prompt: prompt(vec![6]),
            keyword_surface: 9,
        }];
        let cfg = DecodeConfig {
            max_new_tokens: 4,
            ..Default::default()
        };
        let a = eval_snapshot(&gen, &dev, &scorer, &cfg, 2).unwrap();
        assert_eq!(a, eval_snapshot(&gen, &dev, &scorer, &cfg, 2).unwrap());
        assert!(a.slor.unwrap().is_finite());
    }

    #[test]
    fn kl_properties() {
        assert_eq!(kl(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!(kl(&[0.9, 0.1], &[0.5, 0.5]) > 0.0);
        let task = ExactTask::default_task(3);
        let base = CausalLM::init(TransformerConfig::new(14, 8, 1, 2, 6, 1)).unwrap();
        let m = AuxTunedModel::new(
            base,
            TransformerConfig::new(0, 8, 1, 2, 7, 2),
            VariantKind::Direct,
        )
        .unwrap();
        assert!(kl_to_oracle(&m, &task).unwrap() > 0.0);
        let small = CausalLM::init(TransformerConfig::new(12, 8, 1, 2, 6, 1)).unwrap();
        let bad = AuxTunedModel::new(
            small,
            TransformerConfig::new(0, 8, 1, 2, 7, 2),
            VariantKind::Direct,
        )
        .unwrap();
        assert!(matches!(
            kl_to_oracle(&bad, &task),
            Err(Error::VocabMismatch(_))
        ));
    }
}
