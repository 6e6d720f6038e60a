//! End-to-end pipelines: the keyword-grammar comparison between auxiliary
//! tuning and a keyword-prefixed model trained from scratch, and oracle
//! convergence on the exact Markov task.

use crate::auxtune::{AuxTunedModel, VariantKind};
use crate::datagen::{
    encode_example, encode_sentence, exact_examples, exact_sequences, exact_vocab,
    gen_conditional_corpus, gen_pretrain_corpus, ExactTask, Example, GrammarSpec, TextExample,
    Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{
    eval_snapshot, kl_to_oracle, posterior_variance, unigram_table, DecodeConfig, DevExample,
    Generator, Prompt, ScoringLM,
};
use crate::training::{
    no_eval, pretrain, train_auxiliary, train_baseline, AuxRow, EvalFn, LmRow, Metrics,
    TrainConfig, TrainReport, TrainRun, Trainable,
};
use crate::transformer::{CausalLM, TransformerConfig};

/// Context length shared by every grammar model: the longest sentence plus
/// markers, or a prefix followed by a full decode budget.
pub const GRAMMAR_CONTEXT: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub grammar_seed: u64,
    /// Sentences for the base LM.
    pub pretrain_sentences: usize,
    /// Further sentences, disjoint from the base shard, for the scorer.
    pub scorer_sentences: usize,
    pub conditional_examples: usize,
    pub dev_prompts: usize,
    /// Model shapes; `vocab_size` is overwritten with the grammar vocabulary.
    pub base: TransformerConfig,
    pub scorer: TransformerConfig,
    pub aux: TransformerConfig,
    pub variant: VariantKind,
    pub pretrain: TrainConfig,
    pub scorer_train: TrainConfig,
    pub aux_train: TrainConfig,
    pub baseline_train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let base = TransformerConfig::new(0, 128, 4, 4, GRAMMAR_CONTEXT, 1);
        Self {
            grammar_seed: 0,
            pretrain_sentences: 50_000,
            scorer_sentences: 50_000,
            conditional_examples: 20_000,
            dev_prompts: 200,
            base,
            scorer: TransformerConfig::new(0, 128, 4, 4, GRAMMAR_CONTEXT, 2),
            aux: TransformerConfig::new(0, 64, 2, 4, GRAMMAR_CONTEXT + 1, 3),
            variant: VariantKind::Direct,
            pretrain: TrainConfig {
                steps: 5000,
                seed: 1,
                ..Default::default()
            },
            scorer_train: TrainConfig {
                steps: 5000,
                seed: 2,
                ..Default::default()
            },
            aux_train: TrainConfig {
                steps: 2000,
                learning_rate: 1e-3,
                seed: 3,
                ..Default::default()
            },
            baseline_train: TrainConfig {
                steps: 5000,
                seed: 4,
                ..Default::default()
            },
            decode: DecodeConfig::default(),
        }
    }
}

impl GrammarConfig {
    /// A reduced budget (small models, a few hundred steps) that exercises
    /// every stage in well under a minute.
    pub fn quick() -> Self {
        let small = |hidden, layers, max_seq_len, seed| {
            let mut c = TransformerConfig::new(0, hidden, layers, 2, max_seq_len, seed);
            c.ffn_dim = 2 * hidden;
            c
        };
        let train = |steps, seed| TrainConfig {
            batch_size: 16,
            steps,
            learning_rate: 2e-3,
            warmup_steps: 20,
            eval_every: 50,
            seed,
            ..Default::default()
        };
        Self {
            pretrain_sentences: 4000,
            scorer_sentences: 2000,
            conditional_examples: 2000,
            dev_prompts: 40,
            base: small(32, 2, GRAMMAR_CONTEXT, 1),
            scorer: small(16, 2, GRAMMAR_CONTEXT, 2),
            aux: small(16, 1, GRAMMAR_CONTEXT + 1, 3),
            pretrain: train(200, 1),
            scorer_train: train(150, 2),
            aux_train: train(100, 3),
            baseline_train: train(200, 4),
            decode: DecodeConfig {
                max_new_tokens: 12,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

/// Surface-form corpora for one grammar run, as written by data generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarText {
    pub spec: GrammarSpec,
    pub pretrain: Vec<Vec<String>>,
    /// Held-out shard for the fluency scorer.
    pub scorer: Vec<Vec<String>>,
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
}

impl GrammarText {
    /// The base shard and the scorer shard are consecutive draws of one
    /// stream, as are the training and dev examples.
    pub fn generate(
        seed: u64,
        pretrain: usize,
        scorer: usize,
        train: usize,
        dev: usize,
    ) -> Result<Self> {
        if pretrain == 0 || scorer == 0 {
            return Err(Error::InvalidConfig("corpus sizes must be positive".into()));
        }
        if train == 0 || dev == 0 {
            return Err(Error::InvalidConfig(
                "example counts must be positive".into(),
            ));
        }
        let spec = GrammarSpec::default_task(seed);
        let mut sentences = gen_pretrain_corpus(&spec, pretrain + scorer)?;
        let scorer = sentences.split_off(pretrain);
        let mut examples = gen_conditional_corpus(&spec, train + dev)?;
        let dev = examples.split_off(train);
        Ok(Self {
            spec,
            pretrain: sentences,
            scorer,
            train: examples,
            dev,
        })
    }
}

/// Encoded corpora for one grammar run.
#[derive(Clone, Debug)]
pub struct GrammarData {
    pub vocab: Vocab,
    pub pretrain: Vec<Vec<usize>>,
    pub scorer: Vec<Vec<usize>>,
    pub train: Vec<Example>,
    pub dev: Vec<DevExample>,
}

/// Dev prompt for a text example: its keyword token and encoded prefix.
pub fn dev_example(vocab: &Vocab, ex: &TextExample) -> Result<DevExample> {
    Ok(DevExample {
        prompt: Prompt {
            attribute: vec![vocab.keyword_id(&ex.keyword)?],
            prefix: vocab.encode(&ex.prefix)?,
        },
        keyword_surface: vocab.surface_id(&ex.keyword)?,
    })
}

impl GrammarData {
    pub fn generate(cfg: &GrammarConfig) -> Result<Self> {
        let text = GrammarText::generate(
            cfg.grammar_seed,
            cfg.pretrain_sentences,
            cfg.scorer_sentences,
            cfg.conditional_examples,
            cfg.dev_prompts,
        )?;
        Self::encode(
            &text.spec.vocab()?,
            &text.pretrain,
            &text.scorer,
            &text.train,
            &text.dev,
        )
    }

    pub fn encode(
        vocab: &Vocab,
        pretrain: &[Vec<String>],
        scorer: &[Vec<String>],
        train: &[TextExample],
        dev: &[TextExample],
    ) -> Result<Self> {
        let sentences = |s: &[Vec<String>]| {
            s.iter()
                .map(|w| encode_sentence(vocab, w))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            vocab: vocab.clone(),
            pretrain: sentences(pretrain)?,
            scorer: sentences(scorer)?,
            train: train
                .iter()
                .map(|e| encode_example(vocab, e))
                .collect::<Result<_>>()?,
            dev: dev
                .iter()
                .map(|e| dev_example(vocab, e))
                .collect::<Result<_>>()?,
        })
    }

    /// Add-one unigram log-probabilities over the base pretraining shard.
    pub fn unigram(&self) -> Result<Vec<f64>> {
        unigram_table(&self.pretrain, self.vocab.len())
    }
}

fn with_vocab(mut c: TransformerConfig, vocab: &Vocab) -> TransformerConfig {
    c.vocab_size = vocab.len();
    c
}

#[derive(Clone, Debug)]
pub struct GrammarOutcome {
    pub data: GrammarData,
    pub base: CausalLM<f32>,
    pub base_report: TrainReport,
    pub scorer: ScoringLM,
    pub scorer_report: TrainReport,
    /// Fluency and accuracy of the unconditioned base on the dev prompts.
    pub base_metrics: Metrics,
    pub aux: AuxTunedModel<f32>,
    pub aux_report: TrainReport,
    pub baseline: CausalLM<f32>,
    pub baseline_report: TrainReport,
}

/// Trains the independent fluency scorer on the held-out shard.
pub fn train_scorer(cfg: &GrammarConfig, data: &GrammarData) -> Result<(ScoringLM, TrainReport)> {
    let (model, report) = pretrain(
        &cfg.scorer_train,
        &data.scorer,
        with_vocab(cfg.scorer, &data.vocab),
    )?;
    Ok((
        ScoringLM::new(model, data.unigram()?, data.vocab.bos())?,
        report,
    ))
}

/// Evaluation hook for the auxiliary model on the dev prompts.
pub fn aux_eval<'a>(
    data: &'a GrammarData,
    scorer: &'a ScoringLM,
    decode: &'a DecodeConfig,
) -> impl FnMut(usize, &AuxTunedModel<f32>) -> Result<Metrics> + 'a {
    move |_, model| {
        let gen = Generator::Aux {
            model,
            bos: data.vocab.bos(),
        };
        eval_snapshot(&gen, &data.dev, scorer, decode, data.vocab.eos())
    }
}

/// Evaluation hook for the keyword-prefixed baseline on the dev prompts.
pub fn baseline_eval<'a>(
    data: &'a GrammarData,
    scorer: &'a ScoringLM,
    decode: &'a DecodeConfig,
) -> impl FnMut(usize, &CausalLM<f32>) -> Result<Metrics> + 'a {
    move |_, model| {
        let gen = Generator::KeywordPrefixed {
            model,
            sep: data.vocab.sep(),
        };
        eval_snapshot(&gen, &data.dev, scorer, decode, data.vocab.eos())
    }
}

/// Runs data generation, base and scorer pretraining, auxiliary tuning and
/// the baseline, in that order.
pub fn run_grammar(cfg: &GrammarConfig) -> Result<GrammarOutcome> {
    let data = GrammarData::generate(cfg)?;
    let (base, base_report) = pretrain(
        &cfg.pretrain,
        &data.pretrain,
        with_vocab(cfg.base, &data.vocab),
    )?;
    let (scorer, scorer_report) = train_scorer(cfg, &data)?;
    let base_metrics = eval_snapshot(
        &Generator::Plain {
            model: &base,
            bos: data.vocab.bos(),
        },
        &data.dev,
        &scorer,
        &cfg.decode,
        data.vocab.eos(),
    )?;
    let (aux, aux_report) = train_auxiliary(
        &cfg.aux_train,
        base.clone(),
        &data.train,
        with_vocab(cfg.aux, &data.vocab),
        cfg.variant,
        data.vocab.bos(),
        &mut aux_eval(&data, &scorer, &cfg.decode),
    )?;
    let (baseline, baseline_report) = train_baseline(
        &cfg.baseline_train,
        &data.train,
        with_vocab(cfg.base, &data.vocab),
        data.vocab.sep(),
        &mut baseline_eval(&data, &scorer, &cfg.decode),
    )?;
    Ok(GrammarOutcome {
        data,
        base,
        base_report,
        scorer,
        scorer_report,
        base_metrics,
        aux,
        aux_report,
        baseline,
        baseline_report,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactConfig {
    pub task_seed: u64,
    pub vocab_size: usize,
    pub num_attributes: usize,
    pub seq_len: usize,
    pub pretrain_sequences: usize,
    pub aux_sequences: usize,
    /// `vocab_size` and `max_seq_len` are derived from the task.
    pub base: TransformerConfig,
    pub aux: TransformerConfig,
    pub variant: VariantKind,
    pub pretrain: TrainConfig,
    pub aux_train: TrainConfig,
    /// Extra steps at `refine_lr` after each of the two runs; 0 disables.
    pub refine_steps: usize,
    pub refine_lr: f64,
    /// Prefix-mass threshold for the posterior-recovery variance.
    pub min_mass: f64,
}

impl Default for ExactConfig {
    fn default() -> Self {
        let mut base = TransformerConfig::new(0, 32, 2, 2, 0, 1);
        base.ffn_dim = 128;
        let mut aux = TransformerConfig::new(0, 32, 2, 2, 0, 2);
        aux.ffn_dim = 128;
        Self {
            task_seed: 0,
            vocab_size: 8,
            num_attributes: 2,
            seq_len: 5,
            pretrain_sequences: 200_000,
            aux_sequences: 200_000,
            base,
            aux,
            variant: VariantKind::Direct,
            pretrain: TrainConfig {
                batch_size: 256,
                steps: 3000,
                learning_rate: 2e-3,
                warmup_steps: 100,
                eval_every: 500,
                seed: 1,
                ..Default::default()
            },
            aux_train: TrainConfig {
                batch_size: 256,
                steps: 3000,
                learning_rate: 2e-3,
                warmup_steps: 100,
                eval_every: 500,
                seed: 2,
                ..Default::default()
            },
            refine_steps: 1000,
            refine_lr: 2e-4,
            min_mass: 1e-3,
        }
    }
}

impl ExactConfig {
    /// A reduced budget for smoke runs.
    pub fn quick() -> Self {
        let d = Self::default();
        let train = |t: TrainConfig| TrainConfig {
            batch_size: 64,
            steps: 300,
            eval_every: 100,
            ..t
        };
        Self {
            pretrain_sequences: 20_000,
            aux_sequences: 20_000,
            pretrain: train(d.pretrain),
            aux_train: train(d.aux_train),
            refine_steps: 100,
            ..d
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExactOutcome {
    pub task: ExactTask,
    pub base: CausalLM<f32>,
    pub base_report: TrainReport,
    pub aux: AuxTunedModel<f32>,
    /// Rows carry `kl_to_oracle`.
    pub aux_report: TrainReport,
    pub kl_to_oracle: f64,
    pub posterior_variance: f64,
}

/// Runs `config`, then continues for `refine_steps` more steps at the
/// constant rate `refine_lr` with the optimizer state carried over.
pub fn train_refined<M: Trainable>(
    model: M,
    rows: &[M::Row],
    config: &TrainConfig,
    refine_steps: usize,
    refine_lr: f64,
    eval: &mut EvalFn<'_, M>,
) -> Result<(M, TrainReport)> {
    let mut run = TrainRun::new(model, *config)?;
    let mut report = run.run(rows, eval)?;
    if refine_steps > 0 {
        run.config = TrainConfig {
            steps: config.steps + refine_steps,
            learning_rate: refine_lr,
            warmup_steps: 0,
            eval_every: config.eval_every.min(refine_steps),
            ..*config
        };
        run.config.validate()?;
        let more = run.run(rows, eval)?;
        report.rows.extend(more.rows);
        report.step_losses.extend(more.step_losses);
    }
    Ok((run.model, report))
}

/// Pretrains on unconditional samples of the task, then tunes the auxiliary
/// pathway on attribute-tagged samples.
pub fn run_exact(cfg: &ExactConfig) -> Result<ExactOutcome> {
    let task = ExactTask::generate(
        cfg.vocab_size,
        cfg.num_attributes,
        cfg.seq_len,
        cfg.task_seed,
    )?;
    let vocab = exact_vocab(&task);
    let mut base_cfg = with_vocab(cfg.base, &vocab);
    base_cfg.max_seq_len = cfg.seq_len + 1;
    let mut aux_cfg = with_vocab(cfg.aux, &vocab);
    aux_cfg.max_seq_len = cfg.seq_len + 2;

    let unconditional =
        task.sample_task_corpus(cfg.pretrain_sequences, cfg.task_seed.wrapping_add(1));
    let rows: Vec<LmRow> = exact_sequences(&task, &unconditional)
        .into_iter()
        .map(LmRow::sentence)
        .collect();
    let (base, base_report) = train_refined(
        CausalLM::init(base_cfg)?,
        &rows,
        &cfg.pretrain,
        cfg.refine_steps,
        cfg.refine_lr,
        &mut no_eval,
    )?;
    let conditional = task.sample_task_corpus(cfg.aux_sequences, cfg.task_seed.wrapping_add(2));
    let mut eval = |_: usize, m: &AuxTunedModel<f32>| -> Result<Metrics> {
        Ok(Metrics {
            kl_to_oracle: Some(kl_to_oracle(m, &task)?),
            ..Default::default()
        })
    };
    let rows: Vec<AuxRow> = exact_examples(&task, &conditional)
        .iter()
        .map(|e| AuxRow::from_example(e, vocab.bos()))
        .collect();
    let (aux, aux_report) = train_refined(
        AuxTunedModel::new(base.clone(), aux_cfg, cfg.variant)?,
        &rows,
        &cfg.aux_train,
        cfg.refine_steps,
        cfg.refine_lr,
        &mut eval,
    )?;
    let kl = kl_to_oracle(&aux, &task)?;
    let pv = posterior_variance(&aux, &task, cfg.min_mass)?;
    Ok(ExactOutcome {
        task,
        base,
        base_report,
        aux,
        aux_report,
        kl_to_oracle: kl,
        posterior_variance: pv,
    })
}
