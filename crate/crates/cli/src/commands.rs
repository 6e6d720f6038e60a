//! One function per subcommand.

use crate::dataset::{self, Dataset};
use crate::settings::{usage, RunManifest, Settings};
use crate::{
    DatagenArgs, DecodeArgs, EvalArgs, ExperimentArgs, GenerateArgs, ModelArgs, PlotArgs,
    PretrainArgs, TrainArgs, TrainAuxArgs, TrainBaselineArgs,
};
use anyhow::{Context, Result};
use auxtune::auxtune::{AuxTunedModel, VariantKind};
use auxtune::checkpoint::Checkpoint;
use auxtune::datagen::{ExactTask, Vocab};
use auxtune::eval::{
    eval_snapshot, kl_to_oracle, posterior_variance, sample_continuations, unigram_table,
    DecodeConfig, Generator, Prompt, ScoringLM,
};
use auxtune::experiment::{
    aux_eval, baseline_eval, run_exact, run_grammar, ExactConfig, GrammarConfig, GrammarText,
};
use auxtune::plot::{line_chart, parse_metrics_csv, METRICS};
use auxtune::training::{
    no_eval, AuxRow, EvalFn, LmRow, Metrics, ReportRow, TrainConfig, TrainReport, TrainRun,
    Trainable,
};
use auxtune::transformer::{CausalLM, TransformerConfig};
use std::path::{Path, PathBuf};

const CHECKPOINT: &str = "checkpoint.bin";
const METRICS_CSV: &str = "metrics.csv";

fn model_config(
    s: &mut Settings,
    a: &ModelArgs,
    d: TransformerConfig,
    vocab: usize,
) -> Result<TransformerConfig> {
    let hidden_dim = s.get("hidden-dim", a.hidden_dim, d.hidden_dim)?;
    let ffn_default = if hidden_dim == d.hidden_dim {
        d.ffn_dim
    } else {
        4 * hidden_dim
    };
    let c = TransformerConfig {
        vocab_size: vocab,
        hidden_dim,
        num_layers: s.get("num-layers", a.num_layers, d.num_layers)?,
        num_heads: s.get("heads", a.heads, d.num_heads)?,
        ffn_dim: s.get("ffn-dim", a.ffn_dim, ffn_default)?,
        max_seq_len: s.get("max-seq-len", a.max_seq_len, d.max_seq_len)?,
        seed: s.get("model-seed", a.model_seed, d.seed)?,
    };
    c.validate()?;
    Ok(c)
}

fn train_config(s: &mut Settings, a: &TrainArgs, d: TrainConfig) -> Result<TrainConfig> {
    let c = TrainConfig {
        batch_size: s.get("batch-size", a.batch_size, d.batch_size)?,
        steps: s.get("steps", a.steps, d.steps)?,
        learning_rate: s.get("lr", a.lr, d.learning_rate)?,
        warmup_steps: s.get("warmup-steps", a.warmup_steps, d.warmup_steps)?,
        adam_beta1: s.get("adam-beta1", a.adam_beta1, d.adam_beta1)?,
        adam_beta2: s.get("adam-beta2", a.adam_beta2, d.adam_beta2)?,
        adam_eps: s.get("adam-eps", a.adam_eps, d.adam_eps)?,
        grad_clip_norm: s.get("grad-clip", a.grad_clip, d.grad_clip_norm)?,
        eval_every: s.get("eval-every", a.eval_every, d.eval_every.min(d.steps))?,
        seed: s.get("seed", a.seed, d.seed)?,
    };
    c.validate()?;
    Ok(c)
}

fn decode_config(s: &mut Settings, a: &DecodeArgs, seed: u64) -> Result<DecodeConfig> {
    let d = DecodeConfig::default();
    Ok(DecodeConfig {
        max_new_tokens: s.get("max-new-tokens", a.max_new_tokens, d.max_new_tokens)?,
        temperature: s.get("temperature", a.temperature, d.temperature)?,
        top_k: s.optional("top-k", a.top_k)?,
        greedy: s.switch("greedy", a.greedy)?,
        seed,
    })
}

fn path_setting(s: &mut Settings, key: &str, flag: &Option<PathBuf>) -> Result<PathBuf> {
    s.required::<String>(key, flag.as_ref().map(|p| p.display().to_string()))
        .map(PathBuf::from)
}

fn optional_path(s: &mut Settings, key: &str, flag: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    Ok(
        s.optional::<String>(key, flag.as_ref().map(|p| p.display().to_string()))?
            .map(PathBuf::from),
    )
}

/// Task of a data directory without loading its corpora.
fn probe_task(dir: &Path) -> Result<Option<ExactTask>> {
    if dir.join(dataset::TASK).exists() {
        let task = ExactTask::from_manifest(&dataset::read(&dir.join(dataset::TASK))?)
            .context("parsing task.txt")?;
        return Ok(Some(task));
    }
    if dir.join(dataset::VOCAB).exists() {
        return Ok(None);
    }
    Err(usage(format!(
        "{} is not a data directory (no vocab.txt)",
        dir.display()
    )))
}

fn stamp(ckpt: &mut Checkpoint, role: &str, vocab: &Vocab) {
    ckpt.set("role", role);
    ckpt.set("vocab.fingerprint", vocab.fingerprint());
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocab, path: &Path) -> Result<()> {
    match ckpt.get("vocab.fingerprint") {
        Some(fp) if fp != vocab.fingerprint() => Err(auxtune::Error::VocabMismatch(format!(
            "{} was trained on a different vocabulary",
            path.display()
        ))
        .into()),
        _ => Ok(()),
    }
}

fn load_scorer(path: &Path, ds: &Dataset) -> Result<ScoringLM> {
    let ckpt = load_checkpoint(path)?;
    check_vocab(&ckpt, &ds.vocab, path)?;
    let model = CausalLM::from_checkpoint(&ckpt)?;
    let unigram = unigram_table(&ds.pretrain, ds.vocab.len())?;
    Ok(ScoringLM::new(model, unigram, ds.vocab.bos())?)
}

/// Trains (or resumes) and writes checkpoint and metrics; returns them.
fn train_and_save<M: Trainable>(
    init: impl FnOnce() -> Result<M>,
    resume: Option<&Path>,
    rows: &[M::Row],
    config: TrainConfig,
    eval: &mut EvalFn<'_, M>,
    out_dir: &Path,
    role: &str,
    vocab: &Vocab,
) -> Result<(TrainRun<M>, TrainReport, Vec<PathBuf>)> {
    let mut run = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_vocab(&ckpt, vocab, path)?;
            TrainRun::resume(&ckpt, config)?
        }
        None => TrainRun::new(init()?, config)?,
    };
    let report = run.run(rows, eval)?;
    let mut ckpt = run.to_checkpoint();
    stamp(&mut ckpt, role, vocab);
    let ckpt_path = out_dir.join(CHECKPOINT);
    ckpt.save(&ckpt_path)
        .with_context(|| format!("writing {}", ckpt_path.display()))?;
    let csv = out_dir.join(METRICS_CSV);
    report.write_csv(&csv)?;
    println!("{}", report.summary());
    Ok((run, report, vec![ckpt_path, csv]))
}

pub fn datagen(a: DatagenArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let task = s.required::<String>("task", a.task)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    match task.as_str() {
        "grammar" => {
            let d = GrammarConfig::default();
            let count = s.get("count", a.count, d.pretrain_sentences)?;
            let scorer = s.get("scorer-count", a.scorer_count, d.scorer_sentences)?;
            let train = s.get(
                "conditional-count",
                a.conditional_count,
                d.conditional_examples,
            )?;
            let dev = s.get("dev-count", a.dev_count, d.dev_prompts)?;
            if [count, scorer, train, dev].contains(&0) {
                return Err(auxtune::Error::InvalidConfig("counts must be positive".into()).into());
            }
            let manifest = RunManifest::write("datagen", &s, &[], &out_dir)?;
            let text = GrammarText::generate(seed, count, scorer, train, dev)?;
            let files = dataset::write_grammar(&out_dir, &text)?;
            println!(
                "grammar corpus: {count} pretraining, {scorer} scorer, {train} conditional, {dev} dev -> {}",
                out_dir.display()
            );
            manifest.finish(&files)
        }
        "exact" => {
            let d = ExactConfig::default();
            let count = s.get("count", a.count, d.pretrain_sequences)?;
            let v = s.get("vocab-size", a.vocab_size, d.vocab_size)?;
            let attrs = s.get("attributes", a.attributes, d.num_attributes)?;
            let n = s.get("seq-len", a.seq_len, d.seq_len)?;
            if count == 0 {
                return Err(auxtune::Error::InvalidConfig("count must be positive".into()).into());
            }
            let manifest = RunManifest::write("datagen", &s, &[], &out_dir)?;
            let task = ExactTask::generate(v, attrs, n, seed)?;
            let files = dataset::write_exact(&out_dir, &task, count)?;
            println!(
                "exact task v={v} attributes={attrs} n={n}: {count} sequences per corpus -> {}",
                out_dir.display()
            );
            manifest.finish(&files)
        }
        other => Err(usage(format!(
            "unknown task {other:?}; expected grammar or exact"
        ))),
    }
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let data_dir = path_setting(&mut s, "data-dir", &a.data_dir)?;
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    let shard = s.get("shard", a.shard, "pretrain".to_string())?;
    let exact = probe_task(&data_dir)?;
    let (model_default, train_default) = match (&exact, shard.as_str()) {
        (Some(task), "pretrain") => {
            let d = ExactConfig::default();
            let mut m = d.base;
            m.max_seq_len = task.seq_len + 1;
            (m, d.pretrain)
        }
        (None, "pretrain") => {
            let d = GrammarConfig::default();
            (d.base, d.pretrain)
        }
        (None, "scorer") => {
            let d = GrammarConfig::default();
            (d.scorer, d.scorer_train)
        }
        (Some(_), "scorer") => return Err(usage("the exact task has no scorer shard")),
        (_, other) => {
            return Err(usage(format!(
                "unknown shard {other:?}; expected pretrain or scorer"
            )))
        }
    };
    let vocab = Vocab::from_text(&dataset::read(&data_dir.join(dataset::VOCAB))?)?;
    let model = model_config(&mut s, &a.model, model_default, vocab.len())?;
    let train = train_config(&mut s, &a.train, train_default)?;
    let resume = optional_path(&mut s, "resume", &a.train.resume)?;
    let mut inputs = vec![("data-dir", data_dir.as_path())];
    if let Some(r) = &resume {
        inputs.push(("resume", r.as_path()));
    }
    let manifest = RunManifest::write("pretrain", &s, &inputs, &out_dir)?;

    let ds = Dataset::load(&data_dir)?;
    let corpus = if shard == "scorer" {
        &ds.scorer
    } else {
        &ds.pretrain
    };
    let rows: Vec<LmRow> = corpus.iter().cloned().map(LmRow::sentence).collect();
    let role = if shard == "scorer" { "scorer" } else { "base" };
    let (run, _, files) = train_and_save(
        || Ok(CausalLM::init(model)?),
        resume.as_deref(),
        &rows,
        train,
        &mut no_eval,
        &out_dir,
        role,
        &ds.vocab,
    )?;
    println!("param_hash {}", run.model.param_hash());
    manifest.finish(&files)
}

fn parse_variant(name: &str, layers: Option<usize>) -> Result<VariantKind> {
    match (name, layers) {
        ("direct", None) => Ok(VariantKind::Direct),
        ("direct", Some(_)) => Err(usage("--layers applies to the feature variant only")),
        ("feature" | "feature_extraction", Some(layers)) => {
            Ok(VariantKind::FeatureExtraction { layers })
        }
        ("feature" | "feature_extraction", None) => {
            Err(usage("--variant feature requires --layers"))
        }
        (other, _) => Err(usage(format!(
            "unknown variant {other:?}; expected direct or feature"
        ))),
    }
}

pub fn train_aux(a: TrainAuxArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let data_dir = path_setting(&mut s, "data-dir", &a.data_dir)?;
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    let base_path = path_setting(&mut s, "base-checkpoint", &a.base_checkpoint)?;
    let variant = s.get("variant", a.variant, "direct".to_string())?;
    let layers = s.optional("layers", a.layers)?;
    let kind = parse_variant(&variant, layers)?;
    let scorer_path = optional_path(&mut s, "scorer", &a.scorer)?;
    let exact = probe_task(&data_dir)?;
    let (model_default, train_default) = match &exact {
        Some(task) => {
            let d = ExactConfig::default();
            let mut m = d.aux;
            m.max_seq_len = task.seq_len + 2;
            (m, d.aux_train)
        }
        None => {
            let d = GrammarConfig::default();
            (d.aux, d.aux_train)
        }
    };
    let vocab = Vocab::from_text(&dataset::read(&data_dir.join(dataset::VOCAB))?)?;
    let aux_config = model_config(&mut s, &a.model, model_default, vocab.len())?;
    let train = train_config(&mut s, &a.train, train_default)?;
    let decode_seed = s.get("decode-seed", None, 0u64)?;
    let decode = decode_config(&mut s, &a.decode, decode_seed)?;
    decode.validate(vocab.len())?;
    let resume = optional_path(&mut s, "resume", &a.train.resume)?;
    if exact.is_some() && scorer_path.is_some() {
        return Err(usage("--scorer applies to grammar data only"));
    }
    let mut inputs = vec![
        ("data-dir", data_dir.as_path()),
        ("base-checkpoint", base_path.as_path()),
    ];
    if let Some(p) = &scorer_path {
        inputs.push(("scorer", p.as_path()));
    }
    if let Some(r) = &resume {
        inputs.push(("resume", r.as_path()));
    }
    let manifest = RunManifest::write("train-aux", &s, &inputs, &out_dir)?;

    let base_ckpt = load_checkpoint(&base_path)?;
    if base_ckpt.get("kind") != Some("causal_lm") {
        return Err(usage(format!(
            "{} is not a base language model checkpoint",
            base_path.display()
        )));
    }
    check_vocab(&base_ckpt, &vocab, &base_path)?;
    let base = CausalLM::from_checkpoint(&base_ckpt)?;
    if base.config.vocab_size != vocab.len() {
        return Err(auxtune::Error::VocabMismatch(format!(
            "base has {} tokens, data has {}",
            base.config.vocab_size,
            vocab.len()
        ))
        .into());
    }
    let pretrained_hash = base.param_hash();
    // fail fast on an invalid variant before loading corpora
    let model = AuxTunedModel::new(base, aux_config, kind)?;

    let ds = Dataset::load(&data_dir)?;
    let rows: Vec<AuxRow> = ds
        .train
        .iter()
        .map(|e| AuxRow::from_example(e, ds.vocab.bos()))
        .collect();
    let scorer = scorer_path
        .as_deref()
        .map(|p| load_scorer(p, &ds))
        .transpose()?;
    let data = ds.grammar_data();
    let mut eval: Box<EvalFn<'_, AuxTunedModel<f32>>> = match (&ds.task, &scorer) {
        (dataset::Task::Exact(task), _) => Box::new(move |_, m: &AuxTunedModel<f32>| {
            Ok(Metrics {
                kl_to_oracle: Some(kl_to_oracle(m, task)?),
                ..Default::default()
            })
        }),
        (dataset::Task::Grammar, Some(scorer)) => Box::new(aux_eval(&data, scorer, &decode)),
        (dataset::Task::Grammar, None) => Box::new(no_eval),
    };
    let (run, _, files) = train_and_save(
        || Ok(model),
        resume.as_deref(),
        &rows,
        train,
        &mut *eval,
        &out_dir,
        "aux",
        &ds.vocab,
    )?;
    let hash = run.model.base_hash();
    if resume.is_none() && hash != pretrained_hash {
        return Err(anyhow::anyhow!(
            "base parameters changed during auxiliary training"
        ));
    }
    println!("base_hash {hash}");
    println!("trainable_parameters {}", run.model.trainable_count());
    manifest.finish(&files)
}

pub fn train_baseline(a: TrainBaselineArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let data_dir = path_setting(&mut s, "data-dir", &a.data_dir)?;
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    let scorer_path = optional_path(&mut s, "scorer", &a.scorer)?;
    let exact = probe_task(&data_dir)?;
    let (model_default, train_default) = match &exact {
        Some(task) => {
            let d = ExactConfig::default();
            let mut m = d.base;
            m.max_seq_len = task.seq_len + 2;
            (m, d.pretrain)
        }
        None => {
            let d = GrammarConfig::default();
            (d.base, d.baseline_train)
        }
    };
    let vocab = Vocab::from_text(&dataset::read(&data_dir.join(dataset::VOCAB))?)?;
    let model = model_config(&mut s, &a.model, model_default, vocab.len())?;
    let train = train_config(&mut s, &a.train, train_default)?;
    let decode_seed = s.get("decode-seed", None, 0u64)?;
    let decode = decode_config(&mut s, &a.decode, decode_seed)?;
    decode.validate(vocab.len())?;
    let resume = optional_path(&mut s, "resume", &a.train.resume)?;
    if exact.is_some() && scorer_path.is_some() {
        return Err(usage("--scorer applies to grammar data only"));
    }
    let mut inputs = vec![("data-dir", data_dir.as_path())];
    if let Some(p) = &scorer_path {
        inputs.push(("scorer", p.as_path()));
    }
    if let Some(r) = &resume {
        inputs.push(("resume", r.as_path()));
    }
    let manifest = RunManifest::write("train-baseline", &s, &inputs, &out_dir)?;

    let ds = Dataset::load(&data_dir)?;
    let rows: Vec<LmRow> = ds
        .train
        .iter()
        .map(|e| LmRow::keyword_prefixed(e, ds.vocab.sep()))
        .collect();
    let scorer = scorer_path
        .as_deref()
        .map(|p| load_scorer(p, &ds))
        .transpose()?;
    let data = ds.grammar_data();
    let mut eval: Box<EvalFn<'_, CausalLM<f32>>> = match &scorer {
        Some(scorer) => Box::new(baseline_eval(&data, scorer, &decode)),
        None => Box::new(no_eval),
    };
    let (_, _, files) = train_and_save(
        || Ok(CausalLM::init(model)?),
        resume.as_deref(),
        &rows,
        train,
        &mut *eval,
        &out_dir,
        "baseline",
        &ds.vocab,
    )?;
    manifest.finish(&files)
}

/// A checkpoint in the form its generator needs.
enum Loaded {
    Plain(CausalLM<f32>),
    Baseline(CausalLM<f32>),
    Aux(AuxTunedModel<f32>),
}

impl Loaded {
    fn open(path: &Path, vocab: &Vocab) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        check_vocab(&ckpt, vocab, path)?;
        let loaded = match (ckpt.get("kind"), ckpt.get("role")) {
            (Some("aux_tuned"), _) => Self::Aux(AuxTunedModel::from_checkpoint(&ckpt)?),
            (Some("causal_lm"), Some("baseline")) => {
                Self::Baseline(CausalLM::from_checkpoint(&ckpt)?)
            }
            (Some("causal_lm"), _) => Self::Plain(CausalLM::from_checkpoint(&ckpt)?),
            (kind, _) => {
                return Err(usage(format!(
                    "{}: unsupported checkpoint kind {kind:?}",
                    path.display()
                )))
            }
        };
        if loaded.vocab_size() != vocab.len() {
            return Err(auxtune::Error::VocabMismatch(format!(
                "{} has {} tokens, data has {}",
                path.display(),
                loaded.vocab_size(),
                vocab.len()
            ))
            .into());
        }
        Ok(loaded)
    }

    fn vocab_size(&self) -> usize {
        match self {
            Self::Plain(m) | Self::Baseline(m) => m.config.vocab_size,
            Self::Aux(m) => m.base.config.vocab_size,
        }
    }

    fn generator(&self, vocab: &Vocab) -> Generator<'_> {
        match self {
            Self::Plain(model) => Generator::Plain {
                model,
                bos: vocab.bos(),
            },
            Self::Baseline(model) => Generator::KeywordPrefixed {
                model,
                sep: vocab.sep(),
            },
            Self::Aux(model) => Generator::Aux {
                model,
                bos: vocab.bos(),
            },
        }
    }

    fn needs_keyword(&self) -> bool {
        !matches!(self, Self::Plain(_))
    }

    /// Teacher-forced continuation loss over `examples`.
    fn loss(&self, examples: &[auxtune::datagen::Example], vocab: &Vocab) -> Result<f64> {
        Ok(match self {
            Self::Plain(m) => {
                let rows: Vec<LmRow> = examples
                    .iter()
                    .map(|e| {
                        let mut tokens = vec![vocab.bos()];
                        tokens.extend(&e.prefix);
                        let first_target = tokens.len();
                        tokens.extend(&e.continuation);
                        LmRow {
                            tokens,
                            first_target,
                        }
                    })
                    .collect();
                m.loss(&rows.iter().collect::<Vec<_>>(), false)?.0
            }
            Self::Baseline(m) => {
                let rows: Vec<LmRow> = examples
                    .iter()
                    .map(|e| LmRow::keyword_prefixed(e, vocab.sep()))
                    .collect();
                m.loss(&rows.iter().collect::<Vec<_>>(), false)?.0
            }
            Self::Aux(m) => {
                let rows: Vec<AuxRow> = examples
                    .iter()
                    .map(|e| AuxRow::from_example(e, vocab.bos()))
                    .collect();
                m.loss(&rows.iter().collect::<Vec<_>>(), false)?.0
            }
        })
    }
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let ckpt_path = path_setting(&mut s, "checkpoint", &a.checkpoint)?;
    let data_dir = path_setting(&mut s, "data-dir", &a.data_dir)?;
    let prefix = s.get("prefix", a.prefix, String::new())?;
    let keyword = s.optional::<String>("keyword", a.keyword)?;
    let n = s.get("n", a.n, 1usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let decode = decode_config(&mut s, &a.decode, seed)?;
    let out = optional_path(&mut s, "out", &a.out)?;
    s.finish()?;
    if n == 0 {
        return Err(usage("--n must be positive"));
    }

    let vocab = Vocab::from_text(&dataset::read(&data_dir.join(dataset::VOCAB))?)?;
    decode.validate(vocab.len())?;
    let model = Loaded::open(&ckpt_path, &vocab)?;
    let attribute = match (&keyword, model.needs_keyword()) {
        (Some(k), _) => vec![vocab.keyword_id(k)?],
        (None, true) => return Err(usage("this model is keyword-conditioned; pass --keyword")),
        (None, false) => vec![],
    };
    let prefix_ids = vocab.encode_text(&prefix)?;
    let prompts = vec![
        Prompt {
            attribute,
            prefix: prefix_ids.clone(),
        };
        n
    ];
    let samples = sample_continuations(&model.generator(&vocab), &prompts, &decode, vocab.eos())?;
    let mut text = String::new();
    for sample in samples {
        let ids: Vec<usize> = prefix_ids.iter().chain(&sample).copied().collect();
        text.push_str(&vocab.decode_text(&ids)?);
        text.push('\n');
    }
    match out {
        Some(path) => {
            dataset::write(&path, &text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// File-name label for a checkpoint: its directory for `checkpoint.bin`,
/// else the file stem.
fn checkpoint_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if path.file_name().is_some_and(|n| n == CHECKPOINT) {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let checkpoints: Vec<PathBuf> = s
        .list("checkpoint", a.checkpoint)
        .into_iter()
        .map(PathBuf::from)
        .collect();
    let data_dir = path_setting(&mut s, "data-dir", &a.data_dir)?;
    let scorer_path = optional_path(&mut s, "scorer", &a.scorer)?;
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let decode = decode_config(&mut s, &a.decode, seed)?;
    if checkpoints.is_empty() {
        return Err(usage("missing required option --checkpoint"));
    }
    let exact = probe_task(&data_dir)?;
    if exact.is_none() && scorer_path.is_none() {
        return Err(usage(
            "missing required option --scorer (needed for fluency on grammar data)",
        ));
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("data-dir", data_dir.as_path())];
    for c in &checkpoints {
        inputs.push(("checkpoint", c.as_path()));
    }
    if let Some(p) = &scorer_path {
        inputs.push(("scorer", p.as_path()));
    }
    let manifest = RunManifest::write("eval", &s, &inputs, &out_dir)?;

    let ds = Dataset::load(&data_dir)?;
    decode.validate(ds.vocab.len())?;
    let scorer = scorer_path
        .as_deref()
        .map(|p| load_scorer(p, &ds))
        .transpose()?;
    let mut files = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for path in &checkpoints {
        let model = Loaded::open(path, &ds.vocab)?;
        let step: usize = load_checkpoint(path)?.parse("train.step").unwrap_or(0);
        let loss = model.loss(&ds.dev_examples, &ds.vocab)?;
        let metrics = match (&ds.task, &scorer, &model) {
            (dataset::Task::Exact(task), _, Loaded::Aux(m)) => Metrics {
                kl_to_oracle: Some(kl_to_oracle(m, task)?),
                ..Default::default()
            },
            (dataset::Task::Exact(_), _, _) => Metrics::default(),
            (dataset::Task::Grammar, Some(scorer), _) => eval_snapshot(
                &model.generator(&ds.vocab),
                &ds.dev,
                scorer,
                &decode,
                ds.vocab.eos(),
            )?,
            (dataset::Task::Grammar, None, _) => unreachable!("scorer checked above"),
        };
        if let (dataset::Task::Exact(task), Loaded::Aux(m)) = (&ds.task, &model) {
            println!(
                "{}: posterior_variance {:.6}",
                path.display(),
                posterior_variance(m, task, 1e-3)?
            );
        }
        let report = TrainReport {
            rows: vec![ReportRow {
                step,
                loss,
                metrics,
            }],
            ..Default::default()
        };
        let mut label = checkpoint_label(path);
        while labels.contains(&label) {
            label.push('_');
        }
        let csv = out_dir.join(format!("{label}.csv"));
        report.write_csv(&csv)?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{label}: step {step} loss {loss:.4} slor {} keyword_accuracy {} kl_to_oracle {}",
            fmt(metrics.slor),
            fmt(metrics.keyword_accuracy),
            fmt(metrics.kl_to_oracle)
        );
        labels.push(label);
        files.push(csv);
    }
    manifest.finish(&files)
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let csvs: Vec<PathBuf> = s
        .list("csv", a.csv)
        .into_iter()
        .map(PathBuf::from)
        .collect();
    let labels = s.list("label", a.label);
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    if csvs.is_empty() {
        return Err(usage("at least one --csv is required"));
    }
    if !labels.is_empty() && labels.len() != csvs.len() {
        return Err(usage("give one --label per --csv or none"));
    }
    let inputs: Vec<(&str, &Path)> = csvs.iter().map(|c| ("csv", c.as_path())).collect();
    let manifest = RunManifest::write("plot", &s, &inputs, &out_dir)?;
    let mut series = Vec::new();
    for (i, path) in csvs.iter().enumerate() {
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let text = dataset::read(path)?;
        series.push(
            parse_metrics_csv(&label, &text).with_context(|| format!("in {}", path.display()))?,
        );
    }
    let mut files = Vec::new();
    for metric in METRICS {
        if let Some(svg) = line_chart(metric, &series) {
            files.push(dataset::write(
                &out_dir.join(format!("{metric}.svg")),
                &svg,
            )?);
        }
    }
    println!("wrote {} chart(s) to {}", files.len(), out_dir.display());
    manifest.finish(&files)
}

fn write_charts(out_dir: &Path, csvs: &[(&str, &TrainReport)]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut series = Vec::new();
    for (label, report) in csvs {
        let path = out_dir.join(format!("{label}.csv"));
        report.write_csv(&path)?;
        series.push(parse_metrics_csv(label, &report.to_csv())?);
        files.push(path);
    }
    for metric in METRICS {
        if let Some(svg) = line_chart(metric, &series) {
            files.push(dataset::write(
                &out_dir.join(format!("{metric}.svg")),
                &svg,
            )?);
        }
    }
    Ok(files)
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let task = s.required::<String>("task", a.task)?;
    let out_dir = path_setting(&mut s, "out-dir", &a.out_dir)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let quick = s.switch("quick", a.quick)?;
    let manifest = RunManifest::write("experiment", &s, &[], &out_dir)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    match task.as_str() {
        "grammar" => {
            let mut cfg = if quick {
                GrammarConfig::quick()
            } else {
                GrammarConfig::default()
            };
            cfg.grammar_seed = seed;
            let out = run_grammar(&cfg)?;
            let mut files = write_charts(
                &out_dir,
                &[("aux", &out.aux_report), ("baseline", &out.baseline_report)],
            )?;
            let last = |r: &TrainReport| r.rows.last().map(|r| r.metrics).unwrap_or_default();
            let (aux, baseline) = (last(&out.aux_report), last(&out.baseline_report));
            let summary = format!(
                "base slor {} keyword_accuracy {}\naux slor {} keyword_accuracy {}\nbaseline slor {} keyword_accuracy {}\nbase_hash {}\naux_base_hash {}\n",
                fmt(out.base_metrics.slor),
                fmt(out.base_metrics.keyword_accuracy),
                fmt(aux.slor),
                fmt(aux.keyword_accuracy),
                fmt(baseline.slor),
                fmt(baseline.keyword_accuracy),
                out.base.param_hash(),
                out.aux.base_hash(),
            );
            print!("{summary}");
            files.push(dataset::write(&out_dir.join("summary.txt"), &summary)?);
            manifest.finish(&files)
        }
        "exact" => {
            let mut cfg = if quick {
                ExactConfig::quick()
            } else {
                ExactConfig::default()
            };
            cfg.task_seed = seed;
            let out = run_exact(&cfg)?;
            let mut files = write_charts(&out_dir, &[("aux", &out.aux_report)])?;
            let summary = format!(
                "kl_to_oracle {:.6}\nposterior_variance {:.6}\n",
                out.kl_to_oracle, out.posterior_variance
            );
            print!("{summary}");
            files.push(dataset::write(&out_dir.join("summary.txt"), &summary)?);
            manifest.finish(&files)
        }
        other => Err(usage(format!(
            "unknown task {other:?}; expected grammar or exact"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!(parse_variant("direct", None).unwrap(), VariantKind::Direct);
        assert_eq!(
            parse_variant("feature", Some(2)).unwrap(),
            VariantKind::FeatureExtraction { layers: 2 }
        );
        assert!(parse_variant("feature", None).is_err());
        assert!(parse_variant("direct", Some(1)).is_err());
        assert!(parse_variant("other", None).is_err());
    }

    #[test]
    fn labels_from_paths() {
        assert_eq!(
            checkpoint_label(Path::new("runs/aux/checkpoint.bin")),
            "aux"
        );
        assert_eq!(checkpoint_label(Path::new("m/base.bin")), "base");
    }
}
