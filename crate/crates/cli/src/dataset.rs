//! On-disk corpora written by `datagen` and read by the training commands.

use anyhow::{Context, Result};
use auxtune::datagen::{
    encode_example, exact_vocab, examples_from_tsv, examples_to_tsv, sentences_from_text,
    sentences_to_text, ExactTask, Example, TextExample, Vocab,
};
use auxtune::eval::DevExample;
use auxtune::experiment::{GrammarData, GrammarText};
use std::fs;
use std::path::{Path, PathBuf};

pub const VOCAB: &str = "vocab.txt";
pub const GRAMMAR: &str = "grammar.txt";
pub const TASK: &str = "task.txt";
pub const PRETRAIN: &str = "pretrain.txt";
pub const SCORER: &str = "scorer.txt";
pub const CONDITIONAL: &str = "conditional.tsv";
pub const DEV: &str = "dev.tsv";

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// Writes the grammar corpora; returns the files written.
pub fn write_grammar(dir: &Path, text: &GrammarText) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write(&dir.join(VOCAB), &text.spec.vocab()?.to_text())?,
        write(&dir.join(GRAMMAR), &text.spec.to_manifest())?,
        write(&dir.join(PRETRAIN), &sentences_to_text(&text.pretrain))?,
        write(&dir.join(SCORER), &sentences_to_text(&text.scorer))?,
        write(&dir.join(CONDITIONAL), &examples_to_tsv(&text.train))?,
        write(&dir.join(DEV), &examples_to_tsv(&text.dev))?,
    ])
}

/// Unconditional and attribute-tagged samples of the exact task, drawn
/// with seeds `seed + 1` and `seed + 2`.
pub fn write_exact(dir: &Path, task: &ExactTask, count: usize) -> Result<Vec<PathBuf>> {
    let names = |s: &[usize]| {
        s.iter()
            .map(|&x| ExactTask::symbol_name(x))
            .collect::<Vec<_>>()
    };
    let unconditional: Vec<Vec<String>> = task
        .sample_task_corpus(count, task.seed.wrapping_add(1))
        .iter()
        .map(|s| names(&s.symbols))
        .collect();
    let conditional: Vec<TextExample> = task
        .sample_task_corpus(count, task.seed.wrapping_add(2))
        .iter()
        .map(|s| TextExample {
            keyword: ExactTask::attribute_name(s.attribute),
            prefix: vec![],
            continuation: names(&s.symbols),
        })
        .collect();
    Ok(vec![
        write(&dir.join(VOCAB), &exact_vocab(task).to_text())?,
        write(&dir.join(TASK), &task.to_manifest())?,
        write(&dir.join(PRETRAIN), &sentences_to_text(&unconditional))?,
        write(&dir.join(CONDITIONAL), &examples_to_tsv(&conditional))?,
    ])
}

pub enum Task {
    Grammar,
    Exact(ExactTask),
}

/// Encoded corpora of one data directory.
pub struct Dataset {
    pub task: Task,
    pub vocab: Vocab,
    pub pretrain: Vec<Vec<usize>>,
    /// Held-out shard (grammar only).
    pub scorer: Vec<Vec<usize>>,
    pub train: Vec<Example>,
    /// Prompts for sampled metrics (grammar only).
    pub dev: Vec<DevExample>,
    /// Teacher-forced evaluation examples.
    pub dev_examples: Vec<Example>,
}

/// Exact-task sequences carry no end-of-sequence marker: `[bos] symbols`.
fn exact_sentence(vocab: &Vocab, words: &[String]) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode(words)?);
    Ok(ids)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::from_text(&read(&dir.join(VOCAB))?).context("parsing vocab.txt")?;
        let pretrain_text =
            sentences_from_text(&read(&dir.join(PRETRAIN))?).context("parsing pretrain.txt")?;
        let train_text =
            examples_from_tsv(&read(&dir.join(CONDITIONAL))?).context("parsing conditional.tsv")?;
        if dir.join(TASK).exists() {
            let task =
                ExactTask::from_manifest(&read(&dir.join(TASK))?).context("parsing task.txt")?;
            if exact_vocab(&task) != vocab {
                return Err(auxtune::Error::VocabMismatch(
                    "vocab.txt does not match task.txt".into(),
                )
                .into());
            }
            let pretrain = pretrain_text
                .iter()
                .map(|s| exact_sentence(&vocab, s))
                .collect::<Result<Vec<_>>>()?;
            let train = train_text
                .iter()
                .map(|e| {
                    Ok(Example {
                        prefix: vocab.encode(&e.prefix)?,
                        attribute: vec![vocab.keyword_id(&e.keyword)?],
                        continuation: vocab.encode(&e.continuation)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dev_examples = train.iter().take(1000).cloned().collect();
            return Ok(Self {
                task: Task::Exact(task),
                vocab,
                pretrain,
                scorer: Vec::new(),
                train,
                dev: Vec::new(),
                dev_examples,
            });
        }
        let scorer_text =
            sentences_from_text(&read(&dir.join(SCORER))?).context("parsing scorer.txt")?;
        let dev_text = examples_from_tsv(&read(&dir.join(DEV))?).context("parsing dev.tsv")?;
        let data =
            GrammarData::encode(&vocab, &pretrain_text, &scorer_text, &train_text, &dev_text)?;
        let dev_examples = dev_text
            .iter()
            .map(|e| encode_example(&vocab, e))
            .collect::<auxtune::Result<Vec<_>>>()?;
        Ok(Self {
            task: Task::Grammar,
            vocab,
            pretrain: data.pretrain,
            scorer: data.scorer,
            train: data.train,
            dev: data.dev,
            dev_examples,
        })
    }

    /// The corpus as the in-memory grammar pipeline sees it.
    pub fn grammar_data(&self) -> GrammarData {
        GrammarData {
            vocab: self.vocab.clone(),
            pretrain: self.pretrain.clone(),
            scorer: self.scorer.clone(),
            train: self.train.clone(),
            dev: self.dev.clone(),
        }
    }
}
