//! Deterministic synthetic corpora.
//!
//! * a templated keyword grammar for the pretraining corpus and the
//!   keyword-conditioned corpus,
//! * an exactly enumerable Markov task whose conditional, marginal and
//!   posterior distributions serve as a brute-force oracle.

pub mod exact;
pub mod grammar;
pub mod vocab;

pub use exact::{ExactTask, TaskSequence};
pub use grammar::{GrammarSentence, GrammarSpec};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use grammar::stream_rng;
use std::fmt::Write as _;

const PRETRAIN_STREAM: u64 = 1;
const CONDITIONAL_STREAM: u64 = 2;

/// One conditional-generation instance, in token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prefix: Vec<usize>,
    pub attribute: Vec<usize>,
    /// Tokens to predict, including a trailing end-of-sequence when the
    /// task has one.
    pub continuation: Vec<usize>,
}

/// A keyword-conditioned example in surface words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExample {
    pub keyword: String,
    pub prefix: Vec<String>,
    pub continuation: Vec<String>,
}

/// Unconditional sentences with the keyword marginalized out.
pub fn gen_pretrain_corpus(spec: &GrammarSpec, count: usize) -> Result<Vec<Vec<String>>> {
    if count == 0 {
        return Err(Error::InvalidConfig("count must be positive".into()));
    }
    let mut rng = stream_rng(spec.seed, PRETRAIN_STREAM);
    Ok((0..count)
        .map(|_| spec.sample_sentence(&mut rng).words())
        .collect())
}

/// Keyword-conditioned examples; every continuation contains its keyword
/// exactly once.
pub fn gen_conditional_corpus(spec: &GrammarSpec, count: usize) -> Result<Vec<TextExample>> {
    if count == 0 {
        return Err(Error::InvalidConfig("count must be positive".into()));
    }
    let mut rng = stream_rng(spec.seed, CONDITIONAL_STREAM);
    Ok((0..count)
        .map(|_| {
            let s = spec.sample_sentence(&mut rng);
            TextExample {
                keyword: spec.keywords[s.keyword].word.clone(),
                prefix: s.prefix,
                continuation: s.continuation,
            }
        })
        .collect())
}

/// `[bos] words [eos]`.
pub fn encode_sentence<S: AsRef<str>>(vocab: &Vocab, words: &[S]) -> Result<Vec<usize>> {
    let mut out = vec![vocab.bos()];
    out.extend(vocab.encode(words)?);
    out.push(vocab.eos());
    Ok(out)
}

pub fn encode_example(vocab: &Vocab, ex: &TextExample) -> Result<Example> {
    let mut continuation = vocab.encode(&ex.continuation)?;
    continuation.push(vocab.eos());
    Ok(Example {
        prefix: vocab.encode(&ex.prefix)?,
        attribute: vec![vocab.keyword_id(&ex.keyword)?],
        continuation,
    })
}

pub fn sentences_to_text(sentences: &[Vec<String>]) -> String {
    let mut s = String::new();
    for line in sentences {
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn sentences_from_text(text: &str) -> Result<Vec<Vec<String>>> {
    let out: Vec<Vec<String>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    if out.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(out)
}

/// `keyword<TAB>prefix text<TAB>continuation text` per line.
pub fn examples_to_tsv(examples: &[TextExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            ex.keyword,
            ex.prefix.join(" "),
            ex.continuation.join(" ")
        );
    }
    s
}

pub fn examples_from_tsv(text: &str) -> Result<Vec<TextExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [keyword, prefix, continuation] = fields[..] else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let ex = TextExample {
            keyword: keyword.trim().to_string(),
            prefix: split(prefix),
            continuation: split(continuation),
        };
        if ex.continuation.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty continuation".into(),
            });
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::Empty("conditional corpus"));
    }
    Ok(out)
}

/// Vocabulary for an [`ExactTask`]: symbols `s0..`, attributes `a0..`.
pub fn exact_vocab(task: &ExactTask) -> Vocab {
    let words: Vec<String> = (0..task.vocab_size).map(ExactTask::symbol_name).collect();
    let keywords: Vec<String> = (0..task.num_attributes)
        .map(ExactTask::attribute_name)
        .collect();
    Vocab::new(&words, &keywords).expect("generated names are unique")
}

/// Token id of each task symbol under [`exact_vocab`].
pub fn exact_symbol_ids(task: &ExactTask) -> Vec<usize> {
    let first = 4 + task.num_attributes;
    (first..first + task.vocab_size).collect()
}

/// `[bos] symbols` for unconditional training.
pub fn exact_sequences(task: &ExactTask, seqs: &[TaskSequence]) -> Vec<Vec<usize>> {
    let ids = exact_symbol_ids(task);
    seqs.iter()
        .map(|s| {
            std::iter::once(1)
                .chain(s.symbols.iter().map(|&x| ids[x]))
                .collect()
        })
        .collect()
}

/// Attribute-tagged examples with an empty prefix.
pub fn exact_examples(task: &ExactTask, seqs: &[TaskSequence]) -> Vec<Example> {
    let ids = exact_symbol_ids(task);
    seqs.iter()
        .map(|s| Example {
            prefix: vec![],
            attribute: vec![4 + s.attribute],
            continuation: s.symbols.iter().map(|&x| ids[x]).collect(),
        })
        .collect()
}

/// Largest violation of `P(x|ctx;a) = P(a|x;ctx) P(x|ctx) / P(a|ctx)` over
/// every enumerated context with mass above `1e-12`.
pub fn oracle_identity_max_error(task: &ExactTask) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for ctx in task.contexts() {
        let post_ctx = task.attribute_posterior(&ctx)?;
        let marginal = task.exact_marginal(&ctx)?;
        for a in 0..task.num_attributes {
            let cond = task.exact_conditional(a, &ctx)?;
            for x in 0..task.vocab_size {
                let mass = task.prior[a] * task.prefix_likelihood(a, &ctx) * cond[x];
                if mass <= 1e-12 {
                    continue;
                }
                let rhs = task.exact_posterior(a, &ctx, x)? * marginal[x] / post_ctx[a];
                worst = worst.max((cond[x] - rhs).abs());
            }
        }
    }
    Ok(worst)
}
