//! Exactly enumerable conditional task used as a brute-force oracle.
//!
//! Each attribute owns a first-order Markov chain over `v` symbols. Given a
//! prefix, the attribute-conditional next-symbol distribution is read off
//! the tables; the marginal is obtained by weighting the conditionals with
//! `P(a | prefix)`, itself computed by enumerating the prefix likelihood
//! under every attribute.

use super::grammar::stream_rng;
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactTask {
    pub vocab_size: usize,
    pub num_attributes: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub prior: Vec<f64>,
    /// `initial[a][x]`
    pub initial: Vec<Vec<f64>>,
    /// `transition[a][from][to]`
    pub transition: Vec<Vec<Vec<f64>>>,
}

fn normalized(row: Vec<f64>) -> Vec<f64> {
    let z: f64 = row.iter().sum();
    row.into_iter().map(|p| p / z).collect()
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One sampled sequence with the attribute that generated it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSequence {
    pub attribute: usize,
    pub symbols: Vec<usize>,
}

impl ExactTask {
    /// Seeded random tables. Entries are drawn from `0.25 + U(0, 1)` before
    /// normalization, so every transition keeps non-trivial mass.
    pub fn generate(
        vocab_size: usize,
        num_attributes: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 2 || num_attributes == 0 || seq_len < 2 {
            return Err(Error::InvalidConfig(
                "exact task needs v >= 2, at least one attribute and n >= 2".into(),
            ));
        }
        let mut rng = stream_rng(seed, 11);
        let mut row = |len: usize| normalized((0..len).map(|_| 0.25 + rng.gen::<f64>()).collect());
        let prior = vec![1.0 / num_attributes as f64; num_attributes];
        let initial = (0..num_attributes).map(|_| row(vocab_size)).collect();
        let transition = (0..num_attributes)
            .map(|_| (0..vocab_size).map(|_| row(vocab_size)).collect())
            .collect();
        let task = Self {
            vocab_size,
            num_attributes,
            seq_len,
            seed,
            prior,
            initial,
            transition,
        };
        task.validate()?;
        Ok(task)
    }

    /// The default oracle task: `v = 8`, two attributes, length five.
    pub fn default_task(seed: u64) -> Self {
        Self::generate(8, 2, 5, seed).expect("default dimensions are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let check = |row: &[f64], what: &str| -> Result<()> {
            let z: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (z - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "{what} is not a probability vector"
                )));
            }
            Ok(())
        };
        if self.prior.len() != self.num_attributes
            || self.initial.len() != self.num_attributes
            || self.transition.len() != self.num_attributes
        {
            return Err(Error::InvalidConfig(
                "table count differs from attribute count".into(),
            ));
        }
        check(&self.prior, "prior")?;
        for a in 0..self.num_attributes {
            if self.initial[a].len() != self.vocab_size
                || self.transition[a].len() != self.vocab_size
            {
                return Err(Error::InvalidConfig(
                    "table width differs from vocabulary".into(),
                ));
            }
            check(&self.initial[a], "initial row")?;
            for row in &self.transition[a] {
                if row.len() != self.vocab_size {
                    return Err(Error::InvalidConfig(
                        "table width differs from vocabulary".into(),
                    ));
                }
                check(row, "transition row")?;
            }
        }
        Ok(())
    }

    fn check_context(&self, attribute: Option<usize>, prefix: &[usize]) -> Result<()> {
        if let Some(a) = attribute {
            if a >= self.num_attributes {
                return Err(Error::InvalidConfig(format!(
                    "attribute {a} out of range for {} attributes",
                    self.num_attributes
                )));
            }
        }
        if prefix.len() >= self.seq_len {
            return Err(Error::SequenceTooLong {
                len: prefix.len(),
                max: self.seq_len - 1,
            });
        }
        if let Some(&x) = prefix.iter().find(|&&x| x >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: x,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// `P(prefix | a)`.
    pub fn prefix_likelihood(&self, attribute: usize, prefix: &[usize]) -> f64 {
        let Some((&first, rest)) = prefix.split_first() else {
            return 1.0;
        };
        let mut p = self.initial[attribute][first];
        let mut prev = first;
        for &x in rest {
            p *= self.transition[attribute][prev][x];
            prev = x;
        }
        p
    }

    /// `P(a | prefix)` by enumeration over attributes.
    pub fn attribute_posterior(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_context(None, prefix)?;
        let joint: Vec<f64> = (0..self.num_attributes)
            .map(|a| self.prior[a] * self.prefix_likelihood(a, prefix))
            .collect();
        Ok(normalized(joint))
    }

    /// `P(x_t | x_{<t}; a)`.
    pub fn exact_conditional(&self, attribute: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_context(Some(attribute), prefix)?;
        Ok(match prefix.last() {
            None => self.initial[attribute].clone(),
            Some(&prev) => self.transition[attribute][prev].clone(),
        })
    }

    /// `P(x_t | x_{<t}) = Σ_a P(a | x_{<t}) P(x_t | x_{<t}; a)`.
    pub fn exact_marginal(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let post = self.attribute_posterior(prefix)?;
        let mut out = vec![0.0; self.vocab_size];
        for (a, &w) in post.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.exact_conditional(a, prefix)?) {
                *o += w * p;
            }
        }
        Ok(out)
    }

    /// `P(a | x_t; x_{<t})`.
    pub fn exact_posterior(&self, attribute: usize, prefix: &[usize], next: usize) -> Result<f64> {
        self.check_context(Some(attribute), prefix)?;
        if next >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: next,
                vocab: self.vocab_size,
            });
        }
        let mut extended = prefix.to_vec();
        extended.push(next);
        let joint: Vec<f64> = (0..self.num_attributes)
            .map(|a| self.prior[a] * self.prefix_likelihood(a, &extended))
            .collect();
        let z: f64 = joint.iter().sum();
        Ok(joint[attribute] / z)
    }

    /// Every prefix of length `0..seq_len`, shortest first.
    pub fn contexts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 1..self.seq_len {
            let mut next = Vec::with_capacity(frontier.len() * self.vocab_size);
            for p in &frontier {
                for x in 0..self.vocab_size {
                    let mut q: Vec<usize> = p.clone();
                    q.push(x);
                    next.push(q);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Exact entropy rate per symbol of the attribute-conditional process,
    /// averaged over the prior: `E[-log P(x_t | x_{<t}; a)]`.
    pub fn conditional_entropy(&self) -> f64 {
        let mut total = 0.0;
        for a in 0..self.num_attributes {
            for ctx in self.contexts() {
                let w = self.prior[a] * self.prefix_likelihood(a, &ctx);
                let p = self.exact_conditional(a, &ctx).unwrap();
                total -= w * p
                    .iter()
                    .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
                    .sum::<f64>();
            }
        }
        total / self.seq_len as f64
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> TaskSequence {
        let a = sample_index(&self.prior, rng);
        self.sample_with(a, rng)
    }

    pub fn sample_with<R: Rng>(&self, attribute: usize, rng: &mut R) -> TaskSequence {
        let mut symbols = Vec::with_capacity(self.seq_len);
        let mut x = sample_index(&self.initial[attribute], rng);
        symbols.push(x);
        for _ in 1..self.seq_len {
            x = sample_index(&self.transition[attribute][x], rng);
            symbols.push(x);
        }
        TaskSequence { attribute, symbols }
    }

    /// Ancestral samples, deterministic per `seed`.
    pub fn sample_task_corpus(&self, count: usize, seed: u64) -> Vec<TaskSequence> {
        let mut rng = stream_rng(seed, 12);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    pub fn symbol_name(x: usize) -> String {
        format!("s{x}")
    }

    pub fn attribute_name(a: usize) -> String {
        format!("a{a}")
    }

    /// Plain-text manifest: dimensions, then every table as decimal literals
    /// that parse back to the same doubles.
    pub fn to_manifest(&self) -> String {
        let join = |row: &[f64]| row.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        let mut s = format!(
            "exact_task v={} attributes={} length={} seed={}\n",
            self.vocab_size, self.num_attributes, self.seq_len, self.seed
        );
        s.push_str(&format!("prior {}\n", join(&self.prior)));
        for a in 0..self.num_attributes {
            s.push_str(&format!("initial {a} {}\n", join(&self.initial[a])));
        }
        for a in 0..self.num_attributes {
            for (from, row) in self.transition[a].iter().enumerate() {
                s.push_str(&format!("transition {a} {from} {}\n", join(row)));
            }
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| perr(1, "empty manifest"))?;
        let mut dims = std::collections::HashMap::new();
        let mut parts = head.split_whitespace();
        if parts.next() != Some("exact_task") {
            return Err(perr(1, "expected exact_task header"));
        }
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| perr(1, "expected key=value"))?;
            let v: u64 = v.parse().map_err(|_| perr(1, "bad integer"))?;
            dims.insert(k.to_string(), v);
        }
        let dim = |k: &str| {
            dims.get(k)
                .copied()
                .ok_or_else(|| perr(1, &format!("missing {k}")))
        };
        let (v, na, n) = (
            dim("v")? as usize,
            dim("attributes")? as usize,
            dim("length")? as usize,
        );
        let mut task = Self {
            vocab_size: v,
            num_attributes: na,
            seq_len: n,
            seed: dim("seed")?,
            prior: vec![],
            initial: vec![vec![]; na],
            transition: vec![vec![vec![]; v]; na],
        };
        for (i, line) in lines {
            let ln = i + 1;
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            let floats = |xs: &[&str]| -> Result<Vec<f64>> {
                xs.iter()
                    .map(|x| x.parse::<f64>().map_err(|_| perr(ln, "bad probability")))
                    .collect()
            };
            let index = |s: &str, bound: usize| -> Result<usize> {
                s.parse::<usize>()
                    .ok()
                    .filter(|&x| x < bound)
                    .ok_or_else(|| perr(ln, "bad table index"))
            };
            match kind {
                "prior" => task.prior = floats(&rest)?,
                "initial" if !rest.is_empty() => {
                    let a = index(rest[0], na)?;
                    task.initial[a] = floats(&rest[1..])?;
                }
                "transition" if rest.len() >= 2 => {
                    let a = index(rest[0], na)?;
                    let from = index(rest[1], v)?;
                    task.transition[a][from] = floats(&rest[2..])?;
                }
                "" => {}
                _ => return Err(perr(ln, &format!("unexpected line {line:?}"))),
            }
        }
        task.validate()?;
        Ok(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-attribute, two-symbol task from hand-written tables.
    fn hand_task() -> ExactTask {
        ExactTask {
            vocab_size: 2,
            num_attributes: 2,
            seq_len: 2,
            seed: 0,
            prior: vec![0.5, 0.5],
            initial: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            transition: vec![vec![vec![0.5, 0.5]; 2], vec![vec![0.5, 0.5]; 2]],
        }
    }

    #[test]
    fn hand_built_bayes_arithmetic() {
        let t = hand_task();
        t.validate().unwrap();
        let m = t.exact_marginal(&[]).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((t.exact_posterior(0, &[], 0).unwrap() - 0.9).abs() < 1e-15);
        assert!((t.exact_posterior(1, &[], 0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn identical_tables_make_attribute_irrelevant() {
        let mut t = ExactTask::default_task(3);
        t.initial[1] = t.initial[0].clone();
        t.transition[1] = t.transition[0].clone();
        for ctx in t.contexts().iter().take(80) {
            let c = t.exact_conditional(1, ctx).unwrap();
            let m = t.exact_marginal(ctx).unwrap();
            for (a, b) in c.iter().zip(&m) {
                assert!((a - b).abs() < 1e-15);
            }
            for x in 0..t.vocab_size {
                assert!((t.exact_posterior(0, ctx, x).unwrap() - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_attribute_marginal_equals_conditional() {
        let t = ExactTask::generate(4, 1, 3, 2).unwrap();
        for ctx in t.contexts() {
            assert_eq!(
                t.exact_marginal(&ctx).unwrap(),
                t.exact_conditional(0, &ctx).unwrap()
            );
        }
    }

    #[test]
    fn rows_are_distributions() {
        let t = ExactTask::default_task(7);
        for ctx in t.contexts() {
            let m = t.exact_marginal(&ctx).unwrap();
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for a in 0..2 {
                let c = t.exact_conditional(a, &ctx).unwrap();
                assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(t.contexts().len(), 1 + 8 + 64 + 512 + 4096);
    }

    #[test]
    fn errors() {
        let t = ExactTask::default_task(7);
        assert!(t.exact_conditional(2, &[]).is_err());
        assert!(t.exact_conditional(0, &[0; 5]).is_err());
        assert!(t.exact_marginal(&[9]).is_err());
        assert!(ExactTask::generate(1, 2, 5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let t = ExactTask::default_task(7);
        let back = ExactTask::from_manifest(&t.to_manifest()).unwrap();
        assert_eq!(t, back);
        assert!(ExactTask::from_manifest("exact_task v=2\nfoo").is_err());
    }

    #[test]
    fn deterministic_generation() {
        assert_eq!(ExactTask::default_task(7), ExactTask::default_task(7));
        assert_ne!(ExactTask::default_task(7), ExactTask::default_task(8));
        assert_eq!(
            ExactTask::default_task(7).sample_task_corpus(50, 1),
            ExactTask::default_task(7).sample_task_corpus(50, 1)
        );
    }
}
