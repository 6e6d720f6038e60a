//! Pre-norm GPT-style causal language model with tied embeddings.

use crate::autodiff::{Gradients, Scalar, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{normal, param_group};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl TransformerConfig {
    /// Config with `ffn_dim = 4 · hidden_dim`.
    pub fn new(
        vocab_size: usize,
        hidden_dim: usize,
        num_layers: usize,
        num_heads: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> Self {
        Self {
            vocab_size,
            hidden_dim,
            num_layers,
            num_heads,
            ffn_dim: 4 * hidden_dim,
            max_seq_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return bad("vocab_size, hidden_dim and ffn_dim must be positive".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Parameters in one transformer block.
    pub fn block_param_count(hidden: usize, ffn: usize) -> usize {
        let (d, f) = (hidden, ffn);
        4 * d * d + 2 * d * f + 9 * d + f
    }

    /// Closed-form parameter count; there is no separate output head.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.num_layers * Self::block_param_count(d, self.ffn_dim)
            + 2 * d
    }

    pub(crate) fn write_meta(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let fields = [
            ("vocab_size", self.vocab_size as u64),
            ("hidden_dim", self.hidden_dim as u64),
            ("num_layers", self.num_layers as u64),
            ("num_heads", self.num_heads as u64),
            ("ffn_dim", self.ffn_dim as u64),
            ("max_seq_len", self.max_seq_len as u64),
            ("seed", self.seed),
        ];
        for (k, v) in fields {
            ckpt.set(&format!("{prefix}{k}"), v);
        }
    }

    pub(crate) fn read_meta(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |k: &str| ckpt.parse::<usize>(&format!("{prefix}{k}"));
        let cfg = Self {
            vocab_size: get("vocab_size")?,
            hidden_dim: get("hidden_dim")?,
            num_layers: get("num_layers")?,
            num_heads: get("num_heads")?,
            ffn_dim: get("ffn_dim")?,
            max_seq_len: get("max_seq_len")?,
            seed: ckpt.parse::<u64>(&format!("{prefix}seed"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

param_group! {
    /// One pre-norm block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
    Block / BlockVars {
        ln1_gain, ln1_bias, qkv_w, qkv_b, attn_out_w, attn_out_b,
        ln2_gain, ln2_bias, ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b,
    }
}

impl<F: Scalar> Block<F> {
    fn init(d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1_gain: Tensor::full(&[d], F::one()),
            ln1_bias: Tensor::zeros(&[d]),
            qkv_w: normal(&[d, 3 * d], rng),
            qkv_b: Tensor::zeros(&[3 * d]),
            attn_out_w: normal(&[d, d], rng),
            attn_out_b: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], F::one()),
            ln2_bias: Tensor::zeros(&[d]),
            ffn_in_w: normal(&[d, f], rng),
            ffn_in_b: Tensor::zeros(&[f]),
            ffn_out_w: normal(&[f, d], rng),
            ffn_out_b: Tensor::zeros(&[d]),
        }
    }
}

impl BlockVars {
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let eps = F::cst(LN_EPS);
        let h = tape.layer_norm(x, self.ln1_gain, self.ln1_bias, eps)?;
        let qkv = tape.matmul(h, self.qkv_w)?;
        let qkv = tape.add_bias(qkv, self.qkv_b)?;
        let a = tape.attention(qkv, batch, seq, heads, causal)?;
        let a = tape.matmul(a, self.attn_out_w)?;
        let a = tape.add_bias(a, self.attn_out_b)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, self.ln2_gain, self.ln2_bias, eps)?;
        let h = tape.matmul(h, self.ffn_in_w)?;
        let h = tape.add_bias(h, self.ffn_in_b)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, self.ffn_out_w)?;
        let h = tape.add_bias(h, self.ffn_out_b)?;
        tape.add(x, h)
    }
}

/// Transformer blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<F> {
    pub heads: usize,
    pub blocks: Vec<Block<F>>,
    pub final_gain: Tensor<F>,
    pub final_bias: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct StackVars {
    pub heads: usize,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
}

impl<F: Scalar> Stack<F> {
    pub fn init(
        hidden: usize,
        ffn: usize,
        layers: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            heads,
            blocks: (0..layers).map(|_| Block::init(hidden, ffn, rng)).collect(),
            final_gain: Tensor::full(&[hidden], F::one()),
            final_bias: Tensor::zeros(&[hidden]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> StackVars {
        StackVars {
            heads: self.heads,
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            final_gain: tape.leaf(&self.final_gain),
            final_bias: tape.leaf(&self.final_bias),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &self.final_gain));
        out.push(("final_norm.bias".into(), &self.final_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &mut self.final_gain));
        out.push(("final_norm.bias".into(), &mut self.final_bias));
        out
    }

    pub fn cast<G: Scalar>(&self) -> Stack<G> {
        Stack {
            heads: self.heads,
            blocks: self.blocks.iter().map(Block::cast).collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
        }
    }
}

impl StackVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(BlockVars::vars).collect();
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }

    pub fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out: Vec<&mut Var> = self
            .blocks
            .iter_mut()
            .flat_map(BlockVars::vars_mut)
            .collect();
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    /// Runs blocks `range` over `x: [batch·seq × d]`.
    pub fn run_blocks<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        mut x: Var,
        range: std::ops::Range<usize>,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Result<Var> {
        for block in &self.blocks[range] {
            x = block.forward(tape, x, batch, seq, self.heads, causal)?;
        }
        Ok(x)
    }

    pub fn final_norm<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.final_gain, self.final_bias, F::cst(LN_EPS))
    }
}

/// Rectangular batch of token sequences, padded at the end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn single(tokens: &[usize]) -> Self {
        Self {
            batch: 1,
            seq: tokens.len(),
            ids: tokens.to_vec(),
        }
    }

    /// Pads every row with `pad` to the longest row.
    pub fn padded(rows: &[Vec<usize>], pad: usize) -> Result<Self> {
        let seq = rows
            .iter()
            .map(Vec::len)
            .max()
            .ok_or(Error::Empty("batch"))?;
        if seq == 0 {
            return Err(Error::Empty("sequence"));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(pad).take(seq - r.len()));
        }
        Ok(Self {
            batch: rows.len(),
            seq,
            ids,
        })
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.seq).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalLM<F> {
    pub config: TransformerConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub stack: Stack<F>,
    frozen: bool,
}

#[derive(Clone, Debug)]
pub struct CausalLMVars {
    pub config: TransformerConfig,
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub stack: StackVars,
}

impl<F: Scalar> CausalLM<F> {
    /// Normal(0, 0.02) weights, unit-gain / zero-bias norms, trainable.
    pub fn init(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let token_embedding = normal(&[config.vocab_size, d], &mut rng);
        let position_embedding = normal(&[config.max_seq_len, d], &mut rng);
        let stack = Stack::init(
            d,
            config.ffn_dim,
            config.num_layers,
            config.num_heads,
            &mut rng,
        );
        let mut model = Self {
            config,
            token_embedding,
            position_embedding,
            stack,
            frozen: false,
        };
        model.set_frozen(false);
        Ok(model)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for (_, t) in self.tensors_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn frozen(mut self) -> Self {
        self.set_frozen(true);
        self
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        out.extend(self.stack.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            (
                "position_embedding".to_string(),
                &mut self.position_embedding,
            ),
        ];
        out.extend(self.stack.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> CausalLMVars {
        CausalLMVars {
            config: self.config,
            token_embedding: tape.leaf(&self.token_embedding),
            position_embedding: tape.leaf(&self.position_embedding),
            stack: self.stack.bind(tape),
        }
    }

    /// Adds the gradients recorded for `vars` into the parameter grad buffers.
    pub fn accumulate_grads(&mut self, vars: &CausalLMVars, grads: &Gradients<F>) -> Result<()> {
        for ((_, t), v) in self.tensors_mut().into_iter().zip(vars.vars()) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> CausalLM<G> {
        CausalLM {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            stack: self.stack.cast(),
            frozen: self.frozen,
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        check_tokens(&self.config, tokens)
    }

    /// Final-normed hidden states `[len × d]` of one sequence.
    pub fn forward_hidden(&self, tokens: &[usize], causal: bool) -> Result<Tensor<F>> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = vars.hidden(&mut tape, &TokenBatch::single(tokens), causal)?;
        Ok(tape.to_tensor(h))
    }

    /// Activations after the first `layers` blocks, before the final norm.
    pub fn forward_prefix_layers(&self, tokens: &[usize], layers: usize) -> Result<Tensor<F>> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = vars.prefix_layers(&mut tape, &TokenBatch::single(tokens), layers, true)?;
        Ok(tape.to_tensor(h))
    }

    /// `hidden · Eᵀ`.
    pub fn logits(&self, hidden: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let h = tape.leaf(hidden);
        let e = tape.leaf(&self.token_embedding);
        let l = tape.matmul_bt(h, e)?;
        Ok(tape.to_tensor(l))
    }

    /// `Σ_{t≥1} log P(x_t | x_{<t})`; the first token is context only.
    pub fn sequence_logprob(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Empty("sequence of at least two tokens"));
        }
        let h = self.forward_hidden(tokens, true)?;
        let logits = self.logits(&h)?;
        let v = self.config.vocab_size;
        let mut total = 0.0;
        for t in 1..tokens.len() {
            total += log_softmax_at(logits.row(t - 1), tokens[t]);
        }
        debug_assert!(v > 0);
        Ok(total)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn param_hash(&self) -> String {
        hash_tensors(self.tensors().into_iter())
    }
}

pub(crate) fn hash_tensors<'a, F: Scalar>(
    tensors: impl Iterator<Item = (String, &'a Tensor<F>)>,
) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.values() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `log softmax(row)[target]` in double precision.
pub fn log_softmax_at<F: Scalar>(row: &[F], target: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    row[target].as_f64() - max - z.ln()
}

pub(crate) fn check_tokens(config: &TransformerConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

impl CausalLMVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        out.extend(self.stack.vars());
        out
    }

    pub fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        out.extend(self.stack.vars_mut());
        out
    }

    /// Token plus learned absolute position embeddings, `[batch·seq × d]`.
    pub fn embed<F: Scalar>(&self, tape: &mut Tape<F>, batch: &TokenBatch) -> Result<Var> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_seq_len,
            });
        }
        let tok = tape.embedding(self.token_embedding, &batch.ids)?;
        let pos = tape.embedding(self.position_embedding, &batch.positions())?;
        tape.add(tok, pos)
    }

    pub fn prefix_layers<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        batch: &TokenBatch,
        layers: usize,
        causal: bool,
    ) -> Result<Var> {
        let max = self.config.num_layers;
        if layers == 0 || layers > max {
            return Err(Error::LayerOutOfRange { layers, max });
        }
        let x = self.embed(tape, batch)?;
        self.stack
            .run_blocks(tape, x, 0..layers, batch.batch, batch.seq, causal)
    }

    /// Final-normed hidden states. When `capture` is `Some(L)` the
    /// pre-norm activations after block `L` are returned as well.
    pub fn hidden_with_capture<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        batch: &TokenBatch,
        causal: bool,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let n = self.config.num_layers;
        let (b, s) = (batch.batch, batch.seq);
        let x = self.embed(tape, batch)?;
        let (x, captured) = match capture {
            Some(l) => {
                if l == 0 || l > n {
                    return Err(Error::LayerOutOfRange { layers: l, max: n });
                }
                let mid = self.stack.run_blocks(tape, x, 0..l, b, s, causal)?;
                (
                    self.stack.run_blocks(tape, mid, l..n, b, s, causal)?,
                    Some(mid),
                )
            }
            None => (self.stack.run_blocks(tape, x, 0..n, b, s, causal)?, None),
        };
        Ok((self.stack.final_norm(tape, x)?, captured))
    }

    pub fn hidden<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        batch: &TokenBatch,
        causal: bool,
    ) -> Result<Var> {
        Ok(self.hidden_with_capture(tape, batch, causal, None)?.0)
    }

    /// Tied output head: `h · Eᵀ`.
    pub fn head<F: Scalar>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        tape.matmul_bt(h, self.token_embedding)
    }
}

impl CausalLM<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set("kind", "causal_lm");
        self.config.write_meta(&mut ckpt, "");
        ckpt.set("frozen", self.frozen);
        for (name, t) in self.tensors() {
            ckpt.push_tensor(&name, t.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_checkpoint_prefixed(ckpt, "")
    }

    pub(crate) fn from_checkpoint_prefixed(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let config = TransformerConfig::read_meta(ckpt, prefix)?;
        let frozen: bool = ckpt.parse(&format!("{prefix}frozen"))?;
        // Shapes come from a fresh init; values from the file.
        let mut model = Self::init(config)?;
        for (name, t) in model.tensors_mut() {
            let stored = ckpt.tensor(&format!("{prefix}{name}"))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.values_mut().copy_from_slice(stored.values());
        }
        model.set_frozen(frozen);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;

    fn tiny(seed: u64) -> TransformerConfig {
        TransformerConfig::new(11, 8, 2, 2, 6, seed)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = CausalLM::<f32>::init(tiny(3)).unwrap();
        let b = CausalLM::<f32>::init(tiny(3)).unwrap();
        let c = CausalLM::<f32>::init(tiny(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.token_embedding, c.token_embedding);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(0);
        c.num_heads = 3;
        assert!(CausalLM::<f32>::init(c).is_err());
        let mut c = tiny(0);
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn head_dim_and_param_count() {
        let c = TransformerConfig::new(50, 32, 3, 4, 16, 0);
        assert_eq!(c.head_dim(), 8);
        let m = CausalLM::<f32>::init(c).unwrap();
        assert_eq!(m.param_count(), c.param_count());
        // no parameter shaped like a separate output head
        assert!(
            m.tensors()
                .iter()
                .filter(|(_, t)| t.shape() == [50, 32])
                .count()
                == 1
        );
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = CausalLM::<f32>::init(tiny(1)).unwrap();
        assert_eq!(m.forward_hidden(&[3], true).unwrap().shape(), &[1, 8]);
        assert!(matches!(
            m.forward_hidden(&[1; 7], true),
            Err(Error::SequenceTooLong { len: 7, max: 6 })
        ));
        assert!(matches!(
            m.forward_hidden(&[1, 11], true),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
        assert!(matches!(
            m.forward_prefix_layers(&[1, 2], 3),
            Err(Error::LayerOutOfRange { .. })
        ));
        assert!(m.forward_prefix_layers(&[1, 2], 0).is_err());
    }

    #[test]
    fn causality_is_bit_exact() {
        let m = CausalLM::<f32>::init(tiny(5)).unwrap();
        let base = [1, 4, 2, 7, 3, 9];
        let h0 = m.logits(&m.forward_hidden(&base, true).unwrap()).unwrap();
        for j in 0..base.len() {
            let mut edited = base;
            edited[j] = (edited[j] + 5) % 11;
            let h1 = m.logits(&m.forward_hidden(&edited, true).unwrap()).unwrap();
            for i in 0..j {
                assert_eq!(
                    h0.row(i),
                    h1.row(i),
                    "position {i} changed after editing {j}"
                );
            }
            assert_ne!(h0.row(j), h1.row(j));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = CausalLM::<f32>::init(tiny(5)).unwrap();
        let a = m.forward_hidden(&[1, 2, 3], true).unwrap();
        let b = m.forward_hidden(&[1, 2, 3], true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_layers_match_full_pass_internals() {
        let m = CausalLM::<f64>::init(tiny(2)).unwrap();
        let toks = [4, 1, 8, 2];
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let (full, cap) = vars
            .hidden_with_capture(&mut tape, &TokenBatch::single(&toks), true, Some(2))
            .unwrap();
        let prefix = m.forward_prefix_layers(&toks, 2).unwrap();
        assert_eq!(tape.value(cap.unwrap()), prefix.values());
        // L = num_layers + final norm reproduces forward_hidden
        let g = vars.stack.final_norm(&mut tape, cap.unwrap()).unwrap();
        assert_eq!(tape.value(g), tape.value(full));
        assert_eq!(
            tape.value(full),
            m.forward_hidden(&toks, true).unwrap().values()
        );
        // a shared prefix yields the same layer-L rows as the shorter sequence
        let short = m.forward_prefix_layers(&toks[..2], 1).unwrap();
        let long = m.forward_prefix_layers(&toks, 1).unwrap();
        assert_eq!(short.values(), &long.values()[..2 * 8]);
    }

    #[test]
    fn logits_of_embedding_row() {
        let m = CausalLM::<f64>::init(TransformerConfig::new(40, 64, 1, 4, 4, 9)).unwrap();
        let k = 17;
        let row = Tensor::new(&[1, 64], m.token_embedding.row(k).to_vec()).unwrap();
        let logits = m.logits(&row).unwrap();
        let norm2: f64 = m.token_embedding.row(k).iter().map(|v| v * v).sum();
        assert!((logits.values()[k] - norm2).abs() < 1e-12);
        let argmax = (0..40)
            .max_by(|&a, &b| logits.values()[a].total_cmp(&logits.values()[b]))
            .unwrap();
        assert_eq!(argmax, k);
        let zero = m.logits(&Tensor::zeros(&[3, 64])).unwrap();
        assert_eq!(zero.shape(), &[3, 40]);
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_probabilities_normalize() {
        let mut c = TransformerConfig::new(5, 8, 1, 2, 4, 13);
        c.ffn_dim = 16;
        let mut m = CausalLM::<f64>::init(c).unwrap();
        // sharpen the distribution a little so the check is not trivially uniform
        m.token_embedding
            .values_mut()
            .iter_mut()
            .for_each(|v| *v *= 40.0);
        let mut total = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                let lp = m.sequence_logprob(&[0, a, b]).unwrap();
                assert!(lp <= 0.0);
                total += lp.exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
        assert!(m.sequence_logprob(&[1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = CausalLM::<f32>::init(tiny(8)).unwrap().frozen();
        let bytes = m.to_checkpoint().to_bytes();
        let back = CausalLM::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(back.is_frozen());
        assert_eq!(m.param_hash(), back.param_hash());
        let toks = [1, 2, 3];
        assert_eq!(
            m.logits(&m.forward_hidden(&toks, true).unwrap()).unwrap(),
            back.logits(&back.forward_hidden(&toks, true).unwrap())
                .unwrap()
        );
    }

    #[test]
    fn frozen_model_has_no_trainable_tensors() {
        let m = CausalLM::<f32>::init(tiny(8)).unwrap().frozen();
        assert!(m.tensors().iter().all(|(_, t)| !t.requires_grad()));
    }

    /// Full tiny-model loss against central differences for every parameter.
    #[test]
    fn full_model_gradient_check() {
        let model = CausalLM::<f64>::init(tiny(21)).unwrap();
        // larger weights make the check exercise non-linear regimes
        let mut model = model;
        for (_, t) in model.tensors_mut() {
            if t.shape().len() == 2 {
                t.values_mut().iter_mut().for_each(|v| *v *= 20.0);
            }
        }
        let batch = TokenBatch::padded(&[vec![1, 5, 2, 9, 3], vec![4, 4, 10]], 0).unwrap();
        let targets = [5usize, 2, 9, 3, 4, 10];
        let rows = [0usize, 1, 2, 3, 5, 6];
        let loss = |tape: &mut Tape<f64>, vars: &CausalLMVars| -> Result<Var> {
            let h = vars.hidden(tape, &batch, true)?;
            let h = tape.gather_rows(h, &rows)?;
            let l = vars.head(tape, h)?;
            tape.cross_entropy(l, &targets)
        };
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = loss(&mut tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        let n = model.tensors().len();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let x = model.tensors()[k].1.clone().with_requires_grad(false);
            let analytic = grads.get(vars.vars()[k]).unwrap().to_vec();
            let f = |tape: &mut Tape<f64>, xv: Var| {
                let mut v = model.bind(tape);
                *v.vars_mut()[k] = xv;
                loss(tape, &v)
            };
            let numeric = central_difference(&f, &x, 1e-4).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }
}
