//! Frozen base LM plus a trainable auxiliary pathway, fused at the logits.
//!
//! `P(x_t | x_{<t}; α) = softmax(logits_LM(x_t | x_{<t}) + logits_AUX(x_t | x_{<t}; α))`
//!
//! The base term never sees the attribute. Two auxiliary variants exist:
//!
//! * [`VariantKind::Direct`]: the auxiliary stack embeds `[α ; x_{<t}]` with
//!   its own token and position tables and reads logits through its own
//!   tied head.
//! * [`VariantKind::FeatureExtraction`]: attribute and text are each encoded
//!   by the first `L` frozen base blocks (positions restarting at zero),
//!   projected into the auxiliary width, tagged with the trainable `z_att` /
//!   `z_txt` offsets, concatenated, run through the auxiliary stack, projected
//!   back and read through the base embedding table.

use crate::autodiff::{Gradients, Scalar, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{normal, param_group};
use crate::transformer::{
    check_tokens, hash_tensors, CausalLM, CausalLMVars, Stack, StackVars, TokenBatch,
    TransformerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

param_group! {
    /// Token and position tables of the direct variant.
    DirectParams / DirectVars { token_embedding, position_embedding }
}

param_group! {
    /// Affine bridges and segment offsets of the feature-extraction variant.
    FeatureParams / FeatureVars { proj_in_w, proj_in_b, proj_out_w, proj_out_b, z_att, z_txt }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    Direct,
    FeatureExtraction { layers: usize },
}

impl VariantKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::FeatureExtraction { .. } => "feature_extraction",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AuxVariant<F> {
    Direct(DirectParams<F>),
    FeatureExtraction {
        layers: usize,
        params: FeatureParams<F>,
    },
}

#[derive(Clone, Debug)]
pub enum VariantVars {
    Direct(DirectVars),
    FeatureExtraction { layers: usize, vars: FeatureVars },
}

impl<F: Scalar> AuxVariant<F> {
    pub fn kind(&self) -> VariantKind {
        match self {
            Self::Direct(_) => VariantKind::Direct,
            Self::FeatureExtraction { layers, .. } => {
                VariantKind::FeatureExtraction { layers: *layers }
            }
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        match self {
            Self::Direct(p) => p
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("direct.{n}"), t))
                .collect(),
            Self::FeatureExtraction { params, .. } => params
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("feature.{n}"), t))
                .collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        match self {
            Self::Direct(p) => p
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("direct.{n}"), t))
                .collect(),
            Self::FeatureExtraction { params, .. } => params
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("feature.{n}"), t))
                .collect(),
        }
    }
}

impl VariantVars {
    fn vars(&self) -> Vec<Var> {
        match self {
            Self::Direct(v) => v.vars(),
            Self::FeatureExtraction { vars, .. } => vars.vars(),
        }
    }

    fn vars_mut(&mut self) -> Vec<&mut Var> {
        match self {
            Self::Direct(v) => v.vars_mut(),
            Self::FeatureExtraction { vars, .. } => vars.vars_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxTunedModel<F> {
    pub base: CausalLM<F>,
    /// Auxiliary stack configuration; `vocab_size` always equals the base's.
    pub aux_config: TransformerConfig,
    pub stack: Stack<F>,
    pub variant: AuxVariant<F>,
}

#[derive(Clone, Debug)]
pub struct AuxVars {
    pub base: CausalLMVars,
    pub stack: StackVars,
    pub variant: VariantVars,
}

impl AuxVars {
    /// Auxiliary-side variables, in [`AuxTunedModel::trainable_parameters`] order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = self.stack.vars();
        out.extend(self.variant.vars());
        out
    }

    pub fn trainable_vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out = self.stack.vars_mut();
        out.extend(self.variant.vars_mut());
        out
    }
}

/// Rows of (attribute, text) with the text positions whose next-token
/// logits are read.
#[derive(Clone, Debug)]
pub struct AuxBatch {
    /// `batch × m`; `m` is shared by all rows and may be zero.
    pub attributes: Vec<Vec<usize>>,
    pub text: TokenBatch,
    /// Flat indices `row · seq + t` into `text`.
    pub read: Vec<usize>,
}

impl AuxBatch {
    pub fn attr_len(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }
}

/// Base and auxiliary logits at the read positions, plus their sum.
#[derive(Clone, Copy, Debug)]
pub struct FusedLogits {
    pub base: Var,
    pub aux: Var,
    pub combined: Var,
}

/// `softmax(base + aux)` evaluated in double precision.
pub fn fuse<F: Scalar>(base: &[F], aux: &[F]) -> Vec<f64> {
    let sum: Vec<f64> = base
        .iter()
        .zip(aux)
        .map(|(b, a)| b.as_f64() + a.as_f64())
        .collect();
    softmax64(&sum)
}

pub fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl<F: Scalar> AuxTunedModel<F> {
    /// Freezes `base` and attaches a freshly initialized auxiliary pathway.
    /// Only `hidden_dim`, `num_layers`, `num_heads`, `ffn_dim`,
    /// `max_seq_len` and `seed` of `aux_config` are used; the vocabulary is
    /// the base's.
    pub fn new(
        base: CausalLM<F>,
        mut aux_config: TransformerConfig,
        kind: VariantKind,
    ) -> Result<Self> {
        aux_config.vocab_size = base.config.vocab_size;
        aux_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(aux_config.seed);
        let (d, lm) = (aux_config.hidden_dim, base.config.hidden_dim);
        let stack = Stack::init(
            d,
            aux_config.ffn_dim,
            aux_config.num_layers,
            aux_config.num_heads,
            &mut rng,
        );
        let variant = match kind {
            VariantKind::Direct => AuxVariant::Direct(DirectParams {
                token_embedding: normal(&[aux_config.vocab_size, d], &mut rng),
                position_embedding: normal(&[aux_config.max_seq_len, d], &mut rng),
            }),
            VariantKind::FeatureExtraction { layers } => {
                if layers == 0 || layers > base.config.num_layers {
                    return Err(Error::LayerOutOfRange {
                        layers,
                        max: base.config.num_layers,
                    });
                }
                AuxVariant::FeatureExtraction {
                    layers,
                    params: FeatureParams {
                        proj_in_w: normal(&[lm, d], &mut rng),
                        proj_in_b: Tensor::zeros(&[d]),
                        proj_out_w: normal(&[d, lm], &mut rng),
                        proj_out_b: Tensor::zeros(&[lm]),
                        z_att: Tensor::zeros(&[d]),
                        z_txt: Tensor::zeros(&[d]),
                    },
                }
            }
        };
        let mut model = Self {
            base: base.frozen(),
            aux_config,
            stack,
            variant,
        };
        for (_, t) in model.trainable_parameters_mut() {
            t.set_requires_grad(true);
        }
        Ok(model)
    }

    pub fn kind(&self) -> VariantKind {
        self.variant.kind()
    }

    /// Exactly the auxiliary-side tensors; no base tensor is ever listed.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = self
            .stack
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("stack.{n}"), t))
            .collect();
        out.extend(self.variant.tensors());
        out
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = self
            .stack
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("stack.{n}"), t))
            .collect();
        out.extend(self.variant.tensors_mut());
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters()
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Closed-form auxiliary parameter count for a configuration.
    pub fn expected_trainable_count(
        base: &TransformerConfig,
        aux: &TransformerConfig,
        kind: VariantKind,
    ) -> usize {
        let d = aux.hidden_dim;
        let stack = aux.num_layers * TransformerConfig::block_param_count(d, aux.ffn_dim) + 2 * d;
        stack
            + match kind {
                VariantKind::Direct => base.vocab_size * d + aux.max_seq_len * d,
                VariantKind::FeatureExtraction { .. } => {
                    let lm = base.hidden_dim;
                    lm * d + d + d * lm + lm + 2 * d
                }
            }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> AuxVars {
        AuxVars {
            base: self.base.bind(tape),
            stack: self.stack.bind(tape),
            variant: match &self.variant {
                AuxVariant::Direct(p) => VariantVars::Direct(p.bind(tape)),
                AuxVariant::FeatureExtraction { layers, params } => {
                    VariantVars::FeatureExtraction {
                        layers: *layers,
                        vars: params.bind(tape),
                    }
                }
            },
        }
    }

    pub fn accumulate_grads(&mut self, vars: &AuxVars, grads: &Gradients<F>) -> Result<()> {
        for ((_, t), v) in self
            .trainable_parameters_mut()
            .into_iter()
            .zip(vars.trainable_vars())
        {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> AuxTunedModel<G> {
        AuxTunedModel {
            base: self.base.cast(),
            aux_config: self.aux_config,
            stack: self.stack.cast(),
            variant: match &self.variant {
                AuxVariant::Direct(p) => AuxVariant::Direct(p.cast()),
                AuxVariant::FeatureExtraction { layers, params } => AuxVariant::FeatureExtraction {
                    layers: *layers,
                    params: params.cast(),
                },
            },
        }
    }

    fn check_context(&self, attribute: &[usize], prefix: &[usize]) -> Result<()> {
        check_tokens(&self.base.config, prefix)?;
        if let Some(&id) = attribute
            .iter()
            .find(|&&id| id >= self.base.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.base.config.vocab_size,
            });
        }
        let total = attribute.len() + prefix.len();
        let limit = match self.variant {
            AuxVariant::Direct(_) => self.aux_config.max_seq_len,
            // positions restart per block, so only the base context bounds them
            AuxVariant::FeatureExtraction { .. } => {
                if attribute.len() > self.base.config.max_seq_len {
                    return Err(Error::SequenceTooLong {
                        len: attribute.len(),
                        max: self.base.config.max_seq_len,
                    });
                }
                self.aux_config.max_seq_len.max(total)
            }
        };
        if total > limit {
            return Err(Error::SequenceTooLong {
                len: total,
                max: limit,
            });
        }
        Ok(())
    }

    /// Single-context evaluation returning (base, aux) logits at the last
    /// prefix position.
    fn single(&self, attribute: &[usize], prefix: &[usize]) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_context(attribute, prefix)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let batch = AuxBatch {
            attributes: vec![attribute.to_vec()],
            text: TokenBatch::single(prefix),
            read: vec![prefix.len() - 1],
        };
        let out = vars.forward(&mut tape, &batch)?;
        let v = self.base.config.vocab_size;
        Ok((
            tape.to_tensor(out.base).reshape(&[v])?,
            tape.to_tensor(out.aux).reshape(&[v])?,
        ))
    }

    /// `logits_LM(x_t | prefix)`; independent of any attribute.
    pub fn base_logits(&self, prefix: &[usize]) -> Result<Tensor<F>> {
        check_tokens(&self.base.config, prefix)?;
        let mut tape = Tape::new();
        let vars = self.base.bind(&mut tape);
        let text = TokenBatch::single(prefix);
        let h = vars.hidden(&mut tape, &text, true)?;
        let h = tape.gather_rows(h, &[prefix.len() - 1])?;
        let l = vars.head(&mut tape, h)?;
        tape.to_tensor(l).reshape(&[self.base.config.vocab_size])
    }

    pub fn aux_logits(&self, attribute: &[usize], prefix: &[usize]) -> Result<Tensor<F>> {
        Ok(self.single(attribute, prefix)?.1)
    }

    pub fn aux_logits_direct(&self, attribute: &[usize], prefix: &[usize]) -> Result<Tensor<F>> {
        if !matches!(self.variant, AuxVariant::Direct(_)) {
            return Err(Error::VariantMismatch { expected: "direct" });
        }
        self.aux_logits(attribute, prefix)
    }

    pub fn aux_logits_feature(&self, attribute: &[usize], prefix: &[usize]) -> Result<Tensor<F>> {
        if !matches!(self.variant, AuxVariant::FeatureExtraction { .. }) {
            return Err(Error::VariantMismatch {
                expected: "feature_extraction",
            });
        }
        self.aux_logits(attribute, prefix)
    }

    /// Pre-softmax sum of base and auxiliary logits.
    pub fn combined_logits(&self, attribute: &[usize], prefix: &[usize]) -> Result<Tensor<F>> {
        let (b, a) = self.single(attribute, prefix)?;
        let v: Vec<F> = b
            .values()
            .iter()
            .zip(a.values())
            .map(|(&x, &y)| x + y)
            .collect();
        Tensor::new(&[v.len()], v)
    }

    pub fn conditional_distribution(
        &self,
        attribute: &[usize],
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        let (b, a) = self.single(attribute, prefix)?;
        Ok(fuse(b.values(), a.values()))
    }

    /// Base and auxiliary logits for many contexts at once. Rows are grouped
    /// by attribute length internally; results keep the input order.
    pub fn next_logits_batch(
        &self,
        attributes: &[Vec<usize>],
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<(Vec<F>, Vec<F>)>> {
        if attributes.len() != prefixes.len() {
            return Err(Error::ShapeMismatch {
                op: "next_logits_batch",
                left: vec![attributes.len()],
                right: vec![prefixes.len()],
            });
        }
        let mut out: Vec<Option<(Vec<F>, Vec<F>)>> = vec![None; prefixes.len()];
        let mut lengths: Vec<usize> = attributes.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let v = self.base.config.vocab_size;
        for m in lengths {
            let rows: Vec<usize> = (0..prefixes.len())
                .filter(|&i| attributes[i].len() == m)
                .collect();
            for &i in &rows {
                self.check_context(&attributes[i], &prefixes[i])?;
            }
            let group: Vec<Vec<usize>> = rows.iter().map(|&i| prefixes[i].clone()).collect();
            let text = TokenBatch::padded(&group, 0)?;
            let read = rows
                .iter()
                .enumerate()
                .map(|(r, &i)| r * text.seq + prefixes[i].len() - 1)
                .collect();
            let batch = AuxBatch {
                attributes: rows.iter().map(|&i| attributes[i].clone()).collect(),
                text,
                read,
            };
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let fused = vars.forward(&mut tape, &batch)?;
            let (bv, av) = (tape.value(fused.base), tape.value(fused.aux));
            for (r, &i) in rows.iter().enumerate() {
                out[i] = Some((
                    bv[r * v..(r + 1) * v].to_vec(),
                    av[r * v..(r + 1) * v].to_vec(),
                ));
            }
        }
        Ok(out
            .into_iter()
            .map(|o| o.expect("every row is in one group"))
            .collect())
    }

    pub fn base_hash(&self) -> String {
        self.base.param_hash()
    }

    pub fn aux_hash(&self) -> String {
        hash_tensors(self.trainable_parameters().into_iter())
    }
}

impl AuxVars {
    /// Logits at `batch.read`; the base term is computed from the text alone.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, batch: &AuxBatch) -> Result<FusedLogits> {
        let text = &batch.text;
        let m = batch.attr_len();
        if batch.attributes.len() != text.batch || batch.attributes.iter().any(|a| a.len() != m) {
            return Err(Error::ShapeMismatch {
                op: "aux attributes",
                left: vec![text.batch, m],
                right: vec![batch.attributes.len()],
            });
        }
        let capture = match &self.variant {
            VariantVars::FeatureExtraction { layers, .. } => Some(*layers),
            VariantVars::Direct(_) => None,
        };
        let (hidden, text_features) = self.base.hidden_with_capture(tape, text, true, capture)?;
        let base_rows = tape.gather_rows(hidden, &batch.read)?;
        let base = self.base.head(tape, base_rows)?;

        let (b, t) = (text.batch, text.seq);
        let total = m + t;
        let aux_read: Vec<usize> = batch
            .read
            .iter()
            .map(|&r| (r / t) * total + m + r % t)
            .collect();
        let aux = match &self.variant {
            VariantVars::Direct(d) => {
                let mut ids = Vec::with_capacity(b * total);
                for (row, attr) in batch.attributes.iter().enumerate() {
                    ids.extend_from_slice(attr);
                    ids.extend_from_slice(&text.ids[row * t..(row + 1) * t]);
                }
                let joint = TokenBatch {
                    batch: b,
                    seq: total,
                    ids,
                };
                let tok = tape.embedding(d.token_embedding, &joint.ids)?;
                let pos = tape.embedding(d.position_embedding, &joint.positions())?;
                let x = tape.add(tok, pos)?;
                let n = self.stack.blocks.len();
                let h = self.stack.run_blocks(tape, x, 0..n, b, total, true)?;
                let h = self.stack.final_norm(tape, h)?;
                let h = tape.gather_rows(h, &aux_read)?;
                tape.matmul_bt(h, d.token_embedding)?
            }
            VariantVars::FeatureExtraction { layers, vars } => {
                let txt = text_features.expect("captured for feature extraction");
                let txt = tape.matmul(txt, vars.proj_in_w)?;
                let txt = tape.add_bias(txt, vars.proj_in_b)?;
                let txt = tape.add_bias(txt, vars.z_txt)?;
                let x = if m > 0 {
                    let attr = TokenBatch {
                        batch: b,
                        seq: m,
                        ids: batch.attributes.concat(),
                    };
                    let att = self.base.prefix_layers(tape, &attr, *layers, true)?;
                    let att = tape.matmul(att, vars.proj_in_w)?;
                    let att = tape.add_bias(att, vars.proj_in_b)?;
                    let att = tape.add_bias(att, vars.z_att)?;
                    let both = tape.concat_rows(&[att, txt])?;
                    // interleave to [α_b ; x_b] per row
                    let mut order = Vec::with_capacity(b * total);
                    for row in 0..b {
                        order.extend(row * m..(row + 1) * m);
                        order.extend(b * m + row * t..b * m + (row + 1) * t);
                    }
                    tape.gather_rows(both, &order)?
                } else {
                    txt
                };
                let n = self.stack.blocks.len();
                let h = self.stack.run_blocks(tape, x, 0..n, b, total, true)?;
                let h = self.stack.final_norm(tape, h)?;
                let h = tape.gather_rows(h, &aux_read)?;
                let h = tape.matmul(h, vars.proj_out_w)?;
                let h = tape.add_bias(h, vars.proj_out_b)?;
                self.base.head(tape, h)?
            }
        };
        let combined = tape.add(base, aux)?;
        Ok(FusedLogits {
            base,
            aux,
            combined,
        })
    }
}

impl AuxTunedModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set("kind", "aux_tuned");
        ckpt.set("variant", self.kind().name());
        if let VariantKind::FeatureExtraction { layers } = self.kind() {
            ckpt.set("L", layers);
        }
        self.base.config.write_meta(&mut ckpt, "base.");
        ckpt.set("base.frozen", true);
        self.aux_config.write_meta(&mut ckpt, "aux.");
        ckpt.set("base_hash", self.base_hash());
        for (name, t) in self.base.tensors() {
            ckpt.push_tensor(&format!("base.{name}"), t.clone());
        }
        for (name, t) in self.trainable_parameters() {
            ckpt.push_tensor(&format!("aux.{name}"), t.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let base = CausalLM::from_checkpoint_prefixed(ckpt, "base.")?;
        let aux_config = TransformerConfig::read_meta(ckpt, "aux.")?;
        let kind = match ckpt.get("variant") {
            Some("direct") => VariantKind::Direct,
            Some("feature_extraction") => VariantKind::FeatureExtraction {
                layers: ckpt.parse("L")?,
            },
            other => return Err(Error::Checkpoint(format!("unknown variant {other:?}"))),
        };
        let mut model = Self::new(base, aux_config, kind)?;
        for (name, t) in model.trainable_parameters_mut() {
            let stored = ckpt.tensor(&format!("aux.{name}"))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor aux.{name} has wrong shape"
                )));
            }
            t.values_mut().copy_from_slice(stored.values());
        }
        if let Some(h) = ckpt.get("base_hash") {
            if h != model.base_hash() {
                return Err(Error::Checkpoint(
                    "base parameters do not match recorded hash".into(),
                ));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
