//! Gradient checks shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use auxtune::autodiff::{central_difference, grad_check, Tape, Tensor, Var};
use auxtune::auxtune::{AuxBatch, AuxTunedModel, VariantKind};
use auxtune::transformer::{CausalLM, TokenBatch, TransformerConfig};
use auxtune::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn constant(tape: &mut Tape<f64>, t: &Tensor<f64>) -> Var {
    tape.leaf(&t.clone().with_requires_grad(false))
}

/// Contracts a tensor-valued output with fixed random weights so every
/// output element reaches the scalar loss.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = constant(tape, weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<G>(
    name: &str,
    out_shape: &[usize],
    x: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
    f: G,
) -> Result<(String, f64)>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let w = random(out_shape, rng);
    let err = grad_check(
        |t: &mut Tape<f64>, v: Var| {
            let o = f(t, v)?;
            project(t, o, &w)
        },
        x,
        EPS,
    )?;
    Ok((name.to_string(), err))
}

/// Worst relative error per primitive and differentiable input for one seed.
pub fn primitive_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let (a, b, bt) = (random(&[3, 4], r), random(&[4, 5], r), random(&[5, 4], r));
    out.push(check("matmul.a", &[3, 5], &a, r, |t, x| {
        let b = constant(t, &b);
        t.matmul(x, b)
    })?);
    out.push(check("matmul.b", &[3, 5], &b, r, |t, x| {
        let a = constant(t, &a);
        t.matmul(a, x)
    })?);
    out.push(check("matmul_bt.a", &[3, 5], &a, r, |t, x| {
        let b = constant(t, &bt);
        t.matmul_bt(x, b)
    })?);
    out.push(check("matmul_bt.b", &[3, 5], &bt, r, |t, x| {
        let a = constant(t, &a);
        t.matmul_bt(a, x)
    })?);
    out.push(check(
        "matmul.shared",
        &[4, 4],
        &random(&[4, 4], r),
        r,
        |t, x| t.matmul(x, x),
    )?);

    let (p, q) = (random(&[3, 4], r), random(&[3, 4], r));
    out.push(check("add", &[3, 4], &p, r, |t, x| {
        let q = constant(t, &q);
        t.add(x, q)
    })?);
    out.push(check("mul", &[3, 4], &p, r, |t, x| {
        let q = constant(t, &q);
        t.mul(q, x)
    })?);
    out.push(check("mul.square", &[3, 4], &p, r, |t, x| t.mul(x, x))?);
    out.push(check("scale", &[3, 4], &p, r, |t, x| t.scale(x, -1.7))?);

    let bias = random(&[4], r);
    out.push(check("add_bias.x", &[3, 4], &p, r, |t, x| {
        let b = constant(t, &bias);
        t.add_bias(x, b)
    })?);
    out.push(check("add_bias.bias", &[3, 4], &bias, r, |t, x| {
        let p = constant(t, &p);
        t.add_bias(p, x)
    })?);

    let wide = Tensor::from_fn(&[3, 4], |_| r.gen_range(-3.0..3.0));
    out.push(check("gelu", &[3, 4], &wide, r, |t, x| t.gelu(x))?);

    let table = random(&[6, 3], r);
    let ids = [2usize, 0, 2, 5];
    out.push(check("embedding", &[4, 3], &table, r, |t, x| {
        t.embedding(x, &ids)
    })?);
    out.push(check("gather_rows", &[4, 3], &table, r, |t, x| {
        t.gather_rows(x, &[5, 1, 1, 3])
    })?);
    let other = random(&[2, 3], r);
    out.push(check("concat_rows", &[8, 3], &table, r, |t, x| {
        let o = constant(t, &other);
        t.concat_rows(&[o, x])
    })?);

    let (g, beta) = (random(&[4], r), random(&[4], r));
    let ln = |t: &mut Tape<f64>, x: Var, gv: Var, bv: Var| t.layer_norm(x, gv, bv, 1e-5);
    out.push(check("layer_norm.x", &[3, 4], &p, r, |t, x| {
        let (gv, bv) = (constant(t, &g), constant(t, &beta));
        ln(t, x, gv, bv)
    })?);
    out.push(check("layer_norm.gain", &[3, 4], &g, r, |t, x| {
        let (pv, bv) = (constant(t, &p), constant(t, &beta));
        ln(t, pv, x, bv)
    })?);
    out.push(check("layer_norm.bias", &[3, 4], &beta, r, |t, x| {
        let (pv, gv) = (constant(t, &p), constant(t, &g));
        ln(t, pv, gv, x)
    })?);

    // batch 2, seq 3, 2 heads of width 2
    let qkv = Tensor::from_fn(&[6, 12], |_| r.gen_range(-1.5..1.5));
    out.push(check("attention.causal", &[6, 4], &qkv, r, |t, x| {
        t.attention(x, 2, 3, 2, true)
    })?);
    out.push(check("attention.full", &[6, 4], &qkv, r, |t, x| {
        t.attention(x, 2, 3, 2, false)
    })?);

    let logits = Tensor::from_fn(&[3, 5], |_| r.gen_range(-2.0..2.0));
    out.push(check("softmax", &[3, 5], &logits, r, |t, x| t.softmax(x))?);
    out.push((
        "cross_entropy".into(),
        grad_check(
            |t: &mut Tape<f64>, x: Var| t.cross_entropy(x, &[4, 0, 2]),
            &logits,
            EPS,
        )?,
    ));
    out.push((
        "sum".into(),
        grad_check(|t: &mut Tape<f64>, x: Var| t.sum(x), &p, EPS)?,
    ));
    Ok(out)
}

fn tiny_lm(seed: u64) -> Result<CausalLM<f64>> {
    let mut cfg = TransformerConfig::new(11, 8, 2, 2, 8, seed);
    cfg.ffn_dim = 12;
    let mut m = CausalLM::init(cfg)?;
    // larger weights push activations out of the near-linear regime
    for (_, t) in m.tensors_mut() {
        if t.shape().len() == 2 {
            t.values_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    Ok(m)
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Worst relative error over every parameter of a tiny language model's
/// next-token loss.
pub fn lm_error(seed: u64) -> Result<f64> {
    let model = tiny_lm(seed)?;
    let batch = TokenBatch::padded(&[vec![1, 5, 2, 9, 3], vec![4, 4, 10]], 0)?;
    let (rows, targets) = ([0usize, 1, 2, 3, 5, 6], [5usize, 2, 9, 3, 4, 10]);
    let loss = |tape: &mut Tape<f64>, vars: &auxtune::transformer::CausalLMVars| -> Result<Var> {
        let h = vars.hidden(tape, &batch, true)?;
        let h = tape.gather_rows(h, &rows)?;
        let l = vars.head(tape, h)?;
        tape.cross_entropy(l, &targets)
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut err: f64 = 0.0;
    for (k, (_, tensor)) in model.tensors().into_iter().enumerate() {
        let analytic = grads
            .get(vars.vars()[k])
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; tensor.numel()]);
        let f = |tape: &mut Tape<f64>, xv: Var| {
            let mut v = model.bind(tape);
            *v.vars_mut()[k] = xv;
            loss(tape, &v)
        };
        let numeric = central_difference(&f, &tensor.clone().with_requires_grad(false), EPS)?;
        err = err.max(worst(&analytic, &numeric));
    }
    Ok(err)
}

/// Worst relative error over the trainable parameters of an auxiliary-tuned
/// tiny model's fused loss.
pub fn aux_error(seed: u64, kind: VariantKind) -> Result<f64> {
    let base = tiny_lm(seed)?;
    let mut aux_cfg = TransformerConfig::new(11, 6, 1, 2, 9, seed + 100);
    aux_cfg.ffn_dim = 10;
    let mut model = AuxTunedModel::new(base, aux_cfg, kind)?;
    for (_, t) in model.trainable_parameters_mut() {
        if t.shape().len() == 2 {
            t.values_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let batch = AuxBatch {
        attributes: vec![vec![6], vec![7]],
        text: TokenBatch::padded(&[vec![1, 5, 2, 9], vec![1, 4, 10]], 0)?,
        read: vec![0, 1, 2, 4, 5],
    };
    let targets = [5usize, 2, 9, 4, 10];
    let loss = |tape: &mut Tape<f64>, vars: &auxtune::auxtune::AuxVars| -> Result<Var> {
        let fused = vars.forward(tape, &batch)?;
        tape.cross_entropy(fused.combined, &targets)
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut err: f64 = 0.0;
    for (k, (_, tensor)) in model.trainable_parameters().into_iter().enumerate() {
        let analytic = grads
            .get(vars.trainable_vars()[k])
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; tensor.numel()]);
        let f = |tape: &mut Tape<f64>, xv: Var| {
            let mut v = model.bind(tape);
            *v.trainable_vars_mut()[k] = xv;
            loss(tape, &v)
        };
        let numeric = central_difference(&f, &tensor.clone().with_requires_grad(false), EPS)?;
        err = err.max(worst(&analytic, &numeric));
    }
    Ok(err)
}
