use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval<G>(f: &G, x: &Tensor<f64>) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(false));
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    Ok(v[0])
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn central_difference<G>(f: &G, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus = eval(f, &probe)?;
        probe.values_mut()[i] = orig - eps;
        let minus = eval(f, &probe)?;
        probe.values_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central-difference estimate, always in double precision.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    if !tape.value(out).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = central_difference(&f, x, eps)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, x: Var| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_requires_grad(true));
        let loss = f(&mut tape, xv).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let f = |t: &mut Tape<f64>, x: Var| {
            let z = t.scale(x, 0.0)?;
            t.sum(z)
        };
        assert_eq!(central_difference(&f, &x, 1e-4).unwrap(), vec![0.0; 3]);
        assert_eq!(grad_check(f, &x, 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(&[1, 2], vec![f64::INFINITY, 0.0]).unwrap();
        let f = |t: &mut Tape<f64>, x: Var| t.sum(x);
        assert!(matches!(grad_check(f, &x, 1e-4), Err(Error::NonFinite(_))));
    }
}
