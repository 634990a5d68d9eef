use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-12)`.
pub fn check_gradient<F, Fun>(f: Fun, x: &Tensor<F>, h: F) -> Result<F>
where
    F: Scalar,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    if h <= F::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |input: Tensor<F>| -> Result<F> {
        let mut g = Graph::new();
        let v = g.constant(input);
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad(true));
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[F]>::to_vec)
        .unwrap_or_else(|| vec![F::zero(); x.numel()]);

    let two = F::lit(2.0);
    let floor = F::lit(1e-12);
    let mut worst = F::zero();
    for (i, &an) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let numeric = (eval(plus)? - eval(minus)?) / (two * h);
        let denom = an.abs().max(numeric.abs()).max(floor);
        worst = worst.max((an - numeric).abs() / denom);
    }
    Ok(worst)
}

fn scalar_of<F: Scalar>(g: &Graph<F>, y: Var) -> Result<F> {
    let t = g.value(y);
    if t.numel() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
