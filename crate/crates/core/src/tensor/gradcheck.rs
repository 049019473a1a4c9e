use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` receives a fresh tape and the recorded input and must return a
/// single-element result.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut input = x.clone();
    input.set_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&input);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out)[0])
    };

    let mut probe = x.clone();
    probe.set_requires_grad(false);
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                // x·x through a 1×1 dense layer whose weight is x itself
                let w = tape.reshape(v, &[1, 1])?;
                let zero = tape.constant(&[1], vec![0.0])?;
                let y = tape.dense(v, w, zero)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
