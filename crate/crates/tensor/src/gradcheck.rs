//! Central finite differences for verifying hand-written backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).expect("rel_err shapes").sum_sq().sqrt();
    let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numerical gradient of a scalar function by central differences.
pub fn numerical_grad(x: &Tensor<f64>, eps: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    g
}

/// Runs `f` on a random standard-normal input, back-propagates, and returns
/// the relative error against central differences.
pub fn check_unary<F>(shape: &[usize], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(x);
        tape.backward(y).expect("scalar output").wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    };
    let numeric = numerical_grad(&x0, 1e-6, |p| {
        let tape = Tape::no_grad();
        f(tape.constant(p.clone())).item()
    });
    rel_err(&analytic, &numeric)
}
