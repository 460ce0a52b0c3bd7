//! Central finite-difference gradient checks at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Entries whose analytic and numeric gradients differ by less than this
/// in absolute terms pass regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-7;
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Largest relative error over all checked entries.
    pub max_rel: f64,
    /// Largest relative error over entries not within the absolute floor.
    pub max_rel_gated: f64,
    pub max_abs: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_gated < rel_tol
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences. At most `limit` entries per input are checked (a seeded
/// random subset when the input is larger).
pub fn check<G>(inputs: &[Tensor<f64>], limit: Option<usize>, seed: u64, f: G) -> Result<GradReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*v).unwrap_or(&zero);
        let idx: Vec<usize> = match limit {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in idx {
            let x0 = vals[i].data()[j];
            vals[i].data_mut()[j] = x0 + EPS;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = x0 - EPS;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = x0;
            let num = (up - down) / (2.0 * EPS);
            let a = analytic.data()[j];
            let abs = (a - num).abs();
            let scale = a.abs().max(num.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs = report.max_abs.max(abs);
            if abs >= ABS_FLOOR {
                report.max_rel_gated = report.max_rel_gated.max(rel);
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = Some((i, j, a, num));
            }
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output entry contributes a distinct weight.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w)?;
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m)?)
}

/// Random tensor with entries uniform in `[lo, hi)`.
pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x·stop(x) has half the analytic gradient of x·x.
        let x = Tensor::from_f64(vec![3], &[0.5, 1.0, 2.0]).unwrap();
        let ok = check(std::slice::from_ref(&x), None, 0, |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y)?)
        })
        .unwrap();
        assert!(ok.passes(1e-6), "{ok:?}");
        let bad = check(&[x], None, 0, |t, v| {
            let c = t.constant(t.value(v[0]).clone())?;
            let y = t.mul(v[0], c)?;
            Ok(t.sum(y)?)
        })
        .unwrap();
        assert!(!bad.passes(1e-2));
    }
}
