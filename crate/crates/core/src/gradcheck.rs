//! Central finite-difference checking of reverse-mode gradients (64-bit).

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::model::Parameters;
use crate::{Error, Result, Tape, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(leaves: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar computation `f` against
/// central differences for every element of every leaf, returning the worst
/// relative error.
pub fn grad_check<F>(leaves: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.scalar(root).is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    let grads = tape.backward(root)?;
    let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
    let mut worst = 0.0f64;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for leaf {li}")));
        }
        for e in 0..leaves[li].len() {
            let orig = leaves[li].data()[e];
            probe[li].data_mut()[e] = orig + step;
            let up = eval(&probe, &f)?;
            probe[li].data_mut()[e] = orig - step;
            let down = eval(&probe, &f)?;
            probe[li].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Agreement between an analytic gradient and central differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckStats {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over every probed coordinate.
    pub vector_rel_error: f64,
    /// Worst per-coordinate [`relative_error`].
    pub max_elementwise_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Like [`grad_check`] but over model parameters. `f` returns the scalar
/// value and, when asked, one gradient tensor per parameter array.
/// `coords(array, len)` picks which elements of each array are probed.
pub fn parameter_grad_check<F, C>(params: &Parameters<f64>, step: f64, f: F, coords: C) -> Result<GradCheckStats>
where
    F: Fn(&Parameters<f64>, bool) -> Result<(f64, Vec<Tensor<f64>>)>,
    C: Fn(usize, usize) -> Vec<usize>,
{
    let (value, grads) = f(params, true)?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    if grads.len() != params.tensors().len() {
        return Err(Error::Contract(format!("{} gradients for {} arrays", grads.len(), params.tensors().len())));
    }
    let mut probe = params.clone();
    let mut stats = GradCheckStats::default();
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
    for (ti, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[ti].shape() || !g.is_finite() {
            return Err(Error::Numeric(format!("bad gradient for {}", params.names()[ti])));
        }
        for e in coords(ti, g.len()) {
            let orig = params.tensors()[ti].data()[e];
            probe.tensors_mut()[ti].data_mut()[e] = orig + step;
            let up = f(&probe, false)?.0;
            probe.tensors_mut()[ti].data_mut()[e] = orig - step;
            let down = f(&probe, false)?.0;
            probe.tensors_mut()[ti].data_mut()[e] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Numeric(format!("non-finite probe at {}[{e}]", params.names()[ti])));
            }
            let (a, n) = (g.data()[e], (up - down) / (2.0 * step));
            stats.max_elementwise_rel_error = stats.max_elementwise_rel_error.max(relative_error(a, n));
            stats.max_abs_error = stats.max_abs_error.max((a - n).abs());
            stats.coordinates += 1;
            diff_sq += (a - n) * (a - n);
            a_sq += a * a;
            n_sq += n * n;
        }
    }
    let scale = Float::sqrt(a_sq).max(Float::sqrt(n_sq));
    stats.vector_rel_error = if scale == 0.0 { 0.0 } else { Float::sqrt(diff_sq) / scale };
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::tape::AttnMask;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap();
        let err = grad_check(&[x, w], DEFAULT_STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(&[x], DEFAULT_STEP, |t, _| Ok(t.leaf(Tensor::scalar(4.2)))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn cross_entropy_of_linear_map() {
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let err = grad_check(&[x, w], DEFAULT_STEP, |t, v| {
            let l = t.matmul(v[0], v[1])?;
            t.cross_entropy(l, 2)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        let y = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.53).sin()).collect()).unwrap();
        let g = Tensor::new(vec![4], vec![1.0, 0.5, -0.3, 1.2]).unwrap();
        let b = Tensor::new(vec![4], vec![0.1, 0.0, -0.2, 0.3]).unwrap();
        let table = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64 * 0.29).sin()).collect()).unwrap();
        let err = grad_check(&[x, y, g, b, table], DEFAULT_STEP, |t, v| {
            let e = t.gather(v[4], &[1, 3, 1])?;
            let a = t.add(v[0], e)?;
            let n = t.layer_norm(a, v[2], v[3], 1e-5)?;
            let q = t.gelu(n);
            let m = t.mul(q, v[1])?;
            let mask = AttnMask { causal: true, offset: 0, key_valid: Some(vec![true, false, true]) };
            let att = t.attention(m, v[1], a, 2, &mask)?;
            let s = t.slice_rows(att, 1, 2)?;
            let r = t.add_row(s, v[3])?;
            let ls = t.log_softmax(r, Some(&[true, true, false, true]))?;
            let p = t.pick_sum(ls, &[(0, 1), (1, 3)])?;
            let ex = t.exp(r);
            let se = t.sum(ex);
            let sc = t.scale(se, 0.1);
            t.add(p, sc)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
