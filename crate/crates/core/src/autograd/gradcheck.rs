use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, TensorError, Var};

/// A scalar-valued computation that can be replayed at any precision.
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, tape: &Tape<S>, params: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub h: f64,
    /// Coordinates probed per tensor; tensors this small or smaller are probed exhaustively.
    pub probes: usize,
    pub seed: u64,
    /// Denominator floor as a fraction of the largest probed numeric gradient.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, probes: 16, seed: 0, floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor index, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub probes: usize,
}

fn eval_f64<F: ScalarFn>(f: &F, params: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let tape = Tape::<f64>::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite);
    }
    Ok(v)
}

/// Compares reverse-mode gradients computed at precision `T` with float64
/// central differences.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where the
/// floor is `opts.floor` times the largest probed numeric gradient, so coordinates whose
/// gradient sits at finite-difference noise level do not dominate.
pub fn grad_check<T: Scalar, F: ScalarFn>(
    f: &F,
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, TensorError> {
    let tape = Tape::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.cast())).collect();
    let out = f.eval(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, probes: 0 };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut pairs = Vec::new();
    for (ti, p) in params.iter().enumerate() {
        let n = p.numel();
        let idx: Vec<usize> = if n <= opts.probes { (0..n).collect() } else { sample(&mut rng, n, opts.probes).into_vec() };
        let analytic = grads.get(vars[ti]).map(|g| g.cast::<f64>()).unwrap_or_else(|| Tensor::zeros(p.shape()));
        for &i in &idx {
            let orig = p.data()[i];
            work[ti].data_mut()[i] = orig + opts.h;
            let fp = eval_f64(f, &work)?;
            work[ti].data_mut()[i] = orig - opts.h;
            let fm = eval_f64(f, &work)?;
            work[ti].data_mut()[i] = orig;
            pairs.push((ti, i, analytic.data()[i], (fp - fm) / (2.0 * opts.h)));
        }
    }
    let scale = pairs.iter().map(|p| p.3.abs()).fold(0.0, f64::max);
    let floor = (opts.floor * scale).max(1e-12);
    for (ti, i, a, num) in pairs {
        let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        report.probes += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((ti, i, a, num));
        }
    }
    Ok(report)
}
