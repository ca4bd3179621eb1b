//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates judged against a one-sided difference because a kink
    /// lies within one step (see [`CheckOptions::kink_aware`]).
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many coordinates per input; `None` probes all.
    pub max_coords: Option<usize>,
    /// Seed for choosing the probed coordinates.
    pub seed: u64,
    /// When a central difference misses, and the forward and backward
    /// differences disagree with each other by more than `tol`, the
    /// function has a kink within one step and the central quotient is not
    /// a derivative estimate. The coordinate then passes if the analytic
    /// value matches either one-sided difference.
    pub kink_aware: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
            kink_aware: false,
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn probe_coords(numel: usize, max: Option<usize>, seed: u64) -> Vec<usize> {
    match max {
        Some(k) if k < numel => {
            let mut state = seed;
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < k {
                picked.insert((splitmix(&mut state) % numel as u64) as usize);
            }
            picked.into_iter().collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compares `f`'s analytic gradient with respect to each input against
/// central differences `(f(x + h) − f(x − h)) / 2h`.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], opts: CheckOptions) -> Result<CheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            detail: format!("step {} must be positive", opts.step),
        });
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    if loss.value().numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape()));
    }
    let grads = tape.backward(&loss)?;
    let base = loss.item().to_f64();

    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item().to_f64())
    };

    let mut checks = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zero = inputs[i].zeros_like();
        let analytic = grads.get(var).unwrap_or(&zero);
        let mut worst = InputCheck {
            input: i,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            kinks: 0,
        };
        let coords = probe_coords(inputs[i].numel(), opts.max_coords, opts.seed.wrapping_add(i as u64));
        for &c in &coords {
            let orig = inputs[i].data()[c];
            let h = T::from_f64(opts.step);
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[c].to_f64();
            let mut err = relative_error(a, numeric);
            if opts.kink_aware && err > opts.tol {
                let forward = (up - base) / opts.step;
                let backward = (base - down) / opts.step;
                if relative_error(forward, backward) > opts.tol {
                    err = relative_error(a, forward).min(relative_error(a, backward));
                    worst.kinks += 1;
                }
            }
            if err > worst.max_rel_error || worst.coords_checked == 0 {
                worst.max_rel_error = err;
                worst.worst_coord = c;
                worst.analytic = a;
                worst.numeric = numeric;
            }
            worst.coords_checked += 1;
        }
        checks.push(worst);
    }
    let passed = checks.iter().all(|c| c.max_rel_error <= opts.tol);
    Ok(CheckReport {
        inputs: checks,
        tol: opts.tol,
        passed,
    })
}
