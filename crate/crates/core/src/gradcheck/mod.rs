//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of one element is
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`;
//! the floor keeps near-zero gradients from turning truncation noise of the
//! difference quotient into huge relative errors.
//!
//! Probes whose `+step` or `-step` evaluation changes the sign pattern of any
//! ReLU input are skipped: the function is not differentiable across that
//! kink and the difference quotient there measures nothing.

mod suites;

pub use suites::{run_suite, suite_names, SuiteReport, BLOCK_SUITES, OP_SUITES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{kink, NoGradGuard, Tensor};

pub const REL_ERR_FLOOR: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many elements per tensor (evenly spaced). `None`
    /// probes every element.
    pub max_elems_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: 1e-4,
            max_elems_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `d f(x) / d x` for a single input.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection so
/// every output element contributes.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let opts = GradCheckOptions {
        step,
        tol,
        max_elems_per_tensor: None,
    };
    grad_check_many(|| f(x), std::slice::from_ref(x), &opts)
}

/// Checks the gradients of `f()` with respect to every tensor in `wrt`.
/// Each of them must be a gradient-tracking leaf; their gradient buffers are
/// zeroed.
pub fn grad_check_many<F>(f: F, wrt: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if let Some(i) = wrt.iter().position(|t| !t.requires_grad() || !t.is_leaf()) {
        return Err(Error::Argument(format!(
            "grad_check: tensor {i} is not a gradient-tracking leaf"
        )));
    }
    for t in wrt {
        t.zero_grad();
    }
    let result = check_inner(&f, wrt, opts);
    kink::stop();
    result
}

fn projection(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ n as u64);
    let shape = vec![n];
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn reduce(out: &Tensor) -> Result<Tensor> {
    if out.numel() == 1 {
        return out.reshape(&[1]);
    }
    out.reshape(&[out.numel()])?.mul(&projection(out.numel()))?.sum()
}

fn check_inner<F>(f: &F, wrt: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    kink::start_recording();
    let loss = reduce(&f()?)?;
    loss.backward()?;
    kink::start_compare();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tol: opts.tol,
    };
    let eval = || -> Result<(f64, bool)> {
        let _g = NoGradGuard::new();
        let v = reduce(&f()?)?.item();
        Ok((v, kink::take_crossed()))
    };
    for (ti, t) in wrt.iter().enumerate() {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "grad_check: non-finite analytic gradient at tensor {ti}, element {i}"
            )));
        }
        for i in probe_indices(t.numel(), opts.max_elems_per_tensor) {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + opts.step;
            let plus = eval();
            t.data_mut()[i] = orig - opts.step;
            let minus = eval();
            t.data_mut()[i] = orig;
            let ((fp, cp), (fm, cm)) = (plus?, minus?);
            if cp || cm {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, i));
            }
        }
    }
    Ok(report)
}

fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c).map(|j| j * n / c).collect(),
        _ => (0..n).collect(),
    }
}
