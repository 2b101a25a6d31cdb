//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::tape::{GradRecord, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFdReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamFdReport>,
    pub max_rel_error: f64,
    pub evaluations: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }
}

/// |a − n| / max(1, |n|)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` gradients against central differences of `f`.
/// `params` are the unperturbed values; `f` receives a perturbed copy.
pub fn finite_difference_check<F>(
    names: &[String],
    params: &[Tensor],
    analytic: &[Tensor],
    mut f: F,
    cfg: FdConfig,
) -> FdReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    let mut evaluations = 0;
    for p in 0..params.len() {
        let mut worst = 0.0;
        let mut worst_index = 0;
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + cfg.step;
            let up = f(&work);
            work[p].data_mut()[i] = orig - cfg.step;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            evaluations += 2;
            let numeric = (up - down) / (2.0 * cfg.step);
            let e = relative_error(analytic[p].data()[i], numeric);
            if e > worst || e.is_nan() {
                worst = e;
                worst_index = i;
            }
        }
        reports.push(ParamFdReport {
            name: names.get(p).cloned().unwrap_or_else(|| format!("param{p}")),
            max_rel_error: worst,
            worst_index,
            flagged: !(worst < cfg.tolerance),
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    FdReport {
        params: reports,
        max_rel_error,
        evaluations,
    }
}

/// Runs a tape-built scalar function for both the analytic gradient and
/// the finite differences. `build` registers the supplied parameter values
/// (in order) and returns the loss variable.
pub fn check_tape_fn<B>(
    names: &[String],
    params: &[Tensor],
    build: B,
    cfg: FdConfig,
) -> Result<FdReport>
where
    B: Fn(&mut GradRecord, &[Tensor]) -> Result<Var>,
{
    let mut rec = GradRecord::new();
    let loss = build(&mut rec, params)?;
    let grads = rec.backward(loss)?;
    let eval = |ps: &[Tensor]| {
        let mut r = GradRecord::new();
        match build(&mut r, ps) {
            Ok(l) => r.value(l).data()[0],
            Err(_) => f64::NAN,
        }
    };
    Ok(finite_difference_check(names, params, &grads.grads, eval, cfg))
}
