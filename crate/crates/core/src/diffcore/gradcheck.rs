//! Central finite-difference check of analytic gradients.
//!
//! By default the difference quotient is Richardson-extrapolated from steps
//! `h` and `h/2`, which cancels the `O(h²)` term and lets `h` be large
//! enough that roundoff stays far below tiny gradients. A coordinate whose
//! extrapolated estimate disagrees is re-estimated with plain central
//! differences at `h` and at each fallback step; the closest estimate is
//! kept. The plain quotient at `h` covers gradients near the skip floor,
//! where the half step already costs too much roundoff, and the smaller
//! fallback steps resolve ReLU kinks lying within `h` of the point.
//!
//! The numerical side only evaluates forward losses, so it stays independent
//! of every backward rule it checks.

use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Combine steps `h` and `h/2` as `(4 D(h/2) - D(h)) / 3`.
    pub richardson: bool,
    /// Plain central-difference steps tried when the first estimate fails.
    pub fallback_steps: Vec<f64>,
    pub tolerance: f64,
    /// Coordinates where both gradients fall below this magnitude are skipped.
    pub skip_below: f64,
    /// Scales the analytic gradient of the named block by 1.5 before comparing.
    /// Used as a negative control.
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            richardson: true,
            fallback_steps: vec![1e-5, 1e-6],
            tolerance: 1e-4,
            skip_below: 1e-8,
            corrupt_block: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        return None;
    }
    Some((analytic - numeric).abs() / scale)
}

/// Compares backward-pass gradients of `loss` against central differences
/// for every coordinate of every parameter.
pub fn check_gradients<S, F>(
    params: &ParamSet<S>,
    loss: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    S: Scalar,
    F: Fn(&Tape<S>, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = loss(&tape, &bound)?;
    let grads = tape.backward(out)?;

    let eval = |p: &ParamSet<S>| -> Result<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let v = loss(&tape, &bound)?;
        Ok(tape.item(v)?.widen())
    };

    let mut work = params.clone();
    let mut blocks = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let var = bound.vars()[i];
        let numel = params.get(name).map_or(0, |t| t.numel());
        let zeros = vec![S::zero(); numel];
        let analytic = grads.get(var).unwrap_or(&zeros).to_vec();
        let corrupt = opts.corrupt_block.as_deref() == Some(name.as_str());
        let mut report = BlockReport {
            name: name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            passed: true,
        };
        for j in 0..numel {
            let orig = work.tensors_mut()[i].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                work.tensors_mut()[i].data_mut()[j] = orig + S::lit(h);
                let plus = eval(&work)?;
                work.tensors_mut()[i].data_mut()[j] = orig - S::lit(h);
                let minus = eval(&work)?;
                work.tensors_mut()[i].data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let mut a = analytic[j].widen();
            if corrupt {
                a *= 1.5;
            }
            let coarse = central(opts.step)?;
            let mut numeric = if opts.richardson {
                (4.0 * central(opts.step / 2.0)? - coarse) / 3.0
            } else {
                coarse
            };
            let fails = |n: f64| relative_error(a, n, opts.skip_below).is_some_and(|e| e >= opts.tolerance);
            if fails(numeric) {
                for alt in std::iter::once(Ok(coarse)).chain(opts.fallback_steps.iter().map(|&h| central(h))) {
                    let alt = alt?;
                    if (a - alt).abs() < (a - numeric).abs() {
                        numeric = alt;
                    }
                }
            }
            match relative_error(a, numeric, opts.skip_below) {
                Some(e) => {
                    report.checked += 1;
                    report.max_rel_err = report.max_rel_err.max(e);
                }
                None => report.skipped += 1,
            }
        }
        report.passed = report.max_rel_err < opts.tolerance;
        blocks.push(report);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        blocks,
    })
}
