use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One input element whose analytic and central-difference gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Worst element overall, whether or not it failed.
    pub worst: Option<Offender>,
    /// First few failing elements.
    pub failures: Vec<Offender>,
    /// Elements whose central stencil crossed a relu/abs kink and were checked one-sided.
    pub one_sided: usize,
    /// Elements with kinks arbitrarily close on both sides; these fail the check.
    pub unresolved: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.unresolved == 0
    }
}

const MAX_REPORTED: usize = 16;
/// One-sided fallback steps tried: `eps, eps/2, …`.
const KINK_HALVINGS: i32 = 6;

/// Compares reverse-mode gradients of a scalar graph against finite differences.
///
/// `build` receives the tape and one leaf per entry of `inputs` and returns the
/// scalar output. Every element of every input is perturbed by `±eps` and the
/// check fails where `|analytic - numeric| / max(1, |numeric|) > tol`.
///
/// When a `±eps` step flips the sign of some relu/abs input the central
/// difference straddles a kink. Such elements use the one-sided
/// extrapolated difference `2·D(h/2) - D(h)` on a side that stays on the base
/// point's linear piece, starting at `h = eps` and halving while no side does.
/// It is second-order accurate like the central one.
pub fn gradient_check<B>(inputs: &[Tensor<f64>], build: B, eps: f64, tol: f64) -> Result<CheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient_check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    let base_value = tape.data(out)[0];
    let base_pattern = tape.kink_pattern();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tp = Tape::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|t| tp.constant(t.clone())).collect();
        let o = build(&mut tp, &vs)?;
        Ok((tp.data(o)[0], tp.kink_pattern()))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = CheckReport {
        checked: 0,
        max_rel_err: 0.0,
        tol,
        worst: None,
        failures: Vec::new(),
        one_sided: 0,
        unresolved: 0,
    };
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            let mut at = |x: f64| {
                work[i].data_mut()[j] = x;
                let r = eval(&work);
                work[i].data_mut()[j] = orig;
                r
            };
            let (plus, p_pat) = at(orig + eps)?;
            let (minus, m_pat) = at(orig - eps)?;
            let numeric = if p_pat == base_pattern && m_pat == base_pattern {
                (plus - minus) / (2.0 * eps)
            } else {
                let mut found = None;
                'search: for k in 0..KINK_HALVINGS {
                    let h = eps / f64::powi(2.0, k);
                    for side in [1.0, -1.0] {
                        let (far, far_pat) = if k == 0 && side > 0.0 {
                            (plus, p_pat.clone())
                        } else if k == 0 {
                            (minus, m_pat.clone())
                        } else {
                            at(orig + side * h)?
                        };
                        if far_pat != base_pattern {
                            continue;
                        }
                        let (near, n_pat) = at(orig + side * h / 2.0)?;
                        if n_pat == base_pattern {
                            let d_full = side * (far - base_value) / h;
                            let d_half = side * (near - base_value) / (h / 2.0);
                            found = Some(2.0 * d_half - d_full);
                            break 'search;
                        }
                    }
                }
                match found {
                    Some(n) => {
                        report.one_sided += 1;
                        n
                    }
                    None => {
                        report.unresolved += 1;
                        continue;
                    }
                }
            };
            let rel_err = (a - numeric).abs() / numeric.abs().max(1.0);
            let off = Offender {
                input: i,
                element: j,
                analytic: a,
                numeric,
                rel_err,
            };
            report.checked += 1;
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                report.worst = Some(off.clone());
            }
            if !(rel_err <= tol) && report.failures.len() < MAX_REPORTED {
                report.failures.push(off);
            }
        }
    }
    Ok(report)
}
