//! Binary cross-entropy plus dice loss on probability maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
}

fn check_target<F: Scalar>(p: &[usize], y: &Tensor<F>) -> Result<()> {
    if p != y.shape() {
        return Err(Error::Shape {
            op: "training_loss",
            lhs: p.to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if y.data().iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(Error::invalid("training_loss: target mask must be binary"));
    }
    Ok(())
}

/// Pixel-mean BCE plus `1 - (2ΣPY + 1) / (ΣP + ΣY + 1)`, weighted 1:1.
pub fn training_loss<F: Scalar>(tape: &mut Tape<F>, p: Var, y: &Tensor<F>) -> Result<LossParts> {
    check_target(tape.shape(p), y)?;
    let inv: Vec<F> = y.data().iter().map(|&v| F::one() - v).collect();
    let y_sum = y.data().iter().copied().sum::<F>().as_f64();
    let not_y = tape.constant(Tensor::new(y.shape(), inv)?);
    let yv = tape.constant(y.clone());

    let log_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.ln(one_minus_p);
    let pos = tape.mul(yv, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean_ll = tape.mean_all(ll);
    let bce = tape.scale(mean_ll, -1.0);

    let py = tape.mul(p, yv)?;
    let inter = tape.sum_all(py);
    let inter2 = tape.scale(inter, 2.0);
    let num = tape.add_scalar(inter2, DICE_SMOOTH);
    let p_sum = tape.sum_all(p);
    let den = tape.add_scalar(p_sum, y_sum + DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg_ratio = tape.scale(ratio, -1.0);
    let dice = tape.add_scalar(neg_ratio, 1.0);

    let total = tape.add(bce, dice)?;
    Ok(LossParts { total, bce, dice })
}
