//! Tversky-family segmentation losses, built on tape operations so gradients
//! flow back to the network.
//!
//! Per class c the Tversky index is
//! (Σ p_c g_c + ε) / (Σ p_c g_c + α Σ p_c̄ g_c + β Σ p_c g_c̄ + ε),
//! where c̄ is the complementary class; α weights false negatives and β false
//! positives. The loss sums (1 - TI_c) over both classes; the focal variant
//! raises each class term to the power γ. ε in numerator and denominator
//! makes an empty class contribute exactly zero.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// False-negative weight.
    pub alpha: f64,
    /// False-positive weight.
    pub beta: f64,
    /// Focal exponent; 1 recovers the plain Tversky loss.
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.7, beta: 0.3, gamma: 4.0 / 3.0, epsilon: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("loss", "alpha and beta must lie in [0, 1]"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::invalid("loss", "gamma must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("loss", "epsilon must be positive"));
        }
        Ok(())
    }
}

fn check_inputs<T: Scalar>(tape: &Tape<T>, p: NodeId, g: NodeId) -> Result<()> {
    let ps = tape.shape(p);
    let gs = tape.shape(g);
    if ps != gs {
        return Err(Error::shape(
            "tversky",
            format!("prediction shape {ps:?} differs from truth shape {gs:?}"),
        ));
    }
    if ps.is_empty() || ps[0] != 2 {
        return Err(Error::shape("tversky", format!("expected [2, ...] class maps, got {ps:?}")));
    }
    // Ground truth must be exactly one-hot.
    let plane: usize = ps[1..].iter().product();
    let gv = tape.value(g);
    for i in 0..plane {
        let (g0, g1) = (gv[i], gv[plane + i]);
        let zero = T::zero();
        let one = T::one();
        if !((g0 == zero || g0 == one) && (g1 == zero || g1 == one) && g0 + g1 == one) {
            return Err(Error::InvariantViolation(format!(
                "ground truth is not one-hot at voxel {i}: ({g0}, {g1})"
            )));
        }
    }
    Ok(())
}

/// 1 - TI_c for a single class, as a [1] node on the tape.
pub fn tversky_class_term<T: Scalar>(
    tape: &mut Tape<T>,
    p: NodeId,
    g: NodeId,
    class: usize,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let other = 1 - class;
    let p_c = tape.channel_slice(p, class)?;
    let g_c = tape.channel_slice(g, class)?;
    let p_o = tape.channel_slice(p, other)?;
    let g_o = tape.channel_slice(g, other)?;

    let tp_prod = tape.mul(p_c, g_c)?;
    let tp = tape.sum_all(tp_prod);
    let fn_prod = tape.mul(p_o, g_c)?;
    let fn_sum = tape.sum_all(fn_prod);
    let fp_prod = tape.mul(p_c, g_o)?;
    let fp_sum = tape.sum_all(fp_prod);

    let eps = T::of_f64(cfg.epsilon);
    let num = tape.add_const(tp, eps);
    let fn_w = tape.scale(fn_sum, T::of_f64(cfg.alpha));
    let fp_w = tape.scale(fp_sum, T::of_f64(cfg.beta));
    let den_partial = tape.add(tp, fn_w)?;
    let den_sum = tape.add(den_partial, fp_w)?;
    let den = tape.add_const(den_sum, eps);
    let ti = tape.div(num, den)?;
    let neg = tape.scale(ti, -T::one());
    Ok(tape.add_const(neg, T::one()))
}

/// Σ_c (1 - TI_c) over both classes.
pub fn tversky_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: NodeId,
    g: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    check_inputs(tape, p, g)?;
    let t0 = tversky_class_term(tape, p, g, 0, cfg)?;
    let t1 = tversky_class_term(tape, p, g, 1, cfg)?;
    tape.add(t0, t1)
}

/// Σ_c (1 - TI_c)^γ. At γ = 1 this takes the same graph as `tversky_loss`,
/// so the two are bit-identical there.
pub fn focal_tversky_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: NodeId,
    g: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if cfg.gamma == 1.0 {
        return tversky_loss(tape, p, g, cfg);
    }
    check_inputs(tape, p, g)?;
    let gamma = T::of_f64(cfg.gamma);
    let t0 = tversky_class_term(tape, p, g, 0, cfg)?;
    let t1 = tversky_class_term(tape, p, g, 1, cfg)?;
    let f0 = tape.pow_const(t0, gamma);
    let f1 = tape.pow_const(t1, gamma);
    tape.add(f0, f1)
}

/// Builds the one-hot [2, ...] truth tensor from a binary label crop.
pub fn one_hot_labels<T: Scalar>(labels: &[u8]) -> (Vec<T>, usize) {
    let n = labels.len();
    let mut data = vec![T::zero(); 2 * n];
    for (i, &l) in labels.iter().enumerate() {
        if l == 1 {
            data[n + i] = T::one();
        } else {
            data[i] = T::one();
        }
    }
    (data, n)
}
