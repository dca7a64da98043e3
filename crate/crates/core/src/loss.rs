//! Binary cross-entropy adversarial losses (real = 1, fake = 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub real_term: f64,
    pub fake_term: f64,
}

fn check_probs(op: &'static str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty probability batch")));
    }
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::InvalidArgument(format!("{op}: probability {} at index {i} lies outside [0, 1]", p[i]))),
        None => Ok(()),
    }
}

fn neg_mean_log(p: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = p.fold((0.0, 0usize), |(s, n), v| (s - v.clamp(PROB_EPS, 1.0 - PROB_EPS).ln(), n + 1));
    sum / n as f64
}

/// `L_D = −mean(log D(x)) − mean(log(1 − D(G(z))))`.
pub fn d_loss(d_real: &[f64], d_fake: &[f64]) -> Result<LossValue> {
    check_probs("d_loss", d_real)?;
    check_probs("d_loss", d_fake)?;
    let real_term = neg_mean_log(d_real.iter().copied());
    let fake_term = neg_mean_log(d_fake.iter().map(|p| 1.0 - p));
    Ok(LossValue { total: real_term + fake_term, real_term, fake_term })
}

/// Non-saturating generator loss `L_G = −mean(log D(G(z)))`.
pub fn g_loss(d_fake: &[f64]) -> Result<LossValue> {
    check_probs("g_loss", d_fake)?;
    let fake_term = neg_mean_log(d_fake.iter().copied());
    Ok(LossValue { total: fake_term, real_term: 0.0, fake_term })
}

fn tape_neg_mean_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let logs = tape.log_clamped(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let m = tape.mean(logs)?;
    tape.scale(m, -1.0)
}

/// Recorded discriminator loss; returns the scalar loss var and its value.
pub fn d_loss_tape(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<(Var, LossValue)> {
    let value = d_loss(tape.value(d_real).data(), tape.value(d_fake).data())?;
    let real = tape_neg_mean_log(tape, d_real)?;
    let one_minus = tape.affine(d_fake, -1.0, 1.0)?;
    let fake = tape_neg_mean_log(tape, one_minus)?;
    Ok((tape.add(real, fake)?, value))
}

pub fn g_loss_tape(tape: &mut Tape, d_fake: Var) -> Result<(Var, LossValue)> {
    let value = g_loss(tape.value(d_fake).data())?;
    Ok((tape_neg_mean_log(tape, d_fake)?, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::f64::consts::LN_2;

    #[test]
    #[allow(clippy::approx_constant)]
    fn midpoint_values() {
        let d = d_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((d.total - 2.0 * LN_2).abs() < 1e-12);
        assert!((d.total - 1.38629).abs() < 1e-5);
        let g = g_loss(&[0.5]).unwrap();
        assert!((g.total - 0.69315).abs() < 1e-5);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let eps = 1e-9;
        let d = d_loss(&[1.0 - eps], &[eps]).unwrap();
        assert!(d.total < 1e-6, "{d:?}");
        assert!(g_loss(&[1.0 - eps]).unwrap().total < 1e-6);
        // the boundary itself is clamped, not infinite
        let d = d_loss(&[0.0], &[1.0]).unwrap();
        assert!((d.total - 2.0 * -PROB_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn mixed_batch_against_per_sample_sum() {
        let real = [0.9, 0.3, 0.6];
        let fake = [0.2, 0.7, 0.45];
        let mut want_r = 0.0;
        let mut want_f = 0.0;
        for i in 0..3 {
            want_r += -f64::ln(real[i]);
            want_f += -f64::ln(1.0 - fake[i]);
        }
        let d = d_loss(&real, &fake).unwrap();
        assert!((d.real_term - want_r / 3.0).abs() < 1e-12);
        assert!((d.fake_term - want_f / 3.0).abs() < 1e-12);
        assert_eq!(d.total, d.real_term + d.fake_term);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(d_loss(&[1.2], &[0.5]).is_err());
        assert!(d_loss(&[0.5], &[f64::NAN]).is_err());
        assert!(g_loss(&[-0.1]).is_err());
        assert!(g_loss(&[]).is_err());
    }

    #[test]
    fn tape_losses_match_values() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::new(vec![3], vec![0.9, 0.3, 0.6]).unwrap(), true);
        let f = tape.leaf(Tensor::new(vec![3], vec![0.2, 0.7, 0.45]).unwrap(), true);
        let (l, v) = d_loss_tape(&mut tape, r, f).unwrap();
        assert!((tape.value(l).data()[0] - v.total).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        // dL/dr_i = −1/(N r_i), dL/df_i = 1/(N (1 − f_i))
        let gr = g.wrt(r).unwrap();
        let gf = g.wrt(f).unwrap();
        assert!((gr[0] + 1.0 / (3.0 * 0.9)).abs() < 1e-12);
        assert!((gf[1] - 1.0 / (3.0 * 0.3)).abs() < 1e-12);
        let (lg, vg) = g_loss_tape(&mut tape, f).unwrap();
        assert!((tape.value(lg).data()[0] - vg.total).abs() < 1e-12);
    }
}
