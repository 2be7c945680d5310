//! Scalar training mathematics: the loss kernels of a two-stage detector,
//! their analytic gradients, and the Adam optimizer.
//!
//! Everything operates on plain `f64` slices so the kernels can be checked
//! against finite differences and hand-computed values without pulling in a
//! tensor library.

use serde::Serialize;

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking
/// logarithms so losses stay finite at the endpoints.
pub const PROB_EPS: f64 = 1e-12;

/// Rectified linear unit.
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn check_prob(p: f64) -> Result<f64> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Binary cross-entropy `-(p* ln p + (1 - p*) ln(1 - p))` for a single
/// predicted objectness probability `p` against the binary label `positive`.
pub fn bce_loss(p: f64, positive: bool) -> Result<f64> {
    let p = check_prob(p)?;
    Ok(if positive { -p.ln() } else { -(1.0 - p).ln() })
}

/// Derivative of [`bce_loss`] with respect to `p` (evaluated at the clamped
/// probability).
pub fn bce_grad(p: f64, positive: bool) -> Result<f64> {
    let p = check_prob(p)?;
    Ok(if positive { -1.0 / p } else { 1.0 / (1.0 - p) })
}

/// Huber-style smooth L1 penalty for a single residual:
/// `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise.  The two branches meet
/// with matching value and slope at `|d| = 1`.
pub fn smooth_l1_scalar(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1_scalar`].
pub fn smooth_l1_scalar_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Smooth L1 loss summed over the components of `prediction - target`.
/// The slices must have equal length.
pub fn smooth_l1(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "smooth L1 operands differ in length: {} vs {}",
            prediction.len(),
            target.len()
        )));
    }
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_scalar(p - t))
        .sum())
}

/// Gradient of [`smooth_l1`] with respect to `prediction`.
pub fn smooth_l1_grad(prediction: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if prediction.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "smooth L1 operands differ in length: {} vs {}",
            prediction.len(),
            target.len()
        )));
    }
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_scalar_grad(p - t))
        .collect())
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_logits(logits: &[f64], true_class: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax cross-entropy needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if true_class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "true class index {true_class} out of range for {} logits",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::InvalidArgument(format!("logit is not finite: {bad}")));
    }
    Ok(())
}

/// Softmax cross-entropy `-ln softmax(logits)[true_class]`, computed with
/// max-subtraction so large logits do not overflow:
/// `logsumexp(z) - z_u`.
pub fn softmax_ce(logits: &[f64], true_class: usize) -> Result<f64> {
    check_logits(logits, true_class)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[true_class])
}

/// Gradient of [`softmax_ce`] with respect to the logits:
/// `softmax(z) - onehot(true_class)`.
pub fn softmax_ce_grad(logits: &[f64], true_class: usize) -> Result<Vec<f64>> {
    check_logits(logits, true_class)?;
    let mut g = softmax(logits);
    g[true_class] -= 1.0;
    Ok(g)
}

/// Second-stage detection loss: classification cross-entropy plus, for
/// non-background rois (`true_class >= 1`), `lambda` times the smooth L1
/// distance between the predicted and target box deltas.  Class `0` is
/// background and contributes no localisation term.
pub fn fastrcnn_loss(
    logits: &[f64],
    true_class: usize,
    predicted_deltas: &[f64],
    target_deltas: &[f64],
    lambda: f64,
) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "localisation weight must be finite and non-negative, got {lambda}"
        )));
    }
    let cls = softmax_ce(logits, true_class)?;
    if true_class >= 1 {
        Ok(cls + lambda * smooth_l1(predicted_deltas, target_deltas)?)
    } else {
        Ok(cls)
    }
}

/// The four partial losses of the detector with their mixing weights and the
/// resulting weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub rpn_objectness: f64,
    pub rpn_localisation: f64,
    pub classifier_classification: f64,
    pub classifier_localisation: f64,
    pub weights: [f64; 4],
    pub total: f64,
}

/// Combines the four partial losses into a single training objective.
/// All parts must be finite and non-negative; weights must be finite and
/// non-negative.  Unit weights reproduce the plain sum.
pub fn combine_losses(parts: [f64; 4], weights: [f64; 4]) -> Result<LossBreakdown> {
    let names = [
        "rpn objectness",
        "rpn localisation",
        "classifier classification",
        "classifier localisation",
    ];
    for (name, v) in names.iter().zip(parts) {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{name} loss must be finite and non-negative, got {v}"
            )));
        }
    }
    for (name, w) in names.iter().zip(weights) {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{name} weight must be finite and non-negative, got {w}"
            )));
        }
    }
    let total = parts.iter().zip(weights).map(|(p, w)| p * w).sum();
    Ok(LossBreakdown {
        rpn_objectness: parts[0],
        rpn_localisation: parts[1],
        classifier_classification: parts[2],
        classifier_localisation: parts[3],
        weights,
        total,
    })
}

/// Adam optimizer state over a flat parameter vector.
///
/// Per step, with gradient `g`:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// step = -lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// The epsilon sits outside the square root of the bias-corrected second
/// moment.  Defaults: `b1 = 0.9`, `b2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Fresh state for `dim` parameters with default moment decay rates.
    pub fn new(dim: usize, lr: f64) -> Result<AdamState> {
        AdamState::with_hyperparams(dim, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        dim: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<AdamState> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Biased first-moment estimate.
    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    /// Biased second-moment estimate; componentwise non-negative by
    /// construction.
    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Advances the state by one step and returns the parameter update
    /// (the *delta* to add to the parameters, already negated).
    pub fn step(&mut self, grads: &[f64]) -> Result<Vec<f64>> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient length {} does not match state dimension {}",
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!("gradient is not finite: {bad}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut delta = Vec::with_capacity(grads.len());
        for (i, &g) in grads.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            delta.push(-self.lr * m_hat / (v_hat.sqrt() + self.epsilon));
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
    }

    #[test]
    fn bce_known_values() {
        // Confident correct prediction: loss vanishes (up to the clamp).
        assert!(bce_loss(1.0, true).unwrap() < 1e-11);
        assert!(bce_loss(0.0, false).unwrap() < 1e-11);
        // p = 0.5 either way: ln 2.
        assert!((bce_loss(0.5, true).unwrap() - (2.0f64).ln()).abs() < 1e-12);
        assert!((bce_loss(0.5, false).unwrap() - (2.0f64).ln()).abs() < 1e-12);
        // Confidently wrong: -ln(0.1) ~ 2.302585.
        assert!((bce_loss(0.1, true).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        // Loss stays finite even at the exact endpoints.
        assert!(bce_loss(0.0, true).unwrap().is_finite());
        assert!(bce_loss(1.0, false).unwrap().is_finite());
        assert!(bce_loss(1.5, true).is_err());
        assert!(bce_loss(f64::NAN, true).is_err());
    }

    #[test]
    fn bce_grad_matches_finite_difference() {
        let h = 1e-6;
        for &p in &[0.2, 0.5, 0.9] {
            for &positive in &[true, false] {
                let g = bce_grad(p, positive).unwrap();
                let num = (bce_loss(p + h, positive).unwrap() - bce_loss(p - h, positive).unwrap())
                    / (2.0 * h);
                assert!(
                    (g - num).abs() / num.abs().max(1.0) < 1e-5,
                    "p={p} positive={positive}: analytic {g} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1_scalar(0.0), 0.0);
        assert!((smooth_l1_scalar(0.5) - 0.125).abs() < 1e-12);
        assert!((smooth_l1_scalar(-0.5) - 0.125).abs() < 1e-12);
        assert!((smooth_l1_scalar(2.0) - 1.5).abs() < 1e-12);
        assert!((smooth_l1_scalar(-2.0) - 1.5).abs() < 1e-12);
        // Branch boundary: both formulas give 0.5.
        assert!((smooth_l1_scalar(1.0) - 0.5).abs() < 1e-12);
        assert!((smooth_l1_scalar(-1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_vector_and_grad() {
        let pred = [1.0, 2.0, 3.0, 4.0];
        let tgt = [1.5, 2.0, 1.0, 4.0];
        // Residuals: -0.5, 0, 2, 0 -> 0.125 + 0 + 1.5 + 0.
        assert!((smooth_l1(&pred, &tgt).unwrap() - 1.625).abs() < 1e-12);
        let g = smooth_l1_grad(&pred, &tgt).unwrap();
        assert_eq!(g, vec![-0.5, 0.0, 1.0, 0.0]);
        assert!(smooth_l1(&pred, &tgt[..3]).is_err());
    }

    #[test]
    fn smooth_l1_grad_matches_finite_difference() {
        let pred = [0.3, -0.7, 1.4, -2.2];
        let tgt = [0.0, 0.0, 0.0, 0.0];
        let g = smooth_l1_grad(&pred, &tgt).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut plus = pred;
            let mut minus = pred;
            plus[i] += h;
            minus[i] -= h;
            let num =
                (smooth_l1(&plus, &tgt).unwrap() - smooth_l1(&minus, &tgt).unwrap()) / (2.0 * h);
            assert!((g[i] - num).abs() < 1e-5, "component {i}: {} vs {num}", g[i]);
        }
    }

    #[test]
    fn softmax_ce_known_values() {
        // Uniform logits over 6 classes: ln 6.
        let uniform = [0.0; 6];
        assert!((softmax_ce(&uniform, 3).unwrap() - (6.0f64).ln()).abs() < 1e-12);
        // Two classes, logits (1, 0), true class 0: ln(1 + e^-1) ~ 0.313262.
        assert!((softmax_ce(&[1.0, 0.0], 0).unwrap() - 0.3132616875182228).abs() < 1e-12);
        // Heavily peaked on the true class: loss ~ 0.
        assert!(softmax_ce(&[100.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        // Stability: huge logits must not overflow to NaN/inf.
        let big = [1000.0, 999.0, 998.0];
        assert!(softmax_ce(&big, 0).unwrap().is_finite());
        assert!(softmax_ce(&[0.0], 0).is_err());
        assert!(softmax_ce(&uniform, 6).is_err());
        assert!(softmax_ce(&[f64::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn softmax_ce_shift_invariant() {
        let logits = [0.3, -1.2, 2.4, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|z| z + 123.456).collect();
        for u in 0..logits.len() {
            let a = softmax_ce(&logits, u).unwrap();
            let b = softmax_ce(&shifted, u).unwrap();
            assert!((a - b).abs() < 1e-9, "class {u}: {a} vs {b}");
        }
    }

    #[test]
    fn softmax_ce_grad_matches_finite_difference() {
        let logits = [0.5, -0.25, 1.75, 0.0];
        let u = 2;
        let g = softmax_ce_grad(&logits, u).unwrap();
        // Gradient components sum to zero: softmax sums to 1, one-hot to 1.
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits;
            let mut minus = logits;
            plus[i] += h;
            minus[i] -= h;
            let num = (softmax_ce(&plus, u).unwrap() - softmax_ce(&minus, u).unwrap()) / (2.0 * h);
            assert!((g[i] - num).abs() < 1e-5, "component {i}: {} vs {num}", g[i]);
        }
    }

    #[test]
    fn fastrcnn_loss_gates_localisation_on_class() {
        let logits = [0.0, 1.0, 0.0];
        let pred = [0.5, 0.0, 0.0, 0.0];
        let tgt = [0.0, 0.0, 0.0, 0.0];
        let cls_only = softmax_ce(&logits, 0).unwrap();
        // Background roi: localisation ignored entirely.
        assert!((fastrcnn_loss(&logits, 0, &pred, &tgt, 1.0).unwrap() - cls_only).abs() < 1e-12);
        // Foreground roi: classification + lambda * smooth L1.
        let fg = fastrcnn_loss(&logits, 1, &pred, &tgt, 1.0).unwrap();
        let expected = softmax_ce(&logits, 1).unwrap() + 0.125;
        assert!((fg - expected).abs() < 1e-12);
        // Lambda scales only the localisation term.
        let fg2 = fastrcnn_loss(&logits, 1, &pred, &tgt, 2.0).unwrap();
        assert!((fg2 - (softmax_ce(&logits, 1).unwrap() + 0.25)).abs() < 1e-12);
        assert!(fastrcnn_loss(&logits, 1, &pred, &tgt, -1.0).is_err());
    }

    #[test]
    fn combine_losses_weighted_sum() {
        // Converged detector losses: the four parts and their plain sum.
        let parts = [0.0593, 0.0598, 0.2015, 0.0564];
        let combined = combine_losses(parts, [1.0; 4]).unwrap();
        assert!((combined.total - 0.3770).abs() < 5e-5);
        // Doubling one weight adds exactly that part once more.
        let reweighted = combine_losses(parts, [1.0, 2.0, 1.0, 1.0]).unwrap();
        assert!((reweighted.total - (combined.total + parts[1])).abs() < 1e-12);
        // Zero weights zero out the sum.
        assert_eq!(combine_losses(parts, [0.0; 4]).unwrap().total, 0.0);
        assert!(combine_losses([0.1, -0.1, 0.0, 0.0], [1.0; 4]).is_err());
        assert!(combine_losses(parts, [1.0, f64::NAN, 1.0, 1.0]).is_err());
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With bias correction the very first step is -lr * sign(g),
        // up to the epsilon in the denominator.
        let mut adam = AdamState::new(3, 0.01).unwrap();
        let delta = adam.step(&[0.5, -3.0, 1e-4]).unwrap();
        for (d, g) in delta.iter().zip([0.5f64, -3.0, 1e-4]) {
            assert!(
                (d.abs() - 0.01).abs() < 1e-6,
                "step magnitude should be ~lr, got {d} for gradient {g}"
            );
            assert_eq!(d.signum(), -g.signum());
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_state_still() {
        let mut adam = AdamState::new(2, 0.1).unwrap();
        let delta = adam.step(&[0.0, 0.0]).unwrap();
        assert_eq!(delta, vec![0.0, 0.0]);
        assert_eq!(adam.first_moment(), &[0.0, 0.0]);
        assert_eq!(adam.second_moment(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_second_moment_stays_nonnegative() {
        let mut adam = AdamState::new(1, 0.05).unwrap();
        for g in [-4.0, 3.0, -2.0, 0.0, 7.5] {
            adam.step(&[g]).unwrap();
            assert!(adam.second_moment()[0] >= 0.0);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(theta) = theta^2, gradient 2 theta, from theta = 1 with lr 0.1:
        // |theta| must drop below 1e-3 within 200 steps.
        let mut adam = AdamState::new(1, 0.1).unwrap();
        let mut theta = 1.0f64;
        let mut converged_at = None;
        for step in 1..=200 {
            let delta = adam.step(&[2.0 * theta]).unwrap();
            theta += delta[0];
            if theta.abs() < 1e-3 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(
            converged_at.is_some(),
            "did not reach |theta| < 1e-3 within 200 steps; final theta = {theta}"
        );
    }

    #[test]
    fn adam_rejects_bad_input() {
        assert!(AdamState::new(1, 0.0).is_err());
        assert!(AdamState::with_hyperparams(1, 0.1, 1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::with_hyperparams(1, 0.1, 0.9, -0.1, 1e-8).is_err());
        assert!(AdamState::with_hyperparams(1, 0.1, 0.9, 0.999, 0.0).is_err());
        let mut adam = AdamState::new(2, 0.1).unwrap();
        assert!(adam.step(&[1.0]).is_err());
        assert!(adam.step(&[1.0, f64::INFINITY]).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
