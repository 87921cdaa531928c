//! Closed-form bound evaluators.
//!
//! Every analytic quantity the verification layer checks against simulation
//! lives here as a pure function of its parameters:
//!
//! * class-mass concentration: `eps_{B,delta} = sqrt(log(T B / delta) / (2B))`
//!   and the union-bound failure probability `T B exp(-2 B eps^2)`;
//! * the reweighting magnitude `Delta = 2 e^{2/tau} (1/C + eps) / (1 - 1/C - eps)`,
//!   defined only while `eps < 1 - 1/C`;
//! * gradient geometry: per-anchor norm `sqrt(2)/tau`, batch norm
//!   `(1/tau) sqrt(2/B)`, softmax-Jacobian operator norm `1/2`, and the batch
//!   gradient map's Lipschitz constant `1/(2 tau^2 B)`;
//! * drift propagation: the per-step gap `Delta/(tau sqrt(B)) + D/(2 tau^2 B)`,
//!   the linear recurrence it induces, and the terminal envelope
//!   `exp(S/(2 tau^2 B)) * (S/(tau sqrt(B))) * Delta` with `S = sum_t eta_t`;
//! * terminal metric floors `(1 - x)/(1 + x)` for CKA and RSA;
//! * parameter-space drift `(G/(beta tau)) * Delta * (e^{beta S} - 1)` and the
//!   surrogate-fidelity envelope for encoder trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── concentration ─────────────────────────────────────────────────────────

/// The class-mass concentration radius, with a flag for the degenerate
/// regime `T B <= delta` where the union bound is vacuous and the radius
/// collapses to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBound {
    pub value: f64,
    pub degenerate: bool,
}

/// `eps = sqrt(log(T B / delta) / (2 B))`: the radius such that, with
/// probability at least `1 - delta`, every anchor in every one of `T` batches
/// has per-class key masses within `eps` of their expectations.
pub fn class_mass_epsilon(batch_size: usize, steps: usize, delta: f64) -> Result<EpsilonBound> {
    if batch_size == 0 || steps == 0 {
        return Err(Error::invalid("batch size and step count must be positive"));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!(
            "failure probability must be positive (got {delta})"
        )));
    }
    let ratio = steps as f64 * batch_size as f64 / delta;
    if ratio <= 1.0 {
        return Ok(EpsilonBound {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(EpsilonBound {
        value: (ratio.ln() / (2.0 * batch_size as f64)).sqrt(),
        degenerate: false,
    })
}

/// Union-bound probability that some anchor's class masses escape the
/// `eps`-radius across `T` batches of `B` anchors: `min(1, T B e^{-2 B eps^2})`.
pub fn composition_failure_prob(batch_size: usize, steps: usize, eps: f64) -> f64 {
    let raw = steps as f64 * batch_size as f64 * (-2.0 * batch_size as f64 * eps * eps).exp();
    raw.min(1.0)
}

// ── reweighting magnitude ─────────────────────────────────────────────────

/// `Delta = 2 e^{2/tau} (1/C + eps) / (1 - 1/C - eps)`, the on-event bound on
/// the l1 gap between the full and negatives-only softmax weights. Requires
/// `eps < 1 - 1/C`; otherwise the denominator is non-positive and the bound
/// does not exist.
pub fn reweighting_delta_from_eps(classes: usize, eps: f64, tau: f64) -> Result<f64> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive (got {tau})"
        )));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!(
            "concentration radius must be non-negative (got {eps})"
        )));
    }
    let inv_c = 1.0 / classes as f64;
    let denom = 1.0 - inv_c - eps;
    if denom <= 0.0 {
        return Err(Error::DenominatorNonpositive {
            eps,
            limit: 1.0 - inv_c,
        });
    }
    Ok(2.0 * (2.0 / tau).exp() * (inv_c + eps) / denom)
}

/// Composition of [`class_mass_epsilon`] and [`reweighting_delta_from_eps`].
pub fn reweighting_delta(
    classes: usize,
    batch_size: usize,
    steps: usize,
    delta: f64,
    tau: f64,
) -> Result<f64> {
    let eps = class_mass_epsilon(batch_size, steps, delta)?;
    reweighting_delta_from_eps(classes, eps.value, tau)
}

// ── gradient geometry ─────────────────────────────────────────────────────

/// `sqrt(2)/tau`: bound on a single anchor's gradient norm (either loss).
pub fn anchor_grad_norm_bound(tau: f64) -> f64 {
    std::f64::consts::SQRT_2 / tau
}

/// `(1/tau) sqrt(2/B)`: bound on the batch gradient's Frobenius norm.
pub fn batch_grad_norm_bound(tau: f64, batch_size: usize) -> f64 {
    (2.0 / batch_size as f64).sqrt() / tau
}

/// Operator-norm bound on the softmax Jacobian `Diag(p) - p p^T`.
pub fn softmax_jacobian_norm_bound() -> f64 {
    0.5
}

/// `1/(2 tau^2 B)`: Lipschitz constant of the batch gradient map in the
/// anchors' logit coordinates.
pub fn batch_grad_lipschitz(tau: f64, batch_size: usize) -> f64 {
    1.0 / (2.0 * tau * tau * batch_size as f64)
}

/// `(n e^{-1/tau}, n e^{1/tau})`: range of a partition sum over `n` keys with
/// cosine logits.
pub fn partition_sum_range(n_keys: usize, tau: f64) -> (f64, f64) {
    let n = n_keys as f64;
    (n * (-1.0 / tau).exp(), n * (1.0 / tau).exp())
}

// ── drift propagation ─────────────────────────────────────────────────────

/// On-event bound on the gap between the two batch updates when the
/// trajectories sit `d` apart: `Delta/(tau sqrt(B)) + d/(2 tau^2 B)`.
pub fn per_step_gap_bound(tau: f64, batch_size: usize, delta_val: f64, d: f64) -> f64 {
    delta_val / (tau * (batch_size as f64).sqrt()) + batch_grad_lipschitz(tau, batch_size) * d
}

/// One application of the drift recurrence:
/// `d' <= (1 + eta/(2 tau^2 B)) d + eta Delta / (tau sqrt(B))`.
pub fn drift_recurrence_step(d: f64, eta: f64, tau: f64, batch_size: usize, delta_val: f64) -> f64 {
    (1.0 + eta * batch_grad_lipschitz(tau, batch_size)) * d
        + eta * delta_val / (tau * (batch_size as f64).sqrt())
}

/// Closed-form terminal envelope of the recurrence:
/// `exp(S/(2 tau^2 B)) * (S/(tau sqrt(B))) * Delta`, `S = sum_t eta_t`.
pub fn terminal_drift_bound(tau: f64, batch_size: usize, sum_eta: f64, delta_val: f64) -> f64 {
    (sum_eta * batch_grad_lipschitz(tau, batch_size)).exp()
        * (sum_eta / (tau * (batch_size as f64).sqrt()))
        * delta_val
}

// ── terminal metric floors ────────────────────────────────────────────────

/// `(1 - rho) / (1 + rho)`: lower bound on terminal linear CKA between the
/// two trajectories' centered similarity structures, where `rho` is the
/// relative Frobenius perturbation. Negative (vacuous) when `rho > 1`.
pub fn cka_floor(rho: f64) -> f64 {
    (1.0 - rho) / (1.0 + rho)
}

/// `(1 - r) / (1 + r)`: lower bound on the terminal RSA correlation, where
/// `r` is the distance-vector perturbation in units of the reference
/// distance spread. Negative (vacuous) when `r > 1`.
pub fn rsa_floor(r: f64) -> f64 {
    (1.0 - r) / (1.0 + r)
}

// ── parameter space ───────────────────────────────────────────────────────

/// Terminal weight-space drift of two encoders trained with shared
/// randomness: `(G/(beta tau)) * Delta * (e^{beta S} - 1)` with `S = sum eta`,
/// `G` a bound on per-pair similarity gradients, `beta` the expansion rate.
/// Continuous in `beta` at zero, where the value is `(G/tau) Delta S`.
pub fn param_drift_bound(g: f64, beta: f64, tau: f64, sum_eta: f64, delta_val: f64) -> f64 {
    let x = beta * sum_eta;
    let factor = if x.abs() < 1e-12 {
        sum_eta
    } else {
        x.exp_m1() / beta
    };
    (g / tau) * delta_val * factor
}

/// Envelope on the gap between an encoder's similarity trajectory and the
/// projected surrogate dynamic started at the same state:
/// `exp(S/(2 tau^2 B)) * [ sqrt(2) (L^2 + 1) / (tau sqrt(B)) * S + (M/2) * S_2 * Xi ]`
/// with `S = sum eta`, `S_2 = sum eta^2`, `L` a Lipschitz bound on the
/// similarity map, `M` a curvature bound, and `Xi` a bound on the squared
/// gradient norms driving the second-order term.
pub fn fidelity_bound(
    tau: f64,
    batch_size: usize,
    sum_eta: f64,
    sum_eta_sq: f64,
    lip_sigma: f64,
    m_sigma: f64,
    xi: f64,
) -> f64 {
    let c_sigma = lip_sigma * lip_sigma + 1.0;
    let first = std::f64::consts::SQRT_2 * c_sigma / (tau * (batch_size as f64).sqrt()) * sum_eta;
    let second = 0.5 * m_sigma * sum_eta_sq * xi;
    (sum_eta * batch_grad_lipschitz(tau, batch_size)).exp() * (first + second)
}

// ── aggregated report ─────────────────────────────────────────────────────

/// Inputs for a full bound evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub classes: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub delta: f64,
    pub tau: f64,
    /// Needed for the terminal drift envelope.
    #[serde(default)]
    pub sum_eta: Option<f64>,
}

/// Every closed-form quantity evaluated at one parameter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub epsilon: f64,
    pub epsilon_degenerate: bool,
    pub composition_failure_prob: f64,
    /// `None` when `eps >= 1 - 1/C`; `precondition_gap` stays informative.
    pub reweighting_delta: Option<f64>,
    /// `1 - 1/C - eps`: positive iff the reweighting bound exists.
    pub precondition_gap: f64,
    pub anchor_grad_norm: f64,
    pub batch_grad_norm: f64,
    pub lipschitz: f64,
    /// Present when both `sum_eta` and the reweighting bound exist.
    pub terminal_drift: Option<f64>,
}

/// Evaluate every bound at one parameter point. A failed reweighting
/// precondition is reported in-band (`reweighting_delta: None`), not as an
/// error: the point is still a legitimate query.
pub fn evaluate_bounds(inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !(inputs.tau > 0.0) || !inputs.tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive (got {})",
            inputs.tau
        )));
    }
    let eps = class_mass_epsilon(inputs.batch_size, inputs.steps, inputs.delta)?;
    let delta_val = match reweighting_delta_from_eps(inputs.classes, eps.value, inputs.tau) {
        Ok(v) => Some(v),
        Err(Error::DenominatorNonpositive { .. }) => None,
        Err(e) => return Err(e),
    };
    let terminal = match (delta_val, inputs.sum_eta) {
        (Some(dv), Some(s)) => Some(terminal_drift_bound(inputs.tau, inputs.batch_size, s, dv)),
        _ => None,
    };
    Ok(BoundReport {
        inputs: inputs.clone(),
        epsilon: eps.value,
        epsilon_degenerate: eps.degenerate,
        composition_failure_prob: composition_failure_prob(
            inputs.batch_size,
            inputs.steps,
            eps.value,
        ),
        reweighting_delta: delta_val,
        precondition_gap: 1.0 - 1.0 / inputs.classes as f64 - eps.value,
        anchor_grad_norm: anchor_grad_norm_bound(inputs.tau),
        batch_grad_norm: batch_grad_norm_bound(inputs.tau, inputs.batch_size),
        lipschitz: batch_grad_lipschitz(inputs.tau, inputs.batch_size),
        terminal_drift: terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn epsilon_matches_closed_form() {
        let e = class_mass_epsilon(512, 100, 0.01).unwrap();
        assert!(!e.degenerate);
        assert_abs_diff_eq!(e.value, 0.122_827_468_064_550_35, epsilon = 1e-15);
        let e = class_mass_epsilon(128, 100, 0.1).unwrap();
        assert_abs_diff_eq!(e.value, 0.214_328_398_204_624_25, epsilon = 1e-15);
    }

    #[test]
    fn epsilon_degenerates_gracefully() {
        // T B <= delta makes the union bound vacuous: radius 0, flagged
        let e = class_mass_epsilon(1, 1, 2.0).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.value, 0.0);
        assert!(class_mass_epsilon(0, 1, 0.1).is_err());
        assert!(class_mass_epsilon(8, 0, 0.1).is_err());
        assert!(class_mass_epsilon(8, 1, 0.0).is_err());
        assert!(class_mass_epsilon(8, 1, -0.5).is_err());
    }

    /// Plugging the derived radius back into the tail gives back delta
    /// exactly: `T B exp(-2 B eps^2) = delta` by construction.
    #[test]
    fn composition_probability_inverts_epsilon() {
        for &(b, t, d) in &[
            (128usize, 100usize, 0.1),
            (512, 100, 0.01),
            (32, 1000, 0.05),
        ] {
            let eps = class_mass_epsilon(b, t, d).unwrap();
            let p = composition_failure_prob(b, t, eps.value);
            assert_abs_diff_eq!(p, d, epsilon = 1e-12);
        }
        assert_eq!(composition_failure_prob(4, 1000, 0.0), 1.0);
    }

    #[test]
    fn reweighting_delta_matches_closed_form() {
        let d = reweighting_delta(10, 128, 100, 0.1, 0.5).unwrap();
        assert_abs_diff_eq!(d, 50.058_217_373_790_386, epsilon = 1e-10);
    }

    #[test]
    fn reweighting_delta_scales_like_two_e_to_the_two_over_tau() {
        // as C grows with eps = 0 the bound tends to 2 e^{2/tau} / C
        let d = reweighting_delta_from_eps(1_000_000_000, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(d, 1.477_811_2e-8, epsilon = 1e-14);
        let d2 = reweighting_delta_from_eps(1_000_000_000, 0.0, 2.0).unwrap();
        assert_abs_diff_eq!(d2 * 1e9, 5.436_563_656_918_09, epsilon = 1e-7);
    }

    #[test]
    fn reweighting_delta_requires_headroom() {
        // eps ~ 0.997 over two classes: 1 - 1/C - eps < 0
        match reweighting_delta(2, 8, 1000, 0.001, 0.5) {
            Err(Error::DenominatorNonpositive { eps, limit }) => {
                assert!(eps > limit);
                assert_abs_diff_eq!(limit, 0.5, epsilon = 1e-12);
            }
            other => panic!("expected DenominatorNonpositive, got {other:?}"),
        }
        assert!(reweighting_delta_from_eps(1, 0.0, 1.0).is_err());
        assert!(reweighting_delta_from_eps(4, -0.1, 1.0).is_err());
        assert!(reweighting_delta_from_eps(4, 0.0, 0.0).is_err());
    }

    #[test]
    fn terminal_drift_matches_frozen_composition() {
        let dv = reweighting_delta(10, 128, 100, 0.1, 0.5).unwrap();
        let bound = terminal_drift_bound(0.5, 128, 10.0, dv);
        assert_abs_diff_eq!(bound, 103.456_767_194_086_32, epsilon = 1e-9);
        // factor check
        assert_abs_diff_eq!(
            (10.0 * batch_grad_lipschitz(0.5, 128)).exp(),
            1.169_118_446_169_504_4,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            10.0 / (0.5 * 128f64.sqrt()),
            1.767_766_952_966_368_8,
            epsilon = 1e-14
        );
    }

    #[test]
    fn gradient_geometry_constants() {
        assert_abs_diff_eq!(
            anchor_grad_norm_bound(0.5),
            2.0 * 2f64.sqrt(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(batch_grad_norm_bound(0.5, 8), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(batch_grad_lipschitz(0.5, 128), 1.0 / 64.0, epsilon = 1e-15);
        assert_eq!(softmax_jacobian_norm_bound(), 0.5);
        let (lo, hi) = partition_sum_range(10, 0.5);
        assert_abs_diff_eq!(lo, 10.0 * (-2f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 10.0 * 2f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn recurrence_unrolls_below_terminal_envelope() {
        let (tau, b, dv) = (0.5, 64usize, 3.0);
        let etas = [0.1, 0.05, 0.2, 0.1, 0.15];
        let mut d = 0.0;
        for &eta in &etas {
            d = drift_recurrence_step(d, eta, tau, b, dv);
        }
        let s: f64 = etas.iter().sum();
        let envelope = terminal_drift_bound(tau, b, s, dv);
        assert!(d <= envelope + 1e-12, "unrolled {d} vs envelope {envelope}");
    }

    #[test]
    fn per_step_gap_decomposes() {
        let g = per_step_gap_bound(0.5, 64, 3.0, 0.0);
        assert_abs_diff_eq!(g, 3.0 / (0.5 * 8.0), epsilon = 1e-14);
        let g2 = per_step_gap_bound(0.5, 64, 3.0, 2.0);
        assert_abs_diff_eq!(g2 - g, 2.0 * batch_grad_lipschitz(0.5, 64), epsilon = 1e-14);
    }

    #[test]
    fn metric_floors() {
        assert_abs_diff_eq!(cka_floor(0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cka_floor(1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cka_floor(0.5), 1.0 / 3.0, epsilon = 1e-15);
        assert!(cka_floor(2.0) < 0.0, "vacuous floor goes negative");
        assert_abs_diff_eq!(rsa_floor(0.25), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn param_drift_is_continuous_at_beta_zero() {
        let at_zero = param_drift_bound(1.5, 0.0, 0.5, 4.0, 2.0);
        assert_abs_diff_eq!(at_zero, (1.5 / 0.5) * 2.0 * 4.0, epsilon = 1e-12);
        let near_zero = param_drift_bound(1.5, 1e-14, 0.5, 4.0, 2.0);
        assert_abs_diff_eq!(near_zero, at_zero, epsilon = 1e-8);
        // positive beta inflates: (G/(beta tau)) Delta (e^{beta S} - 1)
        let b = param_drift_bound(1.5, 0.25, 0.5, 4.0, 2.0);
        let expected = (1.5 / (0.25 * 0.5)) * 2.0 * (0.25f64 * 4.0).exp_m1();
        assert_abs_diff_eq!(b, expected, epsilon = 1e-12);
        assert!(b > at_zero);
    }

    #[test]
    fn fidelity_envelope_matches_hand_evaluation() {
        let (tau, b) = (0.5, 16usize);
        let (s, s2) = (0.8, 0.05);
        let (l, m, xi) = (1.2, 3.0, 2.5);
        let got = fidelity_bound(tau, b, s, s2, l, m, xi);
        let c = l * l + 1.0;
        let expected = (s / (2.0 * tau * tau * b as f64)).exp()
            * (2f64.sqrt() * c / (tau * (b as f64).sqrt()) * s + 0.5 * m * s2 * xi);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-13);
    }

    #[test]
    fn report_serializes_and_degrades_in_band() {
        let inputs = BoundInputs {
            classes: 10,
            batch_size: 128,
            steps: 100,
            delta: 0.1,
            tau: 0.5,
            sum_eta: Some(10.0),
        };
        let report = evaluate_bounds(&inputs).unwrap();
        assert!(report.reweighting_delta.is_some());
        assert!(report.terminal_drift.is_some());
        assert_abs_diff_eq!(
            report.terminal_drift.unwrap(),
            103.456_767_194_086_32,
            epsilon = 1e-9
        );
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: BoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);

        // precondition failure is in-band, not an error
        let tight = BoundInputs {
            classes: 2,
            batch_size: 8,
            steps: 1000,
            delta: 0.001,
            tau: 0.5,
            sum_eta: Some(1.0),
        };
        let report = evaluate_bounds(&tight).unwrap();
        assert!(report.reweighting_delta.is_none());
        assert!(report.terminal_drift.is_none());
        assert!(report.precondition_gap < 0.0);
    }
}
