//! Scaling-law evaluation for dense and Mixture-of-Experts language models.
//!
//! The MoE law predicts validation loss from the dense-equivalent parameter
//! count `N`, the training token count `D` and the expert count `E`:
//!
//! ```text
//! log L(N, D, E) = log(A / N^alpha + B / Ê^beta + C / D^gamma + F) + d · log N · log Ê
//! 1/Ê = 1 / (E - 1 + (1/E_start - 1/E_max)^-1) + 1/E_max
//! ```
//!
//! `Ê` saturates: it equals `E_start` for a single expert and approaches
//! `E_max` as `E` grows. All functions here are pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitted constants of the MoE scaling law.
///
/// Serialized as a flat JSON object using exactly these field names; unknown
/// keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingLawParams {
    /// Coefficient of `N^-alpha`.
    #[serde(rename = "coef_N")]
    pub coef_n: f64,
    /// Coefficient of `Ê^-beta`.
    #[serde(rename = "coef_E")]
    pub coef_e: f64,
    /// Coefficient of `D^-gamma`.
    #[serde(rename = "coef_D")]
    pub coef_d: f64,
    /// Irreducible loss floor.
    pub irreducible: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Coefficient of the `log N · log Ê` interaction.
    pub interaction: f64,
    pub e_start: f64,
    pub e_max: f64,
}

/// Upper end of the admissible exponent range.
pub const MAX_EXPONENT: f64 = 4.0;

impl ScalingLawParams {
    /// Checks the coefficient and saturation-anchor invariants.
    ///
    /// A negative `irreducible` is accepted here; evaluation fails instead if
    /// the loss bracket becomes non-positive at the queried point.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("coef_N", self.coef_n),
            ("coef_E", self.coef_e),
            ("coef_D", self.coef_d),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=MAX_EXPONENT).contains(&v) {
                return Err(Error::InvalidParams(format!(
                    "{name} must lie in [0, {MAX_EXPONENT}], got {v}"
                )));
            }
        }
        if !self.irreducible.is_finite() || !self.interaction.is_finite() {
            return Err(Error::InvalidParams("irreducible and interaction must be finite".into()));
        }
        self.validate_saturation()
    }

    fn validate_saturation(&self) -> Result<()> {
        if !(self.e_start >= 1.0 && self.e_max > self.e_start && self.e_max.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "saturation anchors must satisfy e_max > e_start >= 1, got e_start={}, e_max={}",
                self.e_start, self.e_max
            )));
        }
        Ok(())
    }

    /// Saturated expert count `Ê` for `experts` (real-valued, `>= 1`).
    pub fn effective_experts(&self, experts: f64) -> Result<f64> {
        check_experts(experts)?;
        self.validate_saturation()?;
        Ok(effective_experts_unchecked(experts, self.e_start, self.e_max))
    }

    /// The additive bracket `A/N^alpha + B/Ê^beta + C/D^gamma + F`.
    pub fn bracket(&self, n_dense: f64, d_tokens: f64, e_hat: f64) -> f64 {
        self.coef_n * n_dense.powf(-self.alpha)
            + self.coef_e * e_hat.powf(-self.beta)
            + self.coef_d * d_tokens.powf(-self.gamma)
            + self.irreducible
    }

    /// Natural log of the predicted loss.
    pub fn predict_log_loss(&self, n_dense: f64, d_tokens: f64, experts: f64) -> Result<f64> {
        check_size("N", n_dense)?;
        check_size("D", d_tokens)?;
        let e_hat = self.effective_experts(experts)?;
        let bracket = self.bracket(n_dense, d_tokens, e_hat);
        if !(bracket > 0.0) {
            return Err(Error::NonPositiveBracket {
                bracket,
                n_dense,
                d_tokens,
                experts,
            });
        }
        Ok(bracket.ln() + self.interaction * n_dense.ln() * e_hat.ln())
    }

    /// Predicted validation loss at `(N, D, E)`.
    pub fn predict_loss(&self, n_dense: f64, d_tokens: f64, experts: f64) -> Result<f64> {
        self.predict_log_loss(n_dense, d_tokens, experts).map(f64::exp)
    }
}

/// Saturation transform without argument checks.
///
/// Written in the rational form `e_max (xΔ + e_start e_max) / (xΔ + e_max²)`
/// with `x = E - 1`, `Δ = e_max - e_start`, which is algebraically identical to
/// the reciprocal form and exact at `E = 1`.
pub(crate) fn effective_experts_unchecked(experts: f64, e_start: f64, e_max: f64) -> f64 {
    let x = experts - 1.0;
    if x == 0.0 {
        return e_start;
    }
    let spread = e_max - e_start;
    let num = x * spread + e_start * e_max;
    let den = x * spread + e_max * e_max;
    e_max * num / den
}

/// Free-function form of [`ScalingLawParams::effective_experts`].
pub fn effective_experts(experts: f64, params: &ScalingLawParams) -> Result<f64> {
    params.effective_experts(experts)
}

/// Free-function form of [`ScalingLawParams::predict_loss`].
pub fn predict_loss(n_dense: f64, d_tokens: f64, experts: f64, params: &ScalingLawParams) -> Result<f64> {
    params.predict_loss(n_dense, d_tokens, experts)
}

fn check_size(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_experts(experts: f64) -> Result<()> {
    if experts >= 1.0 && experts.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("expert count must be >= 1, got {experts}")))
    }
}

/// Constants of the dense law `L0 + A/N^alpha + B/D^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLawParams {
    pub l0: f64,
    #[serde(rename = "coef_N")]
    pub coef_n: f64,
    /// Coefficient of `D^-beta`.
    #[serde(rename = "coef_D")]
    pub coef_d: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl DenseLawParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.coef_n > 0.0 && self.coef_d > 0.0) {
            return Err(Error::InvalidParams("dense coefficients must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidParams("dense exponents must be positive".into()));
        }
        if !(self.l0.is_finite() && self.coef_n.is_finite() && self.coef_d.is_finite()) {
            return Err(Error::InvalidParams("dense constants must be finite".into()));
        }
        Ok(())
    }

    pub fn predict_loss(&self, n_dense: f64, d_tokens: f64) -> Result<f64> {
        check_size("N", n_dense)?;
        check_size("D", d_tokens)?;
        let loss =
            self.l0 + self.coef_n * n_dense.powf(-self.alpha) + self.coef_d * d_tokens.powf(-self.beta);
        if !(loss > 0.0) {
            return Err(Error::NonPositiveBracket {
                bracket: loss,
                n_dense,
                d_tokens,
                experts: 1.0,
            });
        }
        Ok(loss)
    }

    /// The MoE-law constants that reproduce this dense law at `E = 1`.
    ///
    /// `coef_E` must stay positive, so the expert term becomes a negligible
    /// constant.
    pub fn as_moe(&self) -> ScalingLawParams {
        const TINY: f64 = 1e-30;
        ScalingLawParams {
            coef_n: self.coef_n,
            coef_e: TINY,
            coef_d: self.coef_d,
            irreducible: self.l0,
            alpha: self.alpha,
            beta: 0.0,
            gamma: self.beta,
            interaction: 0.0,
            e_start: 1.0,
            e_max: 64.0,
        }
    }
}

pub fn predict_loss_dense(n_dense: f64, d_tokens: f64, params: &DenseLawParams) -> Result<f64> {
    params.predict_loss(n_dense, d_tokens)
}

/// Parameter-count and FLOPs conventions of the MoE architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConvention {
    /// Fraction of dense parameters replicated per additional expert.
    pub ffn_fraction: f64,
    /// Experts activated per token.
    pub top_k: u32,
    /// Training FLOPs per activated parameter per token.
    pub flops_per_param_token: f64,
}

impl Default for ArchitectureConvention {
    /// Every other FFN layer is an MoE layer, FFNs hold 2/3 of the dense
    /// parameters, top-2 routing, and 6 FLOPs per parameter-token.
    fn default() -> Self {
        Self {
            ffn_fraction: 1.0 / 3.0,
            top_k: 2,
            flops_per_param_token: 6.0,
        }
    }
}

impl ArchitectureConvention {
    pub fn validate(&self) -> Result<()> {
        if !(self.ffn_fraction > 0.0 && self.ffn_fraction < 1.0) {
            return Err(Error::InvalidParams(format!(
                "ffn_fraction must lie in (0, 1), got {}",
                self.ffn_fraction
            )));
        }
        if self.top_k < 1 {
            return Err(Error::InvalidParams("top_k must be >= 1".into()));
        }
        if !(self.flops_per_param_token > 0.0) {
            return Err(Error::InvalidParams("flops_per_param_token must be positive".into()));
        }
        Ok(())
    }

    /// Stored parameters: `N · (1 + (E - 1) · c)`.
    pub fn total_params(&self, n_dense: f64, experts: f64) -> f64 {
        n_dense * (1.0 + (experts - 1.0) * self.ffn_fraction)
    }

    /// Parameters touched per token: `N · (1 + (min(K, E) - 1) · c)`.
    pub fn activated_params(&self, n_dense: f64, experts: f64) -> f64 {
        let active = experts.min(f64::from(self.top_k));
        n_dense * (1.0 + (active - 1.0) * self.ffn_fraction)
    }

    pub fn training_flops(&self, n_dense: f64, d_tokens: f64, experts: f64) -> f64 {
        self.flops_per_param_token * self.activated_params(n_dense, experts) * d_tokens
    }

    /// Token count that spends exactly `budget_flops` on a model of size `n_dense`.
    pub fn tokens_for_budget(&self, budget_flops: f64, n_dense: f64, experts: f64) -> f64 {
        budget_flops / (self.flops_per_param_token * self.activated_params(n_dense, experts))
    }
}

pub fn total_params(n_dense: f64, experts: f64, arch: &ArchitectureConvention) -> f64 {
    arch.total_params(n_dense, experts)
}

pub fn activated_params(n_dense: f64, experts: f64, arch: &ArchitectureConvention) -> f64 {
    arch.activated_params(n_dense, experts)
}

pub fn training_flops(n_dense: f64, d_tokens: f64, experts: f64, arch: &ArchitectureConvention) -> f64 {
    arch.training_flops(n_dense, d_tokens, experts)
}

/// Learning-rate heuristic `0.003239 - 0.0001395 · ln N`.
pub fn suggested_learning_rate(n_params: f64) -> f64 {
    0.003239 - 0.0001395 * n_params.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn sample_params() -> ScalingLawParams {
        ScalingLawParams {
            coef_n: 480.0,
            coef_e: 0.15,
            coef_d: 1500.0,
            irreducible: 1.5,
            alpha: 0.34,
            beta: 0.6,
            gamma: 0.32,
            interaction: -0.003,
            e_start: 1.5,
            e_max: 64.0,
        }
    }

    fn anchors(e_start: f64, e_max: f64) -> ScalingLawParams {
        ScalingLawParams {
            e_start,
            e_max,
            ..sample_params()
        }
    }

    /// Reciprocal form, used as an independent check of the rational form.
    fn e_hat_reciprocal(e: f64, e_start: f64, e_max: f64) -> f64 {
        let k = 1.0 / (1.0 / e_start - 1.0 / e_max);
        1.0 / (1.0 / (e - 1.0 + k) + 1.0 / e_max)
    }

    #[test]
    fn single_expert_is_e_start() {
        for (s, m) in [(1.5, 64.0), (1.0, 2.0), (3.7, 11.0), (1.0000001, 1e6)] {
            assert_eq!(anchors(s, m).effective_experts(1.0).unwrap(), s);
        }
    }

    #[test]
    fn saturates_at_e_max() {
        let e = anchors(1.5, 64.0).effective_experts(1e9).unwrap();
        assert!((e - 64.0).abs() < 1e-5 * 64.0);
        assert!(e < 64.0);
    }

    #[test]
    fn eight_experts_hand_value() {
        let e = anchors(1.0, 64.0).effective_experts(8.0).unwrap();
        assert_relative_eq!(e, 32320.0 / 4537.0, max_relative = 1e-14);
    }

    #[test]
    fn rational_form_matches_reciprocal_form() {
        for e in [1.5, 2.0, 4.0, 17.0, 1e3, 1e6] {
            let p = anchors(1.5, 64.0);
            assert_relative_eq!(
                p.effective_experts(e).unwrap(),
                e_hat_reciprocal(e, 1.5, 64.0),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn rejects_bad_experts_and_anchors() {
        let p = sample_params();
        assert!(matches!(p.effective_experts(0.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(anchors(2.0, 2.0).effective_experts(4.0), Err(Error::InvalidParams(_))));
        assert!(matches!(anchors(0.5, 2.0).effective_experts(4.0), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn floor_only_degenerate_case() {
        let p = ScalingLawParams {
            coef_n: 1e-30,
            coef_e: 1e-30,
            coef_d: 1e-30,
            irreducible: 2.0,
            interaction: 0.0,
            ..sample_params()
        };
        for (n, d, e) in [(1e6, 1e9, 1.0), (1e9, 1e12, 32.0), (10.0, 10.0, 4.0)] {
            assert_relative_eq!(p.predict_loss(n, d, e).unwrap(), 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn additive_bracket_hand_value() {
        let p = ScalingLawParams {
            coef_n: 1.0,
            coef_e: 1e-30,
            coef_d: 1.0,
            irreducible: 0.0,
            alpha: 1.0,
            gamma: 1.0,
            interaction: 0.0,
            ..sample_params()
        };
        assert_relative_eq!(p.predict_loss(10.0, 10.0, 4.0).unwrap(), 0.2, max_relative = 1e-12);
    }

    #[test]
    fn interaction_vanishes_at_unit_e_hat() {
        let with = ScalingLawParams {
            interaction: 0.01,
            e_start: 1.0,
            ..sample_params()
        };
        let without = ScalingLawParams {
            interaction: 0.0,
            ..with
        };
        assert_eq!(
            with.predict_loss(3e8, 5e9, 1.0).unwrap(),
            without.predict_loss(3e8, 5e9, 1.0).unwrap()
        );
    }

    #[test]
    fn rejects_nonpositive_sizes_and_bracket() {
        let p = sample_params();
        assert!(p.predict_loss(0.0, 1e9, 1.0).is_err());
        assert!(p.predict_loss(1e9, -1.0, 1.0).is_err());
        let neg = ScalingLawParams {
            irreducible: -10.0,
            ..p
        };
        assert!(matches!(
            neg.predict_loss(1e9, 1e10, 4.0),
            Err(Error::NonPositiveBracket { .. })
        ));
    }

    #[test]
    fn dense_asymptote_and_hand_value() {
        let p = DenseLawParams {
            l0: 1.69,
            coef_n: 406.4,
            coef_d: 410.7,
            alpha: 0.5,
            beta: 0.5,
        };
        assert!((p.predict_loss(1e18, 1e18).unwrap() - 1.69).abs() < 1e-6);

        let p = DenseLawParams {
            alpha: 0.34,
            beta: 0.28,
            ..p
        };
        // 1.69 + 406.4·1e9^-0.34 + 410.7·1e10^-0.28, evaluated independently.
        assert_relative_eq!(p.predict_loss(1e9, 1e10).unwrap(), 2.6948752371019298, max_relative = 1e-12);
    }

    #[test]
    fn dense_power_law_halving() {
        let p = DenseLawParams {
            l0: 1.0,
            coef_n: 5.0,
            coef_d: 1e-30,
            alpha: 1.0,
            beta: 1.0,
        };
        let a = p.predict_loss(1e6, 1e9).unwrap() - 1.0;
        let b = p.predict_loss(2e6, 1e9).unwrap() - 1.0;
        assert!((a / b - 2.0).abs() < 1e-9);
    }

    #[test]
    fn parameter_counts() {
        let arch = ArchitectureConvention::default();
        assert_eq!(arch.total_params(5e8, 1.0), 5e8);
        assert_relative_eq!(arch.total_params(3e9, 8.0), 1e10, max_relative = 1e-15);
        assert_relative_eq!(arch.total_params(81_395_712.0, 4.0), 162_791_424.0, max_relative = 1e-15);
        assert_relative_eq!(arch.activated_params(3e9, 8.0), 4e9, max_relative = 1e-15);
        assert_eq!(arch.activated_params(3e9, 1.0), 3e9);
        let top1 = ArchitectureConvention { top_k: 1, ..arch };
        assert_eq!(top1.activated_params(3e9, 16.0), 3e9);
    }

    #[test]
    fn flops_conventions() {
        let arch = ArchitectureConvention::default();
        assert_relative_eq!(arch.training_flops(1e6, 1e9, 1.0), 6e15, max_relative = 1e-15);
        assert_relative_eq!(arch.training_flops(1e6, 1e9, 8.0), 8e15, max_relative = 1e-15);
        assert_eq!(arch.training_flops(1e6, 2e9, 8.0), 2.0 * arch.training_flops(1e6, 1e9, 8.0));
    }

    #[test]
    fn learning_rate_heuristic() {
        assert_eq!(suggested_learning_rate(1.0), 0.003239);
        assert_relative_eq!(suggested_learning_rate(10f64.exp()), 0.001844, max_relative = 1e-12);
        assert!(suggested_learning_rate(1e9) < suggested_learning_rate(1e8));
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let p = sample_params();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"coef_N\"") && s.contains("\"e_max\""));
        assert_eq!(serde_json::from_str::<ScalingLawParams>(&s).unwrap(), p);
        let bad = s.replacen('{', "{\"extra\":1,", 1);
        assert!(serde_json::from_str::<ScalingLawParams>(&bad).is_err());
    }
}
