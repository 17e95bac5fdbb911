//! Continuous active-inference agent for a building zone.
//!
//! The agent holds posterior means over occupancy and infiltration and
//! descends the preference-augmented variational free energy
//!
//! ```text
//! F = (phi - T_hat)^2 / (2 sigma_z^2)
//!   + (rho - phi_hat)^2 / (2 sigma_rho^2)
//!   + sum_i (mu_i - mu_prior_i)^2 / (2 sigma_omega_i^2)
//! ```
//!
//! where `T_hat` reconstructs the current observation from the previous
//! temperature under the action that was actually applied, and `phi_hat`
//! predicts the next observation from the current observation under the
//! candidate action. State updates descend F with respect to the means,
//! action updates descend F with respect to the HVAC pair; both use analytic
//! gradients through the zone energy balance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thermal::{step_temperature, ExogenousProfile, ThermalParams, ZoneTruth};

pub const AIRFLOW_MIN: f64 = 0.0;
pub const AIRFLOW_MAX: f64 = 0.3;
pub const SUPPLY_TEMP_MIN: f64 = 10.0;
pub const SUPPLY_TEMP_MAX: f64 = 25.0;

#[derive(Debug, Error)]
pub enum BuildingError {
    #[error("non-finite gradient at iteration {iteration}")]
    NumericalFailure { iteration: usize },
    #[error("horizon optimizer did not converge within the iteration budget")]
    NonConvergence,
}

/// Bounded continuous HVAC control pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HvacAction {
    /// HVAC airflow (kg/s), 0..0.3.
    pub airflow: f64,
    /// Supply air temperature (degC), 10..25.
    pub supply_temp: f64,
}

impl HvacAction {
    /// Clamps both components into their physical bounds.
    pub fn new(airflow: f64, supply_temp: f64) -> Self {
        Self {
            airflow: airflow.clamp(AIRFLOW_MIN, AIRFLOW_MAX),
            supply_temp: supply_temp.clamp(SUPPLY_TEMP_MIN, SUPPLY_TEMP_MAX),
        }
    }

    pub fn within_bounds(&self) -> bool {
        (AIRFLOW_MIN..=AIRFLOW_MAX).contains(&self.airflow)
            && (SUPPLY_TEMP_MIN..=SUPPLY_TEMP_MAX).contains(&self.supply_temp)
    }
}

/// Posterior means and prior standard deviations over the hidden states.
///
/// Occupancy and infiltration carry incommensurate units, so each keeps its
/// own prior std rather than a single shared sigma_omega.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousBelief {
    pub mu_occ: f64,
    pub mu_inf: f64,
    pub sigma_omega_occ: f64,
    pub sigma_omega_inf: f64,
}

impl ContinuousBelief {
    pub fn new(mu_occ: f64, mu_inf: f64, sigma_omega_occ: f64, sigma_omega_inf: f64) -> Self {
        assert!(sigma_omega_occ > 0.0 && sigma_omega_inf > 0.0);
        Self {
            mu_occ: mu_occ.max(0.0),
            mu_inf: mu_inf.max(0.0),
            sigma_omega_occ,
            sigma_omega_inf,
        }
    }
}

/// Source of the per-step prior means over the hidden states.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorModel {
    /// Fixed per-step schedule of (mu_occ_prior, mu_inf_prior).
    Schedule(Vec<(f64, f64)>),
    /// First-order autoregression on the previous posterior means.
    Ar1 { occ_coeff: f64, inf_coeff: f64 },
}

impl PriorModel {
    pub fn prior_at(&self, step: usize, belief: &ContinuousBelief) -> (f64, f64) {
        match self {
            PriorModel::Schedule(sched) => sched[step.min(sched.len() - 1)],
            PriorModel::Ar1 {
                occ_coeff,
                inf_coeff,
            } => (occ_coeff * belief.mu_occ, inf_coeff * belief.mu_inf),
        }
    }
}

/// Precision and descent-loop settings for the free-energy updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VfeConfig {
    /// Observation noise std (degC).
    pub sigma_z: f64,
    /// Preference width (degC).
    pub sigma_rho: f64,
    /// State learning rates.
    pub eta_occ: f64,
    pub eta_inf: f64,
    /// Action learning rates.
    pub zeta_airflow: f64,
    pub zeta_supply: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for VfeConfig {
    fn default() -> Self {
        Self {
            sigma_z: 0.1,
            sigma_rho: 0.5,
            eta_occ: 0.1,
            eta_inf: 1e-3,
            zeta_airflow: 1e-3,
            zeta_supply: 0.05,
            max_iters: 50,
            grad_tol: 1e-6,
        }
    }
}

/// Everything one agent step conditions on.
///
/// `applied_action` is the action that was in effect while the current
/// observation was produced; it anchors the observation-reconstruction term
/// and is held fixed while the candidate `action` is optimized, so the action
/// gradient flows only through the preference term.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    /// Current noisy observation phi(t) (degC).
    pub observed_phi: f64,
    /// Previous temperature estimate the reconstruction starts from (degC).
    pub prev_temp: f64,
    /// Action applied over the interval that produced `observed_phi`.
    pub applied_action: HvacAction,
    /// Ambient temperature (degC).
    pub ambient: f64,
    /// Preferred next observation rho(t) (degC).
    pub target_rho: f64,
    /// Prior means for the hidden states.
    pub prior_occ: f64,
    pub prior_inf: f64,
}

/// Per-step convergence diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub vfe: f64,
    pub state_iterations: usize,
    pub action_iterations: usize,
    pub state_grad_norm: f64,
    pub action_grad_norm: f64,
}

fn belief_step(base_temp: f64, belief: &ContinuousBelief, action: &HvacAction, ambient: f64, params: &ThermalParams) -> f64 {
    let virtual_zone = ZoneTruth {
        temperature: base_temp,
        occupancy: belief.mu_occ,
        infiltration: belief.mu_inf,
    };
    step_temperature(&virtual_zone, action, ambient, params)
}

/// Mean one-step-ahead observation prediction: the energy balance evaluated
/// at the belief means instead of the true states.
pub fn predict_observation(
    belief: &ContinuousBelief,
    action: &HvacAction,
    current_temp: f64,
    ambient: f64,
    params: &ThermalParams,
) -> f64 {
    belief_step(current_temp, belief, action, ambient, params)
}

/// Belief-conditioned reconstruction of the current observation.
pub fn reconstruct_observation(
    belief: &ContinuousBelief,
    ctx: &StepContext,
    params: &ThermalParams,
) -> f64 {
    belief_step(ctx.prev_temp, belief, &ctx.applied_action, ctx.ambient, params)
}

/// Preference-augmented variational free energy (nats).
pub fn vfe(
    belief: &ContinuousBelief,
    action: &HvacAction,
    ctx: &StepContext,
    cfg: &VfeConfig,
    params: &ThermalParams,
) -> f64 {
    let t_hat = reconstruct_observation(belief, ctx, params);
    let phi_hat = predict_observation(belief, action, ctx.observed_phi, ctx.ambient, params);
    let obs = (ctx.observed_phi - t_hat).powi(2) / (2.0 * cfg.sigma_z.powi(2));
    let pref = (ctx.target_rho - phi_hat).powi(2) / (2.0 * cfg.sigma_rho.powi(2));
    let prior = (belief.mu_occ - ctx.prior_occ).powi(2) / (2.0 * belief.sigma_omega_occ.powi(2))
        + (belief.mu_inf - ctx.prior_inf).powi(2) / (2.0 * belief.sigma_omega_inf.powi(2));
    obs + pref + prior
}

/// Analytic dF/d(mu_occ), dF/d(mu_inf).
///
/// Both the reconstruction and the prediction depend on the means, so both
/// residuals contribute. The chain-rule factors through the energy balance
/// are dT/d(mu_occ) = dt q_occ / C_b and
/// dT/d(mu_inf) = dt c_p (T_amb - T_base) / C_b.
pub fn state_gradient(
    belief: &ContinuousBelief,
    action: &HvacAction,
    ctx: &StepContext,
    cfg: &VfeConfig,
    params: &ThermalParams,
) -> (f64, f64) {
    let t_hat = reconstruct_observation(belief, ctx, params);
    let phi_hat = predict_observation(belief, action, ctx.observed_phi, ctx.ambient, params);
    let obs_res = (ctx.observed_phi - t_hat) / cfg.sigma_z.powi(2);
    let pref_res = (ctx.target_rho - phi_hat) / cfg.sigma_rho.powi(2);

    let k_occ = params.dt * params.q_occ / params.c_b;
    let k_inf_recon = params.dt * params.c_p * (ctx.ambient - ctx.prev_temp) / params.c_b;
    let k_inf_pred = params.dt * params.c_p * (ctx.ambient - ctx.observed_phi) / params.c_b;

    let g_occ = -obs_res * k_occ - pref_res * k_occ
        + (belief.mu_occ - ctx.prior_occ) / belief.sigma_omega_occ.powi(2);
    let g_inf = -obs_res * k_inf_recon - pref_res * k_inf_pred
        + (belief.mu_inf - ctx.prior_inf) / belief.sigma_omega_inf.powi(2);
    (g_occ, g_inf)
}

/// Analytic dF/d(airflow), dF/d(supply_temp) through the preference term:
/// d(phi_hat)/d(m) = dt c_p (T_sup - phi) / C_b and
/// d(phi_hat)/d(T_sup) = dt m c_p / C_b.
pub fn action_gradient(
    belief: &ContinuousBelief,
    action: &HvacAction,
    ctx: &StepContext,
    cfg: &VfeConfig,
    params: &ThermalParams,
) -> (f64, f64) {
    let phi_hat = predict_observation(belief, action, ctx.observed_phi, ctx.ambient, params);
    let pref_res = (ctx.target_rho - phi_hat) / cfg.sigma_rho.powi(2);
    let d_airflow = params.dt * params.c_p * (action.supply_temp - ctx.observed_phi) / params.c_b;
    let d_supply = params.dt * action.airflow * params.c_p / params.c_b;
    (-pref_res * d_airflow, -pref_res * d_supply)
}

/// Backtracking halvings tried before an update iteration gives up.
const MAX_BACKTRACKS: usize = 30;

/// Gradient descent on the hidden-state means with non-negativity projection.
/// Each iteration backtracks the step until the free energy decreases, so
/// the descent is monotone even when a coordinate's curvature exceeds the
/// nominal learning rate.
pub fn update_states(
    belief: &ContinuousBelief,
    action: &HvacAction,
    ctx: &StepContext,
    cfg: &VfeConfig,
    params: &ThermalParams,
) -> Result<(ContinuousBelief, usize, f64), BuildingError> {
    let mut b = *belief;
    let mut f_cur = vfe(&b, action, ctx, cfg, params);
    let mut norm = 0.0;
    for iter in 0..cfg.max_iters {
        let (g_occ, g_inf) = state_gradient(&b, action, ctx, cfg, params);
        if !g_occ.is_finite() || !g_inf.is_finite() {
            return Err(BuildingError::NumericalFailure { iteration: iter });
        }
        norm = g_occ.abs().max(g_inf.abs());
        if norm < cfg.grad_tol {
            return Ok((b, iter, norm));
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = ContinuousBelief {
                mu_occ: (b.mu_occ - scale * cfg.eta_occ * g_occ).max(0.0),
                mu_inf: (b.mu_inf - scale * cfg.eta_inf * g_inf).max(0.0),
                ..b
            };
            let f_new = vfe(&candidate, action, ctx, cfg, params);
            if f_new < f_cur {
                b = candidate;
                f_cur = f_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // Projection-blocked or at numerical resolution.
            return Ok((b, iter, norm));
        }
    }
    Ok((b, cfg.max_iters, norm))
}

/// Gradient descent on the action pair with per-iterate clamping to bounds
/// and the same backtracking acceptance rule as the state update.
pub fn update_actions(
    belief: &ContinuousBelief,
    action: &HvacAction,
    ctx: &StepContext,
    cfg: &VfeConfig,
    params: &ThermalParams,
) -> Result<(HvacAction, usize, f64), BuildingError> {
    let mut a = *action;
    let mut f_cur = vfe(belief, &a, ctx, cfg, params);
    let mut norm = 0.0;
    for iter in 0..cfg.max_iters {
        let (g_air, g_sup) = action_gradient(belief, &a, ctx, cfg, params);
        if !g_air.is_finite() || !g_sup.is_finite() {
            return Err(BuildingError::NumericalFailure { iteration: iter });
        }
        norm = g_air.abs().max(g_sup.abs());
        if norm < cfg.grad_tol {
            return Ok((a, iter, norm));
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = HvacAction::new(
                a.airflow - scale * cfg.zeta_airflow * g_air,
                a.supply_temp - scale * cfg.zeta_supply * g_sup,
            );
            let f_new = vfe(belief, &candidate, ctx, cfg, params);
            if f_new < f_cur {
                a = candidate;
                f_cur = f_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Ok((a, iter, norm));
        }
    }
    Ok((a, cfg.max_iters, norm))
}

/// One full agent step: states first, then actions against the updated
/// belief.
pub fn agent_step(
    belief: &ContinuousBelief,
    action: &HvacAction,
    ctx: &StepContext,
    cfg: &VfeConfig,
    params: &ThermalParams,
) -> Result<(ContinuousBelief, HvacAction, StepDiagnostics), BuildingError> {
    let (new_belief, state_iterations, state_grad_norm) =
        update_states(belief, action, ctx, cfg, params)?;
    let (new_action, action_iterations, action_grad_norm) =
        update_actions(&new_belief, action, ctx, cfg, params)?;
    let final_vfe = vfe(&new_belief, &new_action, ctx, cfg, params);
    Ok((
        new_belief,
        new_action,
        StepDiagnostics {
            vfe: final_vfe,
            state_iterations,
            action_iterations,
            state_grad_norm,
            action_grad_norm,
        },
    ))
}

/// Perfect-information horizon optimization problem: minimize the summed
/// preference terms over the whole action trajectory against the known
/// dynamics and true exogenous drivers.
#[derive(Debug, Clone)]
pub struct HorizonProblem<'a> {
    pub initial_temp: f64,
    /// Preferred observation per step (length = horizon).
    pub targets: &'a [f64],
    /// True exogenous drivers (same length).
    pub truth: &'a ExogenousProfile,
    pub sigma_rho: f64,
    pub params: &'a ThermalParams,
}

#[derive(Debug, Clone, Copy)]
pub struct HorizonOptions {
    pub max_iters: usize,
    pub step_airflow: f64,
    pub step_supply: f64,
    /// Stop when the objective improves by less than this between iterations.
    pub obj_tol: f64,
}

impl Default for HorizonOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            step_airflow: 1e-3,
            step_supply: 0.2,
            obj_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HorizonSolution {
    pub actions: Vec<HvacAction>,
    /// temperatures[t] is the zone temperature after applying actions[t-1];
    /// temperatures[0] is the initial temperature. Length = horizon + 1.
    pub temperatures: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
}

impl<'a> HorizonProblem<'a> {
    pub fn horizon(&self) -> usize {
        self.targets.len()
    }

    /// True exogenous drivers in effect during step `t`, matching
    /// `advance_world`'s one-step lag of scheduled occupancy/infiltration.
    pub fn drivers_at(&self, t: usize) -> (f64, f64, f64) {
        let lagged = t.saturating_sub(1);
        (
            self.truth.ambient[t],
            self.truth.occupancy[lagged],
            self.truth.infiltration[lagged],
        )
    }

    /// Rolls the deterministic dynamics under an action trajectory.
    pub fn rollout(&self, actions: &[HvacAction]) -> Vec<f64> {
        let mut temps = Vec::with_capacity(self.horizon() + 1);
        temps.push(self.initial_temp);
        for (t, a) in actions.iter().enumerate() {
            let (ambient, occ, inf) = self.drivers_at(t);
            let zone = ZoneTruth {
                temperature: temps[t],
                occupancy: occ,
                infiltration: inf,
            };
            temps.push(step_temperature(&zone, a, ambient, self.params));
        }
        temps
    }

    /// Sum over steps of (rho_t - T_{t+1})^2 / (2 sigma_rho^2).
    pub fn objective(&self, actions: &[HvacAction]) -> f64 {
        let temps = self.rollout(actions);
        self.targets
            .iter()
            .enumerate()
            .map(|(t, rho)| (rho - temps[t + 1]).powi(2) / (2.0 * self.sigma_rho.powi(2)))
            .sum()
    }
}

/// Joint projected gradient descent over all horizon action variables, with
/// the gradient propagated backward through the temperature recurrence.
pub fn optimize_full_horizon(
    problem: &HorizonProblem,
    opts: &HorizonOptions,
) -> HorizonSolution {
    let n = problem.horizon();
    let p = problem.params;
    let mut actions = vec![HvacAction::new(0.0, 18.0); n];
    let mut best_actions = actions.clone();
    let mut best_obj = problem.objective(&actions);
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let temps = problem.rollout(&actions);

        // Adjoint pass: lambda[t] = dJ/dT[t+1].
        let mut lambda = vec![0.0; n];
        for t in (0..n).rev() {
            let mut l = (temps[t + 1] - problem.targets[t]) / problem.sigma_rho.powi(2);
            if t + 1 < n {
                let (_, _, inf_next) = problem.drivers_at(t + 1);
                let a_next = &actions[t + 1];
                let contraction =
                    1.0 - p.dt * (a_next.airflow * p.c_p + p.u_w + inf_next * p.c_p) / p.c_b;
                l += lambda[t + 1] * contraction;
            }
            lambda[t] = l;
        }

        for t in 0..n {
            let g_air = lambda[t] * p.dt * p.c_p * (actions[t].supply_temp - temps[t]) / p.c_b;
            let g_sup = lambda[t] * p.dt * actions[t].airflow * p.c_p / p.c_b;
            actions[t] = HvacAction::new(
                actions[t].airflow - opts.step_airflow * g_air,
                actions[t].supply_temp - opts.step_supply * g_sup,
            );
        }

        let obj = problem.objective(&actions);
        if obj < best_obj {
            if best_obj - obj < opts.obj_tol {
                best_obj = obj;
                best_actions = actions.clone();
                converged = true;
                break;
            }
            best_obj = obj;
            best_actions = actions.clone();
        }
    }

    let temperatures = problem.rollout(&best_actions);
    HorizonSolution {
        actions: best_actions,
        temperatures,
        objective: best_obj,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn default_ctx() -> StepContext {
        StepContext {
            observed_phi: 24.3,
            prev_temp: 24.1,
            applied_action: HvacAction::new(0.1, 16.0),
            ambient: 31.0,
            target_rho: 24.0,
            prior_occ: 2.0,
            prior_inf: 0.0,
        }
    }

    fn belief(mu_occ: f64, mu_inf: f64) -> ContinuousBelief {
        ContinuousBelief::new(mu_occ, mu_inf, 2.0, 0.02)
    }

    #[test]
    fn prediction_matches_world_when_belief_is_true() {
        let p = ThermalParams::default();
        let zone = ZoneTruth {
            temperature: 25.0,
            occupancy: 3.0,
            infiltration: 0.01,
        };
        let a = HvacAction::new(0.15, 13.0);
        let b = belief(3.0, 0.01);
        let world = step_temperature(&zone, &a, 32.0, &p);
        let pred = predict_observation(&b, &a, 25.0, 32.0, &p);
        assert_eq!(world, pred);
    }

    #[test]
    fn one_more_person_shifts_prediction_by_partial_derivative() {
        let p = ThermalParams::default();
        let a = HvacAction::new(0.1, 15.0);
        let p0 = predict_observation(&belief(2.0, 0.0), &a, 24.0, 30.0, &p);
        let p1 = predict_observation(&belief(3.0, 0.0), &a, 24.0, 30.0, &p);
        assert_abs_diff_eq!(p1 - p0, 0.0153, epsilon = 1e-12);
    }

    #[test]
    fn zero_action_at_prior_reproduces_free_float() {
        let p = ThermalParams::default();
        let b = belief(0.0, 0.0);
        let a = HvacAction::new(0.0, 18.0);
        let zone = ZoneTruth {
            temperature: 26.0,
            occupancy: 0.0,
            infiltration: 0.0,
        };
        assert_eq!(
            predict_observation(&b, &a, 26.0, 33.0, &p),
            step_temperature(&zone, &a, 33.0, &p)
        );
    }

    #[test]
    fn vfe_zero_at_perfect_fit() {
        let p = ThermalParams::default();
        let cfg = VfeConfig::default();
        let b = belief(2.0, 0.0);
        let a = HvacAction::new(0.1, 16.0);
        let mut ctx = default_ctx();
        // Arrange phi = T_hat, rho = phi_hat, mu = prior.
        ctx.prior_occ = b.mu_occ;
        ctx.prior_inf = b.mu_inf;
        ctx.observed_phi = reconstruct_observation(&b, &ctx, &p);
        ctx.target_rho = predict_observation(&b, &a, ctx.observed_phi, ctx.ambient, &p);
        assert_abs_diff_eq!(vfe(&b, &a, &ctx, &cfg, &p), 0.0, epsilon = 1e-18);
    }

    #[test]
    fn vfe_unit_sigma_residuals() {
        // With sigma_z = sigma_rho = sigma_omega = 1 and residuals
        // (1, 2, 1, 1), F = 0.5 + 2.0 + 0.5 + 0.5 = 3.5.
        let p = ThermalParams::default();
        let cfg = VfeConfig {
            sigma_z: 1.0,
            sigma_rho: 1.0,
            ..VfeConfig::default()
        };
        let b = ContinuousBelief::new(3.0, 1.01, 1.0, 1.0);
        let a = HvacAction::new(0.1, 16.0);
        let mut ctx = default_ctx();
        ctx.prior_occ = b.mu_occ - 1.0;
        ctx.prior_inf = b.mu_inf - 1.0;
        let t_hat = reconstruct_observation(&b, &ctx, &p);
        ctx.observed_phi = t_hat + 1.0;
        // phi feeds phi_hat, so recompute after setting it.
        let phi_hat = predict_observation(&b, &a, ctx.observed_phi, ctx.ambient, &p);
        ctx.target_rho = phi_hat + 2.0;
        // T_hat itself does not depend on phi, so the first residual is intact.
        assert_abs_diff_eq!(vfe(&b, &a, &ctx, &cfg, &p), 3.5, epsilon = 1e-12);
    }

    #[test]
    fn doubling_sigma_rho_quarters_preference_term_only() {
        let p = ThermalParams::default();
        let cfg1 = VfeConfig::default();
        let cfg2 = VfeConfig {
            sigma_rho: 2.0 * cfg1.sigma_rho,
            ..cfg1
        };
        let b = belief(2.0, 0.0);
        let a = HvacAction::new(0.1, 16.0);
        let mut ctx = default_ctx();
        // Zero out the other residuals so only the preference term remains.
        ctx.prior_occ = b.mu_occ;
        ctx.prior_inf = b.mu_inf;
        ctx.observed_phi = reconstruct_observation(&b, &ctx, &p);
        let f1 = vfe(&b, &a, &ctx, &cfg1, &p);
        let f2 = vfe(&b, &a, &ctx, &cfg2, &p);
        assert!(f1 > 0.0);
        assert_abs_diff_eq!(f2, f1 / 4.0, epsilon = 1e-12);
    }

    fn random_setup(rng: &mut StdRng) -> (ContinuousBelief, HvacAction, StepContext, ThermalParams) {
        let params = ThermalParams {
            c_p: 1005.0,
            c_b: rng.gen_range(1.0e6..4.0e6),
            u_w: rng.gen_range(20.0..120.0),
            q_occ: rng.gen_range(80.0..140.0),
            dt: 300.0,
        };
        let b = ContinuousBelief::new(
            rng.gen_range(0.0..6.0),
            rng.gen_range(0.0..0.05),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.005..0.05),
        );
        let a = HvacAction::new(rng.gen_range(0.0..0.3), rng.gen_range(10.0..25.0));
        let ctx = StepContext {
            observed_phi: rng.gen_range(20.0..30.0),
            prev_temp: rng.gen_range(20.0..30.0),
            applied_action: HvacAction::new(rng.gen_range(0.0..0.3), rng.gen_range(10.0..25.0)),
            ambient: rng.gen_range(22.0..36.0),
            target_rho: rng.gen_range(22.0..26.0),
            prior_occ: rng.gen_range(0.0..5.0),
            prior_inf: rng.gen_range(0.0..0.04),
        };
        (b, a, ctx, params)
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = StdRng::seed_from_u64(99);
        let cfg = VfeConfig::default();
        let h = 1e-5;
        for _ in 0..100 {
            let (b, a, ctx, params) = random_setup(&mut rng);
            let (g_occ, g_inf) = state_gradient(&b, &a, &ctx, &cfg, &params);
            let (g_air, g_sup) = action_gradient(&b, &a, &ctx, &cfg, &params);

            let fd = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + h) - f(x - h)) / (2.0 * h);

            let f_occ = |mu: f64| {
                let mut bb = b;
                bb.mu_occ = mu;
                vfe(&bb, &a, &ctx, &cfg, &params)
            };
            let f_inf = |mu: f64| {
                let mut bb = b;
                bb.mu_inf = mu;
                vfe(&bb, &a, &ctx, &cfg, &params)
            };
            let f_air = |x: f64| {
                let aa = HvacAction {
                    airflow: x,
                    supply_temp: a.supply_temp,
                };
                vfe(&b, &aa, &ctx, &cfg, &params)
            };
            let f_sup = |x: f64| {
                let aa = HvacAction {
                    airflow: a.airflow,
                    supply_temp: x,
                };
                vfe(&b, &aa, &ctx, &cfg, &params)
            };

            for (analytic, numeric) in [
                (g_occ, fd(&f_occ, b.mu_occ)),
                (g_inf, fd(&f_inf, b.mu_inf)),
                (g_air, fd(&f_air, a.airflow)),
                (g_sup, fd(&f_sup, a.supply_temp)),
            ] {
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / scale <= 1e-5,
                    "analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn update_states_fixed_point_when_gradient_small() {
        let p = ThermalParams::default();
        let cfg = VfeConfig::default();
        let b = belief(2.0, 0.0);
        let a = HvacAction::new(0.1, 16.0);
        let mut ctx = default_ctx();
        ctx.prior_occ = b.mu_occ;
        ctx.prior_inf = b.mu_inf;
        ctx.observed_phi = reconstruct_observation(&b, &ctx, &p);
        ctx.target_rho = predict_observation(&b, &a, ctx.observed_phi, ctx.ambient, &p);
        let (b2, iters, _) = update_states(&b, &a, &ctx, &cfg, &p).unwrap();
        assert_eq!(iters, 0);
        assert_eq!(b2, b);
    }

    #[test]
    fn persistent_warm_residual_raises_infiltration_estimate() {
        // Observation persistently warmer than the reconstruction with
        // T_amb > T: the only hidden channel scaling with (T_amb - T) is
        // infiltration, so mu_inf must grow.
        let p = ThermalParams::default();
        let cfg = VfeConfig::default();
        let b = belief(0.0, 0.0);
        let a = HvacAction::new(0.0, 18.0);
        let mut ctx = default_ctx();
        ctx.prior_occ = 0.0;
        ctx.prior_inf = 0.0;
        ctx.prev_temp = 24.0;
        ctx.ambient = 34.0;
        ctx.applied_action = a;
        ctx.observed_phi = reconstruct_observation(&b, &ctx, &p) + 0.2;
        ctx.target_rho = ctx.observed_phi;
        let (b2, _, _) = update_states(&b, &a, &ctx, &cfg, &p).unwrap();
        assert!(b2.mu_inf > b.mu_inf, "mu_inf {} -> {}", b.mu_inf, b2.mu_inf);
    }

    #[test]
    fn action_unchanged_when_prediction_hits_target() {
        let p = ThermalParams::default();
        let cfg = VfeConfig::default();
        let b = belief(2.0, 0.0);
        let a = HvacAction::new(0.1, 16.0);
        let mut ctx = default_ctx();
        ctx.target_rho = predict_observation(&b, &a, ctx.observed_phi, ctx.ambient, &p);
        let (a2, iters, _) = update_actions(&b, &a, &ctx, &cfg, &p).unwrap();
        assert_eq!(iters, 0);
        assert_eq!(a2, a);
    }

    #[test]
    fn cool_target_pushes_airflow_up() {
        // rho below phi_hat with T_sup < T: more cool air reduces the
        // preference residual, so the descent step on airflow is positive.
        let p = ThermalParams::default();
        let cfg = VfeConfig::default();
        let b = belief(2.0, 0.0);
        let a = HvacAction::new(0.05, 14.0);
        let mut ctx = default_ctx();
        ctx.observed_phi = 26.0;
        ctx.target_rho = 23.0;
        let (g_air, _) = action_gradient(&b, &a, &ctx, &cfg, &p);
        assert!(g_air < 0.0, "descent direction must increase airflow");
        let (a2, _, _) = update_actions(&b, &a, &ctx, &cfg, &p).unwrap();
        assert!(a2.airflow > a.airflow);
    }

    #[test]
    fn unbounded_descent_clamps_airflow_at_max() {
        let p = ThermalParams::default();
        let cfg = VfeConfig {
            zeta_airflow: 10.0,
            max_iters: 200,
            ..VfeConfig::default()
        };
        let b = belief(2.0, 0.0);
        let a = HvacAction::new(0.1, 10.0);
        let mut ctx = default_ctx();
        ctx.observed_phi = 30.0;
        ctx.target_rho = 10.0; // unreachable demand
        let (a2, _, _) = update_actions(&b, &a, &ctx, &cfg, &p).unwrap();
        assert_eq!(a2.airflow, AIRFLOW_MAX);
        assert!(a2.within_bounds());
    }

    #[test]
    fn agent_step_does_not_increase_vfe() {
        let mut rng = StdRng::seed_from_u64(7);
        let cfg = VfeConfig::default();
        for _ in 0..50 {
            let (b, a, ctx, params) = random_setup(&mut rng);
            let before = vfe(&b, &a, &ctx, &cfg, &params);
            let (b2, a2, diag) = agent_step(&b, &a, &ctx, &cfg, &params).unwrap();
            let after = vfe(&b2, &a2, &ctx, &cfg, &params);
            assert!(
                after <= before + 1e-9,
                "VFE increased: {before} -> {after}"
            );
            assert_abs_diff_eq!(after, diag.vfe, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_anchoring_as_sigma_omega_vanishes() {
        let p = ThermalParams::default();
        let cfg = VfeConfig {
            max_iters: 500,
            ..VfeConfig::default()
        };
        let b = ContinuousBelief::new(3.0, 0.02, 1e-6, 1e-6);
        let a = HvacAction::new(0.1, 16.0);
        let mut ctx = default_ctx();
        ctx.prior_occ = 1.0;
        ctx.prior_inf = 0.01;
        // Learning rates scaled for the stiff prior precision.
        let cfg = VfeConfig {
            eta_occ: 1e-13,
            eta_inf: 1e-13,
            ..cfg
        };
        let (b2, _, _) = update_states(&b, &a, &ctx, &cfg, &p).unwrap();
        assert!((b2.mu_occ - ctx.prior_occ).abs() < 1e-3);
        assert!((b2.mu_inf - ctx.prior_inf).abs() < 1e-3);
    }

    #[test]
    fn likelihood_anchoring_recovers_true_occupancy() {
        // Noiseless observation, infiltration pinned at truth, tiny sigma_z:
        // the inferred occupancy must converge to the value that generated
        // the observation.
        let p = ThermalParams::default();
        let true_occ = 3.0;
        let applied = HvacAction::new(0.1, 16.0);
        let zone = ZoneTruth {
            temperature: 24.0,
            occupancy: true_occ,
            infiltration: 0.0,
        };
        let phi = step_temperature(&zone, &applied, 31.0, &p);
        let cfg = VfeConfig {
            sigma_z: 0.01,
            eta_occ: 0.02,
            eta_inf: 0.0,
            max_iters: 2000,
            grad_tol: 1e-10,
            ..VfeConfig::default()
        };
        let b = ContinuousBelief::new(0.5, 0.0, 100.0, 0.02);
        let ctx = StepContext {
            observed_phi: phi,
            prev_temp: 24.0,
            applied_action: applied,
            ambient: 31.0,
            target_rho: phi,
            prior_occ: 0.5,
            prior_inf: 0.0,
        };
        let (b2, _, _) = update_states(&b, &applied, &ctx, &cfg, &p).unwrap();
        assert!(
            (b2.mu_occ - true_occ).abs() < 0.1,
            "inferred {} vs true {true_occ}",
            b2.mu_occ
        );
    }

    #[test]
    fn clamping_property_with_adversarial_targets() {
        let mut rng = StdRng::seed_from_u64(3);
        let p = ThermalParams::default();
        let cfg = VfeConfig {
            zeta_airflow: 1.0,
            zeta_supply: 50.0,
            max_iters: 100,
            ..VfeConfig::default()
        };
        for _ in 0..200 {
            let (b, a, mut ctx, _) = random_setup(&mut rng);
            ctx.target_rho = rng.gen_range(-50.0..80.0);
            let (a2, _, _) = update_actions(&b, &a, &ctx, &cfg, &p).unwrap();
            assert!(a2.within_bounds(), "{a2:?}");
        }
    }

    #[test]
    fn full_horizon_trivial_when_target_is_free_float() {
        let p = ThermalParams::default();
        let truth = ExogenousProfile::new(vec![30.0; 24], vec![0.0; 24], vec![0.0; 24]).unwrap();
        // Free-floating trajectory from the initial temperature.
        let zero = vec![HvacAction::new(0.0, 18.0); 24];
        let problem0 = HorizonProblem {
            initial_temp: 26.0,
            targets: &vec![0.0; 24],
            truth: &truth,
            sigma_rho: 0.5,
            params: &p,
        };
        let free = problem0.rollout(&zero);
        let targets: Vec<f64> = free[1..].to_vec();
        let problem = HorizonProblem {
            targets: &targets,
            ..problem0
        };
        assert_abs_diff_eq!(problem.objective(&zero), 0.0, epsilon = 1e-18);
        let sol = optimize_full_horizon(&problem, &HorizonOptions::default());
        assert!(sol.objective <= 1e-12);
    }

    #[test]
    fn full_horizon_solution_is_locally_optimal() {
        let p = ThermalParams::default();
        let truth = ExogenousProfile::default_summer_day();
        let n = 48;
        let small = ExogenousProfile::new(
            truth.ambient[..n].to_vec(),
            truth.occupancy[..n].to_vec(),
            truth.infiltration[..n].to_vec(),
        )
        .unwrap();
        let targets = vec![24.0; n];
        let problem = HorizonProblem {
            initial_temp: 26.0,
            targets: &targets,
            truth: &small,
            sigma_rho: 0.5,
            params: &p,
        };
        let sol = optimize_full_horizon(&problem, &HorizonOptions::default());
        let base = problem.objective(&sol.actions);
        // Perturbing any coordinate by +/-1e-3 must not reduce the objective
        // (beyond descent-tolerance noise).
        for t in (0..n).step_by(7) {
            for (da, ds) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                let mut perturbed = sol.actions.clone();
                perturbed[t] =
                    HvacAction::new(perturbed[t].airflow + da, perturbed[t].supply_temp + ds);
                assert!(
                    problem.objective(&perturbed) >= base - 1e-7,
                    "objective reduced at t={t}"
                );
            }
        }
    }
}
