//! Scenario configuration: one JSON document with sections for the physical
//! world, the building agents, the discrete community model, the planner,
//! the economic mapping, the market day, profile file paths, and seeds.
//! Every field has a default, so `{}` is a complete, runnable scenario.

use serde::{Deserialize, Serialize};

use crate::building::VfeConfig;
use crate::community::CommunityModelParams;
use crate::planner::{CostWeights, EfeConfig, StateEconomics};
use crate::thermal::ThermalParams;

use super::{ScenarioError, SignalDiscretizer, COMMUNITY_STEPS_PER_DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub world: WorldConfig,
    pub agents: AgentConfig,
    pub community_model: CommunityModelParams,
    pub planner: EfeConfig,
    pub economics: EconomicsConfig,
    pub market: MarketConfig,
    pub profiles: ProfilesConfig,
    pub seeds: SeedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub thermal: ThermalParams,
    /// Zone temperature all buildings start the day at (degC).
    pub initial_temp_c: f64,
    /// Cooling setpoint before any demand-response offset (degC).
    pub base_setpoint_c: f64,
    /// Comfort is satisfied within +/- this band around the target (degC).
    pub comfort_band_c: f64,
    /// Allowable setpoint range; demand-response offsets are clamped to it.
    pub setpoint_min_c: f64,
    pub setpoint_max_c: f64,
    /// Setpoint offsets (degC) for NoChange / SmallReduction / BigReduction.
    pub reduction_offsets_c: [f64; 3],
    /// HVAC coefficient of performance for the electrical-power mapping.
    pub cop: f64,
    /// Plug load floor and per-occupant increment (kW).
    pub plug_base_kw: f64,
    pub plug_per_person_kw: f64,
    pub ess: EssConfig,
    pub discretizer: SignalDiscretizer,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            thermal: ThermalParams::default(),
            initial_temp_c: 24.0,
            base_setpoint_c: 24.0,
            comfort_band_c: 2.0,
            setpoint_min_c: 22.0,
            setpoint_max_c: 27.0,
            reduction_offsets_c: [0.0, 1.0, 2.0],
            cop: 3.0,
            plug_base_kw: 1.0,
            plug_per_person_kw: 1.8,
            ess: EssConfig::default(),
            discretizer: SignalDiscretizer::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssConfig {
    pub capacity_kwh: f64,
    pub max_power_kw: f64,
    pub round_trip_eff: f64,
    pub initial_soc: f64,
}

impl Default for EssConfig {
    fn default() -> Self {
        Self {
            capacity_kwh: 5.0,
            max_power_kw: 20.0,
            round_trip_eff: 0.9,
            initial_soc: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub vfe: VfeConfig,
    /// Prior occupancy schedule as (start_hour, persons) breakpoints.
    pub prior_occupancy: Vec<(f64, f64)>,
    /// Prior infiltration mean (kg/s), flat over the day.
    pub prior_infiltration: f64,
    /// Prior standard deviations anchoring the posterior means.
    pub sigma_omega_occ: f64,
    pub sigma_omega_inf: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            vfe: VfeConfig::default(),
            prior_occupancy: vec![
                (0.0, 0.0),
                (7.0, 3.0),
                (9.0, 1.0),
                (17.0, 4.0),
                (23.0, 1.0),
            ],
            prior_infiltration: 0.0,
            sigma_omega_occ: 1.0,
            sigma_omega_inf: 0.02,
        }
    }
}

impl AgentConfig {
    /// Expands the hour-keyed breakpoints into one (occ, inf) prior pair per
    /// building-layer timestep.
    pub fn prior_schedule(&self, steps: usize, dt_s: f64) -> Vec<(f64, f64)> {
        (0..steps)
            .map(|t| {
                let hour = t as f64 * dt_s / 3600.0;
                let occ = self
                    .prior_occupancy
                    .iter()
                    .rev()
                    .find(|(start, _)| hour >= *start)
                    .map_or(0.0, |(_, v)| *v);
                (occ, self.prior_infiltration)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconomicsConfig {
    pub levels: StateEconomics,
    pub weights: CostWeights,
}

impl Default for EconomicsConfig {
    fn default() -> Self {
        Self {
            levels: StateEconomics::default(),
            weights: CostWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    /// Spot price per community step, currency per kWh (96 entries).
    pub spot_price_per_kwh: Vec<f64>,
    /// Peak of the PV bell curve (kW).
    pub pv_peak_kw: f64,
    /// Relative error injected into the day-ahead plan.
    pub da_error_fraction: f64,
    /// Nominal per-building HVAC draw assumed when the day-ahead plan was
    /// committed (kW).
    pub hvac_nominal_kw: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            spot_price_per_kwh: default_spot_prices(),
            pv_peak_kw: 20.0,
            da_error_fraction: 0.1,
            hvac_nominal_kw: 2.0,
        }
    }
}

/// Default tariff: cheap night, moderate morning, a midday block priced
/// above the early evening, and a cheap late evening.
pub fn default_spot_prices() -> Vec<f64> {
    (0..COMMUNITY_STEPS_PER_DAY)
        .map(|k| {
            let hour = k as f64 * 0.25;
            if hour < 6.0 {
                0.05
            } else if hour < 10.0 {
                0.08
            } else if hour < 16.0 {
                0.115
            } else if hour < 20.0 {
                0.09
            } else {
                0.06
            }
        })
        .collect()
}

/// Doubles the tariff and triples it (relative to the original) over the
/// 16:00-20:00 evening peak.
pub fn apply_extreme_pricing(market: &mut MarketConfig) {
    for (k, price) in market.spot_price_per_kwh.iter_mut().enumerate() {
        let hour = k as f64 * 0.25;
        let factor = if (16.0..20.0).contains(&hour) { 3.0 } else { 2.0 };
        *price *= factor;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilesConfig {
    /// Optional CSV paths; built-in summer-day profiles are used when unset.
    pub building_1: Option<String>,
    pub building_2: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub sensor_building_1: u64,
    pub sensor_building_2: u64,
    pub market: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            sensor_building_1: 11,
            sensor_building_2: 12,
            market: 13,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Config {
            problems: vec![e.to_string()],
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Collects every out-of-range field into one error.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, key: &str, detail: String| {
            if !ok {
                problems.push(format!("{key}: {detail}"));
            }
        };

        let w = &self.world;
        check(w.thermal.c_p > 0.0, "world.thermal.c_p", format!("{} must be > 0", w.thermal.c_p));
        check(w.thermal.c_b > 0.0, "world.thermal.c_b", format!("{} must be > 0", w.thermal.c_b));
        check(w.thermal.u_w >= 0.0, "world.thermal.u_w", format!("{} must be >= 0", w.thermal.u_w));
        check(w.thermal.q_occ >= 0.0, "world.thermal.q_occ", format!("{} must be >= 0", w.thermal.q_occ));
        check(w.thermal.dt > 0.0, "world.thermal.dt", format!("{} must be > 0", w.thermal.dt));
        check(w.comfort_band_c > 0.0, "world.comfort_band_c", format!("{} must be > 0", w.comfort_band_c));
        check(
            w.setpoint_min_c <= w.base_setpoint_c && w.base_setpoint_c <= w.setpoint_max_c,
            "world.base_setpoint_c",
            format!(
                "{} must lie inside [{}, {}]",
                w.base_setpoint_c, w.setpoint_min_c, w.setpoint_max_c
            ),
        );
        check(w.cop > 0.0, "world.cop", format!("{} must be > 0", w.cop));
        check(w.plug_base_kw >= 0.0, "world.plug_base_kw", format!("{} must be >= 0", w.plug_base_kw));
        check(
            w.plug_per_person_kw >= 0.0,
            "world.plug_per_person_kw",
            format!("{} must be >= 0", w.plug_per_person_kw),
        );
        check(
            w.reduction_offsets_c.iter().all(|o| *o >= 0.0),
            "world.reduction_offsets_c",
            "offsets must be >= 0".to_string(),
        );
        check(w.ess.capacity_kwh > 0.0, "world.ess.capacity_kwh", format!("{} must be > 0", w.ess.capacity_kwh));
        check(w.ess.max_power_kw > 0.0, "world.ess.max_power_kw", format!("{} must be > 0", w.ess.max_power_kw));
        check(
            w.ess.round_trip_eff > 0.0 && w.ess.round_trip_eff <= 1.0,
            "world.ess.round_trip_eff",
            format!("{} must be in (0, 1]", w.ess.round_trip_eff),
        );
        check(
            (0.0..=1.0).contains(&w.ess.initial_soc),
            "world.ess.initial_soc",
            format!("{} must be in [0, 1]", w.ess.initial_soc),
        );
        check(
            w.discretizer.power_deadband >= 0.0,
            "world.discretizer.power_deadband",
            format!("{} must be >= 0", w.discretizer.power_deadband),
        );
        check(
            w.discretizer.flow_deadband_kw >= 0.0,
            "world.discretizer.flow_deadband_kw",
            format!("{} must be >= 0", w.discretizer.flow_deadband_kw),
        );

        let a = &self.agents;
        check(a.vfe.sigma_z >= 0.0, "agents.vfe.sigma_z", format!("{} must be >= 0", a.vfe.sigma_z));
        check(a.vfe.sigma_rho > 0.0, "agents.vfe.sigma_rho", format!("{} must be > 0", a.vfe.sigma_rho));
        check(a.vfe.max_iters > 0, "agents.vfe.max_iters", "must be > 0".to_string());
        check(
            !a.prior_occupancy.is_empty(),
            "agents.prior_occupancy",
            "schedule must have at least one breakpoint".to_string(),
        );
        check(
            a.prior_occupancy.windows(2).all(|p| p[0].0 < p[1].0),
            "agents.prior_occupancy",
            "breakpoint hours must be strictly increasing".to_string(),
        );
        check(
            a.prior_occupancy
                .iter()
                .all(|(h, v)| (0.0..24.0).contains(h) && *v >= 0.0),
            "agents.prior_occupancy",
            "hours must be in [0, 24), values >= 0".to_string(),
        );
        check(a.sigma_omega_occ > 0.0, "agents.sigma_omega_occ", format!("{} must be > 0", a.sigma_omega_occ));
        check(a.sigma_omega_inf > 0.0, "agents.sigma_omega_inf", format!("{} must be > 0", a.sigma_omega_inf));

        let m = &self.community_model;
        check(
            (0.5..1.0).contains(&m.confusion),
            "community_model.confusion",
            format!("{} must be in [0.5, 1)", m.confusion),
        );
        check(
            m.persistence > 0.0 && m.persistence < 1.0,
            "community_model.persistence",
            format!("{} must be in (0, 1)", m.persistence),
        );
        check(
            (0.0..=1.0).contains(&m.small_pull) && (0.0..=1.0).contains(&m.big_pull),
            "community_model.small_pull/big_pull",
            "pulls must be in [0, 1]".to_string(),
        );
        check(
            m.ess_efficiency > 0.0 && m.ess_efficiency <= 1.0,
            "community_model.ess_efficiency",
            format!("{} must be in (0, 1]", m.ess_efficiency),
        );
        check(
            (0.0..=1.0).contains(&m.preferred_obs_weight),
            "community_model.preferred_obs_weight",
            format!("{} must be in [0, 1]", m.preferred_obs_weight),
        );
        for (soc, col) in m.ess_likelihood.iter().enumerate() {
            let sum: f64 = col.iter().sum();
            check(
                col.iter().all(|p| (0.0..=1.0).contains(p)) && (sum - 1.0).abs() <= 1e-9,
                "community_model.ess_likelihood",
                format!("column {soc} must be a probability distribution (sums to {sum})"),
            );
        }

        check(self.planner.horizon >= 1, "planner.horizon", "must be >= 1".to_string());
        check(
            self.planner.alpha_ambiguity >= 0.0,
            "planner.alpha_ambiguity",
            format!("{} must be >= 0", self.planner.alpha_ambiguity),
        );
        check(
            self.planner.beam_width.map_or(true, |b| b >= 1),
            "planner.beam_width",
            "must be >= 1 when set".to_string(),
        );

        let e = &self.economics;
        check(
            e.levels.load_kw.iter().all(|l| *l >= 0.0),
            "economics.levels.load_kw",
            "loads must be >= 0".to_string(),
        );
        check(
            e.levels.reduction_kw.iter().all(|r| *r >= 0.0),
            "economics.levels.reduction_kw",
            "reductions must be >= 0".to_string(),
        );
        check(
            e.levels.ess_block_kw > 0.0,
            "economics.levels.ess_block_kw",
            format!("{} must be > 0", e.levels.ess_block_kw),
        );
        check(
            (0.0..=1.0).contains(&e.weights.sell_ratio),
            "economics.weights.sell_ratio",
            format!("{} must be in [0, 1]", e.weights.sell_ratio),
        );
        check(
            e.weights.lambda_deviation >= 0.0
                && e.weights.lambda_unused_pv >= 0.0
                && e.weights.lambda_battery >= 0.0,
            "economics.weights",
            "penalty weights must be >= 0".to_string(),
        );

        let mk = &self.market;
        check(
            mk.spot_price_per_kwh.len() == COMMUNITY_STEPS_PER_DAY,
            "market.spot_price_per_kwh",
            format!(
                "{} entries, expected {}",
                mk.spot_price_per_kwh.len(),
                COMMUNITY_STEPS_PER_DAY
            ),
        );
        check(
            mk.spot_price_per_kwh.iter().all(|p| *p >= 0.0),
            "market.spot_price_per_kwh",
            "prices must be >= 0".to_string(),
        );
        check(mk.pv_peak_kw >= 0.0, "market.pv_peak_kw", format!("{} must be >= 0", mk.pv_peak_kw));
        check(
            (0.0..1.0).contains(&mk.da_error_fraction),
            "market.da_error_fraction",
            format!("{} must be in [0, 1)", mk.da_error_fraction),
        );
        check(
            mk.hvac_nominal_kw >= 0.0,
            "market.hvac_nominal_kw",
            format!("{} must be >= 0", mk.hvac_nominal_kw),
        );

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Config { problems })
        }
    }
}
