//! Binds the two layers into runnable day-long experiments: physical ESS
//! and market models, discretization of measured powers into the community
//! observation alphabet, downlink of community actions into building
//! setpoints, the closed-loop day runs, the full-information baseline, and
//! the ambiguity sweep.
//!
//! Time grids: the building layer runs 288 five-minute steps per day, the
//! community layer 96 fifteen-minute steps; community step k consumes
//! building steps 3k..3k+2.

mod config;

pub use config::{
    apply_extreme_pricing, default_spot_prices, AgentConfig, EconomicsConfig, EssConfig,
    MarketConfig, ProfilesConfig, ScenarioConfig, SeedConfig, WorldConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief_math::Categorical;
use crate::building::{
    agent_step, optimize_full_horizon, BuildingError, ContinuousBelief, HorizonOptions,
    HorizonProblem, HorizonSolution, HvacAction, PriorModel, StepContext, VfeConfig,
};
use crate::community::{
    belief_update_with_fallback, BuildingAction, CommunityModel, EssAction, EssSocState,
    FlowSignal, JointAction, JointObservation, LoadSignal, MarketAction, NUM_STATES,
};
use crate::planner::{plan, EfeConfig, MarketStep};
use crate::thermal::{
    advance_world, ExogenousProfile, ProfileError, SensorModel, ThermalParams, ZoneTruth,
    STEPS_PER_DAY,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const COMMUNITY_STEPS_PER_DAY: usize = 96;
pub const BUILDING_STEPS_PER_COMMUNITY_STEP: usize = STEPS_PER_DAY / COMMUNITY_STEPS_PER_DAY;
pub const COMMUNITY_DT_HOURS: f64 = 0.25;
/// Warm-up excluded from comfort statistics: one hour of building steps.
pub const COMFORT_WARMUP_STEPS: usize = 12;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {}", problems.join("; "))]
    Config { problems: Vec<String> },
    #[error("building {building} agent failed at step {step}: {source}")]
    Agent {
        building: usize,
        step: usize,
        source: BuildingError,
    },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Deadbands for turning measured powers into the discrete signal alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalDiscretizer {
    /// Relative change below which a building power reading counts as Same.
    pub power_deadband: f64,
    /// Absolute grid-flow band (kW) that counts as Neutral.
    pub flow_deadband_kw: f64,
}

impl Default for SignalDiscretizer {
    fn default() -> Self {
        Self {
            power_deadband: 0.05,
            flow_deadband_kw: 0.5,
        }
    }
}

/// Up / Same / Down relative to the previous reading; a zero previous
/// reading falls back to the absolute flow deadband.
pub fn discretize_building_signal(
    power_now: f64,
    power_prev: f64,
    d: &SignalDiscretizer,
) -> LoadSignal {
    if power_prev == 0.0 {
        return if power_now > d.flow_deadband_kw {
            LoadSignal::Up
        } else {
            LoadSignal::Same
        };
    }
    if power_now > power_prev * (1.0 + d.power_deadband) {
        LoadSignal::Up
    } else if power_now < power_prev * (1.0 - d.power_deadband) {
        LoadSignal::Down
    } else {
        LoadSignal::Same
    }
}

pub fn discretize_flow(net_grid_kw: f64, d: &SignalDiscretizer) -> FlowSignal {
    if net_grid_kw > d.flow_deadband_kw {
        FlowSignal::Import
    } else if net_grid_kw < -d.flow_deadband_kw {
        FlowSignal::Export
    } else {
        FlowSignal::Neutral
    }
}

/// Cooling-season downlink: demand reduction raises the cooling setpoint,
/// clamped to the allowable band.
pub fn apply_reduction(u_b: BuildingAction, base_target: f64, world: &WorldConfig) -> f64 {
    let offset = world.reduction_offsets_c[u_b.index()];
    (base_target + offset).clamp(world.setpoint_min_c, world.setpoint_max_c)
}

/// Physical battery with continuous state of charge; the round-trip loss is
/// applied entirely on the way in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssPhysical {
    pub capacity_kwh: f64,
    pub max_power_kw: f64,
    pub round_trip_eff: f64,
    pub soc: f64,
}

impl EssPhysical {
    pub fn from_config(cfg: &EssConfig) -> Self {
        Self {
            capacity_kwh: cfg.capacity_kwh,
            max_power_kw: cfg.max_power_kw,
            round_trip_eff: cfg.round_trip_eff,
            soc: cfg.initial_soc,
        }
    }

    /// Applies one ESS action for `dt_s` seconds at up to `block_kw` and
    /// returns the realized bus flow, signed positive when charging (drawing
    /// power) and negative when discharging (supplying power).
    pub fn step_ess(&mut self, u_ess: EssAction, block_kw: f64, dt_s: f64) -> f64 {
        let dt_h = dt_s / 3600.0;
        let flow = match u_ess {
            EssAction::Hold => 0.0,
            EssAction::Charge => {
                let headroom_kwh = (1.0 - self.soc) * self.capacity_kwh;
                let power = block_kw
                    .min(self.max_power_kw)
                    .min(headroom_kwh / (dt_h * self.round_trip_eff));
                self.soc += power * dt_h * self.round_trip_eff / self.capacity_kwh;
                power
            }
            EssAction::Discharge => {
                let available_kwh = self.soc * self.capacity_kwh;
                let power = block_kw.min(self.max_power_kw).min(available_kwh / dt_h);
                self.soc -= power * dt_h / self.capacity_kwh;
                -power
            }
        };
        self.soc = self.soc.clamp(0.0, 1.0);
        flow
    }
}

/// Quartile mapping from continuous state of charge to the discrete SoC
/// alphabet the community model reasons over.
pub fn soc_level(soc: f64) -> EssSocState {
    if soc < 0.25 {
        EssSocState::Empty
    } else if soc < 0.5 {
        EssSocState::Low
    } else if soc < 0.75 {
        EssSocState::High
    } else {
        EssSocState::Full
    }
}

/// Conditions the joint belief on the measured battery level. The manager
/// owns the battery, so only the building loads stay hidden; when the
/// belief carries no mass on the measured level, the building-pair marginal
/// is kept and the SoC factor is replaced outright.
pub fn ground_belief_on_soc(belief: &Categorical, level: EssSocState) -> Categorical {
    let l = level.index();
    let conditioned: Vec<f64> = (0..NUM_STATES)
        .map(|s| if s % 4 == l { belief.get(s) } else { 0.0 })
        .collect();
    if let Ok(c) = Categorical::from_weights(&conditioned) {
        return c;
    }
    let mut product = vec![0.0; NUM_STATES];
    for pair in 0..9 {
        let marginal: f64 = (0..4).map(|e| belief.get(pair * 4 + e)).sum();
        product[pair * 4 + l] = marginal;
    }
    Categorical::from_weights(&product).expect("belief marginals are normalizable")
}

/// Pearson correlation; 0 when either series has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// One building-layer trace row. The CSV contract covers the first ten
/// fields; temperature and electrical power ride along for the community
/// layer and the comfort statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingTraceRow {
    pub step: usize,
    pub phi_c: f64,
    pub target_c: f64,
    pub mu_occ: f64,
    pub true_occ: f64,
    pub mu_inf: f64,
    pub true_inf: f64,
    pub airflow_kgps: f64,
    pub supply_c: f64,
    pub vfe: f64,
    pub temperature_c: f64,
    pub power_kw: f64,
}

pub fn building_trace_csv(rows: &[BuildingTraceRow]) -> String {
    let mut out = String::from(
        "step,phi_c,target_c,mu_occ,true_occ,mu_inf,true_inf,airflow_kgps,supply_c,vfe\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step,
            r.phi_c,
            r.target_c,
            r.mu_occ,
            r.true_occ,
            r.mu_inf,
            r.true_inf,
            r.airflow_kgps,
            r.supply_c,
            r.vfe
        ));
    }
    out
}

/// Closed-loop simulator for one building: true zone state, noisy sensor,
/// and the continuous agent chasing whatever target it is handed.
pub struct BuildingSim {
    profile: ExogenousProfile,
    params: ThermalParams,
    vfe_cfg: VfeConfig,
    prior: PriorModel,
    sensor: SensorModel,
    cop: f64,
    plug_base_kw: f64,
    plug_per_person_kw: f64,
    truth: ZoneTruth,
    prev_temp: f64,
    belief: ContinuousBelief,
    action: HvacAction,
    step: usize,
}

impl BuildingSim {
    pub fn new(
        profile: ExogenousProfile,
        world: &WorldConfig,
        agents: &AgentConfig,
        sensor_seed: u64,
    ) -> Self {
        let schedule = agents.prior_schedule(profile.len(), world.thermal.dt);
        let (occ0, inf0) = schedule[0];
        let truth = ZoneTruth {
            temperature: world.initial_temp_c,
            occupancy: profile.occupancy[0],
            infiltration: profile.infiltration[0],
        };
        Self {
            prior: PriorModel::Schedule(schedule),
            params: world.thermal,
            vfe_cfg: agents.vfe,
            sensor: SensorModel::new(agents.vfe.sigma_z, sensor_seed),
            cop: world.cop,
            plug_base_kw: world.plug_base_kw,
            plug_per_person_kw: world.plug_per_person_kw,
            truth,
            prev_temp: world.initial_temp_c,
            belief: ContinuousBelief::new(
                occ0,
                inf0,
                agents.sigma_omega_occ,
                agents.sigma_omega_inf,
            ),
            action: HvacAction::new(0.0, 18.0),
            step: 0,
            profile,
        }
    }

    pub fn steps_remaining(&self) -> usize {
        self.profile.len().saturating_sub(self.step)
    }

    /// One observe -> infer -> act -> advance cycle toward `target`.
    pub fn step(&mut self, target: f64) -> Result<BuildingTraceRow, BuildingError> {
        let t = self.step;
        let ambient = self.profile.ambient[t];
        let phi = self.sensor.observe(&self.truth);
        let (prior_occ, prior_inf) = self.prior.prior_at(t, &self.belief);
        let ctx = StepContext {
            observed_phi: phi,
            prev_temp: self.prev_temp,
            applied_action: self.action,
            ambient,
            target_rho: target,
            prior_occ,
            prior_inf,
        };
        let (belief, action, diag) =
            agent_step(&self.belief, &self.action, &ctx, &self.vfe_cfg, &self.params)?;

        let hvac_kw = action.airflow * self.params.c_p
            * (action.supply_temp - self.truth.temperature).abs()
            / (self.cop * 1000.0);
        let plug_kw = self.plug_base_kw + self.plug_per_person_kw * self.truth.occupancy;
        let row = BuildingTraceRow {
            step: t,
            phi_c: phi,
            target_c: target,
            mu_occ: belief.mu_occ,
            true_occ: self.truth.occupancy,
            mu_inf: belief.mu_inf,
            true_inf: self.truth.infiltration,
            airflow_kgps: action.airflow,
            supply_c: action.supply_temp,
            vfe: diag.vfe,
            temperature_c: self.truth.temperature,
            power_kw: hvac_kw + plug_kw,
        };

        self.prev_temp = self.truth.temperature;
        self.truth = advance_world(&self.truth, &action, self.profile.row(t), &self.params);
        self.belief = belief;
        self.action = action;
        self.step = t + 1;
        Ok(row)
    }
}

fn comfort_fraction(rows: &[BuildingTraceRow], band: f64) -> f64 {
    let eligible: Vec<&BuildingTraceRow> =
        rows.iter().filter(|r| r.step >= COMFORT_WARMUP_STEPS).collect();
    if eligible.is_empty() {
        return 1.0;
    }
    let ok = eligible
        .iter()
        .filter(|r| (r.temperature_c - r.target_c).abs() <= band)
        .count();
    ok as f64 / eligible.len() as f64
}

fn occupancy_correlation(rows: &[BuildingTraceRow]) -> f64 {
    let inferred: Vec<f64> = rows.iter().map(|r| r.mu_occ).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.true_occ).collect();
    pearson(&inferred, &truth)
}

fn load_profile(path: Option<&str>, variant: usize) -> Result<ExogenousProfile, ScenarioError> {
    match path {
        Some(p) => Ok(ExogenousProfile::from_csv_str(&std::fs::read_to_string(p)?)?),
        None => Ok(ExogenousProfile::summer_day_variant(variant)),
    }
}

/// Stand-alone building-layer run at the unmodified setpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildingRun {
    pub rows: Vec<BuildingTraceRow>,
    pub comfort_fraction: f64,
    pub occupancy_correlation: f64,
}

pub fn run_building_day(config: &ScenarioConfig) -> Result<BuildingRun, ScenarioError> {
    config.validate()?;
    let profile = load_profile(config.profiles.building_1.as_deref(), 0)?;
    let mut sim = BuildingSim::new(
        profile,
        &config.world,
        &config.agents,
        config.seeds.sensor_building_1,
    );
    let steps = sim.steps_remaining();
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = sim
            .step(config.world.base_setpoint_c)
            .map_err(|source| ScenarioError::Agent {
                building: 1,
                step: t,
                source,
            })?;
        rows.push(row);
    }
    let comfort = comfort_fraction(&rows, config.world.comfort_band_c);
    let corr = occupancy_correlation(&rows);
    Ok(BuildingRun {
        rows,
        comfort_fraction: comfort,
        occupancy_correlation: corr,
    })
}

/// Exogenous market day derived from the config: tariff, PV bell curve, and
/// a day-ahead plan committed with seeded forecast error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketDay {
    pub steps: Vec<MarketStep>,
}

pub fn build_market_day(config: &ScenarioConfig) -> MarketDay {
    let market = &config.market;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.market);
    let prior = config
        .agents
        .prior_schedule(COMMUNITY_STEPS_PER_DAY, COMMUNITY_DT_HOURS * 3600.0);
    let steps = (0..COMMUNITY_STEPS_PER_DAY)
        .map(|k| {
            let hour = k as f64 * COMMUNITY_DT_HOURS;
            let pv_kw = if (6.0..18.0).contains(&hour) {
                market.pv_peak_kw * (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().powi(2)
            } else {
                0.0
            };
            let nominal_load = 2.0
                * (config.world.plug_base_kw
                    + config.world.plug_per_person_kw * prior[k].0
                    + market.hvac_nominal_kw);
            let err = rng.gen_range(-market.da_error_fraction..=market.da_error_fraction);
            MarketStep {
                price: market.spot_price_per_kwh[k],
                pv_kw,
                da_target_kw: (nominal_load - pv_kw) * (1.0 + err),
                dt_hours: COMMUNITY_DT_HOURS,
            }
        })
        .collect();
    MarketDay { steps }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommunityTraceRow {
    pub step: usize,
    pub selected_action_index: usize,
    pub u_b: BuildingAction,
    pub u_ess: EssAction,
    pub u_m: MarketAction,
    pub efe: f64,
    pub expected_cost: f64,
    pub ambiguity: f64,
    pub candidates: u64,
    pub load_kw: f64,
    pub pv_used_kw: f64,
    /// Signed, positive when the battery supplies the bus (discharging).
    pub battery_flow_kw: f64,
    pub spot_buy_kw: f64,
    pub spot_sell_kw: f64,
    pub da_baseline_kw: f64,
    pub pv_curtailed_kw: f64,
    /// Settlement imbalance after the intraday hedge (kW).
    pub imbalance_kw: f64,
    pub spot_cost: f64,
    pub soc: f64,
    pub degenerate_evidence: bool,
}

pub fn community_trace_csv(rows: &[CommunityTraceRow]) -> String {
    let mut out = String::from(
        "step,selected_action_index,u_b,u_ess,u_m,efe,expected_cost,ambiguity,candidates,\
         load_kw,pv_used_kw,battery_flow_kw,spot_buy_kw,spot_sell_kw,da_baseline_kw,\
         pv_curtailed_kw,imbalance_kw,spot_cost,soc\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step,
            r.selected_action_index,
            r.u_b,
            r.u_ess,
            r.u_m,
            r.efe,
            r.expected_cost,
            r.ambiguity,
            r.candidates,
            r.load_kw,
            r.pv_used_kw,
            r.battery_flow_kw,
            r.spot_buy_kw,
            r.spot_sell_kw,
            r.da_baseline_kw,
            r.pv_curtailed_kw,
            r.imbalance_kw,
            r.spot_cost,
            r.soc
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub spot_cost: f64,
    pub deviation_kwh: f64,
    pub pv_curtailed_kwh: f64,
    pub battery_throughput_kwh: f64,
    pub comfort_fraction: Vec<f64>,
    pub occupancy_correlation: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub building_traces: Vec<Vec<BuildingTraceRow>>,
    pub community_trace: Vec<CommunityTraceRow>,
    pub totals: Totals,
    pub degenerate_evidence_steps: usize,
}

impl RunReport {
    /// Recomputes the totals from the stored traces; construction uses the
    /// same summation, so equality is exact.
    pub fn totals_from_traces(&self) -> Totals {
        let mut t = Totals {
            spot_cost: 0.0,
            deviation_kwh: 0.0,
            pv_curtailed_kwh: 0.0,
            battery_throughput_kwh: 0.0,
            comfort_fraction: Vec::new(),
            occupancy_correlation: Vec::new(),
        };
        for r in &self.community_trace {
            t.spot_cost += r.spot_cost;
            t.deviation_kwh += r.imbalance_kw.abs() * COMMUNITY_DT_HOURS;
            t.pv_curtailed_kwh += r.pv_curtailed_kw * COMMUNITY_DT_HOURS;
            t.battery_throughput_kwh += r.battery_flow_kw.abs() * COMMUNITY_DT_HOURS;
        }
        t.comfort_fraction = self
            .building_traces
            .iter()
            .map(|rows| comfort_fraction(rows, 2.0))
            .collect();
        t.occupancy_correlation = self
            .building_traces
            .iter()
            .map(|rows| occupancy_correlation(rows))
            .collect();
        t
    }
}

/// Full dual-layer day. `probe_alphas`, when non-empty, re-plans every
/// community step with each listed ambiguity weight on the SAME belief and
/// market context and records the selected-policy ambiguity, giving a
/// fixed-context view of how the ambiguity pressure shifts the argmin.
pub fn run_community_day_probed(
    config: &ScenarioConfig,
    probe_alphas: &[f64],
) -> Result<(RunReport, Vec<Vec<f64>>), ScenarioError> {
    config.validate()?;
    let world = &config.world;
    let model = CommunityModel::build(&config.community_model).map_err(|e| {
        ScenarioError::Config {
            problems: vec![e.to_string()],
        }
    })?;
    let market = build_market_day(config);
    let econ = &config.economics.levels;
    let weights = &config.economics.weights;

    let mut sims = vec![
        BuildingSim::new(
            load_profile(config.profiles.building_1.as_deref(), 0)?,
            world,
            &config.agents,
            config.seeds.sensor_building_1,
        ),
        BuildingSim::new(
            load_profile(config.profiles.building_2.as_deref(), 1)?,
            world,
            &config.agents,
            config.seeds.sensor_building_2,
        ),
    ];

    let mut ess = EssPhysical::from_config(&world.ess);
    let mut belief = Categorical::uniform(crate::community::NUM_STATES);
    let mut prev_action = JointAction::from_index(4); // NoChange, Hold, NoTransaction
    let mut offset_action = BuildingAction::NoChange;
    let mut prev_powers = [0.0_f64; 2];
    let mut prev_grid_net = 0.0_f64;
    let mut degenerate_steps = 0;

    let mut building_traces = vec![Vec::with_capacity(STEPS_PER_DAY); 2];
    let mut community_trace = Vec::with_capacity(COMMUNITY_STEPS_PER_DAY);
    let mut probe = Vec::with_capacity(COMMUNITY_STEPS_PER_DAY);

    // Market context padded so the final steps still see a full horizon.
    let horizon = config.planner.horizon;
    let mut padded = market.steps.clone();
    let last = *padded.last().expect("non-empty market day");
    padded.extend(std::iter::repeat(last).take(horizon.saturating_sub(1)));

    for k in 0..COMMUNITY_STEPS_PER_DAY {
        // Buildings run under the setpoint downlinked at the previous step.
        let target = apply_reduction(offset_action, world.base_setpoint_c, world);
        let mut powers = [0.0_f64; 2];
        for (i, sim) in sims.iter_mut().enumerate() {
            let mut total = 0.0;
            for _ in 0..BUILDING_STEPS_PER_COMMUNITY_STEP {
                let step_index = sim.step;
                let row = sim.step(target).map_err(|source| ScenarioError::Agent {
                    building: i + 1,
                    step: step_index,
                    source,
                })?;
                total += row.power_kw;
                building_traces[i].push(row);
            }
            powers[i] = total / BUILDING_STEPS_PER_COMMUNITY_STEP as f64;
        }

        // The manager sees only discretized signals.
        let observation = JointObservation {
            o_b1: discretize_building_signal(powers[0], prev_powers[0], &world.discretizer),
            o_b2: discretize_building_signal(powers[1], prev_powers[1], &world.discretizer),
            o_ess: discretize_flow(prev_grid_net, &world.discretizer),
        };
        let update = belief_update_with_fallback(&belief, prev_action, observation, &model);
        if update.degenerate_evidence {
            degenerate_steps += 1;
        }
        // The battery is the manager's own asset: pin its factor of the
        // belief to the measured level before planning.
        belief = ground_belief_on_soc(&update.posterior, soc_level(ess.soc));

        let slice = &padded[k..k + horizon];
        let result = plan(&belief, slice, &model, econ, weights, &config.planner);

        if !probe_alphas.is_empty() {
            let row: Vec<f64> = probe_alphas
                .iter()
                .map(|&alpha| {
                    let cfg = EfeConfig {
                        alpha_ambiguity: alpha,
                        ..config.planner
                    };
                    plan(&belief, slice, &model, econ, weights, &cfg).ambiguity
                })
                .collect();
            probe.push(row);
        }

        // Apply the first action: battery, PV routing, spot settlement.
        let action = result.action;
        let flow = ess.step_ess(
            action.u_ess,
            econ.ess_block_kw,
            COMMUNITY_DT_HOURS * 3600.0,
        );
        let charge = flow.max(0.0);
        let discharge = (-flow).max(0.0);
        let load = powers[0] + powers[1];
        let demand = load + charge - discharge;
        let pv = padded[k].pv_kw;
        // Selling licenses PV export; otherwise surplus PV is curtailed.
        let pv_used = if action.u_m == MarketAction::Sell {
            pv
        } else {
            pv.min(demand.max(0.0))
        };
        let curtailed = pv - pv_used;
        let grid_net = demand - pv_used;
        let spot_buy = grid_net.max(0.0);
        let spot_sell = (-grid_net).max(0.0);
        let price = padded[k].price;
        // Buying hedges one block intraday at spot and shifts the imbalance.
        let (trade_cost, imbalance_shift) = match action.u_m {
            MarketAction::Buy => (
                price * COMMUNITY_DT_HOURS * econ.ess_block_kw,
                -econ.ess_block_kw,
            ),
            _ => (0.0, 0.0),
        };
        let imbalance = grid_net - padded[k].da_target_kw + imbalance_shift;
        let spot_cost = price * COMMUNITY_DT_HOURS * imbalance.max(0.0)
            - weights.sell_ratio * price * COMMUNITY_DT_HOURS * (-imbalance).max(0.0)
            + trade_cost;

        community_trace.push(CommunityTraceRow {
            step: k,
            selected_action_index: action.index(),
            u_b: action.u_b,
            u_ess: action.u_ess,
            u_m: action.u_m,
            efe: result.efe,
            expected_cost: result.expected_cost,
            ambiguity: result.ambiguity,
            candidates: result.candidates_evaluated,
            load_kw: load,
            pv_used_kw: pv_used,
            battery_flow_kw: discharge - charge,
            spot_buy_kw: spot_buy,
            spot_sell_kw: spot_sell,
            da_baseline_kw: padded[k].da_target_kw,
            pv_curtailed_kw: curtailed,
            imbalance_kw: imbalance,
            spot_cost,
            soc: ess.soc,
            degenerate_evidence: update.degenerate_evidence,
        });

        offset_action = action.u_b;
        prev_action = action;
        prev_powers = powers;
        prev_grid_net = grid_net;
    }

    let mut report = RunReport {
        building_traces,
        community_trace,
        totals: Totals {
            spot_cost: 0.0,
            deviation_kwh: 0.0,
            pv_curtailed_kwh: 0.0,
            battery_throughput_kwh: 0.0,
            comfort_fraction: Vec::new(),
            occupancy_correlation: Vec::new(),
        },
        degenerate_evidence_steps: degenerate_steps,
    };
    report.totals = report.totals_from_traces();
    // Comfort uses the configured band, not the recompute default.
    report.totals.comfort_fraction = report
        .building_traces
        .iter()
        .map(|rows| comfort_fraction(rows, world.comfort_band_c))
        .collect();
    Ok((report, probe))
}

pub fn run_community_day(config: &ScenarioConfig) -> Result<RunReport, ScenarioError> {
    run_community_day_probed(config, &[]).map(|(report, _)| report)
}

/// Options for the independent full-information baseline optimizer:
/// multi-start, central finite-difference gradients, and a backtracking
/// line search (deliberately a different algorithm from the adjoint-based
/// full-horizon optimizer it is compared against).
#[derive(Debug, Clone, Copy)]
pub struct BaselineOptions {
    pub max_iters: usize,
    pub fd_airflow: f64,
    pub fd_supply: f64,
    pub initial_step: f64,
    pub obj_tol: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            max_iters: 400,
            fd_airflow: 1e-6,
            fd_supply: 1e-4,
            initial_step: 4.0,
            obj_tol: 1e-10,
        }
    }
}

fn fd_gradient(problem: &HorizonProblem, actions: &[HvacAction], opts: &BaselineOptions) -> Vec<(f64, f64)> {
    let mut grad = Vec::with_capacity(actions.len());
    let mut work = actions.to_vec();
    for t in 0..actions.len() {
        let a = actions[t];
        work[t] = HvacAction {
            airflow: a.airflow + opts.fd_airflow,
            ..a
        };
        let plus = problem.objective(&work);
        work[t] = HvacAction {
            airflow: a.airflow - opts.fd_airflow,
            ..a
        };
        let minus = problem.objective(&work);
        let g_air = (plus - minus) / (2.0 * opts.fd_airflow);

        work[t] = HvacAction {
            supply_temp: a.supply_temp + opts.fd_supply,
            ..a
        };
        let plus = problem.objective(&work);
        work[t] = HvacAction {
            supply_temp: a.supply_temp - opts.fd_supply,
            ..a
        };
        let minus = problem.objective(&work);
        let g_sup = (plus - minus) / (2.0 * opts.fd_supply);

        work[t] = a;
        grad.push((g_air, g_sup));
    }
    grad
}

fn baseline_descent(
    problem: &HorizonProblem,
    start: HvacAction,
    opts: &BaselineOptions,
) -> (Vec<HvacAction>, f64, bool) {
    // Per-coordinate preconditioning so airflow and supply move at
    // comparable physical rates under a single line-search multiplier.
    const PRE_AIRFLOW: f64 = 1e-3;
    const PRE_SUPPLY: f64 = 5e-2;
    let n = problem.horizon();
    let mut actions = vec![start; n];
    let mut obj = problem.objective(&actions);
    let mut step = opts.initial_step;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let grad = fd_gradient(problem, &actions, opts);
        let mut improved = false;
        let mut local = step;
        for _ in 0..40 {
            let trial: Vec<HvacAction> = actions
                .iter()
                .zip(&grad)
                .map(|(a, (g_air, g_sup))| {
                    HvacAction::new(
                        a.airflow - local * PRE_AIRFLOW * g_air,
                        a.supply_temp - local * PRE_SUPPLY * g_sup,
                    )
                })
                .collect();
            let trial_obj = problem.objective(&trial);
            if trial_obj < obj {
                if obj - trial_obj < opts.obj_tol {
                    converged = true;
                }
                actions = trial;
                obj = trial_obj;
                improved = true;
                step = local * 1.5;
                break;
            }
            local *= 0.5;
        }
        if !improved {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    (actions, obj, converged)
}

/// Fully observable benchmark: optimizes the same horizon objective on the
/// true dynamics with a multi-start finite-difference solver.
pub fn baseline_full_information(
    problem: &HorizonProblem,
    opts: &BaselineOptions,
) -> HorizonSolution {
    let starts = [
        HvacAction::new(0.05, 15.0),
        HvacAction::new(0.3, 10.0),
        HvacAction::new(0.15, 20.0),
    ];
    let mut best: Option<(Vec<HvacAction>, f64, bool)> = None;
    for start in starts {
        let candidate = baseline_descent(problem, start, opts);
        if best.as_ref().map_or(true, |(_, obj, _)| candidate.1 < *obj) {
            best = Some(candidate);
        }
    }
    let (actions, objective, converged) = best.expect("at least one start");
    let temperatures = problem.rollout(&actions);
    HorizonSolution {
        actions,
        temperatures,
        objective,
        converged,
    }
}

/// Builds the perfect-information problem for building 1 of a scenario.
pub fn full_information_problem<'a>(
    config: &'a ScenarioConfig,
    profile: &'a ExogenousProfile,
    targets: &'a [f64],
) -> HorizonProblem<'a> {
    HorizonProblem {
        initial_temp: config.world.initial_temp_c,
        targets,
        truth: profile,
        sigma_rho: config.agents.vfe.sigma_rho,
        params: &config.world.thermal,
    }
}

/// Convenience pair for the optimizer-equivalence experiment: the adjoint
/// full-horizon solve and the independent baseline on the same day.
pub fn compare_baseline(
    config: &ScenarioConfig,
) -> Result<(HorizonSolution, HorizonSolution), ScenarioError> {
    config.validate()?;
    let profile = load_profile(config.profiles.building_1.as_deref(), 0)?;
    let targets = vec![config.world.base_setpoint_c; profile.len()];
    let problem = full_information_problem(config, &profile, &targets);
    let aif = optimize_full_horizon(&problem, &HorizonOptions::default());
    let baseline = baseline_full_information(&problem, &BaselineOptions::default());
    Ok((aif, baseline))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub runs: Vec<(f64, RunReport)>,
    /// probe[k][i]: selected-policy ambiguity at community step k when
    /// re-planning with alphas[i] on the reference run's belief context.
    pub probe_ambiguity: Vec<Vec<f64>>,
}

/// Runs the community day once per ambiguity weight with identical seeds
/// and profiles, plus one reference run probing every weight per step.
pub fn sweep_ambiguity(
    config: &ScenarioConfig,
    alphas: &[f64],
) -> Result<SweepOutcome, ScenarioError> {
    if alphas.is_empty() {
        return Err(ScenarioError::Config {
            problems: vec!["alpha list: must not be empty".to_string()],
        });
    }
    let (_, probe_ambiguity) = run_community_day_probed(config, alphas)?;
    let mut runs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = config.clone();
        cfg.planner.alpha_ambiguity = alpha;
        runs.push((alpha, run_community_day(&cfg)?));
    }
    Ok(SweepOutcome {
        runs,
        probe_ambiguity,
    })
}
