//! The generative process: ground-truth zone thermal dynamics, true
//! occupancy/infiltration schedules, ambient temperature, and sensor noise.
//!
//! The zone follows a single explicit-Euler energy balance:
//!
//! ```text
//! T(t+1) = T(t) + dt * [ m c_p (T_sup - T) + OCC q_occ
//!                        + (U_w + m_ext c_p)(T_amb - T) ] / C_b
//! ```
//!
//! with dt = 300 s well inside stability for the default parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::building::HvacAction;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile series lengths differ: ambient {ambient}, occupancy {occupancy}, infiltration {infiltration}")]
    LengthMismatch {
        ambient: usize,
        occupancy: usize,
        infiltration: usize,
    },
    #[error("profile line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("profile value out of range at line {line}: {reason}")]
    Range { line: usize, reason: String },
}

/// Physical constants of the zone energy balance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThermalParams {
    /// Specific heat of air (J/kg/degC).
    pub c_p: f64,
    /// Building thermal capacity (J/degC).
    pub c_b: f64,
    /// Envelope heat-transfer coefficient (W/degC).
    pub u_w: f64,
    /// Heat generated per occupant (W).
    pub q_occ: f64,
    /// Timestep (s).
    pub dt: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            c_p: 1005.0,
            c_b: 2.0e6,
            u_w: 50.0,
            q_occ: 102.0,
            dt: 300.0,
        }
    }
}

/// Ground-truth zone state evolved by the generative process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneTruth {
    /// Zone air temperature (degC).
    pub temperature: f64,
    /// True occupant count (persons, non-negative).
    pub occupancy: f64,
    /// True external infiltration airflow (kg/s, non-negative).
    pub infiltration: f64,
}

/// Exogenous drivers per building-layer timestep (288 rows for a day).
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousProfile {
    pub ambient: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub infiltration: Vec<f64>,
}

/// Building-layer timesteps per day (5-minute resolution).
pub const STEPS_PER_DAY: usize = 288;

impl ExogenousProfile {
    pub fn new(
        ambient: Vec<f64>,
        occupancy: Vec<f64>,
        infiltration: Vec<f64>,
    ) -> Result<Self, ProfileError> {
        if ambient.len() != occupancy.len() || ambient.len() != infiltration.len() {
            return Err(ProfileError::LengthMismatch {
                ambient: ambient.len(),
                occupancy: occupancy.len(),
                infiltration: infiltration.len(),
            });
        }
        Ok(Self {
            ambient,
            occupancy,
            infiltration,
        })
    }

    pub fn len(&self) -> usize {
        self.ambient.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ambient.is_empty()
    }

    /// (ambient, occupancy, infiltration) at step `t`.
    pub fn row(&self, t: usize) -> (f64, f64, f64) {
        (self.ambient[t], self.occupancy[t], self.infiltration[t])
    }

    /// Built-in summer day: ambient sinusoid 24..34 degC peaking at 15:00,
    /// a stepped occupancy schedule, and a 0.03 kg/s open-window infiltration
    /// event from 14:00 to 15:30.
    pub fn default_summer_day() -> Self {
        Self::summer_day_variant(0)
    }

    /// Variant 1 shifts the occupancy pattern for a second building so the
    /// two load profiles are not identical.
    pub fn summer_day_variant(variant: usize) -> Self {
        let mut ambient = Vec::with_capacity(STEPS_PER_DAY);
        let mut occupancy = Vec::with_capacity(STEPS_PER_DAY);
        let mut infiltration = Vec::with_capacity(STEPS_PER_DAY);
        for t in 0..STEPS_PER_DAY {
            let hour = t as f64 * 300.0 / 3600.0;
            ambient.push(29.0 + 5.0 * (std::f64::consts::TAU * (hour - 15.0) / 24.0).cos());
            let occ = match variant {
                0 => match hour {
                    h if h < 7.0 => 0.0,
                    h if h < 9.0 => 3.0,
                    h if h < 17.0 => 1.0,
                    h if h < 23.0 => 4.0,
                    _ => 1.0,
                },
                _ => match hour {
                    h if h < 6.0 => 0.0,
                    h if h < 8.0 => 2.0,
                    h if h < 16.0 => 2.0,
                    h if h < 22.0 => 3.0,
                    _ => 1.0,
                },
            };
            occupancy.push(occ);
            let open_window = if variant == 0 {
                (14.0..15.5).contains(&hour)
            } else {
                (10.0..11.0).contains(&hour)
            };
            infiltration.push(if open_window { 0.03 } else { 0.0 });
        }
        Self {
            ambient,
            occupancy,
            infiltration,
        }
    }

    /// Parses the columnar profile format:
    /// `step,ambient_c,occupancy,infiltration_kgps`.
    pub fn from_csv_str(text: &str) -> Result<Self, ProfileError> {
        let mut ambient = Vec::new();
        let mut occupancy = Vec::new();
        let mut infiltration = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("step")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(ProfileError::Parse {
                    line: i + 1,
                    reason: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, ProfileError> {
                s.trim().parse().map_err(|e| ProfileError::Parse {
                    line: i + 1,
                    reason: format!("{e}: {s:?}"),
                })
            };
            let amb = parse(fields[1])?;
            let occ = parse(fields[2])?;
            let inf = parse(fields[3])?;
            if occ < 0.0 || inf < 0.0 {
                return Err(ProfileError::Range {
                    line: i + 1,
                    reason: "occupancy and infiltration must be non-negative".into(),
                });
            }
            ambient.push(amb);
            occupancy.push(occ);
            infiltration.push(inf);
        }
        Self::new(ambient, occupancy, infiltration)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("step,ambient_c,occupancy,infiltration_kgps\n");
        for t in 0..self.len() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                t, self.ambient[t], self.occupancy[t], self.infiltration[t]
            ));
        }
        out
    }
}

/// Seeded Gaussian sensor on the zone temperature; sigma_z = 0 is noiseless.
#[derive(Debug, Clone)]
pub struct SensorModel {
    pub sigma_z: f64,
    rng: ChaCha8Rng,
}

impl SensorModel {
    pub fn new(sigma_z: f64, seed: u64) -> Self {
        assert!(sigma_z >= 0.0, "sigma_z must be non-negative");
        Self {
            sigma_z,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws a noisy measurement of the current zone temperature from the
    /// deterministic seeded stream.
    pub fn observe(&mut self, state: &ZoneTruth) -> f64 {
        if self.sigma_z == 0.0 {
            return state.temperature;
        }
        let normal = Normal::new(0.0, self.sigma_z).expect("valid std");
        state.temperature + normal.sample(&mut self.rng)
    }
}

/// One explicit-Euler step of the zone energy balance.
pub fn step_temperature(
    state: &ZoneTruth,
    action: &HvacAction,
    ambient: f64,
    params: &ThermalParams,
) -> f64 {
    let hvac = action.airflow * params.c_p * (action.supply_temp - state.temperature);
    let internal = state.occupancy * params.q_occ;
    let envelope =
        (params.u_w + state.infiltration * params.c_p) * (ambient - state.temperature);
    state.temperature + params.dt * (hvac + internal + envelope) / params.c_b
}

/// Advances the world one step: temperature integrates with the CURRENT
/// occupancy/infiltration, which are then overwritten from the schedule row
/// for the next step.
pub fn advance_world(
    state: &ZoneTruth,
    action: &HvacAction,
    profile_row: (f64, f64, f64),
    params: &ThermalParams,
) -> ZoneTruth {
    let (ambient, occupancy, infiltration) = profile_row;
    ZoneTruth {
        temperature: step_temperature(state, action, ambient, params),
        occupancy,
        infiltration,
    }
}
