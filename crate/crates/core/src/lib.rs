//! Dual-layer active-inference energy management.
//!
//! Layer 1 is a continuous agent per building: it infers hidden occupancy
//! and infiltration from a noisy zone-temperature sensor and descends a
//! preference-augmented variational free energy with respect to both the
//! hidden-state means and the HVAC action pair.
//!
//! Layer 2 is a discrete agent for the community manager: a 36-state
//! categorical belief over (building 1 load, building 2 load, ESS SoC), a
//! Kronecker-factored likelihood/transition model, and rolling-horizon
//! policy selection by expected-free-energy minimization over battery,
//! demand-reduction, and spot-market actions.
//!
//! The `scenario` module binds the two layers into runnable day-long
//! experiments and carries the physical ESS, market context, and baselines.

pub mod belief_math;
pub mod building;
pub mod community;
pub mod planner;
pub mod scenario;
pub mod thermal;

pub use belief_math::{BeliefMathError, Categorical, StochasticMatrix};
pub use building::{ContinuousBelief, HvacAction, VfeConfig};
pub use community::{CommunityModel, JointAction, JointObservation, JointState};
pub use planner::{CostWeights, EfeConfig, PolicyEvaluation, StateEconomics};
pub use scenario::{RunReport, ScenarioConfig, ScenarioError};
pub use thermal::{ExogenousProfile, SensorModel, ThermalParams, ZoneTruth};
