//! Simulation lab: data-generating processes, true regimes, repeated-sampling
//! studies and plasmode simulation.

pub mod dgp;
pub mod plasmode;
pub mod study;
pub mod truth;

pub use dgp::{Assignment, Dgp, OneStageDgp, Simulated, TwoStageDgp};
pub use plasmode::{PlasmodeModel, PlasmodeStudyConfig, PlasmodeStudyResult};
pub use study::{ArmMetrics, CoefMetrics, Scenario, StudyConfig, StudyResult};
pub use truth::{EvalSet, Rollout, TrueRegime};
