//! Dynamic treatment regime estimation by dynamic weighted ordinary least
//! squares, with sensitivity analysis for unmeasured confounding.

pub mod confound;
pub mod dwols;
pub mod error;
pub mod linmodel;
pub mod mcsa;
pub mod mnboot;
pub mod panel;
pub mod rng;
pub mod simlab;
pub mod specfile;

pub use confound::{ConfounderModel, ConfounderSpec, Link, NormalPrior, PriorDraw, PriorSpec};
pub use dwols::{DwolsFit, Regime, StageModelSpec, StageTerms};
pub use error::{Error, ErrorKind, Result};
pub use linmodel::{DesignMatrix, Tolerances, WeightScheme};
pub use mcsa::{McsaConfig, McsaData, McsaFit};
pub use mnboot::{CiConfig, CiReport, CovarianceEstimator, Interval};
pub use panel::{Panel, PanelLayout, StageLayout, Term};
