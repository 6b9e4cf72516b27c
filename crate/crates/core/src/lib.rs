//! Budget-constrained configuration tuning.
//!
//! The crate searches mixed-type knob spaces for settings that maximize a
//! measured metric. Exploration uses Latin Hypercube designs, optimization
//! uses recursive random search, and systems under tune plug in through the
//! [`harness`] traits.

pub mod adapters;
pub mod analysis;
pub mod error;
pub mod harness;
pub mod rng;
pub mod sampling;
pub mod search;
pub mod space;
pub mod synth;

pub use error::{AdapterError, AnalysisError, HarnessError, SamplingError, SearchError, SpaceError, SurfaceError};
pub use search::{Direction, Objective, RrsParams, Sample, Strategy, TuningReport};
pub use space::{ConfigSetting, Parameter, ParameterSpace, UnitBox, UnitPoint, Value};
