//! Compton camera imaging workbench: far-field list-mode events, scatter
//! kinematics, an analytic two-layer camera simulator, the classical
//! reconstructors (SBP, list-mode MLEM, SOE), label synthesis, image
//! metrics and the hybrid training loss.

pub mod codec;
pub mod dataset;
pub mod events;
pub mod geom;
pub mod imaging;
pub mod kinematics;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod simulator;

pub use events::{Axis, EventList, FarFieldEvent};
pub use imaging::{AngularImage, Grid};
pub use kinematics::ConeParams;
pub use simulator::{CameraModel, SimOptions, SourceSpec};
