//! Data side of the streaming trajectory predictor: global-frame scenarios,
//! the synthetic generator, sliding windows, focal-frame tensorization and the
//! evaluation metrics.

pub mod error;
pub mod generator;
pub mod geometry;
pub mod metrics;
pub mod polyline;
pub mod scenario;
pub mod tensorize;
pub mod window;

pub use error::{Error, Result};
pub use geometry::{normalize_angle, Pose2D, RigidTransform};
pub use scenario::{load_scenario, save_scenario, AgentType, LaneType, Scenario};
pub use tensorize::{tensorize, FutureTargets, TensorBundle, TensorizeConfig};
pub use window::{extract_window, streaming_schedule, ObservationWindow, Protocol, WindowConfig};
