//! Conformal alignment: select generated outputs that are certified aligned
//! with finite-sample false discovery rate control.

pub mod alignment;
pub mod data;
pub mod error;
pub mod features;
pub mod generations;
pub mod linalg;
pub mod power;
pub mod predictor;
pub mod selection;
pub mod sim;

pub use data::{Dataset, Role, UnitRecord};
pub use error::{Error, Result};
pub use power::{CurvePoint, PowerBounds, RealizedMetrics};
pub use predictor::{Predictor, PredictorKind, TrainConfig};
pub use selection::{PipelineConfig, SelectionReport};
pub use sim::Scenario;
