//! Gradient-space medoid defense against targeted clean-label poisoning.
//!
//! During training, each class is summarized by facility-location medoids in
//! the space of last-layer loss gradients. Medoids that no other example is
//! nearest to are isolated points in low-density gradient regions; they are
//! dropped from the training set at regular intervals.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation used by the pipeline and the CLI.

pub mod cli;
pub mod data;
pub mod dump;
pub mod epic_defense;
pub mod error;
pub mod facility_location;
pub mod gradient_proxy;
pub mod labels;
pub mod poison_forge;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod theory_bench;
pub mod toy_trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ProxyMatrix = gradient_proxy::ProxyMatrix<f64>;
pub type ProxyMatrix32 = gradient_proxy::ProxyMatrix<f32>;
pub type DistanceOracle<'a> = gradient_proxy::DistanceOracle<'a, f64>;
pub type FacilityObjective<'a> = facility_location::FacilityObjective<'a, f64>;
pub type MedoidSelection = facility_location::MedoidSelection<f64>;
pub type DatasetState = data::DatasetState<f64>;
pub type DatasetState32 = data::DatasetState<f32>;
pub type ToyModel = toy_trainer::ToyModel<f64>;
pub type ToyModel32 = toy_trainer::ToyModel<f32>;
pub type TrainTrace = toy_trainer::TrainTrace<f64>;
pub type AttackSpec = poison_forge::AttackSpec<f64>;
pub type AttackResult = poison_forge::AttackResult<f64>;

pub use data::{BlobSpec, DropRecord};
pub use epic_defense::{DefenseConfig, RoundReport};
pub use facility_location::GreedyMode;
pub use gradient_proxy::ProxyMode;
pub use toy_trainer::{Architecture, BatchMode, LrSchedule};
