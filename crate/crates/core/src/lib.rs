//! Domain flow: continuous interpolation between a source and one or more
//! target image domains, with training, dataset export, domain-adaptation
//! boosting and a transport-independent translation service.

pub mod autograd;
pub mod boost;
pub mod checkpoint;
pub mod data;
pub mod domainness;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod repro;
pub mod service;
pub mod tensor;
pub mod training;
pub mod translation;

pub use checkpoint::{load_model, LoadedModel};
pub use domainness::{BetaSchedule, Domainness, DomainnessValue, DomainnessVector};
pub use error::{Error, Result};
pub use objectives::{FlowModels, GanLossKind, LossBreakdown, ObjectiveConfig};
pub use tensor::Tensor;
pub use training::{StepReport, TrainConfig, TrainState};
pub use translation::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
