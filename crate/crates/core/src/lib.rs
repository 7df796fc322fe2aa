//! Federated sparse zeroth-order optimization.
//!
//! Clients estimate gradients from two forward evaluations along a Gaussian
//! direction restricted to a static sparse mask, and upload only the scalar
//! projected gradients. Because every perturbation is regenerated from a seed
//! shared with the server, the server can replay ("virtual path") each
//! client's local trajectory bit-for-bit, aggregate it, and inspect it. The
//! replayed trajectories also feed the GradIP heterogeneity detector that
//! restricts extremely non-IID clients to a single local step.
//!
//! Module map:
//!
//! * [`prng`] - seed schedule and replayable masked Gaussian perturbations
//! * [`model`] - desk-scale objectives with exact gradients
//! * [`masking`] - sparse masks and their construction
//! * [`zo`] - the two-point masked estimator and the local update step
//! * [`fed`] - the round protocol, virtual-path replay, and cost model
//! * [`gradip`] - GradIP trajectories and early-stopping classification
//! * [`data`] - synthetic datasets and client partitions
//! * [`experiment`] - JSON configs, metrics files, and the runner commands

pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod gradip;
pub mod masking;
pub mod model;
pub mod prng;
pub mod zo;

pub use error::{Error, Result};
pub use masking::{SparseMask, SparseVector};
pub use model::{Batch, ModelSpec, ParamVector};
pub use prng::SeedSchedule;
