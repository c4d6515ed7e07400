//! Feature-enhanced collaborative-filtering event predictor.
//!
//! One model predicts the probability of an event (click, conversion,
//! engagement) for a (user, ad) pair from learned latent factor vectors.
//! User features interact pairwise through entry-wise block products, ad
//! features add up, and bin-valued similarity features contribute additive
//! logistic-regression weights. Training is one-pass online gradient descent
//! with AdaGrad step sizes over a time-ordered event stream.

pub mod event;
pub mod model;
pub mod schema;
pub mod snapshot;
pub mod table;

pub use event::{Event, EventKind};
pub use model::{
    clamp_probability, sigmoid, FrozenModel, Hyperparams, ModelState, ParamId, ADAGRAD_EPS,
    PRED_CLAMP,
};
pub use schema::{derive_dims, FeatureSchema};
pub use table::{LatentTable, Side};
