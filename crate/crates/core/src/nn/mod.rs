//! Dense and recurrent building blocks with hand-written backward passes.
//!
//! Every network in the crate is assembled from [`Dense`] layers and
//! [`LstmCell`]s. Forward passes that will be differentiated return a tape of
//! intermediates; the matching `backward` consumes that tape and accumulates
//! exact parameter gradients into a zero-initialised copy of the model.

mod adam;
mod checkpoint;
mod dense;
mod lstm;
mod params;

pub use adam::{Adam, AdamSettings};
pub use checkpoint::{Checkpoint, Tensor};
pub use dense::{Activation, Dense, Mlp, MlpTape};
pub use lstm::{LstmCell, LstmStepTape};
pub use params::{accumulate, assign_flat, blend, flatten, param_count, Parameters};

/// Row-major dense matrix used for all weights.
pub type RealMatrix = ndarray::Array2<f64>;

pub(crate) fn uniform_fan_in(rng: &mut crate::rng::Rng, rows: usize, cols: usize, fan_in: usize) -> RealMatrix {
    use rand::Rng as _;
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    RealMatrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}
