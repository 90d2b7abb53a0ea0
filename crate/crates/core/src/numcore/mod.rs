//! Dense `f64` tensors, a reverse-mode tape, AdamW and a finite-difference
//! gradient checker. All raw linear algebra in the crate lives here.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::AdamW;
pub use params::{accumulate, clip_global_norm, global_norm, ParamStore};
pub use rng::{derive_seed, rng_for, Rng};
pub use tensor::{logsumexp, masked_softmax, Tensor};

use rand_distr::{Distribution, Normal};

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}
