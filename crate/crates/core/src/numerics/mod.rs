//! Differentiable computation substrate: matrices, a reverse-mode tape,
//! named parameters, counter-based random streams and small dense linear
//! algebra.

pub mod function;
pub mod graph;
pub mod linalg;
pub mod mat;
pub mod nets;
pub mod optim;
pub mod params;
pub mod rng;

pub use function::{check_gradient, evaluate, evaluate_batch, gradient, gradient_batch, jacobians, DiffFn};
pub use graph::{Graph, Var};
pub use mat::Mat;
pub use params::{ParamMap, ParamSpec};
pub use rng::{draw_gaussian, RandomStream};
