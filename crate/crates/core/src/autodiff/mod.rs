//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod grad_check;
mod graph;
pub(crate) mod kernels;
mod params;

pub use grad_check::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{sigmoid, Graph, Var, COSINE_EPS};
pub use params::{Bound, ParamId, ParamStore};
