//! Parameter estimation for ODE models by multiple shooting with locally
//! linearized integration and a generalized Gauss-Newton optimizer.

pub mod data_gen;
pub mod linalg;
pub mod ll_integrator;
pub mod model;
pub mod optimizer;
pub mod shooting;

pub use linalg::{Matrix, Vector};
pub use model::OdeModel;
