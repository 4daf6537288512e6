//! Solvers for linear-quadratic control of graphon-coupled mean-field SDEs.

pub mod control;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod linear_closers;
pub mod model;
pub mod output;
pub mod pipeline;
pub mod riccati_abstract;
pub mod riccati_standard;
pub mod sim;
pub mod systemic_risk;
pub mod time;

pub use error::{Error, Result};
pub use grid::{build_grid, LabelGrid};
pub use io::{load_problem, save_problem};
pub use kernel::{BlockDiag, Kernel, LabelField};
pub use model::{CoefficientField, CouplingKernels, Horizon, ProblemData};
pub use time::TimeGrid;
