//! Numerical workbench for reaction–diffusion in perforated domains.
//!
//! The library is organised around the pipeline of the underlying theory:
//! meshes for cells and perforated domains (`mesh`), monotone-kinetics FEM
//! solvers (`pde`), homogenised constants and strange-term functional
//! equations (`homog`), microscopic↔homogenised convergence studies
//! (`micro`), rearrangement and symmetrization comparisons (`rearrange`),
//! shape differentiation of the effectiveness factor (`shape`), and
//! spectral projection optimality (`spectral`).

pub mod homog;
mod linalg;
pub mod mesh;
pub mod micro;
pub mod pde;
pub mod rearrange;
pub mod shape;
pub mod spectral;
