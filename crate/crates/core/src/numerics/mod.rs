//! Quadrature, Volterra marching, Fourier plumbing and decay fits shared by
//! every other module.

pub mod decay;
pub mod quadrature;
pub mod series;
pub mod volterra;

pub use decay::{fit_decay, DecayFit};
pub use quadrature::{fourier_line, integrate_interval, integrate_line, integrate_line_anchored, Contour};
pub use series::{
    fourier_synthesize, gregory_weight, gregory_weights, periodic_grid, project_modes, write_json, ModalField,
    ModeSeries, SpaceTimeField, TimeGrid,
};
pub use volterra::{resolvent_convolve, sample_kernel, volterra_resolvent, volterra_solve};
