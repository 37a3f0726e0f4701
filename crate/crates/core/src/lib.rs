//! Fast simulation of imaging through atmospheric turbulence.
//!
//! The pipeline replaces per-pixel Fourier PSF synthesis with a learned
//! phase-to-space transform: spatially correlated Zernike coefficients are
//! drawn on an anchor grid, interpolated per pixel in the phase domain,
//! mapped by a small network to coefficients over a PCA basis of PSFs, and
//! composited as a handful of spatially invariant convolutions plus a tilt
//! warp. A brute-force per-pixel renderer and a statistics suite validate
//! the fast path.

pub mod aperture;
pub mod config;
pub mod basis;
pub mod correlation;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod fft2;
pub mod linalg;
pub mod image_io;
pub mod io;
pub mod network;
pub mod psf;
pub mod render;
pub mod rng;
pub mod specfun;
pub mod validate;
pub mod zernike;

pub use aperture::ApertureGrid;
pub use config::{OpticalConfig, TurbulenceLayer};
pub use correlation::{angular_correlation, build_spatial_covariance, sample_anchor_field, AnchorField, AnchorGrid, SpatialCovariance};
pub use covariance::{noll_covariance, ModalCovariance};
pub use error::{CoreError, Result};
pub use render::{basis_convolve, compose, interpolate_alpha, simulate_frame, tilt_to_pixels, tilt_warp, CoefficientMaps, Provenance, Renderer, SimFrame, SourceImage};
pub use psf::{center_psf, diffraction_limited_psf, psf_from_phase, strehl_ratio, Psf};
pub use validate::{benchmark, brute_force_frame, color_comparison, exposure_psfs, interp_comparison, tilt_statistics, BenchReport, ColorComparison, ExposureReport, InterpComparison, TiltStatsReport};
pub use zernike::{noll_index, phase_from_coeffs, zernike_eval, ZernikeBasisSet};
