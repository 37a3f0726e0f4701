//! Physical and sampling parameters of the simulated optical system.

use crate::error::{CoreError, Result};
use sha2::{Digest, Sha256};

/// A thin turbulent layer along the propagation path.
///
/// `position` is the fractional distance from the aperture (0) to the
/// object (1); `weight` is the layer's share of the total turbulence
/// strength. Weights are normalized internally, so only ratios matter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurbulenceLayer {
    pub position: f64,
    pub weight: f64,
}

/// All physical inputs of the simulation.
///
/// Distances are in meters, the wavefront phase in radians. `zernike_count`
/// is the number of Noll-ordered modes carried through the pipeline
/// (piston included in the indexing, excluded from sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalConfig {
    pub aperture_diameter_m: f64,
    pub focal_length_m: f64,
    pub wavelength_m: f64,
    pub path_length_m: f64,
    pub fried_parameter_m: f64,
    pub pixel_pitch_m: f64,
    /// Outer scale of turbulence; `f64::INFINITY` selects pure Kolmogorov.
    pub outer_scale_m: f64,
    pub zernike_count: usize,
    pub psf_size_px: usize,
    pub phase_grid_px: usize,
    /// Zero-padding factor applied to the pupil before the PSF transform.
    pub pad_factor: usize,
    /// Cn^2 distribution along the path used by the angular correlations.
    pub layers: Vec<TurbulenceLayer>,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig {
            aperture_diameter_m: 0.2,
            focal_length_m: 1.2,
            wavelength_m: 525e-9,
            path_length_m: 7000.0,
            fried_parameter_m: 0.1,
            pixel_pitch_m: 14.4e-6,
            outer_scale_m: f64::INFINITY,
            zernike_count: 36,
            psf_size_px: 33,
            phase_grid_px: 128,
            pad_factor: 4,
            layers: vec![TurbulenceLayer {
                position: 0.5,
                weight: 1.0,
            }],
        }
    }
}

impl OpticalConfig {
    /// Dimensionless turbulence strength D/r0.
    pub fn d_over_r0(&self) -> f64 {
        self.aperture_diameter_m / self.fried_parameter_m
    }

    /// Returns a copy with `fried_parameter_m` set so that D/r0 equals `d`.
    pub fn with_d_over_r0(&self, d: f64) -> Self {
        let mut c = self.clone();
        c.fried_parameter_m = c.aperture_diameter_m / d;
        c
    }

    /// Image-plane size of one PSF pixel in meters, set by the pupil
    /// sampling: delta_x = lambda f P / (Q D) with Q the padded grid.
    pub fn psf_pixel_scale_m(&self) -> f64 {
        let q = (self.phase_grid_px * self.pad_factor) as f64;
        self.wavelength_m * self.focal_length_m * self.phase_grid_px as f64
            / (q * self.aperture_diameter_m)
    }

    /// Angular separation between adjacent image pixels as seen from the
    /// aperture, in radians.
    pub fn pixel_angle_rad(&self) -> f64 {
        self.pixel_pitch_m / self.focal_length_m
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("aperture_diameter_m", self.aperture_diameter_m),
            ("focal_length_m", self.focal_length_m),
            ("wavelength_m", self.wavelength_m),
            ("path_length_m", self.path_length_m),
            ("fried_parameter_m", self.fried_parameter_m),
            ("pixel_pitch_m", self.pixel_pitch_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be strictly positive, got {v}"));
            }
        }
        if !(self.outer_scale_m > 0.0) {
            problems.push(format!(
                "outer_scale_m must be positive (or infinite), got {}",
                self.outer_scale_m
            ));
        }
        if self.zernike_count < 4 {
            problems.push(format!(
                "zernike_count must be at least 4, got {}",
                self.zernike_count
            ));
        }
        if self.psf_size_px % 2 == 0 {
            problems.push(format!("psf_size_px must be odd, got {}", self.psf_size_px));
        }
        if self.phase_grid_px < self.psf_size_px {
            problems.push(format!(
                "phase_grid_px ({}) must be at least psf_size_px ({})",
                self.phase_grid_px, self.psf_size_px
            ));
        }
        if self.pad_factor < 2 {
            problems.push(format!(
                "pad_factor must be at least 2 for Nyquist PSF sampling, got {}",
                self.pad_factor
            ));
        }
        if self.layers.is_empty() {
            problems.push("at least one turbulence layer is required".into());
        }
        for l in &self.layers {
            if !(0.0..=1.0).contains(&l.position) || !(l.weight > 0.0) {
                problems.push(format!(
                    "layer position {} / weight {} out of range",
                    l.position, l.weight
                ));
            }
        }
        let d = self.d_over_r0();
        if !(d.is_finite() && d > 0.0) {
            problems.push(format!("D/r0 must be finite and positive, got {d}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(problems.join("; ")))
        }
    }

    fn hash_fields(&self, include_fried: bool) -> u64 {
        let mut h = Sha256::new();
        let mut push = |v: f64| h.update(v.to_le_bytes());
        push(self.aperture_diameter_m);
        push(self.focal_length_m);
        push(self.wavelength_m);
        push(self.path_length_m);
        if include_fried {
            push(self.fried_parameter_m);
        }
        push(self.pixel_pitch_m);
        push(self.outer_scale_m);
        let mut h2 = h;
        h2.update((self.zernike_count as u64).to_le_bytes());
        h2.update((self.psf_size_px as u64).to_le_bytes());
        h2.update((self.phase_grid_px as u64).to_le_bytes());
        h2.update((self.pad_factor as u64).to_le_bytes());
        for l in &self.layers {
            h2.update(l.position.to_le_bytes());
            h2.update(l.weight.to_le_bytes());
        }
        let digest = h2.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Full-configuration hash, echoed into provenance manifests.
    pub fn content_hash(&self) -> u64 {
        self.hash_fields(true)
    }

    /// Asset-compatibility hash: everything except the Fried parameter.
    /// Learned assets span a D/r0 range and the covariance factor
    /// rescales exactly by the power law, so turbulence strength is a
    /// runtime parameter rather than part of an asset's identity.
    pub fn asset_hash(&self) -> u64 {
        self.hash_fields(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        OpticalConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_even_psf_size() {
        let mut c = OpticalConfig::default();
        c.psf_size_px = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_grid_smaller_than_psf() {
        let mut c = OpticalConfig::default();
        c.phase_grid_px = 17;
        c.psf_size_px = 33;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_changes_with_physical_fields() {
        let a = OpticalConfig::default();
        let b = a.with_d_over_r0(3.0);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
