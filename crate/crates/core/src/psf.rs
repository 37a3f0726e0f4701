//! Point spread function synthesis from the pupil phase.
//!
//! The incoherent PSF is |DFT{W exp(-i phi)}|^2 on a zero-padded pupil
//! grid, shifted to the array center, cropped, and normalized to unit sum.
//! A pure tilt phase a*Z2 displaces the PSF by exactly
//! `-(2 pad / pi) a` pixels along x (and Z3 likewise along y), which pins
//! the tilt-to-pixel conversion used everywhere else.

use crate::aperture::ApertureGrid;
use crate::error::{CoreError, Result};
use crate::fft2::{fft2, fftshift};
use ndarray::Array2;
use num_complex::Complex64;

/// Normalized S x S point spread function.
#[derive(Debug, Clone)]
pub struct Psf {
    values: Array2<f64>,
    /// Image-plane meters per PSF pixel.
    pixel_scale: f64,
}

impl Psf {
    pub fn from_values(values: Array2<f64>, pixel_scale: f64) -> Self {
        Psf {
            values,
            pixel_scale,
        }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn pixel_scale(&self) -> f64 {
        self.pixel_scale
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Intensity centroid relative to the center pixel, as (dx, dy).
    pub fn centroid(&self) -> (f64, f64) {
        centroid_of(&self.values)
    }
}

/// Centroid of a nonnegative field relative to its center pixel, (dx, dy).
pub fn centroid_of(values: &Array2<f64>) -> (f64, f64) {
    let (rows, cols) = values.dim();
    let c_r = (rows - 1) as f64 / 2.0;
    let c_c = (cols - 1) as f64 / 2.0;
    let mut m = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let v = values[[r, c]];
            m += v;
            mx += v * (c as f64 - c_c);
            my += v * (r as f64 - c_r);
        }
    }
    (mx / m, my / m)
}

/// Full padded-grid PSF (Q x Q, unit sum), without cropping. Used where
/// tails or large displacements matter, e.g. shift measurements.
pub fn psf_full_from_phase(
    phase: &Array2<f64>,
    grid: &ApertureGrid,
    pad_factor: usize,
) -> Result<Array2<f64>> {
    if grid.mask_count() == 0 {
        return Err(CoreError::DegenerateAperture);
    }
    let p = grid.resolution();
    assert_eq!(phase.dim(), (p, p), "phase must live on the aperture grid");
    let q = p * pad_factor;
    let mut field = Array2::from_elem((q, q), Complex64::new(0.0, 0.0));
    for r in 0..p {
        for c in 0..p {
            if grid.inside(r, c) {
                let ph = phase[[r, c]];
                field[[r, c]] = Complex64::new(ph.cos(), -ph.sin());
            }
        }
    }
    fft2(&mut field);
    let intensity = field.mapv(|v| v.norm_sqr());
    let mut shifted = fftshift(&intensity);
    let total: f64 = shifted.iter().sum();
    shifted.mapv_inplace(|v| v / total);
    Ok(shifted)
}

/// The S x S PSF for a phase field over the aperture.
pub fn psf_from_phase(
    phase: &Array2<f64>,
    grid: &ApertureGrid,
    s: usize,
    pad_factor: usize,
    pixel_scale: f64,
) -> Result<Psf> {
    let q = grid.resolution() * pad_factor;
    if s % 2 == 0 || s > q {
        return Err(CoreError::Config(format!(
            "PSF crop size must be odd and at most {q}, got {s}"
        )));
    }
    let full = psf_full_from_phase(phase, grid, pad_factor)?;
    let half = s / 2;
    let lo = q / 2 - half;
    let mut values = Array2::zeros((s, s));
    for r in 0..s {
        for c in 0..s {
            values[[r, c]] = full[[lo + r, lo + c]];
        }
    }
    let total: f64 = values.iter().sum();
    values.mapv_inplace(|v| v / total);
    Ok(Psf {
        values,
        pixel_scale,
    })
}

/// Diffraction-limited PSF of the same optical geometry (zero phase).
pub fn diffraction_limited_psf(
    grid: &ApertureGrid,
    s: usize,
    pad_factor: usize,
    pixel_scale: f64,
) -> Result<Psf> {
    let p = grid.resolution();
    psf_from_phase(&Array2::zeros((p, p)), grid, s, pad_factor, pixel_scale)
}

/// Peak intensity relative to the diffraction-limited peak on the same
/// grid (both unit-sum normalized).
pub fn strehl_ratio(psf: &Psf, diffraction: &Psf) -> f64 {
    psf.peak() / diffraction.peak()
}

fn bilinear_shift(values: &Array2<f64>, dx: f64, dy: f64) -> Array2<f64> {
    let (rows, cols) = values.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let sr = r as f64 + dy;
            let sc = c as f64 + dx;
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            let mut acc = 0.0;
            for (ri, wr) in [(r0 as isize, 1.0 - fr), (r0 as isize + 1, fr)] {
                for (ci, wc) in [(c0 as isize, 1.0 - fc), (c0 as isize + 1, fc)] {
                    if wr == 0.0 || wc == 0.0 {
                        continue;
                    }
                    if ri >= 0 && ri < rows as isize && ci >= 0 && ci < cols as isize {
                        acc += wr * wc * values[[ri as usize, ci as usize]];
                    }
                }
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Translates the PSF so its intensity centroid sits at the grid center
/// and renormalizes; returns the centered PSF and the removed (dx, dy)
/// shift in pixels. Refines iteratively since resampling perturbs the
/// centroid slightly.
pub fn center_psf(psf: &Psf) -> (Psf, (f64, f64)) {
    let mut values = psf.values.clone();
    let mut total_dx = 0.0;
    let mut total_dy = 0.0;
    for _ in 0..5 {
        let (dx, dy) = centroid_of(&values);
        if dx.abs() < 5e-3 && dy.abs() < 5e-3 {
            break;
        }
        values = bilinear_shift(&values, dx, dy);
        let sum: f64 = values.iter().sum();
        values.mapv_inplace(|v| v / sum);
        total_dx += dx;
        total_dy += dy;
    }
    (
        Psf {
            values,
            pixel_scale: psf.pixel_scale,
        },
        (total_dx, total_dy),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zernike::{zernike_eval, ZernikeBasisSet};

    fn grid() -> ApertureGrid {
        ApertureGrid::new(64)
    }

    /// Centroid of a central window; the full padded array wraps the
    /// diffraction tails around the torus, which washes out shifts.
    fn windowed_centroid(full: &Array2<f64>, half: usize) -> (f64, f64) {
        let q = full.nrows();
        let lo = q / 2 - half;
        let s = 2 * half + 1;
        let crop = Array2::from_shape_fn((s, s), |(r, c)| full[[lo + r, lo + c]]);
        centroid_of(&crop)
    }

    #[test]
    fn zero_phase_gives_centered_symmetric_pattern() {
        let g = grid();
        let psf = diffraction_limited_psf(&g, 33, 4, 1.0).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-9);
        // Maximum at the center pixel.
        let center = psf.values()[[16, 16]];
        assert_eq!(psf.peak(), center);
        // 4-fold symmetry within discretization.
        for r in 0..33 {
            for c in 0..33 {
                let v = psf.values()[[r, c]];
                assert!((v - psf.values()[[32 - r, c]]).abs() < 1e-9 * center);
                assert!((v - psf.values()[[r, 32 - c]]).abs() < 1e-9 * center);
            }
        }
        let (dx, dy) = psf.centroid();
        assert!(dx.abs() < 1e-9 && dy.abs() < 1e-9);
    }

    #[test]
    fn tilt_phase_shifts_psf_by_the_discrete_shift_theorem() {
        let g = grid();
        let pad = 4;
        for &a in &[0.5f64, -1.2, 2.7] {
            let phase = zernike_eval(2, &g).unwrap().mapv(|z| a * z);
            let full = psf_full_from_phase(&phase, &g, pad).unwrap();
            let (dx, dy) = windowed_centroid(&full, 50);
            let expect = -(2.0 * pad as f64 / std::f64::consts::PI) * a;
            assert!(
                (dx - expect).abs() < 0.1,
                "tilt {a}: measured dx {dx} vs theory {expect}"
            );
            assert!(dy.abs() < 0.05, "tilt {a}: dy {dy} should be ~0");
        }
        // Z3 moves the PSF along y.
        let phase = zernike_eval(3, &g).unwrap().mapv(|z| 0.8 * z);
        let full = psf_full_from_phase(&phase, &g, pad).unwrap();
        let (dx, dy) = windowed_centroid(&full, 50);
        let expect = -(2.0 * pad as f64 / std::f64::consts::PI) * 0.8;
        assert!((dy - expect).abs() < 0.1, "dy {dy} vs {expect}");
        assert!(dx.abs() < 0.05);
    }

    #[test]
    fn tilt_shift_is_linear_in_the_coefficient() {
        let g = grid();
        let z2 = zernike_eval(2, &g).unwrap();
        // Least-squares fit of measured displacement vs coefficient.
        let coeffs: Vec<f64> = (1..=10).map(|i| 0.25 * i as f64).collect();
        let shifts: Vec<f64> = coeffs
            .iter()
            .map(|&a| {
                let full = psf_full_from_phase(&z2.mapv(|z| a * z), &g, 4).unwrap();
                windowed_centroid(&full, 50).0
            })
            .collect();
        let n = coeffs.len() as f64;
        let sx: f64 = coeffs.iter().sum();
        let sy: f64 = shifts.iter().sum();
        let sxx: f64 = coeffs.iter().map(|x| x * x).sum();
        let sxy: f64 = coeffs.iter().zip(&shifts).map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        let ss_tot: f64 = shifts.iter().map(|y| (y - sy / n).powi(2)).sum();
        let ss_res: f64 = coeffs
            .iter()
            .zip(&shifts)
            .map(|(x, y)| (y - slope * x - intercept).powi(2))
            .sum();
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.999, "R^2 = {r2}");
        let theory = -(2.0 * 4.0 / std::f64::consts::PI);
        assert!((slope - theory).abs() < 0.02 * theory.abs());
    }

    #[test]
    fn any_phase_yields_normalized_nonnegative_psf() {
        let g = grid();
        let basis = ZernikeBasisSet::new(10, &g).unwrap();
        let alpha = [0.0, 0.3, -1.0, 0.8, 0.2, -0.4, 0.1, 0.6, -0.2, 0.5];
        let phase = crate::zernike::phase_from_coeffs(&alpha, &basis).unwrap();
        let psf = psf_from_phase(&phase, &g, 33, 4, 1.0).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-9);
        assert!(psf.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn centering_leaves_a_symmetric_psf_alone() {
        let g = grid();
        let psf = diffraction_limited_psf(&g, 33, 4, 1.0).unwrap();
        let (centered, shift) = center_psf(&psf);
        assert!(shift.0.abs() < 1e-9 && shift.1.abs() < 1e-9);
        for (a, b) in centered.values().iter().zip(psf.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_reports_a_constructed_integer_shift() {
        let g = grid();
        let psf = diffraction_limited_psf(&g, 33, 4, 1.0).unwrap();
        // Move the PSF 2 px to the right.
        let mut moved = Array2::zeros((33, 33));
        for r in 0..33 {
            for c in 0..31 {
                moved[[r, c + 2]] = psf.values()[[r, c]];
            }
        }
        let sum: f64 = moved.iter().sum();
        moved.mapv_inplace(|v| v / sum);
        let (centered, (dx, dy)) = center_psf(&Psf::from_values(moved, 1.0));
        // Truncation at the window edge biases the constructed input's
        // centroid slightly below the nominal 2 px.
        assert!((dx - 2.0).abs() < 0.1, "dx {dx}");
        assert!(dy.abs() < 0.02);
        let (cx, cy) = centered.centroid();
        assert!(cx.abs() < 5e-3 && cy.abs() < 5e-3);
    }

    #[test]
    fn centering_random_tilted_psf_hits_the_tolerance() {
        let g = grid();
        let basis = ZernikeBasisSet::new(6, &g).unwrap();
        let alpha = [0.0, 0.9, -0.6, 0.5, -0.3, 0.2];
        let phase = crate::zernike::phase_from_coeffs(&alpha, &basis).unwrap();
        let psf = psf_from_phase(&phase, &g, 49, 4, 1.0).unwrap();
        let (centered, _) = center_psf(&psf);
        let (cx, cy) = centered.centroid();
        assert!(
            cx.abs() < 0.05 && cy.abs() < 0.05,
            "residual centroid ({cx}, {cy})"
        );
        assert!((centered.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_rejected() {
        // A grid this small still has samples inside; construct the error
        // through the API by masking out everything via a zero-size check
        // is not possible, so synthesize a degenerate grid directly.
        let g = ApertureGrid::new(2);
        assert!(g.mask_count() > 0);
        // All grids produced by ApertureGrid have nonempty masks; the
        // error path is exercised through psf_full_from_phase with a
        // handcrafted empty mask.
        // (Constructing one requires internal access, so just confirm the
        // guard on crop size here.)
        let phase = Array2::zeros((2, 2));
        assert!(matches!(
            psf_from_phase(&phase, &g, 2, 2, 1.0),
            Err(CoreError::Config(_))
        ));
    }
}
