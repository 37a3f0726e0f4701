//! The fast render path: dense coefficient interpolation, batched
//! phase-to-space evaluation, a handful of invariant convolutions,
//! per-pixel compositing, and tilt warping.
//!
//! Pipeline per frame: draw a correlated anchor field, bilinearly
//! interpolate the Zernike coefficients per pixel (in the phase domain),
//! convert the two tilt modes to pixel displacements, run the network on
//! the high orders, convolve the source with the mean PSF and every basis
//! function, multiply-add with the coefficient maps, and warp by the tilt
//! field. Color channels share the same maps.

use crate::basis::PsfBasis;
use crate::config::OpticalConfig;
use crate::correlation::{sample_anchor_field, AnchorField, AnchorGrid, SpatialCovariance};
use crate::error::{CoreError, Result};
use crate::fft2::{fft2, ifft2};
use crate::network::{p2s_forward_batch, MlpWeights};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Source scene with 1 (gray) or 3 (RGB) channels, values in [0, 1].
#[derive(Debug, Clone)]
pub struct SourceImage {
    channels: Vec<Array2<f64>>,
}

impl SourceImage {
    pub fn new(channels: Vec<Array2<f64>>) -> Result<SourceImage> {
        if channels.len() != 1 && channels.len() != 3 {
            return Err(CoreError::Config(format!(
                "images carry 1 or 3 channels, got {}",
                channels.len()
            )));
        }
        let dim = channels[0].dim();
        for ch in &channels {
            if ch.dim() != dim {
                return Err(CoreError::Config("channel shapes differ".into()));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Config("image values must be finite".into()));
            }
        }
        Ok(SourceImage { channels })
    }

    pub fn gray(values: Array2<f64>) -> Result<SourceImage> {
        SourceImage::new(vec![values])
    }

    pub fn height(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.channels[0].ncols()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &Array2<f64> {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Array2<f64>] {
        &self.channels
    }
}

/// Dense per-pixel maps driving the compositing stage: basis
/// coefficients (plane-major, M x H x W) and tilt displacements in
/// pixels.
#[derive(Debug, Clone)]
pub struct CoefficientMaps {
    pub beta: Array3<f32>,
    pub tilt_x: Array2<f64>,
    pub tilt_y: Array2<f64>,
}

/// Reproducibility record attached to every rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: u64,
    pub basis_hash: u64,
    pub weights_hash: u64,
    pub covariance_hash: u64,
}

/// One rendered frame; values are nonnegative after the final clamp.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub channels: Vec<Array2<f64>>,
    pub provenance: Provenance,
}

impl SimFrame {
    pub fn height(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.channels[0].ncols()
    }
}

// ---------------------------------------------------------------------
// Dense interpolation and tilt conversion
// ---------------------------------------------------------------------

/// Bilinear interpolation of every anchor mode to a dense H x W field.
/// Anchors are registered to the image corners (pixel centers), so a
/// query at an anchor position reproduces that anchor exactly.
pub fn interpolate_alpha(anchors: &AnchorField, height: usize, width: usize) -> Array3<f64> {
    let g = anchors.g;
    let k = anchors.k;
    let mut out = Array3::zeros((height, width, k));
    let map = |i: usize, n: usize| -> (usize, usize, f64) {
        if g == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (g - 1) as f64 / (n - 1) as f64;
        let lo = (pos.floor() as usize).min(g - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|c| map(c, width)).collect();
    out.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            let (ry0, ry1, fy) = map(r, height);
            for (c, &(cx0, cx1, fx)) in cols.iter().enumerate() {
                for j in 0..k {
                    let a00 = anchors.coeffs[[ry0, cx0, j]];
                    let a01 = anchors.coeffs[[ry0, cx1, j]];
                    let a10 = anchors.coeffs[[ry1, cx0, j]];
                    let a11 = anchors.coeffs[[ry1, cx1, j]];
                    let top = a00 + (a01 - a00) * fx;
                    let bot = a10 + (a11 - a10) * fx;
                    row[[c, j]] = top + (bot - top) * fy;
                }
            }
        });
    out
}

/// Image-plane displacement, in pixels, produced by the two tilt
/// coefficients. The constant is the discrete shift theorem of the PSF
/// transform: a tilt a Z2 moves the PSF by -(2 pad / pi) a pixels, which
/// the oracle tests pin directly.
pub fn tilt_to_pixels(alpha_tilt: (f64, f64), config: &OpticalConfig) -> (f64, f64) {
    let c = -(2.0 * config.pad_factor as f64) / std::f64::consts::PI;
    (c * alpha_tilt.0, c * alpha_tilt.1)
}

// ---------------------------------------------------------------------
// Convolution plan
// ---------------------------------------------------------------------

fn next_fast_size(n: usize) -> usize {
    fn smooth(mut v: usize) -> bool {
        for f in [2, 3, 5] {
            while v % f == 0 {
                v /= f;
            }
        }
        v == 1
    }
    (n..).find(|&v| smooth(v)).unwrap()
}

/// Precomputed kernel spectra for one (basis, image size) pair. Kernels
/// are packed two per complex transform: for real input, the inverse
/// transform's real and imaginary parts are the two convolutions.
struct ConvPlan {
    height: usize,
    width: usize,
    pad: usize,
    fr: usize,
    fc: usize,
    /// ceil((M+1)/2) spectra; slot p holds kernels 2p (real) and 2p+1 (imag).
    kernel_pairs: Vec<Array2<Complex64>>,
    kernels: usize,
}

impl ConvPlan {
    fn new(basis: &PsfBasis, height: usize, width: usize) -> Result<ConvPlan> {
        let s = basis.s;
        if height < s || width < s {
            return Err(CoreError::Config(format!(
                "image {height}x{width} is smaller than the {s}x{s} kernel"
            )));
        }
        let pad = s / 2;
        let fr = next_fast_size(height + 2 * pad);
        let fc = next_fast_size(width + 2 * pad);
        let kernels = basis.m() + 1;
        let kernel_at = |idx: usize| -> Array2<f64> {
            if idx == 0 {
                basis.mean_f64()
            } else {
                basis.component_f64(idx - 1)
            }
        };
        let kernel_pairs: Vec<Array2<Complex64>> = (0..kernels.div_ceil(2))
            .into_par_iter()
            .map(|p| {
                let ka = kernel_at(2 * p);
                let kb = if 2 * p + 1 < kernels {
                    Some(kernel_at(2 * p + 1))
                } else {
                    None
                };
                let mut embed = Array2::from_elem((fr, fc), Complex64::new(0.0, 0.0));
                for u in 0..s {
                    for v in 0..s {
                        let r = (u + fr - pad) % fr;
                        let c = (v + fc - pad) % fc;
                        let im = kb.as_ref().map_or(0.0, |k| k[[u, v]]);
                        embed[[r, c]] = Complex64::new(ka[[u, v]], im);
                    }
                }
                fft2(&mut embed);
                embed
            })
            .collect();
        Ok(ConvPlan {
            height,
            width,
            pad,
            fr,
            fc,
            kernel_pairs,
            kernels,
        })
    }

    /// Convolves one channel with every kernel; output index 0 is the
    /// mean-PSF image, index m is basis function m-1. Replicate padding.
    fn convolve(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let (h, w) = (self.height, self.width);
        assert_eq!(x.dim(), (h, w));
        let pad = self.pad;
        let mut spectrum = Array2::from_elem((self.fr, self.fc), Complex64::new(0.0, 0.0));
        for r in 0..h + 2 * pad {
            let sr = r.saturating_sub(pad).min(h - 1);
            for c in 0..w + 2 * pad {
                let sc = c.saturating_sub(pad).min(w - 1);
                spectrum[[r, c]] = Complex64::new(x[[sr, sc]], 0.0);
            }
        }
        fft2(&mut spectrum);
        let mut out: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); self.kernels];
        let results: Vec<(usize, Array2<f64>, Option<Array2<f64>>)> = self
            .kernel_pairs
            .par_iter()
            .enumerate()
            .map(|(p, khat)| {
                let mut prod = &spectrum * khat;
                ifft2(&mut prod);
                let mut a = Array2::zeros((h, w));
                let take_b = 2 * p + 1 < self.kernels;
                let mut b = if take_b {
                    Some(Array2::zeros((h, w)))
                } else {
                    None
                };
                for r in 0..h {
                    for c in 0..w {
                        let v = prod[[r + pad, c + pad]];
                        a[[r, c]] = v.re;
                        if let Some(bb) = b.as_mut() {
                            bb[[r, c]] = v.im;
                        }
                    }
                }
                (p, a, b)
            })
            .collect();
        for (p, a, b) in results {
            out[2 * p] = a;
            if let Some(b) = b {
                out[2 * p + 1] = b;
            }
        }
        out
    }
}

/// Frequency-domain convolution of one channel with the mean PSF and
/// every basis function (replicate-padded boundaries). Index 0 of the
/// result is the mean-PSF image.
pub fn basis_convolve(x: &Array2<f64>, basis: &PsfBasis) -> Result<Vec<Array2<f64>>> {
    let plan = ConvPlan::new(basis, x.nrows(), x.ncols())?;
    Ok(plan.convolve(x))
}

/// Per-pixel multiply-add of the filtered stack with the coefficient
/// maps: y = filtered[0] + sum_m beta[m] * filtered[m+1].
pub fn compose(filtered: &[Array2<f64>], beta: &Array3<f32>) -> Result<Array2<f64>> {
    let (h, w) = filtered[0].dim();
    let m = filtered.len() - 1;
    if beta.dim() != (m, h, w) {
        return Err(CoreError::Dimension {
            context: "compose beta maps",
            expected: m * h * w,
            got: beta.len(),
        });
    }
    let mut out = filtered[0].clone();
    for mm in 0..m {
        let plane = beta.index_axis(ndarray::Axis(0), mm);
        let f = &filtered[mm + 1];
        out.indexed_iter_mut()
            .for_each(|((r, c), o)| *o += plane[[r, c]] as f64 * f[[r, c]]);
    }
    Ok(out)
}

#[inline]
fn bilinear_replicate(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Backward warp with bilinear sampling and replicate boundary:
/// out[r, c] = img(r - tilt_y[r, c], c - tilt_x[r, c]). A kernel whose
/// content the oracle displaces by +d moves image content by +d; the
/// backward gather at -d reproduces that.
pub fn tilt_warp(img: &Array2<f64>, tilt_x: &Array2<f64>, tilt_y: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    assert_eq!(tilt_x.dim(), (h, w));
    assert_eq!(tilt_y.dim(), (h, w));
    let mut out = Array2::zeros((h, w));
    out.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            for c in 0..w {
                row[c] = bilinear_replicate(
                    img,
                    r as f64 - tilt_y[[r, c]],
                    c as f64 - tilt_x[[r, c]],
                );
            }
        });
    out
}

// ---------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------

/// Immutable asset bundle with cached convolution plans; renders frames
/// for any number of seeds concurrently.
pub struct Renderer {
    config: OpticalConfig,
    basis: Arc<PsfBasis>,
    weights: Arc<MlpWeights>,
    covariance: Arc<SpatialCovariance>,
    plans: Mutex<HashMap<(usize, usize), Arc<ConvPlan>>>,
    basis_hash: u64,
    weights_hash: u64,
}

impl Renderer {
    pub fn new(
        config: OpticalConfig,
        basis: PsfBasis,
        weights: MlpWeights,
        covariance: SpatialCovariance,
    ) -> Result<Renderer> {
        config.validate()?;
        let asset_hash = config.asset_hash();
        if basis.config_hash != asset_hash {
            return Err(CoreError::AssetMismatch(
                "basis was generated for a different configuration".into(),
            ));
        }
        if weights.config_hash != asset_hash {
            return Err(CoreError::AssetMismatch(
                "weights were trained for a different configuration".into(),
            ));
        }
        if covariance.config_hash() != asset_hash {
            return Err(CoreError::AssetMismatch(
                "covariance cache was built for a different configuration".into(),
            ));
        }
        // Turbulence strength is a runtime parameter: rescale the factor
        // when the cache was built at a different D/r0.
        let covariance = if (covariance.d_over_r0() - config.d_over_r0()).abs()
            > 1e-12 * config.d_over_r0()
        {
            covariance.with_d_over_r0(config.d_over_r0())
        } else {
            covariance
        };
        Renderer::new_unchecked(config, basis, weights, covariance)
    }

    /// Skips the config-hash equality checks but still validates
    /// dimensional consistency. Used by the wavelength-comparison study,
    /// where assets are legitimately shared across rescaled
    /// configurations.
    pub(crate) fn new_unchecked(
        config: OpticalConfig,
        basis: PsfBasis,
        weights: MlpWeights,
        covariance: SpatialCovariance,
    ) -> Result<Renderer> {
        if weights.basis_hash != basis.content_hash() {
            return Err(CoreError::AssetMismatch(
                "weights were trained against a different basis".into(),
            ));
        }
        if weights.k_in() != config.zernike_count - 3 {
            return Err(CoreError::AssetMismatch(format!(
                "weights expect {} inputs, configuration provides {}",
                weights.k_in(),
                config.zernike_count - 3
            )));
        }
        if weights.m() != basis.m() {
            return Err(CoreError::AssetMismatch(format!(
                "weights emit {} coefficients, basis holds {}",
                weights.m(),
                basis.m()
            )));
        }
        if covariance.k() != config.zernike_count {
            return Err(CoreError::AssetMismatch(format!(
                "covariance carries {} modes, configuration needs {}",
                covariance.k(),
                config.zernike_count
            )));
        }
        if basis.s != config.psf_size_px {
            return Err(CoreError::AssetMismatch(format!(
                "basis kernels are {} px, configuration sets {}",
                basis.s, config.psf_size_px
            )));
        }
        let basis_hash = basis.content_hash();
        let weights_hash = weights.content_hash();
        Ok(Renderer {
            config,
            basis: Arc::new(basis),
            weights: Arc::new(weights),
            covariance: Arc::new(covariance),
            plans: Mutex::new(HashMap::new()),
            basis_hash,
            weights_hash,
        })
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.config
    }

    pub fn basis(&self) -> &PsfBasis {
        &self.basis
    }

    pub fn covariance(&self) -> &SpatialCovariance {
        &self.covariance
    }

    fn plan_for(&self, height: usize, width: usize) -> Result<Arc<ConvPlan>> {
        let mut plans = self.plans.lock().unwrap();
        if let Some(p) = plans.get(&(height, width)) {
            return Ok(p.clone());
        }
        let plan = Arc::new(ConvPlan::new(&self.basis, height, width)?);
        plans.insert((height, width), plan.clone());
        Ok(plan)
    }

    /// Builds the convolution plan for a frame size ahead of timing runs.
    pub fn warm(&self, height: usize, width: usize) -> Result<()> {
        self.plan_for(height, width).map(|_| ())
    }

    fn check_image_grid(&self, height: usize, width: usize) -> Result<()> {
        let grid = AnchorGrid::for_image(self.covariance.g(), height, width, &self.config)?;
        let got = self.covariance.grid();
        let tol = 1e-12;
        if (grid.step_x_rad() - got.step_x_rad()).abs() > tol
            || (grid.step_y_rad() - got.step_y_rad()).abs() > tol
        {
            return Err(CoreError::AssetMismatch(format!(
                "covariance anchor spacing does not match a {height}x{width} frame; rebuild the cache for this geometry"
            )));
        }
        Ok(())
    }

    /// Dense coefficient maps for one seed: the anchor draw, phase-domain
    /// interpolation, tilt conversion, and the batched network pass.
    pub fn coefficient_maps(
        &self,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<CoefficientMaps> {
        self.check_image_grid(height, width)?;
        let anchors = sample_anchor_field(&self.covariance, seed);
        let dense = interpolate_alpha(&anchors, height, width);
        self.maps_from_dense(&dense)
    }

    /// Coefficient maps from an externally supplied dense coefficient
    /// field (H x W x K).
    pub fn maps_from_dense(&self, dense: &Array3<f64>) -> Result<CoefficientMaps> {
        let (height, width, k) = dense.dim();
        if k != self.config.zernike_count {
            return Err(CoreError::Dimension {
                context: "dense coefficient field",
                expected: self.config.zernike_count,
                got: k,
            });
        }
        let mut tilt_x = Array2::zeros((height, width));
        let mut tilt_y = Array2::zeros((height, width));
        for r in 0..height {
            for c in 0..width {
                let (dx, dy) =
                    tilt_to_pixels((dense[[r, c, 1]], dense[[r, c, 2]]), &self.config);
                tilt_x[[r, c]] = dx;
                tilt_y[[r, c]] = dy;
            }
        }
        let n = height * width;
        let k_in = k - 3;
        let mut rows = Array2::zeros((n, k_in));
        for r in 0..height {
            for c in 0..width {
                for j in 0..k_in {
                    rows[[r * width + c, j]] = dense[[r, c, j + 3]];
                }
            }
        }
        let beta_rows = p2s_forward_batch(&self.weights, &rows)?;
        let m = self.weights.m();
        let mut beta = Array3::zeros((m, height, width));
        for mm in 0..m {
            for r in 0..height {
                for c in 0..width {
                    beta[[mm, r, c]] = beta_rows[[r * width + c, mm]];
                }
            }
        }
        Ok(CoefficientMaps {
            beta,
            tilt_x,
            tilt_y,
        })
    }

    fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            seed,
            config_hash: self.config.content_hash(),
            basis_hash: self.basis_hash,
            weights_hash: self.weights_hash,
            covariance_hash: self.covariance.config_hash(),
        }
    }

    /// The blur stage only (convolve + compose, no warp, no clamp);
    /// linear in the source for a fixed seed.
    pub fn render_blur(&self, x: &SourceImage, maps: &CoefficientMaps) -> Result<Vec<Array2<f64>>> {
        let plan = self.plan_for(x.height(), x.width())?;
        x.channels()
            .iter()
            .map(|ch| {
                let filtered = plan.convolve(ch);
                compose(&filtered, &maps.beta)
            })
            .collect()
    }

    /// Full pipeline for one frame.
    pub fn render(&self, x: &SourceImage, seed: u64) -> Result<SimFrame> {
        let maps = self.coefficient_maps(x.height(), x.width(), seed)?;
        self.render_with_maps(x, &maps, seed)
    }

    /// Renders with externally prepared maps (shared across channels).
    pub fn render_with_maps(
        &self,
        x: &SourceImage,
        maps: &CoefficientMaps,
        seed: u64,
    ) -> Result<SimFrame> {
        let blurred = self.render_blur(x, maps)?;
        let channels = blurred
            .into_iter()
            .map(|ch| {
                let mut warped = tilt_warp(&ch, &maps.tilt_x, &maps.tilt_y);
                warped.mapv_inplace(|v| v.max(0.0));
                warped
            })
            .collect();
        Ok(SimFrame {
            channels,
            provenance: self.provenance(seed),
        })
    }
}

/// Convenience wrapper: builds a renderer for one frame. Asset and
/// configuration hashes must agree.
pub fn simulate_frame(
    x: &SourceImage,
    config: &OpticalConfig,
    basis: PsfBasis,
    weights: MlpWeights,
    covariance: SpatialCovariance,
    seed: u64,
) -> Result<SimFrame> {
    let renderer = Renderer::new(config.clone(), basis, weights, covariance)?;
    renderer.render(x, seed)
}
