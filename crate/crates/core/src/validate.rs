//! Oracle renderer and statistical validation of the fast path: the
//! brute-force spatially varying convolution, tilt statistics against
//! quadrature theory, short/long-exposure PSFs against the classical
//! transfer functions, the phase-vs-space interpolation comparison, the
//! color-channel study, and run-time measurement.

use crate::aperture::ApertureGrid;
use crate::basis::PsfBasis;
use crate::config::OpticalConfig;
use crate::correlation::{angular_correlation, sample_anchor_field, SpatialCovariance};
use crate::covariance::noll_covariance;
use crate::error::{CoreError, Result};
use crate::fft2::fft2;
use crate::network::MlpWeights;
use crate::psf::{center_psf, diffraction_limited_psf, psf_from_phase, strehl_ratio, Psf};
use crate::render::{Provenance, Renderer, SimFrame, SourceImage};
use crate::rng::substream;
use crate::zernike::{phase_from_coeffs, ZernikeBasisSet};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::Write;
use std::time::Instant;

/// Default ceiling on scene pixels for the per-pixel oracle.
pub const BRUTE_FORCE_GUARD: usize = 1 << 14;

/// Exact spatially varying convolution: one Fourier-synthesized PSF per
/// pixel (tilts included in the phase), gathered directly against the
/// source with replicate boundaries. No basis, no network, no
/// interpolation of PSFs.
pub fn brute_force_frame(
    x: &SourceImage,
    dense_alpha: &Array3<f64>,
    config: &OpticalConfig,
    allow_large: bool,
) -> Result<SimFrame> {
    let (h, w) = (x.height(), x.width());
    if dense_alpha.dim().0 != h || dense_alpha.dim().1 != w {
        return Err(CoreError::Dimension {
            context: "brute_force_frame dense alpha",
            expected: h * w,
            got: dense_alpha.dim().0 * dense_alpha.dim().1,
        });
    }
    let k = config.zernike_count;
    if dense_alpha.dim().2 != k {
        return Err(CoreError::Dimension {
            context: "brute_force_frame mode count",
            expected: k,
            got: dense_alpha.dim().2,
        });
    }
    if h * w > BRUTE_FORCE_GUARD && !allow_large {
        return Err(CoreError::SizeGuard {
            pixels: h * w,
            guard: BRUTE_FORCE_GUARD,
        });
    }
    let grid = ApertureGrid::new(config.phase_grid_px);
    let basis = ZernikeBasisSet::new(k, &grid)?;
    let s = config.psf_size_px;
    let half = s / 2;
    let pixel_scale = config.psf_pixel_scale_m();

    let rows: Vec<Vec<Vec<f64>>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut out_row = vec![vec![0.0f64; x.channel_count()]; w];
            for c in 0..w {
                let mut alpha = vec![0.0f64; k];
                for j in 1..k {
                    alpha[j] = dense_alpha[[r, c, j]];
                }
                let phase = phase_from_coeffs(&alpha, &basis)?;
                let psf = psf_from_phase(&phase, &grid, s, config.pad_factor, pixel_scale)?;
                let kern = psf.values();
                for (ch_i, ch) in x.channels().iter().enumerate() {
                    let mut acc = 0.0;
                    for u in 0..s {
                        let sr = (r + half).saturating_sub(u).min(h - 1);
                        for v in 0..s {
                            let sc = (c + half).saturating_sub(v).min(w - 1);
                            acc += kern[[u, v]] * ch[[sr, sc]];
                        }
                    }
                    out_row[c][ch_i] = acc;
                }
            }
            Ok(out_row)
        })
        .collect::<Result<_>>()?;

    let channels = (0..x.channel_count())
        .map(|ch| Array2::from_shape_fn((h, w), |(r, c)| rows[r][c][ch]))
        .collect();
    Ok(SimFrame {
        channels,
        provenance: Provenance {
            seed: 0,
            config_hash: config.content_hash(),
            basis_hash: 0,
            weights_hash: 0,
            covariance_hash: 0,
        },
    })
}

// ---------------------------------------------------------------------
// Tilt statistics
// ---------------------------------------------------------------------

/// Monte-Carlo tilt statistics versus the quadrature theory curves.
#[derive(Debug, Clone)]
pub struct TiltStatsReport {
    pub separations: Vec<f64>,
    pub z_tilt_corr: Vec<f64>,
    pub diff_tilt_var: Vec<f64>,
    pub theory_z_tilt: Vec<f64>,
    pub theory_diff_tilt: Vec<f64>,
    /// Single-point tilt variance from the modal covariance, rad^2.
    pub point_variance: f64,
    pub sample_count: usize,
}

impl TiltStatsReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "separation_rad,z_tilt_corr,diff_tilt_var,theory_z_tilt,theory_diff_tilt"
        )?;
        for i in 0..self.separations.len() {
            writeln!(
                w,
                "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                self.separations[i],
                self.z_tilt_corr[i],
                self.diff_tilt_var[i],
                self.theory_z_tilt[i],
                self.theory_diff_tilt[i]
            )?;
        }
        Ok(())
    }
}

/// Monte-Carlo Z-tilt correlation and differential tilt variance over the
/// anchor grid's separation set, with theory from the quadrature (not
/// sampling). Both tilt axes are pooled; the isotropic model makes their
/// statistics identical.
pub fn tilt_statistics(
    cov: &SpatialCovariance,
    config: &OpticalConfig,
    draws: usize,
    seed: u64,
) -> Result<TiltStatsReport> {
    if draws < 100 {
        return Err(CoreError::Config(format!(
            "tilt statistics need at least 100 draws, got {draws}"
        )));
    }
    let grid = cov.grid();
    let g = cov.g();
    // Unique separations, binned to the grid's natural resolution, with
    // all anchor pairs realizing each one.
    let mut bins: std::collections::BTreeMap<i64, (f64, Vec<(usize, usize)>)> =
        std::collections::BTreeMap::new();
    let quant = grid.step_x_rad().max(grid.step_y_rad()).max(1e-15) * 0.25;
    for a in 0..g * g {
        for b in (a + 1)..g * g {
            let sep = grid.separation((a / g, a % g), (b / g, b % g));
            let key = (sep / quant).round() as i64;
            let e = bins.entry(key).or_insert((sep, Vec::new()));
            if e.1.len() < 512 {
                e.1.push((a, b));
            }
        }
    }
    // The zero-separation bin (each anchor against itself).
    let mut zero_pairs = Vec::new();
    for a in 0..g * g {
        zero_pairs.push((a, a));
    }
    let mut all: Vec<(f64, Vec<(usize, usize)>)> = vec![(0.0, zero_pairs)];
    all.extend(bins.into_values());

    #[derive(Clone, Default)]
    struct Acc {
        cross: f64,
        var: f64,
        diff: f64,
        n: f64,
    }
    let accs = (0..draws)
        .into_par_iter()
        .fold(
            || vec![Acc::default(); all.len()],
            |mut accs, d| {
                let field = sample_anchor_field(cov, seed.wrapping_add(d as u64));
                for (bin, (_, pairs)) in all.iter().enumerate() {
                    let acc = &mut accs[bin];
                    for &(a, b) in pairs {
                        for mode in [1usize, 2] {
                            let va = field.coeffs[[a / g, a % g, mode]];
                            let vb = field.coeffs[[b / g, b % g, mode]];
                            acc.cross += va * vb;
                            acc.var += 0.5 * (va * va + vb * vb);
                            acc.diff += (va - vb) * (va - vb);
                            acc.n += 1.0;
                        }
                    }
                }
                accs
            },
        )
        .reduce(
            || vec![Acc::default(); all.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.cross += y.cross;
                    x.var += y.var;
                    x.diff += y.diff;
                    x.n += y.n;
                }
                a
            },
        );

    let rz = noll_covariance(config.zernike_count, config.d_over_r0())?;
    let point_variance = rz.tilt_variance();
    let mut separations = Vec::new();
    let mut z_tilt_corr = Vec::new();
    let mut diff_tilt_var = Vec::new();
    let mut theory_z = Vec::new();
    let mut theory_diff = Vec::new();
    for ((sep, _), acc) in all.iter().zip(&accs) {
        separations.push(*sep);
        z_tilt_corr.push(acc.cross / acc.var.max(1e-300));
        diff_tilt_var.push(acc.diff / acc.n.max(1.0));
        let rho = angular_correlation(2, 2, *sep, config)?;
        theory_z.push(rho);
        theory_diff.push(2.0 * point_variance * (1.0 - rho));
    }
    Ok(TiltStatsReport {
        separations,
        z_tilt_corr,
        diff_tilt_var,
        theory_z_tilt: theory_z,
        theory_diff_tilt: theory_diff,
        point_variance,
        sample_count: draws,
    })
}

// ---------------------------------------------------------------------
// Short / long exposure
// ---------------------------------------------------------------------

/// Averaged PSFs and modulation transfer profiles.
#[derive(Debug, Clone)]
pub struct ExposureReport {
    pub se_psf: Array2<f64>,
    pub le_psf: Array2<f64>,
    /// Normalized spatial frequency axis (1.0 = diffraction cutoff).
    pub freq: Vec<f64>,
    pub mtf_le: Vec<f64>,
    pub mtf_se: Vec<f64>,
    pub theory_mtf_le: Vec<f64>,
    pub theory_mtf_se: Vec<f64>,
    pub frames_averaged: usize,
}

impl ExposureReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "freq,mtf_le,mtf_se,theory_mtf_le,theory_mtf_se")?;
        for i in 0..self.freq.len() {
            writeln!(
                w,
                "{:.6},{:.9e},{:.9e},{:.9e},{:.9e}",
                self.freq[i],
                self.mtf_le[i],
                self.mtf_se[i],
                self.theory_mtf_le[i],
                self.theory_mtf_se[i]
            )?;
        }
        Ok(())
    }

    /// Radial second moment about the window center.
    pub fn second_moment(values: &Array2<f64>) -> f64 {
        let (h, w) = values.dim();
        let cy = (h - 1) as f64 / 2.0;
        let cx = (w - 1) as f64 / 2.0;
        let mut m = 0.0;
        for r in 0..h {
            for c in 0..w {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                m += values[[r, c]] * (dx * dx + dy * dy);
            }
        }
        m
    }
}

/// Radially averaged MTF of a PSF window: |FFT| normalized to 1 at DC,
/// averaged over annuli. Frequencies are normalized by the diffraction
/// cutoff (u = k pad / n_fft).
fn radial_mtf(psf: &Array2<f64>, pad_factor: usize, n_fft: usize) -> (Vec<f64>, Vec<f64>) {
    let s = psf.nrows();
    let mut buf = Array2::from_elem((n_fft, n_fft), Complex64::new(0.0, 0.0));
    for r in 0..s {
        for c in 0..s {
            buf[[r, c]] = Complex64::new(psf[[r, c]], 0.0);
        }
    }
    fft2(&mut buf);
    let dc = buf[[0, 0]].norm();
    let max_bin = n_fft / pad_factor; // u = 1 at the cutoff
    let mut sums = vec![0.0f64; max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    for r in 0..n_fft {
        let fy = if r <= n_fft / 2 { r as f64 } else { r as f64 - n_fft as f64 };
        for c in 0..n_fft {
            let fx = if c <= n_fft / 2 { c as f64 } else { c as f64 - n_fft as f64 };
            let bin = fy.hypot(fx).round() as usize;
            if bin <= max_bin {
                sums[bin] += buf[[r, c]].norm() / dc;
                counts[bin] += 1;
            }
        }
    }
    let freq: Vec<f64> = (0..=max_bin)
        .map(|k| k as f64 * pad_factor as f64 / n_fft as f64)
        .collect();
    let mtf: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    (freq, mtf)
}

/// Long- and short-exposure PSFs from oracle realizations, with the
/// classical Kolmogorov transfer-function theory evaluated on the same
/// discrete frequency grid (the diffraction MTF is measured from the
/// zero-phase PSF on that grid, removing discretization bias).
pub fn exposure_psfs(config: &OpticalConfig, frames: usize, seed: u64) -> Result<ExposureReport> {
    if frames < 100 {
        return Err(CoreError::Config(format!(
            "exposure statistics need at least 100 frames, got {frames}"
        )));
    }
    let grid = ApertureGrid::new(config.phase_grid_px);
    let k = config.zernike_count;
    let basis = ZernikeBasisSet::new(k, &grid)?;
    let factor = noll_covariance(k, config.d_over_r0())?.sqrt_factor();
    let s = config.psf_size_px;
    let pixel_scale = config.psf_pixel_scale_m();

    let (le_acc, se_acc) = (0..frames)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let mut alpha = vec![0.0f64; k];
            for row in 0..k {
                alpha[row] = (0..k).map(|col| factor[[row, col]] * z[col]).sum();
            }
            alpha[0] = 0.0;
            let phase = phase_from_coeffs(&alpha, &basis)?;
            let psf = psf_from_phase(&phase, &grid, s, config.pad_factor, pixel_scale)?;
            let (centered, _) = center_psf(&psf);
            Ok::<_, CoreError>((psf.values().clone(), centered.values().clone()))
        })
        .try_reduce(
            || (Array2::zeros((s, s)), Array2::zeros((s, s))),
            |mut a, b| {
                a.0 += &b.0;
                a.1 += &b.1;
                Ok(a)
            },
        )?;

    let mut le_psf = le_acc;
    let mut se_psf = se_acc;
    let le_sum: f64 = le_psf.iter().sum();
    let se_sum: f64 = se_psf.iter().sum();
    le_psf.mapv_inplace(|v| v / le_sum);
    se_psf.mapv_inplace(|v| v / se_sum);

    let n_fft = (4 * s).next_power_of_two().max(256);
    let (freq, mtf_le) = radial_mtf(&le_psf, config.pad_factor, n_fft);
    let (_, mtf_se) = radial_mtf(&se_psf, config.pad_factor, n_fft);
    let diff = diffraction_limited_psf(&grid, s, config.pad_factor, pixel_scale)?;
    let (_, mtf_diff) = radial_mtf(diff.values(), config.pad_factor, n_fft);

    let d_over_r0 = config.d_over_r0();
    let structure = |u: f64| 3.441944 * (u * d_over_r0).powf(5.0 / 3.0);
    let theory_mtf_le: Vec<f64> = freq
        .iter()
        .zip(&mtf_diff)
        .map(|(&u, &md)| md * (-structure(u)).exp())
        .collect();
    let theory_mtf_se: Vec<f64> = freq
        .iter()
        .zip(&mtf_diff)
        .map(|(&u, &md)| md * (-structure(u) * (1.0 - u.min(1.0).powf(1.0 / 3.0))).exp())
        .collect();

    Ok(ExposureReport {
        se_psf,
        le_psf,
        freq,
        mtf_le,
        mtf_se,
        theory_mtf_le,
        theory_mtf_se,
        frames_averaged: frames,
    })
}

// ---------------------------------------------------------------------
// Interpolation comparison
// ---------------------------------------------------------------------

/// Phase-domain versus space-domain interpolation of two aberrations.
#[derive(Debug, Clone)]
pub struct InterpComparison {
    pub psf_phase_interp: Psf,
    pub psf_space_interp: Psf,
    /// Strehl ratios (phase-domain, space-domain).
    pub strehl_pair: (f64, f64),
}

/// Interpolates two coefficient vectors both ways: superposing the phase
/// functions, and superposing the PSFs. Opposite aberrations cancel in
/// the phase domain (a lucky observation) but not in the spatial domain.
pub fn interp_comparison(
    alpha_a: &[f64],
    alpha_b: &[f64],
    lambda: f64,
    config: &OpticalConfig,
) -> Result<InterpComparison> {
    if alpha_a.len() != alpha_b.len() {
        return Err(CoreError::Dimension {
            context: "interp_comparison coefficient vectors",
            expected: alpha_a.len(),
            got: alpha_b.len(),
        });
    }
    let grid = ApertureGrid::new(config.phase_grid_px);
    let basis = ZernikeBasisSet::new(alpha_a.len(), &grid)?;
    let s = config.psf_size_px;
    let pixel_scale = config.psf_pixel_scale_m();
    let pad = config.pad_factor;

    let mixed: Vec<f64> = alpha_a
        .iter()
        .zip(alpha_b)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let phase_mix = phase_from_coeffs(&mixed, &basis)?;
    let psf_phase = psf_from_phase(&phase_mix, &grid, s, pad, pixel_scale)?;

    let h_a = psf_from_phase(&phase_from_coeffs(alpha_a, &basis)?, &grid, s, pad, pixel_scale)?;
    let h_b = psf_from_phase(&phase_from_coeffs(alpha_b, &basis)?, &grid, s, pad, pixel_scale)?;
    let mut mix = h_a.values() * lambda + h_b.values() * (1.0 - lambda);
    let total: f64 = mix.iter().sum();
    mix.mapv_inplace(|v| v / total);
    let psf_space = Psf::from_values(mix, pixel_scale);

    let diff = diffraction_limited_psf(&grid, s, pad, pixel_scale)?;
    let strehl_pair = (
        strehl_ratio(&psf_phase, &diff),
        strehl_ratio(&psf_space, &diff),
    );
    Ok(InterpComparison {
        psf_phase_interp: psf_phase,
        psf_space_interp: psf_space,
        strehl_pair,
    })
}

// ---------------------------------------------------------------------
// Color comparison
// ---------------------------------------------------------------------

/// Single-PSF trichannel render versus per-wavelength rendering.
#[derive(Debug, Clone)]
pub struct ColorComparison {
    pub single_psf_frame: SimFrame,
    pub per_wavelength_frame: SimFrame,
    pub error_map: Array2<f64>,
    pub max_rel_error: f64,
}

/// Renders a color scene once with shared maps at the reference
/// wavelength and once per wavelength with the Fried parameter rescaled
/// by (lambda/lambda_ref)^(6/5) and the identical random stream, then
/// differences the two.
pub fn color_comparison(
    x: &SourceImage,
    config: &OpticalConfig,
    wavelengths: [f64; 3],
    basis: &PsfBasis,
    weights: &MlpWeights,
    covariance: &SpatialCovariance,
    seed: u64,
) -> Result<ColorComparison> {
    if x.channel_count() != 3 {
        return Err(CoreError::Config(
            "color comparison needs a 3-channel image".into(),
        ));
    }
    if config.d_over_r0() > 8.0 {
        return Err(CoreError::Config(format!(
            "color comparison assumes moderate turbulence (D/r0 <= 8), got {}",
            config.d_over_r0()
        )));
    }
    let renderer = Renderer::new(
        config.clone(),
        basis.clone(),
        weights.clone(),
        covariance.clone(),
    )?;
    let single = renderer.render(x, seed)?;

    let lambda_ref = config.wavelength_m;
    let mut channels = Vec::with_capacity(3);
    for (ci, &lambda) in wavelengths.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.wavelength_m = lambda;
        cfg.fried_parameter_m =
            config.fried_parameter_m * (lambda / lambda_ref).powf(6.0 / 5.0);
        let cov_c = covariance.with_d_over_r0(cfg.d_over_r0());
        let r =
            Renderer::new_unchecked(cfg, basis.clone(), weights.clone(), cov_c)?;
        let mono = SourceImage::gray(x.channel(ci).clone())?;
        let frame = r.render(&mono, seed)?;
        channels.push(frame.channels[0].clone());
    }
    let per_wavelength = SimFrame {
        channels,
        provenance: single.provenance,
    };

    let (h, w) = (x.height(), x.width());
    let peak = per_wavelength
        .channels
        .iter()
        .flat_map(|ch| ch.iter())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut error_map = Array2::zeros((h, w));
    let mut max_rel = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let mut e = 0.0f64;
            for ch in 0..3 {
                e = e.max(
                    (single.channels[ch][[r, c]] - per_wavelength.channels[ch][[r, c]]).abs(),
                );
            }
            let rel = e / peak;
            error_map[[r, c]] = rel;
            max_rel = max_rel.max(rel);
        }
    }
    Ok(ColorComparison {
        single_psf_frame: single,
        per_wavelength_frame: per_wavelength,
        error_map,
        max_rel_error: max_rel,
    })
}

// ---------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------

/// Wall-clock comparison of the fast path against the per-pixel oracle.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub image_size: usize,
    pub frames: usize,
    pub fast_seconds_per_frame: f64,
    pub oracle_seconds_per_pixel: f64,
    /// Oracle time for a full frame, linear extrapolation from the tile.
    pub oracle_seconds_per_frame_extrapolated: f64,
    pub oracle_tile_pixels: usize,
    pub speedup: f64,
    pub workers: usize,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "method            s/frame ({0}x{0})\n",
            self.image_size
        ));
        out.push_str(&format!(
            "fast path         {:.4}\n",
            self.fast_seconds_per_frame
        ));
        out.push_str(&format!(
            "per-pixel oracle  {:.1}   (extrapolated from a {} px tile)\n",
            self.oracle_seconds_per_frame_extrapolated, self.oracle_tile_pixels
        ));
        out.push_str(&format!("speedup           {:.0}x\n", self.speedup));
        out.push_str(&format!("workers           {}\n", self.workers));
        out
    }
}

/// Times the warmed fast path over `frames` renders and the oracle over
/// a small tile (extrapolated linearly in pixel count, as flagged in the
/// report). `frames = 0` produces an empty report.
pub fn benchmark(
    renderer: &Renderer,
    image_size: usize,
    frames: usize,
) -> Result<BenchReport> {
    let workers = rayon::current_num_threads();
    if frames == 0 {
        return Ok(BenchReport {
            image_size,
            frames: 0,
            fast_seconds_per_frame: 0.0,
            oracle_seconds_per_pixel: 0.0,
            oracle_seconds_per_frame_extrapolated: 0.0,
            oracle_tile_pixels: 0,
            speedup: 0.0,
            workers,
        });
    }
    let scene = Array2::from_shape_fn((image_size, image_size), |(r, c)| {
        0.5 + 0.5 * ((r as f64 * 0.37).sin() * (c as f64 * 0.23).cos())
    });
    let x = SourceImage::gray(scene)?;
    renderer.warm(image_size, image_size)?;
    // One untimed render finishes any remaining lazy setup.
    renderer.render(&x, 0)?;
    let t0 = Instant::now();
    for f in 0..frames {
        renderer.render(&x, f as u64)?;
    }
    let fast = t0.elapsed().as_secs_f64() / frames as f64;

    // Oracle on a small tile with representative dense coefficients.
    let tile = 16usize.min(image_size);
    let maps = renderer.coefficient_maps(image_size, image_size, 0)?;
    let _ = maps;
    let config = renderer.config().clone();
    let anchors = sample_anchor_field(renderer.covariance(), 0);
    let dense_full = crate::render::interpolate_alpha(&anchors, image_size, image_size);
    let mut dense_tile = Array3::zeros((tile, tile, config.zernike_count));
    for r in 0..tile {
        for c in 0..tile {
            for j in 0..config.zernike_count {
                dense_tile[[r, c, j]] = dense_full[[r, c, j]];
            }
        }
    }
    let tile_scene = Array2::from_shape_fn((tile, tile), |(r, c)| {
        0.5 + 0.4 * (((r + c) as f64) * 0.11).sin()
    });
    let tile_img = SourceImage::gray(tile_scene)?;
    let t1 = Instant::now();
    brute_force_frame(&tile_img, &dense_tile, &config, false)?;
    let oracle_tile = t1.elapsed().as_secs_f64();
    let per_pixel = oracle_tile / (tile * tile) as f64;
    let extrapolated = per_pixel * (image_size * image_size) as f64;

    Ok(BenchReport {
        image_size,
        frames,
        fast_seconds_per_frame: fast,
        oracle_seconds_per_pixel: per_pixel,
        oracle_seconds_per_frame_extrapolated: extrapolated,
        oracle_tile_pixels: tile * tile,
        speedup: extrapolated / fast,
        workers,
    })
}

// ---------------------------------------------------------------------
// Raster output helpers for reports
// ---------------------------------------------------------------------

/// Writes a nonnegative field as a 16-bit grayscale PNG, scaled to the
/// peak.
pub fn save_field_png16(values: &Array2<f64>, path: &std::path::Path) -> Result<()> {
    let (h, w) = values.dim();
    let peak = values.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (values[[r, c]].max(0.0) / peak * 65535.0).round() as u16;
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| CoreError::Image(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> OpticalConfig {
        let mut c = OpticalConfig::default();
        c.phase_grid_px = 32;
        c.psf_size_px = 17;
        c.zernike_count = 10;
        c
    }

    #[test]
    fn zero_alpha_oracle_equals_diffraction_convolution() {
        let c = small_config();
        let (h, w) = (12, 14);
        let scene = Array2::from_shape_fn((h, w), |(r, c)| ((r * 5 + c * 3) % 7) as f64 / 7.0);
        let x = SourceImage::gray(scene.clone()).unwrap();
        let dense = Array3::zeros((h, w, c.zernike_count));
        let out = brute_force_frame(&x, &dense, &c, false).unwrap();

        let grid = ApertureGrid::new(c.phase_grid_px);
        let diff =
            diffraction_limited_psf(&grid, c.psf_size_px, c.pad_factor, 1.0).unwrap();
        let s = c.psf_size_px;
        let half = s / 2;
        for r in 0..h {
            for cc in 0..w {
                let mut want = 0.0;
                for u in 0..s {
                    let sr = (r + half).saturating_sub(u).min(h - 1);
                    for v in 0..s {
                        let sc = (cc + half).saturating_sub(v).min(w - 1);
                        want += diff.values()[[u, v]] * scene[[sr, sc]];
                    }
                }
                assert!((out.channels[0][[r, cc]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_alpha_oracle_is_invariant_convolution_plus_shift() {
        let c = small_config();
        let (h, w) = (16, 16);
        let scene = Array2::from_shape_fn((h, w), |(r, _)| r as f64 / 16.0);
        let x = SourceImage::gray(scene).unwrap();
        let mut alpha = vec![0.0; c.zernike_count];
        alpha[3] = 0.6;
        alpha[5] = -0.4;
        let dense = Array3::from_shape_fn((h, w, c.zernike_count), |(_, _, j)| alpha[j]);
        let out = brute_force_frame(&x, &dense, &c, false).unwrap();

        // Constant coefficients: the oracle equals one spatially
        // invariant convolution with that single PSF.
        let grid = ApertureGrid::new(c.phase_grid_px);
        let basis = ZernikeBasisSet::new(c.zernike_count, &grid).unwrap();
        let phase = phase_from_coeffs(&dense_row(&dense), &basis).unwrap();
        let psf =
            psf_from_phase(&phase, &grid, c.psf_size_px, c.pad_factor, 1.0).unwrap();
        let s = c.psf_size_px;
        let half = s / 2;
        for r in 0..h {
            for cc in 0..w {
                let mut want = 0.0;
                for u in 0..s {
                    let sr = (r + half).saturating_sub(u).min(h - 1);
                    for v in 0..s {
                        let sc = (cc + half).saturating_sub(v).min(w - 1);
                        want += psf.values()[[u, v]] * x.channel(0)[[sr, sc]];
                    }
                }
                assert!((out.channels[0][[r, cc]] - want).abs() < 1e-12);
            }
        }
    }

    fn dense_row(dense: &Array3<f64>) -> Vec<f64> {
        (0..dense.dim().2).map(|j| dense[[0, 0, j]]).collect()
    }

    #[test]
    fn size_guard_rejects_large_scenes() {
        let c = small_config();
        let n = 200;
        let x = SourceImage::gray(Array2::zeros((n, n))).unwrap();
        let dense = Array3::zeros((n, n, c.zernike_count));
        match brute_force_frame(&x, &dense, &c, false) {
            Err(CoreError::SizeGuard { .. }) => {}
            other => panic!("expected size guard, got {other:?}"),
        }
    }

    #[test]
    fn opposite_phases_cancel_in_the_phase_domain_only() {
        let c = small_config();
        let k = c.zernike_count;
        let mut alpha = vec![0.0; k];
        // High-order-only aberration with 2 rad RMS.
        let raw = [0.9, -0.4, 0.7, 0.5, -0.8, 0.3, 0.6];
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in raw.iter().enumerate() {
            alpha[j + 3] = v / norm * 2.0;
        }
        let neg: Vec<f64> = alpha.iter().map(|v| -v).collect();

        let cmp = interp_comparison(&alpha, &neg, 0.5, &c).unwrap();
        assert!(
            cmp.strehl_pair.0 > 0.999,
            "phase midpoint Strehl {}",
            cmp.strehl_pair.0
        );
        assert!(
            cmp.strehl_pair.1 < 0.6,
            "space midpoint Strehl {}",
            cmp.strehl_pair.1
        );

        // Endpoint: lambda = 0 reproduces h_b on both routes.
        let end = interp_comparison(&alpha, &neg, 0.0, &c).unwrap();
        let grid = ApertureGrid::new(c.phase_grid_px);
        let basis = ZernikeBasisSet::new(k, &grid).unwrap();
        let hb = psf_from_phase(
            &phase_from_coeffs(&neg, &basis).unwrap(),
            &grid,
            c.psf_size_px,
            c.pad_factor,
            1.0,
        )
        .unwrap();
        for (a, b) in end
            .psf_phase_interp
            .values()
            .iter()
            .zip(hb.values().iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in end
            .psf_space_interp
            .values()
            .iter()
            .zip(hb.values().iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exposure_moments_order_and_weak_limit() {
        let mut c = small_config();
        c.psf_size_px = 21;
        c.fried_parameter_m = c.aperture_diameter_m / 2.0; // D/r0 = 2
        let rep = exposure_psfs(&c, 150, 9).unwrap();
        assert_eq!(rep.frames_averaged, 150);
        let m_le = ExposureReport::second_moment(&rep.le_psf);
        let m_se = ExposureReport::second_moment(&rep.se_psf);
        assert!(
            m_le >= m_se,
            "LE second moment {m_le} must be at least SE {m_se}"
        );
        // Vanishing turbulence: both approach the diffraction PSF.
        let mut weak = c.clone();
        weak.fried_parameter_m = weak.aperture_diameter_m / 0.01;
        let rep_w = exposure_psfs(&weak, 100, 2).unwrap();
        let grid = ApertureGrid::new(weak.phase_grid_px);
        let diff =
            diffraction_limited_psf(&grid, weak.psf_size_px, weak.pad_factor, 1.0).unwrap();
        let l1 = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
        };
        assert!(l1(&rep_w.le_psf, diff.values()) < 1e-2);
        assert!(l1(&rep_w.se_psf, diff.values()) < 1e-2);
    }
}
