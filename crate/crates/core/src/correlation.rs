//! Angle-of-arrival statistics: correlation of Zernike coefficients
//! between lines of sight, and sampling of spatially correlated
//! coefficient fields on an anchor grid.
//!
//! Two apertures looking through the same turbulence at angular
//! separation theta see correlated coefficients. With the turbulence in
//! thin layers at fractional path positions z_l, each layer contributes a
//! transverse displacement s = theta z_l L, and the correlation reduces to
//! 1-D frequency integrals of Bessel products against the (von Karman)
//! phase spectrum. The direction-averaged form is used, which keeps the
//! usual selection rules (modes couple only within one azimuthal
//! order/parity class) at every separation and yields a provably PSD
//! covariance: it is a rotation mixture of the anisotropic model.
//!
//! Kernels depend only on the radial-order pair, so a handful of
//! quadrature curves memoized on a separation grid (cubic interpolation
//! between nodes) covers an entire covariance build.

use crate::config::OpticalConfig;
use crate::covariance::noll_covariance;
use crate::error::{CoreError, Result};
use crate::fft2::{fft2, ifft2};
use crate::io;
use crate::linalg::psd_sqrt_factor;
use crate::rng::substream;
use crate::zernike::noll_index;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::OnceLock;

/// Hard ceiling on the anchor grid (G^2 anchors).
pub const MAX_ANCHORS: usize = 64 * 64;

/// Largest grid factored densely; larger grids use the spectral route.
pub const DENSE_GRID_LIMIT: usize = 16;

const MEMORY_BUDGET_BYTES: usize = 3 << 30;

// ---------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------

fn gauss_legendre_16() -> &'static ([f64; 16], [f64; 16]) {
    static CACHE: OnceLock<([f64; 16], [f64; 16])> = OnceLock::new();
    CACHE.get_or_init(|| {
        // Nodes/weights on [-1, 1] by Newton iteration on P_16.
        let n = 16usize;
        let mut nodes = [0.0; 16];
        let mut weights = [0.0; 16];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = x;
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

fn gl16<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gauss_legendre_16();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..16 {
        acc += weights[i] * f(c + h * nodes[i]);
    }
    acc * h
}

/// Spectral weight of the phase PSD in normalized frequency t = 2 pi R f:
/// von Karman (t^2 + t0^2)^(-11/6), with t0 = 0 for pure Kolmogorov.
#[inline]
fn spectral_weight(t: f64, t0: f64) -> f64 {
    (t * t + t0 * t0).powf(-11.0 / 6.0)
}

/// Integrand of the pair integral I(sigma), without the constant factors:
/// J_{n_i+1}(t) J_{n_j+1}(t) J_0(sigma t) W(t) / t.
#[inline]
fn pair_integrand(np_i: u32, np_j: u32, t0: f64, sigma: f64, t: f64) -> f64 {
    crate::specfun::bessel_jn(np_i, t)
        * crate::specfun::bessel_jn(np_j, t)
        * crate::specfun::bessel_j0(sigma * t)
        * spectral_weight(t, t0)
        / t
}

/// Upper integration limit; the integrand envelope beyond it is below
/// 1e-9 of the integral for every order pair used here.
const T_UPPER: f64 = 60.0;

fn integrate_once(np_i: u32, np_j: u32, t0: f64, sigma: f64, level: u32) -> f64 {
    let refine = 1usize << level;
    // Region A: t in [0, 1] via t = u^3, which absorbs the t^(-2/3)
    // origin behavior of the Kolmogorov tilt kernel.
    let f_a = |u: f64| {
        if u == 0.0 {
            return 0.0;
        }
        let t = u * u * u;
        3.0 * u * u * pair_integrand(np_i, np_j, t0, sigma, t)
    };
    let na = (6 + sigma as usize / 6) * refine;
    let mut acc = 0.0;
    for k in 0..na {
        let a = k as f64 / na as f64;
        let b = (k + 1) as f64 / na as f64;
        acc += gl16(&f_a, a, b);
    }
    // Region B: panels spanning at most ~3 periods of the combined
    // oscillation, well inside what 16-point Gauss-Legendre resolves.
    let f_b = |t: f64| pair_integrand(np_i, np_j, t0, sigma, t);
    let w = (0.5f64).min(3.0 * std::f64::consts::PI / (sigma + 1.0)) / refine as f64;
    let nb = ((T_UPPER - 1.0) / w).ceil() as usize;
    for k in 0..nb {
        let a = 1.0 + (T_UPPER - 1.0) * k as f64 / nb as f64;
        let b = 1.0 + (T_UPPER - 1.0) * (k + 1) as f64 / nb as f64;
        acc += gl16(&f_b, a, b);
    }
    acc
}

/// Adaptive evaluation of I(sigma) for radial orders (n_i, n_j):
/// panels are refined until two successive refinements agree within
/// `tol_abs`.
fn pair_integral(n_i: u32, n_j: u32, t0: f64, sigma: f64, tol_abs: f64) -> Result<f64> {
    let (np_i, np_j) = (n_i + 1, n_j + 1);
    let mut prev = integrate_once(np_i, np_j, t0, sigma, 0);
    for level in 1..=3 {
        let cur = integrate_once(np_i, np_j, t0, sigma, level);
        if (cur - prev).abs() <= tol_abs {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(CoreError::QuadratureNonConvergence {
        context: "angular correlation pair integral",
        estimate: prev,
        error: tol_abs,
    })
}

/// I(0) with a self-scaled relative tolerance of 1e-7.
fn pair_integral_zero(n_i: u32, n_j: u32, t0: f64) -> Result<f64> {
    let (np_i, np_j) = (n_i + 1, n_j + 1);
    let mut prev = integrate_once(np_i, np_j, t0, 0.0, 0);
    for level in 1..=3 {
        let cur = integrate_once(np_i, np_j, t0, 0.0, level);
        if (cur - prev).abs() <= 1e-7 * cur.abs() {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(CoreError::QuadratureNonConvergence {
        context: "angular correlation normalization integral",
        estimate: prev,
        error: 1e-7,
    })
}

/// Normalized frequency cutoff of the outer scale for a configuration.
fn t0_of(config: &OpticalConfig) -> f64 {
    if config.outer_scale_m.is_finite() {
        std::f64::consts::TAU * (config.aperture_diameter_m / 2.0) / config.outer_scale_m
    } else {
        0.0
    }
}

/// Layer-projected normalized separations sigma_l = theta z_l / R and
/// normalized weights.
fn layer_sigmas(config: &OpticalConfig, separation_rad: f64) -> Vec<(f64, f64)> {
    let r = config.aperture_diameter_m / 2.0;
    let wsum: f64 = config.layers.iter().map(|l| l.weight).sum();
    config
        .layers
        .iter()
        .map(|l| {
            (
                separation_rad.abs() * l.position * config.path_length_m / r,
                l.weight / wsum,
            )
        })
        .collect()
}

/// Normalized cross-correlation of Zernike coefficients of two apertures
/// at the given angular separation; in [-1, 1]. Modes in different
/// azimuthal order/parity classes are uncorrelated and return 0.
pub fn angular_correlation(
    mode_i: usize,
    mode_j: usize,
    separation_rad: f64,
    config: &OpticalConfig,
) -> Result<f64> {
    if mode_i < 2 || mode_j < 2 {
        return Err(CoreError::Config(
            "angular correlation is defined for modes >= 2 (piston carries no intensity)".into(),
        ));
    }
    let (n_i, m_i) = noll_index(mode_i);
    let (n_j, m_j) = noll_index(mode_j);
    if m_i != m_j {
        return Ok(0.0);
    }
    let t0 = t0_of(config);
    let i0_ii = pair_integral_zero(n_i, n_i, t0)?;
    let i0_jj = pair_integral_zero(n_j, n_j, t0)?;
    let i0_ij = pair_integral_zero(n_i, n_j, t0)?;
    let tol = 1e-6 * i0_ij.abs().max(1e-3 * (i0_ii * i0_jj).sqrt());
    let mut acc = 0.0;
    for (sigma, w) in layer_sigmas(config, separation_rad) {
        acc += w * pair_integral(n_i, n_j, t0, sigma, tol)?;
    }
    let sign = crate::covariance::gamma_ratio(n_i, n_j, m_i.unsigned_abs()).signum();
    Ok(sign * acc / (i0_ii * i0_jj).sqrt())
}

// ---------------------------------------------------------------------
// Memoized kernels
// ---------------------------------------------------------------------

/// I(sigma)/I(0) for one radial-order pair, tabulated on a uniform
/// separation grid with Catmull-Rom interpolation between nodes.
#[derive(Debug, Clone)]
struct KernelCurve {
    step: f64,
    values: Vec<f64>,
}

impl KernelCurve {
    fn build(n_i: u32, n_j: u32, t0: f64, sigma_max: f64) -> Result<Self> {
        let step = 0.25;
        let len = (sigma_max / step).ceil() as usize + 4;
        // Curves are pure functions of (orders, outer scale); repeated
        // covariance builds share them through a process-wide cache.
        static CACHE: OnceLock<std::sync::Mutex<BTreeMap<(u32, u32, u64), KernelCurve>>> =
            OnceLock::new();
        let cache = CACHE.get_or_init(|| std::sync::Mutex::new(BTreeMap::new()));
        let key = (n_i, n_j, t0.to_bits());
        if let Some(hit) = cache.lock().unwrap().get(&key) {
            if hit.values.len() >= len {
                return Ok(hit.clone());
            }
        }
        let i0 = pair_integral_zero(n_i, n_j, t0)?;
        let tol = 1e-6 * i0.abs();
        let values: Vec<f64> = (0..len)
            .into_par_iter()
            .map(|k| {
                if k == 0 {
                    Ok(1.0)
                } else {
                    Ok(pair_integral(n_i, n_j, t0, k as f64 * step, tol)? / i0)
                }
            })
            .collect::<Result<_>>()?;
        let curve = KernelCurve { step, values };
        cache.lock().unwrap().insert(key, curve.clone());
        Ok(curve)
    }

    fn eval(&self, sigma: f64) -> f64 {
        let s = sigma.abs() / self.step;
        let i = s.floor() as usize;
        if i + 2 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let f = s - i as f64;
        if f == 0.0 {
            return self.values[i];
        }
        let p0 = self.values[i.saturating_sub(1)];
        let p1 = self.values[i];
        let p2 = self.values[i + 1];
        let p3 = self.values[i + 2];
        0.5 * (2.0 * p1
            + (p2 - p0) * f
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * f * f
            + (3.0 * p1 - p0 - 3.0 * p2 + p3) * f * f * f)
    }
}

/// Kernel table for one configuration: curves per radial-order pair plus
/// the layer profile, giving the covariance decay ratio r_ij(theta).
#[derive(Debug)]
struct KernelTable {
    curves: BTreeMap<(u32, u32), KernelCurve>,
    layers: Vec<(f64, f64)>, // (z_l L / R, weight), weights normalized
}

impl KernelTable {
    fn build(config: &OpticalConfig, order_pairs: &[(u32, u32)], theta_max: f64) -> Result<Self> {
        let t0 = t0_of(config);
        let r = config.aperture_diameter_m / 2.0;
        let wsum: f64 = config.layers.iter().map(|l| l.weight).sum();
        let layers: Vec<(f64, f64)> = config
            .layers
            .iter()
            .map(|l| (l.position * config.path_length_m / r, l.weight / wsum))
            .collect();
        let z_max = layers.iter().map(|l| l.0).fold(0.0, f64::max);
        let sigma_max = theta_max * z_max + 1.0;
        let curves = order_pairs
            .par_iter()
            .map(|&(a, b)| Ok(((a, b), KernelCurve::build(a, b, t0, sigma_max)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(KernelTable { curves, layers })
    }

    /// Covariance decay ratio for a mode pair at angular separation
    /// theta; exactly 1 at theta = 0.
    fn ratio(&self, n_i: u32, n_j: u32, theta: f64) -> f64 {
        if theta == 0.0 {
            return 1.0;
        }
        let key = (n_i.min(n_j), n_i.max(n_j));
        let curve = &self.curves[&key];
        self.layers
            .iter()
            .map(|&(z, w)| w * curve.eval(theta * z))
            .sum()
    }
}

// ---------------------------------------------------------------------
// Anchor grid
// ---------------------------------------------------------------------

/// Regular G x G grid of viewing directions covering the field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    g: usize,
    step_x_rad: f64,
    step_y_rad: f64,
}

impl AnchorGrid {
    pub fn new(g: usize, fov_x_rad: f64, fov_y_rad: f64) -> Result<Self> {
        if g == 0 {
            return Err(CoreError::Config("anchor grid needs at least one point".into()));
        }
        if g * g > MAX_ANCHORS {
            return Err(CoreError::Config(format!(
                "anchor grid {g}x{g} exceeds the maximum of {MAX_ANCHORS} anchors"
            )));
        }
        let (step_x_rad, step_y_rad) = if g == 1 {
            (0.0, 0.0)
        } else {
            (fov_x_rad / (g - 1) as f64, fov_y_rad / (g - 1) as f64)
        };
        Ok(AnchorGrid {
            g,
            step_x_rad,
            step_y_rad,
        })
    }

    /// Grid registered to the pixel centers of an H x W image: anchors at
    /// the image corners, spacing set by the pixel angular pitch.
    pub fn for_image(g: usize, height: usize, width: usize, config: &OpticalConfig) -> Result<Self> {
        let pa = config.pixel_angle_rad();
        AnchorGrid::new(
            g,
            width.saturating_sub(1) as f64 * pa,
            height.saturating_sub(1) as f64 * pa,
        )
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn step_x_rad(&self) -> f64 {
        self.step_x_rad
    }

    pub fn step_y_rad(&self) -> f64 {
        self.step_y_rad
    }

    /// Angular position of anchor (gy, gx) relative to anchor (0, 0).
    pub fn position(&self, gy: usize, gx: usize) -> (f64, f64) {
        (gx as f64 * self.step_x_rad, gy as f64 * self.step_y_rad)
    }

    pub fn separation(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dx = (a.1 as f64 - b.1 as f64) * self.step_x_rad;
        let dy = (a.0 as f64 - b.0 as f64) * self.step_y_rad;
        dx.hypot(dy)
    }
}

// ---------------------------------------------------------------------
// Spatial covariance
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct ModeClass {
    /// 1-based Noll indices sharing one signed azimuthal order.
    modes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
enum FactorRoute {
    /// Per class: square-root factor of the (G^2 k_c)^2 class covariance.
    Dense(Vec<Array2<f64>>),
    /// Per class: circulant-embedding spectral factors on a 2G torus,
    /// packed as [omega][a][b] with a, b mode positions in the class.
    Spectral(Vec<SpectralClass>),
}

#[derive(Debug, Clone, PartialEq)]
struct SpectralClass {
    torus: usize,
    factors: Vec<f64>,
}

/// Covariance of all anchors' coefficient vectors, stored as a sampling
/// factor. At zero separation each block reduces exactly to the modal
/// covariance.
#[derive(Debug, Clone)]
pub struct SpatialCovariance {
    g: usize,
    k: usize,
    d_over_r0: f64,
    config_hash: u64,
    step_x_rad: f64,
    step_y_rad: f64,
    classes: Vec<ModeClass>,
    route: FactorRoute,
}

/// Spatially correlated Zernike coefficients on the anchor grid;
/// `coeffs[[gy, gx, j-1]]` is mode j at that anchor, in radians.
#[derive(Debug, Clone)]
pub struct AnchorField {
    pub g: usize,
    pub k: usize,
    pub coeffs: Array3<f64>,
    pub seed: u64,
}

fn mode_classes(k: usize) -> Vec<ModeClass> {
    let mut by_m: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for j in 2..=k {
        let (_, m) = noll_index(j);
        by_m.entry(m).or_default().push(j);
    }
    by_m
        .into_values()
        .map(|modes| ModeClass { modes })
        .collect()
}

fn unique_order_pairs(classes: &[ModeClass]) -> Vec<(u32, u32)> {
    let mut set = std::collections::BTreeSet::new();
    for class in classes {
        for (ai, &ja) in class.modes.iter().enumerate() {
            for &jb in &class.modes[ai..] {
                let (na, _) = noll_index(ja);
                let (nb, _) = noll_index(jb);
                set.insert((na.min(nb), na.max(nb)));
            }
        }
    }
    set.into_iter().collect()
}

pub fn build_spatial_covariance(
    grid: &AnchorGrid,
    config: &OpticalConfig,
) -> Result<SpatialCovariance> {
    let force_dense = grid.g() <= DENSE_GRID_LIMIT;
    build_spatial_covariance_routed(grid, config, force_dense)
}

/// Route selection exposed for tests: `dense` forces the dense factor.
pub(crate) fn build_spatial_covariance_routed(
    grid: &AnchorGrid,
    config: &OpticalConfig,
    dense: bool,
) -> Result<SpatialCovariance> {
    config.validate()?;
    let k = config.zernike_count;
    let g = grid.g();
    let classes = mode_classes(k);
    let rz = noll_covariance(k, config.d_over_r0())?;

    if dense {
        let needed: usize = classes
            .iter()
            .map(|c| (g * g * c.modes.len()).pow(2) * 8)
            .sum();
        if needed > MEMORY_BUDGET_BYTES {
            return Err(CoreError::MemoryBudget {
                needed_bytes: needed,
                budget_bytes: MEMORY_BUDGET_BYTES,
            });
        }
    }

    // Largest separation the kernels must cover: grid diagonal for the
    // dense route, the torus wrap for the spectral route.
    let reach = if dense { (g - 1).max(1) } else { g };
    let theta_max = (reach as f64 * grid.step_x_rad).hypot(reach as f64 * grid.step_y_rad);
    let table = KernelTable::build(config, &unique_order_pairs(&classes), theta_max)?;

    let route = if dense {
        let factors: Vec<Array2<f64>> = classes
            .iter()
            .map(|class| {
                let kc = class.modes.len();
                let dim = g * g * kc;
                let mut m = Array2::zeros((dim, dim));
                for ap in 0..g * g {
                    let pa = (ap / g, ap % g);
                    for aq in ap..g * g {
                        let pb = (aq / g, aq % g);
                        let theta = grid.separation(pa, pb);
                        for (ci, &ji) in class.modes.iter().enumerate() {
                            for (cj, &jj) in class.modes.iter().enumerate() {
                                let (ni, _) = noll_index(ji);
                                let (nj, _) = noll_index(jj);
                                let v = rz.entry(ji, jj) * table.ratio(ni, nj, theta);
                                m[[ap * kc + ci, aq * kc + cj]] = v;
                                m[[aq * kc + cj, ap * kc + ci]] = v;
                            }
                        }
                    }
                }
                psd_sqrt_factor(&m)
            })
            .collect();
        FactorRoute::Dense(factors)
    } else {
        let torus = 2 * g;
        let spectral = classes
            .iter()
            .map(|class| spectral_class_factor(class, grid, &rz, &table, torus))
            .collect::<Vec<_>>();
        FactorRoute::Spectral(spectral)
    };

    Ok(SpatialCovariance {
        g,
        k,
        d_over_r0: config.d_over_r0(),
        config_hash: config.asset_hash(),
        step_x_rad: grid.step_x_rad,
        step_y_rad: grid.step_y_rad,
        classes,
        route,
    })
}

fn spectral_class_factor(
    class: &ModeClass,
    grid: &AnchorGrid,
    rz: &crate::covariance::ModalCovariance,
    table: &KernelTable,
    torus: usize,
) -> SpectralClass {
    let kc = class.modes.len();
    let t = torus;
    // Spectra of the wrapped stationary kernels, one per mode pair.
    let mut spectra = vec![vec![0.0f64; t * t]; kc * kc];
    for a in 0..kc {
        for b in a..kc {
            let ja = class.modes[a];
            let jb = class.modes[b];
            let (na, _) = noll_index(ja);
            let (nb, _) = noll_index(jb);
            let base = rz.entry(ja, jb);
            let mut field = Array2::from_elem((t, t), Complex64::new(0.0, 0.0));
            for dr in 0..t {
                for dc in 0..t {
                    let wr = dr.min(t - dr) as f64 * grid.step_y_rad;
                    let wc = dc.min(t - dc) as f64 * grid.step_x_rad;
                    let theta = wr.hypot(wc);
                    field[[dr, dc]] = Complex64::new(base * table.ratio(na, nb, theta), 0.0);
                }
            }
            fft2(&mut field);
            for (idx, v) in field.iter().enumerate() {
                spectra[a * kc + b][idx] = v.re;
                spectra[b * kc + a][idx] = v.re;
            }
        }
    }
    // Per-frequency PSD factor, negative embedding eigenvalues clipped.
    let mut factors = vec![0.0f64; t * t * kc * kc];
    for w in 0..t * t {
        let mut m = Array2::zeros((kc, kc));
        for a in 0..kc {
            for b in 0..kc {
                m[[a, b]] = spectra[a * kc + b][w];
            }
        }
        let f = psd_sqrt_factor(&m);
        for a in 0..kc {
            for b in 0..kc {
                factors[w * kc * kc + a * kc + b] = f[[a, b]];
            }
        }
    }
    SpectralClass { torus, factors }
}

impl SpatialCovariance {
    pub fn g(&self) -> usize {
        self.g
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_over_r0(&self) -> f64 {
        self.d_over_r0
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn grid(&self) -> AnchorGrid {
        AnchorGrid {
            g: self.g,
            step_x_rad: self.step_x_rad,
            step_y_rad: self.step_y_rad,
        }
    }

    /// Rescales the factor to a different turbulence strength; every
    /// covariance entry carries the same (D/r0)^(5/3) power law, so the
    /// factor scales by the 5/6 power.
    pub fn with_d_over_r0(&self, d_over_r0: f64) -> SpatialCovariance {
        let s = (d_over_r0 / self.d_over_r0).powf(5.0 / 6.0);
        let mut out = self.clone();
        out.d_over_r0 = d_over_r0;
        match &mut out.route {
            FactorRoute::Dense(fs) => {
                for f in fs {
                    f.mapv_inplace(|v| v * s);
                }
            }
            FactorRoute::Spectral(cs) => {
                for c in cs {
                    for v in &mut c.factors {
                        *v *= s;
                    }
                }
            }
        }
        out
    }

    /// Dense covariance entry between (anchor p, mode ji) and (anchor q,
    /// mode jj), reconstructed from the factor. Test/diagnostic use.
    pub fn reconstruct_entry(
        &self,
        p: (usize, usize),
        ji: usize,
        q: (usize, usize),
        jj: usize,
    ) -> f64 {
        match &self.route {
            FactorRoute::Dense(factors) => {
                for (class, f) in self.classes.iter().zip(factors) {
                    let (Some(ci), Some(cj)) = (
                        class.modes.iter().position(|&m| m == ji),
                        class.modes.iter().position(|&m| m == jj),
                    ) else {
                        continue;
                    };
                    let kc = class.modes.len();
                    let row = (p.0 * self.g + p.1) * kc + ci;
                    let col = (q.0 * self.g + q.1) * kc + cj;
                    return (0..f.ncols()).map(|t| f[[row, t]] * f[[col, t]]).sum();
                }
                0.0
            }
            FactorRoute::Spectral(_) => {
                unimplemented!("entry reconstruction is a dense-route diagnostic")
            }
        }
    }
}

/// Draws one spatially correlated coefficient field. Deterministic in
/// (covariance, seed) regardless of scheduling; each mode class consumes
/// its own counter-based stream.
pub fn sample_anchor_field(cov: &SpatialCovariance, seed: u64) -> AnchorField {
    let g = cov.g;
    let mut coeffs = Array3::zeros((g, g, cov.k));
    match &cov.route {
        FactorRoute::Dense(factors) => {
            for (ci, (class, f)) in cov.classes.iter().zip(factors).enumerate() {
                let kc = class.modes.len();
                let dim = g * g * kc;
                let mut rng = substream(seed, ci as u64);
                let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let y: Vec<f64> = (0..dim)
                    .into_par_iter()
                    .map(|row| (0..dim).map(|t| f[[row, t]] * z[t]).sum())
                    .collect();
                for anchor in 0..g * g {
                    for (cm, &j) in class.modes.iter().enumerate() {
                        coeffs[[anchor / g, anchor % g, j - 1]] = y[anchor * kc + cm];
                    }
                }
            }
        }
        FactorRoute::Spectral(specs) => {
            for (ci, (class, spec)) in cov.classes.iter().zip(specs).enumerate() {
                let kc = class.modes.len();
                let t = spec.torus;
                let mut rng = substream(seed, ci as u64);
                // Complex standard normals per frequency and mode.
                let mut zeta = vec![Complex64::new(0.0, 0.0); t * t * kc];
                for z in zeta.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *z = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                }
                for (cm, &j) in class.modes.iter().enumerate() {
                    let mut field = Array2::from_elem((t, t), Complex64::new(0.0, 0.0));
                    for w in 0..t * t {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for b in 0..kc {
                            acc += spec.factors[w * kc * kc + cm * kc + b] * zeta[w * kc + b];
                        }
                        field[[w / t, w % t]] = acc;
                    }
                    ifft2(&mut field);
                    let scale = t as f64 * std::f64::consts::SQRT_2;
                    for gy in 0..g {
                        for gx in 0..g {
                            coeffs[[gy, gx, j - 1]] = scale * field[[gy, gx]].re;
                        }
                    }
                }
            }
        }
    }
    AnchorField {
        g,
        k: cov.k,
        coeffs,
        seed,
    }
}

// ---------------------------------------------------------------------
// Cache file ("P2SC")
// ---------------------------------------------------------------------

const COV_MAGIC: &[u8; 4] = b"P2SC";
const COV_VERSION: u16 = 1;

impl SpatialCovariance {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, COV_MAGIC)?;
        w.write_u16::<LittleEndian>(COV_VERSION)?;
        w.write_u32::<LittleEndian>(self.g as u32)?;
        w.write_u32::<LittleEndian>(self.k as u32)?;
        w.write_u64::<LittleEndian>(self.config_hash)?;
        w.write_f64::<LittleEndian>(self.d_over_r0)?;
        w.write_f64::<LittleEndian>(self.step_x_rad)?;
        w.write_f64::<LittleEndian>(self.step_y_rad)?;
        let route_tag = match &self.route {
            FactorRoute::Dense(_) => 0u8,
            FactorRoute::Spectral(_) => 1u8,
        };
        w.write_u8(route_tag)?;
        w.write_u16::<LittleEndian>(self.classes.len() as u16)?;
        for class in &self.classes {
            w.write_u16::<LittleEndian>(class.modes.len() as u16)?;
            for &m in &class.modes {
                w.write_u32::<LittleEndian>(m as u32)?;
            }
        }
        match &self.route {
            FactorRoute::Dense(factors) => {
                for f in factors {
                    w.write_u32::<LittleEndian>(f.nrows() as u32)?;
                    io::write_f64_slice(&mut w, f.as_slice().unwrap())?;
                }
            }
            FactorRoute::Spectral(specs) => {
                for s in specs {
                    w.write_u32::<LittleEndian>(s.torus as u32)?;
                    io::write_f64_slice(&mut w, &s.factors)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SpatialCovariance> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::check_magic(&mut r, COV_MAGIC, path)?;
        io::check_version(&mut r, "covariance cache", COV_VERSION, path)?;
        let g = r.read_u32::<LittleEndian>()? as usize;
        let k = r.read_u32::<LittleEndian>()? as usize;
        let config_hash = r.read_u64::<LittleEndian>()?;
        let d_over_r0 = r.read_f64::<LittleEndian>()?;
        let step_x_rad = r.read_f64::<LittleEndian>()?;
        let step_y_rad = r.read_f64::<LittleEndian>()?;
        let route_tag = r.read_u8()?;
        let n_classes = r.read_u16::<LittleEndian>()? as usize;
        let mut classes = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let kc = r.read_u16::<LittleEndian>()? as usize;
            let mut modes = Vec::with_capacity(kc);
            for _ in 0..kc {
                modes.push(r.read_u32::<LittleEndian>()? as usize);
            }
            classes.push(ModeClass { modes });
        }
        let route = match route_tag {
            0 => {
                let mut factors = Vec::with_capacity(n_classes);
                for _ in 0..n_classes {
                    let dim = r.read_u32::<LittleEndian>()? as usize;
                    let data = io::read_f64_vec(&mut r, dim * dim, path)?;
                    factors.push(Array2::from_shape_vec((dim, dim), data).unwrap());
                }
                FactorRoute::Dense(factors)
            }
            1 => {
                let mut specs = Vec::with_capacity(n_classes);
                for class in &classes {
                    let torus = r.read_u32::<LittleEndian>()? as usize;
                    let kc = class.modes.len();
                    let factors = io::read_f64_vec(&mut r, torus * torus * kc * kc, path)?;
                    specs.push(SpectralClass { torus, factors });
                }
                FactorRoute::Spectral(specs)
            }
            other => {
                return Err(CoreError::format(
                    path.display().to_string(),
                    format!("unknown factor route tag {other}"),
                ))
            }
        };
        Ok(SpatialCovariance {
            g,
            k,
            d_over_r0,
            config_hash,
            step_x_rad,
            step_y_rad,
            classes,
            route,
        })
    }
}
