//! Noll-indexed Zernike polynomials sampled on the aperture grid.
//!
//! Modes carry the Noll normalization (unit variance over the unit disk):
//! `Z_j = sqrt(n+1) R_n^m(rho) * sqrt(2) cos(m theta)` for m != 0, with the
//! sine form on odd j, and `Z_j = sqrt(n+1) R_n^0(rho)` on axisymmetric
//! modes. Index 1 is piston, 2/3 are the horizontal and vertical tilts.

use crate::aperture::ApertureGrid;
use crate::error::{CoreError, Result};
use ndarray::Array2;

/// Largest supported radial order; factorial-based radial coefficients
/// stay accurate well past this point.
pub const MAX_RADIAL_ORDER: u32 = 40;

/// Radial and (signed) azimuthal order of Noll mode `j >= 1`.
///
/// The sign of `m` encodes the angular factor: positive for cosine (even
/// j), negative for sine (odd j), zero for axisymmetric modes.
pub fn noll_index(j: usize) -> (u32, i32) {
    assert!(j >= 1, "Noll indices start at 1");
    let mut n = 0u32;
    let mut rem = j;
    while rem > (n + 1) as usize {
        rem -= (n + 1) as usize;
        n += 1;
    }
    let k = rem - 1; // 0-based position inside the radial-order block
    let m_abs = if n % 2 == 0 {
        2 * ((k as u32 + 1) / 2)
    } else {
        2 * (k as u32 / 2) + 1
    };
    if m_abs == 0 {
        (n, 0)
    } else if j % 2 == 0 {
        (n, m_abs as i32)
    } else {
        (n, -(m_abs as i32))
    }
}

/// Inverse of [`noll_index`]: recovers j from the (n, m) pair.
pub fn noll_j(n: u32, m: i32) -> usize {
    let base: usize = (0..n).map(|r| (r + 1) as usize).sum();
    for k in 0..=(n as usize) {
        let j = base + k + 1;
        if noll_index(j) == (n, m) {
            return j;
        }
    }
    unreachable!("(n={n}, m={m}) is not a valid Zernike order pair");
}

fn factorial(k: u32) -> f64 {
    (2..=k as u64).map(|v| v as f64).product()
}

/// Radial polynomial R_n^m at radius `rho` (m taken as |m|).
fn radial(n: u32, m: u32, rho: f64) -> f64 {
    debug_assert!(m <= n && (n - m) % 2 == 0);
    let mut acc = 0.0;
    for k in 0..=((n - m) / 2) {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let num = factorial(n - k);
        let den = factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k);
        acc += sign * num / den * rho.powi((n - 2 * k) as i32);
    }
    acc
}

/// Noll-normalized Zernike polynomial value at a Cartesian point of the
/// unit disk. Points outside the disk evaluate to 0.
pub fn zernike_at(j: usize, x: f64, y: f64) -> f64 {
    let r2 = x * x + y * y;
    if r2 > 1.0 {
        return 0.0;
    }
    let (n, m) = noll_index(j);
    let m_abs = m.unsigned_abs();
    let rho = r2.sqrt();
    let norm = if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    };
    let angular = if m == 0 {
        1.0
    } else {
        let theta = y.atan2(x);
        if m > 0 {
            (m_abs as f64 * theta).cos()
        } else {
            (m_abs as f64 * theta).sin()
        }
    };
    norm * radial(n, m_abs, rho) * angular
}

/// Samples mode `j` over the aperture grid; zero outside the mask.
pub fn zernike_eval(j: usize, grid: &ApertureGrid) -> Result<Array2<f64>> {
    let (n, _) = noll_index(j);
    if n > MAX_RADIAL_ORDER {
        return Err(CoreError::UnsupportedMode {
            j,
            n,
            max: MAX_RADIAL_ORDER,
        });
    }
    let p = grid.resolution();
    let mut out = Array2::zeros((p, p));
    for r in 0..p {
        for c in 0..p {
            if grid.inside(r, c) {
                let (x, y) = grid.xy(r, c);
                out[[r, c]] = zernike_at(j, x, y);
            }
        }
    }
    Ok(out)
}

/// The first K Noll modes sampled on one aperture grid.
///
/// Raw point samples of the high-order modes pick up O(1e-2) mutual
/// correlations from rim quadrature error at P = 128, so the set is
/// re-orthonormalized over the mask with modified Gram-Schmidt. Piston
/// stays exactly 1 and the corrections to every mode are at the percent
/// level or below.
#[derive(Debug, Clone)]
pub struct ZernikeBasisSet {
    count: usize,
    modes: Vec<Array2<f64>>,
    orders: Vec<(u32, i32)>,
}

impl ZernikeBasisSet {
    pub fn new(count: usize, grid: &ApertureGrid) -> Result<Self> {
        let mut modes = Vec::with_capacity(count);
        let mut orders = Vec::with_capacity(count);
        for j in 1..=count {
            modes.push(zernike_eval(j, grid)?);
            orders.push(noll_index(j));
        }
        let norm = grid.mask_count() as f64;
        let dot = |a: &Array2<f64>, b: &Array2<f64>| {
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / norm
        };
        for j in 0..count {
            for i in 0..j {
                let r = dot(&modes[j], &modes[i]);
                let prev = modes[i].clone();
                modes[j].scaled_add(-r, &prev);
            }
            let scale = 1.0 / dot(&modes[j], &modes[j]).sqrt();
            modes[j].mapv_inplace(|v| v * scale);
        }
        Ok(ZernikeBasisSet {
            count,
            modes,
            orders,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Sampled mode for Noll index `j` (1-based).
    pub fn mode(&self, j: usize) -> &Array2<f64> {
        &self.modes[j - 1]
    }

    pub fn orders(&self, j: usize) -> (u32, i32) {
        self.orders[j - 1]
    }

    /// Discrete Gram matrix over the mask, for orthonormality checks.
    pub fn gram(&self, grid: &ApertureGrid) -> Array2<f64> {
        let k = self.count;
        let norm = grid.mask_count() as f64;
        let mut g = Array2::zeros((k, k));
        for a in 0..k {
            for b in a..k {
                let dot: f64 = self.modes[a]
                    .iter()
                    .zip(self.modes[b].iter())
                    .map(|(x, y)| x * y)
                    .sum();
                g[[a, b]] = dot / norm;
                g[[b, a]] = g[[a, b]];
            }
        }
        g
    }
}

/// Synthesizes the phase field `phi = sum_j alpha_j Z_j`; zero outside the
/// mask. `alpha` is indexed from piston (j = 1) upward.
pub fn phase_from_coeffs(alpha: &[f64], basis: &ZernikeBasisSet) -> Result<Array2<f64>> {
    if alpha.len() != basis.count() {
        return Err(CoreError::Dimension {
            context: "phase_from_coeffs",
            expected: basis.count(),
            got: alpha.len(),
        });
    }
    let p = basis.mode(1).nrows();
    let mut phase = Array2::zeros((p, p));
    for (j0, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        phase.scaled_add(a, basis.mode(j0 + 1));
    }
    Ok(phase)
}
