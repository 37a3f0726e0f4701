//! Modal covariance of Zernike coefficients under Kolmogorov statistics.
//!
//! The closed form is the classical Gamma-function expression: two modes
//! couple only when they share the azimuthal order and trig parity, and
//! every entry carries the (D/r0)^(5/3) power law. Piston does not affect
//! image intensity, so its row and column are zeroed here and it is never
//! sampled.

use crate::error::{CoreError, Result};
use crate::linalg::psd_sqrt_factor;
use crate::specfun::gamma_signed;
use crate::zernike::noll_index;
use ndarray::Array2;

/// K x K covariance of the Zernike coefficient vector, in rad^2.
#[derive(Debug, Clone)]
pub struct ModalCovariance {
    matrix: Array2<f64>,
    d_over_r0_ref: f64,
}

/// Prefactor of the covariance expression: collects the Kolmogorov
/// spectral constant, the aperture scaling, and the Weber-Schafheitlin
/// closed form of the frequency integral. Multiplying by the Gamma ratio
/// and sqrt((n_i+1)(n_j+1)) yields E[a_i a_j] at D/r0 = 1.
pub(crate) fn covariance_prefactor() -> f64 {
    use std::f64::consts::PI;
    // 2-D Kolmogorov phase PSD constant: Phi = c_psd r0^(-5/3) f^(-11/3).
    let c_psd = (24.0 / 5.0 * gamma_signed(6.0 / 5.0)).powf(5.0 / 6.0)
        * gamma_signed(11.0 / 6.0).powi(2)
        / (2.0 * PI.powf(11.0 / 3.0));
    // 4 c (2 pi)^(8/3) R^(5/3), with R = D/2 folded into 2^(-5/3), and the
    // Gamma(14/3) / 2^(14/3) factor from the Bessel-product integral.
    4.0 * c_psd * (2.0 * PI).powf(8.0 / 3.0) / 2f64.powf(19.0 / 3.0) * gamma_signed(14.0 / 3.0)
}

/// Gamma-ratio part of the covariance for radial orders (n_i, n_j),
/// including the alternating sign. Shared by the zero-separation modal
/// covariance and the finite-separation angular correlations.
pub(crate) fn gamma_ratio(n_i: u32, n_j: u32, m_abs: u32) -> f64 {
    let ni = n_i as f64;
    let nj = n_j as f64;
    let sign = if ((n_i + n_j - 2 * m_abs) / 2) % 2 == 0 {
        1.0
    } else {
        -1.0
    };
    sign * gamma_signed((ni + nj - 5.0 / 3.0) / 2.0)
        / (gamma_signed((ni - nj + 17.0 / 3.0) / 2.0)
            * gamma_signed((nj - ni + 17.0 / 3.0) / 2.0)
            * gamma_signed((ni + nj + 23.0 / 3.0) / 2.0))
}

/// Covariance entry E[a_i a_j] at D/r0 = 1 for 1-based Noll indices.
/// Zero across azimuthal orders, trig parities, or for piston.
pub(crate) fn unit_covariance_entry(i: usize, j: usize) -> f64 {
    if i == 1 || j == 1 {
        return 0.0;
    }
    let (n_i, m_i) = noll_index(i);
    let (n_j, m_j) = noll_index(j);
    if m_i != m_j {
        return 0.0;
    }
    covariance_prefactor()
        * (((n_i + 1) * (n_j + 1)) as f64).sqrt()
        * gamma_ratio(n_i, n_j, m_i.unsigned_abs())
}

/// Builds the K x K Noll covariance scaled to the given D/r0.
pub fn noll_covariance(k: usize, d_over_r0: f64) -> Result<ModalCovariance> {
    if k < 4 {
        return Err(CoreError::Config(format!(
            "zernike_count must be at least 4, got {k}"
        )));
    }
    if !(d_over_r0.is_finite() && d_over_r0 > 0.0) {
        return Err(CoreError::Config(format!(
            "D/r0 must be finite and positive, got {d_over_r0}"
        )));
    }
    let scale = d_over_r0.powf(5.0 / 3.0);
    let mut matrix = Array2::zeros((k, k));
    for i in 1..=k {
        for j in i..=k {
            let v = unit_covariance_entry(i, j);
            if !v.is_finite() {
                return Err(CoreError::NumericalDomain {
                    context: "noll_covariance",
                    i,
                    j,
                });
            }
            matrix[[i - 1, j - 1]] = v * scale;
            matrix[[j - 1, i - 1]] = v * scale;
        }
    }
    Ok(ModalCovariance {
        matrix,
        d_over_r0_ref: d_over_r0,
    })
}

impl ModalCovariance {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Entry by 1-based Noll indices.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[[i - 1, j - 1]]
    }

    pub fn d_over_r0_ref(&self) -> f64 {
        self.d_over_r0_ref
    }

    /// Variance of one tilt coefficient (modes 2 and 3 share it).
    pub fn tilt_variance(&self) -> f64 {
        self.entry(2, 2)
    }

    /// Square-root factor for sampling; piston stays identically zero.
    pub fn sqrt_factor(&self) -> Array2<f64> {
        psd_sqrt_factor(&self.matrix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::bessel_jn;

    /// Independent numerical evaluation of the published expression: the
    /// covariance integral Int_0^inf J_{n_i+1}(t) J_{n_j+1}(t) t^(-14/3) dt
    /// by quadrature (substituting t = u^3 to absorb the origin
    /// singularity), with the same physical prefactor.
    fn covariance_entry_quadrature(i: usize, j: usize) -> f64 {
        let (n_i, m_i) = noll_index(i);
        let (n_j, m_j) = noll_index(j);
        assert_eq!(m_i, m_j);
        let mu = n_i + 1;
        let nu = n_j + 1;
        let f = |u: f64| {
            let t = u * u * u;
            if t == 0.0 {
                if mu + nu == 4 {
                    3.0 / (2f64.powi(4) * 2.0 * 2.0) // limit of 3 u^2 t^(mu+nu-14/3) terms
                } else {
                    0.0
                }
            } else {
                3.0 * u * u * bessel_jn(mu, t) * bessel_jn(nu, t) * t.powf(-14.0 / 3.0)
            }
        };
        // Simpson over u in [0, 60^(1/3)]; the tail above t = 60 is ~1e-9
        // relative.
        let upper = 60f64.powf(1.0 / 3.0);
        let n = 40_000;
        let h = upper / n as f64;
        let mut acc = f(0.0) + f(upper);
        for s in 1..n {
            acc += if s % 2 == 1 { 4.0 } else { 2.0 } * f(s as f64 * h);
        }
        let integral = acc * h / 3.0;
        use std::f64::consts::PI;
        let c_psd = (24.0 / 5.0 * gamma_signed(6.0 / 5.0)).powf(5.0 / 6.0)
            * gamma_signed(11.0 / 6.0).powi(2)
            / (2.0 * PI.powf(11.0 / 3.0));
        let sign = if ((n_i + n_j - 2 * m_i.unsigned_abs()) / 2) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        4.0 * c_psd * (2.0 * PI).powf(8.0 / 3.0) / 2f64.powf(5.0 / 3.0)
            * ((mu * nu) as f64).sqrt()
            * sign
            * integral
    }

    #[test]
    fn tilt_entry_matches_independent_quadrature() {
        let cov = noll_covariance(12, 1.0).unwrap();
        let oracle = covariance_entry_quadrature(2, 2);
        let got = cov.entry(2, 2);
        assert!(
            (got - oracle).abs() < 1e-6 * oracle.abs(),
            "tilt variance {got} vs quadrature {oracle}"
        );
        // Cross-order coupling, defocus-spherical (both m = 0). The
        // quadrature oracle carries ~1e-9 absolute error from the Bessel
        // evaluation, which dominates for this small entry.
        let oracle_411 = covariance_entry_quadrature(4, 11);
        let got_411 = cov.entry(4, 11);
        assert!(
            (got_411 - oracle_411).abs() < 5e-6 * oracle_411.abs(),
            "(4,11) {got_411} vs quadrature {oracle_411}"
        );
        assert!(got_411 < 0.0, "defocus-spherical coupling is negative");
    }

    #[test]
    fn consistent_with_published_residual_sequence() {
        // Published piston-removed residuals Delta_j (in (D/r0)^(5/3)
        // units): Delta_1 = 1.0299, Delta_3 = 0.134, Delta_4 = 0.111.
        // Delta_1 - Delta_3 equals the two-axis tilt variance; the table is
        // printed to 3-4 digits, hence the loose tolerances.
        let cov = noll_covariance(12, 1.0).unwrap();
        let two_axis = 2.0 * cov.tilt_variance();
        assert!(
            (two_axis - (1.0299 - 0.134)).abs() < 0.005 * two_axis,
            "two-axis tilt variance {two_axis} vs table 0.8959"
        );
        let defocus = cov.entry(4, 4);
        assert!(
            (defocus - (0.134 - 0.111)).abs() < 0.05 * defocus,
            "defocus variance {defocus} vs table 0.023"
        );
    }

    #[test]
    fn parity_blocks_are_exactly_zero() {
        let cov = noll_covariance(36, 2.0).unwrap();
        assert_eq!(cov.entry(2, 3), 0.0); // cos vs sin tilt
        assert_eq!(cov.entry(2, 4), 0.0); // m=1 vs m=0
        assert_eq!(cov.entry(5, 6), 0.0); // sin vs cos astigmatism
        for j in 1..=36 {
            assert_eq!(cov.entry(1, j), 0.0, "piston row must be zero");
        }
    }

    #[test]
    fn power_law_scaling_is_exact() {
        let base = noll_covariance(21, 1.0).unwrap();
        for d in [0.5, 2.0, 7.3] {
            let scaled = noll_covariance(21, d).unwrap();
            let factor = d.powf(5.0 / 3.0);
            for i in 1..=21 {
                for j in 1..=21 {
                    assert_eq!(scaled.entry(i, j), base.entry(i, j) * factor);
                }
            }
        }
    }

    #[test]
    fn matrix_is_symmetric_and_psd() {
        let cov = noll_covariance(36, 3.0).unwrap();
        let m = cov.matrix();
        for i in 0..36 {
            for j in 0..36 {
                assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
        let (vals, _) = crate::linalg::symmetric_eigen(m);
        let trace: f64 = (0..36).map(|i| m[[i, i]]).sum();
        for v in vals {
            assert!(v >= -1e-10 * trace, "eigenvalue {v} below PSD tolerance");
        }
    }

    #[test]
    fn sqrt_factor_reproduces_matrix() {
        let cov = noll_covariance(15, 2.0).unwrap();
        let f = cov.sqrt_factor();
        let prod = f.dot(&f.t());
        let scale = cov.tilt_variance();
        for i in 0..15 {
            for j in 0..15 {
                assert!((prod[[i, j]] - cov.matrix()[[i, j]]).abs() < 1e-12 * scale);
            }
        }
    }
}
