//! Learned spatial basis of PSFs: principal component analysis of the
//! corpus, projection, and reconstruction.

use crate::dataset::PsfDataset;
use crate::error::{CoreError, Result};
use crate::io;
use crate::linalg::symmetric_eigen;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// M spatial basis functions (eigen-PSFs) with the corpus mean.
///
/// Components are orthonormal under the flat inner product and stored in
/// f32 (the serialized precision) so an in-memory basis is bit-identical
/// to one loaded back from disk.
#[derive(Debug, Clone)]
pub struct PsfBasis {
    pub s: usize,
    pub mean: Array2<f32>,
    /// m x S^2 rows, nonincreasing eigenvalue order.
    pub components: Array2<f32>,
    pub eigenvalues: Vec<f32>,
    pub explained_variance_ratio: f32,
    pub config_hash: u64,
}

impl PsfBasis {
    pub fn m(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean_f64(&self) -> Array2<f64> {
        self.mean.mapv(|v| v as f64)
    }

    /// Component `m` reshaped to S x S, as f64.
    pub fn component_f64(&self, m: usize) -> Array2<f64> {
        let s = self.s;
        Array2::from_shape_fn((s, s), |(r, c)| self.components[[m, r * s + c]] as f64)
    }

    /// Content hash over all stored values, for provenance and asset
    /// compatibility checks.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity((self.mean.len() + self.components.len()) * 4 + 16);
        bytes.extend_from_slice(&(self.s as u64).to_le_bytes());
        bytes.extend_from_slice(&self.config_hash.to_le_bytes());
        for v in self
            .mean
            .iter()
            .chain(self.eigenvalues.iter())
            .chain(self.components.iter())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        io::content_hash_bytes(&bytes)
    }

    /// Flat-orthonormality Gram matrix of the components.
    pub fn gram(&self) -> Array2<f64> {
        let m = self.m();
        let mut g = Array2::zeros((m, m));
        for a in 0..m {
            for b in a..m {
                let dot: f64 = self
                    .components
                    .row(a)
                    .iter()
                    .zip(self.components.row(b).iter())
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum();
                g[[a, b]] = dot;
                g[[b, a]] = dot;
            }
        }
        g
    }
}

/// Principal component analysis over the vectorized corpus PSFs.
pub fn fit_pca(ds: &PsfDataset, m: usize) -> Result<PsfBasis> {
    let n = ds.count();
    let d = ds.s * ds.s;
    if m == 0 || m > n.min(d) {
        return Err(CoreError::Dimension {
            context: "fit_pca basis count",
            expected: n.min(d),
            got: m,
        });
    }
    // Centered data matrix in f64.
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        let psf = ds.psfs.index_axis(ndarray::Axis(0), i);
        let flat = psf.to_slice().unwrap();
        for (acc, &v) in mean.iter_mut().zip(flat) {
            *acc += v as f64;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut a = Array2::zeros((n, d));
    for i in 0..n {
        let psf = ds.psfs.index_axis(ndarray::Axis(0), i);
        let flat = psf.to_slice().unwrap();
        for j in 0..d {
            a[[i, j]] = flat[j] as f64 - mean[j];
        }
    }
    // d x d covariance and its spectrum.
    let cov = a.t().dot(&a) / n as f64;
    let (eigenvalues, vectors) = symmetric_eigen(&cov);
    let trace: f64 = eigenvalues.iter().sum();
    let kept: f64 = eigenvalues[..m].iter().sum();

    let s = ds.s;
    let mut components = Array2::zeros((m, d));
    for c in 0..m {
        // Deterministic sign: largest-magnitude entry positive.
        let mut best = 0usize;
        for r in 1..d {
            if vectors[[r, c]].abs() > vectors[[best, c]].abs() {
                best = r;
            }
        }
        let sign = if vectors[[best, c]] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            components[[c, r]] = (sign * vectors[[r, c]]) as f32;
        }
    }
    Ok(PsfBasis {
        s,
        mean: Array2::from_shape_fn((s, s), |(r, c)| mean[r * s + c] as f32),
        components,
        eigenvalues: eigenvalues[..m].iter().map(|&v| v.max(0.0) as f32).collect(),
        explained_variance_ratio: if trace > 0.0 { (kept / trace) as f32 } else { 1.0 },
        config_hash: ds.config_hash,
    })
}

/// Projects a centered PSF onto the basis: beta_m = <h - mean, phi_m>.
pub fn project_psf(h: &Array2<f64>, basis: &PsfBasis) -> Result<Vec<f64>> {
    let d = basis.s * basis.s;
    if h.len() != d {
        return Err(CoreError::Dimension {
            context: "project_psf",
            expected: d,
            got: h.len(),
        });
    }
    let flat: Vec<f64> = h
        .iter()
        .zip(basis.mean.iter())
        .map(|(&v, &mu)| v - mu as f64)
        .collect();
    Ok((0..basis.m())
        .map(|m| {
            basis
                .components
                .row(m)
                .iter()
                .zip(&flat)
                .map(|(&phi, &x)| phi as f64 * x)
                .sum()
        })
        .collect())
}

/// Reconstruction mean + sum beta_m phi_m. Values may be slightly
/// negative; the linear stages keep them, only final frames clamp.
pub fn reconstruct_psf(beta: &[f64], basis: &PsfBasis) -> Array2<f64> {
    let s = basis.s;
    let mut out = basis.mean_f64();
    let flat = out.as_slice_mut().unwrap();
    for (m, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        for (o, &phi) in flat.iter_mut().zip(basis.components.row(m).iter()) {
            *o += b * phi as f64;
        }
    }
    let _ = s;
    out
}

const BASIS_MAGIC: &[u8; 4] = b"P2SB";
const BASIS_VERSION: u16 = 1;

impl PsfBasis {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, BASIS_MAGIC)?;
        w.write_u16::<LittleEndian>(BASIS_VERSION)?;
        w.write_u32::<LittleEndian>(self.m() as u32)?;
        w.write_u16::<LittleEndian>(self.s as u16)?;
        w.write_u64::<LittleEndian>(self.config_hash)?;
        w.write_f32::<LittleEndian>(self.explained_variance_ratio)?;
        io::write_f32_slice(&mut w, self.mean.as_slice().unwrap())?;
        io::write_f32_slice(&mut w, &self.eigenvalues)?;
        io::write_f32_slice(&mut w, self.components.as_slice().unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PsfBasis> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::check_magic(&mut r, BASIS_MAGIC, path)?;
        io::check_version(&mut r, "basis", BASIS_VERSION, path)?;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let s = r.read_u16::<LittleEndian>()? as usize;
        let config_hash = r.read_u64::<LittleEndian>()?;
        let evr = r.read_f32::<LittleEndian>()?;
        let mean = io::read_f32_vec(&mut r, s * s, path)?;
        let eigenvalues = io::read_f32_vec(&mut r, m, path)?;
        let comps = io::read_f32_vec(&mut r, m * s * s, path)?;
        Ok(PsfBasis {
            s,
            mean: Array2::from_shape_vec((s, s), mean).unwrap(),
            components: Array2::from_shape_vec((m, s * s), comps).unwrap(),
            eigenvalues,
            explained_variance_ratio: evr,
            config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OpticalConfig;
    use crate::dataset::generate_dataset;

    fn corpus() -> PsfDataset {
        let mut c = OpticalConfig::default();
        c.phase_grid_px = 32;
        c.psf_size_px = 17;
        c.zernike_count = 10;
        generate_dataset(&c, 160, (0.5, 4.0), 21).unwrap()
    }

    #[test]
    fn identical_psfs_give_zero_spectrum() {
        let base = corpus();
        let one = base.psfs.index_axis(ndarray::Axis(0), 0).to_owned();
        let mut psfs = ndarray::Array3::zeros((20, base.s, base.s));
        for i in 0..20 {
            for r in 0..base.s {
                for c in 0..base.s {
                    psfs[[i, r, c]] = one[[r, c]];
                }
            }
        }
        let ds = PsfDataset {
            k: base.k,
            s: base.s,
            d_over_r0_range: (1.0, 1.0),
            seed: 0,
            config_hash: base.config_hash,
            alphas_high: ndarray::Array2::zeros((20, base.k - 3)),
            psfs,
        };
        let basis = fit_pca(&ds, 3).unwrap();
        for (m, &ev) in basis.eigenvalues.iter().enumerate() {
            assert!(ev.abs() < 1e-12, "eigenvalue {m} = {ev}");
        }
        for (a, b) in basis.mean.iter().zip(one.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let ds = corpus();
        let basis = fit_pca(&ds, 24).unwrap();
        let g = basis.gram();
        for a in 0..24 {
            for b in 0..24 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (g[[a, b]] - want).abs() < 1e-6,
                    "Gram[{a},{b}] = {}",
                    g[[a, b]]
                );
            }
        }
        assert!(basis
            .eigenvalues
            .windows(2)
            .all(|w| w[0] >= w[1]));
        assert!(basis.explained_variance_ratio > 0.5);
    }

    #[test]
    fn projection_of_mean_is_zero_and_of_component_is_unit() {
        let ds = corpus();
        let basis = fit_pca(&ds, 8).unwrap();
        let beta = project_psf(&basis.mean_f64(), &basis).unwrap();
        assert!(beta.iter().all(|b| b.abs() < 1e-6));
        let probe = &basis.mean_f64() + &basis.component_f64(0);
        let beta = project_psf(&probe, &basis).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-6);
        assert!(beta[1..].iter().all(|b| b.abs() < 1e-5));
    }

    #[test]
    fn corpus_residual_equals_trailing_eigenvalue_sum() {
        let ds = corpus();
        let m = 12;
        let basis = fit_pca(&ds, m).unwrap();
        // Mean squared reconstruction residual over the corpus equals the
        // trailing eigenvalue sum exactly (PCA identity); recover the full
        // spectrum for the tail.
        let full = fit_pca(&ds, ds.count().min(ds.s * ds.s)).unwrap();
        let tail: f64 = full.eigenvalues[m..].iter().map(|&v| v as f64).sum();
        let mut mse = 0.0;
        for i in 0..ds.count() {
            let h = ds.psf_f64(i);
            let beta = project_psf(&h, &basis).unwrap();
            let recon = reconstruct_psf(&beta, &basis);
            mse += h
                .iter()
                .zip(recon.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        mse /= ds.count() as f64;
        assert!(
            (mse - tail).abs() < 1e-6 * tail.max(1e-12),
            "residual {mse} vs eigenvalue tail {tail}"
        );
    }

    #[test]
    fn reconstruction_is_a_contraction() {
        let ds = corpus();
        let basis = fit_pca(&ds, 10).unwrap();
        for i in 0..ds.count().min(32) {
            let h = ds.psf_f64(i);
            let beta = project_psf(&h, &basis).unwrap();
            let recon = reconstruct_psf(&beta, &basis);
            let err: f64 = h
                .iter()
                .zip(recon.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let dist: f64 = h
                .iter()
                .zip(basis.mean.iter())
                .map(|(&a, &mu)| (a - mu as f64) * (a - mu as f64))
                .sum();
            assert!(err <= dist + 1e-12);
        }
    }

    #[test]
    fn more_components_never_hurt_heldout_error() {
        let ds = corpus();
        let train = PsfDataset {
            k: ds.k,
            s: ds.s,
            d_over_r0_range: ds.d_over_r0_range,
            seed: ds.seed,
            config_hash: ds.config_hash,
            alphas_high: ds.alphas_high.slice(ndarray::s![..120, ..]).to_owned(),
            psfs: ds.psfs.slice(ndarray::s![..120, .., ..]).to_owned(),
        };
        let mut prev = f64::INFINITY;
        for m in [4, 12, 36] {
            let basis = fit_pca(&train, m).unwrap();
            let mut err = 0.0;
            for i in 120..ds.count() {
                let h = ds.psf_f64(i);
                let beta = project_psf(&h, &basis).unwrap();
                let recon = reconstruct_psf(&beta, &basis);
                err += h
                    .iter()
                    .zip(recon.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            assert!(err <= prev + 1e-9, "held-out error rose at M={m}");
            prev = err;
        }
    }

    #[test]
    fn oversized_basis_request_is_rejected() {
        let ds = corpus();
        assert!(matches!(
            fit_pca(&ds, ds.count() + 1),
            Err(CoreError::Dimension { .. })
        ));
    }

    #[test]
    fn basis_file_round_trips_bitwise() {
        let ds = corpus();
        let basis = fit_pca(&ds, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.p2sb");
        let p2 = dir.path().join("b.p2sb");
        basis.save(&p1).unwrap();
        let loaded = PsfBasis::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.components, basis.components);
        // Corrupt magic.
        let mut bytes = std::fs::read(&p1).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p2, &bytes).unwrap();
        assert!(PsfBasis::load(&p2).is_err());
    }
}
