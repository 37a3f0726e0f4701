//! Generation of the PSF training corpus.
//!
//! Each entry draws a turbulence strength uniformly from the configured
//! D/r0 range, a coefficient vector from the modal covariance at that
//! strength, zeroes piston and both tilts, synthesizes the PSF, and
//! centers it. Entries are keyed by counter-based streams, so the corpus
//! is byte-reproducible from its seed no matter how it is parallelized.

use crate::aperture::ApertureGrid;
use crate::config::OpticalConfig;
use crate::covariance::noll_covariance;
use crate::error::{CoreError, Result};
use crate::io;
use crate::psf::{center_psf, psf_from_phase};
use crate::rng::substream;
use crate::zernike::{phase_from_coeffs, ZernikeBasisSet};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Corpus of centered, tilt-free PSFs with their high-order coefficients
/// (alpha_4 .. alpha_K; piston and tilts excluded).
#[derive(Debug, Clone)]
pub struct PsfDataset {
    pub k: usize,
    pub s: usize,
    pub d_over_r0_range: (f64, f64),
    pub seed: u64,
    pub config_hash: u64,
    /// count x (K-3) high-order coefficients, radians.
    pub alphas_high: Array2<f32>,
    /// count x S x S centered unit-sum PSFs.
    pub psfs: Array3<f32>,
}

impl PsfDataset {
    pub fn count(&self) -> usize {
        self.alphas_high.nrows()
    }

    pub fn k_in(&self) -> usize {
        self.k - 3
    }

    /// PSF of entry `i` as f64.
    pub fn psf_f64(&self, i: usize) -> Array2<f64> {
        let s = self.s;
        Array2::from_shape_fn((s, s), |(r, c)| self.psfs[[i, r, c]] as f64)
    }

    /// High-order coefficient row of entry `i` as f64.
    pub fn alpha_f64(&self, i: usize) -> Vec<f64> {
        self.alphas_high.row(i).iter().map(|&v| v as f64).collect()
    }
}

pub fn generate_dataset(
    config: &OpticalConfig,
    count: usize,
    d_over_r0_range: (f64, f64),
    seed: u64,
) -> Result<PsfDataset> {
    config.validate()?;
    if count == 0 {
        return Err(CoreError::Config("dataset needs at least one entry".into()));
    }
    let (lo, hi) = d_over_r0_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
        return Err(CoreError::Config(format!(
            "bad D/r0 range [{lo}, {hi}]"
        )));
    }
    let k = config.zernike_count;
    let s = config.psf_size_px;
    let grid = ApertureGrid::new(config.phase_grid_px);
    let basis = ZernikeBasisSet::new(k, &grid)?;
    // Unit factor at D/r0 = 1; entries scale by d^(5/6).
    let unit_factor = noll_covariance(k, 1.0)?.sqrt_factor();
    // Synthesis window with margin so centering does not clip tails that
    // then re-enter the final crop.
    let s_work = (s + 8).min(config.phase_grid_px * config.pad_factor - 1) | 1;
    let pixel_scale = config.psf_pixel_scale_m();

    let entries: Vec<(Vec<f32>, Array2<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let d: f64 = rng.gen_range(lo..=hi);
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let scale = d.powf(5.0 / 6.0);
            let mut alpha = vec![0.0f64; k];
            for row in 0..k {
                let mut acc = 0.0;
                for col in 0..k {
                    acc += unit_factor[[row, col]] * z[col];
                }
                alpha[row] = acc * scale;
            }
            alpha[0] = 0.0;
            alpha[1] = 0.0;
            alpha[2] = 0.0;
            let phase = phase_from_coeffs(&alpha, &basis)?;
            let psf = psf_from_phase(&phase, &grid, s_work, config.pad_factor, pixel_scale)?;
            let (centered, _) = center_psf(&psf);
            // Final crop to S x S; the crop moves the windowed centroid a
            // little, so center once more on the final window.
            let off = (s_work - s) / 2;
            let mut values = Array2::zeros((s, s));
            for r in 0..s {
                for c in 0..s {
                    values[[r, c]] = centered.values()[[off + r, off + c]];
                }
            }
            let total: f64 = values.iter().sum();
            values.mapv_inplace(|v| v / total);
            let (fine, _) = center_psf(&crate::psf::Psf::from_values(values, pixel_scale));
            let alpha_high: Vec<f32> = alpha[3..].iter().map(|&v| v as f32).collect();
            Ok((alpha_high, fine.values().clone()))
        })
        .collect::<Result<_>>()?;

    let mut alphas_high = Array2::zeros((count, k - 3));
    let mut psfs = Array3::zeros((count, s, s));
    for (i, (a, p)) in entries.into_iter().enumerate() {
        for (j, v) in a.into_iter().enumerate() {
            alphas_high[[i, j]] = v;
        }
        for r in 0..s {
            for c in 0..s {
                psfs[[i, r, c]] = p[[r, c]] as f32;
            }
        }
    }
    Ok(PsfDataset {
        k,
        s,
        d_over_r0_range,
        seed,
        config_hash: config.asset_hash(),
        alphas_high,
        psfs,
    })
}

const DS_MAGIC: &[u8; 4] = b"P2SD";
const DS_VERSION: u16 = 1;

impl PsfDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        io::write_magic(&mut w, DS_MAGIC)?;
        w.write_u16::<LittleEndian>(DS_VERSION)?;
        w.write_u32::<LittleEndian>(self.count() as u32)?;
        w.write_u16::<LittleEndian>(self.k as u16)?;
        w.write_u16::<LittleEndian>(self.s as u16)?;
        w.write_f64::<LittleEndian>(self.d_over_r0_range.0)?;
        w.write_f64::<LittleEndian>(self.d_over_r0_range.1)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.config_hash)?;
        for i in 0..self.count() {
            io::write_f32_slice(&mut w, self.alphas_high.row(i).to_slice().unwrap())?;
            let psf = self.psfs.index_axis(ndarray::Axis(0), i);
            io::write_f32_slice(&mut w, psf.to_slice().unwrap())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PsfDataset> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::check_magic(&mut r, DS_MAGIC, path)?;
        io::check_version(&mut r, "dataset", DS_VERSION, path)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let k = r.read_u16::<LittleEndian>()? as usize;
        let s = r.read_u16::<LittleEndian>()? as usize;
        let lo = r.read_f64::<LittleEndian>()?;
        let hi = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let config_hash = r.read_u64::<LittleEndian>()?;
        let mut alphas_high = Array2::zeros((count, k - 3));
        let mut psfs = Array3::zeros((count, s, s));
        for i in 0..count {
            let a = io::read_f32_vec(&mut r, k - 3, path)?;
            for (j, v) in a.into_iter().enumerate() {
                alphas_high[[i, j]] = v;
            }
            let p = io::read_f32_vec(&mut r, s * s, path)?;
            for (idx, v) in p.into_iter().enumerate() {
                psfs[[i, idx / s, idx % s]] = v;
            }
        }
        Ok(PsfDataset {
            k,
            s,
            d_over_r0_range: (lo, hi),
            seed,
            config_hash,
            alphas_high,
            psfs,
        })
    }
}
