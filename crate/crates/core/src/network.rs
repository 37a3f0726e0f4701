//! The phase-to-space network: a three-layer fully connected map from
//! high-order Zernike coefficients to PSF basis coefficients.
//!
//! Inference runs in f32 with a fixed-order row kernel, so a batch row is
//! bitwise identical to a scalar call no matter how rows are scheduled.
//! Training runs in f64 with exact backpropagation and quantizes to the
//! serialized f32 weights at the end; determinism follows from
//! counter-based shuffling and single-threaded updates.

use crate::basis::{project_psf, PsfBasis};
use crate::covariance::noll_covariance;
use crate::dataset::PsfDataset;
use crate::error::{CoreError, Result};
use crate::io;
use crate::rng::substream;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Hidden-layer nonlinearity. The default is the inverse-square-root
/// unit x/sqrt(1+x^2): smooth, saturating, and cheap enough for
/// per-pixel inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Isru = 0,
    Tanh = 1,
}

impl Activation {
    fn from_id(id: u8) -> Option<Activation> {
        match id {
            0 => Some(Activation::Isru),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn eval_f32(self, x: f32) -> f32 {
        match self {
            Activation::Isru => x / (1.0 + x * x).sqrt(),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn eval_f64(self, x: f64) -> f64 {
        match self {
            Activation::Isru => x / (1.0 + x * x).sqrt(),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn deriv_f64(self, x: f64) -> f64 {
        match self {
            Activation::Isru => {
                let d = 1.0 + x * x;
                1.0 / (d * d.sqrt())
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Serialized phase-to-space network: three affine layers, the hidden
/// activation id, and the per-coordinate input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub activation: Activation,
    /// Multiplier applied to each input coordinate before layer 1.
    pub input_scale: Vec<f32>,
    pub w1: Array2<f32>,
    pub b1: Vec<f32>,
    pub w2: Array2<f32>,
    pub b2: Vec<f32>,
    pub w3: Array2<f32>,
    pub b3: Vec<f32>,
    pub config_hash: u64,
    pub basis_hash: u64,
}

impl MlpWeights {
    pub fn k_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn h1(&self) -> usize {
        self.w1.nrows()
    }

    pub fn h2(&self) -> usize {
        self.w2.nrows()
    }

    pub fn m(&self) -> usize {
        self.w3.nrows()
    }

    fn check_dims(&self) -> Result<()> {
        let ok = self.w2.ncols() == self.h1()
            && self.w3.ncols() == self.h2()
            && self.b1.len() == self.h1()
            && self.b2.len() == self.h2()
            && self.b3.len() == self.m()
            && self.input_scale.len() == self.k_in();
        if ok {
            Ok(())
        } else {
            Err(CoreError::Dimension {
                context: "MlpWeights dimension chain",
                expected: self.k_in(),
                got: self.input_scale.len(),
            })
        }
    }

    /// Content hash over all parameters, for provenance manifests.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.push(self.activation as u8);
        for v in self
            .input_scale
            .iter()
            .chain(self.w1.iter())
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.w3.iter())
            .chain(self.b3.iter())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        io::content_hash_bytes(&bytes)
    }
}

/// Dot product with a fixed 8-lane accumulation order; the compiler maps
/// the lanes onto FMA vectors while the result stays independent of
/// batching and thread scheduling.
#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 8;
    let mut acc = [0.0f32; 8];
    for k in 0..chunks {
        let o = k * 8;
        for l in 0..8 {
            acc[l] = a[o + l].mul_add(b[o + l], acc[l]);
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Scratch buffers for one row evaluation.
struct RowScratch {
    x: Vec<f32>,
    h1: Vec<f32>,
    h2: Vec<f32>,
}

impl RowScratch {
    fn new(w: &MlpWeights) -> RowScratch {
        RowScratch {
            x: vec![0.0; w.k_in()],
            h1: vec![0.0; w.h1()],
            h2: vec![0.0; w.h2()],
        }
    }
}

fn forward_row(w: &MlpWeights, alpha_high: &[f64], scratch: &mut RowScratch, out: &mut [f32]) {
    for (i, (&a, &s)) in alpha_high.iter().zip(&w.input_scale).enumerate() {
        scratch.x[i] = a as f32 * s;
    }
    for (o, h) in scratch.h1.iter_mut().enumerate() {
        let z = dot_f32(w.w1.row(o).to_slice().unwrap(), &scratch.x) + w.b1[o];
        *h = w.activation.eval_f32(z);
    }
    for (o, h) in scratch.h2.iter_mut().enumerate() {
        let z = dot_f32(w.w2.row(o).to_slice().unwrap(), &scratch.h1) + w.b2[o];
        *h = w.activation.eval_f32(z);
    }
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot_f32(w.w3.row(o).to_slice().unwrap(), &scratch.h2) + w.b3[o];
    }
}

/// Evaluates the network on one coefficient vector (alpha_4 .. alpha_K).
pub fn p2s_forward(w: &MlpWeights, alpha_high: &[f64]) -> Result<Vec<f32>> {
    w.check_dims()?;
    if alpha_high.len() != w.k_in() {
        return Err(CoreError::Dimension {
            context: "p2s_forward input",
            expected: w.k_in(),
            got: alpha_high.len(),
        });
    }
    let mut scratch = RowScratch::new(w);
    let mut out = vec![0.0f32; w.m()];
    forward_row(w, alpha_high, &mut scratch, &mut out);
    Ok(out)
}

/// Vectorized forward pass: row i of the output equals
/// `p2s_forward(row i)` bitwise, for any N and any thread count.
pub fn p2s_forward_batch(w: &MlpWeights, alphas: &Array2<f64>) -> Result<Array2<f32>> {
    w.check_dims()?;
    if alphas.ncols() != w.k_in() {
        return Err(CoreError::Dimension {
            context: "p2s_forward_batch input",
            expected: w.k_in(),
            got: alphas.ncols(),
        });
    }
    let n = alphas.nrows();
    let m = w.m();
    let mut out = Array2::zeros((n, m));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each_init(
            || RowScratch::new(w),
            |scratch, (i, mut row)| {
                let alpha: Vec<f64> = alphas.row(i).iter().cloned().collect();
                forward_row(w, &alpha, scratch, row.as_slice_mut().unwrap());
            },
        );
    Ok(out)
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    StepDecay { every: usize, factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub validation_fraction: f64,
    pub hidden: (usize, usize),
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            learning_rate: 1.0,
            momentum: 0.9,
            schedule: LrSchedule::StepDecay {
                every: 50,
                factor: 0.3,
            },
            validation_fraction: 0.15,
            hidden: (128, 128),
            activation: Activation::Isru,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CoreError::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses and baselines from one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation MSE of always predicting the train-set mean beta.
    pub mean_predictor_val_loss: f64,
    /// Validation MSE of always predicting zero.
    pub zero_predictor_val_loss: f64,
}

struct NetF64 {
    act: Activation,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

struct ForwardCache {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    y: Array2<f64>,
}

struct Grads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

impl NetF64 {
    fn init(k_in: usize, hidden: (usize, usize), m: usize, act: Activation, seed: u64) -> NetF64 {
        let mut rng = substream(seed, 1);
        let mut layer = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let w1 = layer(hidden.0, k_in);
        let w2 = layer(hidden.1, hidden.0);
        let w3 = layer(m, hidden.1);
        NetF64 {
            act,
            w1,
            b1: Array1::zeros(hidden.0),
            w2,
            b2: Array1::zeros(hidden.1),
            w3,
            b3: Array1::zeros(m),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> ForwardCache {
        let z1 = x.dot(&self.w1.t()) + &self.b1;
        let a1 = z1.mapv(|v| self.act.eval_f64(v));
        let z2 = a1.dot(&self.w2.t()) + &self.b2;
        let a2 = z2.mapv(|v| self.act.eval_f64(v));
        let y = a2.dot(&self.w3.t()) + &self.b3;
        ForwardCache { z1, a1, z2, a2, y }
    }

    fn loss(y: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let diff = y - t;
        diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
    }

    fn backward(&self, x: &Array2<f64>, cache: &ForwardCache, target: &Array2<f64>) -> Grads {
        let scale = 2.0 / cache.y.len() as f64;
        let dy = (&cache.y - target) * scale;
        let gw3 = dy.t().dot(&cache.a2);
        let gb3 = dy.sum_axis(Axis(0));
        let da2 = dy.dot(&self.w3);
        let dz2 = &da2 * &cache.z2.mapv(|v| self.act.deriv_f64(v));
        let gw2 = dz2.t().dot(&cache.a1);
        let gb2 = dz2.sum_axis(Axis(0));
        let da1 = dz2.dot(&self.w2);
        let dz1 = &da1 * &cache.z1.mapv(|v| self.act.deriv_f64(v));
        let gw1 = dz1.t().dot(x);
        let gb1 = dz1.sum_axis(Axis(0));
        Grads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
        }
    }
}

/// Standardization multipliers: inverse modal standard deviations at the
/// corpus-median turbulence strength.
fn input_scales(ds: &PsfDataset) -> Result<Vec<f64>> {
    let med = 0.5 * (ds.d_over_r0_range.0 + ds.d_over_r0_range.1);
    let rz = noll_covariance(ds.k, med)?;
    Ok((4..=ds.k)
        .map(|j| {
            let sd = rz.entry(j, j).sqrt();
            if sd > 0.0 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect())
}

/// Projection targets for the whole corpus, N x M.
fn projection_targets(ds: &PsfDataset, basis: &PsfBasis) -> Result<Array2<f64>> {
    let n = ds.count();
    let m = basis.m();
    let mut t = Array2::zeros((n, m));
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| project_psf(&ds.psf_f64(i), basis))
        .collect::<Result<_>>()?;
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            t[[i, j]] = v;
        }
    }
    Ok(t)
}

/// Trains the network on projection targets with minibatch momentum
/// gradient descent. Deterministic in `cfg.seed`.
pub fn train_p2s(
    ds: &PsfDataset,
    basis: &PsfBasis,
    cfg: &TrainConfig,
) -> Result<(MlpWeights, TrainReport)> {
    cfg.validate()?;
    if ds.s != basis.s {
        return Err(CoreError::Dimension {
            context: "train_p2s psf size",
            expected: basis.s,
            got: ds.s,
        });
    }
    if ds.config_hash != basis.config_hash {
        return Err(CoreError::AssetMismatch(
            "dataset and basis were built from different configurations".into(),
        ));
    }
    let n = ds.count();
    let k_in = ds.k_in();
    let m = basis.m();
    let scales = input_scales(ds)?;

    // Standardized inputs and projection targets.
    let mut x = Array2::zeros((n, k_in));
    for i in 0..n {
        for j in 0..k_in {
            x[[i, j]] = ds.alphas_high[[i, j]] as f64 * scales[j];
        }
    }
    let t = projection_targets(ds, basis)?;

    // Deterministic split.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(cfg.seed, 0));
    let n_val = ((n as f64 * cfg.validation_fraction) as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let take = |idx: &[usize], src: &Array2<f64>| {
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        out
    };
    let x_val = take(val_idx, &x);
    let t_val = take(val_idx, &t);

    // Baselines.
    let mut mean_beta = Array1::<f64>::zeros(m);
    for &i in train_idx {
        mean_beta += &t.row(i);
    }
    mean_beta /= train_idx.len() as f64;
    let mean_predictor_val_loss = t_val
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .zip(mean_beta.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (t_val.len() as f64);
    let zero_predictor_val_loss = t_val.iter().map(|v| v * v).sum::<f64>() / t_val.len() as f64;

    let mut net = NetF64::init(k_in, cfg.hidden, m, cfg.activation, cfg.seed);
    let zero_like = |a: &Array2<f64>| Array2::<f64>::zeros(a.dim());
    let mut vel = Grads {
        w1: zero_like(&net.w1),
        b1: Array1::zeros(net.b1.len()),
        w2: zero_like(&net.w2),
        b2: Array1::zeros(net.b2.len()),
        w3: zero_like(&net.w3),
        b3: Array1::zeros(net.b3.len()),
    };

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    let mut train_order: Vec<usize> = train_idx.to_vec();

    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::StepDecay { every, factor } => {
                cfg.learning_rate * factor.powi((epoch / every.max(1)) as i32)
            }
        };
        train_order.shuffle(&mut substream(cfg.seed, 3 + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in train_order.chunks(cfg.batch_size) {
            let xb = take(chunk, &x);
            let tb = take(chunk, &t);
            let cache = net.forward(&xb);
            let loss = NetF64::loss(&cache.y, &tb);
            if !loss.is_finite() {
                return Err(CoreError::TrainingDiverged {
                    epoch,
                    last_stable: epoch.saturating_sub(1),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
            let g = net.backward(&xb, &cache, &tb);
            let step = |w: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>| {
                v.zip_mut_with(g, |v, &g| *v = cfg.momentum * *v - lr * g);
                *w += &*v;
            };
            let step1 = |w: &mut Array1<f64>, v: &mut Array1<f64>, g: &Array1<f64>| {
                v.zip_mut_with(g, |v, &g| *v = cfg.momentum * *v - lr * g);
                *w += &*v;
            };
            step(&mut net.w1, &mut vel.w1, &g.w1);
            step1(&mut net.b1, &mut vel.b1, &g.b1);
            step(&mut net.w2, &mut vel.w2, &g.w2);
            step1(&mut net.b2, &mut vel.b2, &g.b2);
            step(&mut net.w3, &mut vel.w3, &g.w3);
            step1(&mut net.b3, &mut vel.b3, &g.b3);
        }
        train_loss.push(epoch_loss / seen as f64);
        let vcache = net.forward(&x_val);
        let vloss = NetF64::loss(&vcache.y, &t_val);
        if !vloss.is_finite() {
            return Err(CoreError::TrainingDiverged {
                epoch,
                last_stable: epoch.saturating_sub(1),
            });
        }
        val_loss.push(vloss);
    }

    let to_f32 = |a: &Array2<f64>| a.mapv(|v| v as f32);
    let weights = MlpWeights {
        activation: cfg.activation,
        input_scale: scales.iter().map(|&v| v as f32).collect(),
        w1: to_f32(&net.w1),
        b1: net.b1.iter().map(|&v| v as f32).collect(),
        w2: to_f32(&net.w2),
        b2: net.b2.iter().map(|&v| v as f32).collect(),
        w3: to_f32(&net.w3),
        b3: net.b3.iter().map(|&v| v as f32).collect(),
        config_hash: ds.config_hash,
        basis_hash: basis.content_hash(),
    };
    let report = TrainReport {
        train_loss,
        val_loss,
        mean_predictor_val_loss,
        zero_predictor_val_loss,
    };
    Ok((weights, report))
}

/// Compares analytic gradients against central finite differences on
/// `n_coords` parameter coordinates; returns the worst relative error.
pub fn gradient_finite_difference_check(
    ds: &PsfDataset,
    basis: &PsfBasis,
    cfg: &TrainConfig,
    n_coords: usize,
) -> Result<f64> {
    let k_in = ds.k_in();
    let m = basis.m();
    let scales = input_scales(ds)?;
    let nb = ds.count().min(cfg.batch_size.max(8));
    let mut x = Array2::zeros((nb, k_in));
    for i in 0..nb {
        for j in 0..k_in {
            x[[i, j]] = ds.alphas_high[[i, j]] as f64 * scales[j];
        }
    }
    let t_full = projection_targets(ds, basis)?;
    let t = t_full.slice(ndarray::s![..nb, ..]).to_owned();

    let mut net = NetF64::init(k_in, cfg.hidden, m, cfg.activation, cfg.seed);
    let cache = net.forward(&x);
    let grads = net.backward(&x, &cache, &t);

    let mut worst = 0.0f64;
    let mut rng = substream(cfg.seed, 18);
    for _ in 0..n_coords {
        let layer = rng.gen_range(0..3u32);
        let (rows, cols) = match layer {
            0 => net.w1.dim(),
            1 => net.w2.dim(),
            _ => net.w3.dim(),
        };
        let r = rng.gen_range(0..rows);
        let c = rng.gen_range(0..cols);
        let analytic = match layer {
            0 => grads.w1[[r, c]],
            1 => grads.w2[[r, c]],
            _ => grads.w3[[r, c]],
        };
        let h = 1e-5;
        let mut eval_at = |delta: f64| {
            match layer {
                0 => net.w1[[r, c]] += delta,
                1 => net.w2[[r, c]] += delta,
                _ => net.w3[[r, c]] += delta,
            }
            let loss = NetF64::loss(&net.forward(&x).y, &t);
            match layer {
                0 => net.w1[[r, c]] -= delta,
                1 => net.w2[[r, c]] -= delta,
                _ => net.w3[[r, c]] -= delta,
            }
            loss
        };
        let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs());
        if denom > 1e-9 {
            worst = worst.max((analytic - fd).abs() / denom);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------
// Serialization ("P2SW")
// ---------------------------------------------------------------------

const W_MAGIC: &[u8; 4] = b"P2SW";
const W_VERSION: u16 = 1;

pub fn save_weights(w: &MlpWeights, path: &Path) -> Result<()> {
    w.check_dims()?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    io::write_magic(&mut out, W_MAGIC)?;
    out.write_u16::<LittleEndian>(W_VERSION)?;
    out.write_u8(w.activation as u8)?;
    out.write_u32::<LittleEndian>(w.k_in() as u32)?;
    out.write_u32::<LittleEndian>(w.h1() as u32)?;
    out.write_u32::<LittleEndian>(w.h2() as u32)?;
    out.write_u32::<LittleEndian>(w.m() as u32)?;
    out.write_u64::<LittleEndian>(w.config_hash)?;
    out.write_u64::<LittleEndian>(w.basis_hash)?;
    io::write_f32_slice(&mut out, &w.input_scale)?;
    io::write_f32_slice(&mut out, w.w1.as_slice().unwrap())?;
    io::write_f32_slice(&mut out, &w.b1)?;
    io::write_f32_slice(&mut out, w.w2.as_slice().unwrap())?;
    io::write_f32_slice(&mut out, &w.b2)?;
    io::write_f32_slice(&mut out, w.w3.as_slice().unwrap())?;
    io::write_f32_slice(&mut out, &w.b3)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<MlpWeights> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    io::check_magic(&mut r, W_MAGIC, path)?;
    io::check_version(&mut r, "weights", W_VERSION, path)?;
    let act_id = r.read_u8()?;
    let activation = Activation::from_id(act_id).ok_or_else(|| {
        CoreError::format(path.display().to_string(), format!("unknown activation id {act_id}"))
    })?;
    let k_in = r.read_u32::<LittleEndian>()? as usize;
    let h1 = r.read_u32::<LittleEndian>()? as usize;
    let h2 = r.read_u32::<LittleEndian>()? as usize;
    let m = r.read_u32::<LittleEndian>()? as usize;
    if [k_in, h1, h2, m].iter().any(|&d| d == 0 || d > 1 << 20) {
        return Err(CoreError::format(
            path.display().to_string(),
            format!("implausible dimensions {k_in}x{h1}x{h2}x{m}"),
        ));
    }
    let config_hash = r.read_u64::<LittleEndian>()?;
    let basis_hash = r.read_u64::<LittleEndian>()?;
    let input_scale = io::read_f32_vec(&mut r, k_in, path)?;
    let w1 = io::read_f32_vec(&mut r, h1 * k_in, path)?;
    let b1 = io::read_f32_vec(&mut r, h1, path)?;
    let w2 = io::read_f32_vec(&mut r, h2 * h1, path)?;
    let b2 = io::read_f32_vec(&mut r, h2, path)?;
    let w3 = io::read_f32_vec(&mut r, m * h2, path)?;
    let b3 = io::read_f32_vec(&mut r, m, path)?;
    let weights = MlpWeights {
        activation,
        input_scale,
        w1: Array2::from_shape_vec((h1, k_in), w1).unwrap(),
        b1,
        w2: Array2::from_shape_vec((h2, h1), w2).unwrap(),
        b2,
        w3: Array2::from_shape_vec((m, h2), w3).unwrap(),
        b3,
        config_hash,
        basis_hash,
    };
    for v in weights.w1.iter().chain(weights.w2.iter()).chain(weights.w3.iter()) {
        if !v.is_finite() {
            return Err(CoreError::format(
                path.display().to_string(),
                "non-finite weight entry",
            ));
        }
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::fit_pca;
    use crate::config::OpticalConfig;
    use crate::dataset::generate_dataset;

    fn small_config() -> OpticalConfig {
        let mut c = OpticalConfig::default();
        c.phase_grid_px = 32;
        c.psf_size_px = 17;
        c.zernike_count = 10;
        c
    }

    fn fixture() -> (PsfDataset, PsfBasis) {
        let c = small_config();
        let ds = generate_dataset(&c, 320, (0.5, 4.0), 33).unwrap();
        let basis = fit_pca(&ds, 12).unwrap();
        (ds, basis)
    }

    fn random_weights(k_in: usize, h: usize, m: usize, seed: u64) -> MlpWeights {
        let mut rng = substream(seed, 0);
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.5f32..0.5))
        };
        let w1 = mat(h, k_in);
        let w2 = mat(h, h);
        let w3 = mat(m, h);
        MlpWeights {
            activation: Activation::Isru,
            input_scale: vec![1.0; k_in],
            b1: vec![0.1; h],
            b2: vec![-0.05; h],
            b3: vec![0.0; m],
            w1,
            w2,
            w3,
            config_hash: 0,
            basis_hash: 0,
        }
    }

    #[test]
    fn forward_is_deterministic_and_zero_for_zero_weights() {
        let w = random_weights(7, 16, 5, 1);
        let alpha = vec![0.3, -0.2, 0.5, 0.0, 1.2, -0.7, 0.1];
        let a = p2s_forward(&w, &alpha).unwrap();
        let b = p2s_forward(&w, &alpha).unwrap();
        assert_eq!(a, b);

        let mut zero = random_weights(7, 16, 5, 2);
        zero.w1.fill(0.0);
        zero.w2.fill(0.0);
        zero.w3.fill(0.0);
        zero.b1.fill(0.0);
        zero.b2.fill(0.0);
        zero.b3.fill(0.0);
        let out = p2s_forward(&zero, &alpha).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_match_scalar_path_bitwise() {
        let w = random_weights(9, 24, 6, 3);
        let mut rng = substream(9, 9);
        let alphas = Array2::from_shape_fn((37, 9), |_| rng.gen_range(-2.0..2.0));
        let batch = p2s_forward_batch(&w, &alphas).unwrap();
        for i in 0..37 {
            let row: Vec<f64> = alphas.row(i).iter().cloned().collect();
            let scalar = p2s_forward(&w, &row).unwrap();
            for j in 0..6 {
                assert_eq!(batch[[i, j]], scalar[j], "row {i} col {j}");
            }
        }
        // N = 1 batch is the scalar path.
        let one = alphas.slice(ndarray::s![..1, ..]).to_owned();
        let b1 = p2s_forward_batch(&w, &one).unwrap();
        let s1 = p2s_forward(&w, &one.row(0).to_vec()).unwrap();
        assert_eq!(b1.row(0).to_vec(), s1);
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let w = random_weights(5, 12, 4, 4);
        let mut rng = substream(11, 0);
        let alphas = Array2::from_shape_fn((16, 5), |_| rng.gen_range(-1.0..1.0));
        let fwd = p2s_forward_batch(&w, &alphas).unwrap();
        let mut reversed = Array2::zeros((16, 5));
        for i in 0..16 {
            reversed.row_mut(i).assign(&alphas.row(15 - i));
        }
        let rev = p2s_forward_batch(&w, &reversed).unwrap();
        for i in 0..16 {
            assert_eq!(fwd.row(i), rev.row(15 - i));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let w = random_weights(7, 8, 3, 5);
        assert!(matches!(
            p2s_forward(&w, &[0.0; 6]),
            Err(CoreError::Dimension { .. })
        ));
    }

    #[test]
    fn tiny_corpus_overfits() {
        let c = small_config();
        let ds = generate_dataset(&c, 64, (1.0, 3.0), 44).unwrap();
        let basis = fit_pca(&ds, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 1200,
            batch_size: 16,
            learning_rate: 0.3,
            momentum: 0.9,
            schedule: LrSchedule::StepDecay {
                every: 400,
                factor: 0.5,
            },
            validation_fraction: 0.1,
            hidden: (64, 64),
            activation: Activation::Isru,
            seed: 5,
        };
        let (_, report) = train_p2s(&ds, &basis, &cfg).unwrap();
        let initial = report.train_loss[0];
        let last = *report.train_loss.last().unwrap();
        assert!(
            last < 1e-4 * initial,
            "train loss {last} vs initial {initial}"
        );
    }

    #[test]
    fn trained_network_beats_mean_predictor() {
        let (ds, basis) = fixture();
        let cfg = TrainConfig {
            epochs: 300,
            schedule: LrSchedule::StepDecay {
                every: 100,
                factor: 0.3,
            },
            seed: 6,
            ..TrainConfig::default()
        };
        let (w, report) = train_p2s(&ds, &basis, &cfg).unwrap();
        let final_val = *report.val_loss.last().unwrap();
        assert!(
            final_val < report.mean_predictor_val_loss,
            "val {final_val} vs mean predictor {}",
            report.mean_predictor_val_loss
        );
        assert!(final_val < report.zero_predictor_val_loss);
        assert_eq!(w.k_in(), ds.k_in());
        assert_eq!(w.m(), basis.m());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ds, basis) = fixture();
        let cfg = TrainConfig::default();
        let worst = gradient_finite_difference_check(&ds, &basis, &cfg, 12).unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let c = small_config();
        let ds = generate_dataset(&c, 96, (1.0, 3.0), 55).unwrap();
        let basis = fit_pca(&ds, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 12,
            hidden: (32, 32),
            ..TrainConfig::default()
        };
        let (w1, _) = train_p2s(&ds, &basis, &cfg).unwrap();
        let (w2, _) = train_p2s(&ds, &basis, &cfg).unwrap();
        assert_eq!(w1, w2);
        let cfg2 = TrainConfig { seed: 13, ..cfg };
        let (w3, _) = train_p2s(&ds, &basis, &cfg2).unwrap();
        assert_ne!(w1, w3);
    }

    #[test]
    fn divergence_is_reported() {
        let c = small_config();
        let ds = generate_dataset(&c, 32, (1.0, 3.0), 66).unwrap();
        let basis = fit_pca(&ds, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e9,
            hidden: (16, 16),
            seed: 3,
            ..TrainConfig::default()
        };
        match train_p2s(&ds, &basis, &cfg) {
            Err(CoreError::TrainingDiverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let w = random_weights(7, 20, 9, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.p2sw");
        save_weights(&w, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded, w);

        // Truncated file: clean format error, nothing returned.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_weights(&path).is_err());

        // Version bump with unchanged payload: explicit unsupported-version.
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        bumped[5] = 0;
        std::fs::write(&path, &bumped).unwrap();
        match load_weights(&path) {
            Err(CoreError::UnsupportedVersion { got: 2, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
