//! Row-column 2-D FFTs over `ndarray` buffers, with cached plans.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

struct PlanCache<T: FftNum> {
    planner: FftPlanner<T>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<T>>>,
}

impl<T: FftNum> PlanCache<T> {
    fn get(&mut self, len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
        self.plans
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    self.planner.plan_fft_inverse(len)
                } else {
                    self.planner.plan_fft_forward(len)
                }
            })
            .clone()
    }
}

fn plan_f64(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<PlanCache<f64>>> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            Mutex::new(PlanCache {
                planner: FftPlanner::new(),
                plans: HashMap::new(),
            })
        })
        .lock()
        .unwrap()
        .get(len, inverse)
}

fn plan_f32(len: usize, inverse: bool) -> Arc<dyn Fft<f32>> {
    static CACHE: OnceLock<Mutex<PlanCache<f32>>> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            Mutex::new(PlanCache {
                planner: FftPlanner::new(),
                plans: HashMap::new(),
            })
        })
        .lock()
        .unwrap()
        .get(len, inverse)
}

fn transpose<T: FftNum>(a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((c, r), |(i, j)| a[[j, i]])
}

macro_rules! impl_fft2 {
    ($fft2:ident, $ifft2:ident, $plan:ident, $t:ty) => {
        /// In-place forward 2-D FFT (unnormalized).
        pub fn $fft2(data: &mut Array2<Complex<$t>>) {
            fft2_dir(data, false, $plan);
        }

        /// In-place inverse 2-D FFT, normalized by 1/(rows*cols).
        pub fn $ifft2(data: &mut Array2<Complex<$t>>) {
            fft2_dir(data, true, $plan);
            let norm = 1.0 / (data.len() as $t);
            for v in data.iter_mut() {
                *v = *v * norm;
            }
        }
    };
}

fn fft2_dir<T: FftNum>(
    data: &mut Array2<Complex<T>>,
    inverse: bool,
    plan: fn(usize, bool) -> Arc<dyn Fft<T>>,
) {
    let (rows, cols) = data.dim();
    let row_fft = plan(cols, inverse);
    for mut row in data.rows_mut() {
        row_fft.process(row.as_slice_mut().expect("row not contiguous"));
    }
    let mut t = transpose(data);
    let col_fft = plan(rows, inverse);
    for mut row in t.rows_mut() {
        col_fft.process(row.as_slice_mut().expect("row not contiguous"));
    }
    *data = transpose(&t);
}

impl_fft2!(fft2, ifft2, plan_f64, f64);
impl_fft2!(fft2_f32, ifft2_f32, plan_f32, f32);

/// Swaps quadrants so the zero-frequency sample moves to (rows/2, cols/2).
pub fn fftshift<T: Copy + Default>(a: &Array2<T>) -> Array2<T> {
    let (r, c) = a.dim();
    let mut out = Array2::from_elem((r, c), T::default());
    for i in 0..r {
        for j in 0..c {
            out[[(i + r / 2) % r, (j + c / 2) % c]] = a[[i, j]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn round_trip_recovers_input() {
        let mut a = Array2::from_shape_fn((16, 24), |(i, j)| {
            Complex64::new((i * 7 + j) as f64 % 5.0, (j * 3 + i) as f64 % 3.0)
        });
        let orig = a.clone();
        fft2(&mut a);
        ifft2(&mut a);
        for (x, y) in a.iter().zip(orig.iter()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_transforms_to_constant() {
        let mut a = Array2::from_elem((8, 8), Complex64::new(0.0, 0.0));
        a[[0, 0]] = Complex64::new(1.0, 0.0);
        fft2(&mut a);
        for v in a.iter() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn fftshift_centers_origin() {
        let mut a = Array2::zeros((6, 6));
        a[[0, 0]] = 1.0;
        let s = fftshift(&a);
        assert_eq!(s[[3, 3]], 1.0);
    }
}
