//! Sampling grid over the circular pupil.

use ndarray::Array2;

/// Square grid of normalized aperture coordinates with a binary pupil mask.
///
/// Sample points sit at pixel centers, `x_i = (2 i + 1 - P) / P`, so the
/// unit circle is inscribed with a half-pixel margin and the layout is
/// symmetric about the grid center. The mask is 1 exactly where
/// `x^2 + y^2 <= 1`.
#[derive(Debug, Clone)]
pub struct ApertureGrid {
    resolution: usize,
    mask: Array2<f64>,
    xs: Vec<f64>,
    mask_count: usize,
}

impl ApertureGrid {
    pub fn new(resolution: usize) -> Self {
        assert!(resolution >= 2, "aperture grid needs at least 2 samples");
        let p = resolution;
        let xs: Vec<f64> = (0..p).map(|i| (2 * i + 1) as f64 / p as f64 - 1.0).collect();
        let mut mask = Array2::zeros((p, p));
        let mut count = 0;
        for r in 0..p {
            for c in 0..p {
                if xs[r] * xs[r] + xs[c] * xs[c] <= 1.0 {
                    mask[[r, c]] = 1.0;
                    count += 1;
                }
            }
        }
        ApertureGrid {
            resolution,
            mask,
            xs,
            mask_count: count,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Binary pupil function W.
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    /// Number of samples inside the pupil.
    pub fn mask_count(&self) -> usize {
        self.mask_count
    }

    /// Normalized coordinate of row/column index `i` (same for both axes).
    pub fn coord(&self, i: usize) -> f64 {
        self.xs[i]
    }

    /// (x, y) of the sample at `[row, col]`; y grows with the row index.
    pub fn xy(&self, row: usize, col: usize) -> (f64, f64) {
        (self.xs[col], self.xs[row])
    }

    pub fn inside(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]] != 0.0
    }
}
