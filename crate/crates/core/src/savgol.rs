//! Savitzky–Golay smoothing with one-sided fits at the series edges.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Precomputed smoothing weights for every window placement.
#[derive(Debug, Clone)]
pub struct SavitzkyGolay {
    window: usize,
    order: usize,
    /// `edge[i]` evaluates the fit over the first `window` samples at offset `i`.
    /// Index `half` is the centred (interior) kernel.
    kernels: Vec<Vec<f64>>,
}

impl SavitzkyGolay {
    pub fn new(window: usize, order: usize) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::EvenWindow(window));
        }
        if order >= window {
            return Err(Error::InvalidFilter(format!(
                "polynomial order {order} must be below window {window}"
            )));
        }
        let kernels = (0..window).map(|pos| fit_kernel(window, order, pos)).collect();
        Ok(Self {
            window,
            order,
            kernels,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Kernel used at position `i` of a series of length `n` together with
    /// the index of the first sample it applies to.
    pub fn kernel_at(&self, i: usize, n: usize) -> (usize, &[f64]) {
        let half = self.window / 2;
        if i < half {
            (0, &self.kernels[i])
        } else if i + half >= n {
            let start = n - self.window;
            (start, &self.kernels[i - start])
        } else {
            (i - half, &self.kernels[half])
        }
    }

    pub fn smooth(&self, series: &[f64]) -> Result<Vec<f64>> {
        let n = series.len();
        if n < self.window {
            return Err(Error::SeriesTooShort {
                len: n,
                window: self.window,
            });
        }
        Ok((0..n)
            .map(|i| {
                let (start, k) = self.kernel_at(i, n);
                k.iter().zip(&series[start..]).map(|(c, x)| c * x).sum()
            })
            .collect())
    }
}

/// Weights `c` such that `c · y` is the least-squares polynomial of degree
/// `order` through `y[0..window]`, evaluated at sample `pos`.
fn fit_kernel(window: usize, order: usize, pos: usize) -> Vec<f64> {
    // Abscissae centred on the evaluation point keep the normal equations well conditioned.
    let x: Vec<f64> = (0..window).map(|j| j as f64 - pos as f64).collect();
    let a = DMatrix::from_fn(window, order + 1, |j, k| x[j].powi(k as i32));
    let ata = a.transpose() * &a;
    let mut e0 = DVector::zeros(order + 1);
    e0[0] = 1.0;
    let z = ata
        .cholesky()
        .expect("vandermonde normal matrix is positive definite")
        .solve(&e0);
    (a * z).iter().copied().collect()
}
