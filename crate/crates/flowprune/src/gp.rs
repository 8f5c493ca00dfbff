//! Gaussian-process surrogate with a squared-exponential kernel and
//! Expected Improvement.
//!
//! Targets are standardized before fitting; length scale and signal
//! variance come from a fixed grid scored by log marginal likelihood via a
//! Cholesky factorization of the jittered kernel matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Length-scale candidates for the marginal-likelihood grid.
pub const LENGTH_SCALE_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
/// Signal-variance candidates for the marginal-likelihood grid.
pub const SIGNAL_VAR_GRID: [f64; 3] = [0.25, 1.0, 4.0];
/// Diagonal jitter variance added to the kernel matrix.
pub const NOISE_JITTER: f64 = 1e-6;

/// A fitted Gaussian process over points in the unit cube.
pub struct GpState {
    xs: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    length_scale: f64,
    signal_var: f64,
    noise: f64,
    chol: Cholesky<f64, Dyn>,
    /// `K^{-1} y` in standardized units.
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(a: &[f64], b: &[f64], length_scale: f64, signal_var: f64) -> f64 {
    signal_var * (-sq_dist(a, b) / (2.0 * length_scale * length_scale)).exp()
}

/// Fit a GP to observed points, choosing kernel hyperparameters on the
/// fixed grid by log marginal likelihood. Needs at least two observations.
pub fn gp_fit(xs: &[Vec<f64>], ys: &[f64]) -> Result<GpState> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "gp_fit needs >= 2 matched observations, got {} xs and {} ys",
            xs.len(),
            ys.len()
        )));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Shape(
            "observation points differ in dimension".into(),
        ));
    }
    let n = xs.len();
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - y_mean) * (y - y_mean)).sum::<f64>() / n as f64;
    let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y_standardized = DVector::from_iterator(n, ys.iter().map(|y| (y - y_mean) / y_std));

    struct Candidate {
        lml: f64,
        length_scale: f64,
        signal_var: f64,
        chol: Cholesky<f64, Dyn>,
        alpha: DVector<f64>,
    }
    let mut best: Option<Candidate> = None;
    for &length_scale in &LENGTH_SCALE_GRID {
        for &signal_var in &SIGNAL_VAR_GRID {
            let mut kernel = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let k = rbf(&xs[i], &xs[j], length_scale, signal_var);
                    kernel[(i, j)] = k;
                    kernel[(j, i)] = k;
                }
                kernel[(i, i)] += NOISE_JITTER;
            }
            let Some(chol) = Cholesky::new(kernel) else {
                continue;
            };
            let alpha = chol.solve(&y_standardized);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let lml = -0.5 * y_standardized.dot(&alpha)
                - log_det
                - n as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
            if best.as_ref().is_none_or(|c| lml > c.lml) {
                best = Some(Candidate {
                    lml,
                    length_scale,
                    signal_var,
                    chol,
                    alpha,
                });
            }
        }
    }
    let chosen = best.ok_or_else(|| {
        Error::Numeric("kernel matrix not positive definite for any grid point".into())
    })?;
    Ok(GpState {
        xs: xs.to_vec(),
        y_mean,
        y_std,
        length_scale: chosen.length_scale,
        signal_var: chosen.signal_var,
        noise: NOISE_JITTER,
        chol: chosen.chol,
        alpha: chosen.alpha,
    })
}

impl GpState {
    pub fn observation_count(&self) -> usize {
        self.xs.len()
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Standard deviation the GP predicts far away from all data, in raw
    /// target units.
    pub fn prior_std(&self) -> f64 {
        self.signal_var.sqrt() * self.y_std
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    /// Predictive mean and standard deviation at `x`, in raw target units.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.xs[0].len() {
            return Err(Error::Shape(format!(
                "query point has dimension {}, observations have {}",
                x.len(),
                self.xs[0].len()
            )));
        }
        let k_star = DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .map(|xi| rbf(x, xi, self.length_scale, self.signal_var)),
        );
        let mean_standardized = k_star.dot(&self.alpha);
        let solved = self.chol.solve(&k_star);
        let var = (self.signal_var - k_star.dot(&solved)).max(0.0);
        let mean = self.y_mean + mean_standardized * self.y_std;
        let std = var.sqrt() * self.y_std;
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::Numeric("non-finite GP posterior".into()));
        }
        Ok((mean, std))
    }
}

/// Expected improvement over `best_y` with exploration margin `xi`.
pub fn expected_improvement(gp: &GpState, x: &[f64], best_y: f64, xi: f64) -> Result<f64> {
    let (mean, std) = gp.posterior(x)?;
    Ok(ei_value(mean, std, best_y, xi))
}

/// The closed-form EI; degenerate (zero-variance) predictions fall back to
/// the plain improvement.
pub fn ei_value(mean: f64, std: f64, best_y: f64, xi: f64) -> f64 {
    let gain = mean - best_y - xi;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / std;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (gain * normal.cdf(z) + std * normal.pdf(z)).max(0.0)
}
