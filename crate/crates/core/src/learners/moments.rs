//! Additive sufficient statistics for linear least-squares problems.
//!
//! Cross-validated Lasso and Ridge only ever need `XᵀX`, `Xᵀy`, `yᵀy` and the
//! column sums of a row subset. These are additive over disjoint row sets, so
//! fold statistics are accumulated once and training sets are formed by
//! subtraction. Columns that are mostly nonzero are shifted by their mean
//! before accumulation to limit cancellation; sparse columns (dummies) are
//! left unshifted so that the accumulation can skip zeros.

use nalgebra::{DMatrix, DVector};

use super::LinearModel;

#[derive(Debug, Clone)]
pub(crate) struct Shift {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Shift {
    pub fn compute(x: &DMatrix<f64>, y: &[f64], rows: &[usize]) -> Self {
        let p = x.ncols();
        let n = rows.len().max(1) as f64;
        let mut sx = vec![0.0; p];
        let mut nnz = vec![0usize; p];
        for j in 0..p {
            let col = x.column(j);
            for &r in rows {
                let v = col[r];
                if v != 0.0 {
                    sx[j] += v;
                    nnz[j] += 1;
                }
            }
        }
        let shift_x = (0..p)
            .map(|j| {
                if nnz[j] * 2 > rows.len() {
                    sx[j] / n
                } else {
                    0.0
                }
            })
            .collect();
        let sy: f64 = rows.iter().map(|&r| y[r]).sum();
        Self { x: shift_x, y: sy / n }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Moments {
    pub n: usize,
    pub sx: Vec<f64>,
    pub sy: f64,
    /// Row-major p x p, symmetric.
    pub sxx: Vec<f64>,
    pub sxy: Vec<f64>,
    pub syy: f64,
    p: usize,
}

impl Moments {
    pub fn zeros(p: usize) -> Self {
        Self {
            n: 0,
            sx: vec![0.0; p],
            sy: 0.0,
            sxx: vec![0.0; p * p],
            sxy: vec![0.0; p],
            syy: 0.0,
            p,
        }
    }

    pub fn accumulate(x: &DMatrix<f64>, y: &[f64], rows: &[usize], shift: &Shift) -> Self {
        let p = x.ncols();
        let mut m = Self::zeros(p);
        let mut buf = vec![0.0; p];
        let mut nz: Vec<usize> = Vec::with_capacity(p);
        for &r in rows {
            nz.clear();
            for j in 0..p {
                let v = x[(r, j)] - shift.x[j];
                buf[j] = v;
                if v != 0.0 {
                    nz.push(j);
                }
            }
            let yv = y[r] - shift.y;
            m.n += 1;
            m.sy += yv;
            m.syy += yv * yv;
            for (ia, &a) in nz.iter().enumerate() {
                let xa = buf[a];
                m.sx[a] += xa;
                m.sxy[a] += xa * yv;
                let row = &mut m.sxx[a * p..(a + 1) * p];
                for &b in &nz[ia..] {
                    row[b] += xa * buf[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                m.sxx[a * p + b] = m.sxx[b * p + a];
            }
        }
        m
    }

    pub fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.sy += o.sy;
        self.syy += o.syy;
        for (a, b) in self.sx.iter_mut().zip(&o.sx) {
            *a += b;
        }
        for (a, b) in self.sxy.iter_mut().zip(&o.sxy) {
            *a += b;
        }
        for (a, b) in self.sxx.iter_mut().zip(&o.sxx) {
            *a += b;
        }
    }

    pub fn minus(&self, o: &Moments) -> Moments {
        let mut m = self.clone();
        m.n -= o.n;
        m.sy -= o.sy;
        m.syy -= o.syy;
        for (a, b) in m.sx.iter_mut().zip(&o.sx) {
            *a -= b;
        }
        for (a, b) in m.sxy.iter_mut().zip(&o.sxy) {
            *a -= b;
        }
        for (a, b) in m.sxx.iter_mut().zip(&o.sxx) {
            *a -= b;
        }
        m
    }

    pub fn sum(parts: &[Moments], p: usize) -> Moments {
        let mut m = Moments::zeros(p);
        for part in parts {
            m.add(part);
        }
        m
    }

    /// Sum of squared errors of `y ≈ b0 + xᵀβ` over the accumulated rows,
    /// both expressed in shifted coordinates.
    pub fn sse(&self, beta: &[f64], b0: f64) -> f64 {
        let p = self.p;
        let n = self.n as f64;
        let mut bx = 0.0;
        let mut bxy = 0.0;
        let mut quad = 0.0;
        for a in 0..p {
            if beta[a] == 0.0 {
                continue;
            }
            bx += beta[a] * self.sx[a];
            bxy += beta[a] * self.sxy[a];
            let row = &self.sxx[a * p..(a + 1) * p];
            let mut s = 0.0;
            for b in 0..p {
                s += row[b] * beta[b];
            }
            quad += beta[a] * s;
        }
        let v = self.syy - 2.0 * b0 * self.sy - 2.0 * bxy + n * b0 * b0 + 2.0 * b0 * bx + quad;
        v.max(0.0)
    }

    pub fn standardize(&self) -> Standardized {
        let p = self.p;
        let n = self.n as f64;
        let mx: Vec<f64> = self.sx.iter().map(|s| s / n).collect();
        let my = self.sy / n;
        let mut scale = vec![1.0; p];
        let mut constant = vec![false; p];
        for j in 0..p {
            let cjj = self.sxx[j * p + j] - n * mx[j] * mx[j];
            let raw = self.sxx[j * p + j];
            if cjj <= 1e-10 * raw.max(f64::MIN_POSITIVE) || cjj <= 0.0 {
                constant[j] = true;
            } else {
                scale[j] = (cjj / n).sqrt();
            }
        }
        let mut g = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        for a in 0..p {
            if constant[a] {
                continue;
            }
            c[a] = (self.sxy[a] - n * mx[a] * my) / (n * scale[a]);
            for b in 0..p {
                if constant[b] {
                    continue;
                }
                let cab = self.sxx[a * p + b] - n * mx[a] * mx[b];
                g[(a, b)] = cab / (n * scale[a] * scale[b]);
            }
        }
        Standardized {
            yvar: ((self.syy - n * my * my) / n).max(0.0),
            mx,
            my,
            scale,
            constant,
            g,
            c,
        }
    }
}

/// Correlation-scale normal equations of one training set.
#[derive(Debug, Clone)]
pub(crate) struct Standardized {
    pub mx: Vec<f64>,
    pub my: f64,
    pub scale: Vec<f64>,
    pub constant: Vec<bool>,
    /// `X̃ᵀX̃ / n` with `X̃` centered and scaled to unit variance.
    pub g: DMatrix<f64>,
    /// `X̃ᵀ(y - ȳ) / n`.
    pub c: DVector<f64>,
    /// Variance of y; the scale of the Lasso objective.
    pub yvar: f64,
}

impl Standardized {
    /// Maps standardized coefficients to shifted-coordinate coefficients and
    /// intercept.
    pub fn unscale(&self, beta_std: &DVector<f64>) -> (Vec<f64>, f64) {
        let beta: Vec<f64> = (0..beta_std.len())
            .map(|j| if self.constant[j] { 0.0 } else { beta_std[j] / self.scale[j] })
            .collect();
        let b0 = self.my - beta.iter().zip(&self.mx).map(|(b, m)| b * m).sum::<f64>();
        (beta, b0)
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.constant.len()).filter(|&j| !self.constant[j]).collect()
    }

    /// Original-scale linear model from standardized coefficients.
    pub fn to_linear(
        &self,
        names: &[String],
        shift: &Shift,
        beta_std: &DVector<f64>,
        penalized: Vec<bool>,
        penalty: f64,
    ) -> LinearModel {
        let (coef, b0) = self.unscale(beta_std);
        let intercept =
            b0 + shift.y - coef.iter().zip(&shift.x).map(|(b, s)| b * s).sum::<f64>();
        LinearModel {
            names: names.to_vec(),
            means: self.mx.iter().zip(&shift.x).map(|(m, s)| m + s).collect(),
            scales: self.scale.clone(),
            dropped: self.constant.clone(),
            coef,
            intercept,
            penalized,
            penalty,
        }
    }
}
