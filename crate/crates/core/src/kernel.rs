//! RBF mixture kernels and the biased MMD² estimator.
//!
//! The kernel mean embeddings are never materialized: every quantity is
//! expressed through pairwise kernel sums, including the self-pair terms,
//! which makes the estimate a V-statistic that is always nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

pub const DEFAULT_BANDWIDTHS: [f64; 3] = [1.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// Bandwidths `α`; the mixture is the unweighted mean over them.
    pub bandwidths: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
        }
    }
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec { bandwidths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single(alpha: f64) -> Result<Self> {
        Self::new(vec![alpha])
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::Parameter("kernel needs at least one bandwidth".into()));
        }
        if let Some(a) = self.bandwidths.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Parameter(format!("bandwidth {a} is not positive")));
        }
        Ok(())
    }

    /// Mixture kernel value for a precomputed squared distance.
    #[inline]
    fn value_at<T: Real>(&self, sq_dist: T) -> T {
        let mut acc = T::zero();
        for &a in &self.bandwidths {
            acc += (-sq_dist / lit::<T>(2.0 * a)).exp();
        }
        acc / lit(self.bandwidths.len() as f64)
    }

    /// Kernel value together with `G = mean_α exp(-d²/2α)/α`, so that
    /// `∂k(x,y)/∂x = -G·(x - y)`.
    #[inline]
    fn value_and_slope<T: Real>(&self, sq_dist: T) -> (T, T) {
        let mut k = T::zero();
        let mut g = T::zero();
        for &a in &self.bandwidths {
            let e = (-sq_dist / lit::<T>(2.0 * a)).exp();
            k += e;
            g += e / lit(a);
        }
        let count = lit::<T>(self.bandwidths.len() as f64);
        (k / count, g / count)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// A mini-batch of feature vectors, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T> {
    features: Tensor<T>,
    domain: Domain,
}

impl<T: Real> FeatureBatch<T> {
    pub fn new(features: Tensor<T>, domain: Domain) -> Result<Self> {
        features.dims2()?;
        features.check_finite("feature batch")?;
        Ok(FeatureBatch { features, domain })
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.features.row(i)
    }
}

#[inline]
pub(crate) fn sq_dist<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

pub fn rbf_kernel<T: Real>(x: &[T], y: &[T], alpha: f64) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "kernel arguments have dimensions {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Parameter(format!("bandwidth {alpha} is not positive")));
    }
    Ok((-sq_dist(x, y) / lit::<T>(2.0 * alpha)).exp())
}

pub fn mixture_kernel<T: Real>(x: &[T], y: &[T], spec: &KernelSpec) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "kernel arguments have dimensions {} and {}",
            x.len(),
            y.len()
        )));
    }
    spec.validate()?;
    Ok(spec.value_at(sq_dist(x, y)))
}

pub fn gram_matrix<T: Real>(
    x: &FeatureBatch<T>,
    y: &FeatureBatch<T>,
    spec: &KernelSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if x.dim() != y.dim() {
        return Err(Error::dim(format!(
            "gram matrix over dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let (n, m) = (x.len(), y.len());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(spec.value_at(sq_dist(x.row(i), y.row(j))));
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn mmd2_biased<T: Real>(
    x: &FeatureBatch<T>,
    y: &FeatureBatch<T>,
    spec: &KernelSpec,
) -> Result<T> {
    Ok(mmd2_with_grad(x.features(), y.features(), spec, false)?.0)
}

/// Biased MMD² between the rows of `x` (`n×d`) and `y` (`m×d`).
///
/// With `want_grad`, also returns `∂MMD²/∂x` and `∂MMD²/∂y`; otherwise the
/// returned gradients are empty placeholders of the right shape.
pub(crate) fn mmd2_with_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    spec: &KernelSpec,
    want_grad: bool,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let (n, d) = x.dims2()?;
    let (m, d2) = y.dims2()?;
    if d != d2 {
        return Err(Error::dim(format!("MMD over dimensions {d} and {d2}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::Batch("MMD needs nonempty batches".into()));
    }
    let mut gx = vec![T::zero(); if want_grad { n * d } else { 0 }];
    let mut gy = vec![T::zero(); if want_grad { m * d } else { 0 }];

    let nf = lit::<T>(n as f64);
    let mf = lit::<T>(m as f64);
    let two = lit::<T>(2.0);
    let cxx = two / (nf * nf);
    let cyy = two / (mf * mf);
    let cxy = two / (nf * mf);

    // within-source
    let mut sxx = T::zero();
    for i in 0..n {
        let xi = x.row(i);
        for ip in 0..n {
            let xp = x.row(ip);
            let (k, g) = spec.value_and_slope(sq_dist(xi, xp));
            sxx += k;
            if want_grad && ip != i {
                let row = &mut gx[i * d..(i + 1) * d];
                for c in 0..d {
                    row[c] -= cxx * g * (xi[c] - xp[c]);
                }
            }
        }
    }
    // within-target
    let mut syy = T::zero();
    for j in 0..m {
        let yj = y.row(j);
        for jp in 0..m {
            let yp = y.row(jp);
            let (k, g) = spec.value_and_slope(sq_dist(yj, yp));
            syy += k;
            if want_grad && jp != j {
                let row = &mut gy[j * d..(j + 1) * d];
                for c in 0..d {
                    row[c] -= cyy * g * (yj[c] - yp[c]);
                }
            }
        }
    }
    // cross terms
    let mut sxy = T::zero();
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let yj = y.row(j);
            let (k, g) = spec.value_and_slope(sq_dist(xi, yj));
            sxy += k;
            if want_grad {
                for c in 0..d {
                    let diff = xi[c] - yj[c];
                    gx[i * d + c] += cxy * g * diff;
                    gy[j * d + c] -= cxy * g * diff;
                }
            }
        }
    }
    let value = sxx / (nf * nf) + syy / (mf * mf) - two * sxy / (nf * mf);
    let (gx, gy) = if want_grad {
        (Tensor::new(vec![n, d], gx)?, Tensor::new(vec![m, d], gy)?)
    } else {
        (Tensor::zeros(&[1]), Tensor::zeros(&[1]))
    };
    Ok((value, gx, gy))
}
