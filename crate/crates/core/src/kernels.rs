//! Radial matrix kernels on landmark space, the reduced kernel matrix
//! `K_q`, and the analytic derivative primitives used by the flow equations
//! and adjoint sweeps.
//!
//! Both families are scalar radial profiles `gamma(t)` applied at
//! `t = |x - y| / sigma` and tensored with the identity, so `K_q` is stored
//! as an `n x n` scalar matrix acting channel-wise on `R^d` weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::shapes::LandmarkState;

/// Scalar radial profile family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `gamma(t) = exp(-t^2)`.
    Gaussian,
    /// `gamma(t) = (1 + t + 2t^2/5 + t^3/15) exp(-t)`, a C^2 profile with
    /// slower tails than the Gaussian.
    Cubic,
}

/// A kernel family with its length scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "kernel width must be positive and finite, got {}",
                sigma
            )));
        }
        Ok(Self { family, sigma })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, sigma)
    }

    pub fn cubic(sigma: f64) -> Result<Self> {
        Self::new(KernelFamily::Cubic, sigma)
    }

    /// Profile value `gamma(t)` at nonnegative `t`.
    pub fn gamma(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-t * t).exp(),
            KernelFamily::Cubic => (1.0 + t + 2.0 * t * t / 5.0 + t * t * t / 15.0) * (-t).exp(),
        }
    }

    /// `gamma'(t) / t`, extended continuously through `t = 0`. Radial
    /// gradients take the form `(gamma'(t)/t) (x - y) / sigma^2`, so this
    /// shape keeps them finite for coincident points.
    pub fn dgamma_over_t(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => -2.0 * (-t * t).exp(),
            KernelFamily::Cubic => -(3.0 + 3.0 * t + t * t) / 15.0 * (-t).exp(),
        }
    }

    /// `gamma(|x - y| / sigma)` for two points.
    pub fn scalar(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.gamma(r2.sqrt() / self.sigma)
    }
}

/// `K(x, y)` as a `d x d` matrix, `gamma(|x - y| / sigma) * Id`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> DMatrix<f64> {
    DMatrix::identity(x.len(), x.len()) * spec.scalar(x, y)
}

/// The reduced kernel matrix of a landmark configuration, stored as its
/// `n x n` scalar part; the full matrix is the tensor with `Id_d`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    dim: usize,
    scalar: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.scalar.nrows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scalar(&self) -> &DMatrix<f64> {
        &self.scalar
    }

    /// `K_q w` for a flat `n*d` weight vector.
    pub fn apply(&self, w: &[f64]) -> DVector<f64> {
        let (n, d) = (self.n(), self.dim);
        assert_eq!(w.len(), n * d, "weight vector has wrong length");
        let mut out = DVector::zeros(n * d);
        for i in 0..n {
            for j in 0..n {
                let s = self.scalar[(i, j)];
                for k in 0..d {
                    out[i * d + k] += s * w[j * d + k];
                }
            }
        }
        out
    }

    /// Quadratic form `a^T K_q b`.
    pub fn quadratic(&self, a: &[f64], b: &[f64]) -> f64 {
        let (n, d) = (self.n(), self.dim);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s = self.scalar[(i, j)];
                let mut dot = 0.0;
                for k in 0..d {
                    dot += a[i * d + k] * b[j * d + k];
                }
                acc += s * dot;
            }
        }
        acc
    }

    /// Smallest eigenvalue of the scalar part; the full matrix shares its
    /// spectrum with multiplicity `d`.
    pub fn min_scalar_eigenvalue(&self) -> f64 {
        self.scalar
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

fn assemble_scalar(spec: &KernelSpec, dim: usize, coords: &[f64]) -> DMatrix<f64> {
    let n = coords.len() / dim;
    let mut scalar = DMatrix::zeros(n, n);
    for i in 0..n {
        scalar[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let s = spec.scalar(point(coords, dim, i), point(coords, dim, j));
            scalar[(i, j)] = s;
            scalar[(j, i)] = s;
        }
    }
    scalar
}

/// Assembles the reduced kernel matrix of `q` under a single kernel.
pub fn assemble_kq(spec: &KernelSpec, q: &LandmarkState) -> KernelMatrix {
    KernelMatrix {
        dim: q.dim(),
        scalar: assemble_scalar(spec, q.dim(), q.coords()),
    }
}

fn point(coords: &[f64], dim: usize, i: usize) -> &[f64] {
    &coords[i * dim..(i + 1) * dim]
}

// ---------------------------------------------------------------------------
// Derivative primitives (flat-slice kernels shared by the grouped wrappers)
// ---------------------------------------------------------------------------

fn grad_quadratic_raw(
    spec: &KernelSpec,
    dim: usize,
    coords: &[f64],
    a: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let n = coords.len() / dim;
    let mut out = vec![0.0; coords.len()];
    let support = |w: &[f64]| -> Vec<usize> {
        (0..n)
            .filter(|&i| w[i * dim..(i + 1) * dim].iter().any(|&x| x != 0.0))
            .collect()
    };
    let sa = support(a);
    let sb = support(b);
    // Only pairs with a weight on each side contribute; constraint gradients
    // call this with weights supported on one group's atoms, where the
    // restricted double loop is far smaller than the dense one.
    if 2 * sa.len() * sb.len() < n * n {
        grad_quadratic_pairs(spec, dim, coords, a, b, &sa, &sb, &mut out);
        return out;
    }
    let inv_sig = 1.0 / spec.sigma;
    let inv_sig2 = inv_sig * inv_sig;
    for m in 0..n {
        let xm = point(coords, dim, m);
        for j in 0..n {
            if j == m {
                continue;
            }
            let xj = point(coords, dim, j);
            let r2: f64 = xm.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum();
            let t = r2.sqrt() * inv_sig;
            let mut pair = 0.0;
            for k in 0..dim {
                pair += a[m * dim + k] * b[j * dim + k] + a[j * dim + k] * b[m * dim + k];
            }
            let scale = spec.dgamma_over_t(t) * inv_sig2 * pair;
            for k in 0..dim {
                out[m * dim + k] += scale * (xm[k] - xj[k]);
            }
        }
    }
    out
}

/// Quadratic-form gradient over ordered support pairs. Each product
/// `a_m . b_j` contributes antisymmetrically to out[m] and out[j]; running
/// over all ordered (m, j) in sa x sb covers both product orientations, so
/// a single pass is the complete gradient.
#[allow(clippy::too_many_arguments)]
fn grad_quadratic_pairs(
    spec: &KernelSpec,
    dim: usize,
    coords: &[f64],
    a: &[f64],
    b: &[f64],
    sa: &[usize],
    sb: &[usize],
    out: &mut [f64],
) {
    let inv_sig = 1.0 / spec.sigma;
    let inv_sig2 = inv_sig * inv_sig;
    for &m in sa {
        let xm = point(coords, dim, m);
        for &j in sb {
            if j == m {
                continue;
            }
            let xj = point(coords, dim, j);
            let r2: f64 = xm.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum();
            let t = r2.sqrt() * inv_sig;
            let mut pair = 0.0;
            for k in 0..dim {
                pair += a[m * dim + k] * b[j * dim + k];
            }
            let scale = spec.dgamma_over_t(t) * inv_sig2 * pair;
            for k in 0..dim {
                let step = scale * (xm[k] - xj[k]);
                out[m * dim + k] += step;
                out[j * dim + k] -= step;
            }
        }
    }
}

fn dir_deriv_raw(
    spec: &KernelSpec,
    dim: usize,
    coords: &[f64],
    p: &[f64],
    alpha: &[f64],
) -> Vec<f64> {
    let n = coords.len() / dim;
    let inv_sig = 1.0 / spec.sigma;
    let inv_sig2 = inv_sig * inv_sig;
    let mut out = vec![0.0; coords.len()];
    for i in 0..n {
        let xi = point(coords, dim, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = point(coords, dim, j);
            let mut r2 = 0.0;
            let mut ddot = 0.0;
            for k in 0..dim {
                let diff = xi[k] - xj[k];
                r2 += diff * diff;
                ddot += diff * (alpha[i * dim + k] - alpha[j * dim + k]);
            }
            let t = r2.sqrt() * inv_sig;
            let scale = spec.dgamma_over_t(t) * inv_sig2 * ddot;
            for k in 0..dim {
                out[i * dim + k] += scale * p[j * dim + k];
            }
        }
    }
    out
}

fn velocity_raw(
    spec: &KernelSpec,
    dim: usize,
    centers: &[f64],
    weights: &[f64],
    y: &[f64],
) -> Vec<f64> {
    let n = centers.len() / dim;
    let mut v = vec![0.0; dim];
    for i in 0..n {
        let s = spec.scalar(y, point(centers, dim, i));
        for k in 0..dim {
            v[k] += s * weights[i * dim + k];
        }
    }
    v
}

/// Full gradient of the quadratic form `q -> a^T K_q b` with both weight
/// vectors held fixed.
pub fn grad_quadratic(spec: &KernelSpec, q: &LandmarkState, a: &[f64], b: &[f64]) -> DVector<f64> {
    DVector::from_vec(grad_quadratic_raw(spec, q.dim(), q.coords(), a, b))
}

/// Directional derivative `(d/de K_{q + e*alpha} p)|_{e=0}`.
pub fn dir_deriv_kq(
    spec: &KernelSpec,
    q: &LandmarkState,
    p: &[f64],
    alpha: &[f64],
) -> DVector<f64> {
    DVector::from_vec(dir_deriv_raw(spec, q.dim(), q.coords(), p, alpha))
}

/// Hessian action `Hess_q(p^T K_q p) * alpha`, computed by a central
/// difference of [`grad_quadratic`] with step `1e-4 * sigma * (1 + |q|_inf)`.
pub fn hess_quadratic_action(
    spec: &KernelSpec,
    q: &LandmarkState,
    p: &[f64],
    alpha: &[f64],
) -> DVector<f64> {
    // Directional difference along the normalized direction keeps the
    // truncation error independent of |alpha| and the map exactly
    // homogeneous in alpha.
    let scale = alpha.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if scale == 0.0 {
        return DVector::zeros(q.nd());
    }
    let h = 1e-4 * spec.sigma * (1.0 + q.max_abs());
    let mut up = q.coords().to_vec();
    let mut down = q.coords().to_vec();
    for i in 0..up.len() {
        let step = h * (alpha[i] / scale);
        up[i] += step;
        down[i] -= step;
    }
    let gu = grad_quadratic_raw(spec, q.dim(), &up, p, p);
    let gd = grad_quadratic_raw(spec, q.dim(), &down, p, p);
    DVector::from_iterator(
        up.len(),
        gu.iter().zip(&gd).map(|(u, d)| scale * (u - d) / (2.0 * h)),
    )
}

/// Velocity field of weighted kernel atoms evaluated at an arbitrary point:
/// `v(y) = sum_i gamma(|y - x_i| / sigma) w_i`.
pub fn velocity_at(spec: &KernelSpec, q: &LandmarkState, weights: &[f64], y: &[f64]) -> Vec<f64> {
    velocity_raw(spec, q.dim(), q.coords(), weights, y)
}

// ---------------------------------------------------------------------------
// Per-group kernels
// ---------------------------------------------------------------------------

/// One kernel per landmark group; the joint kernel matrix is block diagonal
/// in the group partition.
#[derive(Debug, Clone)]
pub struct GroupKernels {
    specs: Vec<KernelSpec>,
}

impl GroupKernels {
    pub fn new(specs: Vec<KernelSpec>) -> Self {
        Self { specs }
    }

    /// The same kernel for every group of `q`.
    pub fn uniform(spec: KernelSpec, q: &LandmarkState) -> Self {
        Self {
            specs: vec![spec; q.groups().len()],
        }
    }

    pub fn specs(&self) -> &[KernelSpec] {
        &self.specs
    }

    pub fn spec(&self, group: usize) -> &KernelSpec {
        &self.specs[group]
    }

    pub fn check_state(&self, q: &LandmarkState) -> Result<()> {
        if self.specs.len() != q.groups().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} kernels for {} groups",
                self.specs.len(),
                q.groups().len()
            )));
        }
        Ok(())
    }

    fn gather(&self, q: &LandmarkState, group: usize, flat: &[f64]) -> Vec<f64> {
        let d = q.dim();
        let idx = &q.groups()[group].indices;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&flat[i * d..(i + 1) * d]);
        }
        out
    }

    fn scatter_add(&self, q: &LandmarkState, group: usize, local: &[f64], out: &mut DVector<f64>) {
        let d = q.dim();
        for (slot, &i) in q.groups()[group].indices.iter().enumerate() {
            for k in 0..d {
                out[i * d + k] += local[slot * d + k];
            }
        }
    }

    /// Block-diagonal product `K_q w`.
    pub fn apply(&self, q: &LandmarkState, w: &[f64]) -> DVector<f64> {
        let d = q.dim();
        let mut out = DVector::zeros(q.nd());
        for (g, spec) in self.specs.iter().enumerate() {
            let coords = self.gather(q, g, q.coords());
            let wg = self.gather(q, g, w);
            let ng = wg.len() / d;
            let mut local = vec![0.0; wg.len()];
            for i in 0..ng {
                for j in 0..ng {
                    let s = spec.scalar(point(&coords, d, i), point(&coords, d, j));
                    for k in 0..d {
                        local[i * d + k] += s * wg[j * d + k];
                    }
                }
            }
            self.scatter_add(q, g, &local, &mut out);
        }
        out
    }

    /// Quadratic form `a^T K_q b` under the block-diagonal kernel.
    pub fn quadratic(&self, q: &LandmarkState, a: &[f64], b: &[f64]) -> f64 {
        let kb = self.apply(q, b);
        a.iter().zip(kb.iter()).map(|(x, y)| x * y).sum()
    }

    /// Full gradient of `q -> a^T K_q b`, summed over group blocks.
    pub fn grad_quadratic(&self, q: &LandmarkState, a: &[f64], b: &[f64]) -> DVector<f64> {
        let d = q.dim();
        let mut out = DVector::zeros(q.nd());
        for (g, spec) in self.specs.iter().enumerate() {
            let coords = self.gather(q, g, q.coords());
            let ag = self.gather(q, g, a);
            let bg = self.gather(q, g, b);
            let local = grad_quadratic_raw(spec, d, &coords, &ag, &bg);
            self.scatter_add(q, g, &local, &mut out);
        }
        out
    }

    /// Directional derivative of `q -> K_q p` along `alpha`.
    pub fn dir_deriv(&self, q: &LandmarkState, p: &[f64], alpha: &[f64]) -> DVector<f64> {
        let d = q.dim();
        let mut out = DVector::zeros(q.nd());
        for (g, spec) in self.specs.iter().enumerate() {
            let coords = self.gather(q, g, q.coords());
            let pg = self.gather(q, g, p);
            let alg = self.gather(q, g, alpha);
            let local = dir_deriv_raw(spec, d, &coords, &pg, &alg);
            self.scatter_add(q, g, &local, &mut out);
        }
        out
    }

    /// Hessian action of `q -> p^T K_q p`, one central difference per group
    /// with each group's own kernel width in the step size.
    pub fn hess_quadratic_action(
        &self,
        q: &LandmarkState,
        p: &[f64],
        alpha: &[f64],
    ) -> DVector<f64> {
        let d = q.dim();
        let coord_scale = 1.0 + q.max_abs();
        let mut out = DVector::zeros(q.nd());
        for (g, spec) in self.specs.iter().enumerate() {
            let coords = self.gather(q, g, q.coords());
            let pg = self.gather(q, g, p);
            let alg = self.gather(q, g, alpha);
            // Normalized directional difference, exactly homogeneous in the
            // direction (see the single-group primitive).
            let dir_scale = alg.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            if dir_scale == 0.0 {
                continue;
            }
            let h = 1e-4 * spec.sigma * coord_scale;
            let mut up = coords.clone();
            let mut down = coords.clone();
            for i in 0..up.len() {
                let step = h * (alg[i] / dir_scale);
                up[i] += step;
                down[i] -= step;
            }
            let gu = grad_quadratic_raw(spec, d, &up, &pg, &pg);
            let gd = grad_quadratic_raw(spec, d, &down, &pg, &pg);
            let local: Vec<f64> = gu
                .iter()
                .zip(&gd)
                .map(|(u, dn)| dir_scale * (u - dn) / (2.0 * h))
                .collect();
            self.scatter_add(q, g, &local, &mut out);
        }
        out
    }

    /// Velocity field of group `g` (its kernel over its landmarks, weighted
    /// by the group slots of the flat vector `w`) at an arbitrary point.
    pub fn velocity(&self, q: &LandmarkState, group: usize, w: &[f64], y: &[f64]) -> Vec<f64> {
        let coords = self.gather(q, group, q.coords());
        let wg = self.gather(q, group, w);
        velocity_raw(&self.specs[group], q.dim(), &coords, &wg, y)
    }

    /// Scalar kernel matrix of one group over its own landmarks, in the
    /// group's slot order.
    pub fn group_scalar_matrix(&self, q: &LandmarkState, group: usize) -> DMatrix<f64> {
        let coords = self.gather(q, group, q.coords());
        assemble_scalar(&self.specs[group], q.dim(), &coords)
    }
}
