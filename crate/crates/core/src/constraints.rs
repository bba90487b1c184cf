//! Velocity constraints on landmark flows: provider blocks, the stacked
//! constraint matrix, the multiplier solve with its regularization ladder,
//! the kernel-orthogonal momentum projection, and the q-derivative actions
//! consumed by the geodesic and adjoint equations.
//!
//! Every block describes its rows as kernel-field atoms: row value =
//! sum over atoms of `coef . v_g(x_anchor)`, where `v_g` is group `g`'s
//! velocity field under the current control. Rows whose atoms are anchored
//! inside their own group are exactly the kinetic form `C_q K_q u` with `C`
//! the per-anchor coefficient stack; rows that evaluate one group's field at
//! another group's points (sliding) have no such momentum-space matrix and
//! are handled through the control-space form of the same projection.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::{grad_quadratic, GroupKernels};
use crate::shapes::{volume_gradient, LandmarkState};

/// One kernel-field evaluation inside a constraint row: the field of
/// `group`, evaluated at the position of landmark `anchor`, contracted with
/// `coef`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub group: usize,
    pub anchor: usize,
    pub coef: Vec<f64>,
}

/// A constraint provider contributing a block of rows.
pub trait ConstraintBlock: std::fmt::Debug {
    fn name(&self) -> &str;

    fn rows(&self, q: &LandmarkState) -> Result<usize>;

    /// Kernel-field atoms of each row at the current state.
    fn atoms(&self, q: &LandmarkState) -> Result<Vec<Vec<Atom>>>;

    /// Whether the momentum-space rows vary with q. Constant-row blocks get
    /// exact zero derivative actions without finite differences.
    fn rows_depend_on_q(&self) -> bool {
        true
    }

    /// Whether the atom coefficient vectors vary with q.
    fn coefs_depend_on_q(&self) -> bool {
        true
    }

    /// Coordinate indices the coefficients depend on; narrows the fallback
    /// finite differences in [`ConstraintSet::value_grad_q`].
    fn coef_support(&self, q: &LandmarkState) -> Result<Vec<usize>> {
        Ok((0..q.nd()).collect())
    }

    /// Analytic `alpha -> d/de C_{q+e*alpha}^T lambda`, if cheap. `None`
    /// falls back to central differences on the assembled rows.
    fn dct_lambda_action(
        &self,
        _q: &LandmarkState,
        _lambda: &[f64],
        _alpha: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        Ok(None)
    }

    /// Analytic gradient `grad_q (lambda^T C_q w)`, if cheap.
    fn dct_conjugate_action(
        &self,
        _q: &LandmarkState,
        _lambda: &[f64],
        _w: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        Ok(None)
    }

    /// Analytic coefficient part of `grad_q (w^T Phi_q u)` (field values
    /// held frozen), if cheap.
    fn coef_grad_part(
        &self,
        _kernels: &GroupKernels,
        _q: &LandmarkState,
        _w: &[f64],
        _u: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

/// Keeps the signed polygon area of one group constant:
/// `dVol_q . (group velocity) = 0`, a single kinetic row equal to the
/// volume gradient.
#[derive(Debug, Clone)]
pub struct VolumeConstraint {
    group: usize,
}

pub fn volume_constraint(group: usize) -> VolumeConstraint {
    VolumeConstraint { group }
}

impl VolumeConstraint {
    /// Action of the (constant, sparse) second derivative of the shoelace
    /// area on a flat vector: entry `x_i` is `(beta_{y,i+1} - beta_{y,i-1})/2`
    /// and entry `y_i` is `(beta_{x,i-1} - beta_{x,i+1})/2`, cyclically over
    /// the group.
    fn hessian_action(&self, q: &LandmarkState, beta: &[f64]) -> DVector<f64> {
        let idx = &q.groups()[self.group].indices;
        let m = idx.len();
        let mut out = DVector::zeros(q.nd());
        for w in 0..m {
            let i = idx[w];
            let next = idx[(w + 1) % m];
            let prev = idx[(w + m - 1) % m];
            out[2 * i] = 0.5 * (beta[2 * next + 1] - beta[2 * prev + 1]);
            out[2 * i + 1] = 0.5 * (beta[2 * prev] - beta[2 * next]);
        }
        out
    }
}

impl ConstraintBlock for VolumeConstraint {
    fn name(&self) -> &str {
        "volume"
    }

    fn rows(&self, q: &LandmarkState) -> Result<usize> {
        if q.groups().get(self.group).is_none() {
            return Err(Error::InvalidInput(format!(
                "volume constraint references missing group {}",
                self.group
            )));
        }
        Ok(1)
    }

    fn atoms(&self, q: &LandmarkState) -> Result<Vec<Vec<Atom>>> {
        let dvol = volume_gradient(q, self.group)?;
        let d = q.dim();
        let row = q.groups()[self.group]
            .indices
            .iter()
            .map(|&i| Atom {
                group: self.group,
                anchor: i,
                coef: dvol.as_slice()[i * d..(i + 1) * d].to_vec(),
            })
            .collect();
        Ok(vec![row])
    }

    fn dct_lambda_action(
        &self,
        q: &LandmarkState,
        lambda: &[f64],
        alpha: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        Ok(Some(self.hessian_action(q, alpha) * lambda[0]))
    }

    fn dct_conjugate_action(
        &self,
        q: &LandmarkState,
        lambda: &[f64],
        w: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        // The shoelace Hessian is symmetric, so the conjugate action equals
        // the direct one.
        Ok(Some(self.hessian_action(q, w) * lambda[0]))
    }

    fn coef_grad_part(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        w: &[f64],
        u: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        // Coefficients are the volume gradient; their q-derivative is the
        // constant Hessian acting on the frozen field values.
        let d = q.dim();
        let mut field = vec![0.0; q.nd()];
        for &i in &q.groups()[self.group].indices {
            let v = kernels.velocity(q, self.group, u, q.point(i));
            field[i * d..(i + 1) * d].copy_from_slice(&v);
        }
        Ok(Some(self.hessian_action(q, &field) * w[0]))
    }
}

/// Pins paired points of two differently-governed groups together by
/// equating their velocities componentwise: `d` rows per pair.
#[derive(Debug, Clone)]
pub struct StitchedConstraint {
    pairs: Vec<(usize, usize)>,
}

pub fn stitched_constraint(pairs: Vec<(usize, usize)>) -> StitchedConstraint {
    StitchedConstraint { pairs }
}

impl StitchedConstraint {
    fn validate(&self, q: &LandmarkState) -> Result<()> {
        for &(a, b) in &self.pairs {
            if a >= q.n() || b >= q.n() {
                return Err(Error::InvalidInput(format!(
                    "stitched pair ({}, {}) out of range for n = {}",
                    a,
                    b,
                    q.n()
                )));
            }
            if q.group_of(a) == q.group_of(b) {
                return Err(Error::InvalidInput(format!(
                    "stitched pair ({}, {}) lies in a single group; pairs must couple two groups",
                    a, b
                )));
            }
        }
        Ok(())
    }
}

impl ConstraintBlock for StitchedConstraint {
    fn name(&self) -> &str {
        "stitched"
    }

    fn rows(&self, q: &LandmarkState) -> Result<usize> {
        self.validate(q)?;
        Ok(q.dim() * self.pairs.len())
    }

    fn atoms(&self, q: &LandmarkState) -> Result<Vec<Vec<Atom>>> {
        self.validate(q)?;
        let d = q.dim();
        let mut rows = Vec::with_capacity(d * self.pairs.len());
        for &(a, b) in &self.pairs {
            for c in 0..d {
                let mut plus = vec![0.0; d];
                let mut minus = vec![0.0; d];
                plus[c] = 1.0;
                minus[c] = -1.0;
                rows.push(vec![
                    Atom {
                        group: q.group_of(a),
                        anchor: a,
                        coef: plus,
                    },
                    Atom {
                        group: q.group_of(b),
                        anchor: b,
                        coef: minus,
                    },
                ]);
            }
        }
        Ok(rows)
    }

    fn rows_depend_on_q(&self) -> bool {
        false
    }

    fn coefs_depend_on_q(&self) -> bool {
        false
    }
}

/// Lets one group's boundary slide along another: per segment of the
/// background polyline, the segment-normal component of the two endpoint-
/// averaged velocities must agree, while tangential motion stays free.
#[derive(Debug, Clone)]
pub struct SlidingConstraint {
    shape_group: usize,
    background_group: usize,
    segments: Vec<(usize, usize)>,
}

pub fn sliding_constraint(
    shape_group: usize,
    background_group: usize,
    segments: Vec<(usize, usize)>,
) -> SlidingConstraint {
    SlidingConstraint {
        shape_group,
        background_group,
        segments,
    }
}

impl SlidingConstraint {
    fn validate(&self, q: &LandmarkState) -> Result<()> {
        if q.dim() != 2 {
            return Err(Error::UnsupportedDimension {
                op: "sliding_constraint",
                required: 2,
                got: q.dim(),
            });
        }
        if self.shape_group >= q.groups().len() || self.background_group >= q.groups().len() {
            return Err(Error::InvalidInput(
                "sliding constraint references a missing group".to_string(),
            ));
        }
        if self.shape_group == self.background_group {
            return Err(Error::InvalidInput(
                "sliding constraint needs distinct shape and background groups".to_string(),
            ));
        }
        for &(lo, hi) in &self.segments {
            if lo == hi
                || lo >= q.n()
                || hi >= q.n()
                || q.group_of(lo) != self.background_group
                || q.group_of(hi) != self.background_group
            {
                return Err(Error::InvalidInput(format!(
                    "sliding segment ({}, {}) must join two distinct background landmarks",
                    lo, hi
                )));
            }
        }
        Ok(())
    }

    /// Degeneracy scale: bounding-box diagonal of the state (a constant
    /// factor of the diameter, cheap to evaluate in hot loops).
    fn scale(q: &LandmarkState) -> f64 {
        let d = q.dim();
        let mut span2 = 0.0;
        for k in 0..d {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..q.n() {
                let c = q.point(i)[k];
                lo = lo.min(c);
                hi = hi.max(c);
            }
            span2 += (hi - lo) * (hi - lo);
        }
        span2.sqrt()
    }
}

impl ConstraintBlock for SlidingConstraint {
    fn name(&self) -> &str {
        "sliding"
    }

    fn rows(&self, q: &LandmarkState) -> Result<usize> {
        self.validate(q)?;
        Ok(self.segments.len())
    }

    fn atoms(&self, q: &LandmarkState) -> Result<Vec<Vec<Atom>>> {
        self.validate(q)?;
        let scale = Self::scale(q);
        let mut rows = Vec::with_capacity(self.segments.len());
        for &(lo, hi) in &self.segments {
            let a = q.point(lo);
            let b = q.point(hi);
            let tx = b[0] - a[0];
            let ty = b[1] - a[1];
            let len = (tx * tx + ty * ty).sqrt();
            if len < 1e-12 * scale {
                return Err(Error::DegenerateGeometry(format!(
                    "sliding segment ({}, {}) has length {:.3e}",
                    lo, hi, len
                )));
            }
            // Unit normal of the segment; each field is averaged over the
            // two endpoints, hence the half weights.
            let nu = [-ty / len, tx / len];
            let half_plus = vec![0.5 * nu[0], 0.5 * nu[1]];
            let half_minus = vec![-0.5 * nu[0], -0.5 * nu[1]];
            rows.push(vec![
                Atom {
                    group: self.shape_group,
                    anchor: lo,
                    coef: half_plus.clone(),
                },
                Atom {
                    group: self.shape_group,
                    anchor: hi,
                    coef: half_plus,
                },
                Atom {
                    group: self.background_group,
                    anchor: lo,
                    coef: half_minus.clone(),
                },
                Atom {
                    group: self.background_group,
                    anchor: hi,
                    coef: half_minus,
                },
            ]);
        }
        Ok(rows)
    }

    fn coef_support(&self, q: &LandmarkState) -> Result<Vec<usize>> {
        // Normals depend only on the segment endpoint coordinates.
        let d = q.dim();
        let mut support: Vec<usize> = self
            .segments
            .iter()
            .flat_map(|&(lo, hi)| [lo, hi])
            .flat_map(|i| (0..d).map(move |c| i * d + c))
            .collect();
        support.sort_unstable();
        support.dedup();
        Ok(support)
    }

    fn coef_grad_part(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        w: &[f64],
        u: &[f64],
    ) -> Result<Option<DVector<f64>>> {
        self.validate(q)?;
        let mut out = DVector::zeros(q.nd());
        for (r, &(lo, hi)) in self.segments.iter().enumerate() {
            if w[r] == 0.0 {
                continue;
            }
            let a = q.point(lo);
            let b = q.point(hi);
            let e = [b[0] - a[0], b[1] - a[1]];
            let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
            if len < 1e-12 * Self::scale(q) {
                return Err(Error::DegenerateGeometry(format!(
                    "sliding segment ({}, {}) has length {:.3e}",
                    lo, hi, len
                )));
            }
            let ehat = [e[0] / len, e[1] / len];
            let nu = [-ehat[1], ehat[0]];
            // Frozen endpoint-averaged field difference the row contracts
            // against its normal.
            let vs_lo = kernels.velocity(q, self.shape_group, u, a);
            let vs_hi = kernels.velocity(q, self.shape_group, u, b);
            let vb_lo = kernels.velocity(q, self.background_group, u, a);
            let vb_hi = kernels.velocity(q, self.background_group, u, b);
            let f = [
                0.5 * (vs_lo[0] + vs_hi[0] - vb_lo[0] - vb_hi[0]),
                0.5 * (vs_lo[1] + vs_hi[1] - vb_lo[1] - vb_hi[1]),
            ];
            // nu = R e / |e| with R the quarter turn, so
            // grad_e (f . nu) = (R^T f - (f . nu) e_hat) / |e|.
            let fnu = f[0] * nu[0] + f[1] * nu[1];
            let g = [
                (f[1] - fnu * ehat[0]) * w[r] / len,
                (-f[0] - fnu * ehat[1]) * w[r] / len,
            ];
            let d = q.dim();
            out[hi * d] += g[0];
            out[hi * d + 1] += g[1];
            out[lo * d] -= g[0];
            out[lo * d + 1] -= g[1];
        }
        Ok(Some(out))
    }
}

/// Pins one velocity component of a single landmark to zero; the smallest
/// useful kinetic block, handy for toy problems and solver cross-checks.
#[derive(Debug, Clone)]
pub struct FixedDirectionConstraint {
    landmark: usize,
    direction: Vec<f64>,
}

pub fn fixed_direction_constraint(
    landmark: usize,
    direction: Vec<f64>,
) -> FixedDirectionConstraint {
    FixedDirectionConstraint {
        landmark,
        direction,
    }
}

impl ConstraintBlock for FixedDirectionConstraint {
    fn name(&self) -> &str {
        "fixed-direction"
    }

    fn rows(&self, q: &LandmarkState) -> Result<usize> {
        if self.landmark >= q.n() || self.direction.len() != q.dim() {
            return Err(Error::InvalidInput(
                "fixed-direction constraint does not fit the state".to_string(),
            ));
        }
        if self.direction.iter().any(|c| !c.is_finite()) || self.direction.iter().all(|&c| c == 0.0)
        {
            return Err(Error::InvalidInput(
                "fixed-direction vector must be finite and nonzero".to_string(),
            ));
        }
        Ok(1)
    }

    fn atoms(&self, q: &LandmarkState) -> Result<Vec<Vec<Atom>>> {
        self.rows(q)?;
        Ok(vec![vec![Atom {
            group: q.group_of(self.landmark),
            anchor: self.landmark,
            coef: self.direction.clone(),
        }]])
    }

    fn rows_depend_on_q(&self) -> bool {
        false
    }

    fn coefs_depend_on_q(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// Constraint set
// ---------------------------------------------------------------------------

/// Result of one multiplier solve, with the regularization actually used
/// and the conditioning of the Gram matrix it factorized.
#[derive(Debug, Clone)]
pub struct MultiplierSolve {
    pub lambda: DVector<f64>,
    /// Projected momentum `pi_q p`.
    pub projected: DVector<f64>,
    /// Velocity of the projected momentum, `K_q pi_q p`.
    pub velocity: DVector<f64>,
    /// `|(Gram + eps I) lambda - rhs|`.
    pub residual: f64,
    pub eps: f64,
    pub cond_estimate: f64,
}

/// An ordered list of constraint blocks acting on one state layout.
#[derive(Debug, Default)]
pub struct ConstraintSet {
    blocks: Vec<Box<dyn ConstraintBlock>>,
}

impl ConstraintSet {
    pub fn empty() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn new(blocks: Vec<Box<dyn ConstraintBlock>>) -> Self {
        Self { blocks }
    }

    pub fn push(&mut self, block: Box<dyn ConstraintBlock>) {
        self.blocks.push(block);
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Box<dyn ConstraintBlock>] {
        &self.blocks
    }

    pub fn rows(&self, q: &LandmarkState) -> Result<usize> {
        self.blocks.iter().map(|b| b.rows(q)).sum()
    }

    /// All rows' atoms, block order preserved.
    pub fn atoms(&self, q: &LandmarkState) -> Result<Vec<Vec<Atom>>> {
        let mut rows = Vec::new();
        for block in &self.blocks {
            rows.extend(block.atoms(q)?);
        }
        Ok(rows)
    }

    /// True when every atom is anchored inside its own group, i.e. every row
    /// is exactly the kinetic form `(C_q K_q u)_r`.
    pub fn is_kinetic(&self, q: &LandmarkState) -> Result<bool> {
        Ok(self
            .atoms(q)?
            .iter()
            .flatten()
            .all(|a| q.group_of(a.anchor) == a.group))
    }

    /// The stacked momentum-space coefficient matrix `C_q` (k x nd): each
    /// atom contributes its coefficient at its anchor's slots. For kinetic
    /// sets the constraint reads `C_q K_q u = 0`; cross-group rows merge to
    /// zero here and are meaningful only through their field values.
    pub fn constraint_matrix(&self, q: &LandmarkState) -> Result<DMatrix<f64>> {
        let rows = self.atoms(q)?;
        Ok(merge_rows(q, &rows))
    }

    /// Honest row values on a control: `Phi_q(u)_r = sum of atom fields`.
    pub fn value(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        u: &[f64],
    ) -> Result<DVector<f64>> {
        let rows = self.atoms(q)?;
        let mut out = DVector::zeros(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let mut acc = 0.0;
            for atom in row {
                let v = kernels.velocity(q, atom.group, u, q.point(atom.anchor));
                acc += atom.coef.iter().zip(&v).map(|(c, f)| c * f).sum::<f64>();
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// The value map as a dense k x nd matrix acting on controls.
    pub fn value_matrix(&self, kernels: &GroupKernels, q: &LandmarkState) -> Result<DMatrix<f64>> {
        let rows = self.atoms(q)?;
        let d = q.dim();
        let mut phi = DMatrix::zeros(rows.len(), q.nd());
        for (r, row) in rows.iter().enumerate() {
            for atom in row {
                let spec = kernels.spec(atom.group);
                let anchor = q.point(atom.anchor);
                for &i in &q.groups()[atom.group].indices {
                    let s = spec.scalar(anchor, q.point(i));
                    for c in 0..d {
                        phi[(r, i * d + c)] += s * atom.coef[c];
                    }
                }
            }
        }
        Ok(phi)
    }

    /// Control-space representer of row functionals: the `r` with
    /// `<r, u>_{K_q} = w^T Phi_q u` for all `u`. Kinetic sets give
    /// `r = C_q^T w` directly; cross-group sets solve `K_q r = Phi_q^T w`
    /// per group.
    pub fn representer(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        w: &[f64],
    ) -> Result<DVector<f64>> {
        if self.is_kinetic(q)? {
            let rows = self.atoms(q)?;
            let sparse = sparse_rows(q, &rows);
            let mut out = DVector::zeros(q.nd());
            for (r, row) in sparse.iter().enumerate() {
                for &(idx, val) in row {
                    out[idx] += val * w[r];
                }
            }
            Ok(out)
        } else {
            let phi = self.value_matrix(kernels, q)?;
            let rhs = phi.transpose() * DVector::from_column_slice(w);
            solve_kernel_systems(kernels, q, &rhs)
        }
    }

    /// Solves for the multipliers of `p` and assembles the projection. With
    /// `reg = None` the regularization ladder starts at zero and escalates
    /// on conditioning failures; `Some(eps)` forces a fixed regularization.
    pub fn solve_lambda(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        p: &[f64],
        reg: Option<f64>,
    ) -> Result<MultiplierSolve> {
        kernels.check_state(q)?;
        let k = self.rows(q)?;
        if k == 0 {
            return Ok(MultiplierSolve {
                lambda: DVector::zeros(0),
                projected: DVector::from_column_slice(p),
                velocity: kernels.apply(q, p),
                residual: 0.0,
                eps: 0.0,
                cond_estimate: 1.0,
            });
        }
        let rows = self.atoms(q)?;
        if self.is_kinetic(q)? {
            self.solve_kinetic(kernels, q, p, reg, &rows)
        } else {
            self.solve_general(kernels, q, p, reg, &rows)
        }
    }

    /// Kinetic path: lambda from `(C K C^T + eps I) lambda = C K p`, then
    /// `pi p = p - C^T lambda`.
    fn solve_kinetic(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        p: &[f64],
        reg: Option<f64>,
        rows: &[Vec<Atom>],
    ) -> Result<MultiplierSolve> {
        let k = rows.len();
        let d = q.dim();
        let sparse = sparse_rows(q, rows);
        let scalids: Vec<DMatrix<f64>> = (0..q.groups().len())
            .map(|g| kernels.group_scalar_matrix(q, g))
            .collect();

        // K C^T one sparse row at a time, using the per-group scalar blocks.
        let mut kct = DMatrix::zeros(q.nd(), k);
        for (r, row) in sparse.iter().enumerate() {
            for &(idx, val) in row {
                let (i, c) = (idx / d, idx % d);
                let g = q.group_of(i);
                let islot = q.slot_of(i);
                let sg = &scalids[g];
                for (jslot, &j) in q.groups()[g].indices.iter().enumerate() {
                    kct[(j * d + c, r)] += sg[(jslot, islot)] * val;
                }
            }
        }
        let mut gram = DMatrix::zeros(k, k);
        for (r, row) in sparse.iter().enumerate() {
            for &(idx, val) in row {
                for s in 0..k {
                    gram[(r, s)] += val * kct[(idx, s)];
                }
            }
        }
        let kp = kernels.apply(q, p);
        let rhs = DVector::from_iterator(
            k,
            sparse
                .iter()
                .map(|row| row.iter().map(|&(idx, val)| val * kp[idx]).sum()),
        );

        let (lambda, eps, cond_estimate) = spd_solve_ladder(&gram, &rhs, reg)?;
        let residual = (&gram * &lambda + &lambda * eps - &rhs).norm();
        let mut projected = DVector::from_column_slice(p);
        for (r, row) in sparse.iter().enumerate() {
            for &(idx, val) in row {
                projected[idx] -= val * lambda[r];
            }
        }
        let velocity = &kp - &kct * &lambda;
        Ok(MultiplierSolve {
            lambda,
            projected,
            velocity,
            residual,
            eps,
            cond_estimate,
        })
    }

    /// Cross-group path: the same K-orthogonal projection expressed through
    /// the value map, `lambda` from `(Phi K^{-1} Phi^T + eps I) lambda =
    /// Phi p`, then `pi p = p - K^{-1} Phi^T lambda`. On kinetic rows
    /// (`Phi = C K`) this reduces exactly to the kinetic path.
    fn solve_general(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        p: &[f64],
        reg: Option<f64>,
        rows: &[Vec<Atom>],
    ) -> Result<MultiplierSolve> {
        let _ = rows;
        let phi = self.value_matrix(kernels, q)?;
        let lifted = solve_kernel_systems_matrix(kernels, q, &phi.transpose())?;
        let gram = &phi * &lifted;
        // Symmetrize away the asymmetry of the two solve directions.
        let gram = (&gram + gram.transpose()) * 0.5;
        let rhs = &phi * DVector::from_column_slice(p);
        let (lambda, eps, cond_estimate) = spd_solve_ladder(&gram, &rhs, reg)?;
        let residual = (&gram * &lambda + &lambda * eps - &rhs).norm();
        let projected = DVector::from_column_slice(p) - &lifted * &lambda;
        let velocity = kernels.apply(q, projected.as_slice());
        Ok(MultiplierSolve {
            lambda,
            projected,
            velocity,
            residual,
            eps,
            cond_estimate,
        })
    }

    /// `pi_q p`, the K_q-orthogonal projection of `p` onto momenta whose
    /// velocities satisfy all rows.
    pub fn project_momentum(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        p: &[f64],
    ) -> Result<DVector<f64>> {
        Ok(self.solve_lambda(kernels, q, p, None)?.projected)
    }

    /// Directional derivative `alpha -> d/de C_{q+e*alpha}^T lambda`.
    /// Analytic per block where provided, else central differences with
    /// step `1e-4 * (1 + |q|_inf)` on the assembled rows.
    pub fn dct_lambda_action(
        &self,
        q: &LandmarkState,
        lambda: &[f64],
        alpha: &[f64],
    ) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(q.nd());
        let mut offset = 0;
        for block in &self.blocks {
            let k_b = block.rows(q)?;
            let lam = &lambda[offset..offset + k_b];
            offset += k_b;
            if !block.rows_depend_on_q() || lam.iter().all(|&l| l == 0.0) {
                continue;
            }
            if let Some(v) = block.dct_lambda_action(q, lam, alpha)? {
                out += v;
                continue;
            }
            let h = 1e-4 * (1.0 + q.max_abs());
            let shifted = |s: f64| -> Result<DVector<f64>> {
                let coords: Vec<f64> = q
                    .coords()
                    .iter()
                    .zip(alpha)
                    .map(|(c, a)| c + s * a)
                    .collect();
                let qs = q.with_coords(coords)?;
                let c = merge_rows(&qs, &block.atoms(&qs)?);
                Ok(c.transpose() * DVector::from_column_slice(lam))
            };
            out += (shifted(h)? - shifted(-h)?) / (2.0 * h);
        }
        Ok(out)
    }

    /// Gradient `grad_q (lambda^T C_q w)` with both vectors fixed; the
    /// adjoint-side counterpart of [`Self::dct_lambda_action`].
    pub fn dct_conjugate_action(
        &self,
        q: &LandmarkState,
        lambda: &[f64],
        w: &[f64],
    ) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(q.nd());
        let mut offset = 0;
        for block in &self.blocks {
            let k_b = block.rows(q)?;
            let lam = &lambda[offset..offset + k_b];
            offset += k_b;
            if !block.rows_depend_on_q() || lam.iter().all(|&l| l == 0.0) {
                continue;
            }
            if let Some(v) = block.dct_conjugate_action(q, lam, w)? {
                out += v;
                continue;
            }
            // Coordinate-wise central differences of the scalar
            // lambda^T C_q w; only correctness matters here, blocks on hot
            // paths provide the analytic form.
            let h = 1e-4 * (1.0 + q.max_abs());
            let scalar_at = |coords: Vec<f64>| -> Result<f64> {
                let qs = q.with_coords(coords)?;
                let c = merge_rows(&qs, &block.atoms(&qs)?);
                let cw = c * DVector::from_column_slice(w);
                Ok(lam.iter().zip(cw.iter()).map(|(l, v)| l * v).sum())
            };
            for i in 0..q.nd() {
                let mut up = q.coords().to_vec();
                let mut down = q.coords().to_vec();
                up[i] += h;
                down[i] -= h;
                out[i] += (scalar_at(up)? - scalar_at(down)?) / (2.0 * h);
            }
        }
        Ok(out)
    }

    /// Gradient `grad_q (w^T Phi_q(u))` holding `w` and `u` fixed: the
    /// geometric part differentiates anchor positions and kernel arguments
    /// analytically; coefficient variation (volume gradients, sliding
    /// normals) is added per block, by closed form where provided and by
    /// central differences with frozen field values otherwise.
    pub fn value_grad_q(
        &self,
        kernels: &GroupKernels,
        q: &LandmarkState,
        w: &[f64],
        u: &[f64],
    ) -> Result<DVector<f64>> {
        kernels.check_state(q)?;
        let d = q.dim();
        let rows = self.atoms(q)?;
        let mut out = DVector::zeros(q.nd());

        // Geometric part: for each group, the value restricted to its atoms
        // is the full-configuration quadratic form of that group's kernel
        // between the anchored weights and the group-masked control.
        for g in 0..q.groups().len() {
            let mut anchored = vec![0.0; q.nd()];
            let mut any = false;
            for (r, row) in rows.iter().enumerate() {
                for atom in row.iter().filter(|a| a.group == g) {
                    for c in 0..d {
                        anchored[atom.anchor * d + c] += w[r] * atom.coef[c];
                    }
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let mut masked = vec![0.0; q.nd()];
            for &i in &q.groups()[g].indices {
                masked[i * d..(i + 1) * d].copy_from_slice(&u[i * d..(i + 1) * d]);
            }
            out += grad_quadratic(kernels.spec(g), q, &anchored, &masked);
        }

        // Coefficient part.
        let mut offset = 0;
        for block in &self.blocks {
            let k_b = block.rows(q)?;
            let wb = &w[offset..offset + k_b];
            offset += k_b;
            if !block.coefs_depend_on_q() || wb.iter().all(|&x| x == 0.0) {
                continue;
            }
            if let Some(v) = block.coef_grad_part(kernels, q, wb, u)? {
                out += v;
                continue;
            }
            // Frozen field values per atom, then differences over the
            // coefficients alone.
            let base = block.atoms(q)?;
            let fields: Vec<Vec<Vec<f64>>> = base
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|a| kernels.velocity(q, a.group, u, q.point(a.anchor)))
                        .collect()
                })
                .collect();
            let contracted = |rows: &[Vec<Atom>]| -> f64 {
                rows.iter()
                    .enumerate()
                    .map(|(r, row)| {
                        wb[r]
                            * row
                                .iter()
                                .zip(&fields[r])
                                .map(|(a, f)| a.coef.iter().zip(f).map(|(c, v)| c * v).sum::<f64>())
                                .sum::<f64>()
                    })
                    .sum()
            };
            let h = 1e-4 * (1.0 + q.max_abs());
            for i in block.coef_support(q)? {
                let mut up = q.coords().to_vec();
                let mut down = q.coords().to_vec();
                up[i] += h;
                down[i] -= h;
                let su = contracted(&block.atoms(&q.with_coords(up)?)?);
                let sd = contracted(&block.atoms(&q.with_coords(down)?)?);
                out[i] += (su - sd) / (2.0 * h);
            }
        }
        Ok(out)
    }
}

/// Merges atom rows into the dense momentum-space matrix (coefficients at
/// anchor slots).
fn merge_rows(q: &LandmarkState, rows: &[Vec<Atom>]) -> DMatrix<f64> {
    let d = q.dim();
    let mut c = DMatrix::zeros(rows.len(), q.nd());
    for (r, row) in rows.iter().enumerate() {
        for atom in row {
            for k in 0..d {
                c[(r, atom.anchor * d + k)] += atom.coef[k];
            }
        }
    }
    c
}

/// Sparse form of [`merge_rows`]: per row, (coordinate index, value) pairs.
fn sparse_rows(q: &LandmarkState, rows: &[Vec<Atom>]) -> Vec<Vec<(usize, f64)>> {
    let d = q.dim();
    rows.iter()
        .map(|row| {
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(row.len() * d);
            for atom in row {
                for k in 0..d {
                    if atom.coef[k] != 0.0 {
                        entries.push((atom.anchor * d + k, atom.coef[k]));
                    }
                }
            }
            entries.sort_unstable_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (idx, val) in entries {
                match merged.last_mut() {
                    Some(last) if last.0 == idx => last.1 += val,
                    _ => merged.push((idx, val)),
                }
            }
            merged
        })
        .collect()
}

/// Cholesky with the escalation ladder: eps = 0 first, then
/// {1e-12, 1e-10, 1e-8} * trace/k on factorization failure or a condition
/// estimate above 1e12.
fn spd_solve_ladder(
    gram: &DMatrix<f64>,
    rhs: &DVector<f64>,
    forced: Option<f64>,
) -> Result<(DVector<f64>, f64, f64)> {
    let k = gram.nrows();
    let scale = {
        let t = gram.trace() / k as f64;
        if t > 0.0 && t.is_finite() {
            t
        } else {
            1.0
        }
    };
    let ladder: Vec<f64> = match forced {
        Some(eps) => vec![eps],
        None => vec![0.0, 1e-12 * scale, 1e-10 * scale, 1e-8 * scale],
    };
    let mut last_cond = f64::INFINITY;
    let mut last_eps = 0.0;
    for (rung, &eps) in ladder.iter().enumerate() {
        let mut m = gram.clone();
        for i in 0..k {
            m[(i, i)] += eps;
        }
        last_eps = eps;
        if let Some(chol) = Cholesky::<f64, Dyn>::new(m) {
            let diag: Vec<f64> = (0..k).map(|i| chol.l_dirty()[(i, i)]).collect();
            let dmax = diag.iter().cloned().fold(0.0f64, f64::max);
            let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            let cond = (dmax / dmin).powi(2);
            last_cond = cond;
            if cond <= 1e12 || rung + 1 == ladder.len() {
                return Ok((chol.solve(rhs), eps, cond));
            }
        }
    }
    Err(Error::SingularConstraint {
        cond: last_cond,
        eps: last_eps,
    })
}

/// Solves `K_q x = rhs` per group block (scalar Cholesky applied channel
/// wise), for a single right-hand side.
fn solve_kernel_systems(
    kernels: &GroupKernels,
    q: &LandmarkState,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = solve_kernel_systems_matrix(
        kernels,
        q,
        &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()),
    )?;
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// Matrix right-hand-side version of [`solve_kernel_systems`].
fn solve_kernel_systems_matrix(
    kernels: &GroupKernels,
    q: &LandmarkState,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = q.dim();
    let cols = rhs.ncols();
    let mut out = DMatrix::zeros(rhs.nrows(), cols);
    for (g, group) in q.groups().iter().enumerate() {
        let ng = group.indices.len();
        let sg = kernels.group_scalar_matrix(q, g);
        let chol = factor_kernel_block(sg)?;
        // One scalar solve per column and channel.
        let mut local = DMatrix::zeros(ng, cols * d);
        for (slot, &i) in group.indices.iter().enumerate() {
            for col in 0..cols {
                for c in 0..d {
                    local[(slot, col * d + c)] = rhs[(i * d + c, col)];
                }
            }
        }
        let solved = chol.solve(&local);
        for (slot, &i) in group.indices.iter().enumerate() {
            for col in 0..cols {
                for c in 0..d {
                    out[(i * d + c, col)] = solved[(slot, col * d + c)];
                }
            }
        }
    }
    Ok(out)
}

/// Factors a group's scalar kernel matrix, escalating a diagonal jitter for
/// nearly coincident landmarks.
fn factor_kernel_block(sg: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = sg.nrows();
    for &eps in &[0.0, 1e-12, 1e-10, 1e-8] {
        let mut m = sg.clone();
        for i in 0..n {
            m[(i, i)] += eps;
        }
        if let Some(chol) = Cholesky::<f64, Dyn>::new(m) {
            return Ok(chol);
        }
    }
    Err(Error::SingularConstraint {
        cond: f64::INFINITY,
        eps: 1e-8,
    })
}
