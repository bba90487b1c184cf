//! Landmark shape states, shape generators, polygonal volume, and the
//! data-attachment term with its gradient.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A named block of landmark indices inside a [`LandmarkState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    pub indices: Vec<usize>,
}

/// An ordered list of `n` points in `R^d`, partitioned into named groups.
///
/// Coordinates are stored flat and landmark-major (`coords[i*d..(i+1)*d]` is
/// point `i`). Single shapes live in one group; multishape states put each
/// shape and each background copy in its own group so that every group can
/// carry its own kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkState {
    dim: usize,
    coords: Vec<f64>,
    groups: Vec<Group>,
    group_of: Vec<usize>,
    slot_of: Vec<usize>,
}

impl LandmarkState {
    /// Single-group state named `shape`.
    pub fn single(dim: usize, coords: Vec<f64>) -> Result<Self> {
        let n = validate_coords(dim, &coords)?;
        let groups = vec![Group {
            name: "shape".to_string(),
            indices: (0..n).collect(),
        }];
        Self::with_groups(dim, coords, groups)
    }

    /// State with an explicit group partition. Groups must disjointly cover
    /// `0..n`.
    pub fn with_groups(dim: usize, coords: Vec<f64>, groups: Vec<Group>) -> Result<Self> {
        let n = validate_coords(dim, &coords)?;
        let mut group_of = vec![usize::MAX; n];
        let mut slot_of = vec![usize::MAX; n];
        for (g, group) in groups.iter().enumerate() {
            for (slot, &i) in group.indices.iter().enumerate() {
                if i >= n {
                    return Err(Error::InvalidInput(format!(
                        "group {:?} references landmark {} but n = {}",
                        group.name, i, n
                    )));
                }
                if group_of[i] != usize::MAX {
                    return Err(Error::InvalidInput(format!(
                        "landmark {} appears in two groups",
                        i
                    )));
                }
                group_of[i] = g;
                slot_of[i] = slot;
            }
        }
        if group_of.contains(&usize::MAX) {
            return Err(Error::InvalidInput(
                "groups do not cover all landmarks".to_string(),
            ));
        }
        Ok(Self {
            dim,
            coords,
            groups,
            group_of,
            slot_of,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.coords.len() / self.dim
    }

    /// Total coordinate count `n*d`.
    pub fn nd(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Index of the group containing landmark `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    /// Position of landmark `i` within its group's index list.
    pub fn slot_of(&self, i: usize) -> usize {
        self.slot_of[i]
    }

    pub fn group_named(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Same groups, new coordinates.
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != self.coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coordinates, got {}",
                self.coords.len(),
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".to_string()));
        }
        let mut out = self.clone();
        out.coords = coords;
        Ok(out)
    }

    /// Largest coordinate magnitude (blow-up and step-size scaling).
    pub fn max_abs(&self) -> f64 {
        self.coords.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Largest pairwise landmark distance.
    pub fn diameter(&self) -> f64 {
        let n = self.n();
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(dist(self.point(i), self.point(j)));
            }
        }
        best
    }

    /// Checks that `other` shares `n`, `d`, and the group partition.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim
            || self.coords.len() != other.coords.len()
            || self.groups != other.groups
        {
            return Err(Error::ShapeMismatch(
                "states differ in n, d, or group structure".to_string(),
            ));
        }
        Ok(())
    }
}

fn validate_coords(dim: usize, coords: &[f64]) -> Result<usize> {
    if dim == 0 || coords.is_empty() || !coords.len().is_multiple_of(dim) {
        return Err(Error::InvalidInput(format!(
            "coordinate buffer of length {} is not a positive multiple of d = {}",
            coords.len(),
            dim
        )));
    }
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".to_string()));
    }
    Ok(coords.len() / dim)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Shape generators
// ---------------------------------------------------------------------------

/// Circle of radius `radius` around `center`, sampled counter-clockwise at
/// `n` uniform angles starting from angle 0.
pub fn circle_shape(n: usize, center: [f64; 2], radius: f64) -> Result<LandmarkState> {
    closed_curve(n, |theta| {
        [
            center[0] + radius * theta.cos(),
            center[1] + radius * theta.sin(),
        ]
    })
}

/// Axis-aligned ellipse with semi-axes `a`, `b`, sampled counter-clockwise.
pub fn ellipse_shape(n: usize, center: [f64; 2], a: f64, b: f64) -> Result<LandmarkState> {
    closed_curve(n, |theta| {
        [center[0] + a * theta.cos(), center[1] + b * theta.sin()]
    })
}

/// Flower curve `r(theta) = r0 + amplitude*cos(petals*theta)`; with
/// `amplitude = 0` this is exactly `circle_shape(n, center, r0)`.
pub fn flower_shape(
    n: usize,
    center: [f64; 2],
    r0: f64,
    amplitude: f64,
    petals: usize,
) -> Result<LandmarkState> {
    closed_curve(n, |theta| {
        let r = r0 + amplitude * (petals as f64 * theta).cos();
        [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
    })
}

fn closed_curve(n: usize, f: impl Fn(f64) -> [f64; 2]) -> Result<LandmarkState> {
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "closed curves need n >= 3, got {}",
            n
        )));
    }
    let mut coords = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let p = f(theta);
        coords.push(p[0]);
        coords.push(p[1]);
    }
    LandmarkState::single(2, coords)
}

// ---------------------------------------------------------------------------
// Polygon volume
// ---------------------------------------------------------------------------

/// Signed area of the group's points read as a closed polygon in listed
/// order (shoelace formula). Positive for counter-clockwise orientation.
pub fn polygon_volume(q: &LandmarkState, group: usize) -> Result<f64> {
    let idx = polygon_indices(q, group)?;
    let mut twice_area = 0.0;
    for w in 0..idx.len() {
        let a = q.point(idx[w]);
        let b = q.point(idx[(w + 1) % idx.len()]);
        twice_area += a[0] * b[1] - a[1] * b[0];
    }
    Ok(0.5 * twice_area)
}

/// Gradient of [`polygon_volume`] with respect to all `n*d` coordinates;
/// zero outside the group. Entry for vertex `i` is
/// `(y_{i+1} - y_{i-1}, x_{i-1} - x_{i+1}) / 2` with cyclic neighbours.
pub fn volume_gradient(q: &LandmarkState, group: usize) -> Result<DVector<f64>> {
    let idx = polygon_indices(q, group)?;
    let m = idx.len();
    let mut grad = DVector::zeros(q.nd());
    for w in 0..m {
        let prev = q.point(idx[(w + m - 1) % m]);
        let next = q.point(idx[(w + 1) % m]);
        grad[2 * idx[w]] = 0.5 * (next[1] - prev[1]);
        grad[2 * idx[w] + 1] = 0.5 * (prev[0] - next[0]);
    }
    Ok(grad)
}

fn polygon_indices(q: &LandmarkState, group: usize) -> Result<&[usize]> {
    if q.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            op: "polygon_volume",
            required: 2,
            got: q.dim(),
        });
    }
    let g = q
        .groups()
        .get(group)
        .ok_or_else(|| Error::InvalidInput(format!("no group with index {}", group)))?;
    if g.indices.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "group {:?} has {} points, polygon needs >= 3",
            g.name,
            g.indices.len()
        )));
    }
    Ok(&g.indices)
}

// ---------------------------------------------------------------------------
// Data attachment
// ---------------------------------------------------------------------------

/// Mean squared landmark mismatch `(c/n) * sum_i |x_i - target_i|^2`.
pub fn attachment(q: &LandmarkState, target: &LandmarkState, c: f64) -> Result<f64> {
    q.check_compatible(target)?;
    let n = q.n() as f64;
    let sum: f64 = q
        .coords()
        .iter()
        .zip(target.coords())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(c / n * sum)
}

/// Gradient of [`attachment`]: `(2c/n) * (x_i - target_i)` per coordinate.
pub fn attachment_gradient(
    q: &LandmarkState,
    target: &LandmarkState,
    c: f64,
) -> Result<DVector<f64>> {
    q.check_compatible(target)?;
    let n = q.n() as f64;
    let grad = DVector::from_iterator(
        q.nd(),
        q.coords()
            .iter()
            .zip(target.coords())
            .map(|(a, b)| 2.0 * c / n * (a - b)),
    );
    Ok(grad)
}

/// Per-group attachment: the sum over groups of `(c/n_g) * sum_{i in g}
/// |x_i - target_i|^2`, with the gradient assembled over all coordinates.
///
/// In the multishape layout (each shape and each background copy its own
/// group, the copy's slice of `target` holding the shape's target) this is
/// the total mismatch of every shape and every copy against its target. For
/// a single group it coincides with [`attachment`].
pub fn multishape_attachment(
    q: &LandmarkState,
    target: &LandmarkState,
    c: f64,
) -> Result<(f64, DVector<f64>)> {
    q.check_compatible(target)?;
    let d = q.dim();
    let mut value = 0.0;
    let mut grad = DVector::zeros(q.nd());
    for group in q.groups() {
        let ng = group.indices.len() as f64;
        for &i in &group.indices {
            for k in 0..d {
                let diff = q.coords()[i * d + k] - target.coords()[i * d + k];
                value += c / ng * diff * diff;
                grad[i * d + k] = 2.0 * c / ng * diff;
            }
        }
    }
    Ok((value, grad))
}

/// A matching problem: move `q0` toward `target` against the kinetic energy
/// of the per-group kernels, subject to the constraint set.
#[derive(Debug)]
pub struct MatchProblem {
    pub kernels: crate::kernels::GroupKernels,
    pub q0: LandmarkState,
    pub target: LandmarkState,
    pub attachment_weight: f64,
    pub constraints: crate::constraints::ConstraintSet,
}

impl MatchProblem {
    pub fn new(
        kernels: crate::kernels::GroupKernels,
        q0: LandmarkState,
        target: LandmarkState,
        attachment_weight: f64,
        constraints: crate::constraints::ConstraintSet,
    ) -> Result<Self> {
        q0.check_compatible(&target)?;
        kernels.check_state(&q0)?;
        if !(attachment_weight > 0.0 && attachment_weight.is_finite()) {
            return Err(Error::InvalidInput(
                "attachment weight must be positive and finite".to_string(),
            ));
        }
        Ok(Self {
            kernels,
            q0,
            target,
            attachment_weight,
            constraints,
        })
    }

    /// Terminal cost `g(q)` and its gradient.
    pub fn attachment_and_grad(&self, q: &LandmarkState) -> Result<(f64, DVector<f64>)> {
        multishape_attachment(q, &self.target, self.attachment_weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(at.len());
        let mut x = at.to_vec();
        for i in 0..at.len() {
            x[i] = at[i] + h;
            let up = f(&x);
            x[i] = at[i] - h;
            let down = f(&x);
            x[i] = at[i];
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    fn square() -> LandmarkState {
        LandmarkState::single(2, vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn volume_of_unit_square_is_one() {
        assert_abs_diff_eq!(polygon_volume(&square(), 0).unwrap(), 1.0);
    }

    #[test]
    fn volume_of_right_triangle() {
        let tri = LandmarkState::single(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(polygon_volume(&tri, 0).unwrap(), 0.5);
    }

    #[test]
    fn reversed_orientation_negates_volume() {
        let q = square();
        let mut rev = q.coords().to_vec();
        rev.reverse();
        // Reversing the flat buffer also swaps x and y within points, so
        // rebuild the reversed point order explicitly.
        let mut coords = Vec::new();
        for i in (0..q.n()).rev() {
            coords.extend_from_slice(q.point(i));
        }
        let _ = rev;
        let qr = LandmarkState::single(2, coords).unwrap();
        assert_abs_diff_eq!(
            polygon_volume(&qr, 0).unwrap(),
            -polygon_volume(&q, 0).unwrap()
        );
    }

    #[test]
    fn volume_rejects_other_dimensions() {
        let q1 = LandmarkState::single(1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            polygon_volume(&q1, 0),
            Err(Error::UnsupportedDimension { .. })
        ));
    }

    #[test]
    fn volume_gradient_matches_finite_differences() {
        let q = LandmarkState::single(2, vec![0.1, -0.2, 1.3, 0.4, 0.9, 1.2, -0.3, 0.8]).unwrap();
        let grad = volume_gradient(&q, 0).unwrap();
        let base = q.clone();
        let fd = central_diff(
            |x| polygon_volume(&base.with_coords(x.to_vec()).unwrap(), 0).unwrap(),
            q.coords(),
            1e-6,
        );
        for i in 0..q.nd() {
            assert_abs_diff_eq!(grad[i], fd[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn volume_gradient_cyclic_formula() {
        let q = square();
        let grad = volume_gradient(&q, 0).unwrap();
        let n = q.n();
        for i in 0..n {
            let prev = q.point((i + n - 1) % n);
            let next = q.point((i + 1) % n);
            assert_abs_diff_eq!(grad[2 * i], 0.5 * (next[1] - prev[1]));
            assert_abs_diff_eq!(grad[2 * i + 1], 0.5 * (prev[0] - next[0]));
        }
    }

    #[test]
    fn volume_gradient_is_translation_invariant() {
        let q = square();
        let shifted: Vec<f64> = q
            .coords()
            .iter()
            .enumerate()
            .map(|(i, c)| c + if i % 2 == 0 { 3.5 } else { -1.25 })
            .collect();
        let qs = q.with_coords(shifted).unwrap();
        let g0 = volume_gradient(&q, 0).unwrap();
        let g1 = volume_gradient(&qs, 0).unwrap();
        assert_abs_diff_eq!((g0 - g1).amax(), 0.0);
    }

    #[test]
    fn volume_invariant_under_cyclic_rotation_and_scaling() {
        let q = LandmarkState::single(2, vec![0.1, -0.2, 1.3, 0.4, 0.9, 1.2, -0.3, 0.8]).unwrap();
        let v = polygon_volume(&q, 0).unwrap();
        let mut rotated = Vec::new();
        for i in 0..q.n() {
            rotated.extend_from_slice(q.point((i + 2) % q.n()));
        }
        let qr = q.with_coords(rotated).unwrap();
        assert_abs_diff_eq!(polygon_volume(&qr, 0).unwrap(), v, epsilon = 1e-15);
        let scaled: Vec<f64> = q.coords().iter().map(|c| 2.0 * c).collect();
        let qs = q.with_coords(scaled).unwrap();
        assert_abs_diff_eq!(polygon_volume(&qs, 0).unwrap(), 4.0 * v, epsilon = 1e-14);
    }

    #[test]
    fn circle_shape_hits_axis_points() {
        let q = circle_shape(4, [0.0, 0.0], 1.0).unwrap();
        let expected = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        for (a, b) in q.coords().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn polygon_volume_of_fine_circle_approaches_pi_r_squared() {
        let r = 0.75;
        let q = circle_shape(256, [0.3, -0.1], r).unwrap();
        let v = polygon_volume(&q, 0).unwrap();
        let exact = std::f64::consts::PI * r * r;
        assert!(
            ((v - exact) / exact).abs() < 1e-3,
            "relative error {} too large",
            ((v - exact) / exact).abs()
        );
    }

    #[test]
    fn flower_with_zero_amplitude_is_a_circle() {
        let a = flower_shape(17, [0.2, 0.4], 0.9, 0.0, 5).unwrap();
        let b = circle_shape(17, [0.2, 0.4], 0.9).unwrap();
        assert_eq!(a.coords(), b.coords());
    }

    #[test]
    fn generators_reject_tiny_n() {
        assert!(circle_shape(2, [0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn attachment_basics() {
        let q = LandmarkState::single(1, vec![0.0]).unwrap();
        let t = LandmarkState::single(1, vec![2.0]).unwrap();
        assert_abs_diff_eq!(attachment(&q, &t, 1.0).unwrap(), 4.0);
        assert_abs_diff_eq!(attachment(&t, &t, 1.0).unwrap(), 0.0);
        let grad = attachment_gradient(&q, &t, 1.0).unwrap();
        assert_abs_diff_eq!(grad[0], -4.0);
        assert_abs_diff_eq!(attachment_gradient(&t, &t, 1.0).unwrap()[0], 0.0);
    }

    #[test]
    fn attachment_translation_invariant() {
        let q = LandmarkState::single(2, vec![0.1, 0.2, -0.4, 0.9]).unwrap();
        let t = LandmarkState::single(2, vec![1.0, -0.5, 0.3, 0.7]).unwrap();
        let v = attachment(&q, &t, 2.5).unwrap();
        let shift = |s: &LandmarkState| {
            s.with_coords(
                s.coords()
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c + if i % 2 == 0 { 10.0 } else { -3.0 })
                    .collect(),
            )
            .unwrap()
        };
        assert_abs_diff_eq!(
            attachment(&shift(&q), &shift(&t), 2.5).unwrap(),
            v,
            epsilon = 1e-11
        );
    }

    #[test]
    fn attachment_gradient_matches_finite_differences() {
        let q = LandmarkState::single(3, vec![0.1, 0.2, -0.4, 0.9, 1.1, -0.2]).unwrap();
        let t = LandmarkState::single(3, vec![1.0, -0.5, 0.3, 0.7, 0.0, 0.4]).unwrap();
        let grad = attachment_gradient(&q, &t, 1.7).unwrap();
        let base = q.clone();
        let fd = central_diff(
            |x| attachment(&base.with_coords(x.to_vec()).unwrap(), &t, 1.7).unwrap(),
            q.coords(),
            1e-6,
        );
        for i in 0..q.nd() {
            assert_abs_diff_eq!(grad[i], fd[i], epsilon = 1e-8);
        }
    }

    fn two_group_state(coords: Vec<f64>) -> LandmarkState {
        LandmarkState::with_groups(
            2,
            coords,
            vec![
                Group {
                    name: "shape1".into(),
                    indices: vec![0, 1],
                },
                Group {
                    name: "back1".into(),
                    indices: vec![2, 3],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn multishape_attachment_is_additive_over_groups() {
        let target = two_group_state(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        // Displace only the background copy.
        let q = two_group_state(vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.2, 1.5, 0.2]);
        let (value, _) = multishape_attachment(&q, &target, 3.0).unwrap();
        let copy_q = LandmarkState::single(2, vec![0.5, 0.2, 1.5, 0.2]).unwrap();
        let copy_t = LandmarkState::single(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(value, attachment(&copy_q, &copy_t, 3.0).unwrap());
        let (zero, grad) = multishape_attachment(&target, &target, 3.0).unwrap();
        assert_abs_diff_eq!(zero, 0.0);
        assert_abs_diff_eq!(grad.amax(), 0.0);
    }

    #[test]
    fn multishape_attachment_gradient_matches_finite_differences() {
        let target = two_group_state(vec![0.0, 0.1, 1.0, -0.2, 0.3, 0.0, 1.2, 0.4]);
        let q = two_group_state(vec![0.4, 0.0, 0.9, 0.3, 0.1, 0.5, 1.0, -0.1]);
        let (_, grad) = multishape_attachment(&q, &target, 2.0).unwrap();
        let base = q.clone();
        let fd = central_diff(
            |x| {
                multishape_attachment(&base.with_coords(x.to_vec()).unwrap(), &target, 2.0)
                    .unwrap()
                    .0
            },
            q.coords(),
            1e-6,
        );
        for i in 0..q.nd() {
            assert_abs_diff_eq!(grad[i], fd[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn group_partition_is_validated() {
        let overlapping = LandmarkState::with_groups(
            2,
            vec![0.0; 8],
            vec![
                Group {
                    name: "a".into(),
                    indices: vec![0, 1, 2],
                },
                Group {
                    name: "b".into(),
                    indices: vec![2, 3],
                },
            ],
        );
        assert!(overlapping.is_err());
        let gap = LandmarkState::with_groups(
            2,
            vec![0.0; 8],
            vec![Group {
                name: "a".into(),
                indices: vec![0, 1, 2],
            }],
        );
        assert!(gap.is_err());
    }
}
