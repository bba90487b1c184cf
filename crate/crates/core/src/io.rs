//! Experiment configs, deterministic file formats (shapes, trajectories,
//! grids, reports), and grid deformation through a stored flow.
//!
//! All writers are deterministic: identical inputs give byte-identical
//! files. Numeric payloads use shortest round-trip decimal text, so
//! `read(write(x))` reproduces every float bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    fixed_direction_constraint, sliding_constraint, stitched_constraint, volume_constraint,
    ConstraintSet,
};
use crate::error::{Error, Result};
use crate::geodesics::{stage_rhs, Trajectory};
use crate::kernels::{GroupKernels, KernelFamily, KernelSpec};
use crate::optim::SolverOptions;
use crate::shapes::{
    circle_shape, ellipse_shape, flower_shape, Group, LandmarkState, MatchProblem,
};

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub sigma: f64,
}

/// Where a group's landmarks come from. Generators are 2-d; `points` carries
/// its own dimension; `file` reads a single-group shape file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSource {
    Circle {
        n: usize,
        center: [f64; 2],
        radius: f64,
    },
    Ellipse {
        n: usize,
        center: [f64; 2],
        radii: [f64; 2],
    },
    Flower {
        n: usize,
        center: [f64; 2],
        radius: f64,
        amplitude: f64,
        petals: usize,
    },
    Points {
        points: Vec<Vec<f64>>,
    },
    File {
        path: String,
    },
    /// Target only: copy the group's initial shape.
    CopyInitial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    pub kernel: KernelConfig,
    pub initial: ShapeSource,
    pub target: ShapeSource,
}

/// Constraint declarations referencing groups by name. Landmark and segment
/// indices are group-local.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    Volume {
        group: String,
    },
    /// Pairs the two groups' landmarks index-by-index (equal sizes).
    Stitched {
        group_a: String,
        group_b: String,
    },
    /// Sliding along the background curve; segments are the background's
    /// consecutive cyclic point pairs.
    Sliding {
        shape: String,
        background: String,
    },
    FixedDirection {
        group: String,
        landmark: usize,
        direction: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Shooting,
    AugmentedLagrangian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub m: usize,
    /// Padding added around the bounding box of initial and target shapes.
    pub pad: f64,
}

/// Initial momentum for a single forward geodesic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentumInit {
    Zeros,
    /// `p0 = scale * (target - initial)`, coordinatewise.
    TowardTarget {
        scale: f64,
    },
    /// Seeded uniform entries in `[-scale, scale]`.
    Random {
        scale: f64,
    },
    Values {
        values: Vec<f64>,
    },
}

fn default_steps() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub groups: Vec<GroupConfig>,
    pub attachment_weight: f64,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    pub solver: SolverKind,
    #[serde(default)]
    pub options: SolverOptions,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub momentum: Option<MomentumInit>,
}

// ---------------------------------------------------------------------------
// Config reading and problem assembly
// ---------------------------------------------------------------------------

fn read_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_error(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| read_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e))
}

pub fn write_config(path: &Path, config: &ExperimentConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config).map_err(|e| parse_error(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| read_error(path, e))
}

fn resolve_source(
    source: &ShapeSource,
    initial: Option<&Vec<Vec<f64>>>,
    config_dir: &Path,
) -> Result<Vec<Vec<f64>>> {
    let flat_to_points = |state: &LandmarkState| -> Vec<Vec<f64>> {
        (0..state.n()).map(|i| state.point(i).to_vec()).collect()
    };
    match source {
        ShapeSource::Circle { n, center, radius } => {
            Ok(flat_to_points(&circle_shape(*n, *center, *radius)?))
        }
        ShapeSource::Ellipse { n, center, radii } => Ok(flat_to_points(&ellipse_shape(
            *n, *center, radii[0], radii[1],
        )?)),
        ShapeSource::Flower {
            n,
            center,
            radius,
            amplitude,
            petals,
        } => Ok(flat_to_points(&flower_shape(
            *n, *center, *radius, *amplitude, *petals,
        )?)),
        ShapeSource::Points { points } => {
            if points.is_empty() {
                return Err(Error::InvalidInput("empty point list".to_string()));
            }
            Ok(points.clone())
        }
        ShapeSource::File { path } => {
            let full = config_dir.join(path);
            let state = read_shape(&full)?;
            if state.groups().len() != 1 {
                return Err(Error::InvalidInput(format!(
                    "shape file {} must hold exactly one group when used as a source",
                    full.display()
                )));
            }
            Ok(flat_to_points(&state))
        }
        ShapeSource::CopyInitial => initial.cloned().ok_or_else(|| {
            Error::InvalidInput("copy_initial is only valid as a target source".to_string())
        }),
    }
}

fn assemble_state(per_group: &[(String, Vec<Vec<f64>>)]) -> Result<LandmarkState> {
    let dim = per_group
        .first()
        .and_then(|(_, pts)| pts.first())
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("config needs at least one group".to_string()))?;
    let mut coords = Vec::new();
    let mut groups = Vec::new();
    let mut next = 0usize;
    for (name, pts) in per_group {
        let mut indices = Vec::with_capacity(pts.len());
        for p in pts {
            if p.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "group {} mixes point dimensions {} and {}",
                    name,
                    dim,
                    p.len()
                )));
            }
            coords.extend_from_slice(p);
            indices.push(next);
            next += 1;
        }
        groups.push(Group {
            name: name.clone(),
            indices,
        });
    }
    LandmarkState::with_groups(dim, coords, groups)
}

fn group_index(state: &LandmarkState, name: &str) -> Result<usize> {
    state
        .groups()
        .iter()
        .position(|g| g.name == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown group '{}' in constraint", name)))
}

/// Resolves a config into a solvable problem. `config_dir` anchors relative
/// shape-file paths.
pub fn build_problem(config: &ExperimentConfig, config_dir: &Path) -> Result<MatchProblem> {
    let mut initial_pts = Vec::new();
    let mut target_pts = Vec::new();
    for g in &config.groups {
        let init = resolve_source(&g.initial, None, config_dir)?;
        let tgt = resolve_source(&g.target, Some(&init), config_dir)?;
        if init.len() != tgt.len() {
            return Err(Error::ShapeMismatch(format!(
                "group {}: initial has {} points, target {}",
                g.name,
                init.len(),
                tgt.len()
            )));
        }
        initial_pts.push((g.name.clone(), init));
        target_pts.push((g.name.clone(), tgt));
    }
    let q0 = assemble_state(&initial_pts)?;
    let target = assemble_state(&target_pts)?;

    let specs: Vec<KernelSpec> = config
        .groups
        .iter()
        .map(|g| KernelSpec::new(g.kernel.family, g.kernel.sigma))
        .collect::<Result<_>>()?;
    let kernels = GroupKernels::new(specs);

    let mut blocks: Vec<Box<dyn crate::constraints::ConstraintBlock>> = Vec::new();
    for c in &config.constraints {
        match c {
            ConstraintConfig::Volume { group } => {
                blocks.push(Box::new(volume_constraint(group_index(&q0, group)?)));
            }
            ConstraintConfig::Stitched { group_a, group_b } => {
                let ga = group_index(&q0, group_a)?;
                let gb = group_index(&q0, group_b)?;
                let ia = &q0.groups()[ga].indices;
                let ib = &q0.groups()[gb].indices;
                if ia.len() != ib.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "stitched groups {} and {} differ in size ({} vs {})",
                        group_a,
                        group_b,
                        ia.len(),
                        ib.len()
                    )));
                }
                let pairs: Vec<(usize, usize)> =
                    ia.iter().copied().zip(ib.iter().copied()).collect();
                blocks.push(Box::new(stitched_constraint(pairs)));
            }
            ConstraintConfig::Sliding { shape, background } => {
                let gs = group_index(&q0, shape)?;
                let gb = group_index(&q0, background)?;
                let ib = &q0.groups()[gb].indices;
                let segments: Vec<(usize, usize)> = (0..ib.len())
                    .map(|i| (ib[i], ib[(i + 1) % ib.len()]))
                    .collect();
                blocks.push(Box::new(sliding_constraint(gs, gb, segments)));
            }
            ConstraintConfig::FixedDirection {
                group,
                landmark,
                direction,
            } => {
                let g = group_index(&q0, group)?;
                let indices = &q0.groups()[g].indices;
                let global = *indices.get(*landmark).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "fixed_direction landmark {} out of range for group {} ({} points)",
                        landmark,
                        group,
                        indices.len()
                    ))
                })?;
                blocks.push(Box::new(fixed_direction_constraint(
                    global,
                    direction.clone(),
                )));
            }
        }
    }

    MatchProblem::new(
        kernels,
        q0,
        target,
        config.attachment_weight,
        ConstraintSet::new(blocks),
    )
}

/// Initial momentum for a single forward geodesic, per the config (defaults
/// to aiming at the target).
pub fn resolve_momentum(config: &ExperimentConfig, problem: &MatchProblem) -> Vec<f64> {
    let nd = problem.q0.nd();
    match config
        .momentum
        .as_ref()
        .unwrap_or(&MomentumInit::TowardTarget { scale: 1.0 })
    {
        MomentumInit::Zeros => vec![0.0; nd],
        MomentumInit::TowardTarget { scale } => problem
            .q0
            .coords()
            .iter()
            .zip(problem.target.coords())
            .map(|(a, b)| scale * (b - a))
            .collect(),
        MomentumInit::Random { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (0..nd).map(|_| rng.gen_range(-*scale..=*scale)).collect()
        }
        MomentumInit::Values { values } => values.clone(),
    }
}

// ---------------------------------------------------------------------------
// Shape files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeFile {
    dim: usize,
    groups: Vec<ShapeFileGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeFileGroup {
    name: String,
    points: Vec<Vec<f64>>,
}

pub fn write_shape(path: &Path, state: &LandmarkState) -> Result<()> {
    let file = ShapeFile {
        dim: state.dim(),
        groups: state
            .groups()
            .iter()
            .map(|g| ShapeFileGroup {
                name: g.name.clone(),
                points: g.indices.iter().map(|&i| state.point(i).to_vec()).collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| parse_error(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| read_error(path, e))
}

pub fn read_shape(path: &Path) -> Result<LandmarkState> {
    let text = fs::read_to_string(path).map_err(|e| read_error(path, e))?;
    let file: ShapeFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    let per_group: Vec<(String, Vec<Vec<f64>>)> = file
        .groups
        .into_iter()
        .map(|g| (g.name, g.points))
        .collect();
    let state = assemble_state(&per_group)?;
    if state.dim() != file.dim {
        return Err(parse_error(
            path,
            format!(
                "declared dim {} does not match point dimension {}",
                file.dim,
                state.dim()
            ),
        ));
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Trajectory files
// ---------------------------------------------------------------------------

fn push_floats(line: &mut String, values: &[f64]) {
    for v in values {
        if !line.is_empty() && !line.ends_with(' ') && !line.ends_with('=') {
            line.push(' ');
        }
        write!(line, "{}", v).expect("writing to a string cannot fail");
    }
}

/// Plain-text trajectory: `#` header lines describe the layout, one `#node`
/// line per time node carries time, energy, regularization, and multipliers,
/// and each node contributes one data row per landmark (coordinates followed
/// by that landmark's momentum or control entries). Data row count is
/// `(N+1)*n`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let base = traj.base();
    let n = base.n();
    let d = base.dim();
    let carries = match (&traj.momenta, &traj.controls) {
        (Some(_), _) => "momenta",
        (None, Some(_)) => "controls",
        (None, None) => "positions",
    };
    let mut text = String::new();
    text.push_str("# trajectory\n");
    let _ = writeln!(text, "# steps {}", traj.n_steps());
    let _ = writeln!(text, "# landmarks {}", n);
    let _ = writeln!(text, "# dim {}", d);
    let _ = writeln!(text, "# carries {}", carries);
    let _ = writeln!(text, "# integrator {}", traj.integrator);
    for g in base.groups() {
        let mut line = format!("# group {}", g.name);
        for &i in &g.indices {
            let _ = write!(line, " {}", i);
        }
        text.push_str(&line);
        text.push('\n');
    }
    for i in 0..=traj.n_steps() {
        let mut meta = String::from("#node");
        let _ = write!(meta, " t=");
        push_floats(&mut meta, &[traj.times[i]]);
        let _ = write!(meta, " energy=");
        push_floats(&mut meta, &[traj.energy[i]]);
        let _ = write!(meta, " eps=");
        push_floats(&mut meta, &[traj.eps_history[i]]);
        if !traj.multipliers[i].is_empty() {
            let _ = write!(meta, " lambda=");
            let lam: Vec<f64> = traj.multipliers[i].iter().copied().collect();
            push_floats(&mut meta, &lam);
        }
        text.push_str(&meta);
        text.push('\n');
        for j in 0..n {
            let mut row = String::new();
            push_floats(&mut row, &traj.positions[i].as_slice()[j * d..(j + 1) * d]);
            match carries {
                "momenta" => {
                    let p = &traj.momenta.as_ref().expect("carries momenta")[i];
                    push_floats(&mut row, &p.as_slice()[j * d..(j + 1) * d]);
                }
                "controls" => {
                    let u = traj.control_at_node(i).expect("carries controls");
                    push_floats(&mut row, &u.as_slice()[j * d..(j + 1) * d]);
                }
                _ => {}
            }
            text.push_str(&row);
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| read_error(path, e))
}

fn parse_floats(path: &Path, parts: &[&str]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| parse_error(path, format!("bad float '{}': {}", s, e)))
        })
        .collect()
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| read_error(path, e))?;
    let mut steps = None;
    let mut landmarks = None;
    let mut dim = None;
    let mut carries = String::from("positions");
    let mut groups: Vec<Group> = Vec::new();
    let mut node_meta: Vec<(f64, f64, f64, Vec<f64>)> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#node") {
            let mut t = 0.0;
            let mut energy = 0.0;
            let mut eps = 0.0;
            let mut lambda = Vec::new();
            let mut key: Option<&str> = None;
            for tok in rest.split_whitespace() {
                if let Some((k, v)) = tok.split_once('=') {
                    key = Some(match k {
                        "t" => "t",
                        "energy" => "energy",
                        "eps" => "eps",
                        "lambda" => "lambda",
                        other => {
                            return Err(parse_error(
                                path,
                                format!("unknown node field '{}'", other),
                            ))
                        }
                    });
                    if v.is_empty() {
                        continue;
                    }
                    match key {
                        Some("t") => t = parse_floats(path, &[v])?[0],
                        Some("energy") => energy = parse_floats(path, &[v])?[0],
                        Some("eps") => eps = parse_floats(path, &[v])?[0],
                        Some("lambda") => lambda.push(parse_floats(path, &[v])?[0]),
                        _ => unreachable!(),
                    }
                } else if key == Some("lambda") {
                    lambda.push(parse_floats(path, &[tok])?[0]);
                } else {
                    return Err(parse_error(path, format!("stray token '{}'", tok)));
                }
            }
            node_meta.push((t, energy, eps, lambda));
        } else if let Some(rest) = line.strip_prefix("# group ") {
            let mut it = rest.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| parse_error(path, "group line without a name"))?
                .to_string();
            let indices: Vec<usize> = it
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| parse_error(path, format!("bad index '{}': {}", s, e)))
                })
                .collect::<Result<_>>()?;
            groups.push(Group { name, indices });
        } else if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            match it.next() {
                Some("steps") => steps = Some(parse_usize(path, it.next())?),
                Some("landmarks") => landmarks = Some(parse_usize(path, it.next())?),
                Some("dim") => dim = Some(parse_usize(path, it.next())?),
                Some("carries") => {
                    carries = it
                        .next()
                        .ok_or_else(|| parse_error(path, "carries line without a value"))?
                        .to_string()
                }
                _ => {}
            }
        } else {
            rows.push(parse_floats(
                path,
                &line.split_whitespace().collect::<Vec<_>>(),
            )?);
        }
    }

    let n_steps = steps.ok_or_else(|| parse_error(path, "missing '# steps'"))?;
    let n = landmarks.ok_or_else(|| parse_error(path, "missing '# landmarks'"))?;
    let d = dim.ok_or_else(|| parse_error(path, "missing '# dim'"))?;
    if rows.len() != (n_steps + 1) * n {
        return Err(parse_error(
            path,
            format!(
                "expected {} data rows ({} nodes x {} landmarks), found {}",
                (n_steps + 1) * n,
                n_steps + 1,
                n,
                rows.len()
            ),
        ));
    }
    if node_meta.len() != n_steps + 1 {
        return Err(parse_error(
            path,
            format!(
                "expected {} node lines, found {}",
                n_steps + 1,
                node_meta.len()
            ),
        ));
    }
    let row_width = d + if carries == "positions" { 0 } else { d };
    let mut positions = Vec::with_capacity(n_steps + 1);
    let mut second: Vec<DVector<f64>> = Vec::with_capacity(n_steps + 1);
    for i in 0..=n_steps {
        let mut coords = Vec::with_capacity(n * d);
        let mut extra = Vec::with_capacity(n * d);
        for j in 0..n {
            let row = &rows[i * n + j];
            if row.len() != row_width {
                return Err(parse_error(
                    path,
                    format!(
                        "row width {} does not match layout {}",
                        row.len(),
                        row_width
                    ),
                ));
            }
            coords.extend_from_slice(&row[..d]);
            if carries != "positions" {
                extra.extend_from_slice(&row[d..]);
            }
        }
        positions.push(DVector::from_vec(coords));
        if carries != "positions" {
            second.push(DVector::from_vec(extra));
        }
    }

    let base = if groups.is_empty() {
        LandmarkState::single(d, positions[0].as_slice().to_vec())?
    } else {
        LandmarkState::with_groups(d, positions[0].as_slice().to_vec(), groups)?
    };
    let (momenta, controls) = match carries.as_str() {
        "momenta" => (Some(second), None),
        "controls" => {
            // Node rows repeat the last step's control; per-step controls
            // are the first N node values.
            let mut c = second;
            c.truncate(n_steps);
            (None, Some(c))
        }
        "positions" => (None, None),
        other => {
            return Err(parse_error(
                path,
                format!("unknown carries value '{}'", other),
            ))
        }
    };
    Ok(Trajectory {
        base,
        times: node_meta.iter().map(|m| m.0).collect(),
        positions,
        momenta,
        controls,
        multipliers: node_meta
            .iter()
            .map(|m| DVector::from_vec(m.3.clone()))
            .collect(),
        energy: node_meta.iter().map(|m| m.1).collect(),
        eps_history: node_meta.iter().map(|m| m.2).collect(),
        integrator: "rk4",
    })
}

fn parse_usize(path: &Path, tok: Option<&str>) -> Result<usize> {
    let tok = tok.ok_or_else(|| parse_error(path, "missing integer field"))?;
    tok.parse::<usize>()
        .map_err(|e| parse_error(path, format!("bad integer '{}': {}", tok, e)))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

pub fn write_report(path: &Path, report: &crate::optim::SolveReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| parse_error(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| read_error(path, e))
}

// ---------------------------------------------------------------------------
// Grid deformation
// ---------------------------------------------------------------------------

/// A regular grid advected through a stored flow: `start` and `end` hold the
/// node positions before and after, row-major over an `m x m` lattice.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub bbox: [f64; 4],
    pub m: usize,
    pub start: Vec<[f64; 2]>,
    pub end: Vec<[f64; 2]>,
}

/// Axis-aligned bounding box of the states' coordinates, padded on all sides.
pub fn bounding_box(states: &[&LandmarkState], pad: f64) -> Result<[f64; 4]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for s in states {
        if s.dim() != 2 {
            return Err(Error::UnsupportedDimension {
                op: "bounding_box",
                required: 2,
                got: s.dim(),
            });
        }
        for i in 0..s.n() {
            let p = s.point(i);
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
            any = true;
        }
    }
    if !any {
        return Err(Error::InvalidInput("bounding box of nothing".to_string()));
    }
    Ok([lo[0] - pad, lo[1] - pad, hi[0] + pad, hi[1] + pad])
}

/// Advects an `m x m` grid through the velocity field reconstructed from the
/// stored trajectory (controls, or momenta projected through the constraint
/// set). The grid sees the same RK4 stage fields that moved the landmarks,
/// so landmark paths are particle paths of the advection.
pub fn deform_grid(
    traj: &Trajectory,
    kernels: &GroupKernels,
    cs: &ConstraintSet,
    bbox: [f64; 4],
    m: usize,
) -> Result<GridSample> {
    let base = traj.base();
    if base.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            op: "deform_grid",
            required: 2,
            got: base.dim(),
        });
    }
    if m < 2 {
        return Err(Error::InvalidInput("grid needs m >= 2".to_string()));
    }
    if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
        return Err(Error::InvalidInput(
            "grid bounding box must have positive extent".to_string(),
        ));
    }
    if traj.momenta.is_none() && traj.controls.is_none() {
        return Err(Error::InvalidInput(
            "trajectory carries neither momenta nor controls; the velocity \
             field cannot be reconstructed"
                .to_string(),
        ));
    }

    let mut start = Vec::with_capacity(m * m);
    for iy in 0..m {
        for ix in 0..m {
            let fx = ix as f64 / (m - 1) as f64;
            let fy = iy as f64 / (m - 1) as f64;
            start.push([
                bbox[0] + fx * (bbox[2] - bbox[0]),
                bbox[1] + fy * (bbox[3] - bbox[1]),
            ]);
        }
    }
    let mut nodes = start.clone();
    let n_steps = traj.n_steps();
    let h = 1.0 / n_steps as f64;
    let state_of = |coords: &DVector<f64>| base.with_coords(coords.as_slice().to_vec());
    let threshold = 1e8 * (1.0 + bbox.iter().fold(0.0f64, |a, b| a.max(b.abs())));

    // Summed field of all groups at a point, from one stage configuration.
    let field = |qs: &LandmarkState, w: &DVector<f64>, y: &[f64; 2]| -> [f64; 2] {
        let mut v = [0.0; 2];
        for g in 0..qs.groups().len() {
            let vg = kernels.velocity(qs, g, w.as_slice(), y);
            v[0] += vg[0];
            v[1] += vg[1];
        }
        v
    };

    for i in 0..n_steps {
        // Reconstruct the four stage configurations exactly as the forward
        // integrator produced them from the stored node data.
        let q = &traj.positions[i];
        let stages: Vec<(DVector<f64>, DVector<f64>)> = if let Some(momenta) = &traj.momenta {
            let p = &momenta[i];
            let s1 = stage_rhs(kernels, cs, &state_of(q)?, p.as_slice())?;
            let q2 = q + &s1.qdot * (0.5 * h);
            let p2 = p + &s1.pdot * (0.5 * h);
            let s2 = stage_rhs(kernels, cs, &state_of(&q2)?, p2.as_slice())?;
            let q3 = q + &s2.qdot * (0.5 * h);
            let p3 = p + &s2.pdot * (0.5 * h);
            let s3 = stage_rhs(kernels, cs, &state_of(&q3)?, p3.as_slice())?;
            let q4 = q + &s3.qdot * h;
            let p4 = p + &s3.pdot * h;
            let s4 = stage_rhs(kernels, cs, &state_of(&q4)?, p4.as_slice())?;
            vec![
                (q.clone(), s1.weights),
                (q2, s2.weights),
                (q3, s3.weights),
                (q4, s4.weights),
            ]
        } else {
            let u = &traj.controls.as_ref().expect("checked above")[i];
            let qs = state_of(q)?;
            let k1 = kernels.apply(&qs, u.as_slice());
            let q2 = q + &k1 * (0.5 * h);
            let k2 = kernels.apply(&state_of(&q2)?, u.as_slice());
            let q3 = q + &k2 * (0.5 * h);
            let k3 = kernels.apply(&state_of(&q3)?, u.as_slice());
            let q4 = q + &k3 * h;
            vec![
                (q.clone(), u.clone()),
                (q2, u.clone()),
                (q3, u.clone()),
                (q4, u.clone()),
            ]
        };
        let stage_states: Vec<(LandmarkState, &DVector<f64>)> = stages
            .iter()
            .map(|(c, w)| Ok((state_of(c)?, w)))
            .collect::<Result<_>>()?;

        for node in nodes.iter_mut() {
            let l1 = field(&stage_states[0].0, stage_states[0].1, node);
            let y2 = [node[0] + 0.5 * h * l1[0], node[1] + 0.5 * h * l1[1]];
            let l2 = field(&stage_states[1].0, stage_states[1].1, &y2);
            let y3 = [node[0] + 0.5 * h * l2[0], node[1] + 0.5 * h * l2[1]];
            let l3 = field(&stage_states[2].0, stage_states[2].1, &y3);
            let y4 = [node[0] + h * l3[0], node[1] + h * l3[1]];
            let l4 = field(&stage_states[3].0, stage_states[3].1, &y4);
            node[0] += h / 6.0 * (l1[0] + 2.0 * l2[0] + 2.0 * l3[0] + l4[0]);
            node[1] += h / 6.0 * (l1[1] + 2.0 * l2[1] + 2.0 * l3[1] + l4[1]);
            let mag = node[0].abs().max(node[1].abs());
            if !mag.is_finite() || mag > threshold {
                return Err(Error::BlowUp {
                    step: i,
                    magnitude: mag,
                    threshold,
                });
            }
        }
    }
    Ok(GridSample {
        bbox,
        m,
        start,
        end: nodes,
    })
}

/// Plain-text grid: header, then one row per node with start and end
/// positions.
pub fn write_grid(path: &Path, grid: &GridSample) -> Result<()> {
    let mut text = String::new();
    text.push_str("# grid\n");
    let _ = writeln!(text, "# m {}", grid.m);
    let mut bbox_line = String::from("# bbox");
    for v in grid.bbox {
        let _ = write!(bbox_line, " {}", v);
    }
    text.push_str(&bbox_line);
    text.push('\n');
    text.push_str("# columns x_start y_start x_end y_end\n");
    for (s, e) in grid.start.iter().zip(&grid.end) {
        let mut row = String::new();
        push_floats(&mut row, &[s[0], s[1], e[0], e[1]]);
        text.push_str(&row);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| read_error(path, e))
}
