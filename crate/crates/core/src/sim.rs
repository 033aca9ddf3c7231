//! Position-based dynamics for a rectangular tissue sheet.
//!
//! The sheet is a regular particle grid lying in the x-z plane with gravity
//! along -y. Particle `(i, j)` (column `i` along x, row `j` along z) has index
//! `j * nx + i`. Row 0 is the hinge edge: the two uncontrolled grippers A and
//! B pin two of its particles. The resection line is a run of particles on an
//! interior row, marked on the underside of the sheet, so it is hidden from a
//! camera above the resting sheet and only shows once the sheet is turned over.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GripperId {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub id: GripperId,
    pub position: Vec3,
    pub controlled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConstraint {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub stiffness: f64,
}

impl DistanceConstraint {
    pub fn new(i: usize, j: usize, rest_length: f64, stiffness: f64) -> Result<Self> {
        if i == j {
            return Err(Error::Config(format!("constraint joins particle {i} to itself")));
        }
        if !(rest_length > 0.0) {
            return Err(Error::Config(format!("rest length {rest_length} must be positive")));
        }
        if !(stiffness > 0.0 && stiffness <= 1.0) {
            return Err(Error::Config(format!("stiffness {stiffness} outside (0, 1]")));
        }
        Ok(Self {
            i,
            j,
            rest_length,
            stiffness,
        })
    }
}

/// Grasp/pull command: grasp at `p`, drag the grasped region to `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub p: Vec3,
    pub d: Vec3,
}

impl Action {
    pub fn to_array(self) -> [f64; 6] {
        [self.p.x, self.p.y, self.p.z, self.d.x, self.d.y, self.d.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            p: Vec3::new(v[0], v[1], v[2]),
            d: Vec3::new(v[3], v[4], v[5]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResectionLine {
    /// Particle indices along the line, ordered from one endpoint to the other.
    pub path: Vec<usize>,
    pub endpoints: (usize, usize),
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub particles: Vec<usize>,
    /// Offset of each attached particle from the gripper at grasp time.
    pub offsets: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueState {
    pub grid: (usize, usize),
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub inv_mass: Vec<f64>,
    pub pinned: Vec<usize>,
    pub constraints: Vec<DistanceConstraint>,
    /// Links between particles two apart along a row or column.
    pub bending: Vec<DistanceConstraint>,
    pub resection_line: ResectionLine,
    pub grippers: [GripperState; 3],
    pub grasp_attachment: Option<Attachment>,
    /// Set by [`apply_action`] when no particle was within reach of the grasp point.
    pub noop_pull: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Extent along x and z, meters.
    pub sheet_size: (f64, f64),
    /// Center of the sheet at rest.
    pub origin: Vec3,
    pub dt: f64,
    pub solver_iters: usize,
    pub gravity: Vec3,
    pub grasp_radius: f64,
    pub pull_substeps: usize,
    pub settle_steps: usize,
    pub workspace_min: Vec3,
    pub workspace_max: Vec3,
    pub damping: f64,
    pub stiffness: f64,
    /// Height of the supporting plane; `None` lets the sheet hang freely.
    pub floor_y: Option<f64>,
    /// Stiffness of the skip-one bending links; zero leaves them out.
    pub bending_stiffness: f64,
    /// Columns of the hinge row held by grippers A and B.
    pub pin_columns: (usize, usize),
    /// Distance of the resection line from the hinge edge, meters.
    pub line_offset: f64,
    /// Half length of the resection line about the sheet's center line, meters.
    pub line_half_length: f64,
    /// Rest position of the controlled gripper, relative to `origin`.
    pub gripper_rest: Vec3,
}

impl Default for SimConfig {
    fn default() -> Self {
        let origin = Vec3::new(0.335, 0.102, 0.465);
        Self {
            grid_nx: 17,
            grid_ny: 21,
            sheet_size: (0.08, 0.10),
            origin,
            dt: 1.0 / 60.0,
            solver_iters: 20,
            gravity: Vec3::new(0.0, -9.81, 0.0),
            grasp_radius: 0.008,
            pull_substeps: 30,
            settle_steps: 30,
            workspace_min: origin + Vec3::new(-0.06, -0.005, -0.18),
            workspace_max: origin + Vec3::new(0.06, 0.035, 0.06),
            damping: 0.02,
            stiffness: 1.0,
            floor_y: Some(origin.y),
            bending_stiffness: 1.0,
            pin_columns: (0, 16),
            line_offset: 0.02,
            line_half_length: 0.02,
            gripper_rest: Vec3::new(0.0, 0.04, 0.07),
        }
    }
}

impl SimConfig {
    /// Coarser grid and fewer iterations for fast learning loops.
    pub fn desk() -> Self {
        Self {
            grid_nx: 9,
            grid_ny: 11,
            solver_iters: 10,
            pull_substeps: 10,
            settle_steps: 30,
            pin_columns: (0, 8),
            ..Self::default()
        }
    }

    pub fn spacing(&self) -> (f64, f64) {
        (
            self.sheet_size.0 / (self.grid_nx - 1) as f64,
            self.sheet_size.1 / (self.grid_ny - 1) as f64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_nx < 2 || self.grid_ny < 2 {
            return bad(format!("grid {}x{} must be at least 2x2", self.grid_nx, self.grid_ny));
        }
        if !(self.sheet_size.0 > 0.0 && self.sheet_size.1 > 0.0) {
            return bad(format!("sheet size {:?} must be positive", self.sheet_size));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt {} must be positive", self.dt));
        }
        if self.solver_iters < 1 {
            return bad("solver_iters must be >= 1".into());
        }
        if !(self.grasp_radius > 0.0) {
            return bad(format!("grasp_radius {} must be positive", self.grasp_radius));
        }
        if self.pull_substeps < 1 {
            return bad("pull_substeps must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad(format!("damping {} outside [0, 1)", self.damping));
        }
        if !(self.stiffness > 0.0 && self.stiffness <= 1.0) {
            return bad(format!("stiffness {} outside (0, 1]", self.stiffness));
        }
        if !(0.0..=1.0).contains(&self.bending_stiffness) {
            return bad(format!("bending_stiffness {} outside [0, 1]", self.bending_stiffness));
        }
        let (a, b) = self.pin_columns;
        if a == b || a >= self.grid_nx || b >= self.grid_nx {
            return bad(format!("pin columns {:?} invalid for {} columns", self.pin_columns, self.grid_nx));
        }
        if !self.origin.is_finite() || !self.gravity.is_finite() {
            return bad("origin and gravity must be finite".into());
        }
        let ws_ok = self.workspace_min.x <= self.workspace_max.x
            && self.workspace_min.y <= self.workspace_max.y
            && self.workspace_min.z <= self.workspace_max.z;
        if !ws_ok {
            return bad("workspace_min must not exceed workspace_max".into());
        }
        if !(self.line_offset > 0.0 && self.line_offset < self.sheet_size.1) {
            return bad(format!("line offset {} outside the sheet", self.line_offset));
        }
        if !(self.line_half_length > 0.0 && self.line_half_length <= self.sheet_size.0 / 2.0) {
            return bad(format!("line half length {} invalid", self.line_half_length));
        }
        Ok(())
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.grid_nx + i
    }
}

/// Closed-form projection of a single distance constraint.
///
/// Moves both points along their separation so the distance approaches
/// `rest` by the fraction `stiffness`, splitting the correction by inverse
/// mass. Points with zero combined inverse mass are returned unchanged.
pub fn project_distance(p1: Vec3, p2: Vec3, w1: f64, w2: f64, rest: f64, stiffness: f64) -> (Vec3, Vec3) {
    let w = w1 + w2;
    if w <= 0.0 {
        return (p1, p2);
    }
    let delta = p1 - p2;
    let len = delta.norm();
    if len < 1e-12 {
        return (p1, p2);
    }
    let c = len - rest;
    let n = delta * (1.0 / len);
    let s = stiffness * c / w;
    (p1 - n * (s * w1), p2 + n * (s * w2))
}

fn build_constraints(cfg: &SimConfig, positions: &[Vec3]) -> Result<Vec<DistanceConstraint>> {
    let (nx, ny) = (cfg.grid_nx, cfg.grid_ny);
    let mut out = Vec::with_capacity(4 * nx * ny);
    let mut link = |a: usize, b: usize| -> Result<()> {
        let rest = (positions[a] - positions[b]).norm();
        out.push(DistanceConstraint::new(a, b, rest, cfg.stiffness)?);
        Ok(())
    };
    for j in 0..ny {
        for i in 0..nx {
            let k = cfg.index(i, j);
            if i + 1 < nx {
                link(k, cfg.index(i + 1, j))?;
            }
            if j + 1 < ny {
                link(k, cfg.index(i, j + 1))?;
            }
            if i + 1 < nx && j + 1 < ny {
                link(k, cfg.index(i + 1, j + 1))?;
                link(cfg.index(i + 1, j), cfg.index(i, j + 1))?;
            }
        }
    }
    Ok(out)
}

fn build_bending(cfg: &SimConfig, positions: &[Vec3]) -> Result<Vec<DistanceConstraint>> {
    let mut out = Vec::new();
    if cfg.bending_stiffness == 0.0 {
        return Ok(out);
    }
    for j in 0..cfg.grid_ny {
        for i in 0..cfg.grid_nx {
            let k = cfg.index(i, j);
            let mut others = Vec::with_capacity(2);
            if i + 2 < cfg.grid_nx {
                others.push(cfg.index(i + 2, j));
            }
            if j + 2 < cfg.grid_ny {
                others.push(cfg.index(i, j + 2));
            }
            for o in others {
                let rest = (positions[k] - positions[o]).norm();
                out.push(DistanceConstraint::new(k, o, rest, cfg.bending_stiffness)?);
            }
        }
    }
    Ok(out)
}

/// Builds the resting sheet centered on `cfg.origin`.
pub fn init_tissue(cfg: &SimConfig) -> Result<TissueState> {
    cfg.validate()?;
    let (nx, ny) = (cfg.grid_nx, cfg.grid_ny);
    let (w, l) = cfg.sheet_size;
    let mut positions = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let u = i as f64 / (nx - 1) as f64 - 0.5;
            let v = j as f64 / (ny - 1) as f64 - 0.5;
            positions.push(cfg.origin + Vec3::new(u * w, 0.0, v * l));
        }
    }
    let mut inv_mass = vec![1.0; nx * ny];
    let pinned = vec![cfg.index(cfg.pin_columns.0, 0), cfg.index(cfg.pin_columns.1, 0)];
    for &p in &pinned {
        inv_mass[p] = 0.0;
    }
    let constraints = build_constraints(cfg, &positions)?;
    let bending = build_bending(cfg, &positions)?;

    let (_, dz) = cfg.spacing();
    let row = ((cfg.line_offset / dz).round() as usize).clamp(1, ny - 1);
    let path: Vec<usize> = (0..nx)
        .filter(|&i| {
            let x = (i as f64 / (nx - 1) as f64 - 0.5) * w;
            x.abs() <= cfg.line_half_length + 1e-12
        })
        .map(|i| cfg.index(i, row))
        .collect();
    if path.len() < 2 {
        return Err(Error::Config("resection line covers fewer than two particles".into()));
    }
    let endpoints = (path[0], *path.last().unwrap());

    let grippers = [
        GripperState {
            id: GripperId::A,
            position: positions[pinned[0]],
            controlled: false,
        },
        GripperState {
            id: GripperId::B,
            position: positions[pinned[1]],
            controlled: false,
        },
        GripperState {
            id: GripperId::C,
            position: cfg.origin + cfg.gripper_rest,
            controlled: true,
        },
    ];

    Ok(TissueState {
        grid: (nx, ny),
        velocities: vec![Vec3::ZERO; positions.len()],
        positions,
        inv_mass,
        pinned,
        constraints,
        bending,
        resection_line: ResectionLine { path, endpoints, row },
        grippers,
        grasp_attachment: None,
        noop_pull: false,
    })
}

impl TissueState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn gripper(&self, id: GripperId) -> Vec3 {
        self.grippers.iter().find(|g| g.id == id).map(|g| g.position).unwrap()
    }

    pub fn controlled_gripper_mut(&mut self) -> &mut GripperState {
        self.grippers.iter_mut().find(|g| g.controlled).unwrap()
    }

    /// Gripper triangle `(A, B, C)`.
    pub fn gripper_triangle(&self) -> (Vec3, Vec3, Vec3) {
        (self.gripper(GripperId::A), self.gripper(GripperId::B), self.gripper(GripperId::C))
    }

    pub fn line_endpoints(&self) -> (Vec3, Vec3) {
        let (a, b) = self.resection_line.endpoints;
        (self.positions[a], self.positions[b])
    }

    pub fn mean_position(&self) -> Vec3 {
        let s = self.positions.iter().fold(Vec3::ZERO, |acc, &p| acc + p);
        s * (1.0 / self.positions.len() as f64)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.inv_mass)
            .filter(|(_, &w)| w > 0.0)
            .map(|(v, &w)| 0.5 * v.norm_sq() / w)
            .sum()
    }

    /// Largest relative deviation of any structural or shear constraint from
    /// its rest length.
    pub fn max_strain(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| ((self.positions[c.i] - self.positions[c.j]).norm() - c.rest_length).abs() / c.rest_length)
            .fold(0.0, f64::max)
    }

    /// Triangles of the sheet, wound so the normal of the resting sheet is +y.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        let (nx, ny) = self.grid;
        let mut tris = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let p00 = j * nx + i;
                let p10 = p00 + 1;
                let p01 = p00 + nx;
                let p11 = p01 + 1;
                tris.push([p00, p01, p11]);
                tris.push([p00, p11, p10]);
            }
        }
        tris
    }

    /// Whether triangle `t` (as returned by [`Self::triangles`]) belongs to the
    /// marked band around the resection line.
    pub fn is_marked_triangle(&self, t: usize) -> bool {
        let (nx, _) = self.grid;
        let quad = t / 2;
        let (qi, qj) = (quad % (nx - 1), quad / (nx - 1));
        let row = self.resection_line.row;
        let first = self.resection_line.endpoints.0 % nx;
        let last = self.resection_line.endpoints.1 % nx;
        (qj + 1 == row || qj == row) && qi >= first && qi < last
    }
}

fn step_in_place(state: &mut TissueState, cfg: &SimConfig, scratch: &mut Vec<Vec3>) -> Result<()> {
    let n = state.positions.len();
    let dt = cfg.dt;
    let mut w_eff = state.inv_mass.clone();
    scratch.clear();
    scratch.extend_from_slice(&state.positions);
    let pred = scratch;

    if let Some(att) = &state.grasp_attachment {
        let g = state.grippers.iter().find(|g| g.controlled).unwrap().position;
        for (&k, &off) in att.particles.iter().zip(&att.offsets) {
            w_eff[k] = 0.0;
            pred[k] = g + off;
        }
    }
    for k in 0..n {
        if w_eff[k] > 0.0 {
            let v = (state.velocities[k] + cfg.gravity * dt) * (1.0 - cfg.damping);
            pred[k] = state.positions[k] + v * dt;
            if let Some(floor) = cfg.floor_y {
                pred[k].y = pred[k].y.max(floor);
            }
        }
    }

    for _ in 0..cfg.solver_iters {
        for c in &state.constraints {
            let (a, b) = project_distance(pred[c.i], pred[c.j], w_eff[c.i], w_eff[c.j], c.rest_length, c.stiffness);
            pred[c.i] = a;
            pred[c.j] = b;
        }
        for c in &state.bending {
            let (a, b) = project_distance(pred[c.i], pred[c.j], w_eff[c.i], w_eff[c.j], c.rest_length, c.stiffness);
            pred[c.i] = a;
            pred[c.j] = b;
        }
        if let Some(floor) = cfg.floor_y {
            for k in 0..n {
                if w_eff[k] > 0.0 && pred[k].y < floor {
                    pred[k].y = floor;
                }
            }
        }
    }

    let inv_dt = 1.0 / dt;
    for k in 0..n {
        if state.inv_mass[k] == 0.0 {
            state.velocities[k] = Vec3::ZERO;
            continue;
        }
        let p = pred[k];
        if !p.is_finite() {
            return Err(Error::Diverged(format!("particle {k} left the finite range")));
        }
        state.velocities[k] = (p - state.positions[k]) * inv_dt;
        state.positions[k] = p;
    }
    Ok(())
}

/// One integrator step: predict under gravity and damping, project every
/// distance constraint `solver_iters` times (Gauss-Seidel), then derive
/// velocities from the position change.
pub fn step(state: &TissueState, cfg: &SimConfig) -> Result<TissueState> {
    let mut next = state.clone();
    let mut scratch = Vec::with_capacity(next.positions.len());
    step_in_place(&mut next, cfg, &mut scratch)?;
    Ok(next)
}

/// Phase reported to the observer of [`apply_action_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionPhase {
    Pull,
    Settle,
}

/// Executes one grasp-and-pull action and returns the settled state.
pub fn apply_action(state: &TissueState, action: Action, cfg: &SimConfig) -> Result<TissueState> {
    apply_action_with(state, action, cfg, |_, _| {})
}

/// [`apply_action`] with a callback after every integrator step.
pub fn apply_action_with(
    state: &TissueState,
    action: Action,
    cfg: &SimConfig,
    mut observe: impl FnMut(ActionPhase, &TissueState),
) -> Result<TissueState> {
    for (name, v) in [("grasp point", action.p), ("pull target", action.d)] {
        if !v.within(cfg.workspace_min, cfg.workspace_max) {
            return Err(Error::Contract(format!("{name} {v:?} outside the workspace")));
        }
    }
    let mut s = state.clone();
    s.noop_pull = false;
    s.controlled_gripper_mut().position = action.p;

    let r2 = cfg.grasp_radius * cfg.grasp_radius;
    let particles: Vec<usize> = (0..s.positions.len())
        .filter(|&k| s.inv_mass[k] > 0.0 && (s.positions[k] - action.p).norm_sq() <= r2)
        .collect();
    if particles.is_empty() {
        s.noop_pull = true;
    } else {
        let offsets = particles.iter().map(|&k| s.positions[k] - action.p).collect();
        s.grasp_attachment = Some(Attachment { particles, offsets });
    }

    let mut scratch = Vec::with_capacity(s.positions.len());
    for k in 1..=cfg.pull_substeps {
        let t = k as f64 / cfg.pull_substeps as f64;
        s.controlled_gripper_mut().position = action.p.lerp(action.d, t);
        step_in_place(&mut s, cfg, &mut scratch)?;
        observe(ActionPhase::Pull, &s);
    }
    s.controlled_gripper_mut().position = action.d;
    s.grasp_attachment = None;
    for _ in 0..cfg.settle_steps {
        step_in_place(&mut s, cfg, &mut scratch)?;
        observe(ActionPhase::Settle, &s);
    }
    Ok(s)
}

/// Writes `step,particle,x,y,z` rows for a sequence of states.
pub fn write_trajectory_csv<W: Write>(out: &mut W, states: &[TissueState]) -> std::io::Result<()> {
    writeln!(out, "step,particle,x,y,z")?;
    for (step, s) in states.iter().enumerate() {
        for (k, p) in s.positions.iter().enumerate() {
            writeln!(out, "{step},{k},{},{},{}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}
