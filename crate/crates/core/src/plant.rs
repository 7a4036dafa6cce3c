//! Planar two-joint leg driven by three tendons.
//!
//! The leg hangs from a chassis. Joint 1 (proximal) is measured from the
//! downward vertical, joint 2 (distal) relative to link 1, both positive
//! counter-clockwise. Depending on [`ChassisMode`] the chassis is either
//! welded in place or free to translate in the sagittal plane, in which case
//! the foot may touch a flat ground at `ground_height`.
//!
//! Generalized coordinates are `[x, y, q1, q2]` (chassis position, joint
//! angles). The equations of motion are assembled from per-link Jacobians,
//! `M(q) z'' = Q(z, z', a)`, and integrated with classical RK4 at a fixed
//! step. In the fixed mode only the `q` block is integrated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

pub const N_JOINTS: usize = 2;
pub const N_TENDONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChassisMode {
    /// Chassis welded in place, leg swinging in air.
    FixedInAir,
    /// Chassis on a horizontal rail, held up by a vertical spring-damper.
    GantrySliding,
    /// Chassis free in x and y, no gantry support, mass scaled up.
    Weighted,
}

impl ChassisMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChassisMode::FixedInAir => "fixed",
            ChassisMode::GantrySliding => "gantry",
            ChassisMode::Weighted => "weighted",
        }
    }
}

impl std::str::FromStr for ChassisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed-in-air" => Ok(ChassisMode::FixedInAir),
            "gantry" | "gantry-sliding" => Ok(ChassisMode::GantrySliding),
            "weighted" => Ok(ChassisMode::Weighted),
            other => Err(Error::Config(format!(
                "unknown chassis mode `{other}` (expected fixed, gantry or weighted)"
            ))),
        }
    }
}

/// Physical constants of the leg, actuators and environment. SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub link_length: [f64; N_JOINTS],
    pub link_mass: [f64; N_JOINTS],
    /// Joint-to-centre-of-mass distance along each link.
    pub link_com: [f64; N_JOINTS],
    /// Link inertia about its proximal joint.
    pub link_inertia: [f64; N_JOINTS],
    pub joint_damping: [f64; N_JOINTS],
    /// Reflected actuator inertia added on each joint axis.
    pub joint_armature: [f64; N_JOINTS],
    /// Dry (Coulomb) friction torque of each joint's drive.
    pub joint_friction: [f64; N_JOINTS],
    /// Velocity scale of the smooth Coulomb friction law (rad/s).
    pub friction_velocity: f64,
    pub joint_min: [f64; N_JOINTS],
    pub joint_max: [f64; N_JOINTS],
    /// `moment_arm[i][j]`: signed moment arm of tendon `j` about joint `i`.
    pub moment_arm: [[f64; N_TENDONS]; N_JOINTS],
    pub max_force: [f64; N_TENDONS],
    pub optimal_length: [f64; N_TENDONS],
    pub reference_posture: [f64; N_JOINTS],
    /// Normalised length of every tendon at `reference_posture`. Below 1 the
    /// tendons work on the ascending limb of the force-length curve, which
    /// gives antagonist pairs a restoring stiffness.
    pub rest_length: f64,
    /// Width of the Gaussian force-length curve, in optimal lengths.
    pub fl_width: f64,
    /// Maximum shortening speed, in optimal lengths per second.
    pub fv_vmax: f64,
    /// Cap on the force-velocity multiplier during lengthening.
    pub fv_max_ratio: f64,
    pub gravity: f64,
    pub dt_phys: f64,
    pub limit_stiffness: f64,
    pub limit_damping: f64,
    pub contact: bool,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub friction_coefficient: f64,
    /// Slope of the regularised Coulomb friction law below saturation (N·s/m).
    pub friction_damping: f64,
    pub ground_height: f64,
    pub gantry_stiffness: f64,
    pub gantry_damping: f64,
    /// Chassis height at which the gantry spring carries the whole robot.
    pub gantry_height: f64,
    pub chassis_mass: f64,
    pub chassis_rail_damping: f64,
    /// Chassis mass multiplier in [`ChassisMode::Weighted`].
    pub weight_factor: f64,
    /// Hip height in [`ChassisMode::FixedInAir`].
    pub hip_height: f64,
    pub mode: ChassisMode,
}

impl Default for PlantParams {
    fn default() -> Self {
        let link_length = [0.11, 0.11];
        let link_mass = [0.09, 0.06];
        let joint_min = [0.0, -1.0];
        let joint_max = [0.8, 0.0];
        PlantParams {
            link_length,
            link_mass,
            link_com: [0.5 * link_length[0], 0.5 * link_length[1]],
            link_inertia: [
                link_mass[0] * link_length[0] * link_length[0] / 3.0,
                link_mass[1] * link_length[1] * link_length[1] / 3.0,
            ],
            joint_damping: [0.4, 0.2],
            joint_armature: [0.003, 0.002],
            joint_friction: [0.1, 0.1],
            friction_velocity: 0.05,
            joint_min,
            joint_max,
            moment_arm: [[0.02, -0.02, 0.015], [0.0, 0.01, -0.01]],
            max_force: [40.0; N_TENDONS],
            optimal_length: [0.05; N_TENDONS],
            reference_posture: [0.0, -0.6],
            rest_length: 0.7,
            fl_width: 0.5,
            fv_vmax: 10.0,
            fv_max_ratio: 1.5,
            gravity: 9.81,
            dt_phys: 1e-3,
            limit_stiffness: 200.0,
            limit_damping: 2.0,
            contact: false,
            contact_stiffness: 5000.0,
            contact_damping: 20.0,
            friction_coefficient: 0.8,
            friction_damping: 20.0,
            ground_height: 0.0,
            gantry_stiffness: 300.0,
            gantry_damping: 10.0,
            gantry_height: 0.25,
            chassis_mass: 0.02,
            chassis_rail_damping: 2.0,
            weight_factor: 5.0,
            hip_height: 0.5,
            mode: ChassisMode::FixedInAir,
        }
    }
}

/// Every key accepted by [`PlantParams::set`], in canonical order.
pub const PLANT_KEYS: &[&str] = &[
    "link1_length",
    "link2_length",
    "link1_mass",
    "link2_mass",
    "link1_com",
    "link2_com",
    "link1_inertia",
    "link2_inertia",
    "joint1_damping",
    "joint2_damping",
    "joint1_armature",
    "joint2_armature",
    "joint1_friction",
    "joint2_friction",
    "friction_velocity",
    "joint1_min",
    "joint1_max",
    "joint2_min",
    "joint2_max",
    "moment_arm_1_1",
    "moment_arm_1_2",
    "moment_arm_1_3",
    "moment_arm_2_1",
    "moment_arm_2_2",
    "moment_arm_2_3",
    "max_force_1",
    "max_force_2",
    "max_force_3",
    "optimal_length_1",
    "optimal_length_2",
    "optimal_length_3",
    "reference_angle_1",
    "reference_angle_2",
    "rest_length",
    "fl_width",
    "fv_vmax",
    "fv_max_ratio",
    "gravity",
    "dt_phys",
    "limit_stiffness",
    "limit_damping",
    "contact",
    "contact_stiffness",
    "contact_damping",
    "friction_coefficient",
    "friction_damping",
    "ground_height",
    "gantry_stiffness",
    "gantry_damping",
    "gantry_height",
    "chassis_mass",
    "chassis_rail_damping",
    "weight_factor",
    "hip_height",
    "chassis_mode",
];

fn indexed(key: &str, prefix: &str, suffix: &str, n: usize) -> Option<usize> {
    let mid = key.strip_prefix(prefix)?.strip_suffix(suffix)?;
    let i: usize = mid.parse().ok()?;
    (1..=n).contains(&i).then(|| i - 1)
}

impl PlantParams {
    /// Preset for the gantry locomotion task: foot `depth` metres below the
    /// ground line when the chassis is at its rest height and the leg is at
    /// `posture`.
    pub fn gantry(depth: f64, posture: [f64; N_JOINTS]) -> Self {
        PlantParams::default().with_gantry(depth, posture)
    }

    /// Preset for standing under a chassis load.
    pub fn weighted(weight_factor: f64) -> Self {
        PlantParams::default().with_weight(weight_factor)
    }

    /// These parameters switched to gantry mode (see [`PlantParams::gantry`]).
    pub fn with_gantry(&self, depth: f64, posture: [f64; N_JOINTS]) -> Self {
        let mut p = PlantParams {
            mode: ChassisMode::GantrySliding,
            contact: true,
            ..self.clone()
        };
        p.gantry_height = p.ground_height + p.foot_drop(posture) - depth;
        p
    }

    /// These parameters switched to weighted-chassis mode.
    pub fn with_weight(&self, weight_factor: f64) -> Self {
        PlantParams {
            mode: ChassisMode::Weighted,
            contact: true,
            weight_factor,
            ..self.clone()
        }
    }

    pub fn joint_center(&self) -> [f64; N_JOINTS] {
        [
            0.5 * (self.joint_min[0] + self.joint_max[0]),
            0.5 * (self.joint_min[1] + self.joint_max[1]),
        ]
    }

    /// Chassis mass as seen by the dynamics in the current mode.
    pub fn effective_chassis_mass(&self) -> f64 {
        match self.mode {
            ChassisMode::Weighted => self.chassis_mass * self.weight_factor,
            _ => self.chassis_mass,
        }
    }

    /// Vertical distance from hip to foot at `q`.
    pub fn foot_drop(&self, q: [f64; N_JOINTS]) -> f64 {
        self.link_length[0] * q[0].cos() + self.link_length[1] * (q[0] + q[1]).cos()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for i in 0..N_JOINTS {
            if !(self.link_length[i] > 0.0) || !(self.link_mass[i] > 0.0) {
                return bad(format!("link {} length and mass must be positive", i + 1));
            }
            if !(self.link_com[i] >= 0.0 && self.link_com[i] <= self.link_length[i]) {
                return bad(format!("link {} centre of mass must lie on the link", i + 1));
            }
            let com_term = self.link_mass[i] * self.link_com[i] * self.link_com[i];
            if !(self.link_inertia[i] >= com_term) {
                return bad(format!(
                    "link {} inertia about the joint must be at least m*c^2",
                    i + 1
                ));
            }
            if !(self.joint_min[i] < self.joint_max[i]) {
                return bad(format!("joint {} limits must satisfy min < max", i + 1));
            }
            if self.joint_damping[i] < 0.0 {
                return bad(format!("joint {} damping must be non-negative", i + 1));
            }
            if !(self.joint_armature[i] >= 0.0) {
                return bad(format!("joint {} armature must be non-negative", i + 1));
            }
            if !(self.joint_friction[i] >= 0.0) {
                return bad(format!("joint {} friction must be non-negative", i + 1));
            }
        }
        for j in 0..N_TENDONS {
            if !(self.max_force[j] > 0.0) || !(self.optimal_length[j] > 0.0) {
                return bad(format!(
                    "tendon {} max force and optimal length must be positive",
                    j + 1
                ));
            }
            if self.moment_arm.iter().all(|row| row[j] == 0.0) {
                return bad(format!("tendon {} actuates no joint", j + 1));
            }
        }
        if moment_arm_rank(&self.moment_arm) < N_JOINTS {
            return bad("moment-arm matrix must have full row rank".into());
        }
        if !(self.dt_phys > 0.0) {
            return bad("dt_phys must be positive".into());
        }
        if !(self.rest_length > 0.0) || !(self.fl_width > 0.0) || !(self.fv_vmax > 0.0) || !(self.fv_max_ratio >= 1.0) {
            return bad("Hill curve constants out of range".into());
        }
        if !(self.friction_velocity > 0.0) {
            return bad("friction_velocity must be positive".into());
        }
        let nonneg = [
            self.gravity,
            self.limit_stiffness,
            self.limit_damping,
            self.contact_stiffness,
            self.contact_damping,
            self.friction_coefficient,
            self.friction_damping,
            self.gantry_stiffness,
            self.gantry_damping,
            self.chassis_mass,
            self.chassis_rail_damping,
            self.weight_factor,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return bad("stiffness, damping, mass and gravity constants must be non-negative".into());
        }
        Ok(())
    }

    /// Assign one config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "chassis_mode" {
            self.mode = value.parse()?;
            return Ok(());
        }
        if key == "contact" {
            self.contact = kv::parse_bool(key, value)?;
            return Ok(());
        }
        let v = kv::parse_f64(key, value)?;
        let slot: &mut f64 = if let Some(i) = indexed(key, "link", "_length", 2) {
            &mut self.link_length[i]
        } else if let Some(i) = indexed(key, "link", "_mass", 2) {
            &mut self.link_mass[i]
        } else if let Some(i) = indexed(key, "link", "_com", 2) {
            &mut self.link_com[i]
        } else if let Some(i) = indexed(key, "link", "_inertia", 2) {
            &mut self.link_inertia[i]
        } else if let Some(i) = indexed(key, "joint", "_damping", 2) {
            &mut self.joint_damping[i]
        } else if let Some(i) = indexed(key, "joint", "_armature", 2) {
            &mut self.joint_armature[i]
        } else if let Some(i) = indexed(key, "joint", "_friction", 2) {
            &mut self.joint_friction[i]
        } else if let Some(i) = indexed(key, "joint", "_min", 2) {
            &mut self.joint_min[i]
        } else if let Some(i) = indexed(key, "joint", "_max", 2) {
            &mut self.joint_max[i]
        } else if let Some(i) = indexed(key, "max_force_", "", 3) {
            &mut self.max_force[i]
        } else if let Some(i) = indexed(key, "optimal_length_", "", 3) {
            &mut self.optimal_length[i]
        } else if let Some(i) = indexed(key, "reference_angle_", "", 2) {
            &mut self.reference_posture[i]
        } else if let Some(rest) = key.strip_prefix("moment_arm_") {
            let (i, j) = rest
                .split_once('_')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .filter(|&(i, j)| (1..=2).contains(&i) && (1..=3).contains(&j))
                .ok_or_else(|| Error::Config(format!("unknown plant key `{key}`")))?;
            &mut self.moment_arm[i - 1][j - 1]
        } else {
            match key {
                "rest_length" => &mut self.rest_length,
                "fl_width" => &mut self.fl_width,
                "fv_vmax" => &mut self.fv_vmax,
                "fv_max_ratio" => &mut self.fv_max_ratio,
                "gravity" => &mut self.gravity,
                "dt_phys" => &mut self.dt_phys,
                "limit_stiffness" => &mut self.limit_stiffness,
                "limit_damping" => &mut self.limit_damping,
                "contact_stiffness" => &mut self.contact_stiffness,
                "contact_damping" => &mut self.contact_damping,
                "friction_coefficient" => &mut self.friction_coefficient,
                "friction_damping" => &mut self.friction_damping,
                "friction_velocity" => &mut self.friction_velocity,
                "ground_height" => &mut self.ground_height,
                "gantry_stiffness" => &mut self.gantry_stiffness,
                "gantry_damping" => &mut self.gantry_damping,
                "gantry_height" => &mut self.gantry_height,
                "chassis_mass" => &mut self.chassis_mass,
                "chassis_rail_damping" => &mut self.chassis_rail_damping,
                "weight_factor" => &mut self.weight_factor,
                "hip_height" => &mut self.hip_height,
                _ => return Err(Error::Config(format!("unknown plant key `{key}`"))),
            }
        };
        *slot = v;
        Ok(())
    }

    /// Resolved parameters as ordered key/value pairs (inverse of [`set`](Self::set)).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let f = kv::fmt_f64;
        let mut out = Vec::with_capacity(PLANT_KEYS.len());
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        for i in 0..2 {
            push(&format!("link{}_length", i + 1), f(self.link_length[i]));
        }
        for i in 0..2 {
            push(&format!("link{}_mass", i + 1), f(self.link_mass[i]));
        }
        for i in 0..2 {
            push(&format!("link{}_com", i + 1), f(self.link_com[i]));
        }
        for i in 0..2 {
            push(&format!("link{}_inertia", i + 1), f(self.link_inertia[i]));
        }
        for i in 0..2 {
            push(&format!("joint{}_damping", i + 1), f(self.joint_damping[i]));
        }
        for i in 0..2 {
            push(&format!("joint{}_armature", i + 1), f(self.joint_armature[i]));
        }
        for i in 0..2 {
            push(&format!("joint{}_friction", i + 1), f(self.joint_friction[i]));
        }
        push("friction_velocity", f(self.friction_velocity));
        for i in 0..2 {
            push(&format!("joint{}_min", i + 1), f(self.joint_min[i]));
            push(&format!("joint{}_max", i + 1), f(self.joint_max[i]));
        }
        for i in 0..2 {
            for j in 0..3 {
                push(&format!("moment_arm_{}_{}", i + 1, j + 1), f(self.moment_arm[i][j]));
            }
        }
        for j in 0..3 {
            push(&format!("max_force_{}", j + 1), f(self.max_force[j]));
        }
        for j in 0..3 {
            push(&format!("optimal_length_{}", j + 1), f(self.optimal_length[j]));
        }
        for i in 0..2 {
            push(&format!("reference_angle_{}", i + 1), f(self.reference_posture[i]));
        }
        push("rest_length", f(self.rest_length));
        push("fl_width", f(self.fl_width));
        push("fv_vmax", f(self.fv_vmax));
        push("fv_max_ratio", f(self.fv_max_ratio));
        push("gravity", f(self.gravity));
        push("dt_phys", f(self.dt_phys));
        push("limit_stiffness", f(self.limit_stiffness));
        push("limit_damping", f(self.limit_damping));
        push("contact", self.contact.to_string());
        push("contact_stiffness", f(self.contact_stiffness));
        push("contact_damping", f(self.contact_damping));
        push("friction_coefficient", f(self.friction_coefficient));
        push("friction_damping", f(self.friction_damping));
        push("ground_height", f(self.ground_height));
        push("gantry_stiffness", f(self.gantry_stiffness));
        push("gantry_damping", f(self.gantry_damping));
        push("gantry_height", f(self.gantry_height));
        push("chassis_mass", f(self.chassis_mass));
        push("chassis_rail_damping", f(self.chassis_rail_damping));
        push("weight_factor", f(self.weight_factor));
        push("hip_height", f(self.hip_height));
        push("chassis_mode", self.mode.as_str().to_string());
        out
    }

    /// Load from a flat `key = value` file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut p = PlantParams::default();
        for e in kv::read(path)? {
            p.set(&e.key, &e.value)
                .map_err(|err| Error::parse(path, format!("line {}: {err}", e.line)))?;
        }
        p.validate()?;
        Ok(p)
    }
}

fn moment_arm_rank(r: &[[f64; N_TENDONS]; N_JOINTS]) -> usize {
    let nonzero = r.iter().flatten().any(|v| *v != 0.0);
    if !nonzero {
        return 0;
    }
    let scale = r.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * scale;
    for a in 0..N_TENDONS {
        for b in (a + 1)..N_TENDONS {
            let det = r[0][a] * r[1][b] - r[0][b] * r[1][a];
            if det.abs() > tol {
                return 2;
            }
        }
    }
    1
}

/// Three actuator drives, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationVector([f64; N_TENDONS]);

impl ActivationVector {
    pub const ZERO: ActivationVector = ActivationVector([0.0; N_TENDONS]);

    /// Clamp each element into `[0, 1]`. Non-finite input is rejected.
    pub fn clamped(a: [f64; N_TENDONS]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite activation {a:?}")));
        }
        Ok(ActivationVector(a.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn as_array(&self) -> [f64; N_TENDONS] {
        self.0
    }
}

/// Joint and chassis state of the leg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: [f64; N_JOINTS],
    pub qd: [f64; N_JOINTS],
    pub chassis_x: f64,
    pub chassis_xd: f64,
    pub chassis_y: f64,
    pub chassis_yd: f64,
    pub time: f64,
    /// Number of physics steps taken since initialisation.
    pub steps: u64,
}

impl PlantState {
    /// Leg at rest in posture `q`, chassis at its mode-dependent rest height.
    pub fn at_rest(q: [f64; N_JOINTS], params: &PlantParams) -> Self {
        let y = match params.mode {
            ChassisMode::FixedInAir => params.hip_height,
            ChassisMode::GantrySliding => params.gantry_height,
            // Foot exactly touching the ground.
            ChassisMode::Weighted => params.ground_height + params.foot_drop(q),
        };
        PlantState {
            q,
            qd: [0.0; N_JOINTS],
            chassis_x: 0.0,
            chassis_xd: 0.0,
            chassis_y: y,
            chassis_yd: 0.0,
            time: 0.0,
            steps: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qd).all(|v| v.is_finite())
            && [
                self.chassis_x,
                self.chassis_xd,
                self.chassis_y,
                self.chassis_yd,
                self.time,
            ]
            .iter()
            .all(|v| v.is_finite())
    }

    fn to_vec(self) -> [f64; 8] {
        [
            self.chassis_x,
            self.chassis_y,
            self.q[0],
            self.q[1],
            self.chassis_xd,
            self.chassis_yd,
            self.qd[0],
            self.qd[1],
        ]
    }

    fn with_vec(mut self, z: &[f64; 8]) -> Self {
        self.chassis_x = z[0];
        self.chassis_y = z[1];
        self.q = [z[2], z[3]];
        self.chassis_xd = z[4];
        self.chassis_yd = z[5];
        self.qd = [z[6], z[7]];
        self
    }
}

/// Joint-angle sensor: exactly the joint-angle fields, no noise.
pub fn observe(state: &PlantState) -> [f64; N_JOINTS] {
    state.q
}

fn force_length(norm_len: f64, width: f64) -> f64 {
    let x = (norm_len - 1.0) / width;
    (-x * x).exp()
}

fn force_velocity(norm_shortening: f64, vmax: f64, cap: f64) -> f64 {
    (1.0 - norm_shortening / vmax).clamp(0.0, cap)
}

fn tendon_forces_unchecked(
    a: &[f64; N_TENDONS],
    q: &[f64; N_JOINTS],
    qd: &[f64; N_JOINTS],
    p: &PlantParams,
) -> [f64; N_TENDONS] {
    let mut f = [0.0; N_TENDONS];
    for j in 0..N_TENDONS {
        if a[j] == 0.0 {
            continue;
        }
        let mut stretch = 0.0;
        let mut shortening = 0.0;
        for i in 0..N_JOINTS {
            stretch -= p.moment_arm[i][j] * (q[i] - p.reference_posture[i]);
            shortening += p.moment_arm[i][j] * qd[i];
        }
        let l = p.rest_length + stretch / p.optimal_length[j];
        let v = shortening / p.optimal_length[j];
        f[j] = p.max_force[j]
            * a[j]
            * force_length(l, p.fl_width)
            * force_velocity(v, p.fv_vmax, p.fv_max_ratio);
    }
    f
}

/// Tendon tensions for activation `a` at joint angles `q`, velocities `qd`.
///
/// Tendon `j` shortens at `sum_i R[i][j] * qd[i]` and has normalised length
/// `rest_length` at the reference posture; tension is
/// `F_max * a * f_L(length) * f_V(shortening speed)`.
pub fn tendon_forces(
    a: &ActivationVector,
    q: &[f64; N_JOINTS],
    qd: &[f64; N_JOINTS],
    params: &PlantParams,
) -> Result<[f64; N_TENDONS]> {
    if q.iter().chain(qd).chain(&a.0).any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(format!(
            "non-finite tendon input q={q:?} qd={qd:?} a={:?}",
            a.0
        )));
    }
    Ok(tendon_forces_unchecked(&a.0, q, qd, params))
}

/// `tau = R f`.
pub fn joint_torques(tensions: &[f64; N_TENDONS], params: &PlantParams) -> [f64; N_JOINTS] {
    let r = &params.moment_arm;
    [
        r[0][0] * tensions[0] + r[0][1] * tensions[1] + r[0][2] * tensions[2],
        r[1][0] * tensions[0] + r[1][1] * tensions[1] + r[1][2] * tensions[2],
    ]
}

fn limit_torque(q: f64, qd: f64, lo: f64, hi: f64, k: f64, c: f64) -> f64 {
    if q < lo {
        (k * (lo - q) - c * qd).max(0.0)
    } else if q > hi {
        (k * (hi - q) - c * qd).min(0.0)
    } else {
        0.0
    }
}

/// Kinematic quantities shared by the mass matrix, forces and energy.
struct Kin {
    s1: f64,
    c1: f64,
    s12: f64,
    c12: f64,
    /// Jacobian columns for q1, q2 of each link COM and the foot (x, y rows).
    j1: [f64; 2],
    j2q1: [f64; 2],
    j2q2: [f64; 2],
    jf_q1: [f64; 2],
    jf_q2: [f64; 2],
}

impl Kin {
    fn new(q: [f64; 2], p: &PlantParams) -> Self {
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        let (l1, l2) = (p.link_length[0], p.link_length[1]);
        let (a1, a2) = (p.link_com[0], p.link_com[1]);
        Kin {
            s1,
            c1,
            s12,
            c12,
            j1: [a1 * c1, a1 * s1],
            j2q1: [l1 * c1 + a2 * c12, l1 * s1 + a2 * s12],
            j2q2: [a2 * c12, a2 * s12],
            jf_q1: [l1 * c1 + l2 * c12, l1 * s1 + l2 * s12],
            jf_q2: [l2 * c12, l2 * s12],
        }
    }
}

/// Foot position (x, y) in the world frame.
pub fn foot_position(state: &PlantState, params: &PlantParams) -> [f64; 2] {
    let k = Kin::new(state.q, params);
    let (l1, l2) = (params.link_length[0], params.link_length[1]);
    [
        state.chassis_x + l1 * k.s1 + l2 * k.s12,
        state.chassis_y - l1 * k.c1 - l2 * k.c12,
    ]
}

fn foot_velocity(k: &Kin, z: &[f64; 8]) -> [f64; 2] {
    [
        z[4] + k.jf_q1[0] * z[6] + k.jf_q2[0] * z[7],
        z[5] + k.jf_q1[1] * z[6] + k.jf_q2[1] * z[7],
    ]
}

fn contact_force_at(k: &Kin, z: &[f64; 8], p: &PlantParams) -> [f64; 2] {
    if !p.contact {
        return [0.0, 0.0];
    }
    let (l1, l2) = (p.link_length[0], p.link_length[1]);
    let foot_y = z[1] - l1 * k.c1 - l2 * k.c12;
    let pen = p.ground_height - foot_y;
    if pen <= 0.0 {
        return [0.0, 0.0];
    }
    let v = foot_velocity(k, z);
    let normal = (p.contact_stiffness * pen - p.contact_damping * v[1]).max(0.0);
    let cap = p.friction_coefficient * normal;
    let tangential = (-p.friction_damping * v[0]).clamp(-cap, cap);
    [tangential, normal]
}

/// Ground reaction force on the foot (x, y); zero when the foot is above ground.
pub fn ground_reaction(state: &PlantState, params: &PlantParams) -> [f64; 2] {
    let k = Kin::new(state.q, params);
    contact_force_at(&k, &state.to_vec(), params)
}

/// Full 4x4 mass matrix in coordinates `[x, y, q1, q2]`.
fn mass_matrix(k: &Kin, p: &PlantParams, chassis_mass: f64) -> [[f64; 4]; 4] {
    let (m1, m2) = (p.link_mass[0], p.link_mass[1]);
    let icom1 = p.link_inertia[0] - m1 * p.link_com[0] * p.link_com[0];
    let icom2 = p.link_inertia[1] - m2 * p.link_com[1] * p.link_com[1];
    // Jacobian rows of each COM: [dx/dz; dy/dz].
    let j1 = [[1.0, 0.0, k.j1[0], 0.0], [0.0, 1.0, k.j1[1], 0.0]];
    let j2 = [
        [1.0, 0.0, k.j2q1[0], k.j2q2[0]],
        [0.0, 1.0, k.j2q1[1], k.j2q2[1]],
    ];
    let mut m = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in a..4 {
            let v = m1 * (j1[0][a] * j1[0][b] + j1[1][a] * j1[1][b])
                + m2 * (j2[0][a] * j2[0][b] + j2[1][a] * j2[1][b]);
            m[a][b] = v;
            m[b][a] = v;
        }
    }
    m[0][0] += chassis_mass;
    m[1][1] += chassis_mass;
    // Rotational terms: link 1 spins at q1', link 2 at q1' + q2'.
    m[2][2] += icom1 + icom2;
    m[2][3] += icom2;
    m[3][2] += icom2;
    m[3][3] += icom2 + p.joint_armature[1];
    m[2][2] += p.joint_armature[0];
    m
}

/// Solve `m x = b` for symmetric positive definite `m` (Cholesky).
fn solve_spd<const N: usize>(m: &[[f64; N]; N], b: &[f64; N]) -> [f64; N] {
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; N];
    for i in 0..N {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        let mut s = y[i];
        for k in (i + 1)..N {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Generalised forces (everything except `M z''`) for state `z`.
fn generalized_forces(
    k: &Kin,
    z: &[f64; 8],
    a: &[f64; N_TENDONS],
    extra_torque: [f64; N_JOINTS],
    p: &PlantParams,
    chassis_mass: f64,
) -> [f64; 4] {
    let (m1, m2) = (p.link_mass[0], p.link_mass[1]);
    let (l1, a1, a2) = (p.link_length[0], p.link_com[0], p.link_com[1]);
    let g = p.gravity;
    let (w1, w12) = (z[6], z[6] + z[7]);
    let q = [z[2], z[3]];
    let qd = [z[6], z[7]];

    // Velocity-product accelerations of each COM.
    let b1 = [-a1 * k.s1 * w1 * w1, a1 * k.c1 * w1 * w1];
    let b2 = [
        -l1 * k.s1 * w1 * w1 - a2 * k.s12 * w12 * w12,
        l1 * k.c1 * w1 * w1 + a2 * k.c12 * w12 * w12,
    ];
    // Net "applied minus inertial-bias" force on each COM.
    let f1 = [-m1 * b1[0], -m1 * g - m1 * b1[1]];
    let f2 = [-m2 * b2[0], -m2 * g - m2 * b2[1]];

    let mut qf = [
        f1[0] + f2[0],
        f1[1] + f2[1],
        k.j1[0] * f1[0] + k.j1[1] * f1[1] + k.j2q1[0] * f2[0] + k.j2q1[1] * f2[1],
        k.j2q2[0] * f2[0] + k.j2q2[1] * f2[1],
    ];

    let tensions = tendon_forces_unchecked(a, &q, &qd, p);
    let tau = joint_torques(&tensions, p);
    for i in 0..N_JOINTS {
        qf[2 + i] += tau[i] + extra_torque[i] - p.joint_damping[i] * qd[i]
            - p.joint_friction[i] * (qd[i] / p.friction_velocity).tanh()
            + limit_torque(
                q[i],
                qd[i],
                p.joint_min[i],
                p.joint_max[i],
                p.limit_stiffness,
                p.limit_damping,
            );
    }

    if p.mode != ChassisMode::FixedInAir {
        qf[1] -= chassis_mass * g;
        qf[0] -= p.chassis_rail_damping * z[4];
        if p.mode == ChassisMode::GantrySliding {
            let total = chassis_mass + m1 + m2;
            qf[1] += total * g + p.gantry_stiffness * (p.gantry_height - z[1])
                - p.gantry_damping * z[5];
        }
    }
    let fc = contact_force_at(k, z, p);
    if fc != [0.0, 0.0] {
        qf[0] += fc[0];
        qf[1] += fc[1];
        qf[2] += k.jf_q1[0] * fc[0] + k.jf_q1[1] * fc[1];
        qf[3] += k.jf_q2[0] * fc[0] + k.jf_q2[1] * fc[1];
    }
    qf
}

fn derivative(
    z: &[f64; 8],
    a: &[f64; N_TENDONS],
    extra_torque: [f64; N_JOINTS],
    p: &PlantParams,
) -> [f64; 8] {
    let k = Kin::new([z[2], z[3]], p);
    let mc = p.effective_chassis_mass();
    let m = mass_matrix(&k, p, mc);
    let qf = generalized_forces(&k, z, a, extra_torque, p, mc);
    let acc = match p.mode {
        ChassisMode::FixedInAir => {
            let sub = [[m[2][2], m[2][3]], [m[3][2], m[3][3]]];
            let qa = solve_spd(&sub, &[qf[2], qf[3]]);
            [0.0, 0.0, qa[0], qa[1]]
        }
        _ => solve_spd(&m, &qf),
    };
    let mut dz = [0.0; 8];
    if p.mode != ChassisMode::FixedInAir {
        dz[0] = z[4];
        dz[1] = z[5];
    }
    dz[2] = z[6];
    dz[3] = z[7];
    dz[4..].copy_from_slice(&acc);
    dz
}

/// Generalised accelerations `[x'', y'', q1'', q2'']` at `state` with an
/// additional joint torque applied on top of the modelled forces.
pub fn accelerations(
    state: &PlantState,
    a: &ActivationVector,
    extra_torque: [f64; N_JOINTS],
    params: &PlantParams,
) -> [f64; 4] {
    let dz = derivative(&state.to_vec(), &a.0, extra_torque, params);
    [dz[4], dz[5], dz[6], dz[7]]
}

/// Advance one physics step of `dt_phys` with RK4, activation held constant.
pub fn step(state: &PlantState, a: &ActivationVector, params: &PlantParams) -> Result<PlantState> {
    if !state.is_finite() {
        return Err(Error::InvalidState(format!("non-finite state {state:?}")));
    }
    let h = params.dt_phys;
    let z = state.to_vec();
    let act = &a.0;
    let none = [0.0; N_JOINTS];
    let add = |base: &[f64; 8], d: &[f64; 8], s: f64| -> [f64; 8] {
        let mut out = *base;
        for i in 0..8 {
            out[i] += s * d[i];
        }
        out
    };
    let k1 = derivative(&z, act, none, params);
    let k2 = derivative(&add(&z, &k1, 0.5 * h), act, none, params);
    let k3 = derivative(&add(&z, &k2, 0.5 * h), act, none, params);
    let k4 = derivative(&add(&z, &k3, h), act, none, params);
    let mut next = z;
    for i in 0..8 {
        next[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let mut out = state.with_vec(&next);
    out.steps = state.steps + 1;
    out.time = out.steps as f64 * h;
    if !out.is_finite() {
        return Err(Error::Diverged { step: out.steps });
    }
    Ok(out)
}

/// Kinetic plus gravitational potential energy (springs excluded).
pub fn mechanical_energy(state: &PlantState, params: &PlantParams) -> f64 {
    let z = state.to_vec();
    let k = Kin::new(state.q, params);
    let mc = if params.mode == ChassisMode::FixedInAir {
        0.0
    } else {
        params.effective_chassis_mass()
    };
    let m = mass_matrix(&k, params, mc);
    let v = [z[4], z[5], z[6], z[7]];
    let mut ke = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            ke += 0.5 * v[a] * m[a][b] * v[b];
        }
    }
    let (l1, a1, a2) = (params.link_length[0], params.link_com[0], params.link_com[1]);
    let y = state.chassis_y;
    let y1 = y - a1 * k.c1;
    let y2 = y - l1 * k.c1 - a2 * k.c12;
    let g = params.gravity;
    ke + g * (params.link_mass[0] * y1 + params.link_mass[1] * y2 + mc * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_validate() {
        PlantParams::default().validate().unwrap();
        PlantParams::gantry(0.01, PlantParams::default().joint_center())
            .validate()
            .unwrap();
        PlantParams::weighted(5.0).validate().unwrap();
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut p = PlantParams::default();
        p.joint_min[1] = 0.5;
        p.joint_max[1] = 0.5;
        assert!(p.validate().is_err());

        let mut p = PlantParams::default();
        p.moment_arm = [[0.02, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(p.validate().is_err());

        // Rank-deficient: second row a multiple of the first.
        let mut p = PlantParams::default();
        p.moment_arm = [[0.02, -0.02, 0.01], [0.01, -0.01, 0.005]];
        assert!(p.validate().is_err());

        let mut p = PlantParams::default();
        p.dt_phys = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_activation_gives_zero_tension() {
        let p = PlantParams::default();
        let f = tendon_forces(&ActivationVector::ZERO, &[0.3, -0.4], &[1.0, -2.0], &p).unwrap();
        assert_eq!(f, [0.0; 3]);
    }

    /// Posture at which tendon 1 (which only spans joint 1) is at its optimal length.
    fn tendon1_optimum(p: &PlantParams) -> [f64; 2] {
        let dq = -(1.0 - p.rest_length) * p.optimal_length[0] / p.moment_arm[0][0];
        [p.reference_posture[0] + dq, p.reference_posture[1]]
    }

    #[test]
    fn full_activation_at_optimum_gives_max_force() {
        let p = PlantParams::default();
        let a = ActivationVector::clamped([1.0, 0.0, 0.0]).unwrap();
        let f = tendon_forces(&a, &tendon1_optimum(&p), &[0.0, 0.0], &p).unwrap();
        assert_relative_eq!(f[0], p.max_force[0], max_relative = 1e-15);
        assert_eq!(&f[1..], &[0.0, 0.0]);
        // At the reference posture every tendon sits at the rest length.
        let f = tendon_forces(&a, &p.reference_posture, &[0.0, 0.0], &p).unwrap();
        assert_relative_eq!(f[0], 40.0 * (-0.36f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn half_activation_at_stretched_posture_matches_hand_evaluation() {
        let p = PlantParams::default();
        // q - q_ref = (0.25, -0.3); R columns: (0.02,0), (-0.02,0.01), (0.015,-0.01).
        let q = [0.25, -0.9];
        // stretch_j = -(R1j*0.25 + R2j*(-0.3)), l = 0.7 + stretch / 0.05
        //   t1: -(0.005)         = -0.005   -> l = 0.6
        //   t2: -(-0.005-0.003)  =  0.008   -> l = 0.86
        //   t3: -(0.00375+0.003) = -0.00675 -> l = 0.565
        let expect = |l: f64| 20.0 * (-((l - 1.0) / 0.5f64).powi(2)).exp();
        let a = ActivationVector::clamped([0.5; 3]).unwrap();
        let f = tendon_forces(&a, &q, &[0.0, 0.0], &p).unwrap();
        assert_relative_eq!(f[0], expect(0.6), max_relative = 1e-12);
        assert_relative_eq!(f[1], expect(0.86), max_relative = 1e-12);
        assert_relative_eq!(f[2], expect(0.565), max_relative = 1e-12);
        // Numeric values: 20*exp(-0.64), 20*exp(-0.0784), 20*exp(-0.7569).
        assert_relative_eq!(f[0], 10.545848480860972, max_relative = 1e-12);
        assert_relative_eq!(f[1], 18.491890295204215, max_relative = 1e-12);
        assert_relative_eq!(f[2], 9.382368847893282, max_relative = 1e-12);
    }

    #[test]
    fn force_velocity_shape() {
        let p = PlantParams::default();
        let a = ActivationVector::clamped([1.0, 0.0, 0.0]).unwrap();
        // Shortening at 5 optimal lengths/s halves the force.
        let q = tendon1_optimum(&p);
        let qd = [5.0 * p.optimal_length[0] / p.moment_arm[0][0], 0.0];
        let f = tendon_forces(&a, &q, &qd, &p).unwrap();
        assert_relative_eq!(f[0], 0.5 * p.max_force[0], max_relative = 1e-12);
        // Fast lengthening saturates at the cap.
        let f = tendon_forces(&a, &q, &[-100.0, 0.0], &p).unwrap();
        assert_relative_eq!(f[0], 1.5 * p.max_force[0], max_relative = 1e-12);
        // Shortening beyond vmax gives no force.
        let f = tendon_forces(&a, &q, &[100.0, 0.0], &p).unwrap();
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn tendon_forces_reject_non_finite() {
        let p = PlantParams::default();
        let a = ActivationVector::clamped([0.5; 3]).unwrap();
        assert!(tendon_forces(&a, &[f64::NAN, 0.0], &[0.0, 0.0], &p).is_err());
        assert!(ActivationVector::clamped([0.1, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn activation_is_clamped() {
        let a = ActivationVector::clamped([-0.2, 0.4, 1.7]).unwrap();
        assert_eq!(a.as_array(), [0.0, 0.4, 1.0]);
    }

    #[test]
    fn joint_torque_examples() {
        let p = PlantParams::default();
        assert_eq!(joint_torques(&[0.0; 3], &p), [0.0, 0.0]);
        let tau = joint_torques(&[10.0, 5.0, 8.0], &p);
        assert_relative_eq!(tau[0], 0.22, epsilon = 1e-12);
        assert_relative_eq!(tau[1], -0.03, epsilon = 1e-12);

        let mut sym = PlantParams::default();
        sym.moment_arm[0] = [0.03, -0.03, 0.0];
        assert_eq!(joint_torques(&[7.0, 7.0, 0.0], &sym)[0], 0.0);
    }

    #[test]
    fn observe_projects_joint_angles() {
        let p = PlantParams::default();
        let mut s = PlantState::at_rest(p.joint_center(), &p);
        assert_eq!(observe(&s), p.joint_center());
        s.q = [0.3, -0.2];
        assert_eq!(observe(&s), [0.3, -0.2]);
    }

    #[test]
    fn no_forces_means_no_motion() {
        let mut p = PlantParams::default();
        p.gravity = 0.0;
        p.joint_damping = [0.0; 2];
        let s0 = PlantState::at_rest([0.1, -0.5], &p);
        let s1 = step(&s0, &ActivationVector::ZERO, &p).unwrap();
        assert_eq!(s1.q, s0.q);
        assert_eq!(s1.qd, s0.qd);
        assert_eq!(observe(&s1), observe(&s0));
        assert_eq!(s1.time, p.dt_phys);
        assert_eq!(s1.steps, 1);
    }

    #[test]
    fn locked_distal_joint_matches_compound_pendulum() {
        let mut p = PlantParams::default();
        p.joint_min = [-3.0, -3.0];
        p.joint_max = [3.0, 3.0];
        let s = PlantState::at_rest([std::f64::consts::FRAC_PI_2, 0.0], &p);
        // Find the distal torque that holds q2'' = 0 (acceleration is affine in it).
        let a = ActivationVector::ZERO;
        let acc0 = accelerations(&s, &a, [0.0, 0.0], &p);
        let acc1 = accelerations(&s, &a, [0.0, 1.0], &p);
        let lock = -acc0[3] / (acc1[3] - acc0[3]);
        let acc = accelerations(&s, &a, [0.0, lock], &p);
        assert!(acc[3].abs() < 1e-9);

        let (m1, m2) = (p.link_mass[0], p.link_mass[1]);
        let (c1, l1, c2) = (p.link_com[0], p.link_length[0], p.link_com[1]);
        let ell = l1 + c2;
        let i2_com = p.link_inertia[1] - m2 * c2 * c2;
        let i_total = p.link_inertia[0] + p.joint_armature[0] + i2_com + m2 * ell * ell;
        let expected = -(m1 * p.gravity * c1 + m2 * p.gravity * ell) / i_total;
        assert_relative_eq!(acc[2], expected, max_relative = 1e-12);
    }

    #[test]
    fn stepping_is_deterministic() {
        let p = PlantParams::default();
        let a = ActivationVector::clamped([0.3, 0.7, 0.2]).unwrap();
        let mut s1 = PlantState::at_rest([0.1, -0.3], &p);
        let mut s2 = s1;
        for _ in 0..500 {
            s1 = step(&s1, &a, &p).unwrap();
            s2 = step(&s2, &a, &p).unwrap();
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn contact_force_is_unilateral() {
        let p = PlantParams::gantry(0.01, PlantParams::default().joint_center());
        let mut s = PlantState::at_rest(p.joint_center(), &p);
        let f = ground_reaction(&s, &p);
        assert!(f[1] > 0.0);
        // Foot lifted clear of the ground.
        s.chassis_y += 0.05;
        assert_eq!(ground_reaction(&s, &p), [0.0, 0.0]);
        // Foot moving up fast while slightly penetrating: force stays non-negative.
        s.chassis_y -= 0.0501;
        s.chassis_yd = 10.0;
        assert!(ground_reaction(&s, &p)[1] >= 0.0);
    }

    #[test]
    fn config_round_trip() {
        let mut p = PlantParams::gantry(0.002, [0.0, -0.6]);
        p.moment_arm[1][2] = -0.012;
        let mut q = PlantParams::default();
        for (k, v) in p.to_pairs() {
            q.set(&k, &v).unwrap();
        }
        assert_eq!(p, q);
        let keys: Vec<String> = p.to_pairs().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, PLANT_KEYS);
        assert!(q.set("no_such_key", "1").is_err());
        assert!(q.set("moment_arm_3_1", "1").is_err());
        assert!(q.set("link3_mass", "1").is_err());
        assert!(q.set("gravity", "fast").is_err());
    }
}
