//! Control loop: inverse-map feed-forward with optional PI correction.
//!
//! The correction acts only on the velocity input of the map: position and
//! acceleration are passed through unchanged, while the commanded velocity
//! becomes `qd_d + Kp e + Ki ∫e`. Observations can be delayed by a whole
//! number of control ticks.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::metrics::{rmse, Rmse};
use crate::inverse_map::{InverseMap, SampleSet, SampleSource};
use crate::plant::{self, ActivationVector, PlantParams, PlantState, N_JOINTS, N_TENDONS};
use crate::trajectories::{BabblingSignal, KinematicTrajectory};

/// Control period (s).
pub const DT_CTRL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpenLoop,
    ClosedLoop,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OpenLoop => "open",
            Mode::ClosedLoop => "closed",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" | "open-loop" => Ok(Mode::OpenLoop),
            "closed" | "closed-loop" => Ok(Mode::ClosedLoop),
            _ => Err(Error::Config(format!("unknown mode `{s}` (open | closed)"))),
        }
    }
}

/// Diagonal PI gains. Only the diagonals are stored, so off-diagonal terms
/// are zero by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGains {
    /// Proportional gain per joint (1/s).
    pub kp: [f64; N_JOINTS],
    /// Integral gain per joint (1/s²).
    pub ki: [f64; N_JOINTS],
    /// Bound on |∫e dt| per joint (rad·s).
    pub integral_clamp: f64,
}

impl Default for FeedbackGains {
    fn default() -> Self {
        FeedbackGains {
            kp: [4.0, 4.0],
            ki: [1.0, 1.0],
            integral_clamp: 0.5,
        }
    }
}

impl FeedbackGains {
    pub fn new(kp: [f64; N_JOINTS], ki: [f64; N_JOINTS], integral_clamp: f64) -> Result<Self> {
        let g = FeedbackGains {
            kp,
            ki,
            integral_clamp,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn zero() -> Self {
        FeedbackGains {
            kp: [0.0; N_JOINTS],
            ki: [0.0; N_JOINTS],
            ..FeedbackGains::default()
        }
    }

    /// Defaults with both gain matrices multiplied by `factor`.
    pub fn scaled(factor: f64) -> Self {
        let d = FeedbackGains::default();
        FeedbackGains {
            kp: d.kp.map(|k| k * factor),
            ki: d.ki.map(|k| k * factor),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .kp
            .iter()
            .chain(&self.ki)
            .any(|k| !k.is_finite() || *k < 0.0)
        {
            return Err(Error::Config(format!(
                "gains must be finite and non-negative: kp={:?} ki={:?}",
                self.kp, self.ki
            )));
        }
        if !(self.integral_clamp > 0.0) || !self.integral_clamp.is_finite() {
            return Err(Error::Config("integral clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Mutable per-run controller state.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub integral: [f64; N_JOINTS],
    delay_line: VecDeque<[f64; N_JOINTS]>,
    delay_ticks: usize,
    pub mode: Mode,
    pub tick: u64,
}

impl ControllerState {
    pub fn new(mode: Mode, delay_ticks: usize) -> Self {
        ControllerState {
            integral: [0.0; N_JOINTS],
            delay_line: VecDeque::with_capacity(delay_ticks + 1),
            delay_ticks,
            mode,
            tick: 0,
        }
    }

    pub fn delay_ticks(&self) -> usize {
        self.delay_ticks
    }

    pub fn buffered(&self) -> usize {
        self.delay_line.len()
    }
}

/// Inputs actually fed to the inverse map at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlKinematics {
    pub q: [f64; N_JOINTS],
    pub qd: [f64; N_JOINTS],
    pub qdd: [f64; N_JOINTS],
}

impl ControlKinematics {
    pub fn as_input(&self) -> [f64; 6] {
        [
            self.q[0], self.q[1], self.qd[0], self.qd[1], self.qdd[0], self.qdd[1],
        ]
    }
}

/// Anything that maps control kinematics to activations.
pub trait ActivationModel: Sync {
    fn activation(&self, kinematics: &[f64; 6]) -> Result<ActivationVector>;
}

impl ActivationModel for InverseMap {
    fn activation(&self, kinematics: &[f64; 6]) -> Result<ActivationVector> {
        self.predict(kinematics)
    }
}

/// PI velocity correction: integrate, clamp, then `Kp e + Ki ∫e`.
pub fn feedback_adjustment(
    q_e: [f64; N_JOINTS],
    state: &mut ControllerState,
    gains: &FeedbackGains,
    dt_ctrl: f64,
) -> [f64; N_JOINTS] {
    let c = gains.integral_clamp;
    for i in 0..N_JOINTS {
        state.integral[i] = (state.integral[i] + q_e[i] * dt_ctrl).clamp(-c, c);
    }
    std::array::from_fn(|i| gains.kp[i] * q_e[i] + gains.ki[i] * state.integral[i])
}

/// Push the current observation; return the one from `delay_ticks` ago, or
/// the oldest available before the line has filled.
pub fn delayed_observe(q_p: [f64; N_JOINTS], state: &mut ControllerState) -> [f64; N_JOINTS] {
    state.delay_line.push_back(q_p);
    while state.delay_line.len() > state.delay_ticks + 1 {
        state.delay_line.pop_front();
    }
    state.delay_line[0]
}

/// One control decision. `observation` is the (already delayed) measured
/// posture; it is ignored in open loop.
pub fn control_tick(
    desired: &[f64; 6],
    observation: [f64; N_JOINTS],
    state: &mut ControllerState,
    gains: &FeedbackGains,
    model: &dyn ActivationModel,
    dt_ctrl: f64,
) -> Result<(ActivationVector, ControlKinematics)> {
    let q_d = [desired[0], desired[1]];
    let qd_d = [desired[2], desired[3]];
    let qdd_d = [desired[4], desired[5]];
    let qd_c = match state.mode {
        Mode::OpenLoop => qd_d,
        Mode::ClosedLoop => {
            let e = [q_d[0] - observation[0], q_d[1] - observation[1]];
            let adj = feedback_adjustment(e, state, gains, dt_ctrl);
            [qd_d[0] + adj[0], qd_d[1] + adj[1]]
        }
    };
    let ck = ControlKinematics {
        q: q_d,
        qd: qd_c,
        qdd: qdd_d,
    };
    let a = model.activation(&ck.as_input())?;
    state.tick += 1;
    Ok((a, ck))
}

/// Everything about an episode other than the trajectory, plant and map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub mode: Mode,
    pub gains: FeedbackGains,
    /// `None` bypasses the delay line entirely.
    pub delay_ticks: Option<usize>,
    pub seed: u64,
    pub label: String,
}

impl EpisodeConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        EpisodeConfig {
            mode,
            gains: FeedbackGains::default(),
            delay_ticks: None,
            seed,
            label: String::new(),
        }
    }
}

/// Outcome of one episode: time series plus summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub mode: Mode,
    pub gains: FeedbackGains,
    pub delay_ticks: usize,
    pub seed: u64,
    /// Content hash of the inverse map, when known.
    pub map_hash: String,
    /// Content hash of the resolved run configuration, when known.
    pub config_hash: String,
    pub dt: f64,
    pub q_d: Vec<[f64; N_JOINTS]>,
    pub q_p: Vec<[f64; N_JOINTS]>,
    pub qd_p: Vec<[f64; N_JOINTS]>,
    pub control: Vec<ControlKinematics>,
    pub activations: Vec<[f64; N_TENDONS]>,
    /// Foot height above the ground line at each tick.
    pub foot_clearance: Vec<f64>,
    pub rmse: Rmse,
    pub failed: bool,
    pub failure: Option<String>,
}

/// Serialisable summary of a record (no time series).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub mode: Mode,
    pub gains: FeedbackGains,
    pub delay_ticks: usize,
    pub delay_ms: f64,
    pub seed: u64,
    pub map_hash: String,
    pub config_hash: String,
    pub ticks: usize,
    pub rmse_per_joint: [f64; N_JOINTS],
    pub rmse: f64,
    pub failed: bool,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.q_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_p.is_empty()
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            label: self.label.clone(),
            mode: self.mode,
            gains: self.gains,
            delay_ticks: self.delay_ticks,
            delay_ms: self.delay_ticks as f64 * self.dt * 1e3,
            seed: self.seed,
            map_hash: self.map_hash.clone(),
            config_hash: self.config_hash.clone(),
            ticks: self.len(),
            rmse_per_joint: self.rmse.per_joint,
            rmse: self.rmse.aggregate,
            failed: self.failed,
            failure: self.failure.clone(),
        }
    }

    pub fn write_series_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "time,q_d1,q_d2,q_p1,q_p2,dq_c1,dq_c2,a1,a2,a3,foot_clearance"
        )?;
        let mut line = String::new();
        for n in 0..self.len() {
            line.clear();
            let _ = write!(line, "{:?}", n as f64 * self.dt);
            let c = &self.control[n];
            for v in self.q_d[n]
                .iter()
                .chain(&self.q_p[n])
                .chain(&c.qd)
                .chain(&self.activations[n])
                .chain(std::iter::once(&self.foot_clearance[n]))
            {
                let _ = write!(line, ",{v:?}");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Write `<stem>.json` (manifest) and `<stem>.csv` (series) into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let jp = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| Error::InvalidState(e.to_string()))?;
        std::fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        let cp = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&cp).map_err(|e| Error::io(&cp, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_series_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&cp, e))
    }

    /// Achieved kinematics paired with the activations that produced them.
    pub fn experience(&self, run: u32) -> Result<SampleSet> {
        achieved_samples(
            &self.q_p,
            &self.qd_p,
            &self.activations,
            self.dt,
            SampleSource::Experience { run },
        )
    }
}

/// Sample rows `(q, qd, qdd) -> a` from a recorded rollout. The acceleration
/// is the forward difference of velocity over the tick the activation was
/// held for, so the last tick has no row.
fn achieved_samples(
    q: &[[f64; N_JOINTS]],
    qd: &[[f64; N_JOINTS]],
    activations: &[[f64; N_TENDONS]],
    dt: f64,
    source: SampleSource,
) -> Result<SampleSet> {
    let mut set = SampleSet::new();
    let n = q.len().min(qd.len()).min(activations.len());
    for i in 0..n.saturating_sub(1) {
        let qdd = [
            (qd[i + 1][0] - qd[i][0]) / dt,
            (qd[i + 1][1] - qd[i][1]) / dt,
        ];
        set.push(
            [q[i][0], q[i][1], qd[i][0], qd[i][1], qdd[0], qdd[1]],
            activations[i],
            source,
        )?;
    }
    Ok(set)
}

fn substeps(dt_ctrl: f64, params: &PlantParams) -> Result<usize> {
    let ratio = dt_ctrl / params.dt_phys;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "physics step {} must divide the control period {dt_ctrl}",
            params.dt_phys
        )));
    }
    Ok(n as usize)
}

fn clearance(state: &PlantState, params: &PlantParams) -> f64 {
    plant::foot_position(state, params)[1] - params.ground_height
}

/// Drive the babbling signal through the plant, starting at rest at the
/// joint-range centre, and collect `(achieved kinematics -> activation)` rows.
pub fn babble(signal: &BabblingSignal, params: &PlantParams) -> Result<SampleSet> {
    if signal.activations.is_empty() {
        return Err(Error::InvalidInput("empty babbling signal".into()));
    }
    let k = substeps(signal.dt, params)?;
    let mut s = PlantState::at_rest(params.joint_center(), params);
    let n = signal.activations.len();
    let mut q = Vec::with_capacity(n + 1);
    let mut qd = Vec::with_capacity(n + 1);
    let mut acts = Vec::with_capacity(n + 1);
    for a in &signal.activations {
        q.push(s.q);
        qd.push(s.qd);
        acts.push(a.as_array());
        for _ in 0..k {
            s = plant::step(&s, a, params)?;
        }
    }
    // Final state so that every commanded tick gets a row.
    q.push(s.q);
    qd.push(s.qd);
    acts.push([0.0; N_TENDONS]);
    achieved_samples(&q, &qd, &acts, signal.dt, SampleSource::Babbling)
}

/// Track `trajectory` from rest at its first sample.
pub fn run_episode(
    trajectory: &KinematicTrajectory,
    params: &PlantParams,
    model: &dyn ActivationModel,
    cfg: &EpisodeConfig,
) -> Result<RunRecord> {
    let start = trajectory
        .q
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidInput("empty trajectory".into()))?;
    run_episode_from(trajectory, params, PlantState::at_rest(start, params), model, cfg)
}

pub fn run_episode_from(
    trajectory: &KinematicTrajectory,
    params: &PlantParams,
    initial: PlantState,
    model: &dyn ActivationModel,
    cfg: &EpisodeConfig,
) -> Result<RunRecord> {
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    cfg.gains.validate()?;
    params.validate()?;
    let dt = trajectory.dt;
    let k = substeps(dt, params)?;
    let n = trajectory.len();
    let mut ctl = ControllerState::new(cfg.mode, cfg.delay_ticks.unwrap_or(0));
    let mut s = initial;
    let mut rec = RunRecord {
        label: cfg.label.clone(),
        mode: cfg.mode,
        gains: cfg.gains,
        delay_ticks: cfg.delay_ticks.unwrap_or(0),
        seed: cfg.seed,
        map_hash: String::new(),
        config_hash: String::new(),
        dt,
        q_d: Vec::with_capacity(n),
        q_p: Vec::with_capacity(n),
        qd_p: Vec::with_capacity(n),
        control: Vec::with_capacity(n),
        activations: Vec::with_capacity(n),
        foot_clearance: Vec::with_capacity(n),
        rmse: Rmse::default(),
        failed: false,
        failure: None,
    };
    'ticks: for i in 0..n {
        let desired = trajectory.kinematics(i);
        let measured = plant::observe(&s);
        let obs = match cfg.delay_ticks {
            Some(_) => delayed_observe(measured, &mut ctl),
            None => measured,
        };
        let (a, ck) = control_tick(&desired, obs, &mut ctl, &cfg.gains, model, dt)?;
        rec.q_d.push(trajectory.q[i]);
        rec.q_p.push(measured);
        rec.qd_p.push(s.qd);
        rec.control.push(ck);
        rec.activations.push(a.as_array());
        rec.foot_clearance.push(clearance(&s, params));
        for _ in 0..k {
            match plant::step(&s, &a, params) {
                Ok(next) => s = next,
                Err(e @ Error::Diverged { .. }) => {
                    rec.failed = true;
                    rec.failure = Some(e.to_string());
                    break 'ticks;
                }
                Err(e) => return Err(e),
            }
        }
    }
    rec.rmse = rmse(&rec.q_d, &rec.q_p)?;
    Ok(rec)
}
