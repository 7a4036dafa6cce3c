//! The task suite. Every task pairs conditions on identical trajectory
//! seeds, derives per-trial seeds from the master seed and trial index, and
//! runs trials in parallel without affecting results.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{collapsed, mean, step_response};
use super::report::{ExperimentReport, TrialResult};
use crate::controller::{self, ActivationModel, EpisodeConfig, FeedbackGains, Mode, RunRecord, DT_CTRL};
use crate::error::{Error, Result};
use crate::inverse_map::{self, InverseMap};
use crate::plant::{PlantParams, N_JOINTS};
use crate::trajectories::{
    self, generate_cyclical, generate_point_to_point, generate_sinusoid, random_radii, sub_seed,
    JointLimits, KinematicTrajectory,
};

pub const TASK_NAMES: [&str; 8] = [
    "cyclical",
    "point-to-point",
    "period-sweep",
    "gantry",
    "posture-weight",
    "refine",
    "delay-sweep",
    "gain-sweep",
];

pub const CYCLE_PERIOD: f64 = 2.5;
pub const N_CYCLES: usize = 10;
pub const N_TARGETS: usize = 10;
pub const HOLD_DURATION: f64 = 2.5;
pub const DELAY_GRID_MS: [f64; 7] = [0.0, 10.0, 20.0, 30.0, 50.0, 70.0, 100.0];
pub const GAIN_GRID: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
/// Foot below the ground line at the nominal posture (m).
pub const SUBSTANTIAL_CONTACT: f64 = 0.01;
pub const MILD_CONTACT: f64 = 0.002;

/// Settling time excluded from the start of each hold when scoring
/// steady-state error (s).
pub const HOLD_SETTLE: f64 = 1.0;
/// Steps smaller than this are not scored for rise time / overshoot (rad).
pub const MIN_STEP: f64 = 0.1;
/// A cycle asks for swing when the desired foot path rises this far above
/// the ground (m).
pub const SWING_DEMAND: f64 = 0.005;
/// The foot counts as lifted when it rises this far above the ground (m).
pub const LIFT_THRESHOLD: f64 = 0.002;
/// Collapse: a joint within this margin of a limit ...
pub const COLLAPSE_MARGIN: f64 = 0.02;
/// ... for longer than this (s).
pub const COLLAPSE_DURATION: f64 = 1.0;
/// Closed-loop runs whose RMSE exceeds this multiple of the open-loop
/// reference are flagged unstable.
pub const INSTABILITY_RATIO: f64 = 10.0;

/// Shared inputs of every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSetup {
    /// In-air plant; contact and weighted variants are derived from it.
    pub params: PlantParams,
    pub gains: FeedbackGains,
    pub seed: u64,
    pub trials: usize,
    /// Identity of the inverse map, copied into every run manifest.
    pub map_hash: String,
}

impl TaskSetup {
    pub fn new(seed: u64, trials: usize) -> Self {
        TaskSetup {
            params: PlantParams::default(),
            gains: FeedbackGains::default(),
            seed,
            trials,
            map_hash: String::new(),
        }
    }

    pub fn limits(&self) -> JointLimits {
        JointLimits::from(&self.params)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        sub_seed(self.seed, trial as u64)
    }

    fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("at least one trial is required".into()));
        }
        self.params.validate()?;
        self.gains.validate()
    }
}

/// Per-task knobs that are not shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    pub periods: Vec<f64>,
    pub delays_ms: Vec<f64>,
    pub gain_scales: Vec<f64>,
    pub contact_depths: Vec<f64>,
    pub posture: [f64; N_JOINTS],
    pub posture_duration: f64,
    pub weight_factor: f64,
    pub refine: RefineOptions,
}

impl Default for TaskOptions {
    fn default() -> Self {
        TaskOptions {
            periods: trajectories::PERIOD_GRID.to_vec(),
            delays_ms: DELAY_GRID_MS.to_vec(),
            gain_scales: GAIN_GRID.to_vec(),
            contact_depths: vec![SUBSTANTIAL_CONTACT, MILD_CONTACT],
            posture: STANDING_POSTURE,
            posture_duration: 10.0,
            weight_factor: PlantParams::default().weight_factor,
            refine: RefineOptions::default(),
        }
    }
}

/// Standing posture: foot directly under the hip.
pub const STANDING_POSTURE: [f64; N_JOINTS] = [0.3, -0.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub trajectories: usize,
    pub repetitions: usize,
    pub babble_duration: f64,
    pub initial_epochs: usize,
    pub refine_epochs: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            trajectories: 50,
            repetitions: 25,
            babble_duration: 60.0,
            initial_epochs: inverse_map::INITIAL_EPOCHS,
            refine_epochs: inverse_map::REFINE_EPOCHS,
        }
    }
}

fn run(
    traj: &KinematicTrajectory,
    params: &PlantParams,
    model: &dyn ActivationModel,
    mode: Mode,
    gains: FeedbackGains,
    delay_ticks: Option<usize>,
    seed: u64,
    label: &str,
) -> Result<RunRecord> {
    let cfg = EpisodeConfig {
        mode,
        gains,
        delay_ticks,
        seed,
        label: label.to_string(),
    };
    controller::run_episode(traj, params, model, &cfg)
}

fn result(
    condition: &str,
    x: Option<f64>,
    trial: usize,
    seed: u64,
    rec: &RunRecord,
    map_hash: &str,
    metrics: BTreeMap<String, f64>,
) -> TrialResult {
    let mut manifest = rec.manifest();
    manifest.map_hash = map_hash.to_string();
    TrialResult {
        condition: condition.to_string(),
        x,
        trial,
        trajectory_seed: seed,
        rmse: rec.rmse,
        flagged: rec.failed,
        flag: rec.failure.clone(),
        metrics,
        manifest,
    }
}

/// Run `per_trial` for every trial index in parallel; results keep trial order.
fn par_trials<F>(n: usize, per_trial: F) -> Result<Vec<TrialResult>>
where
    F: Fn(usize) -> Result<Vec<TrialResult>> + Sync + Send,
{
    let nested: Vec<Vec<TrialResult>> = (0..n).into_par_iter().map(per_trial).collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn finish(mut report: ExperimentReport, trials: Vec<TrialResult>) -> ExperimentReport {
    report.trials = trials;
    report.summarize();
    report
}

pub fn cyclical_trajectory(setup: &TaskSetup, trial: usize) -> Result<(u64, KinematicTrajectory)> {
    let seed = setup.trial_seed(trial);
    let traj = generate_cyclical(&random_radii(seed), CYCLE_PERIOD, N_CYCLES, DT_CTRL, &setup.limits())?;
    Ok((seed, traj))
}

pub fn point_to_point_trajectory(setup: &TaskSetup, trial: usize) -> Result<(u64, KinematicTrajectory)> {
    let seed = setup.trial_seed(trial);
    let traj = generate_point_to_point(N_TARGETS, HOLD_DURATION, DT_CTRL, &setup.limits(), seed)?;
    Ok((seed, traj))
}

/// Random cyclical patterns in air, open vs closed loop.
pub fn task_cyclical(setup: &TaskSetup, map: &InverseMap) -> Result<ExperimentReport> {
    setup.check()?;
    let trials = par_trials(setup.trials, |i| {
        let (seed, traj) = cyclical_trajectory(setup, i)?;
        [Mode::OpenLoop, Mode::ClosedLoop]
            .into_iter()
            .map(|m| {
                let rec = run(&traj, &setup.params, map, m, setup.gains, None, seed, "cyclical")?;
                Ok(result(m.as_str(), None, i, seed, &rec, &setup.map_hash, BTreeMap::new()))
            })
            .collect()
    })?;
    let mut report = finish(ExperimentReport::new("cyclical", setup.seed, setup.trials, None), trials);
    report.compare("closed-vs-open", "rmse", ("closed", None), ("open", None))?;
    Ok(report)
}

/// Segment layout of a point-to-point trajectory: (start tick, ramp ticks, hold ticks).
fn segments(n_targets: usize) -> Vec<(usize, usize, usize)> {
    let ramp = (trajectories::RAMP_DURATION / DT_CTRL).round() as usize;
    let hold = (HOLD_DURATION / DT_CTRL).round() as usize;
    (0..n_targets).map(|k| (k * (ramp + hold), ramp, hold)).collect()
}

/// Steady-state RMSE over the settled part of every hold, plus the mean
/// rise time and mean overshoot over all sufficiently large steps.
fn hold_metrics(traj: &KinematicTrajectory, rec: &RunRecord, start: [f64; N_JOINTS]) -> BTreeMap<String, f64> {
    let settle = (HOLD_SETTLE / DT_CTRL).round() as usize;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut rises = Vec::new();
    let mut overshoots = Vec::new();
    let mut prev = start;
    for (s, ramp, hold) in segments(N_TARGETS) {
        let end = (s + ramp + hold).min(rec.len());
        if s >= end {
            break;
        }
        let target = traj.q[s + ramp];
        for n in (s + ramp + settle).min(end)..end {
            for j in 0..N_JOINTS {
                let e = rec.q_d[n][j] - rec.q_p[n][j];
                sq += e * e;
                count += 1;
            }
        }
        for j in 0..N_JOINTS {
            let y: Vec<f64> = rec.q_p[s..end].iter().map(|q| q[j]).collect();
            if let Some(r) = step_response(&y, prev[j], target[j], DT_CTRL, MIN_STEP) {
                // Steps that never reach 90% are censored at the segment length.
                rises.push(r.rise_time.unwrap_or(y.len() as f64 * DT_CTRL));
                overshoots.push(r.overshoot_pct);
            }
        }
        prev = target;
    }
    let mut m = BTreeMap::new();
    if count > 0 {
        m.insert("hold_rmse".into(), (sq / count as f64).sqrt());
    }
    if !rises.is_empty() {
        m.insert("rise_time".into(), mean(&rises));
    }
    if !overshoots.is_empty() {
        m.insert("overshoot_pct".into(), mean(&overshoots));
    }
    m
}

/// Ramp-and-hold sequences, open vs closed loop.
pub fn task_point_to_point(setup: &TaskSetup, map: &InverseMap) -> Result<ExperimentReport> {
    setup.check()?;
    let center = setup.limits().center();
    let trials = par_trials(setup.trials, |i| {
        let (seed, traj) = point_to_point_trajectory(setup, i)?;
        [Mode::OpenLoop, Mode::ClosedLoop]
            .into_iter()
            .map(|m| {
                let rec = run(&traj, &setup.params, map, m, setup.gains, None, seed, "point-to-point")?;
                let metrics = hold_metrics(&traj, &rec, center);
                Ok(result(m.as_str(), None, i, seed, &rec, &setup.map_hash, metrics))
            })
            .collect()
    })?;
    let mut report = finish(
        ExperimentReport::new("point-to-point", setup.seed, setup.trials, None),
        trials,
    );
    report.compare("closed-vs-open", "rmse", ("closed", None), ("open", None))?;
    report.compare("hold-closed-vs-open", "hold_rmse", ("closed", None), ("open", None))?;
    Ok(report)
}

/// Sinusoids over a grid of cycle periods; each trial draws a random phase.
pub fn task_period_sweep(setup: &TaskSetup, map: &InverseMap, periods: &[f64]) -> Result<ExperimentReport> {
    setup.check()?;
    if periods.is_empty() {
        return Err(Error::InvalidInput("period grid is empty".into()));
    }
    let lim = setup.limits();
    let trials = par_trials(setup.trials, |i| {
        let seed = setup.trial_seed(i);
        let phase = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..2.0 * PI);
        let mut out = Vec::new();
        for &t in periods {
            let traj = generate_sinusoid(t, N_CYCLES, DT_CTRL, &lim, phase)?;
            for m in [Mode::OpenLoop, Mode::ClosedLoop] {
                let rec = run(&traj, &setup.params, map, m, setup.gains, None, seed, "period-sweep")?;
                let mut metrics = BTreeMap::new();
                metrics.insert("phase".into(), phase);
                out.push(result(m.as_str(), Some(t), i, seed, &rec, &setup.map_hash, metrics));
            }
        }
        Ok(out)
    })?;
    let mut report = finish(
        ExperimentReport::new("period-sweep", setup.seed, setup.trials, Some("period_s")),
        trials,
    );
    for &t in periods {
        report.compare(
            &format!("closed-vs-open@{t}"),
            "rmse",
            ("closed", Some(t)),
            ("open", Some(t)),
        )?;
    }
    Ok(report)
}

/// Fraction of swing-demanding cycles in which the foot actually lifted.
fn swing_clearance(rec: &RunRecord, params: &PlantParams, period_ticks: usize) -> Option<f64> {
    let mut demanded = 0usize;
    let mut lifted = 0usize;
    for c in 0..rec.len() / period_ticks {
        let span = c * period_ticks..(c + 1) * period_ticks;
        let want = rec.q_d[span.clone()]
            .iter()
            .map(|q| params.gantry_height - params.foot_drop(*q) - params.ground_height)
            .fold(f64::NEG_INFINITY, f64::max);
        if want < SWING_DEMAND {
            continue;
        }
        demanded += 1;
        let got = rec.foot_clearance[span].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if got >= LIFT_THRESHOLD {
            lifted += 1;
        }
    }
    (demanded > 0).then(|| lifted as f64 / demanded as f64)
}

/// Cyclical patterns with the chassis on the gantry and the foot reaching
/// below the ground line. Axis: contact depth in metres (0 = in air).
pub fn task_gantry(setup: &TaskSetup, map: &InverseMap, depths: &[f64]) -> Result<ExperimentReport> {
    setup.check()?;
    let center = setup.limits().center();
    let period_ticks = (CYCLE_PERIOD / DT_CTRL).round() as usize;
    let mut axis: Vec<f64> = vec![0.0];
    axis.extend(depths.iter().copied().filter(|d| *d != 0.0));
    let variants: Vec<(f64, PlantParams)> = axis
        .iter()
        .map(|&d| {
            let p = if d == 0.0 {
                setup.params.clone()
            } else {
                setup.params.with_gantry(d, center)
            };
            (d, p)
        })
        .collect();
    let trials = par_trials(setup.trials, |i| {
        let (seed, traj) = cyclical_trajectory(setup, i)?;
        let mut out = Vec::new();
        for (d, p) in &variants {
            for m in [Mode::OpenLoop, Mode::ClosedLoop] {
                let rec = run(&traj, p, map, m, setup.gains, None, seed, "gantry")?;
                let mut metrics = BTreeMap::new();
                if *d != 0.0 {
                    if let Some(f) = swing_clearance(&rec, p, period_ticks) {
                        metrics.insert("swing_clearance".into(), f);
                    }
                }
                out.push(result(m.as_str(), Some(*d), i, seed, &rec, &setup.map_hash, metrics));
            }
        }
        Ok(out)
    })?;
    let mut report = finish(
        ExperimentReport::new("gantry", setup.seed, setup.trials, Some("contact_depth_m")),
        trials,
    );
    for d in axis {
        report.compare(
            &format!("closed-vs-open@{d}"),
            "rmse",
            ("closed", Some(d)),
            ("open", Some(d)),
        )?;
    }
    Ok(report)
}

/// Hold a standing posture with a heavy chassis resting on the leg. Each
/// trial perturbs the posture by up to ±0.05 rad per joint.
pub fn task_posture_weight(
    setup: &TaskSetup,
    map: &InverseMap,
    posture: [f64; N_JOINTS],
    duration: f64,
    weight_factor: f64,
) -> Result<ExperimentReport> {
    setup.check()?;
    if !(duration > 0.0) {
        return Err(Error::InvalidInput("posture duration must be positive".into()));
    }
    let p = setup.params.with_weight(weight_factor);
    p.validate()?;
    let n = (duration / DT_CTRL).round() as usize;
    let trials = par_trials(setup.trials, |i| {
        let seed = setup.trial_seed(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: [f64; N_JOINTS] = std::array::from_fn(|j| {
            (posture[j] + rng.gen_range(-0.05..0.05)).clamp(p.joint_min[j], p.joint_max[j])
        });
        let traj = KinematicTrajectory::from_positions(DT_CTRL, vec![q; n.max(2)], false);
        [Mode::OpenLoop, Mode::ClosedLoop]
            .into_iter()
            .map(|m| {
                let rec = run(&traj, &p, map, m, setup.gains, None, seed, "posture-weight")?;
                let mut metrics = BTreeMap::new();
                for j in 0..N_JOINTS {
                    let dev = rec.q_p.iter().map(|x| (x[j] - q[j]).abs()).sum::<f64>() / rec.len() as f64;
                    let name = ["deviation_proximal", "deviation_distal"][j];
                    metrics.insert(name.into(), dev);
                }
                if let Some(last) = rec.q_p.last() {
                    let fin = (0..N_JOINTS).map(|j| (last[j] - q[j]).abs()).fold(0.0, f64::max);
                    metrics.insert("final_deviation".into(), fin);
                }
                let fell = collapsed(&rec.q_p, p.joint_min, p.joint_max, COLLAPSE_MARGIN, DT_CTRL, COLLAPSE_DURATION);
                metrics.insert("collapsed".into(), if fell { 1.0 } else { 0.0 });
                let mut r = result(m.as_str(), None, i, seed, &rec, &setup.map_hash, metrics);
                if fell && !r.flagged {
                    r.flagged = true;
                    r.flag = Some("collapsed".into());
                }
                Ok(r)
            })
            .collect()
    })?;
    let mut report = finish(
        ExperimentReport::new("posture-weight", setup.seed, setup.trials, None),
        trials,
    );
    for m in ["open", "closed"] {
        let fell = report
            .trials_of(m, None)
            .filter(|t| t.metrics.get("collapsed") == Some(&1.0))
            .count();
        report.info.insert(format!("collapsed_{m}"), fell as f64);
    }
    report.info.insert("weight_factor".into(), weight_factor);
    Ok(report)
}

/// Closed-loop runs over a grid of feedback delays, plus an open-loop
/// reference on the same trajectories. Condition `open` has no axis value.
pub fn task_delay_sweep(setup: &TaskSetup, map: &InverseMap, delays_ms: &[f64]) -> Result<ExperimentReport> {
    setup.check()?;
    if delays_ms.is_empty() || delays_ms.iter().any(|d| !(0.0..=200.0).contains(d)) {
        return Err(Error::InvalidInput("delay grid must be non-empty and within [0, 200] ms".into()));
    }
    let trials = par_trials(setup.trials, |i| {
        let (seed, traj) = cyclical_trajectory(setup, i)?;
        let open = run(&traj, &setup.params, map, Mode::OpenLoop, setup.gains, None, seed, "delay-sweep")?;
        let reference = open.rmse.aggregate;
        let mut out = vec![result("open", None, i, seed, &open, &setup.map_hash, BTreeMap::new())];
        for &d in delays_ms {
            let ticks = (d / 1e3 / DT_CTRL).round() as usize;
            let rec = run(&traj, &setup.params, map, Mode::ClosedLoop, setup.gains, Some(ticks), seed, "delay-sweep")?;
            let mut metrics = BTreeMap::new();
            metrics.insert("delay_ticks".into(), ticks as f64);
            let mut r = result("closed", Some(d), i, seed, &rec, &setup.map_hash, metrics);
            if !r.flagged && rec.rmse.aggregate > INSTABILITY_RATIO * reference {
                r.flagged = true;
                r.flag = Some("unstable".into());
            }
            out.push(r);
        }
        Ok(out)
    })?;
    let mut report = finish(
        ExperimentReport::new("delay-sweep", setup.seed, setup.trials, Some("delay_ms")),
        trials,
    );
    for &d in delays_ms {
        report.compare(&format!("closed-vs-open@{d}"), "rmse", ("closed", Some(d)), ("open", None))?;
    }
    Ok(report)
}

/// Point-to-point runs with both gain matrices scaled; open-loop reference.
pub fn task_gain_sweep(setup: &TaskSetup, map: &InverseMap, scales: &[f64]) -> Result<ExperimentReport> {
    setup.check()?;
    if scales.is_empty() || scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidInput("gain scales must be non-negative and finite".into()));
    }
    let center = setup.limits().center();
    let trials = par_trials(setup.trials, |i| {
        let (seed, traj) = point_to_point_trajectory(setup, i)?;
        let open = run(&traj, &setup.params, map, Mode::OpenLoop, setup.gains, None, seed, "gain-sweep")?;
        let reference = open.rmse.aggregate;
        let mut out = vec![result("open", None, i, seed, &open, &setup.map_hash, hold_metrics(&traj, &open, center))];
        for &s in scales {
            let g = FeedbackGains {
                kp: setup.gains.kp.map(|k| k * s),
                ki: setup.gains.ki.map(|k| k * s),
                ..setup.gains
            };
            let rec = run(&traj, &setup.params, map, Mode::ClosedLoop, g, None, seed, "gain-sweep")?;
            let mut r = result("closed", Some(s), i, seed, &rec, &setup.map_hash, hold_metrics(&traj, &rec, center));
            if !r.flagged && rec.rmse.aggregate > INSTABILITY_RATIO * reference {
                r.flagged = true;
                r.flag = Some("unstable".into());
            }
            out.push(r);
        }
        Ok(out)
    })?;
    let mut report = finish(
        ExperimentReport::new("gain-sweep", setup.seed, setup.trials, Some("gain_scale")),
        trials,
    );
    for &s in scales {
        report.compare(&format!("closed-vs-open@{s}"), "rmse", ("closed", Some(s)), ("open", None))?;
    }
    Ok(report)
}

pub const REFINE_CONDITIONS: [&str; 4] = ["open", "closed", "open-with-closed-map", "closed-with-open-map"];

/// Learning from experience. Per trajectory: fresh babbling and an initial
/// map, then repeated runs of one cyclical pattern. The open- and
/// closed-loop conditions each refine their own map on their cumulative
/// data after every repetition; the two switched conditions only evaluate
/// the other condition's current map. Axis: repetition index.
pub fn task_refinement(setup: &TaskSetup, opts: &RefineOptions) -> Result<ExperimentReport> {
    setup.check()?;
    if opts.trajectories == 0 || opts.repetitions == 0 {
        return Err(Error::InvalidInput("refinement needs trajectories and repetitions".into()));
    }
    let lim = setup.limits();
    let trials = par_trials(opts.trajectories, |b| {
        let seed = setup.trial_seed(b);
        let traj = generate_cyclical(&random_radii(seed), CYCLE_PERIOD, N_CYCLES, DT_CTRL, &lim)?;
        let signal = trajectories::generate_babbling(opts.babble_duration, DT_CTRL, sub_seed(seed, 1))?;
        let babbling = controller::babble(&signal, &setup.params)?;
        let map0 = inverse_map::train(&babbling, sub_seed(seed, 2), opts.initial_epochs)?;
        let mut maps = [map0.clone(), map0];
        let mut data = [babbling.clone(), babbling];
        let mut out = Vec::new();
        for r in 0..opts.repetitions {
            let x = Some(r as f64);
            let runs = [
                ("open", Mode::OpenLoop, 0usize),
                ("closed", Mode::ClosedLoop, 1),
                ("open-with-closed-map", Mode::OpenLoop, 1),
                ("closed-with-open-map", Mode::ClosedLoop, 0),
            ];
            let mut own = Vec::new();
            for (name, mode, which) in runs {
                let rec = run(&traj, &setup.params, &maps[which], mode, setup.gains, None, seed, "refine")?;
                let hash = maps[which].content_hash();
                out.push(result(name, x, b, seed, &rec, &hash, BTreeMap::new()));
                if name == "open" || name == "closed" {
                    own.push(rec);
                }
            }
            if r + 1 == opts.repetitions {
                break;
            }
            for (k, rec) in own.iter().enumerate() {
                if !rec.failed {
                    data[k].extend_from(&rec.experience(r as u32)?);
                }
                maps[k] = inverse_map::refine(&maps[k], &data[k], sub_seed(seed, 10 + r as u64 * 2 + k as u64), opts.refine_epochs)?;
            }
        }
        Ok(out)
    })?;
    let mut report = finish(
        ExperimentReport::new("refine", setup.seed, opts.trajectories, Some("repetition")),
        trials,
    );
    let last = Some((opts.repetitions - 1) as f64);
    report.compare("closed-vs-open@final", "rmse", ("closed", last), ("open", last))?;
    report.compare(
        "switched-map@final",
        "rmse",
        ("open-with-closed-map", last),
        ("open", last),
    )?;
    report.info.insert("trajectories".into(), opts.trajectories as f64);
    report.info.insert("repetitions".into(), opts.repetitions as f64);
    report.info.insert("babble_duration_s".into(), opts.babble_duration);
    report.info.insert("initial_epochs".into(), opts.initial_epochs as f64);
    report.info.insert("refine_epochs".into(), opts.refine_epochs as f64);
    Ok(report)
}

/// First repetition from which the mean curve stays within `tol` (relative)
/// of its value there for the rest of the run.
pub fn plateau_index(curve: &[f64], tol: f64) -> Option<usize> {
    (0..curve.len()).find(|&r| {
        let base = curve[r];
        base > 0.0 && curve[r..].iter().all(|v| ((v - base) / base).abs() < tol)
    })
}

/// Dispatch by task name with default options.
pub fn run_task(name: &str, setup: &TaskSetup, map: &InverseMap, opts: &TaskOptions) -> Result<ExperimentReport> {
    match name {
        "cyclical" => task_cyclical(setup, map),
        "point-to-point" => task_point_to_point(setup, map),
        "period-sweep" => task_period_sweep(setup, map, &opts.periods),
        "gantry" => task_gantry(setup, map, &opts.contact_depths),
        "posture-weight" => task_posture_weight(setup, map, opts.posture, opts.posture_duration, opts.weight_factor),
        "refine" => task_refinement(setup, &opts.refine),
        "delay-sweep" => task_delay_sweep(setup, map, &opts.delays_ms),
        "gain-sweep" => task_gain_sweep(setup, map, &opts.gain_scales),
        other => Err(Error::Config(format!(
            "unknown task `{other}`; valid tasks: {}",
            TASK_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_detection() {
        let c = [1.0, 0.6, 0.45, 0.41, 0.40, 0.405, 0.40];
        assert_eq!(plateau_index(&c, 0.05), Some(3));
        assert_eq!(plateau_index(&[1.0], 0.05), Some(0));
        assert_eq!(plateau_index(&[], 0.05), None);
    }

    #[test]
    fn segment_layout_matches_generator() {
        let s = segments(3);
        assert_eq!(s[1], (260, 10, 250));
        let lim = JointLimits::from(&PlantParams::default());
        let t = generate_point_to_point(3, HOLD_DURATION, DT_CTRL, &lim, 1).unwrap();
        assert_eq!(t.len(), 3 * 260);
    }

    #[test]
    fn unknown_task_lists_valid_names() {
        let setup = TaskSetup::new(0, 1);
        let map = InverseMap::zeros(crate::inverse_map::InputBounds { min: [0.0; 6], max: [1.0; 6] });
        let err = run_task("dance", &setup, &map, &TaskOptions::default()).unwrap_err();
        assert!(err.to_string().contains("gain-sweep"));
    }
}
