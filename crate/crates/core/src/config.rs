//! Resolved run configuration: defaults, overridden by a `key = value` file,
//! overridden by command-line flags. The rendered form is canonical, so its
//! hash identifies a configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{FeedbackGains, Mode, DT_CTRL};
use crate::error::{Error, Result};
use crate::experiments::tasks::{TaskOptions, TaskSetup, CYCLE_PERIOD, HOLD_DURATION, N_CYCLES, N_TARGETS};
use crate::inverse_map::{INITIAL_EPOCHS, REFINE_EPOCHS};
use crate::kv;
use crate::plant::{PlantParams, PLANT_KEYS};
use crate::trajectories::{
    generate_cyclical, generate_point_to_point, generate_sinusoid, random_radii, sub_seed, JointLimits,
    KinematicTrajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Cyclical,
    PointToPoint,
    Sinusoid,
}

impl TrajectoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryKind::Cyclical => "cyclical",
            TrajectoryKind::PointToPoint => "point-to-point",
            TrajectoryKind::Sinusoid => "sinusoid",
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclical" => Ok(TrajectoryKind::Cyclical),
            "point-to-point" => Ok(TrajectoryKind::PointToPoint),
            "sinusoid" => Ok(TrajectoryKind::Sinusoid),
            _ => Err(Error::Config(format!(
                "unknown trajectory `{s}` (cyclical | point-to-point | sinusoid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub plant: PlantParams,
    pub mode: Mode,
    pub gains: FeedbackGains,
    /// `None` leaves the delay line out of the loop altogether.
    pub delay_ms: Option<f64>,
    pub trajectory: TrajectoryKind,
    pub period: f64,
    pub cycles: usize,
    pub targets: usize,
    pub hold: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub babble_duration: f64,
    pub epochs: usize,
    pub trials: usize,
    pub refine_trajectories: usize,
    pub refine_repetitions: usize,
    pub refine_babble_duration: f64,
    pub refine_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let refine = TaskOptions::default().refine;
        RunConfig {
            plant: PlantParams::default(),
            mode: Mode::ClosedLoop,
            gains: FeedbackGains::default(),
            delay_ms: None,
            trajectory: TrajectoryKind::Cyclical,
            period: CYCLE_PERIOD,
            cycles: N_CYCLES,
            targets: N_TARGETS,
            hold: HOLD_DURATION,
            seed: 0,
            out: PathBuf::from("runs"),
            babble_duration: 300.0,
            epochs: INITIAL_EPOCHS,
            trials: 50,
            refine_trajectories: refine.trajectories,
            refine_repetitions: refine.repetitions,
            refine_babble_duration: refine.babble_duration,
            refine_epochs: REFINE_EPOCHS,
        }
    }
}

/// Keys owned by the run configuration itself (plant keys come on top).
pub const RUN_KEYS: &[&str] = &[
    "mode",
    "kp",
    "kp1",
    "kp2",
    "ki",
    "ki1",
    "ki2",
    "integral_clamp",
    "delay_ms",
    "trajectory",
    "period",
    "cycles",
    "targets",
    "hold",
    "seed",
    "out",
    "babble_duration",
    "epochs",
    "trials",
    "refine_trajectories",
    "refine_repetitions",
    "refine_babble_duration",
    "refine_epochs",
];

impl RunConfig {
    /// Assign one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = || kv::parse_f64(key, value);
        match key {
            "mode" => self.mode = value.parse()?,
            "kp" => self.gains.kp = [f()?; 2],
            "kp1" => self.gains.kp[0] = f()?,
            "kp2" => self.gains.kp[1] = f()?,
            "ki" => self.gains.ki = [f()?; 2],
            "ki1" => self.gains.ki[0] = f()?,
            "ki2" => self.gains.ki[1] = f()?,
            "integral_clamp" => self.gains.integral_clamp = f()?,
            "delay_ms" => {
                self.delay_ms = match value {
                    "none" | "" => None,
                    _ => Some(f()?),
                }
            }
            "trajectory" => self.trajectory = value.parse()?,
            "period" => self.period = f()?,
            "cycles" => self.cycles = kv::parse_usize(key, value)?,
            "targets" => self.targets = kv::parse_usize(key, value)?,
            "hold" => self.hold = f()?,
            "seed" => self.seed = kv::parse_u64(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "babble_duration" => self.babble_duration = f()?,
            "epochs" => self.epochs = kv::parse_usize(key, value)?,
            "trials" => self.trials = kv::parse_usize(key, value)?,
            "refine_trajectories" => self.refine_trajectories = kv::parse_usize(key, value)?,
            "refine_repetitions" => self.refine_repetitions = kv::parse_usize(key, value)?,
            "refine_babble_duration" => self.refine_babble_duration = f()?,
            "refine_epochs" => self.refine_epochs = kv::parse_usize(key, value)?,
            _ if PLANT_KEYS.contains(&key) => self.plant.set(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply a config file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        for e in kv::read(path)? {
            self.set(&e.key, &e.value).map_err(|err| {
                Error::parse(path, format!("line {}: {err}", e.line))
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(p) = file {
            c.apply_file(p)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.gains.validate()?;
        let positive = [
            ("period", self.period),
            ("hold", self.hold),
            ("babble_duration", self.babble_duration),
            ("refine_babble_duration", self.refine_babble_duration),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if let Some(d) = self.delay_ms {
            if d < 0.0 {
                return Err(Error::Config("`delay_ms` must be non-negative".into()));
            }
        }
        let counts = [
            ("cycles", self.cycles),
            ("targets", self.targets),
            ("trials", self.trials),
            ("refine_trajectories", self.refine_trajectories),
            ("refine_repetitions", self.refine_repetitions),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be at least 1")));
            }
        }
        Ok(())
    }

    /// Delay in whole control ticks, rounded to the nearest tick.
    pub fn delay_ticks(&self) -> Option<usize> {
        self.delay_ms.map(|ms| (ms * 1e-3 / DT_CTRL).round() as usize)
    }

    /// Canonical ordered key/value pairs; parsing them back yields `self`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let f = kv::fmt_f64;
        let g = &self.gains;
        let mut out: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.as_str().into()),
            ("kp1".into(), f(g.kp[0])),
            ("kp2".into(), f(g.kp[1])),
            ("ki1".into(), f(g.ki[0])),
            ("ki2".into(), f(g.ki[1])),
            ("integral_clamp".into(), f(g.integral_clamp)),
            ("delay_ms".into(), self.delay_ms.map_or("none".into(), f)),
            ("trajectory".into(), self.trajectory.as_str().into()),
            ("period".into(), f(self.period)),
            ("cycles".into(), self.cycles.to_string()),
            ("targets".into(), self.targets.to_string()),
            ("hold".into(), f(self.hold)),
            ("seed".into(), self.seed.to_string()),
            ("out".into(), self.out.display().to_string()),
            ("babble_duration".into(), f(self.babble_duration)),
            ("epochs".into(), self.epochs.to_string()),
            ("trials".into(), self.trials.to_string()),
            ("refine_trajectories".into(), self.refine_trajectories.to_string()),
            ("refine_repetitions".into(), self.refine_repetitions.to_string()),
            ("refine_babble_duration".into(), f(self.refine_babble_duration)),
            ("refine_epochs".into(), self.refine_epochs.to_string()),
        ];
        out.extend(self.plant.to_pairs());
        out
    }

    pub fn render(&self) -> String {
        kv::render(&self.to_pairs())
    }

    /// SHA-256 of everything except the output directory, which does not
    /// affect results.
    pub fn content_hash(&self) -> String {
        let pairs: Vec<_> = self.to_pairs().into_iter().filter(|(k, _)| k != "out").collect();
        hex::encode(Sha256::digest(kv::render(&pairs).as_bytes()))
    }

    pub fn limits(&self) -> JointLimits {
        JointLimits::from(&self.plant)
    }

    /// The single-run trajectory selected by this configuration.
    pub fn trajectory(&self) -> Result<KinematicTrajectory> {
        let seed = sub_seed(self.seed, 0);
        let lim = self.limits();
        match self.trajectory {
            TrajectoryKind::Cyclical => {
                generate_cyclical(&random_radii(seed), self.period, self.cycles, DT_CTRL, &lim)
            }
            TrajectoryKind::PointToPoint => {
                generate_point_to_point(self.targets, self.hold, DT_CTRL, &lim, seed)
            }
            TrajectoryKind::Sinusoid => generate_sinusoid(self.period, self.cycles, DT_CTRL, &lim, 0.0),
        }
    }

    pub fn task_setup(&self, map_hash: &str) -> TaskSetup {
        let mut s = TaskSetup::new(self.seed, self.trials);
        s.params = self.plant.clone();
        s.gains = self.gains;
        s.map_hash = map_hash.to_string();
        s
    }

    pub fn task_options(&self) -> TaskOptions {
        let mut o = TaskOptions::default();
        o.refine.trajectories = self.refine_trajectories;
        o.refine.repetitions = self.refine_repetitions;
        o.refine.babble_duration = self.refine_babble_duration;
        o.refine.initial_epochs = self.epochs;
        o.refine.refine_epochs = self.refine_epochs;
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_config_round_trips() {
        let mut c = RunConfig::default();
        c.set("kp", "2.5").unwrap();
        c.set("delay_ms", "30").unwrap();
        c.set("joint1_friction", "0.07").unwrap();
        let mut back = RunConfig::default();
        for e in kv::parse(&c.render()).unwrap() {
            back.set(&e.key, &e.value).unwrap();
        }
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("kpp", "1").is_err());
        assert!(c.set("link3_length", "1").is_err());
    }

    #[test]
    fn precedence_overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "seed = 7\nkp = 3\n").unwrap();
        let c = RunConfig::resolve(Some(&p), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.gains.kp, [3.0, 3.0]);
        assert_eq!(c.gains.ki, FeedbackGains::default().ki);
    }

    #[test]
    fn output_directory_does_not_change_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn delay_rounds_to_ticks() {
        let mut c = RunConfig::default();
        assert_eq!(c.delay_ticks(), None);
        c.set("delay_ms", "30").unwrap();
        assert_eq!(c.delay_ticks(), Some(3));
    }
}
