//! Input signals: babbling activations and desired joint kinematics.
//!
//! Every generator is a pure function of its arguments and seed.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{ActivationVector, PlantParams, N_JOINTS};

/// Number of spokes/control points of a cyclical pattern.
pub const N_SPOKES: usize = 10;
/// Fraction of the half-range that a unit radius reaches along a spoke.
pub const CYCLE_WORKSPACE_FRACTION: f64 = 0.9;
/// Cut-off of the zero-phase smoothing filter for cyclical patterns.
pub const CYCLE_SMOOTHING_HZ: f64 = 4.0;
pub const RAMP_DURATION: f64 = 0.1;
pub const BABBLE_DWELL_MIN: f64 = 0.2;
pub const BABBLE_DWELL_MAX: f64 = 1.0;
pub const BABBLE_FILTER_TAU: f64 = 0.05;
/// Period grid of the cycle-period sweep.
pub const PERIOD_GRID: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub min: [f64; N_JOINTS],
    pub max: [f64; N_JOINTS],
}

impl JointLimits {
    pub fn center(&self) -> [f64; N_JOINTS] {
        [0, 1].map(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn half_range(&self) -> [f64; N_JOINTS] {
        [0, 1].map(|i| 0.5 * (self.max[i] - self.min[i]))
    }

    pub fn contains(&self, q: &[f64; N_JOINTS]) -> bool {
        (0..N_JOINTS).all(|i| q[i] >= self.min[i] && q[i] <= self.max[i])
    }
}

impl From<&PlantParams> for JointLimits {
    fn from(p: &PlantParams) -> Self {
        JointLimits {
            min: p.joint_min,
            max: p.joint_max,
        }
    }
}

/// How the velocity and acceleration series were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Derivatives {
    /// Central differences, wrapping around for periodic trajectories and
    /// one-sided at the ends otherwise.
    FiniteDifference,
    Analytic,
}

/// Desired joint angles with their first two time derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicTrajectory {
    pub dt: f64,
    pub q: Vec<[f64; N_JOINTS]>,
    pub qd: Vec<[f64; N_JOINTS]>,
    pub qdd: Vec<[f64; N_JOINTS]>,
    /// The series is whole cycles of a periodic signal (differences wrap).
    pub periodic: bool,
    pub derivatives: Derivatives,
}

impl KinematicTrajectory {
    /// Build from positions only; derivatives by central finite difference.
    pub fn from_positions(dt: f64, q: Vec<[f64; N_JOINTS]>, periodic: bool) -> Self {
        let qd = finite_difference(&q, dt, periodic);
        let qdd = finite_difference(&qd, dt, periodic);
        KinematicTrajectory {
            dt,
            q,
            qd,
            qdd,
            periodic,
            derivatives: Derivatives::FiniteDifference,
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.q.len() as f64 * self.dt
    }

    /// Network input `[q1, q2, q1', q2', q1'', q2'']` at sample `n`.
    pub fn kinematics(&self, n: usize) -> [f64; 6] {
        let (q, qd, qdd) = (self.q[n], self.qd[n], self.qdd[n]);
        [q[0], q[1], qd[0], qd[1], qdd[0], qdd[1]]
    }

    pub fn within_limits(&self, limits: &JointLimits) -> bool {
        self.q.iter().all(|q| limits.contains(q))
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qd)
            .chain(&self.qdd)
            .flatten()
            .all(|v| v.is_finite())
    }

    /// Largest deviation of the stored derivatives from central differences
    /// of the series below them.
    pub fn fd_inconsistency(&self) -> f64 {
        let vel = finite_difference(&self.q, self.dt, self.periodic);
        let acc = finite_difference(&self.qd, self.dt, self.periodic);
        let dev = |a: &[[f64; 2]], b: &[[f64; 2]]| {
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| [(x[0] - y[0]).abs(), (x[1] - y[1]).abs()])
                .fold(0.0f64, f64::max)
        };
        dev(&vel, &self.qd).max(dev(&acc, &self.qdd))
    }

    pub fn validate(&self, limits: &JointLimits) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::InvalidInput("trajectory needs at least 2 samples".into()));
        }
        if self.qd.len() != self.len() || self.qdd.len() != self.len() {
            return Err(Error::InvalidInput("trajectory series lengths differ".into()));
        }
        if !(self.dt > 0.0) || !self.is_finite() {
            return Err(Error::InvalidInput("trajectory contains non-finite values".into()));
        }
        if !self.within_limits(limits) {
            return Err(Error::InvalidInput("trajectory leaves the joint limits".into()));
        }
        Ok(())
    }

    /// CSV with header `time,q_d1,q_d2,dq_d1,dq_d2,ddq_d1,ddq_d2`, 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,q_d1,q_d2,dq_d1,dq_d2,ddq_d1,ddq_d2")?;
        for n in 0..self.len() {
            let t = n as f64 * self.dt;
            let k = self.kinematics(n);
            writeln!(
                w,
                "{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
                t, k[0], k[1], k[2], k[3], k[4], k[5]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Read a trajectory written by [`write_csv`](Self::write_csv). The
    /// sample period is taken from the first two time stamps.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty file"))?
            .map_err(|e| Error::io(path, e))?;
        if header.trim() != "time,q_d1,q_d2,dq_d1,dq_d2,ddq_d1,ddq_d2" {
            return Err(Error::parse(path, "unexpected header"));
        }
        let (mut t, mut q, mut qd, mut qdd) = (vec![], vec![], vec![], vec![]);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("row {}: bad number", i + 2)))?;
            if vals.len() != 7 {
                return Err(Error::parse(path, format!("row {}: expected 7 columns", i + 2)));
            }
            t.push(vals[0]);
            q.push([vals[1], vals[2]]);
            qd.push([vals[3], vals[4]]);
            qdd.push([vals[5], vals[6]]);
        }
        if t.len() < 2 {
            return Err(Error::parse(path, "need at least 2 rows"));
        }
        let dt = t[1] - t[0];
        if !(dt > 0.0) {
            return Err(Error::parse(path, "time stamps must increase"));
        }
        Ok(KinematicTrajectory {
            dt,
            q,
            qd,
            qdd,
            periodic: false,
            derivatives: Derivatives::FiniteDifference,
        })
    }
}

/// Central difference of a 2-channel series; wraps when `periodic`, else
/// one-sided at the two ends.
pub fn finite_difference(x: &[[f64; 2]], dt: f64, periodic: bool) -> Vec<[f64; 2]> {
    let n = x.len();
    if n < 2 {
        return vec![[0.0; 2]; n];
    }
    (0..n)
        .map(|i| {
            let (lo, hi, span) = if periodic {
                ((i + n - 1) % n, (i + 1) % n, 2.0)
            } else if i == 0 {
                (0, 1, 1.0)
            } else if i == n - 1 {
                (n - 2, n - 1, 1.0)
            } else {
                (i - 1, i + 1, 2.0)
            };
            [0, 1].map(|j| (x[hi][j] - x[lo][j]) / (span * dt))
        })
        .collect()
}

/// Random actuator commands used to explore the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BabblingSignal {
    pub dt: f64,
    pub activations: Vec<ActivationVector>,
    pub seed: u64,
}

/// Independent child seed for stream `stream` of master `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per tendon: uniform random levels held for uniform random dwell times in
/// `[0.2, 1.0]` s, passed through a 50 ms first-order low-pass.
pub fn generate_babbling(duration: f64, dt: f64, seed: u64) -> Result<BabblingSignal> {
    if !(duration > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidInput(
            "babbling duration and dt must be positive".into(),
        ));
    }
    let n = (duration / dt).round() as usize;
    let alpha = 1.0 - (-dt / BABBLE_FILTER_TAU).exp();
    let mut channels = [vec![], vec![], vec![]];
    for (j, ch) in channels.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, j as u64));
        let mut level: f64 = rng.gen();
        let mut remaining = rng.gen_range(BABBLE_DWELL_MIN..=BABBLE_DWELL_MAX);
        let mut y = level;
        ch.reserve(n);
        for _ in 0..n {
            if remaining <= 0.0 {
                level = rng.gen();
                remaining += rng.gen_range(BABBLE_DWELL_MIN..=BABBLE_DWELL_MAX);
            }
            y += alpha * (level - y);
            ch.push(y);
            remaining -= dt;
        }
    }
    let activations = (0..n)
        .map(|i| ActivationVector::clamped([channels[0][i], channels[1][i], channels[2][i]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(BabblingSignal {
        dt,
        activations,
        seed,
    })
}

/// Ten `U(0,1)` radii for a random cyclical pattern.
pub fn random_radii(seed: u64) -> [f64; N_SPOKES] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| rng.gen())
}

/// Control points on spokes every 36 degrees around the joint-space centre.
/// A unit radius reaches [`CYCLE_WORKSPACE_FRACTION`] of the way to the
/// rectangle boundary along its spoke.
pub fn spoke_points(radii: &[f64; N_SPOKES], limits: &JointLimits) -> [[f64; 2]; N_SPOKES] {
    let c = limits.center();
    let h = limits.half_range();
    std::array::from_fn(|k| {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / N_SPOKES as f64;
        let (s, co) = theta.sin_cos();
        // Distance to the unit square boundary along (co, s).
        let reach = 1.0 / co.abs().max(s.abs());
        let r = radii[k] * reach * CYCLE_WORKSPACE_FRACTION;
        [c[0] + r * co * h[0], c[1] + r * s * h[1]]
    })
}

/// Second derivatives of the periodic cubic spline through `y` at unit knot spacing.
fn periodic_spline_moments(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    // Cyclic system M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]).
    let mut a = vec![vec![0.0; n + 1]; n];
    for i in 0..n {
        a[i][(i + n - 1) % n] += 1.0;
        a[i][i] += 4.0;
        a[i][(i + 1) % n] += 1.0;
        a[i][n] = 6.0 * (y[(i + 1) % n] - 2.0 * y[i] + y[(i + n - 1) % n]);
    }
    // Diagonally dominant: elimination without pivoting is stable.
    for col in 0..n {
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut m = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = a[i][n];
        for k in (i + 1)..n {
            s -= a[i][k] * m[k];
        }
        m[i] = s / a[i][i];
    }
    m
}

fn eval_periodic_spline(y: &[f64], m: &[f64], u: f64) -> f64 {
    let n = y.len();
    let u = u.rem_euclid(n as f64);
    let i = (u.floor() as usize).min(n - 1);
    let t = u - i as f64;
    let j = (i + 1) % n;
    let a = 1.0 - t;
    a * y[i] + t * y[j] + ((a * a * a - a) * m[i] + (t * t * t - t) * m[j]) / 6.0
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// 2nd-order Butterworth low-pass via the bilinear transform.
    fn butterworth_lowpass(cutoff: f64, sample_rate: f64) -> Self {
        let k = (std::f64::consts::PI * cutoff / sample_rate).tan();
        let sqrt2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + sqrt2 * k + k * k);
        let b0 = k * k * norm;
        Biquad {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - sqrt2 * k + k * k) * norm],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Forward-backward filtering of one period of a periodic signal. The period
/// is tiled on both sides far enough that start-up transients have decayed.
fn circular_zero_phase(x: &[f64], cutoff: f64, sample_rate: f64) -> Vec<f64> {
    let m = x.len();
    let pad_copies = 600usize.div_ceil(m).max(1);
    let copies = 2 * pad_copies + 1;
    let mut buf: Vec<f64> = (0..copies * m).map(|i| x[i % m]).collect();
    let f = Biquad::butterworth_lowpass(cutoff, sample_rate);
    f.run(&mut buf);
    buf.reverse();
    f.run(&mut buf);
    buf.reverse();
    buf[pad_copies * m..(pad_copies + 1) * m].to_vec()
}

/// One smoothed period of the cyclical pattern, `samples` long.
pub fn cyclical_period(
    radii: &[f64; N_SPOKES],
    samples: usize,
    dt: f64,
    limits: &JointLimits,
) -> Vec<[f64; 2]> {
    let pts = spoke_points(radii, limits);
    let mut joints = [vec![0.0; samples], vec![0.0; samples]];
    for (j, out) in joints.iter_mut().enumerate() {
        let y: Vec<f64> = pts.iter().map(|p| p[j]).collect();
        let m = periodic_spline_moments(&y);
        for (s, o) in out.iter_mut().enumerate() {
            let u = N_SPOKES as f64 * s as f64 / samples as f64;
            *o = eval_periodic_spline(&y, &m, u);
        }
        *out = circular_zero_phase(out, CYCLE_SMOOTHING_HZ, 1.0 / dt);
    }
    (0..samples)
        .map(|s| {
            [0, 1].map(|j| joints[j][s].clamp(limits.min[j], limits.max[j]))
        })
        .collect()
}

/// Random cyclical joint-space pattern repeated `n_cycles` times.
pub fn generate_cyclical(
    radii: &[f64; N_SPOKES],
    cycle_period: f64,
    n_cycles: usize,
    dt: f64,
    limits: &JointLimits,
) -> Result<KinematicTrajectory> {
    if radii.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidInput(format!("radii must lie in [0, 1]: {radii:?}")));
    }
    if !(cycle_period > 0.0) || !(dt > 0.0) || n_cycles == 0 {
        return Err(Error::InvalidInput(
            "cycle period, dt and cycle count must be positive".into(),
        ));
    }
    let per_cycle = (cycle_period / dt).round() as usize;
    if per_cycle < 4 {
        return Err(Error::InvalidInput("cycle period shorter than 4 samples".into()));
    }
    let one = cyclical_period(radii, per_cycle, dt, limits);
    let q: Vec<[f64; 2]> = (0..per_cycle * n_cycles).map(|i| one[i % per_cycle]).collect();
    Ok(KinematicTrajectory::from_positions(dt, q, true))
}

/// Ramp-and-hold sequence through explicit targets, starting at `start`.
pub fn point_to_point_from_targets(
    start: [f64; 2],
    targets: &[[f64; 2]],
    hold_duration: f64,
    dt: f64,
) -> Result<KinematicTrajectory> {
    if targets.is_empty() || !(hold_duration > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidInput(
            "point-to-point needs targets and positive hold/dt".into(),
        ));
    }
    let ramp = ((RAMP_DURATION / dt).round() as usize).max(1);
    let hold = ((hold_duration / dt).round() as usize).max(1);
    let mut q = Vec::with_capacity(targets.len() * (ramp + hold));
    let mut prev = start;
    for t in targets {
        for k in 0..ramp {
            let s = k as f64 / ramp as f64;
            q.push([0, 1].map(|j| prev[j] + (t[j] - prev[j]) * s));
        }
        q.extend(std::iter::repeat_n(*t, hold));
        prev = *t;
    }
    Ok(KinematicTrajectory::from_positions(dt, q, false))
}

/// Targets drawn from `U(joint_min, joint_max)` per joint.
pub fn random_targets(n_points: usize, limits: &JointLimits, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_points)
        .map(|_| [0, 1].map(|j| rng.gen_range(limits.min[j]..=limits.max[j])))
        .collect()
}

/// Random ramp-and-hold sequence starting at the joint-space centre.
pub fn generate_point_to_point(
    n_points: usize,
    hold_duration: f64,
    dt: f64,
    limits: &JointLimits,
    seed: u64,
) -> Result<KinematicTrajectory> {
    if n_points == 0 {
        return Err(Error::InvalidInput("n_points must be at least 1".into()));
    }
    let targets = random_targets(n_points, limits, seed);
    point_to_point_from_targets(limits.center(), &targets, hold_duration, dt)
}

/// Amplitude of the sinusoidal task as a fraction of each joint's range.
pub const SINE_AMPLITUDE_FRACTION: f64 = 0.25;

/// `q1 = c1 + A1 sin(wt + phase)`, `q2 = c2 + A2 cos(wt + phase)`, analytic derivatives.
pub fn generate_sinusoid(
    cycle_period: f64,
    n_cycles: usize,
    dt: f64,
    limits: &JointLimits,
    phase: f64,
) -> Result<KinematicTrajectory> {
    if !(cycle_period > 0.0) || !(dt > 0.0) || n_cycles == 0 || !phase.is_finite() {
        return Err(Error::InvalidInput(
            "sinusoid period, dt and cycle count must be positive".into(),
        ));
    }
    let n = (n_cycles as f64 * cycle_period / dt).round() as usize;
    let c = limits.center();
    let amp = [0, 1].map(|j| SINE_AMPLITUDE_FRACTION * (limits.max[j] - limits.min[j]));
    let w = 2.0 * std::f64::consts::PI / cycle_period;
    let (mut q, mut qd, mut qdd) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let (s, co) = (w * i as f64 * dt + phase).sin_cos();
        q.push([c[0] + amp[0] * s, c[1] + amp[1] * co]);
        qd.push([amp[0] * w * co, -amp[1] * w * s]);
        qdd.push([-amp[0] * w * w * s, -amp[1] * w * w * co]);
    }
    let per_cycle = cycle_period / dt;
    Ok(KinematicTrajectory {
        dt,
        q,
        qd,
        qdd,
        periodic: (per_cycle - per_cycle.round()).abs() < 1e-9,
        derivatives: Derivatives::Analytic,
    })
}
