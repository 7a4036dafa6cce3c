//! Tracking-error and response metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::N_JOINTS;

/// Per-joint and pooled root-mean-square error (rad).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub per_joint: [f64; N_JOINTS],
    pub aggregate: f64,
}

pub fn rmse(desired: &[[f64; N_JOINTS]], achieved: &[[f64; N_JOINTS]]) -> Result<Rmse> {
    if desired.len() != achieved.len() {
        return Err(Error::InvalidInput(format!(
            "series lengths differ: {} vs {}",
            desired.len(),
            achieved.len()
        )));
    }
    if desired.is_empty() {
        return Err(Error::InvalidInput("RMSE of an empty series".into()));
    }
    let mut mse = [0.0; N_JOINTS];
    for (d, a) in desired.iter().zip(achieved) {
        for j in 0..N_JOINTS {
            let e = d[j] - a[j];
            mse[j] += e * e;
        }
    }
    let n = desired.len() as f64;
    let mse = mse.map(|s| s / n);
    Ok(Rmse {
        per_joint: mse.map(f64::sqrt),
        aggregate: (mse.iter().sum::<f64>() / N_JOINTS as f64).sqrt(),
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Rise time and overshoot of one step segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    /// Time from 10 % to 90 % of the step (s); `None` if 90 % is never reached.
    pub rise_time: Option<f64>,
    /// Peak excursion beyond the target as a percentage of the step size.
    pub overshoot_pct: f64,
}

/// Analyse `y` (one joint, one segment) stepping from `start` to `target`.
/// Returns `None` for steps too small to measure.
pub fn step_response(y: &[f64], start: f64, target: f64, dt: f64, min_step: f64) -> Option<StepResponse> {
    let step = target - start;
    if step.abs() < min_step || y.is_empty() {
        return None;
    }
    // Progress along the step direction, 0 at start, 1 at target.
    let frac = |v: f64| (v - start) / step;
    let t10 = y.iter().position(|&v| frac(v) >= 0.1);
    let t90 = y.iter().position(|&v| frac(v) >= 0.9);
    let rise_time = match (t10, t90) {
        (Some(a), Some(b)) if b >= a => Some((b - a) as f64 * dt),
        _ => None,
    };
    let peak = y.iter().map(|&v| frac(v)).fold(f64::NEG_INFINITY, f64::max);
    Some(StepResponse {
        rise_time,
        overshoot_pct: 100.0 * (peak - 1.0).max(0.0),
    })
}

/// Whether some joint stays within `margin` of a limit for longer than
/// `min_duration`.
pub fn collapsed(
    q: &[[f64; N_JOINTS]],
    joint_min: [f64; N_JOINTS],
    joint_max: [f64; N_JOINTS],
    margin: f64,
    dt: f64,
    min_duration: f64,
) -> bool {
    let need = (min_duration / dt).ceil() as usize;
    for j in 0..N_JOINTS {
        let mut run = 0usize;
        for s in q {
            if s[j] <= joint_min[j] + margin || s[j] >= joint_max[j] - margin {
                run += 1;
                if run > need {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}
