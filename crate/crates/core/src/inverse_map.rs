//! Inverse map from joint kinematics to tendon activations.
//!
//! A 6-15-3 perceptron: min/max input normalisation, `tanh` hidden layer,
//! logistic output. Trained with mini-batch gradient descent with momentum on
//! plain mean-squared error. Refinement continues from existing weights on
//! the cumulative data set, which must always contain the babbling rows the
//! map was first trained on.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plant::ActivationVector;

pub const N_INPUTS: usize = 6;
pub const N_HIDDEN: usize = 15;
pub const N_OUTPUTS: usize = 3;
pub const N_WEIGHTS: usize = N_INPUTS * N_HIDDEN + N_HIDDEN + N_HIDDEN * N_OUTPUTS + N_OUTPUTS;

const W1: usize = 0;
const B1: usize = W1 + N_INPUTS * N_HIDDEN;
const W2: usize = B1 + N_HIDDEN;
const B2: usize = W2 + N_HIDDEN * N_OUTPUTS;

/// Normalised inputs are clamped to this far outside `[0, 1]`.
pub const NORM_MARGIN: f64 = 0.5;

const FORMAT_TAG: &str = "tendon-leg-inverse-map v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SampleSource {
    Babbling,
    Experience { run: u32 },
}

/// Training rows: kinematics in, activations out, each tagged with its origin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    inputs: Vec<[f64; N_INPUTS]>,
    targets: Vec<[f64; N_OUTPUTS]>,
    sources: Vec<SampleSource>,
}

/// Per-dimension input range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub min: [f64; N_INPUTS],
    pub max: [f64; N_INPUTS],
}

impl SampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        input: [f64; N_INPUTS],
        target: [f64; N_OUTPUTS],
        source: SampleSource,
    ) -> Result<()> {
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample input {input:?}")));
        }
        if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "sample target outside [0, 1]: {target:?}"
            )));
        }
        self.inputs.push(input);
        self.targets.push(target);
        self.sources.push(source);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &SampleSet) {
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        self.sources.extend_from_slice(&other.sources);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64; N_INPUTS] {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> &[f64; N_OUTPUTS] {
        &self.targets[i]
    }

    pub fn source(&self, i: usize) -> SampleSource {
        self.sources[i]
    }

    pub fn babbling_count(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| matches!(s, SampleSource::Babbling))
            .count()
    }

    /// Rows tagged as babbling, in order.
    pub fn babbling_subset(&self) -> SampleSet {
        let mut out = SampleSet::new();
        for i in 0..self.len() {
            if self.sources[i] == SampleSource::Babbling {
                out.inputs.push(self.inputs[i]);
                out.targets.push(self.targets[i]);
                out.sources.push(self.sources[i]);
            }
        }
        out
    }

    /// Input min/max over all rows; `None` when empty.
    pub fn bounds(&self) -> Option<InputBounds> {
        let first = self.inputs.first()?;
        let mut b = InputBounds {
            min: *first,
            max: *first,
        };
        for x in &self.inputs {
            for d in 0..N_INPUTS {
                b.min[d] = b.min[d].min(x[d]);
                b.max[d] = b.max[d].max(x[d]);
            }
        }
        Some(b)
    }

    /// SHA-256 over the babbling rows (bit patterns, in order).
    pub fn babbling_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for i in 0..self.len() {
            if self.sources[i] == SampleSource::Babbling {
                for v in self.inputs[i].iter().chain(&self.targets[i]) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "source,run,q1,q2,dq1,dq2,ddq1,ddq2,a1,a2,a3")?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            match self.sources[i] {
                SampleSource::Babbling => line.push_str("babbling,"),
                SampleSource::Experience { run } => {
                    let _ = write!(line, "experience,{run}");
                }
            }
            for v in self.inputs[i].iter().chain(&self.targets[i]) {
                let _ = write!(line, ",{v:?}");
            }
            writeln!(w, "{line}")?;
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

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty file"))?
            .map_err(|e| Error::io(path, e))?;
        if header.trim() != "source,run,q1,q2,dq1,dq2,ddq1,ddq2,a1,a2,a3" {
            return Err(Error::parse(path, "unexpected sample-set header"));
        }
        let mut set = SampleSet::new();
        for (i, line) in lines.enumerate() {
            let row = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 11 {
                return Err(Error::parse(path, format!("row {row}: expected 11 columns")));
            }
            let source = match (cols[0], cols[1]) {
                ("babbling", "") => SampleSource::Babbling,
                ("experience", r) => SampleSource::Experience {
                    run: r
                        .parse()
                        .map_err(|_| Error::parse(path, format!("row {row}: bad run index")))?,
                },
                _ => return Err(Error::parse(path, format!("row {row}: bad source tag"))),
            };
            let mut vals = [0.0; 9];
            for (k, c) in cols[2..].iter().enumerate() {
                vals[k] = c
                    .parse()
                    .map_err(|_| Error::parse(path, format!("row {row}: bad number")))?;
            }
            let input: [f64; 6] = vals[..6].try_into().unwrap();
            let target: [f64; 3] = vals[6..].try_into().unwrap();
            set.push(input, target, source)
                .map_err(|e| Error::parse(path, format!("row {row}: {e}")))?;
        }
        Ok(set)
    }
}

/// Provenance of a map's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Total epochs across initial training and all refinements.
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub refinements: usize,
    pub babbling_rows: usize,
    pub babbling_fingerprint: String,
}

/// Optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

pub const INITIAL_EPOCHS: usize = 2000;
pub const REFINE_EPOCHS: usize = 500;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: INITIAL_EPOCHS,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }
}

/// Trained network plus its input normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseMap {
    weights: Vec<f64>,
    bounds: InputBounds,
    pub meta: TrainingMeta,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Forward {
    x: [f64; N_INPUTS],
    h: [f64; N_HIDDEN],
    y: [f64; N_OUTPUTS],
}

impl InverseMap {
    /// Map with all weights zero (outputs 0.5 everywhere).
    pub fn zeros(bounds: InputBounds) -> Self {
        Self::from_weights(vec![0.0; N_WEIGHTS], bounds).expect("zero weights are valid")
    }

    pub fn from_weights(weights: Vec<f64>, bounds: InputBounds) -> Result<Self> {
        if weights.len() != N_WEIGHTS {
            return Err(Error::InvalidInput(format!(
                "expected {N_WEIGHTS} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        Ok(InverseMap {
            weights,
            bounds,
            meta: TrainingMeta {
                epochs: 0,
                final_loss: f64::NAN,
                seed: 0,
                refinements: 0,
                babbling_rows: 0,
                babbling_fingerprint: String::new(),
            },
        })
    }

    fn init(bounds: InputBounds, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; N_WEIGHTS];
        let l1 = (6.0 / (N_INPUTS + N_HIDDEN) as f64).sqrt();
        let l2 = (6.0 / (N_HIDDEN + N_OUTPUTS) as f64).sqrt();
        for v in &mut w[W1..B1] {
            *v = rng.gen_range(-l1..l1);
        }
        for v in &mut w[W2..B2] {
            *v = rng.gen_range(-l2..l2);
        }
        InverseMap::from_weights(w, bounds).expect("initial weights are finite")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bounds(&self) -> &InputBounds {
        &self.bounds
    }

    /// Replace one weight (used by tests and finite-difference checks).
    pub fn set_weight(&mut self, i: usize, v: f64) {
        self.weights[i] = v;
    }

    fn normalize(&self, k: &[f64; N_INPUTS]) -> [f64; N_INPUTS] {
        std::array::from_fn(|d| {
            let span = self.bounds.max[d] - self.bounds.min[d];
            if span > 0.0 {
                ((k[d] - self.bounds.min[d]) / span).clamp(-NORM_MARGIN, 1.0 + NORM_MARGIN)
            } else {
                0.0
            }
        })
    }

    fn forward(&self, k: &[f64; N_INPUTS]) -> Forward {
        let w = &self.weights;
        let x = self.normalize(k);
        let mut h = [0.0; N_HIDDEN];
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &w[W1 + j * N_INPUTS..W1 + (j + 1) * N_INPUTS];
            let mut s = w[B1 + j];
            for d in 0..N_INPUTS {
                s += row[d] * x[d];
            }
            *hj = s.tanh();
        }
        let mut y = [0.0; N_OUTPUTS];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[W2 + o * N_HIDDEN..W2 + (o + 1) * N_HIDDEN];
            let mut s = w[B2 + o];
            for j in 0..N_HIDDEN {
                s += row[j] * h[j];
            }
            *yo = sigmoid(s);
        }
        Forward { x, h, y }
    }

    /// Raw network output, each element strictly inside `(0, 1)`.
    pub fn predict_raw(&self, kinematics: &[f64; N_INPUTS]) -> Result<[f64; N_OUTPUTS]> {
        if kinematics.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite kinematics {kinematics:?}"
            )));
        }
        Ok(self.forward(kinematics).y)
    }

    pub fn predict(&self, kinematics: &[f64; N_INPUTS]) -> Result<ActivationVector> {
        ActivationVector::clamped(self.predict_raw(kinematics)?)
    }

    /// Mean-squared error over every output of every row.
    pub fn loss(&self, data: &SampleSet) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..data.len() {
            let y = self.forward(&data.inputs[i]).y;
            for o in 0..N_OUTPUTS {
                let e = y[o] - data.targets[i][o];
                s += e * e;
            }
        }
        s / (data.len() * N_OUTPUTS) as f64
    }

    /// Accumulate the gradient of the batch MSE into `grad` and return the
    /// batch's summed squared error.
    fn accumulate_gradient(&self, data: &SampleSet, rows: &[usize], grad: &mut [f64]) -> f64 {
        let w = &self.weights;
        let scale = 2.0 / (rows.len() * N_OUTPUTS) as f64;
        let mut sse = 0.0;
        for &i in rows {
            let f = self.forward(&data.inputs[i]);
            let t = &data.targets[i];
            let mut dz2 = [0.0; N_OUTPUTS];
            for o in 0..N_OUTPUTS {
                let e = f.y[o] - t[o];
                sse += e * e;
                dz2[o] = scale * e * f.y[o] * (1.0 - f.y[o]);
            }
            let mut dh = [0.0; N_HIDDEN];
            for o in 0..N_OUTPUTS {
                let g = dz2[o];
                grad[B2 + o] += g;
                let base = W2 + o * N_HIDDEN;
                for j in 0..N_HIDDEN {
                    grad[base + j] += g * f.h[j];
                    dh[j] += g * w[base + j];
                }
            }
            for j in 0..N_HIDDEN {
                let dz1 = dh[j] * (1.0 - f.h[j] * f.h[j]);
                grad[B1 + j] += dz1;
                let base = W1 + j * N_INPUTS;
                for d in 0..N_INPUTS {
                    grad[base + d] += dz1 * f.x[d];
                }
            }
        }
        sse
    }

    /// Gradient of [`loss`](Self::loss) with respect to every weight.
    pub fn loss_gradient(&self, data: &SampleSet) -> Vec<f64> {
        let mut g = vec![0.0; N_WEIGHTS];
        let rows: Vec<usize> = (0..data.len()).collect();
        if !rows.is_empty() {
            self.accumulate_gradient(data, &rows, &mut g);
        }
        g
    }

    /// Run `cfg.epochs` epochs of mini-batch SGD with momentum from the
    /// current weights. Returns the mean batch loss of each epoch.
    fn fit(&mut self, data: &SampleSet, seed: u64, cfg: &TrainConfig) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut velocity = vec![0.0; N_WEIGHTS];
        let mut grad = vec![0.0; N_WEIGHTS];
        let batch = cfg.batch_size.max(1);
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sse = 0.0;
            for rows in order.chunks(batch) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                sse += self.accumulate_gradient(data, rows, &mut grad);
                for ((w, v), g) in self.weights.iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                    *w += *v;
                }
            }
            let loss = sse / (data.len() * N_OUTPUTS) as f64;
            if !loss.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            history.push(loss);
        }
        Ok(history)
    }

    /// SHA-256 of the serialised map.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |s: &mut String, name: &str, vals: &[f64]| {
            let _ = write!(s, "{name}");
            for v in vals {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        };
        let _ = writeln!(s, "{FORMAT_TAG}");
        let _ = writeln!(s, "topology {N_INPUTS} {N_HIDDEN} {N_OUTPUTS}");
        list(&mut s, "input_min", &self.bounds.min);
        list(&mut s, "input_max", &self.bounds.max);
        list(&mut s, "w1", &self.weights[W1..B1]);
        list(&mut s, "b1", &self.weights[B1..W2]);
        list(&mut s, "w2", &self.weights[W2..B2]);
        list(&mut s, "b2", &self.weights[B2..]);
        let m = &self.meta;
        let _ = writeln!(s, "epochs {}", m.epochs);
        let _ = writeln!(s, "final_loss {:?}", m.final_loss);
        let _ = writeln!(s, "seed {}", m.seed);
        let _ = writeln!(s, "refinements {}", m.refinements);
        let _ = writeln!(s, "babbling_rows {}", m.babbling_rows);
        let fp = if m.babbling_fingerprint.is_empty() {
            "-"
        } else {
            &m.babbling_fingerprint
        };
        let _ = writeln!(s, "babbling_fingerprint {fp}");
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(FORMAT_TAG) {
            return Err("missing or unsupported format tag".into());
        }
        let mut field = |name: &str| -> std::result::Result<Vec<String>, String> {
            let line = lines.next().ok_or_else(|| format!("missing `{name}`"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(format!("expected `{name}`"));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let floats = |v: Vec<String>, n: usize, name: &str| -> std::result::Result<Vec<f64>, String> {
            if v.len() != n {
                return Err(format!("`{name}` needs {n} values, found {}", v.len()));
            }
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|_| format!("`{name}`: bad number `{s}`")))
                .collect()
        };
        let topo = field("topology")?;
        if topo != ["6", "15", "3"] {
            return Err(format!("unsupported topology {topo:?}"));
        }
        let min = floats(field("input_min")?, N_INPUTS, "input_min")?;
        let max = floats(field("input_max")?, N_INPUTS, "input_max")?;
        let mut weights = floats(field("w1")?, N_INPUTS * N_HIDDEN, "w1")?;
        weights.extend(floats(field("b1")?, N_HIDDEN, "b1")?);
        weights.extend(floats(field("w2")?, N_HIDDEN * N_OUTPUTS, "w2")?);
        weights.extend(floats(field("b2")?, N_OUTPUTS, "b2")?);
        let one = |v: Vec<String>, name: &str| -> std::result::Result<String, String> {
            match v.as_slice() {
                [x] => Ok(x.clone()),
                _ => Err(format!("`{name}` needs one value")),
            }
        };
        let uint = |s: String, name: &str| -> std::result::Result<u64, String> {
            s.parse().map_err(|_| format!("`{name}`: bad integer"))
        };
        let epochs = uint(one(field("epochs")?, "epochs")?, "epochs")? as usize;
        let final_loss: f64 = one(field("final_loss")?, "final_loss")?
            .parse()
            .map_err(|_| "`final_loss`: bad number".to_string())?;
        let seed = uint(one(field("seed")?, "seed")?, "seed")?;
        let refinements = uint(one(field("refinements")?, "refinements")?, "refinements")? as usize;
        let babbling_rows =
            uint(one(field("babbling_rows")?, "babbling_rows")?, "babbling_rows")? as usize;
        let fp = one(field("babbling_fingerprint")?, "babbling_fingerprint")?;
        let bounds = InputBounds {
            min: min.try_into().unwrap(),
            max: max.try_into().unwrap(),
        };
        let mut map = InverseMap::from_weights(weights, bounds).map_err(|e| e.to_string())?;
        map.meta = TrainingMeta {
            epochs,
            final_loss,
            seed,
            refinements,
            babbling_rows,
            babbling_fingerprint: if fp == "-" { String::new() } else { fp },
        };
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        InverseMap::from_text(&text).map_err(|m| Error::parse(path, m))
    }
}

/// Train a fresh map with the default optimiser settings.
pub fn train(data: &SampleSet, seed: u64, epochs: usize) -> Result<InverseMap> {
    train_with(data, seed, &TrainConfig::with_epochs(epochs)).map(|(m, _)| m)
}

/// Train a fresh map; also returns the per-epoch loss history.
///
/// Input normalisation is taken from the babbling rows (all rows if none
/// are tagged as babbling) and stays frozen through later refinements.
pub fn train_with(
    data: &SampleSet,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(InverseMap, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty sample set".into()));
    }
    let babbling = data.babbling_subset();
    let bounds = if babbling.is_empty() {
        data.bounds()
    } else {
        babbling.bounds()
    }
    .expect("non-empty");
    let mut map = InverseMap::init(bounds, seed);
    let history = map.fit(data, seed, cfg)?;
    map.meta = TrainingMeta {
        epochs: cfg.epochs,
        final_loss: map.loss(data),
        seed,
        refinements: 0,
        babbling_rows: babbling.len(),
        babbling_fingerprint: data.babbling_fingerprint(),
    };
    Ok(map)
        .map(|m| (m, history))
}

/// Continue training `map` on `cumulative` without reinitialising.
pub fn refine(
    map: &InverseMap,
    cumulative: &SampleSet,
    seed: u64,
    epochs: usize,
) -> Result<InverseMap> {
    refine_with(map, cumulative, seed, &TrainConfig::with_epochs(epochs)).map(|(m, _)| m)
}

pub fn refine_with(
    map: &InverseMap,
    cumulative: &SampleSet,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(InverseMap, Vec<f64>)> {
    if cumulative.babbling_count() != map.meta.babbling_rows
        || cumulative.babbling_fingerprint() != map.meta.babbling_fingerprint
        || cumulative.babbling_count() == 0
    {
        return Err(Error::Contract(format!(
            "refinement data must contain the map's {} babbling rows (found {})",
            map.meta.babbling_rows,
            cumulative.babbling_count()
        )));
    }
    let mut out = map.clone();
    let history = out.fit(cumulative, seed, cfg)?;
    out.meta.epochs += cfg.epochs;
    out.meta.refinements += 1;
    out.meta.seed = seed;
    out.meta.final_loss = out.loss(cumulative);
    Ok((out, history))
}

/// Step for central finite differences in [`gradient_check`].
pub const GRADIENT_CHECK_STEP: f64 = 1e-5;
/// Number of weights probed by [`gradient_check`].
pub const GRADIENT_CHECK_WEIGHTS: usize = 24;

/// Compare `gradient` against central differences of the loss on a sample of
/// weights; returns the largest relative error.
pub fn gradient_check_with<G>(map: &InverseMap, data: &SampleSet, gradient: G) -> f64
where
    G: Fn(&InverseMap, &SampleSet) -> Vec<f64>,
{
    let analytic = gradient(map, data);
    let mut idx: Vec<usize> = (0..N_WEIGHTS).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(0x9c));
    // Always include one weight from each parameter block.
    let mut picks: Vec<usize> = vec![W1, B1, W2, B2];
    picks.extend(idx.into_iter().filter(|i| ![W1, B1, W2, B2].contains(i)));
    picks.truncate(GRADIENT_CHECK_WEIGHTS);
    let h = GRADIENT_CHECK_STEP;
    let mut probe = map.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let w0 = map.weights[i];
        probe.weights[i] = w0 + h;
        let up = probe.loss(data);
        probe.weights[i] = w0 - h;
        let down = probe.loss(data);
        probe.weights[i] = w0;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Backpropagation checked against finite differences.
pub fn gradient_check(map: &InverseMap, data: &SampleSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("gradient check needs data".into()));
    }
    Ok(gradient_check_with(map, data, InverseMap::loss_gradient))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bounds() -> InputBounds {
        InputBounds {
            min: [0.0; 6],
            max: [1.0; 6],
        }
    }

    fn random_set(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SampleSet::new();
        for _ in 0..n {
            let x: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let t: [f64; 3] = std::array::from_fn(|_| rng.gen());
            s.push(x, t, SampleSource::Babbling).unwrap();
        }
        s
    }

    #[test]
    fn weight_count() {
        assert_eq!(N_WEIGHTS, 153);
    }

    #[test]
    fn zero_weights_give_half() {
        let m = InverseMap::zeros(unit_bounds());
        assert_eq!(m.predict_raw(&[0.3, -1.0, 5.0, 0.0, 2.0, 1.0]).unwrap(), [0.5; 3]);
    }

    #[test]
    fn single_path_forward_pass() {
        let mut w = vec![0.0; N_WEIGHTS];
        // input 0 -> hidden 0 -> output 1, unit weights.
        w[W1] = 1.0;
        w[W2 + N_HIDDEN] = 1.0;
        let m = InverseMap::from_weights(w, unit_bounds()).unwrap();
        let y = m.predict_raw(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expect = 1.0 / (1.0 + (-(1.0f64).tanh()).exp());
        assert!((y[1] - expect).abs() < 1e-15);
        assert!((y[1] - 0.6817).abs() < 1e-4);
        assert_eq!(y[0], 0.5);
        assert_eq!(y[2], 0.5);
    }

    #[test]
    fn normalisation_clamps_far_inputs() {
        let mut w = vec![0.0; N_WEIGHTS];
        w[W1] = 1.0;
        w[W2] = 1.0;
        let m = InverseMap::from_weights(w, unit_bounds()).unwrap();
        let far = m.predict_raw(&[100.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let edge = m.predict_raw(&[1.5, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(far, edge);
    }

    #[test]
    fn predict_rejects_non_finite() {
        let m = InverseMap::zeros(unit_bounds());
        assert!(m.predict(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn train_rejects_empty() {
        assert!(train(&SampleSet::new(), 0, 10).is_err());
    }

    #[test]
    fn sample_set_validation() {
        let mut s = SampleSet::new();
        assert!(s.push([0.0; 6], [1.2, 0.0, 0.0], SampleSource::Babbling).is_err());
        assert!(s.push([f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 3], SampleSource::Babbling).is_err());
        assert!(s.is_empty());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = random_set(40, 3);
        let map = InverseMap::init(data.bounds().unwrap(), 9);
        let err = gradient_check(&map, &data).unwrap();
        assert!(err < 1e-5, "relative gradient error {err}");
    }

    #[test]
    fn zero_map_gradient_check() {
        let data = random_set(20, 4);
        let map = InverseMap::zeros(data.bounds().unwrap());
        assert!(gradient_check(&map, &data).unwrap() < 1e-5);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let data = random_set(20, 5);
        let map = InverseMap::init(data.bounds().unwrap(), 1);
        let bad = |m: &InverseMap, d: &SampleSet| {
            m.loss_gradient(d).into_iter().map(|g| g * 1.1).collect()
        };
        assert!(gradient_check_with(&map, &data, bad) > 1e-2);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let data = random_set(30, 6);
        let map = train(&data, 2, 3).unwrap();
        let back = InverseMap::from_text(&map.to_text()).unwrap();
        assert_eq!(back.weights.len(), N_WEIGHTS);
        for (a, b) in map.weights.iter().zip(&back.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, map);
        assert!(InverseMap::from_text("garbage").is_err());
    }

    #[test]
    fn refine_requires_babbling_rows() {
        let data = random_set(30, 7);
        let map = train(&data, 2, 2).unwrap();
        let mut only_experience = SampleSet::new();
        only_experience
            .push([0.0; 6], [0.5; 3], SampleSource::Experience { run: 0 })
            .unwrap();
        assert!(matches!(
            refine(&map, &only_experience, 1, 1),
            Err(Error::Contract(_))
        ));
        // Dropping a single babbling row is also a violation.
        let mut partial = SampleSet::new();
        for i in 1..data.len() {
            partial
                .push(*data.input(i), *data.target(i), data.source(i))
                .unwrap();
        }
        assert!(refine(&map, &partial, 1, 1).is_err());
    }

    #[test]
    fn zero_epoch_refine_is_identity_on_weights() {
        let data = random_set(30, 8);
        let map = train(&data, 2, 2).unwrap();
        let r = refine(&map, &data, 5, 0).unwrap();
        assert_eq!(r.weights, map.weights);
        assert_eq!(r.meta.refinements, 1);
    }
}
