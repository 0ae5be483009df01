//! Training: the outlier-rejecting Smooth-L1 loss, pair sampling, Adam and
//! the fixed-budget training loop for both graphs.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::gaze::{BinocularSample, GazeVector};
use crate::net::{backward, init_params, Example, ModelKind, OutputLoss, ParamSet};
use crate::polarization::Modality;
use crate::rng::{keyed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// Quadratic-to-linear transition, degrees.
    pub beta: f64,
    /// Outlier threshold, degrees.
    pub tau: f64,
    /// Weight applied to outlier residuals.
    pub k: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            beta: 0.1,
            tau: 0.1,
            k: 0.1,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("loss beta {} must be positive", self.beta)));
        }
        if !(self.tau >= self.beta) {
            return Err(Error::Config(format!("loss tau {} must be >= beta", self.tau)));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::Config(format!("loss k {} must lie in (0, 1]", self.k)));
        }
        Ok(())
    }

    /// Loss and derivative of a single residual.
    pub fn component(&self, e: f64) -> (f64, f64) {
        let a = e.abs();
        let sign = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        if a < self.beta {
            (0.5 * e * e / self.beta, e / self.beta)
        } else if a < self.tau {
            (a - 0.5 * self.beta, sign)
        } else {
            (self.k * (a - 0.5 * self.beta), self.k * sign)
        }
    }
}

/// Mean of the per-component losses and its gradient w.r.t. `pred`.
pub fn loss_eq1(pred: &GazeVector, target: &GazeVector, lp: &LossParams) -> (f64, GazeVector) {
    let mut total = 0.0;
    let mut grad = [0.0; 4];
    for (i, slot) in grad.iter_mut().enumerate() {
        let (l, g) = lp.component(pred.0[i] - target.0[i]);
        total += l;
        *slot = g / 4.0;
    }
    (total / 4.0, GazeVector(grad))
}

impl OutputLoss for LossParams {
    fn eval(&self, prediction: &GazeVector, target: &GazeVector) -> (f64, GazeVector) {
        loss_eq1(prediction, target, self)
    }
}

/// A query/reference pair from one subject with target `g_query − g_reference`.
#[derive(Debug, Clone, Copy)]
pub struct PairSample<'a> {
    pub query: &'a BinocularSample,
    pub reference: &'a BinocularSample,
    pub target: GazeVector,
}

impl<'a> PairSample<'a> {
    pub fn new(query: &'a BinocularSample, reference: &'a BinocularSample) -> Self {
        PairSample {
            query,
            reference,
            target: query.label - reference.label,
        }
    }

    pub fn example(&self) -> Example<'a> {
        Example::Pair {
            query: self.query,
            reference: self.reference,
            target: self.target,
        }
    }
}

/// `n` pairs of distinct frames drawn uniformly from one subject.
pub fn sample_random_pairs<'a>(
    frames: &'a [BinocularSample],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairSample<'a>>> {
    if frames.len() < 2 {
        return Err(Error::Data(format!(
            "random pairs need at least 2 frames, subject has {}",
            frames.len()
        )));
    }
    Ok((0..n)
        .map(|_| {
            let q = rng.random_range(0..frames.len());
            let mut r = rng.random_range(0..frames.len() - 1);
            if r >= q {
                r += 1;
            }
            PairSample::new(&frames[q], &frames[r])
        })
        .collect())
}

/// `n` pairs whose query is uniform over `frames` and whose reference is
/// uniform over the fixed anchor set.
pub fn sample_calibration_pairs<'a>(
    frames: &'a [BinocularSample],
    anchors: &[&'a BinocularSample],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairSample<'a>>> {
    if anchors.is_empty() {
        return Err(Error::Data("calibration sampling needs a non-empty anchor set".into()));
    }
    if frames.is_empty() {
        return Err(Error::Data("calibration sampling needs query frames".into()));
    }
    Ok((0..n)
        .map(|_| {
            let q = rng.random_range(0..frames.len());
            let r = rng.random_range(0..anchors.len());
            PairSample::new(&frames[q], anchors[r])
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Random,
    Calibration,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampling::Random),
            "calibration" => Ok(Sampling::Calibration),
            other => Err(Error::Config(format!("unknown sampling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub modality: Modality,
    pub sampling: Sampling,
    /// Pairs drawn per epoch over all training subjects; `None` means
    /// 20 × main frames per subject.
    pub pairs_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub seed: u64,
    pub loss: LossParams,
    /// Anchors per subject for calibration sampling.
    pub calib_anchors: usize,
    /// Steps between held-out evaluations in the log; 0 disables them.
    pub eval_interval: usize,
    /// Held-out subjects used for the logged evaluation.
    pub eval_subjects: usize,
    /// Anchors used for logged Siamese evaluation.
    pub eval_anchors: usize,
    /// The returned parameters are the uniform average of the iterates of
    /// the last `average_tail` steps (all steps if fewer); 1 keeps the final
    /// iterate.
    pub average_tail: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Siamese,
            modality: Modality::Polarization,
            sampling: Sampling::Random,
            pairs_per_epoch: None,
            batch_size: 32,
            steps: 3000,
            learning_rate: 1e-3,
            adam: AdamParams::default(),
            seed: 1234,
            loss: LossParams::default(),
            calib_anchors: 3,
            eval_interval: 500,
            eval_subjects: 2,
            eval_anchors: 9,
            average_tail: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("pairs_per_epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam hyper-parameters out of range".into()));
        }
        if self.average_tail == 0 {
            return Err(Error::Config("average_tail must be at least 1".into()));
        }
        if self.calib_anchors == 0 {
            return Err(Error::Config("calib_anchors must be positive".into()));
        }
        if self.model == ModelKind::Baseline && self.sampling == Sampling::Calibration {
            return Err(Error::Config("calibration sampling applies to the siamese model only".into()));
        }
        self.loss.validate()
    }
}

/// One training-log line. The entry for the final step evaluates the
/// averaged parameters that are returned; earlier entries evaluate the
/// current iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss over the steps since the previous entry.
    pub loss: f64,
    pub eval_p50: Option<f64>,
    pub eval_p95: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<LogEntry>,
}

/// Writes the log as one JSON object per line.
pub fn write_log(log: &[LogEntry], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut out, entry)
            .map_err(|e| Error::Invariant(format!("log serialization: {e}")))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Produces the example stream one epoch at a time.
enum Epochs<'a> {
    Absolute {
        frames: Vec<&'a BinocularSample>,
    },
    Pairs {
        subjects: Vec<(&'a [BinocularSample], Vec<&'a BinocularSample>)>,
        sampling: Sampling,
        per_epoch: usize,
    },
}

impl<'a> Epochs<'a> {
    fn epoch(&self, seed: u64, index: u64) -> Result<Vec<Example<'a>>> {
        let mut examples = match self {
            Epochs::Absolute { frames } => frames
                .iter()
                .map(|s| Example::Absolute {
                    sample: s,
                    target: s.label,
                })
                .collect::<Vec<_>>(),
            Epochs::Pairs {
                subjects,
                sampling,
                per_epoch,
            } => {
                let n_subjects = subjects.len();
                let mut examples = Vec::with_capacity(*per_epoch);
                for (i, (frames, anchors)) in subjects.iter().enumerate() {
                    let n = per_epoch / n_subjects + usize::from(i < per_epoch % n_subjects);
                    let mut rng = keyed(seed, Stream::Pairs, &[index, i as u64]);
                    let pairs = match sampling {
                        Sampling::Random => sample_random_pairs(frames, n, &mut rng)?,
                        Sampling::Calibration => sample_calibration_pairs(frames, anchors, n, &mut rng)?,
                    };
                    examples.extend(pairs.iter().map(PairSample::example));
                }
                examples
            }
        };
        examples.shuffle(&mut keyed(seed, Stream::Batches, &[index]));
        Ok(examples)
    }
}

/// Trains one model on the training subjects of `split`. Held-out logging
/// uses the first `eval_subjects` test subjects.
pub fn train(config: &TrainConfig, dataset: &Dataset, split: &Split) -> Result<TrainOutcome> {
    train_with_progress(config, dataset, split, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    mut progress: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.modality != config.modality {
        return Err(Error::Config(format!(
            "dataset loaded as {} but the config asks for {}",
            dataset.modality.name(),
            config.modality.name()
        )));
    }
    if split.train.iter().any(|id| split.test.contains(id)) {
        return Err(Error::Data("train and test subjects overlap".into()));
    }
    if split.train.is_empty() {
        return Err(Error::Data("no training subjects".into()));
    }
    let train_subjects = split
        .train
        .iter()
        .map(|&id| dataset.require(id))
        .collect::<Result<Vec<_>>>()?;

    let epochs = match config.model {
        ModelKind::Baseline => Epochs::Absolute {
            frames: train_subjects.iter().flat_map(|s| s.main.iter()).collect(),
        },
        ModelKind::Siamese => {
            let mut subjects = Vec::with_capacity(train_subjects.len());
            for s in &train_subjects {
                let anchors = match config.sampling {
                    Sampling::Random => Vec::new(),
                    Sampling::Calibration => {
                        if s.calib.len() < config.calib_anchors {
                            return Err(Error::Config(format!(
                                "calibration sampling needs {} calib frames, subject {} has {}",
                                config.calib_anchors,
                                s.subject_id,
                                s.calib.len()
                            )));
                        }
                        let mut rng = keyed(config.seed, Stream::Anchors, &[s.subject_id as u64]);
                        rand::seq::index::sample(&mut rng, s.calib.len(), config.calib_anchors)
                            .into_iter()
                            .map(|i| &s.calib[i])
                            .collect()
                    }
                };
                subjects.push((s.main.as_slice(), anchors));
            }
            let frames_per_subject = train_subjects.iter().map(|s| s.main.len()).max().unwrap_or(0);
            Epochs::Pairs {
                subjects,
                sampling: config.sampling,
                per_epoch: config.pairs_per_epoch.unwrap_or(20 * frames_per_subject),
            }
        }
    };

    let eval_ids: Vec<u32> = split.test.iter().take(config.eval_subjects).copied().collect();
    let eval_options = EvalOptions {
        model: config.model,
        anchors: (config.model == ModelKind::Siamese).then_some(config.eval_anchors),
        linear_calib: false,
        modality: config.modality,
        seed: config.seed,
    };

    let mut params = init_params(config.seed, config.model, config.modality, dataset.image_size)?;
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::new();
    let mut epoch_index = 0u64;
    let mut examples = epochs.epoch(config.seed, epoch_index)?;
    let mut cursor = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let tail_start = config.steps - config.average_tail.min(config.steps);
    let mut tail_sum = ParamSet::zeros(*params.arch());
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == examples.len() {
                epoch_index += 1;
                examples = epochs.epoch(config.seed, epoch_index)?;
                cursor = 0;
                if examples.is_empty() {
                    return Err(Error::Data("training epoch is empty".into()));
                }
            }
            batch.push(examples[cursor]);
            cursor += 1;
        }
        let (loss, grad) = backward(&params, &batch, &config.loss)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Invariant(format!("non-finite loss or gradient at step {step}")));
        }
        adam_step(params.as_mut_slice(), grad.as_slice(), &mut adam, config.learning_rate, &config.adam)?;
        loss_sum += loss;
        loss_count += 1;
        if step > tail_start {
            tail_sum.add_assign(&params);
        }
        let is_last = step == config.steps;
        if is_last {
            tail_sum.scale(1.0 / (config.steps - tail_start) as f64);
            params = tail_sum.clone();
        }

        let at_interval = config.eval_interval > 0 && step % config.eval_interval == 0;
        if step == 1 || at_interval || is_last {
            let (eval_p50, eval_p95) = if config.eval_interval > 0 && !eval_ids.is_empty() {
                let report = evaluate(&params, dataset, &eval_ids, &eval_options)?;
                (Some(report.p50), Some(report.p95))
            } else {
                (None, None)
            };
            let entry = LogEntry {
                step,
                loss: loss_sum / loss_count as f64,
                eval_p50,
                eval_p95,
            };
            progress(&entry);
            log.push(entry);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    if !params.all_finite() {
        return Err(Error::Invariant("training produced non-finite parameters".into()));
    }
    Ok(TrainOutcome { params, log })
}
