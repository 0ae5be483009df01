//! Binocular convolutional encoder with an absolute (baseline) head and a
//! differential (Siamese) head, plus hand-derived reverse-mode gradients.
//!
//! Per eye: three 3×3 stride-2 convolutions (D→8→16→32) with ReLU, global
//! average pooling, and a 32→32 dense projection. The two eye features are
//! concatenated into a 64-wide binocular feature.
//!
//! * Baseline head: 64 → 64 (ReLU) → 4, absolute gaze.
//! * Siamese head: concat(query 64, reference 64) → 64 (ReLU) → 4, the
//!   displacement `g_query − g_reference`. Both branches run the same
//!   encoder parameters; there is only one copy of them.

mod checkpoint;
mod layers;

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{BinocularSample, GazeVector};
use crate::polarization::{Modality, Tensor3};
use crate::rng::{self, Stream};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use layers::{conv_out, conv_relu_backward, conv_relu_forward, dense_backward, dense_forward, TAPS};

pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
pub const EYE_FEATURES: usize = 32;
pub const BINOCULAR_FEATURES: usize = 2 * EYE_FEATURES;
pub const HEAD_HIDDEN: usize = 64;
pub const GAZE_DIM: usize = 4;
pub const SUPPORTED_IMAGE_SIZES: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Siamese,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Siamese => "siamese",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "siamese" => Ok(ModelKind::Siamese),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Everything that determines parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub modality: Modality,
    pub image_size: usize,
}

impl Architecture {
    pub fn new(kind: ModelKind, modality: Modality, image_size: usize) -> Result<Self> {
        if !SUPPORTED_IMAGE_SIZES.contains(&image_size) {
            return Err(Error::Parameter(format!(
                "unsupported image size {image_size}; expected one of {SUPPORTED_IMAGE_SIZES:?}"
            )));
        }
        Ok(Architecture {
            kind,
            modality,
            image_size,
        })
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    fn head_inputs(&self) -> usize {
        match self.kind {
            ModelKind::Baseline => BINOCULAR_FEATURES,
            ModelKind::Siamese => 2 * BINOCULAR_FEATURES,
        }
    }

    /// Shape of every parameter tensor, in storage order.
    pub fn shapes(&self) -> [(Slot, Vec<usize>); 12] {
        let [c1, c2, c3] = CONV_CHANNELS;
        let d = self.channels();
        [
            (Slot::Conv1Weight, vec![c1, d, 3, 3]),
            (Slot::Conv1Bias, vec![c1]),
            (Slot::Conv2Weight, vec![c2, c1, 3, 3]),
            (Slot::Conv2Bias, vec![c2]),
            (Slot::Conv3Weight, vec![c3, c2, 3, 3]),
            (Slot::Conv3Bias, vec![c3]),
            (Slot::FeatureWeight, vec![EYE_FEATURES, c3]),
            (Slot::FeatureBias, vec![EYE_FEATURES]),
            (Slot::Head1Weight, vec![HEAD_HIDDEN, self.head_inputs()]),
            (Slot::Head1Bias, vec![HEAD_HIDDEN]),
            (Slot::Head2Weight, vec![GAZE_DIM, HEAD_HIDDEN]),
            (Slot::Head2Bias, vec![GAZE_DIM]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn ranges(&self) -> [Range<usize>; 12] {
        let shapes = self.shapes();
        let mut start = 0;
        std::array::from_fn(|i| {
            let len: usize = shapes[i].1.iter().product();
            let r = start..start + len;
            start += len;
            r
        })
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Conv1Weight,
    Conv1Bias,
    Conv2Weight,
    Conv2Bias,
    Conv3Weight,
    Conv3Bias,
    FeatureWeight,
    FeatureBias,
    Head1Weight,
    Head1Bias,
    Head2Weight,
    Head2Bias,
}

impl Slot {
    pub const ALL: [Slot; 12] = [
        Slot::Conv1Weight,
        Slot::Conv1Bias,
        Slot::Conv2Weight,
        Slot::Conv2Bias,
        Slot::Conv3Weight,
        Slot::Conv3Bias,
        Slot::FeatureWeight,
        Slot::FeatureBias,
        Slot::Head1Weight,
        Slot::Head1Bias,
        Slot::Head2Weight,
        Slot::Head2Bias,
    ];

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Slot::Conv1Bias
                | Slot::Conv2Bias
                | Slot::Conv3Bias
                | Slot::FeatureBias
                | Slot::Head1Bias
                | Slot::Head2Bias
        )
    }

    /// True for the shared per-eye encoder, false for head parameters.
    pub fn is_encoder(self) -> bool {
        !matches!(
            self,
            Slot::Head1Weight | Slot::Head1Bias | Slot::Head2Weight | Slot::Head2Bias
        )
    }

    fn fan_in(self, arch: &Architecture) -> usize {
        let [c1, c2, c3] = CONV_CHANNELS;
        match self {
            Slot::Conv1Weight => arch.channels() * TAPS,
            Slot::Conv2Weight => c1 * TAPS,
            Slot::Conv3Weight => c2 * TAPS,
            Slot::FeatureWeight => c3,
            Slot::Head1Weight => arch.head_inputs(),
            Slot::Head2Weight => HEAD_HIDDEN,
            _ => 1,
        }
    }
}

/// All learned values of one model as a single flat vector; gradients and
/// optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    arch: Architecture,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(arch: Architecture) -> Self {
        ParamSet {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        Ok(ParamSet { arch, values })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn range(&self, slot: Slot) -> Range<usize> {
        self.arch.ranges()[slot as usize].clone()
    }

    pub fn slot(&self, slot: Slot) -> &[f64] {
        &self.values[self.range(slot)]
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut [f64] {
        let r = self.range(slot);
        &mut self.values[r]
    }

    /// Slot owning flat index `index`.
    pub fn slot_of(&self, index: usize) -> Slot {
        let ranges = self.arch.ranges();
        Slot::ALL[ranges
            .iter()
            .position(|r| r.contains(&index))
            .expect("index inside parameter vector")]
    }

    pub(crate) fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// He-uniform fan-in initialization with zero biases. Each slot draws from
/// its own keyed stream, so slots whose shapes agree across channel counts
/// also agree in value.
pub fn init_params(seed: u64, kind: ModelKind, modality: Modality, image_size: usize) -> Result<ParamSet> {
    let arch = Architecture::new(kind, modality, image_size)?;
    let mut params = ParamSet::zeros(arch);
    for (i, slot) in Slot::ALL.into_iter().enumerate() {
        if slot.is_bias() {
            continue;
        }
        let bound = (6.0 / slot.fan_in(&arch) as f64).sqrt();
        let mut rng = rng::keyed(seed, Stream::Init, &[i as u64]);
        for w in params.slot_mut(slot) {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Intermediate values of one eye pass needed by the backward pass.
struct EyeTrace {
    col1: Vec<f64>,
    act1: Vec<f64>,
    col2: Vec<f64>,
    act2: Vec<f64>,
    col3: Vec<f64>,
    act3: Vec<f64>,
    pooled: Vec<f64>,
    feature: Vec<f64>,
}

fn check_input(params: &ParamSet, x: &Tensor3) -> Result<()> {
    let a = params.arch();
    let expected = (a.channels(), a.image_size, a.image_size);
    if x.shape() != expected {
        return Err(Error::Dimension(format!(
            "input tensor {:?} does not match architecture {:?}",
            x.shape(),
            expected
        )));
    }
    Ok(())
}

fn eye_forward(params: &ParamSet, x: &Tensor3) -> EyeTrace {
    let [c1, c2, c3] = CONV_CHANNELS;
    let s0 = params.arch.image_size;
    let (s1, s2) = (conv_out(s0), conv_out(conv_out(s0)));
    let (col1, act1) = conv_relu_forward(
        x.as_slice(),
        params.arch.channels(),
        s0,
        params.slot(Slot::Conv1Weight),
        params.slot(Slot::Conv1Bias),
    );
    let (col2, act2) = conv_relu_forward(
        &act1,
        c1,
        s1,
        params.slot(Slot::Conv2Weight),
        params.slot(Slot::Conv2Bias),
    );
    let (col3, act3) = conv_relu_forward(
        &act2,
        c2,
        s2,
        params.slot(Slot::Conv3Weight),
        params.slot(Slot::Conv3Bias),
    );
    let positions = act3.len() / c3;
    let pooled: Vec<f64> = act3
        .chunks(positions)
        .map(|row| row.iter().sum::<f64>() / positions as f64)
        .collect();
    let feature = dense_forward(
        params.slot(Slot::FeatureWeight),
        params.slot(Slot::FeatureBias),
        &pooled,
    );
    EyeTrace {
        col1,
        act1,
        col2,
        act2,
        col3,
        act3,
        pooled,
        feature,
    }
}

fn eye_backward(params: &ParamSet, trace: &EyeTrace, d_feature: &[f64], grad: &mut ParamSet) {
    let [c1, c2, c3] = CONV_CHANNELS;
    let s0 = params.arch.image_size;
    let (s1, s2) = (conv_out(s0), conv_out(conv_out(s0)));

    let fr = params.range(Slot::FeatureWeight);
    let br = params.range(Slot::FeatureBias);
    let (gw, gb) = split_two(&mut grad.values, fr, br);
    let d_pooled = dense_backward(
        params.slot(Slot::FeatureWeight),
        &trace.pooled,
        d_feature,
        gw,
        gb,
    );

    let positions = trace.act3.len() / c3;
    let mut d_act3: Vec<f64> = d_pooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / positions as f64, positions))
        .collect();
    let (gw, gb) = split_two(
        &mut grad.values,
        params.range(Slot::Conv3Weight),
        params.range(Slot::Conv3Bias),
    );
    let mut d_act2 = conv_relu_backward(
        &mut d_act3,
        &trace.act3,
        &trace.col3,
        c2,
        s2,
        params.slot(Slot::Conv3Weight),
        gw,
        gb,
        true,
    )
    .expect("input gradient requested");

    let (gw, gb) = split_two(
        &mut grad.values,
        params.range(Slot::Conv2Weight),
        params.range(Slot::Conv2Bias),
    );
    let mut d_act1 = conv_relu_backward(
        &mut d_act2,
        &trace.act2,
        &trace.col2,
        c1,
        s1,
        params.slot(Slot::Conv2Weight),
        gw,
        gb,
        true,
    )
    .expect("input gradient requested");

    let (gw, gb) = split_two(
        &mut grad.values,
        params.range(Slot::Conv1Weight),
        params.range(Slot::Conv1Bias),
    );
    conv_relu_backward(
        &mut d_act1,
        &trace.act1,
        &trace.col1,
        params.arch.channels(),
        s0,
        params.slot(Slot::Conv1Weight),
        gw,
        gb,
        false,
    );
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two(values: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (head, tail) = values.split_at_mut(b.start);
    (&mut head[a], &mut tail[..b.end - b.start])
}

struct BinocularTrace {
    left: EyeTrace,
    right: EyeTrace,
}

impl BinocularTrace {
    fn feature(&self) -> Vec<f64> {
        let mut f = self.left.feature.clone();
        f.extend_from_slice(&self.right.feature);
        f
    }
}

fn binocular_forward(params: &ParamSet, left: &Tensor3, right: &Tensor3) -> Result<BinocularTrace> {
    check_input(params, left)?;
    check_input(params, right)?;
    Ok(BinocularTrace {
        left: eye_forward(params, left),
        right: eye_forward(params, right),
    })
}

fn binocular_backward(params: &ParamSet, trace: &BinocularTrace, d_feature: &[f64], grad: &mut ParamSet) {
    eye_backward(params, &trace.left, &d_feature[..EYE_FEATURES], grad);
    eye_backward(params, &trace.right, &d_feature[EYE_FEATURES..], grad);
}

/// Binocular feature: the per-eye encoder applied to each eye, concatenated
/// as `(left, right)`.
pub fn encode(params: &ParamSet, left: &Tensor3, right: &Tensor3) -> Result<[f64; BINOCULAR_FEATURES]> {
    let trace = binocular_forward(params, left, right)?;
    let mut out = [0.0; BINOCULAR_FEATURES];
    out[..EYE_FEATURES].copy_from_slice(&trace.left.feature);
    out[EYE_FEATURES..].copy_from_slice(&trace.right.feature);
    Ok(out)
}

struct HeadTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: GazeVector,
}

fn head_forward(params: &ParamSet, input: Vec<f64>) -> HeadTrace {
    let mut hidden = dense_forward(
        params.slot(Slot::Head1Weight),
        params.slot(Slot::Head1Bias),
        &input,
    );
    for h in &mut hidden {
        *h = h.max(0.0);
    }
    let out = dense_forward(
        params.slot(Slot::Head2Weight),
        params.slot(Slot::Head2Bias),
        &hidden,
    );
    HeadTrace {
        input,
        hidden,
        output: GazeVector([out[0], out[1], out[2], out[3]]),
    }
}

fn head_backward(params: &ParamSet, trace: &HeadTrace, d_out: &GazeVector, grad: &mut ParamSet) -> Vec<f64> {
    let (gw, gb) = split_two(
        &mut grad.values,
        params.range(Slot::Head2Weight),
        params.range(Slot::Head2Bias),
    );
    let mut d_hidden = dense_backward(params.slot(Slot::Head2Weight), &trace.hidden, &d_out.0, gw, gb);
    for (d, &h) in d_hidden.iter_mut().zip(&trace.hidden) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    let (gw, gb) = split_two(
        &mut grad.values,
        params.range(Slot::Head1Weight),
        params.range(Slot::Head1Bias),
    );
    dense_backward(params.slot(Slot::Head1Weight), &trace.input, &d_hidden, gw, gb)
}

/// Fails with a configuration error unless `params` belong to `kind`.
pub fn expect_kind(params: &ParamSet, kind: ModelKind) -> Result<()> {
    if params.arch.kind != kind {
        return Err(Error::Config(format!(
            "operation needs a {} model, parameters are {}",
            kind.name(),
            params.arch.kind.name()
        )));
    }
    Ok(())
}

/// Baseline head on a precomputed binocular feature.
pub fn baseline_head(params: &ParamSet, feature: &[f64; BINOCULAR_FEATURES]) -> GazeVector {
    head_forward(params, feature.to_vec()).output
}

/// Siamese head on precomputed query and reference features.
pub fn siamese_head(
    params: &ParamSet,
    query: &[f64; BINOCULAR_FEATURES],
    reference: &[f64; BINOCULAR_FEATURES],
) -> GazeVector {
    let mut input = query.to_vec();
    input.extend_from_slice(reference);
    head_forward(params, input).output
}

/// Absolute gaze for one binocular sample.
pub fn forward_baseline(params: &ParamSet, sample: &BinocularSample) -> Result<GazeVector> {
    expect_kind(params, ModelKind::Baseline)?;
    let feature = encode(params, &sample.left, &sample.right)?;
    Ok(baseline_head(params, &feature))
}

/// Predicted displacement `g_query − g_reference`.
pub fn forward_siamese(
    params: &ParamSet,
    query: &BinocularSample,
    reference: &BinocularSample,
) -> Result<GazeVector> {
    expect_kind(params, ModelKind::Siamese)?;
    let fq = encode(params, &query.left, &query.right)?;
    let fr = encode(params, &reference.left, &reference.right)?;
    Ok(siamese_head(params, &fq, &fr))
}

/// One training example for either graph.
#[derive(Debug, Clone, Copy)]
pub enum Example<'a> {
    Absolute {
        sample: &'a BinocularSample,
        target: GazeVector,
    },
    Pair {
        query: &'a BinocularSample,
        reference: &'a BinocularSample,
        target: GazeVector,
    },
}

impl Example<'_> {
    pub fn target(&self) -> GazeVector {
        match self {
            Example::Absolute { target, .. } | Example::Pair { target, .. } => *target,
        }
    }
}

/// Loss and loss gradient w.r.t. the 4-vector model output, given
/// `(prediction, target)`.
pub trait OutputLoss: Sync {
    fn eval(&self, prediction: &GazeVector, target: &GazeVector) -> (f64, GazeVector);
}

impl<F> OutputLoss for F
where
    F: Fn(&GazeVector, &GazeVector) -> (f64, GazeVector) + Sync,
{
    fn eval(&self, prediction: &GazeVector, target: &GazeVector) -> (f64, GazeVector) {
        self(prediction, target)
    }
}

/// Forward + backward for one example. Gradients are accumulated into `grad`;
/// returns `(loss, prediction)`.
pub fn example_gradient(
    params: &ParamSet,
    example: &Example<'_>,
    loss: &dyn OutputLoss,
    grad: &mut ParamSet,
) -> Result<(f64, GazeVector)> {
    match example {
        Example::Absolute { sample, target } => {
            expect_kind(params, ModelKind::Baseline)?;
            let trace = binocular_forward(params, &sample.left, &sample.right)?;
            let head = head_forward(params, trace.feature());
            let (value, d_out) = loss.eval(&head.output, target);
            let d_feature = head_backward(params, &head, &d_out, grad);
            binocular_backward(params, &trace, &d_feature, grad);
            Ok((value, head.output))
        }
        Example::Pair {
            query,
            reference,
            target,
        } => {
            expect_kind(params, ModelKind::Siamese)?;
            let tq = binocular_forward(params, &query.left, &query.right)?;
            let tr = binocular_forward(params, &reference.left, &reference.right)?;
            let mut input = tq.feature();
            input.extend(tr.feature());
            let head = head_forward(params, input);
            let (value, d_out) = loss.eval(&head.output, target);
            let d_input = head_backward(params, &head, &d_out, grad);
            // Both branches write into the same encoder gradient.
            binocular_backward(params, &tq, &d_input[..BINOCULAR_FEATURES], grad);
            binocular_backward(params, &tr, &d_input[BINOCULAR_FEATURES..], grad);
            Ok((value, head.output))
        }
    }
}

/// Mean loss and mean gradient over a batch.
///
/// Per-example gradients may be computed in parallel on the current rayon
/// pool; they are always summed in batch order, so the result is bit-identical
/// for any thread count.
pub fn backward(params: &ParamSet, batch: &[Example<'_>], loss: &dyn OutputLoss) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let per_example: Vec<(f64, ParamSet)> = batch
        .par_iter()
        .map(|example| {
            let mut grad = ParamSet::zeros(params.arch);
            let (value, _) = example_gradient(params, example, loss, &mut grad)?;
            Ok((value, grad))
        })
        .collect::<Result<_>>()?;
    let mut total = ParamSet::zeros(params.arch);
    let mut loss_sum = 0.0;
    for (value, grad) in &per_example {
        loss_sum += value;
        total.add_assign(grad);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss_sum * inv, total))
}

/// Loss of the composed graph without gradients (used by finite-difference
/// checks).
pub fn example_loss(params: &ParamSet, example: &Example<'_>, loss: &dyn OutputLoss) -> Result<f64> {
    let prediction = match example {
        Example::Absolute { sample, .. } => forward_baseline(params, sample)?,
        Example::Pair {
            query, reference, ..
        } => forward_siamese(params, query, reference)?,
    };
    Ok(loss.eval(&prediction, &example.target()).0)
}

/// Signs of every ReLU pre-activation in the graph (`true` = active), in a
/// fixed traversal order. Two parameter vectors with identical patterns lie
/// in the same linear region, which lets gradient checks avoid kinks.
pub fn activation_pattern(params: &ParamSet, example: &Example<'_>) -> Result<Vec<bool>> {
    let mut pattern = Vec::new();
    let push_eye = |t: &EyeTrace, pattern: &mut Vec<bool>| {
        for a in [&t.act1, &t.act2, &t.act3] {
            pattern.extend(a.iter().map(|&v| v > 0.0));
        }
    };
    let head_input = match example {
        Example::Absolute { sample, .. } => {
            let t = binocular_forward(params, &sample.left, &sample.right)?;
            push_eye(&t.left, &mut pattern);
            push_eye(&t.right, &mut pattern);
            t.feature()
        }
        Example::Pair {
            query, reference, ..
        } => {
            let tq = binocular_forward(params, &query.left, &query.right)?;
            let tr = binocular_forward(params, &reference.left, &reference.right)?;
            for t in [&tq.left, &tq.right, &tr.left, &tr.right] {
                push_eye(t, &mut pattern);
            }
            let mut f = tq.feature();
            f.extend(tr.feature());
            f
        }
    };
    let head = head_forward(params, head_input);
    pattern.extend(head.hidden.iter().map(|&v| v > 0.0));
    Ok(pattern)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::Session;

    fn sample(params: &ParamSet, seed: u64) -> BinocularSample {
        let a = params.arch();
        let mut rng = rng::keyed(seed, Stream::Probe, &[]);
        let n = a.channels() * a.image_size * a.image_size;
        let mut t = || Tensor3::new(a.channels(), a.image_size, a.image_size, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        BinocularSample {
            subject_id: 0,
            session: Session::Main,
            frame_index: seed as u32,
            left: t(),
            right: t(),
            label: GazeVector::ZERO,
        }
    }

    fn zero_sample(channels: usize) -> BinocularSample {
        BinocularSample {
            subject_id: 0,
            session: Session::Main,
            frame_index: 0,
            left: Tensor3::zeros(channels, 32, 32),
            right: Tensor3::zeros(channels, 32, 32),
            label: GazeVector::ZERO,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(3, ModelKind::Siamese, Modality::Polarization, 32).unwrap();
        let b = init_params(3, ModelKind::Siamese, Modality::Polarization, 32).unwrap();
        assert_eq!(a, b);
        for slot in Slot::ALL.into_iter().filter(|s| s.is_bias()) {
            assert!(a.slot(slot).iter().all(|&v| v == 0.0));
        }
        let c = init_params(4, ModelKind::Siamese, Modality::Polarization, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn channel_count_only_changes_first_conv() {
        let d3 = init_params(5, ModelKind::Baseline, Modality::Intensity3, 32).unwrap();
        let d1 = init_params(5, ModelKind::Baseline, Modality::Intensity1, 32).unwrap();
        let s3 = d3.arch().shapes();
        let s1 = d1.arch().shapes();
        assert_eq!(s3[0].1, vec![8, 3, 3, 3]);
        assert_eq!(s1[0].1, vec![8, 1, 3, 3]);
        for i in 1..12 {
            assert_eq!(s3[i].1, s1[i].1);
            assert_eq!(d3.slot(s3[i].0), d1.slot(s1[i].0));
        }
    }

    #[test]
    fn unsupported_sizes_are_rejected() {
        assert!(matches!(
            init_params(0, ModelKind::Baseline, Modality::Polarization, 48),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn zero_input_gives_zero_feature() {
        let p = init_params(1, ModelKind::Baseline, Modality::Polarization, 32).unwrap();
        let s = zero_sample(3);
        let f = encode(&p, &s.left, &s.right).unwrap();
        assert_eq!(f.len(), 64);
        assert!(f.iter().all(|&v| v == 0.0));

        let p = init_params(1, ModelKind::Siamese, Modality::Polarization, 32).unwrap();
        assert_eq!(forward_siamese(&p, &s, &s).unwrap(), GazeVector::ZERO);
    }

    #[test]
    fn swapping_eyes_swaps_feature_blocks() {
        let p = init_params(2, ModelKind::Baseline, Modality::Polarization, 32).unwrap();
        let s = sample(&p, 11);
        let f = encode(&p, &s.left, &s.right).unwrap();
        let g = encode(&p, &s.right, &s.left).unwrap();
        assert_eq!(f[..32], g[32..]);
        assert_eq!(f[32..], g[..32]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let p = init_params(2, ModelKind::Baseline, Modality::Intensity1, 32).unwrap();
        let s = zero_sample(3);
        assert!(matches!(forward_baseline(&p, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn wrong_head_is_a_config_error() {
        let p = init_params(2, ModelKind::Baseline, Modality::Polarization, 32).unwrap();
        let s = zero_sample(3);
        assert!(matches!(forward_siamese(&p, &s, &s), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_output_is_deterministic_and_finite() {
        let p = init_params(8, ModelKind::Baseline, Modality::Polarization, 32).unwrap();
        let s = sample(&p, 1);
        let a = forward_baseline(&p, &s).unwrap();
        assert_eq!(a, forward_baseline(&p, &s).unwrap());
        assert!(a.is_finite());
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let p = init_params(8, ModelKind::Siamese, Modality::Polarization, 32).unwrap();
        let (q, r) = (sample(&p, 1), sample(&p, 2));
        let zero = |_: &GazeVector, _: &GazeVector| (0.0, GazeVector::ZERO);
        let batch = [Example::Pair { query: &q, reference: &r, target: GazeVector::ZERO }];
        let (loss, grad) = backward(&p, &batch, &zero).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_gradient_is_thread_count_invariant() {
        let p = init_params(8, ModelKind::Baseline, Modality::Intensity1, 32).unwrap();
        let samples: Vec<_> = (0..6).map(|i| sample(&p, i)).collect();
        let batch: Vec<_> = samples
            .iter()
            .map(|s| Example::Absolute { sample: s, target: GazeVector::splat(1.0) })
            .collect();
        let sq = |p: &GazeVector, t: &GazeVector| {
            let e = *p - *t;
            (0.5 * e.0.iter().map(|v| v * v).sum::<f64>(), e)
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| backward(&p, &batch, &sq).unwrap())
        };
        let (l1, g1) = run(1);
        let (l3, g3) = run(3);
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
    }
}
