//! Per-subject personalization: anchor sets, anchor-aggregated inference and
//! the per-axis L1 linear calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{BinocularSample, GazeVector};
use crate::net::{baseline_head, encode, expect_kind, siamese_head, ModelKind, ParamSet, BINOCULAR_FEATURES};
use crate::rng::{keyed, Stream};

/// Labelled reference frames of one subject.
#[derive(Debug, Clone)]
pub struct AnchorSet<'a> {
    pub subject_id: u32,
    pub anchors: Vec<&'a BinocularSample>,
}

impl AnchorSet<'_> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn frame_ids(&self) -> Vec<u32> {
        self.anchors.iter().map(|a| a.frame_index).collect()
    }
}

/// Draws `count` distinct frames from `pool` (one subject's calibration
/// session). The draw is a seeded partial shuffle, so for a fixed seed the
/// set for a smaller count is a prefix of the set for a larger one.
pub fn select_anchors(pool: &[BinocularSample], count: usize, seed: u64) -> Result<AnchorSet<'_>> {
    if count == 0 {
        return Err(Error::Parameter("anchor count must be at least 1".into()));
    }
    if count > pool.len() {
        return Err(Error::Parameter(format!(
            "{count} anchors requested from a pool of {}",
            pool.len()
        )));
    }
    let subject_id = pool[0].subject_id;
    if pool.iter().any(|s| s.subject_id != subject_id) {
        return Err(Error::Data("anchor pool mixes subjects".into()));
    }
    let mut rng = keyed(seed, Stream::Anchors, &[subject_id as u64]);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for i in 0..count {
        let j = rand::Rng::random_range(&mut rng, i..pool.len());
        order.swap(i, j);
    }
    Ok(AnchorSet {
        subject_id,
        anchors: order[..count].iter().map(|&i| &pool[i]).collect(),
    })
}

/// A model of gaze displacement between two frames of the same subject.
///
/// Splitting inference into an embedding and a comparison lets anchor
/// embeddings be computed once per subject.
pub trait DifferentialModel: Sync {
    type Embedding: Send + Sync;

    fn embed(&self, sample: &BinocularSample) -> Result<Self::Embedding>;

    /// Predicted `g_query − g_reference`.
    fn delta(&self, query: &Self::Embedding, reference: &Self::Embedding) -> GazeVector;
}

/// A model of absolute gaze.
pub trait AbsoluteModel: Sync {
    fn predict(&self, sample: &BinocularSample) -> Result<GazeVector>;
}

/// A trained Siamese network.
pub struct Siamese<'p>(&'p ParamSet);

impl<'p> Siamese<'p> {
    pub fn new(params: &'p ParamSet) -> Result<Self> {
        expect_kind(params, ModelKind::Siamese)?;
        Ok(Siamese(params))
    }
}

impl DifferentialModel for Siamese<'_> {
    type Embedding = [f64; BINOCULAR_FEATURES];

    fn embed(&self, sample: &BinocularSample) -> Result<Self::Embedding> {
        encode(self.0, &sample.left, &sample.right)
    }

    fn delta(&self, query: &Self::Embedding, reference: &Self::Embedding) -> GazeVector {
        siamese_head(self.0, query, reference)
    }
}

/// A trained Baseline network.
pub struct Baseline<'p>(&'p ParamSet);

impl<'p> Baseline<'p> {
    pub fn new(params: &'p ParamSet) -> Result<Self> {
        expect_kind(params, ModelKind::Baseline)?;
        Ok(Baseline(params))
    }
}

impl AbsoluteModel for Baseline<'_> {
    fn predict(&self, sample: &BinocularSample) -> Result<GazeVector> {
        Ok(baseline_head(self.0, &encode(self.0, &sample.left, &sample.right)?))
    }
}

/// Returns the true label difference; a perfect differential model.
pub struct OracleDifferential;

impl DifferentialModel for OracleDifferential {
    type Embedding = GazeVector;

    fn embed(&self, sample: &BinocularSample) -> Result<GazeVector> {
        Ok(sample.label)
    }

    fn delta(&self, query: &GazeVector, reference: &GazeVector) -> GazeVector {
        *query - *reference
    }
}

/// Mean of `Δg_c + g_c` over the anchors.
pub fn aggregate(deltas: &[GazeVector], anchor_gaze: &[GazeVector]) -> Result<GazeVector> {
    if deltas.is_empty() {
        return Err(Error::Parameter("no anchors to aggregate".into()));
    }
    if deltas.len() != anchor_gaze.len() {
        return Err(Error::Dimension(format!(
            "{} displacements for {} anchors",
            deltas.len(),
            anchor_gaze.len()
        )));
    }
    let mut sum = GazeVector::ZERO;
    for (d, g) in deltas.iter().zip(anchor_gaze) {
        sum = sum + (*d + *g);
    }
    Ok(sum.scale(1.0 / deltas.len() as f64))
}

/// Anchor embeddings and labels computed once for repeated queries.
pub struct PreparedAnchors<E> {
    pub embeddings: Vec<E>,
    pub gaze: Vec<GazeVector>,
}

pub fn prepare_anchors<M: DifferentialModel>(model: &M, anchors: &AnchorSet<'_>) -> Result<PreparedAnchors<M::Embedding>> {
    if anchors.is_empty() {
        return Err(Error::Parameter("empty anchor set".into()));
    }
    Ok(PreparedAnchors {
        embeddings: anchors.anchors.iter().map(|a| model.embed(a)).collect::<Result<_>>()?,
        gaze: anchors.anchors.iter().map(|a| a.label).collect(),
    })
}

pub fn predict_prepared<M: DifferentialModel>(
    model: &M,
    query: &M::Embedding,
    anchors: &PreparedAnchors<M::Embedding>,
) -> Result<GazeVector> {
    let deltas: Vec<GazeVector> = anchors.embeddings.iter().map(|r| model.delta(query, r)).collect();
    aggregate(&deltas, &anchors.gaze)
}

pub fn predict_with_anchors<M: DifferentialModel>(
    model: &M,
    input: &BinocularSample,
    anchors: &AnchorSet<'_>,
) -> Result<GazeVector> {
    let prepared = prepare_anchors(model, anchors)?;
    predict_prepared(model, &model.embed(input)?, &prepared)
}

/// Per-axis affine correction `theta0 + mu ⊙ g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCalib {
    pub theta0: [f64; 4],
    pub mu: [f64; 4],
}

impl LinearCalib {
    pub const IDENTITY: LinearCalib = LinearCalib {
        theta0: [0.0; 4],
        mu: [1.0; 4],
    };

    pub fn apply(&self, g: &GazeVector) -> GazeVector {
        apply_linear_calib(self, g)
    }
}

pub fn apply_linear_calib(calib: &LinearCalib, g: &GazeVector) -> GazeVector {
    GazeVector(std::array::from_fn(|i| calib.theta0[i] + calib.mu[i] * g.0[i]))
}

fn l1_objective(preds: &[f64], gts: &[f64], theta0: f64, mu: f64) -> f64 {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (g - (theta0 + mu * p)).abs())
        .sum()
}

/// Exact least-absolute-deviation line for one axis: `(theta0, mu, objective)`.
pub fn fit_axis(preds: &[f64], gts: &[f64], axis: usize) -> Result<(f64, f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    if preds.len() < 2 {
        return Err(Error::Fit {
            axis,
            reason: format!("need at least 2 points, got {}", preds.len()),
        });
    }
    if preds.iter().chain(gts).any(|v| !v.is_finite()) {
        return Err(Error::Fit {
            axis,
            reason: "non-finite input".into(),
        });
    }
    if preds.iter().all(|&p| p == preds[0]) {
        return Err(Error::Fit {
            axis,
            reason: "all predictions are equal".into(),
        });
    }
    let mut best = (0.0, 1.0, l1_objective(preds, gts, 0.0, 1.0));
    let mut consider = |theta0: f64, mu: f64| {
        let obj = l1_objective(preds, gts, theta0, mu);
        let better = obj < best.2 || (obj == best.2 && (theta0, mu) < (best.0, best.1));
        if better {
            best = (theta0, mu, obj);
        }
    };
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let dp = preds[j] - preds[i];
            if dp == 0.0 {
                continue;
            }
            let mu = (gts[j] - gts[i]) / dp;
            consider(gts[i] - mu * preds[i], mu);
        }
    }
    Ok(best)
}

/// Fits each axis independently by exhaustive search over lines through two
/// data points, plus the identity line.
pub fn fit_linear_calib(preds: &[GazeVector], gts: &[GazeVector]) -> Result<LinearCalib> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    let mut calib = LinearCalib::IDENTITY;
    for axis in 0..4 {
        let p: Vec<f64> = preds.iter().map(|g| g.0[axis]).collect();
        let t: Vec<f64> = gts.iter().map(|g| g.0[axis]).collect();
        let (theta0, mu, _) = fit_axis(&p, &t, axis)?;
        calib.theta0[axis] = theta0;
        calib.mu[axis] = mu;
    }
    Ok(calib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::Session;
    use crate::polarization::Tensor3;

    fn pool(n: u32) -> Vec<BinocularSample> {
        (0..n)
            .map(|i| BinocularSample {
                subject_id: 4,
                session: Session::Calib,
                frame_index: i,
                left: Tensor3::zeros(1, 2, 2),
                right: Tensor3::zeros(1, 2, 2),
                label: GazeVector::new(i as f64, -(i as f64), 0.5 * i as f64, 1.0),
            })
            .collect()
    }

    #[test]
    fn anchors_are_distinct_and_reproducible() {
        let p = pool(100);
        let a = select_anchors(&p, 9, 3).unwrap();
        let mut ids = a.frame_ids();
        assert_eq!(ids, select_anchors(&p, 9, 3).unwrap().frame_ids());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 9);
        assert!(matches!(select_anchors(&p, 0, 3), Err(Error::Parameter(_))));
        assert!(matches!(select_anchors(&p, 101, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn smaller_anchor_sets_are_prefixes() {
        let p = pool(100);
        let nine = select_anchors(&p, 9, 11).unwrap().frame_ids();
        for c in [1, 3, 5, 7] {
            assert_eq!(select_anchors(&p, c, 11).unwrap().frame_ids(), nine[..c]);
        }
    }

    struct Constant(GazeVector);

    impl DifferentialModel for Constant {
        type Embedding = ();

        fn embed(&self, _: &BinocularSample) -> Result<()> {
            Ok(())
        }

        fn delta(&self, _: &(), _: &()) -> GazeVector {
            self.0
        }
    }

    #[test]
    fn single_anchor_with_zero_delta_returns_its_label() {
        let p = pool(5);
        let anchors = AnchorSet {
            subject_id: 4,
            anchors: vec![&p[3]],
        };
        let g = predict_with_anchors(&Constant(GazeVector::ZERO), &p[0], &anchors).unwrap();
        assert_eq!(g, p[3].label);
    }

    #[test]
    fn hand_evaluated_aggregate() {
        let g = aggregate(
            &[GazeVector::splat(1.0), GazeVector::splat(-1.0)],
            &[GazeVector::splat(2.0), GazeVector::splat(4.0)],
        )
        .unwrap();
        assert_eq!(g, GazeVector::splat(3.0));
        assert!(matches!(aggregate(&[], &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn constant_model_adds_mean_anchor_gaze() {
        let p = pool(20);
        let anchors = select_anchors(&p, 7, 2).unwrap();
        let d = GazeVector::new(0.25, -1.5, 2.0, 0.0);
        let g = predict_with_anchors(&Constant(d), &p[0], &anchors).unwrap();
        let mean = anchors
            .anchors
            .iter()
            .fold(GazeVector::ZERO, |acc, a| acc + a.label)
            .scale(1.0 / 7.0);
        for i in 0..4 {
            assert!((g.0[i] - (d.0[i] + mean.0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_recovers_ground_truth() {
        let p = pool(30);
        for c in [1, 3, 9] {
            let anchors = select_anchors(&p, c, 5).unwrap();
            for q in &p {
                let g = predict_with_anchors(&OracleDifferential, q, &anchors).unwrap();
                for i in 0..4 {
                    assert!((g.0[i] - q.label.0[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_data_fits_identity() {
        let preds: Vec<GazeVector> = (0..10).map(|i| GazeVector::splat(i as f64 * 0.7 - 2.0)).collect();
        let c = fit_linear_calib(&preds, &preds).unwrap();
        assert_eq!(c, LinearCalib::IDENTITY);
    }

    #[test]
    fn planted_affine_is_recovered() {
        let preds: Vec<GazeVector> = (0..12)
            .map(|i| {
                let x = i as f64 * 0.9 - 4.0;
                GazeVector::new(x, 0.5 * x * x, -x, (x * 0.3).sin())
            })
            .collect();
        let theta = [1.0, -0.5, 2.5, 0.1];
        let mu = [2.0, 0.8, 1.1, -1.3];
        let gts: Vec<GazeVector> = preds
            .iter()
            .map(|p| GazeVector(std::array::from_fn(|i| theta[i] + mu[i] * p.0[i])))
            .collect();
        let c = fit_linear_calib(&preds, &gts).unwrap();
        for i in 0..4 {
            assert!((c.theta0[i] - theta[i]).abs() < 1e-9);
            assert!((c.mu[i] - mu[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_axis_names_the_axis() {
        let preds = vec![GazeVector::new(1.0, 2.0, 3.0, 4.0), GazeVector::new(2.0, 2.0, 4.0, 5.0)];
        match fit_linear_calib(&preds, &preds) {
            Err(Error::Fit { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn apply_hand_evaluated() {
        let c = LinearCalib {
            theta0: [1.0, 0.0, 0.0, 0.0],
            mu: [2.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(c.apply(&GazeVector::splat(3.0)), GazeVector::new(7.0, 3.0, 3.0, 3.0));
        let g = GazeVector::new(-1.0, 0.3, 9.0, 2.0);
        assert_eq!(LinearCalib::IDENTITY.apply(&g), g);
    }
}
