//! Angular error, percentile statistics, per-variant evaluation and run
//! comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::gaze::GazeVector;
use crate::net::{ModelKind, ParamSet};
use crate::personalize::{
    fit_linear_calib, predict_prepared, prepare_anchors, select_anchors, AbsoluteModel, Baseline,
    DifferentialModel, LinearCalib, Siamese,
};
use crate::polarization::Modality;

/// Unit gaze direction for `(yaw, pitch)` in degrees.
pub fn gaze_to_unit(yaw: f64, pitch: f64) -> [f64; 3] {
    let (t, p) = (yaw.to_radians(), pitch.to_radians());
    [p.cos() * t.sin(), p.sin(), p.cos() * t.cos()]
}

fn eye_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let u = gaze_to_unit(a.0, a.1);
    let v = gaze_to_unit(b.0, b.1);
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    // Same angle as acos(dot) but well conditioned near 0 and 180 degrees.
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot.clamp(-1.0, 1.0)).to_degrees()
}

/// Mean of the left-eye and right-eye angular errors, in degrees.
pub fn angular_error(pred: &GazeVector, gt: &GazeVector) -> f64 {
    0.5 * (eye_angle(pred.left(), gt.left()) + eye_angle(pred.right(), gt.right()))
}

/// Linear interpolation between closest ranks, `h = (n − 1)·p/100`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Parameter("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Parameter(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Parameter("percentile input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub n: usize,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Result<Percentiles> {
        Ok(Percentiles {
            p50: percentile(values, 50.0)?,
            p75: percentile(values, 75.0)?,
            p95: percentile(values, 95.0)?,
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub model: ModelKind,
    /// Anchor count for Siamese inference; must be `None` for the Baseline.
    pub anchors: Option<usize>,
    pub linear_calib: bool,
    pub modality: Modality,
    /// Anchor selection seed.
    pub seed: u64,
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        match (self.model, self.anchors) {
            (ModelKind::Siamese, None) => Err(Error::Config("siamese evaluation needs an anchor count".into())),
            (ModelKind::Siamese, Some(0)) => Err(Error::Parameter("anchor count must be at least 1".into())),
            (ModelKind::Baseline, Some(_)) => Err(Error::Config("anchors apply to siamese models only".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub subject_id: u32,
    pub frame_index: u32,
    pub label: GazeVector,
    pub prediction: GazeVector,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: u32,
    #[serde(flatten)]
    pub stats: Percentiles,
    pub calib: Option<LinearCalib>,
    pub anchor_frames: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReport {
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub n: usize,
    pub per_subject: Vec<SubjectReport>,
    /// Every pooled sample, for subset analyses; not written to report files.
    #[serde(skip)]
    pub samples: Vec<SampleError>,
}

impl PercentileReport {
    pub fn stats(&self) -> Percentiles {
        Percentiles {
            p50: self.p50,
            p75: self.p75,
            p95: self.p95,
            n: self.n,
        }
    }

    /// Percentiles over the samples accepted by `keep`.
    pub fn subset(&self, keep: impl Fn(&SampleError) -> bool) -> Result<Percentiles> {
        let values: Vec<f64> = self.samples.iter().filter(|s| keep(s)).map(|s| s.error).collect();
        Percentiles::of(&values)
    }
}

/// A report file: the options that produced it plus its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_name: String,
    pub options: EvalOptions,
    #[serde(flatten)]
    pub report: PercentileReport,
}

struct SubjectPredictions {
    subject_id: u32,
    main: Vec<(GazeVector, GazeVector, u32)>,
    calib: Option<Vec<(GazeVector, GazeVector)>>,
    anchor_frames: Option<Vec<u32>>,
}

fn finish(mut subjects: Vec<SubjectPredictions>) -> Result<PercentileReport> {
    subjects.sort_by_key(|s| s.subject_id);
    let mut per_subject = Vec::with_capacity(subjects.len());
    let mut samples = Vec::new();
    for s in subjects {
        let calib = match &s.calib {
            Some(pairs) => {
                let (preds, gts): (Vec<GazeVector>, Vec<GazeVector>) = pairs.iter().copied().unzip();
                Some(fit_linear_calib(&preds, &gts)?)
            }
            None => None,
        };
        let errors: Vec<SampleError> = s
            .main
            .iter()
            .map(|&(raw, label, frame_index)| {
                let prediction = calib.map_or(raw, |c| c.apply(&raw));
                SampleError {
                    subject_id: s.subject_id,
                    frame_index,
                    label,
                    prediction,
                    error: angular_error(&prediction, &label),
                }
            })
            .collect();
        let values: Vec<f64> = errors.iter().map(|e| e.error).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite error for subject {}", s.subject_id)));
        }
        per_subject.push(SubjectReport {
            subject_id: s.subject_id,
            stats: Percentiles::of(&values)?,
            calib,
            anchor_frames: s.anchor_frames,
        });
        samples.extend(errors);
    }
    let all: Vec<f64> = samples.iter().map(|s| s.error).collect();
    let stats = Percentiles::of(&all)?;
    Ok(PercentileReport {
        p50: stats.p50,
        p75: stats.p75,
        p95: stats.p95,
        n: stats.n,
        per_subject,
        samples,
    })
}

fn check_subjects(dataset: &Dataset, ids: &[u32], need_calib: bool) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Data("no test subjects".into()));
    }
    for &id in ids {
        let s = dataset.require(id)?;
        if s.main.is_empty() {
            return Err(Error::Data(format!("subject {id} has no main-session frames")));
        }
        if need_calib && s.calib.is_empty() {
            return Err(Error::Data(format!("subject {id} has no calibration session")));
        }
    }
    Ok(())
}

/// Anchor-aggregated inference on every main frame of each subject, with
/// optional linear calibration fitted on the calibration session.
pub fn evaluate_differential<M: DifferentialModel>(
    model: &M,
    dataset: &Dataset,
    ids: &[u32],
    anchors: usize,
    linear_calib: bool,
    seed: u64,
) -> Result<PercentileReport> {
    check_subjects(dataset, ids, true)?;
    let subjects = ids
        .par_iter()
        .map(|&id| {
            let s = dataset.require(id)?;
            let set = select_anchors(&s.calib, anchors, seed)?;
            let prepared = prepare_anchors(model, &set)?;
            let predict = |sample| -> Result<GazeVector> { predict_prepared(model, &model.embed(sample)?, &prepared) };
            let main = s
                .main
                .par_iter()
                .map(|q| Ok((predict(q)?, q.label, q.frame_index)))
                .collect::<Result<Vec<_>>>()?;
            let calib = if linear_calib {
                Some(s.calib.par_iter().map(|q| Ok((predict(q)?, q.label))).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            Ok(SubjectPredictions {
                subject_id: id,
                main,
                calib,
                anchor_frames: Some(set.frame_ids()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(subjects)
}

/// Direct inference on every main frame, with optional linear calibration.
pub fn evaluate_absolute<M: AbsoluteModel>(
    model: &M,
    dataset: &Dataset,
    ids: &[u32],
    linear_calib: bool,
) -> Result<PercentileReport> {
    check_subjects(dataset, ids, linear_calib)?;
    let subjects = ids
        .par_iter()
        .map(|&id| {
            let s = dataset.require(id)?;
            let main = s
                .main
                .par_iter()
                .map(|q| Ok((model.predict(q)?, q.label, q.frame_index)))
                .collect::<Result<Vec<_>>>()?;
            let calib = if linear_calib {
                Some(s.calib.par_iter().map(|q| Ok((model.predict(q)?, q.label))).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            Ok(SubjectPredictions {
                subject_id: id,
                main,
                calib,
                anchor_frames: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(subjects)
}

/// Evaluates trained parameters on the subjects `ids`.
pub fn evaluate(params: &ParamSet, dataset: &Dataset, ids: &[u32], options: &EvalOptions) -> Result<PercentileReport> {
    options.validate()?;
    let arch = params.arch();
    if arch.kind != options.model {
        return Err(Error::Config(format!(
            "checkpoint is a {} model, options ask for {}",
            arch.kind.name(),
            options.model.name()
        )));
    }
    if arch.modality != options.modality || dataset.modality != options.modality {
        return Err(Error::Config(format!(
            "modality mismatch: checkpoint {}, data {}, options {}",
            arch.modality.name(),
            dataset.modality.name(),
            options.modality.name()
        )));
    }
    if arch.image_size != dataset.image_size {
        return Err(Error::Config(format!(
            "checkpoint expects {}px images, data has {}px",
            arch.image_size, dataset.image_size
        )));
    }
    match options.model {
        ModelKind::Siamese => evaluate_differential(
            &Siamese::new(params)?,
            dataset,
            ids,
            options.anchors.unwrap_or_default(),
            options.linear_calib,
            options.seed,
        ),
        ModelKind::Baseline => evaluate_absolute(&Baseline::new(params)?, dataset, ids, options.linear_calib),
    }
}

/// Relative improvement `(a − b)/a`; `None` when `a` is zero.
pub fn improvement(a: f64, b: f64) -> Option<f64> {
    if a == 0.0 {
        None
    } else {
        Some((a - b) / a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    /// Improvement over the first run at P50, P75, P95; `None` when the
    /// reference value is zero.
    pub improvement: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

fn format_improvement(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}%", 100.0 * x),
        None => "n/a".to_string(),
    }
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["run", "P50", "P75", "P95", "ΔP50", "ΔP75", "ΔP95"];
        let mut rows: Vec<[String; 7]> = vec![header.map(String::from)];
        for r in &self.rows {
            rows.push([
                r.name.clone(),
                format!("{:.3}", r.p50),
                format!("{:.3}", r.p75),
                format!("{:.3}", r.p95),
                format_improvement(r.improvement[0]),
                format_improvement(r.improvement[1]),
                format_improvement(r.improvement[2]),
            ]);
        }
        let widths: Vec<usize> = (0..7)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("improvement relative to {}\n", self.reference);
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let pad = widths[c] - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Compares every run against the first one.
pub fn compare_runs(reports: &[(String, Percentiles)]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Parameter("comparison needs at least two reports".into()));
    }
    let base = reports[0].1;
    Ok(Comparison {
        reference: reports[0].0.clone(),
        rows: reports
            .iter()
            .map(|(name, r)| ComparisonRow {
                name: name.clone(),
                p50: r.p50,
                p75: r.p75,
                p95: r.p95,
                improvement: [
                    improvement(base.p50, r.p50),
                    improvement(base.p75, r.p75),
                    improvement(base.p95, r.p95),
                ],
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_vectors() {
        let v = gaze_to_unit(0.0, 0.0);
        assert_eq!(v, [0.0, 0.0, 1.0]);
        let v = gaze_to_unit(90.0, 0.0);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn angular_error_examples() {
        let g = GazeVector::new(3.0, -2.0, 1.0, 7.0);
        assert_eq!(angular_error(&g, &g), 0.0);
        let e = angular_error(&GazeVector::new(1.0, 0.0, 0.0, 0.0), &GazeVector::ZERO);
        assert!((e - 0.5).abs() < 1e-12, "{e}");
        let e = angular_error(&GazeVector::new(0.0, 90.0, 0.0, 0.0), &GazeVector::ZERO);
        assert!((e - 45.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn percentile_examples() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert_eq!(percentile(&v, 75.0).unwrap(), 4.0);
        assert!((percentile(&v, 95.0).unwrap() - 4.8).abs() < 1e-12);
        assert!(matches!(percentile(&[], 50.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement(1.05, 0.91).unwrap() - 0.1333).abs() < 1e-4);
        assert!((improvement(3.15, 2.88).unwrap() - 0.0857).abs() < 1e-4);
        assert_eq!(improvement(2.0, 2.0), Some(0.0));
        assert_eq!(improvement(0.0, 1.0), None);
    }

    #[test]
    fn comparison_table_marks_undefined_improvements() {
        let a = Percentiles { p50: 0.0, p75: 1.0, p95: 3.15, n: 1 };
        let b = Percentiles { p50: 0.5, p75: 1.0, p95: 2.88, n: 1 };
        let c = compare_runs(&[("a".into(), a), ("b".into(), b)]).unwrap();
        let table = c.to_table();
        assert!(table.contains("n/a"));
        assert!(table.contains("8.57%"));
        assert!(table.contains("0.00%"));
        assert!(matches!(compare_runs(&[("a".into(), a)]), Err(Error::Parameter(_))));
    }

    #[test]
    fn options_validation() {
        let base = EvalOptions {
            model: ModelKind::Siamese,
            anchors: Some(9),
            linear_calib: true,
            modality: Modality::Polarization,
            seed: 0,
        };
        assert!(base.validate().is_ok());
        assert!(matches!(EvalOptions { anchors: Some(0), ..base }.validate(), Err(Error::Parameter(_))));
        assert!(matches!(EvalOptions { anchors: None, ..base }.validate(), Err(Error::Config(_))));
        assert!(matches!(
            EvalOptions { model: ModelKind::Baseline, ..base }.validate(),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn unit_vectors_have_unit_norm(yaw in -180.0f64..180.0, pitch in -90.0f64..90.0) {
            let v = gaze_to_unit(yaw, pitch);
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }

        #[test]
        fn angular_error_is_symmetric(a in prop::array::uniform4(-25.0f64..25.0), b in prop::array::uniform4(-25.0f64..25.0)) {
            let (a, b) = (GazeVector(a), GazeVector(b));
            prop_assert_eq!(angular_error(&a, &b), angular_error(&b, &a));
        }

        #[test]
        fn identical_gaze_has_zero_error(a in prop::array::uniform4(-25.0f64..25.0)) {
            prop_assert_eq!(angular_error(&GazeVector(a), &GazeVector(a)), 0.0);
        }

        #[test]
        fn pitch_only_difference_is_exact(p in -40.0f64..40.0, q in -40.0f64..40.0) {
            let e = angular_error(&GazeVector::binocular(0.0, p), &GazeVector::binocular(0.0, q));
            prop_assert!((e - (p - q).abs()).abs() < 1e-9);
        }

        #[test]
        fn agrees_with_arccos_form(a in prop::array::uniform4(-25.0f64..25.0), b in prop::array::uniform4(-25.0f64..25.0)) {
            let angle = |x: (f64, f64), y: (f64, f64)| {
                let u = gaze_to_unit(x.0, x.1);
                let v = gaze_to_unit(y.0, y.1);
                (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0).acos().to_degrees()
            };
            let (a, b) = (GazeVector(a), GazeVector(b));
            let reference = 0.5 * (angle(a.left(), b.left()) + angle(a.right(), b.right()));
            prop_assert!((angular_error(&a, &b) - reference).abs() < 1e-6);
        }

        #[test]
        fn percentiles_are_ordered(values in prop::collection::vec(0.0f64..10.0, 1..60)) {
            let p = Percentiles::of(&values).unwrap();
            prop_assert!(p.p50 <= p.p75 && p.p75 <= p.p95);
        }

        #[test]
        fn odd_median_is_exact(values in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let mut v = values.clone();
            if v.len() % 2 == 0 {
                v.pop();
            }
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(percentile(&v, 50.0).unwrap(), sorted[sorted.len() / 2]);
        }
    }
}
