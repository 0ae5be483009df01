//! End-to-end experiment: data generation, the six training runs, the
//! evaluation grid and the ordering checks over the results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{gen_dataset, load_dataset, split_subjects, Split};
use crate::eval::{compare_runs, evaluate, improvement, Comparison, EvalOptions, Percentiles, RunReport, SampleError};
use crate::net::{save_checkpoint, ModelKind};
use crate::polarization::Modality;
use crate::synthgen::GenConfig;
use crate::train::{train_with_progress, write_log, Sampling, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproConfig {
    pub data: GenConfig,
    /// Template for every run; model, modality and sampling are set per run.
    pub train: TrainConfig,
    pub train_frac: f64,
    pub split_seed: u64,
    pub eval_seed: u64,
    /// Anchor count of the main Siamese evaluations.
    pub anchors: usize,
    pub anchor_sweep: Vec<usize>,
    /// Test frames whose mean label pitch is at least this fraction of the
    /// gaze range form the high-pitch subset.
    pub high_pitch_fraction: f64,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            data: GenConfig::default(),
            train: TrainConfig::default(),
            train_frac: 0.75,
            split_seed: 1234,
            eval_seed: 1234,
            anchors: 9,
            anchor_sweep: vec![3, 5, 7, 9],
            high_pitch_fraction: 0.5,
        }
    }
}

impl ReproConfig {
    /// Sets every seed of the experiment.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.master_seed = seed;
        self.train.seed = seed;
        self.split_seed = seed;
        self.eval_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} must lie in (0, 1)", self.train_frac)));
        }
        if self.anchors == 0 || self.anchor_sweep.is_empty() || self.anchor_sweep.contains(&0) {
            return Err(Error::Config("anchor counts must be positive and the sweep non-empty".into()));
        }
        if !self.anchor_sweep.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("anchor_sweep must be strictly increasing".into()));
        }
        let calib = self.data.calib_frames as usize;
        if self.anchors > calib || self.anchor_sweep.iter().any(|&c| c > calib) {
            return Err(Error::Config(format!("anchor counts cannot exceed the {calib} calibration frames")));
        }
        if !(0.0..1.0).contains(&self.high_pitch_fraction) {
            return Err(Error::Config("high_pitch_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One trained model of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelRun {
    pub name: &'static str,
    pub model: ModelKind,
    pub modality: Modality,
    pub sampling: Sampling,
}

pub const MODEL_RUNS: [ModelRun; 6] = [
    ModelRun {
        name: "siamese_polarization",
        model: ModelKind::Siamese,
        modality: Modality::Polarization,
        sampling: Sampling::Random,
    },
    ModelRun {
        name: "siamese_polarization_calibsampling",
        model: ModelKind::Siamese,
        modality: Modality::Polarization,
        sampling: Sampling::Calibration,
    },
    ModelRun {
        name: "baseline_polarization",
        model: ModelKind::Baseline,
        modality: Modality::Polarization,
        sampling: Sampling::Random,
    },
    ModelRun {
        name: "siamese_intensity3",
        model: ModelKind::Siamese,
        modality: Modality::Intensity3,
        sampling: Sampling::Random,
    },
    ModelRun {
        name: "baseline_intensity3",
        model: ModelKind::Baseline,
        modality: Modality::Intensity3,
        sampling: Sampling::Random,
    },
    ModelRun {
        name: "baseline_intensity1",
        model: ModelKind::Baseline,
        modality: Modality::Intensity1,
        sampling: Sampling::Random,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub name: String,
    pub model_run: String,
    pub options: EvalOptions,
    pub all: Percentiles,
    pub high_pitch: Percentiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub anchors: usize,
    #[serde(flatten)]
    pub stats: Percentiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub config: ReproConfig,
    pub split: Split,
    pub evaluations: Vec<EvalEntry>,
    /// Baseline/Siamese with and without linear calibration, per modality.
    pub grid: Comparison,
    pub anchor_sweep: Vec<SweepRow>,
    pub sampling: Comparison,
    pub modality: Comparison,
    pub criteria: Vec<CriterionResult>,
}

impl ReproSummary {
    pub fn entry(&self, name: &str) -> Option<&EvalEntry> {
        self.evaluations.iter().find(|e| e.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "train subjects {:?}", self.split.train);
        let _ = writeln!(out, "test subjects  {:?}\n", self.split.test);
        let _ = writeln!(out, "== model grid ==\n{}", self.grid.to_table());
        let _ = writeln!(out, "== anchor sweep (siamese_polarization) ==");
        let _ = writeln!(out, "{:>7}  {:>6}  {:>6}  {:>6}", "anchors", "P50", "P75", "P95");
        for row in &self.anchor_sweep {
            let _ = writeln!(
                out,
                "{:>7}  {:>6.3}  {:>6.3}  {:>6.3}",
                row.anchors, row.stats.p50, row.stats.p75, row.stats.p95
            );
        }
        let _ = writeln!(out, "\n== sampling ==\n{}", self.sampling.to_table());
        let _ = writeln!(out, "== modality ==\n{}", self.modality.to_table());
        let _ = writeln!(out, "== high-pitch subset ==");
        for e in &self.evaluations {
            let _ = writeln!(
                out,
                "{:<48} n={:<5} P50 {:.3}  P95 {:.3}",
                e.name, e.high_pitch.n, e.high_pitch.p50, e.high_pitch.p95
            );
        }
        let _ = writeln!(out, "\n== criteria ==");
        for c in &self.criteria {
            let _ = writeln!(
                out,
                "[{}] {:>2} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.id,
                c.name,
                c.detail
            );
        }
        out
    }
}

fn eval_name(run: &ModelRun, anchors: Option<usize>, linear_calib: bool) -> String {
    let mut name = run.name.to_string();
    if let Some(c) = anchors {
        name.push_str(&format!("/anchors{c}"));
    }
    if linear_calib {
        name.push_str("+lc");
    }
    name
}

fn evaluations_for(run: &ModelRun, cfg: &ReproConfig) -> Vec<(Option<usize>, bool)> {
    match (run.model, run.sampling) {
        (ModelKind::Baseline, _) => vec![(None, false), (None, true)],
        (ModelKind::Siamese, Sampling::Calibration) => vec![(Some(cfg.anchors), false), (Some(cfg.anchors), true)],
        (ModelKind::Siamese, Sampling::Random) => {
            let mut counts = cfg.anchor_sweep.clone();
            if !counts.contains(&cfg.anchors) {
                counts.push(cfg.anchors);
                counts.sort_unstable();
            }
            let mut v: Vec<_> = counts.into_iter().map(|c| (Some(c), false)).collect();
            v.push((Some(cfg.anchors), true));
            v
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

const OUTPUTS: [&str; 6] = ["data", "checkpoints", "logs", "reports", "summary.json", "summary.txt"];

fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            if !overwrite {
                return Err(Error::io(
                    out,
                    std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty"),
                ));
            }
            for name in OUTPUTS {
                let p = out.join(name);
                let res = if p.is_dir() {
                    fs::remove_dir_all(&p)
                } else if p.exists() {
                    fs::remove_file(&p)
                } else {
                    Ok(())
                };
                res.map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    create_dir(out)
}

/// Runs the whole experiment under `out`, reporting progress through
/// `progress`. Writes `summary.json` and `summary.txt` and returns the
/// summary; failed criteria are reported in it, not as errors.
pub fn run_repro(cfg: &ReproConfig, out: &Path, overwrite: bool, mut progress: impl FnMut(&str)) -> Result<ReproSummary> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    prepare_out_dir(out, overwrite).map_err(|e| e.in_stage("setup"))?;

    let data_dir = out.join("data");
    progress("generating dataset");
    let manifest = gen_dataset(&cfg.data, &data_dir, false).map_err(|e| e.in_stage("gen"))?;
    let split = split_subjects(&manifest, cfg.train_frac, cfg.split_seed).map_err(|e| e.in_stage("split"))?;
    for sub in ["checkpoints", "logs", "reports"] {
        create_dir(&out.join(sub)).map_err(|e| e.in_stage("setup"))?;
    }

    let threshold = cfg.high_pitch_fraction * cfg.data.gaze_range;
    let high_pitch = |s: &SampleError| 0.5 * (s.label.pitch_left() + s.label.pitch_right()) >= threshold;

    let mut evaluations = Vec::new();
    for modality in [Modality::Polarization, Modality::Intensity3, Modality::Intensity1] {
        progress(&format!("loading {} data", modality.name()));
        let dataset = load_dataset(&data_dir, &manifest, modality, None)
            .map_err(|e| e.in_stage(format!("load {}", modality.name())))?;
        for run in MODEL_RUNS.iter().filter(|r| r.modality == modality) {
            let stage = format!("train {}", run.name);
            progress(&stage);
            let tc = TrainConfig {
                model: run.model,
                modality: run.modality,
                sampling: run.sampling,
                ..cfg.train.clone()
            };
            let outcome = train_with_progress(&tc, &dataset, &split, |entry| {
                progress(&format!("  {} step {} loss {:.5}", run.name, entry.step, entry.loss))
            })
            .map_err(|e| e.in_stage(&stage))?;
            save_checkpoint(&outcome.params, &checkpoint_path(out, run))
                .map_err(|e| e.in_stage(&stage))?;
            write_log(&outcome.log, &out.join("logs").join(format!("{}.jsonl", run.name)))
                .map_err(|e| e.in_stage(&stage))?;

            for (anchors, linear_calib) in evaluations_for(run, cfg) {
                let name = eval_name(run, anchors, linear_calib);
                let stage = format!("eval {name}");
                progress(&stage);
                let options = EvalOptions {
                    model: run.model,
                    anchors,
                    linear_calib,
                    modality,
                    seed: cfg.eval_seed,
                };
                let report = evaluate(&outcome.params, &dataset, &split.test, &options).map_err(|e| e.in_stage(&stage))?;
                let high = report.subset(high_pitch).map_err(|e| e.in_stage(&stage))?;
                let file = out.join("reports").join(format!("{}.json", name.replace('/', "_")));
                let entry = EvalEntry {
                    name: name.clone(),
                    model_run: run.name.to_string(),
                    options,
                    all: report.stats(),
                    high_pitch: high,
                };
                write_json(
                    &RunReport {
                        run_name: name,
                        options,
                        report,
                    },
                    &file,
                )
                .map_err(|e| e.in_stage(&stage))?;
                evaluations.push(entry);
            }
        }
    }

    let summary = summarize(cfg, split, evaluations).map_err(|e| e.in_stage("summary"))?;
    write_json(&summary, &out.join("summary.json")).map_err(|e| e.in_stage("summary"))?;
    let path = out.join("summary.txt");
    fs::write(&path, summary.to_text()).map_err(|e| Error::io(&path, e).in_stage("summary"))?;
    Ok(summary)
}

/// Builds the tables and checks the orderings from finished evaluations.
pub fn summarize(cfg: &ReproConfig, split: Split, evaluations: Vec<EvalEntry>) -> Result<ReproSummary> {
    let find = |name: &str| -> Result<&EvalEntry> {
        evaluations
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Invariant(format!("evaluation {name} is missing")))
    };
    let c = cfg.anchors;
    let sp = format!("siamese_polarization/anchors{c}");
    let sp_lc = format!("{sp}+lc");
    let si = format!("siamese_intensity3/anchors{c}");
    let si_lc = format!("{si}+lc");
    let sc = format!("siamese_polarization_calibsampling/anchors{c}");
    let grid_names = [
        "baseline_polarization",
        "baseline_polarization+lc",
        sp.as_str(),
        sp_lc.as_str(),
        "baseline_intensity3",
        "baseline_intensity3+lc",
        si.as_str(),
        si_lc.as_str(),
    ];
    let table = |names: &[&str]| -> Result<Comparison> {
        let rows = names
            .iter()
            .map(|n| Ok((n.to_string(), find(n)?.all)))
            .collect::<Result<Vec<_>>>()?;
        compare_runs(&rows)
    };
    let grid = table(&grid_names)?;
    let sampling = table(&[sc.as_str(), sp.as_str()])?;
    let modality = table(&[
        "baseline_intensity1",
        "baseline_intensity3",
        "baseline_polarization",
        si.as_str(),
        sp.as_str(),
    ])?;
    let anchor_sweep = cfg
        .anchor_sweep
        .iter()
        .map(|&a| {
            Ok(SweepRow {
                anchors: a,
                stats: find(&format!("siamese_polarization/anchors{a}"))?.all,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
    let mut criteria = Vec::new();

    // 8: model grid ordering at P50 and P95.
    {
        let b = find("baseline_polarization")?.all;
        let s = find(&sp)?.all;
        let s_lc = find(&sp_lc)?.all;
        let gain50 = improvement(b.p50, s.p50);
        let gain95 = improvement(b.p95, s.p95);
        let others: Vec<&EvalEntry> = grid_names
            .iter()
            .filter(|n| **n != sp_lc)
            .map(|n| find(n))
            .collect::<Result<_>>()?;
        let best50 = others.iter().all(|e| s_lc.p50 <= e.all.p50);
        let best95 = others.iter().all(|e| s_lc.p95 <= e.all.p95);
        let passed = gain50.is_some_and(|g| g >= 0.30) && gain95.is_some_and(|g| g >= 0.30) && best50 && best95;
        criteria.push(CriterionResult {
            id: 8,
            name: "model grid ordering".into(),
            passed,
            detail: format!(
                "siamese vs baseline: P50 {:.3} vs {:.3} ({}), P95 {:.3} vs {:.3} ({}); siamese+lc lowest at P50: {best50}, at P95: {best95}",
                s.p50,
                b.p50,
                pct(gain50),
                s.p95,
                b.p95,
                pct(gain95)
            ),
        });
    }

    // 9: modality effect for the Siamese model.
    {
        let p = find(&sp)?;
        let i = find(&si)?;
        let hi_gain = improvement(i.high_pitch.p50, p.high_pitch.p50);
        let passed = p.all.p50 < i.all.p50 && hi_gain.is_some_and(|g| g >= 0.10);
        criteria.push(CriterionResult {
            id: 9,
            name: "polarization beats intensity3".into(),
            passed,
            detail: format!(
                "P50 {:.3} vs {:.3} ({}); high-pitch P50 {:.3} vs {:.3} ({}, n={})",
                p.all.p50,
                i.all.p50,
                pct(improvement(i.all.p50, p.all.p50)),
                p.high_pitch.p50,
                i.high_pitch.p50,
                pct(hi_gain),
                p.high_pitch.n
            ),
        });
    }

    // 10: anchor sweep.
    {
        let p: Vec<f64> = anchor_sweep.iter().map(|r| r.stats.p50).collect();
        let inversions: Vec<f64> = p
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (w[1] - w[0]) / w[0])
            .collect();
        let first = p[0];
        let last = p[p.len() - 1];
        let passed = last <= first && inversions.len() <= 1 && inversions.iter().all(|&r| r <= 0.02);
        let series: Vec<String> = anchor_sweep
            .iter()
            .map(|r| format!("C={} {:.3}", r.anchors, r.stats.p50))
            .collect();
        criteria.push(CriterionResult {
            id: 10,
            name: "anchor sweep".into(),
            passed,
            detail: format!(
                "{}; inversions {:?}",
                series.join(", "),
                inversions.iter().map(|r| format!("{:.2}%", 100.0 * r)).collect::<Vec<_>>()
            ),
        });
    }

    // 11: sampling ablation.
    {
        let r = find(&sp)?.all;
        let s = find(&sc)?.all;
        criteria.push(CriterionResult {
            id: 11,
            name: "random sampling beats calibration sampling".into(),
            passed: r.p50 <= s.p50,
            detail: format!("P50 {:.3} vs {:.3} ({})", r.p50, s.p50, pct(improvement(s.p50, r.p50))),
        });
    }

    // 12: triplicated intensity.
    {
        let i3 = find("baseline_intensity3")?.all;
        let i1 = find("baseline_intensity1")?.all;
        criteria.push(CriterionResult {
            id: 12,
            name: "intensity3 beats intensity1".into(),
            passed: i3.p50 <= i1.p50,
            detail: format!("P50 {:.3} vs {:.3} ({})", i3.p50, i1.p50, pct(improvement(i1.p50, i3.p50))),
        });
    }

    Ok(ReproSummary {
        config: cfg.clone(),
        split,
        evaluations,
        grid,
        anchor_sweep,
        sampling,
        modality,
        criteria,
    })
}

/// Where `run_repro` puts the checkpoint of a model run.
pub fn checkpoint_path(out: &Path, run: &ModelRun) -> PathBuf {
    out.join("checkpoints").join(format!("{}.petc", run.name))
}
