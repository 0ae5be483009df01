//! Flag definitions. Every subcommand's flags can also come from a JSON
//! config file whose keys are the flag names; flags take precedence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use petbench::net::ModelKind;
use petbench::polarization::Modality;
use petbench::train::Sampling;
use petbench::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "petbench", version, about = "Polarization eye-tracking gaze benchmark")]
pub struct Cli {
    /// Worker threads; falls back to PETBENCH_THREADS. 1 gives fully
    /// deterministic scheduling.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-subject dataset.
    Gen(GenArgs),
    /// Convert one stored raw frame to intensity, DoLP and AoLP.
    Preprocess(PreprocessArgs),
    /// Train a baseline or Siamese model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test subjects.
    Eval(EvalArgs),
    /// Tabulate percent improvements between evaluation reports.
    Compare(CompareArgs),
    /// Run the full experiment and check the result orderings.
    Repro(ReproArgs),
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenArgs {
    #[arg(long)]
    pub subjects: Option<u32>,
    /// Main-session frames per subject.
    #[arg(long)]
    pub frames: Option<u32>,
    #[arg(long)]
    pub calib_frames: Option<u32>,
    #[arg(long)]
    pub calib_targets: Option<u32>,
    /// Image side length in pixels.
    #[arg(long, alias = "image-size")]
    pub size: Option<usize>,
    /// Half-width of the main-session gaze range, degrees.
    #[arg(long)]
    pub gaze_range: Option<f64>,
    /// Radius of the calibration target ring, degrees.
    #[arg(long)]
    pub ring_radius: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing dataset in --out.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub overwrite: Option<bool>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PreprocessArgs {
    /// Stored frame (.petf).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Output JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log (JSON lines); defaults to the checkpoint path with a
    /// `.log.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub sampling: Option<Sampling>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    #[arg(long)]
    pub calib_anchors: Option<usize>,
    /// Steps between held-out evaluations in the log; 0 disables them.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Number of final iterates averaged into the checkpoint.
    #[arg(long)]
    pub average_tail: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected model kind; checked against the checkpoint.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Expected modality; checked against the checkpoint.
    #[arg(long)]
    pub modality: Option<Modality>,
    /// Anchor count for Siamese inference (default 9).
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub linear_calib: Option<bool>,
    /// Anchor selection seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Evaluate every subject instead of the test split.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub all_subjects: Option<bool>,
    /// Run name stored in the report.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompareArgs {
    /// Report files; the first is the reference.
    #[arg(num_args = 0..)]
    pub reports: Option<Vec<PathBuf>>,
    /// Directory for comparison.json and comparison.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ReproArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for data, split, training and anchors.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<u32>,
    #[arg(long)]
    pub frames: Option<u32>,
    #[arg(long)]
    pub calib_frames: Option<u32>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub average_tail: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub overwrite: Option<bool>,
}

fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

macro_rules! resolvable {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            /// Fills flags that were not given from the config file.
            pub fn resolve(mut self, config: Option<&Path>) -> Result<Self> {
                let file: $ty = load_file(config)?;
                $(
                    if self.$field.is_none() {
                        self.$field = file.$field;
                    }
                )*
                Ok(self)
            }
        }
    };
}

resolvable!(GenArgs {
    subjects,
    frames,
    calib_frames,
    calib_targets,
    size,
    gaze_range,
    ring_radius,
    seed,
    out,
    overwrite
});
resolvable!(PreprocessArgs { input, modality, sigma, eps, out });
resolvable!(TrainArgs {
    data,
    out,
    log,
    model,
    modality,
    sampling,
    steps,
    batch_size,
    lr,
    seed,
    pairs_per_epoch,
    calib_anchors,
    eval_interval,
    average_tail,
    train_frac,
    split_seed
});
resolvable!(EvalArgs {
    ckpt,
    data,
    out,
    model,
    modality,
    anchors,
    linear_calib,
    seed,
    train_frac,
    split_seed,
    all_subjects,
    name
});
resolvable!(ReproArgs {
    out,
    seed,
    subjects,
    frames,
    calib_frames,
    steps,
    average_tail,
    eval_interval,
    overwrite
});

impl CompareArgs {
    pub fn resolve(mut self, config: Option<&Path>) -> Result<Self> {
        let file: CompareArgs = load_file(config)?;
        if self.reports.as_ref().is_none_or(|r| r.is_empty()) {
            self.reports = file.reports;
        }
        if self.out.is_none() {
            self.out = file.out;
        }
        Ok(self)
    }
}
