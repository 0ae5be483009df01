//! `petbench` command line: dataset generation, preprocessing, training,
//! evaluation, report comparison and the end-to-end experiment.

mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use petbench::dataio::{gen_dataset, load_dataset, load_manifest, read_raw, split_subjects, RawFrame, Split};
use petbench::eval::{compare_runs, evaluate, EvalOptions, RunReport};
use petbench::net::{load_checkpoint, save_checkpoint, ModelKind};
use petbench::polarization::{assemble_modality, preprocess_mosaic, preprocess_quad, Modality};
use petbench::repro::{run_repro, ReproConfig};
use petbench::synthgen::GenConfig;
use petbench::train::{train_with_progress, write_log, TrainConfig};
use petbench::{Error, Result};

use args::{Cli, Command, CompareArgs, EvalArgs, GenArgs, PreprocessArgs, ReproArgs, TrainArgs};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a.resolve(cli.config.as_deref())?),
        Command::Preprocess(a) => cmd_preprocess(a.resolve(cli.config.as_deref())?),
        Command::Train(a) => cmd_train(a.resolve(cli.config.as_deref())?),
        Command::Eval(a) => cmd_eval(a.resolve(cli.config.as_deref())?),
        Command::Compare(a) => cmd_compare(a.resolve(cli.config.as_deref())?),
        Command::Repro(a) => cmd_repro(a.resolve(cli.config.as_deref())?),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PETBENCH_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("PETBENCH_THREADS='{v}' is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let d = GenConfig::default();
    let cfg = GenConfig {
        n_subjects: a.subjects.unwrap_or(d.n_subjects),
        frames_per_subject: a.frames.unwrap_or(d.frames_per_subject),
        image_size: a.size.unwrap_or(d.image_size),
        gaze_range: a.gaze_range.unwrap_or(d.gaze_range),
        master_seed: a.seed.unwrap_or(d.master_seed),
        ring_radius: a.ring_radius.unwrap_or(d.ring_radius),
        calib_frames: a.calib_frames.unwrap_or(d.calib_frames),
        calib_targets: a.calib_targets.unwrap_or(d.calib_targets),
    };
    let out = required(a.out, "out")?;
    let manifest = gen_dataset(&cfg, &out, a.overwrite.unwrap_or(false))?;
    eprintln!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessOutput {
    modality: Modality,
    height: usize,
    width: usize,
    intensity: Vec<f64>,
    dolp: Vec<f64>,
    aolp: Vec<f64>,
    /// Standardized network input, channel-major.
    input: Vec<f64>,
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let input = required(a.input, "input")?;
    let out = required(a.out, "out")?;
    let modality = a.modality.unwrap_or(Modality::Polarization);
    let sigma = a.sigma.unwrap_or(petbench::polarization::DEFAULT_SIGMA);
    let eps = a.eps.unwrap_or(petbench::polarization::DEFAULT_EPS);
    let ida = match read_raw(&input)? {
        RawFrame::Quad(q) => preprocess_quad(&q, sigma, eps)?,
        RawFrame::Mosaic(m) => preprocess_mosaic(&m, sigma, eps)?,
    };
    let tensor = assemble_modality(&ida, modality);
    let (height, width) = ida.dims();
    write_json(
        &PreprocessOutput {
            modality,
            height,
            width,
            intensity: ida.intensity.as_slice().to_vec(),
            dolp: ida.dolp.as_slice().to_vec(),
            aolp: ida.aolp.as_slice().to_vec(),
            input: tensor.as_slice().to_vec(),
        },
        &out,
    )
}

fn dataset_split(data: &Path, train_frac: Option<f64>, split_seed: Option<u64>) -> Result<(petbench::dataio::DatasetManifest, Split)> {
    let manifest = load_manifest(data)?;
    let split = split_subjects(&manifest, train_frac.unwrap_or(0.75), split_seed.unwrap_or(1234))
        .map_err(|e| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        })?;
    Ok((manifest, split))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        model: a.model.unwrap_or(d.model),
        modality: a.modality.unwrap_or(d.modality),
        sampling: a.sampling.unwrap_or(d.sampling),
        pairs_per_epoch: a.pairs_per_epoch.or(d.pairs_per_epoch),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        steps: a.steps.unwrap_or(d.steps),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        seed: a.seed.unwrap_or(d.seed),
        calib_anchors: a.calib_anchors.unwrap_or(d.calib_anchors),
        eval_interval: a.eval_interval.unwrap_or(d.eval_interval),
        average_tail: a.average_tail.unwrap_or(d.average_tail),
        ..d
    };
    cfg.validate()?;
    let (manifest, split) = dataset_split(&data, a.train_frac, a.split_seed)?;
    let dataset = load_dataset(&data, &manifest, cfg.modality, None)?;
    let outcome = train_with_progress(&cfg, &dataset, &split, |e| {
        eprintln!("step {:>6}  loss {:.6}", e.step, e.loss);
    })?;
    let log = a.log.unwrap_or_else(|| out.with_extension("log.jsonl"));
    for path in [&out, &log] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    save_checkpoint(&outcome.params, &out)?;
    write_log(&outcome.log, &log)?;
    eprintln!("wrote {} and {}", out.display(), log.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = required(a.ckpt, "ckpt")?;
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let params = load_checkpoint(&ckpt)?;
    let arch = *params.arch();
    if let Some(m) = a.model {
        if m != arch.kind {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, not {}",
                arch.kind.name(),
                m.name()
            )));
        }
    }
    if let Some(m) = a.modality {
        if m != arch.modality {
            return Err(Error::Config(format!(
                "checkpoint expects {} input, not {}",
                arch.modality.name(),
                m.name()
            )));
        }
    }
    let anchors = match arch.kind {
        ModelKind::Siamese => Some(a.anchors.unwrap_or(9)),
        ModelKind::Baseline => a.anchors,
    };
    let options = EvalOptions {
        model: arch.kind,
        anchors,
        linear_calib: a.linear_calib.unwrap_or(false),
        modality: arch.modality,
        seed: a.seed.unwrap_or(1234),
    };
    options.validate().map_err(|e| match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    })?;
    let (manifest, split) = dataset_split(&data, a.train_frac, a.split_seed)?;
    let ids = if a.all_subjects.unwrap_or(false) {
        manifest.subject_ids()
    } else {
        split.test
    };
    let dataset = load_dataset(&data, &manifest, arch.modality, Some(&ids))?;
    let report = evaluate(&params, &dataset, &ids, &options)?;
    let run_name = a.name.unwrap_or_else(|| {
        ckpt.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });
    println!(
        "{run_name}: P50 {:.3}  P75 {:.3}  P95 {:.3}  (n={})",
        report.p50, report.p75, report.p95, report.n
    );
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_json(
        &RunReport {
            run_name,
            options,
            report,
        },
        &out,
    )
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let reports = a.reports.unwrap_or_default();
    let runs = reports
        .iter()
        .map(|p| {
            let r: RunReport = read_json(p)?;
            Ok((r.run_name.clone(), r.report.stats()))
        })
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare_runs(&runs).map_err(|e| match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    })?;
    let table = comparison.to_table();
    print!("{table}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        write_json(&comparison, &out.join("comparison.json"))?;
        let path = out.join("comparison.txt");
        fs::write(&path, &table).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn cmd_repro(a: ReproArgs) -> Result<()> {
    let out: PathBuf = required(a.out, "out")?;
    let mut cfg = ReproConfig::default().with_seed(a.seed.unwrap_or(1234));
    if let Some(n) = a.subjects {
        cfg.data.n_subjects = n;
    }
    if let Some(n) = a.frames {
        cfg.data.frames_per_subject = n;
    }
    if let Some(n) = a.calib_frames {
        cfg.data.calib_frames = n;
    }
    if let Some(n) = a.steps {
        cfg.train.steps = n;
    }
    if let Some(n) = a.average_tail {
        cfg.train.average_tail = n;
    }
    if let Some(n) = a.eval_interval {
        cfg.train.eval_interval = n;
    }
    let summary = run_repro(&cfg, &out, a.overwrite.unwrap_or(false), |m| eprintln!("{m}"))?;
    for c in &summary.criteria {
        println!("[{}] {:>2} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail);
    }
    eprintln!("summary written to {}", out.join("summary.txt").display());
    Ok(())
}
