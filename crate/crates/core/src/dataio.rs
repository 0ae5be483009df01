//! On-disk dataset: frame files, the JSON manifest, loading and splits.
//!
//! Frame file layout (little-endian):
//!
//! ```text
//! "PETF"       4 bytes magic
//! version      u8  (= 1)
//! n_planes     u8  (4 = demosaicked 0°/45°/90°/135°, 1 = raw PFA mosaic)
//! reserved     u16 (= 0)
//! height       u32
//! width        u32
//! planes       f32 × n_planes × height × width, row-major
//! ```
//!
//! Directory layout: `DIR/manifest.json` and
//! `DIR/S{subject:04}/{main|calib}/F{frame:05}_{L|R}.petf`.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{BinocularSample, GazeVector, Session};
use crate::polarization::{
    assemble_modality, preprocess_quad, MosaicFrame, Modality, Plane, QuadFrame, DEFAULT_EPS,
    DEFAULT_SIGMA,
};
use crate::rng::{keyed, Stream};
use crate::synthgen::{gen_session, sample_subject, GazeSampler, GenConfig};

const FRAME_MAGIC: &[u8; 4] = b"PETF";
const FRAME_VERSION: u8 = 1;
const FRAME_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Contents of a frame file.
#[derive(Debug, Clone, PartialEq)]
pub enum RawFrame {
    Quad(QuadFrame),
    Mosaic(MosaicFrame),
}

fn encode_planes(planes: &[&Plane]) -> Vec<u8> {
    let (h, w) = planes[0].dims();
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 4 * planes.len() * h * w);
    out.extend_from_slice(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(planes.len() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for plane in planes {
        for &v in plane.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_frame(quad: &QuadFrame) -> Vec<u8> {
    encode_planes(&quad.planes())
}

pub fn encode_mosaic(mosaic: &MosaicFrame) -> Vec<u8> {
    encode_planes(&[mosaic.pixels()])
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(path, io::Error::new(ErrorKind::UnexpectedEof, format!("truncated {what}")))
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<RawFrame> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(truncated(path, "frame header"));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(Error::format(path, "bad frame magic"));
    }
    if bytes[4] != FRAME_VERSION {
        return Err(Error::format(path, format!("unsupported frame version {}", bytes[4])));
    }
    let n_planes = bytes[5] as usize;
    if n_planes != 1 && n_planes != 4 {
        return Err(Error::format(path, format!("unsupported plane count {n_planes}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(path, "empty frame"));
    }
    let expected = n_planes
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, "frame dimensions overflow"))?;
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() < expected {
        return Err(truncated(path, "frame payload"));
    }
    if payload.len() > expected {
        return Err(Error::format(path, "trailing bytes after frame payload"));
    }
    let mut planes = payload[..expected].chunks_exact(4 * h * w).map(|chunk| {
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Plane::new(h, w, data)
    });
    let mut next = || planes.next().unwrap().map_err(|e| Error::format(path, e.to_string()));
    let frame = if n_planes == 1 {
        RawFrame::Mosaic(MosaicFrame::new(next()?).map_err(|e| Error::format(path, e.to_string()))?)
    } else {
        let (i0, i45, i90, i135) = (next()?, next()?, next()?, next()?);
        RawFrame::Quad(
            QuadFrame::new(i0, i45, i90, i135).map_err(|e| Error::format(path, e.to_string()))?,
        )
    };
    Ok(frame)
}

pub fn write_frame(quad: &QuadFrame, path: &Path) -> Result<()> {
    fs::write(path, encode_frame(quad)).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

/// Reads a four-plane frame; mosaic files are rejected.
pub fn read_frame(path: &Path) -> Result<QuadFrame> {
    match read_raw(path)? {
        RawFrame::Quad(q) => Ok(q),
        RawFrame::Mosaic(_) => Err(Error::format(path, "expected 4 planes, found a mosaic")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub subject_id: u32,
    pub session: Session,
    pub frame_index: u32,
    /// Relative to the dataset directory.
    pub left: String,
    pub right: String,
    pub label: GazeVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: u32,
    pub main: Vec<FrameRecord>,
    pub calib: Vec<FrameRecord>,
}

impl SubjectEntry {
    pub fn session(&self, session: Session) -> &[FrameRecord] {
        match session {
            Session::Main => &self.main,
            Session::Calib => &self.calib,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: GenConfig,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectEntry> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", self.format_version),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.subject_id) {
                return Err(Error::format(path, format!("duplicate subject {}", s.subject_id)));
            }
            for session in [Session::Main, Session::Calib] {
                for (i, r) in s.session(session).iter().enumerate() {
                    if r.subject_id != s.subject_id || r.session != session {
                        return Err(Error::format(path, "frame record filed under the wrong subject or session"));
                    }
                    if r.frame_index as usize != i {
                        return Err(Error::format(
                            path,
                            format!("subject {} {} frames are not contiguous", s.subject_id, session.as_str()),
                        ));
                    }
                    if !r.label.is_finite() {
                        return Err(Error::format(path, "non-finite label"));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn frame_path(subject_id: u32, session: Session, frame: u32, left: bool) -> String {
    format!(
        "S{subject_id:04}/{}/F{frame:05}_{}.petf",
        session.as_str(),
        if left { "L" } else { "R" }
    )
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate(&path)?;
    Ok(manifest)
}

fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = match fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(dir, e)),
    };
    if occupied {
        if !overwrite {
            return Err(Error::io(
                dir,
                io::Error::new(ErrorKind::AlreadyExists, "output directory is not empty"),
            ));
        }
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(Error::io(
                dir,
                io::Error::new(ErrorKind::AlreadyExists, "refusing to overwrite a directory that is not a dataset"),
            ));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders and writes a full dataset: one uniform main session and one ring
/// calibration session per subject.
pub fn gen_dataset(cfg: &GenConfig, dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    prepare_output_dir(dir, overwrite)?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects as usize);
    for subject_id in 0..cfg.n_subjects {
        let latent = sample_subject(cfg.master_seed, subject_id);
        let mut entry = SubjectEntry {
            subject_id,
            main: Vec::new(),
            calib: Vec::new(),
        };
        for (sampler, n) in [
            (GazeSampler::Uniform, cfg.frames_per_subject),
            (GazeSampler::Ring, cfg.calib_frames),
        ] {
            let session = sampler.session();
            let session_dir = dir.join(format!("S{subject_id:04}")).join(session.as_str());
            fs::create_dir_all(&session_dir).map_err(|e| Error::io(&session_dir, e))?;
            let frames = gen_session(&latent, n, sampler, cfg)?;
            let records = match session {
                Session::Main => &mut entry.main,
                Session::Calib => &mut entry.calib,
            };
            for (i, frame) in frames.iter().enumerate() {
                let i = i as u32;
                let left = frame_path(subject_id, session, i, true);
                let right = frame_path(subject_id, session, i, false);
                write_frame(&frame.left, &dir.join(&left))?;
                write_frame(&frame.right, &dir.join(&right))?;
                records.push(FrameRecord {
                    subject_id,
                    session,
                    frame_index: i,
                    left,
                    right,
                    label: frame.label,
                });
            }
        }
        subjects.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invariant(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Seeded subject-disjoint split; both lists are returned sorted.
pub fn split_subjects(manifest: &DatasetManifest, train_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Parameter(format!("train_frac {train_frac} must lie in (0, 1)")));
    }
    let mut ids = manifest.subject_ids();
    if ids.len() < 2 {
        return Err(Error::Data("a split needs at least two subjects".into()));
    }
    ids.sort_unstable();
    ids.shuffle(&mut keyed(seed, Stream::Split, &[]));
    let n_train = ((train_frac * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Preprocessed frames of one subject, sessions kept apart.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject_id: u32,
    pub main: Vec<BinocularSample>,
    pub calib: Vec<BinocularSample>,
}

impl SubjectData {
    pub fn session(&self, session: Session) -> &[BinocularSample] {
        match session {
            Session::Main => &self.main,
            Session::Calib => &self.calib,
        }
    }
}

/// Network-ready frames for a set of subjects, in ascending id order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub modality: Modality,
    pub image_size: usize,
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn subject(&self, id: u32) -> Option<&SubjectData> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn require(&self, id: u32) -> Result<&SubjectData> {
        self.subject(id)
            .ok_or_else(|| Error::Data(format!("subject {id} is not loaded")))
    }

    pub fn ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }
}

fn load_record(dir: &Path, record: &FrameRecord, modality: Modality) -> Result<BinocularSample> {
    let eye = |rel: &str| -> Result<_> {
        let path = dir.join(rel);
        let quad = read_frame(&path)?;
        let ida = preprocess_quad(&quad, DEFAULT_SIGMA, DEFAULT_EPS)?;
        Ok(assemble_modality(&ida, modality))
    };
    Ok(BinocularSample {
        subject_id: record.subject_id,
        session: record.session,
        frame_index: record.frame_index,
        left: eye(&record.left)?,
        right: eye(&record.right)?,
        label: record.label,
    })
}

/// Loads and preprocesses the given subjects (all of them when `ids` is
/// `None`).
pub fn load_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    modality: Modality,
    ids: Option<&[u32]>,
) -> Result<Dataset> {
    let mut wanted: Vec<u32> = match ids {
        Some(ids) => ids.to_vec(),
        None => manifest.subject_ids(),
    };
    wanted.sort_unstable();
    wanted.dedup();
    let mut subjects = Vec::with_capacity(wanted.len());
    for id in wanted {
        let entry = manifest
            .subject(id)
            .ok_or_else(|| Error::Data(format!("subject {id} is not in the manifest")))?;
        let load = |records: &[FrameRecord]| -> Result<Vec<BinocularSample>> {
            records
                .par_iter()
                .map(|r| load_record(dir, r, modality))
                .collect()
        };
        subjects.push(SubjectData {
            subject_id: id,
            main: load(&entry.main)?,
            calib: load(&entry.calib)?,
        });
    }
    Ok(Dataset {
        modality,
        image_size: manifest.config.image_size,
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quad(h: usize, w: usize, seed: u64) -> QuadFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || Plane::from_fn(h, w, |_, _| rng.random_range(0.0..2.0f32) as f64);
        QuadFrame::new(plane(), plane(), plane(), plane()).unwrap()
    }

    #[test]
    fn frame_round_trip_is_bitwise() {
        let quad = random_quad(32, 32, 3);
        let bytes = encode_frame(&quad);
        assert_eq!(bytes.len(), 16 + 4 * 4 * 32 * 32);
        match decode_raw(&bytes, Path::new("mem")).unwrap() {
            RawFrame::Quad(back) => {
                for (a, b) in quad.planes().iter().zip(back.planes()) {
                    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
            RawFrame::Mosaic(_) => panic!("expected quad"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_frame(&random_quad(4, 4, 1));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_raw(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let mut bytes = encode_frame(&random_quad(4, 4, 1));
        bytes[4] = 9;
        assert!(matches!(decode_raw(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn short_payload_is_io_error() {
        let bytes = encode_frame(&random_quad(32, 32, 1));
        let err = decode_raw(&bytes[..bytes.len() - 10], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(decode_raw(&bytes[..10], Path::new("x")), Err(Error::Io { .. })));
    }

    #[test]
    fn mosaic_files_round_trip() {
        let quad = random_quad(8, 8, 4);
        let mosaic = MosaicFrame::from_quad(&quad).unwrap();
        let bytes = encode_mosaic(&mosaic);
        assert_eq!(bytes[5], 1);
        assert_eq!(decode_raw(&bytes, Path::new("m")).unwrap(), RawFrame::Mosaic(mosaic));
    }

    fn manifest_with(n: u32) -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            config: GenConfig {
                n_subjects: n,
                ..GenConfig::default()
            },
            subjects: (0..n)
                .map(|subject_id| SubjectEntry {
                    subject_id,
                    main: Vec::new(),
                    calib: Vec::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let m = manifest_with(10);
        let s = split_subjects(&m, 0.6, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (6, 4));
        assert!(s.train.iter().all(|id| !s.test.contains(id)));
        assert_eq!(s, split_subjects(&m, 0.6, 1).unwrap());
        let mut all: Vec<u32> = s.train.iter().chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_fraction_must_be_open_interval() {
        let m = manifest_with(10);
        for frac in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(split_subjects(&m, frac, 1), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn manifest_validation_catches_gaps() {
        let mut m = manifest_with(1);
        m.subjects[0].main.push(FrameRecord {
            subject_id: 0,
            session: Session::Main,
            frame_index: 1,
            left: frame_path(0, Session::Main, 1, true),
            right: frame_path(0, Session::Main, 1, false),
            label: GazeVector::ZERO,
        });
        assert!(matches!(m.validate(Path::new("m")), Err(Error::Format { .. })));
        m.subjects[0].main[0].frame_index = 0;
        assert!(m.validate(Path::new("m")).is_ok());
    }

    #[test]
    fn paths_are_zero_padded() {
        assert_eq!(frame_path(3, Session::Calib, 42, true), "S0003/calib/F00042_L.petf");
        assert_eq!(frame_path(12, Session::Main, 0, false), "S0012/main/F00000_R.petf");
    }
}
