//! Procedural binocular eye renderer standing in for a recorded dataset.
//!
//! Each subject has an affine distortion of gaze space (gain, offset), a
//! per-eye polarization texture phase, an eyelid that covers the top rows of
//! the frame, and a sensor noise level. Frames are rendered in IDA form and
//! converted to four polarizer-orientation images.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{GazeVector, Session};
use crate::polarization::{synth_quad_from_ida, IdaFrame, Plane, QuadFrame};
use crate::rng::{keyed, Stream};

pub const GAIN_RANGE: (f64, f64) = (0.8, 1.2);
/// Gains are normal around 1 with this spread, truncated to `GAIN_RANGE`.
pub const GAIN_SPREAD: f64 = 0.05;
pub const OFFSET_LIMIT: f64 = 3.0;
pub const OCCLUSION_RANGE: (f64, f64) = (0.15, 0.35);
pub const NOISE_RANGE: (f64, f64) = (0.01, 0.03);
/// Largest |yaw| or |pitch| the renderer accepts, in degrees.
pub const MAX_GAZE: f64 = 25.0;
/// Bound on fixation jitter around a calibration target, in degrees.
pub const RING_JITTER: f64 = 0.2;

/// Pupil displacement per degree of distorted gaze, in frame widths.
const PUPIL_PER_DEGREE: f64 = 0.02;
const PUPIL_RADII: (f64, f64) = (0.085, 0.075);
const IRIS_SCALE: f64 = 2.0;
const PUPIL_LEVEL: f64 = 0.08;
const IRIS_LEVEL: f64 = 0.4;
const SKIN_LEVEL: f64 = 0.35;
const GLINT_LEVEL: f64 = 0.6;
const GLINT_SIGMA: f64 = 0.03;
/// Spatial scale applied to normalized coordinates before the DoLP texture.
const TEXTURE_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn index(self) -> usize {
        match self {
            Eye::Left => 0,
            Eye::Right => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLatent {
    pub subject_id: u32,
    /// Per gaze axis, in `GazeVector` order.
    pub gain: [f64; 4],
    /// Degrees, in `GazeVector` order.
    pub offset: [f64; 4],
    /// Two texture phases (radians) per eye, left first.
    pub texture_phase: [[f64; 2]; 2],
    pub occlusion_frac: f64,
    pub noise_sigma: f64,
}

impl SubjectLatent {
    /// Distorted `(yaw, pitch)` seen by one eye.
    pub fn distort(&self, eye: Eye, yaw: f64, pitch: f64) -> (f64, f64) {
        let k = 2 * eye.index();
        (
            self.gain[k] * yaw + self.offset[k],
            self.gain[k + 1] * pitch + self.offset[k + 1],
        )
    }
}

pub fn sample_subject(master_seed: u64, subject_id: u32) -> SubjectLatent {
    let mut rng = keyed(master_seed, Stream::Subject, &[subject_id as u64]);
    let gain_dist = Normal::new(1.0, GAIN_SPREAD).expect("valid gain distribution");
    let gain = std::array::from_fn(|_| loop {
        let g = gain_dist.sample(&mut rng);
        if (GAIN_RANGE.0..=GAIN_RANGE.1).contains(&g) {
            break g;
        }
    });
    let offset = std::array::from_fn(|_| rng.random_range(-OFFSET_LIMIT..=OFFSET_LIMIT));
    let texture_phase = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.0..TAU)));
    let occlusion_frac = rng.random_range(OCCLUSION_RANGE.0..=OCCLUSION_RANGE.1);
    let noise_sigma = rng.random_range(NOISE_RANGE.0..=NOISE_RANGE.1);
    SubjectLatent {
        subject_id,
        gain,
        offset,
        texture_phase,
        occlusion_frac,
        noise_sigma,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_subjects: u32,
    pub frames_per_subject: u32,
    pub image_size: usize,
    /// Main-session gaze is uniform in `[-gaze_range, gaze_range]` per axis.
    pub gaze_range: f64,
    pub master_seed: u64,
    pub ring_radius: f64,
    pub calib_frames: u32,
    pub calib_targets: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_subjects: 32,
            frames_per_subject: 300,
            image_size: 32,
            gaze_range: 15.0,
            master_seed: 1234,
            ring_radius: 10.0,
            calib_frames: 100,
            calib_targets: 9,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 {
            return fail("n_subjects must be at least 1".into());
        }
        if self.frames_per_subject == 0 || self.calib_frames == 0 {
            return fail("frame counts must be at least 1".into());
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(2) {
            return fail(format!("image_size {} must be even and >= 16", self.image_size));
        }
        if self.calib_targets < 2 {
            return fail("calib_targets must be at least 2".into());
        }
        if !(self.gaze_range > 0.0 && self.gaze_range <= MAX_GAZE) {
            return fail(format!("gaze_range {} must lie in (0, {MAX_GAZE}]", self.gaze_range));
        }
        if !(self.ring_radius >= 0.0 && self.ring_radius + RING_JITTER <= MAX_GAZE) {
            return fail(format!("ring_radius {} out of range", self.ring_radius));
        }
        Ok(())
    }
}

fn wrap_half_pi(a: f64) -> f64 {
    (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2
}

/// Renders one eye. `frame_seed` selects the sensor-noise stream.
pub fn render_eye(
    subject: &SubjectLatent,
    eye: Eye,
    yaw: f64,
    pitch: f64,
    image_size: usize,
    frame_seed: u64,
) -> Result<IdaFrame> {
    if !(yaw.abs() <= MAX_GAZE && pitch.abs() <= MAX_GAZE) {
        return Err(Error::Domain(format!(
            "gaze ({yaw}, {pitch}) outside ±{MAX_GAZE} degrees"
        )));
    }
    if image_size < 2 {
        return Err(Error::Dimension(format!("image size {image_size} too small")));
    }
    let n = image_size;
    let scale = n as f64;
    let (d_yaw, d_pitch) = subject.distort(eye, yaw, pitch);
    let cx = 0.5 + PUPIL_PER_DEGREE * d_yaw;
    let cy = 0.5 - PUPIL_PER_DEGREE * d_pitch;
    let (glint_x, glint_y) = match eye {
        Eye::Left => (0.42, 0.62),
        Eye::Right => (0.58, 0.62),
    };
    let occluded_rows = (subject.occlusion_frac * scale).round() as usize;
    let [phase_u, phase_v] = subject.texture_phase[eye.index()];

    let mut rng = keyed(frame_seed, Stream::Frame, &[eye.index() as u64]);
    let noise = Normal::new(0.0, subject.noise_sigma)
        .map_err(|e| Error::Parameter(format!("noise sigma: {e}")))?;

    let mut intensity = Plane::from_fn(n, n, |y, x| {
        let xn = (x as f64 + 0.5) / scale;
        let yn = (y as f64 + 0.5) / scale;
        let sclera = 0.75 + 0.2 * (xn - 0.5) - 0.15 * (yn - 0.5);
        let r = ((xn - cx) / PUPIL_RADII.0).powi(2) + ((yn - cy) / PUPIL_RADII.1).powi(2);
        let r = r.sqrt();
        // Soft-edged pupil inside a darker iris annulus.
        let pupil = 1.0 / (1.0 + ((r - 1.0) * 8.0).exp());
        let iris = 1.0 / (1.0 + ((r - IRIS_SCALE) * 6.0).exp());
        let base = sclera + (IRIS_LEVEL - sclera) * iris;
        let eye_level = base + (PUPIL_LEVEL - base) * pupil;
        let g2 = (xn - glint_x).powi(2) + (yn - glint_y).powi(2);
        eye_level + GLINT_LEVEL * (-g2 / (2.0 * GLINT_SIGMA * GLINT_SIGMA)).exp()
    });
    for v in intensity.as_mut_slice() {
        *v = (*v + noise.sample(&mut rng)).max(0.0);
    }
    for y in 0..occluded_rows.min(n) {
        for x in 0..n {
            intensity.set(y, x, SKIN_LEVEL);
        }
    }

    let dolp = Plane::from_fn(n, n, |y, x| {
        let u = TEXTURE_SCALE * (x as f64 + 0.5) / scale;
        let v = TEXTURE_SCALE * (y as f64 + 0.5) / scale;
        let d = 0.25
            + 0.2
                * (TAU * (u * 0.15 + 0.04 * d_yaw) + phase_u).sin()
                * (TAU * (v * 0.15 + 0.04 * d_pitch) + phase_v).cos();
        let d = d.clamp(0.0, 0.5);
        if y < occluded_rows {
            0.5 * d
        } else {
            d
        }
    });

    let aolp = Plane::from_fn(n, n, |y, x| {
        let xn = (x as f64 + 0.5) / scale;
        let yn = (y as f64 + 0.5) / scale;
        wrap_half_pi(0.3 * (yn - cy).atan2(xn - cx) + 0.02 * d_pitch)
    });

    Ok(IdaFrame {
        intensity,
        dolp,
        aolp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GazeSampler {
    /// Uniform over the configured range; the main session.
    Uniform,
    /// Round-robin over targets on a ring; the calibration session.
    Ring,
}

impl GazeSampler {
    pub fn session(self) -> Session {
        match self {
            GazeSampler::Uniform => Session::Main,
            GazeSampler::Ring => Session::Calib,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionFrame {
    pub left: QuadFrame,
    pub right: QuadFrame,
    /// Target the subject was asked to fixate; the stored label.
    pub label: GazeVector,
    /// Gaze actually rendered, `label` plus fixation jitter.
    pub rendered: (f64, f64),
    /// Ring target index, ring sessions only.
    pub target: Option<u32>,
}

/// Ring targets in degrees, the first at `(radius, 0)`.
pub fn ring_targets(radius: f64, count: u32) -> Vec<(f64, f64)> {
    (0..count)
        .map(|k| {
            let a = TAU * k as f64 / count as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn frame_seed(master_seed: u64, subject_id: u32, session: Session, frame: u32) -> u64 {
    let mut rng = keyed(
        master_seed,
        Stream::Frame,
        &[subject_id as u64, session as u64, frame as u64],
    );
    rng.random()
}

/// Label, rendered gaze and ring target of one frame.
type PlannedFrame = ((f64, f64), (f64, f64), Option<u32>);

pub fn gen_session(
    subject: &SubjectLatent,
    n: u32,
    sampler: GazeSampler,
    cfg: &GenConfig,
) -> Result<Vec<SessionFrame>> {
    if n == 0 {
        return Err(Error::Parameter("a session needs at least one frame".into()));
    }
    cfg.validate()?;
    let session = sampler.session();
    let mut rng = keyed(
        cfg.master_seed,
        Stream::Session,
        &[subject.subject_id as u64, session as u64],
    );
    let targets = ring_targets(cfg.ring_radius, cfg.calib_targets);
    let plan: Vec<PlannedFrame> = (0..n)
        .map(|i| match sampler {
            GazeSampler::Uniform => {
                let yaw = rng.random_range(-cfg.gaze_range..=cfg.gaze_range);
                let pitch = rng.random_range(-cfg.gaze_range..=cfg.gaze_range);
                ((yaw, pitch), (yaw, pitch), None)
            }
            GazeSampler::Ring => {
                let k = i % cfg.calib_targets;
                let (ty, tp) = targets[k as usize];
                let angle = rng.random_range(0.0..TAU);
                let radius = RING_JITTER * rng.random::<f64>();
                let rendered = (ty + radius * angle.cos(), tp + radius * angle.sin());
                ((ty, tp), rendered, Some(k))
            }
        })
        .collect();
    plan.into_par_iter()
        .enumerate()
        .map(|(i, (label, rendered, target))| {
            let seed = frame_seed(cfg.master_seed, subject.subject_id, session, i as u32);
            let eye_quad = |eye| -> Result<QuadFrame> {
                let ida = render_eye(subject, eye, rendered.0, rendered.1, cfg.image_size, seed)?;
                synth_quad_from_ida(&ida.intensity, &ida.dolp, &ida.aolp)
            };
            Ok(SessionFrame {
                left: eye_quad(Eye::Left)?,
                right: eye_quad(Eye::Right)?,
                label: GazeVector::binocular(label.0, label.1),
                rendered,
                target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_subject() -> SubjectLatent {
        SubjectLatent {
            subject_id: 0,
            gain: [1.0; 4],
            offset: [0.0; 4],
            texture_phase: [[0.3, 1.1], [2.0, 0.7]],
            occlusion_frac: 0.35,
            noise_sigma: 0.0,
        }
    }

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_subjects: 2,
            frames_per_subject: 10,
            master_seed: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn subjects_are_deterministic_and_distinct() {
        assert_eq!(sample_subject(3, 17), sample_subject(3, 17));
        let differing = (0..100)
            .filter(|&id| sample_subject(3, id) != sample_subject(3, id + 1))
            .count();
        assert!(differing >= 99);
    }

    #[test]
    fn latents_respect_bounds() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for id in 0..250 {
            let s = sample_subject(11, id);
            for g in s.gain {
                lo = lo.min(g);
                hi = hi.max(g);
            }
            assert!(s.offset.iter().all(|o| o.abs() <= OFFSET_LIMIT));
            assert!((0.0..=0.35).contains(&s.occlusion_frac));
            assert!(s.noise_sigma >= 0.0);
        }
        assert!(lo >= 0.8 && hi <= 1.2);
    }

    #[test]
    fn render_is_deterministic_and_clamped() {
        let s = sample_subject(1, 2);
        let a = render_eye(&s, Eye::Left, 4.0, -3.0, 32, 99).unwrap();
        let b = render_eye(&s, Eye::Left, 4.0, -3.0, 32, 99).unwrap();
        assert_eq!(a, b);
        let dolp = a.dolp.as_slice();
        assert!(dolp.iter().all(|d| (0.0..=0.5).contains(d)));
        assert!(a.aolp.as_slice().iter().all(|v| v.abs() <= FRAC_PI_2));
    }

    #[test]
    fn out_of_range_gaze_is_domain_error() {
        let s = plain_subject();
        assert!(matches!(render_eye(&s, Eye::Left, 26.0, 0.0, 32, 0), Err(Error::Domain(_))));
        assert!(matches!(render_eye(&s, Eye::Right, 0.0, f64::NAN, 32, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn high_pitch_pupil_hides_under_eyelid() {
        let s = plain_subject();
        let cy = 0.5 - PUPIL_PER_DEGREE * 20.0;
        assert!(cy + PUPIL_RADII.1 <= s.occlusion_frac);
        let frame = render_eye(&s, Eye::Left, 0.0, 20.0, 32, 0).unwrap();
        let min_visible = frame.intensity.as_slice()[12 * 32..]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_visible > 0.3, "pupil still visible: {min_visible}");
    }

    fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn dolp_tracks_pitch_better_than_intensity_when_occluded() {
        // Correlate, per pixel, each plane with pitch over 200 high-pitch
        // frames and compare the strongest pixel of each plane.
        let s = SubjectLatent {
            noise_sigma: 0.02,
            ..plain_subject()
        };
        let pitches: Vec<f64> = (0..200).map(|i| 12.0 + 8.0 * i as f64 / 199.0).collect();
        let frames: Vec<IdaFrame> = pitches
            .iter()
            .enumerate()
            .map(|(i, &p)| render_eye(&s, Eye::Left, 0.0, p, 32, i as u64).unwrap())
            .collect();
        let best = |pick: fn(&IdaFrame) -> &Plane| {
            (0..32 * 32)
                .map(|k| {
                    let xs: Vec<f64> = frames.iter().map(|f| pick(f).as_slice()[k]).collect();
                    let c = correlation(&xs, &pitches);
                    if c.is_nan() { 0.0 } else { c.abs() }
                })
                .fold(0.0, f64::max)
        };
        let intensity = best(|f| &f.intensity);
        let dolp = best(|f| &f.dolp);
        assert!(intensity < dolp, "intensity {intensity} vs dolp {dolp}");
    }

    #[test]
    fn nearest_render_recovers_gaze_order() {
        let mut s = plain_subject();
        s.occlusion_frac = 0.1;
        let probes = [-10.0, -5.0, 0.0, 5.0, 10.0];
        let renders: Vec<Vec<f64>> = probes
            .iter()
            .map(|&y| render_eye(&s, Eye::Left, y, 0.0, 32, 0).unwrap().intensity.into_vec())
            .collect();
        for (i, &y) in probes.iter().enumerate() {
            let q = render_eye(&s, Eye::Left, y + 0.7, 0.0, 32, 0).unwrap().intensity.into_vec();
            let dist = |r: &Vec<f64>| r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let nearest = (0..probes.len())
                .min_by(|&a, &b| dist(&renders[a]).total_cmp(&dist(&renders[b])))
                .unwrap();
            assert_eq!(nearest, i);
        }
    }

    #[test]
    fn subjects_render_differently() {
        let mut differing = 0;
        for id in 0..100 {
            let (sa, sb) = (sample_subject(8, id), sample_subject(8, id + 1));
            let a = render_eye(&sa, Eye::Left, 0.0, 0.0, 32, 1).unwrap();
            let b = render_eye(&sb, Eye::Left, 0.0, 0.0, 32, 2).unwrap();
            let diff = |p: &Plane, q: &Plane| {
                p.as_slice().iter().zip(q.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 1024.0
            };
            // Expected mean |n_a - n_b| for two independent noise fields.
            let floor = (2.0 / PI).sqrt() * sa.noise_sigma.hypot(sb.noise_sigma);
            if diff(&a.intensity, &b.intensity) + diff(&a.dolp, &b.dolp) > floor {
                differing += 1;
            }
        }
        assert!(differing >= 99, "{differing}");
    }

    #[test]
    fn ring_session_layout() {
        let cfg = small_cfg();
        let s = sample_subject(cfg.master_seed, 0);
        let frames = gen_session(&s, 100, GazeSampler::Ring, &cfg).unwrap();
        assert_eq!(frames.len(), 100);
        let mut centers: Vec<(i64, i64)> = frames
            .iter()
            .map(|f| ((f.label.0[0] * 1e6).round() as i64, (f.label.0[1] * 1e6).round() as i64))
            .collect();
        centers.sort();
        centers.dedup();
        assert_eq!(centers.len(), 9);
        let mut per_target = [0; 9];
        for f in &frames {
            let t = f.target.unwrap() as usize;
            per_target[t] += 1;
            let (dy, dp) = (f.rendered.0 - f.label.0[0], f.rendered.1 - f.label.0[1]);
            assert!(dy.hypot(dp) <= RING_JITTER);
        }
        assert!(per_target.iter().all(|&c| c == 11 || c == 12));
    }

    #[test]
    fn ring_chord_is_bounded_by_diameter() {
        let t = ring_targets(10.0, 9);
        let mut max_chord: f64 = 0.0;
        for a in &t {
            for b in &t {
                max_chord = max_chord.max((a.0 - b.0).hypot(a.1 - b.1));
            }
        }
        assert!((max_chord - 19.696).abs() < 1e-3, "{max_chord}");
        assert!((max_chord - 20.0 * (4.0 * PI / 9.0).sin()).abs() < 1e-9);
    }

    #[test]
    fn uniform_session_respects_range() {
        let cfg = small_cfg();
        let s = sample_subject(cfg.master_seed, 1);
        let frames = gen_session(&s, 20, GazeSampler::Uniform, &cfg).unwrap();
        assert!(frames.iter().all(|f| f.label.0.iter().all(|v| v.abs() <= cfg.gaze_range)));
        assert!(frames.iter().all(|f| f.target.is_none()));
        assert!(matches!(
            gen_session(&s, 0, GazeSampler::Uniform, &cfg),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn sessions_are_reproducible() {
        let cfg = small_cfg();
        let s = sample_subject(cfg.master_seed, 1);
        let a = gen_session(&s, 5, GazeSampler::Uniform, &cfg).unwrap();
        let b = gen_session(&s, 5, GazeSampler::Uniform, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        for bad in [
            GenConfig { n_subjects: 0, ..GenConfig::default() },
            GenConfig { image_size: 15, ..GenConfig::default() },
            GenConfig { image_size: 8, ..GenConfig::default() },
            GenConfig { calib_targets: 1, ..GenConfig::default() },
            GenConfig { gaze_range: 30.0, ..GenConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
