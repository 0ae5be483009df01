//! Gaze labels and model inputs shared by every stage of the pipeline.

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::polarization::Tensor3;

/// Binocular gaze in degrees: `[yaw_left, pitch_left, yaw_right, pitch_right]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GazeVector(pub [f64; 4]);

impl GazeVector {
    pub const ZERO: GazeVector = GazeVector([0.0; 4]);

    pub fn new(yaw_left: f64, pitch_left: f64, yaw_right: f64, pitch_right: f64) -> Self {
        GazeVector([yaw_left, pitch_left, yaw_right, pitch_right])
    }

    /// Both eyes looking at the same `(yaw, pitch)` target.
    pub fn binocular(yaw: f64, pitch: f64) -> Self {
        GazeVector([yaw, pitch, yaw, pitch])
    }

    pub fn splat(value: f64) -> Self {
        GazeVector([value; 4])
    }

    pub fn yaw_left(&self) -> f64 {
        self.0[0]
    }

    pub fn pitch_left(&self) -> f64 {
        self.0[1]
    }

    pub fn yaw_right(&self) -> f64 {
        self.0[2]
    }

    pub fn pitch_right(&self) -> f64 {
        self.0[3]
    }

    pub fn left(&self) -> (f64, f64) {
        (self.0[0], self.0[1])
    }

    pub fn right(&self) -> (f64, f64) {
        (self.0[2], self.0[3])
    }

    pub fn scale(&self, factor: f64) -> Self {
        GazeVector(self.0.map(|v| v * factor))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Add for GazeVector {
    type Output = GazeVector;

    fn add(self, rhs: GazeVector) -> GazeVector {
        GazeVector(std::array::from_fn(|i| self.0[i] + rhs.0[i]))
    }
}

impl Sub for GazeVector {
    type Output = GazeVector;

    fn sub(self, rhs: GazeVector) -> GazeVector {
        GazeVector(std::array::from_fn(|i| self.0[i] - rhs.0[i]))
    }
}

/// Recording session a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Session {
    /// Free-viewing frames used for training and for measuring test error.
    Main,
    /// Ring-target calibration sequence; the anchor pool and the linear
    /// calibration data.
    Calib,
}

impl Session {
    pub fn as_str(&self) -> &'static str {
        match self {
            Session::Main => "main",
            Session::Calib => "calib",
        }
    }
}

/// One model input: the left and right eye tensors of a single time step plus
/// its ground-truth gaze and identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BinocularSample {
    pub subject_id: u32,
    pub session: Session,
    pub frame_index: u32,
    pub left: Tensor3,
    pub right: Tensor3,
    pub label: GazeVector,
}
