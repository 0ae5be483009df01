//! Polarization-filter-array preprocessing.
//!
//! A division-of-focal-plane sensor samples four linear polarizer
//! orientations in a repeating 2×2 super-pixel:
//!
//! ```text
//! +-----+-----+
//! | 090 | 045 |
//! +-----+-----+
//! | 135 | 000 |
//! +-----+-----+
//! ```
//!
//! The pipeline is demosaic → Gaussian smoothing of the four orientation
//! planes → Stokes parameters → intensity / DoLP / AoLP → model tensor.
//! DoLP is normalized by the four-orientation sum `S0`, so a fully polarized
//! pixel reads 0.5 rather than 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default numerical-stability term in the DoLP denominator.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Default Gaussian smoothing width in pixels.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Largest DoLP the synthetic inverse mapping accepts; beyond it one of the
/// four orientation planes would go negative.
pub const MAX_SYNTH_DOLP: f64 = 0.5;

const VARIANCE_FLOOR: f64 = 1e-8;

/// A dense row-major H×W grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        debug_assert_eq!(self.dims(), other.dims());
        Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn all_non_negative_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Polarizer orientation of one PFA sampling site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Deg0,
    Deg45,
    Deg90,
    Deg135,
}

impl Orientation {
    /// Row/column offset of this orientation inside the 2×2 super-pixel.
    pub fn site_offset(self) -> (usize, usize) {
        match self {
            Orientation::Deg90 => (0, 0),
            Orientation::Deg45 => (0, 1),
            Orientation::Deg135 => (1, 0),
            Orientation::Deg0 => (1, 1),
        }
    }

    pub fn at(y: usize, x: usize) -> Orientation {
        match (y % 2, x % 2) {
            (0, 0) => Orientation::Deg90,
            (0, 1) => Orientation::Deg45,
            (1, 0) => Orientation::Deg135,
            _ => Orientation::Deg0,
        }
    }
}

/// Raw single-plane PFA capture with the fixed `[[90, 45], [135, 0]]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicFrame {
    pixels: Plane,
}

impl MosaicFrame {
    pub fn new(pixels: Plane) -> Result<Self> {
        let (h, w) = pixels.dims();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "mosaic dimensions must be even and non-zero, got {h}x{w}"
            )));
        }
        if !pixels.all_non_negative_finite() {
            return Err(Error::Domain(
                "mosaic pixels must be finite and non-negative".into(),
            ));
        }
        Ok(MosaicFrame { pixels })
    }

    /// Samples each orientation plane of `quad` at its own sites.
    pub fn from_quad(quad: &QuadFrame) -> Result<Self> {
        let (h, w) = quad.dims();
        let pixels = Plane::from_fn(h, w, |y, x| quad.plane(Orientation::at(y, x)).get(y, x));
        MosaicFrame::new(pixels)
    }

    pub fn pixels(&self) -> &Plane {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }
}

/// Four full-resolution orientation planes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadFrame {
    pub i0: Plane,
    pub i45: Plane,
    pub i90: Plane,
    pub i135: Plane,
}

impl QuadFrame {
    pub fn new(i0: Plane, i45: Plane, i90: Plane, i135: Plane) -> Result<Self> {
        let quad = QuadFrame { i0, i45, i90, i135 };
        quad.validate()?;
        Ok(quad)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.i0.dims();
        if self.planes().iter().any(|p| p.dims() != dims) {
            return Err(Error::Dimension(
                "quad frame planes have mismatched dimensions".into(),
            ));
        }
        if !self.planes().iter().all(|p| p.all_non_negative_finite()) {
            return Err(Error::Domain(
                "quad frame radiance must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.i0.dims()
    }

    /// Planes in storage order: 0°, 45°, 90°, 135°.
    pub fn planes(&self) -> [&Plane; 4] {
        [&self.i0, &self.i45, &self.i90, &self.i135]
    }

    pub fn plane(&self, orientation: Orientation) -> &Plane {
        match orientation {
            Orientation::Deg0 => &self.i0,
            Orientation::Deg45 => &self.i45,
            Orientation::Deg90 => &self.i90,
            Orientation::Deg135 => &self.i135,
        }
    }

    pub fn map_planes(&self, f: impl Fn(&Plane) -> Plane) -> QuadFrame {
        QuadFrame {
            i0: f(&self.i0),
            i45: f(&self.i45),
            i90: f(&self.i90),
            i135: f(&self.i135),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StokesFrame {
    pub s0: Plane,
    pub s1: Plane,
    pub s2: Plane,
}

/// Intensity, degree and angle (radians) of linear polarization.
#[derive(Debug, Clone, PartialEq)]
pub struct IdaFrame {
    pub intensity: Plane,
    pub dolp: Plane,
    pub aolp: Plane,
}

impl IdaFrame {
    pub fn dims(&self) -> (usize, usize) {
        self.intensity.dims()
    }
}

/// Channel layout fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Intensity, DoLP, AoLP.
    Polarization,
    /// Intensity replicated into three channels.
    Intensity3,
    /// Single intensity channel.
    Intensity1,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Polarization | Modality::Intensity3 => 3,
            Modality::Intensity1 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Polarization => "polarization",
            Modality::Intensity3 => "intensity3",
            Modality::Intensity1 => "intensity1",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::Polarization => 0,
            Modality::Intensity3 => 1,
            Modality::Intensity1 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Modality> {
        match code {
            0 => Some(Modality::Polarization),
            1 => Some(Modality::Intensity3),
            2 => Some(Modality::Intensity1),
            _ => None,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polarization" => Ok(Modality::Polarization),
            "intensity3" | "intensity" => Ok(Modality::Intensity3),
            "intensity1" => Ok(Modality::Intensity1),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Channel-major D×H×W model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-orientation bilinear demosaicking.
///
/// Each orientation is known on a half-resolution lattice; every output pixel
/// is interpolated separably from the two nearest lattice rows and columns,
/// extrapolating linearly past the outermost samples so affine signals are
/// reproduced up to the frame border. Values at an orientation's own sites
/// pass through unchanged. Extrapolated values are clamped at zero.
pub fn demosaic_pfa(mosaic: &MosaicFrame) -> Result<QuadFrame> {
    let (h, w) = mosaic.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "mosaic dimensions must be even, got {h}x{w}"
        )));
    }
    let interpolate = |orientation: Orientation| -> Plane {
        let (oy, ox) = orientation.site_offset();
        let (sh, sw) = (h / 2, w / 2);
        let sample = |i: usize, j: usize| mosaic.pixels.get(2 * i + oy, 2 * j + ox);
        let rows: Vec<(usize, f64)> = (0..h).map(|y| lattice_coord(y, oy, sh)).collect();
        let cols: Vec<(usize, f64)> = (0..w).map(|x| lattice_coord(x, ox, sw)).collect();
        Plane::from_fn(h, w, |y, x| {
            let (i0, fy) = rows[y];
            let (j0, fx) = cols[x];
            let i1 = (i0 + 1).min(sh - 1);
            let j1 = (j0 + 1).min(sw - 1);
            let top = lerp(sample(i0, j0), sample(i0, j1), fx);
            let bottom = lerp(sample(i1, j0), sample(i1, j1), fx);
            lerp(top, bottom, fy).max(0.0)
        })
    };
    Ok(QuadFrame {
        i0: interpolate(Orientation::Deg0),
        i45: interpolate(Orientation::Deg45),
        i90: interpolate(Orientation::Deg90),
        i135: interpolate(Orientation::Deg135),
    })
}

/// Lower lattice index and (possibly out-of-[0,1]) fraction for output
/// coordinate `pos` on a lattice with `offset` and `n` samples.
fn lattice_coord(pos: usize, offset: usize, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let t = (pos as f64 - offset as f64) / 2.0;
    let i0 = (t.floor().max(0.0) as usize).min(n - 2);
    (i0, t - i0 as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + (b - a) * t
    }
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    Ok(kernel)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_smooth(plane: &Plane, sigma: f64) -> Result<Plane> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = plane.dims();

    let mut horizontal = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                let xi = reflect_index(x as isize + k as isize - radius, w);
                acc += weight * plane.get(y, xi);
            }
            horizontal.set(y, x, acc);
        }
    }
    let mut out = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                let yi = reflect_index(y as isize + k as isize - radius, h);
                acc += weight * horizontal.get(yi, x);
            }
            out.set(y, x, acc);
        }
    }
    Ok(out)
}

/// Smooths all four orientation planes.
pub fn smooth_quad(quad: &QuadFrame, sigma: f64) -> Result<QuadFrame> {
    Ok(QuadFrame {
        i0: gaussian_smooth(&quad.i0, sigma)?,
        i45: gaussian_smooth(&quad.i45, sigma)?,
        i90: gaussian_smooth(&quad.i90, sigma)?,
        i135: gaussian_smooth(&quad.i135, sigma)?,
    })
}

/// `S0 = I0 + I45 + I90 + I135`, `S1 = I0 - I90`, `S2 = I45 - I135`.
pub fn compute_stokes(quad: &QuadFrame) -> Result<StokesFrame> {
    let dims = quad.dims();
    if quad.planes().iter().any(|p| p.dims() != dims) {
        return Err(Error::Dimension(
            "quad frame planes have mismatched dimensions".into(),
        ));
    }
    let n = dims.0 * dims.1;
    let (mut s0, mut s1, mut s2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (a, b, c, d) = (
        quad.i0.as_slice(),
        quad.i45.as_slice(),
        quad.i90.as_slice(),
        quad.i135.as_slice(),
    );
    for i in 0..n {
        s0[i] = a[i] + b[i] + c[i] + d[i];
        s1[i] = a[i] - c[i];
        s2[i] = b[i] - d[i];
    }
    let (h, w) = dims;
    Ok(StokesFrame {
        s0: Plane::new(h, w, s0)?,
        s1: Plane::new(h, w, s1)?,
        s2: Plane::new(h, w, s2)?,
    })
}

/// Intensity `S0/4`, DoLP `sqrt(S1²+S2²)/(S0+eps)` and AoLP
/// `atan2(S2, S1)/2`, with the unpolarized case mapped to AoLP 0.
pub fn compute_ida(stokes: &StokesFrame, eps: f64) -> Result<IdaFrame> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let intensity = stokes.s0.map(|s0| s0 / 4.0);
    let linear = stokes.s1.zip_map(&stokes.s2, |s1, s2| (s1 * s1 + s2 * s2).sqrt());
    let dolp = linear.zip_map(&stokes.s0, |l, s0| l / (s0 + eps));
    let aolp = stokes.s1.zip_map(&stokes.s2, |s1, s2| {
        if s1 == 0.0 && s2 == 0.0 {
            0.0
        } else {
            0.5 * s2.atan2(s1)
        }
    });
    Ok(IdaFrame {
        intensity,
        dolp,
        aolp,
    })
}

/// Smoothing, Stokes and IDA for a stored (already demosaicked) frame.
pub fn preprocess_quad(quad: &QuadFrame, sigma: f64, eps: f64) -> Result<IdaFrame> {
    let smoothed = smooth_quad(quad, sigma)?;
    compute_ida(&compute_stokes(&smoothed)?, eps)
}

/// Full raw-capture path: demosaic, smooth, Stokes, IDA.
pub fn preprocess_mosaic(mosaic: &MosaicFrame, sigma: f64, eps: f64) -> Result<IdaFrame> {
    preprocess_quad(&demosaic_pfa(mosaic)?, sigma, eps)
}

fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
    values.iter().map(|v| (v - mean) * inv_std).collect()
}

/// Builds the per-eye network input, standardizing each channel over the frame.
pub fn assemble_modality(ida: &IdaFrame, modality: Modality) -> Tensor3 {
    let (h, w) = ida.dims();
    let intensity = standardize(ida.intensity.as_slice());
    let mut data = Vec::with_capacity(modality.channels() * h * w);
    match modality {
        Modality::Polarization => {
            data.extend_from_slice(&intensity);
            data.extend(standardize(ida.dolp.as_slice()));
            data.extend(standardize(ida.aolp.as_slice()));
        }
        Modality::Intensity3 => {
            for _ in 0..3 {
                data.extend_from_slice(&intensity);
            }
        }
        Modality::Intensity1 => data.extend(intensity),
    }
    Tensor3 {
        channels: modality.channels(),
        height: h,
        width: w,
        data,
    }
}

/// Inverse of the IDA mapping used by the synthetic generator:
/// `S0 = 4I`, `S1 = DoLP·S0·cos 2A`, `S2 = DoLP·S0·sin 2A`, then
/// `I0/90 = S0/4 ± S1/2` and `I45/135 = S0/4 ± S2/2`.
pub fn synth_quad_from_ida(intensity: &Plane, dolp: &Plane, aolp: &Plane) -> Result<QuadFrame> {
    let dims = intensity.dims();
    if dolp.dims() != dims || aolp.dims() != dims {
        return Err(Error::Dimension(
            "intensity, dolp and aolp planes differ in size".into(),
        ));
    }
    if let Some(&bad) = dolp
        .as_slice()
        .iter()
        .find(|&&d| !(0.0..=MAX_SYNTH_DOLP).contains(&d))
    {
        return Err(Error::Domain(format!(
            "dolp {bad} outside [0, {MAX_SYNTH_DOLP}] would produce negative radiance"
        )));
    }
    if !intensity.all_non_negative_finite() {
        return Err(Error::Domain(
            "intensity must be finite and non-negative".into(),
        ));
    }
    let (h, w) = dims;
    let n = h * w;
    let (mut i0, mut i45, mut i90, mut i135) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let s0 = 4.0 * intensity.as_slice()[k];
        let d = dolp.as_slice()[k];
        let a = aolp.as_slice()[k];
        let s1 = d * s0 * (2.0 * a).cos();
        let s2 = d * s0 * (2.0 * a).sin();
        // max(0) only absorbs rounding at the DoLP = 0.5 boundary.
        i0[k] = (s0 / 4.0 + s1 / 2.0).max(0.0);
        i90[k] = (s0 / 4.0 - s1 / 2.0).max(0.0);
        i45[k] = (s0 / 4.0 + s2 / 2.0).max(0.0);
        i135[k] = (s0 / 4.0 - s2 / 2.0).max(0.0);
    }
    QuadFrame::new(
        Plane::new(h, w, i0)?,
        Plane::new(h, w, i45)?,
        Plane::new(h, w, i90)?,
        Plane::new(h, w, i135)?,
    )
}
