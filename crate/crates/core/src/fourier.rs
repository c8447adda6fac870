//! Real and complex rasters plus the unitary 2-D DFT that moves between them.
//!
//! Both transforms carry a `1/sqrt(H*W)` factor, so `fft2` and `ifft2` are
//! exact inverses and preserve the Euclidean norm. Channels are stored as
//! contiguous planes and are transformed independently.

use std::cell::RefCell;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// A real raster of shape `H x W x C`, stored plane by plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// A complex raster of shape `H x W x C`. Used both for spectra and for the
/// (generally complex) output of the inverse transform.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<Complex64>,
}

/// Frequency-domain raster, DC at index `(0, 0)`.
pub type Spectrum = ComplexField;

/// A single real `H x W` plane, used for masks and per-bin coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("raster must be non-empty, got {height}x{width}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
    }
    Ok(())
}

impl Field {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        check_dims(height, width, channels)?;
        Ok(Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        let mut f = Self::zeros(height, width, channels)?;
        f.data.fill(value);
        Ok(f)
    }

    /// Builds a field from planar data (`channel`, `y`, `x` order).
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut out = Self::zeros(height, width, channels)?;
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    out.data[(c * height + y) * width + x] = f(y, x, c);
                }
            }
        }
        Ok(out)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
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

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn norm(&self) -> f64 {
        self.energy().sqrt()
    }

    /// Sum of squared entries.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Field {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.ensure_same_shape(other)?;
        Ok(Field {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            ..*self
        })
    }

    pub fn ensure_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Repeats a single-channel field across `channels` planes.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Field> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "can only broadcast single-channel fields, got {} channels",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Field::from_planar(self.height, self.width, channels, data)
    }

    /// Luminance (0.299, 0.587, 0.114) for RGB fields; identity for grayscale.
    pub fn luminance(&self) -> Field {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect();
        Field {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl ComplexField {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        check_dims(height, width, channels)?;
        Ok(Self {
            height,
            width,
            channels,
            data: vec![Complex64::new(0.0, 0.0); height * width * channels],
        })
    }

    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_real(field: &Field) -> Self {
        Self {
            height: field.height,
            width: field.width,
            channels: field.channels,
            data: field.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, fy: usize, fx: usize, c: usize) -> Complex64 {
        self.data[(c * self.height + fy) * self.width + fx]
    }

    pub fn set(&mut self, fy: usize, fx: usize, c: usize, value: Complex64) {
        self.data[(c * self.height + fy) * self.width + fx] = value;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn real_part(&self) -> Field {
        Field {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|z| z.re).collect(),
        }
    }

    /// Sum of squared imaginary parts.
    pub fn imag_energy(&self) -> f64 {
        self.data.iter().map(|z| z.im * z.im).sum()
    }

    pub fn scale(&self, s: f64) -> ComplexField {
        ComplexField {
            data: self.data.iter().map(|z| z * s).collect(),
            ..*self
        }
    }

    /// Multiplies every channel bin-wise by a real `H x W` plane.
    pub fn apply_plane(&self, plane: &Plane) -> Result<ComplexField> {
        if plane.height != self.height || plane.width != self.width {
            return Err(Error::Shape(format!(
                "mask {}x{} vs raster {}x{}",
                plane.height, plane.width, self.height, self.width
            )));
        }
        let n = self.height * self.width;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, z)| z * plane.data[i % n])
            .collect();
        Ok(ComplexField {
            data,
            ..*self
        })
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &ComplexField, b: f64) -> Result<ComplexField> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(ComplexField {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| x * a + y * b)
                .collect(),
            ..*self
        })
    }
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_planes(raster: &mut ComplexField, inverse: bool) {
    let (h, w) = (raster.height, raster.width);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        }
    });
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for plane in raster.data.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y] * scale;
            }
        }
    }
}

/// Unitary forward transform of a real field.
pub fn fft2(field: &Field) -> Spectrum {
    let mut out = ComplexField::from_real(field);
    transform_planes(&mut out, false);
    out
}

/// Unitary forward transform of a complex raster.
pub fn fft2_complex(raster: &ComplexField) -> Spectrum {
    let mut out = raster.clone();
    transform_planes(&mut out, false);
    out
}

/// Unitary inverse transform. The result is complex in general; it is real
/// (up to rounding) only for Hermitian-symmetric input.
pub fn ifft2(spectrum: &Spectrum) -> ComplexField {
    let mut out = spectrum.clone();
    transform_planes(&mut out, true);
    out
}

/// i.i.d. complex Gaussian noise: real and imaginary parts each `N(0, 1)`,
/// so every bin has `E|z|^2 = 2`.
pub fn sample_complex_gaussian<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut R,
) -> Result<Spectrum> {
    check_dims(height, width, channels)?;
    let data = (0..height * width * channels)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im)
        })
        .collect();
    ComplexField::from_planar(height, width, channels, data)
}

/// Normalized DFT frequency of bin `k` on an axis of length `n`, in `[-0.5, 0.5)`.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64 / n as f64
    } else {
        -((n - k) as f64) / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, c: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(h, w, c, |_, _, _| rng.random::<f64>() - 0.5).unwrap()
    }

    /// Direct O(N^2) evaluation of the unitary DFT.
    fn naive_dft(field: &Field) -> ComplexField {
        let (h, w, c) = field.shape();
        let mut out = ComplexField::zeros(h, w, c).unwrap();
        let s = 1.0 / ((h * w) as f64).sqrt();
        for ch in 0..c {
            for fy in 0..h {
                for fx in 0..w {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let phase = -2.0
                                * std::f64::consts::PI
                                * ((fy * y) as f64 / h as f64 + (fx * x) as f64 / w as f64);
                            acc += Complex64::from_polar(field.get(y, x, ch), phase);
                        }
                    }
                    out.set(fy, fx, ch, acc * s);
                }
            }
        }
        out
    }

    #[test]
    fn single_bin_is_identity() {
        let f = Field::filled(1, 1, 1, 0.37).unwrap();
        let s = fft2(&f);
        assert!((s.get(0, 0, 0) - Complex64::new(0.37, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn constant_field_has_only_dc() {
        let c = 0.8;
        let s = fft2(&Field::filled(4, 4, 1, c).unwrap());
        assert!((s.get(0, 0, 0).re - 4.0 * c).abs() < 1e-12);
        for fy in 0..4 {
            for fx in 0..4 {
                if (fy, fx) != (0, 0) {
                    assert!(s.get(fy, fx, 0).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parseval_on_random_8x8() {
        let f = random_field(8, 8, 3, 1);
        assert!((fft2(&f).norm() - f.norm()).abs() < 1e-6);
    }

    #[test]
    fn matches_naive_dft_on_odd_sizes() {
        for &(h, w) in &[(5, 7), (6, 9), (1, 4), (3, 1)] {
            let f = random_field(h, w, 1, (h * 31 + w) as u64);
            let fast = fft2(&f);
            let slow = naive_dft(&f);
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).norm() < 1e-12, "{h}x{w}");
            }
        }
    }

    #[test]
    fn round_trip_8x8() {
        let f = random_field(8, 8, 1, 2);
        let back = ifft2(&fft2(&f));
        let err = back
            .as_slice()
            .iter()
            .zip(f.as_slice())
            .map(|(z, v)| (z - Complex64::new(*v, 0.0)).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let (h, w) = (4, 6);
        let c = 0.25;
        let mut s = ComplexField::zeros(h, w, 1).unwrap();
        s.set(0, 0, 0, Complex64::new(((h * w) as f64).sqrt() * c, 0.0));
        let back = ifft2(&s);
        for z in back.as_slice() {
            assert!((z.re - c).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn one_sided_impulse_gives_complex_output() {
        let mut s = ComplexField::zeros(8, 8, 1).unwrap();
        s.set(0, 1, 0, Complex64::new(1.0, 0.0));
        assert!(ifft2(&s).imag_energy() > 1e-3);
    }

    #[test]
    fn real_input_spectrum_is_hermitian() {
        let f = random_field(6, 8, 1, 3);
        let s = fft2(&f);
        for fy in 0..6 {
            for fx in 0..8 {
                let a = s.get(fy, fx, 0);
                let b = s.get((6 - fy) % 6, (8 - fx) % 8, 0).conj();
                assert!((a - b).norm() <= 1e-6 * a.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn complex_gaussian_is_reproducible_and_calibrated() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_complex_gaussian(64, 64, 1, &mut rng).unwrap()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        let n = a.as_slice().len() as f64;
        let power = a.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        let mean_re = a.as_slice().iter().map(|z| z.re).sum::<f64>() / n;
        assert!((1.9..=2.1).contains(&power), "{power}");
        assert!(mean_re.abs() <= 0.05, "{mean_re}");
    }

    #[test]
    fn bin_frequencies_follow_fft_layout() {
        let f: Vec<f64> = (0..4).map(|k| bin_frequency(k, 4)).collect();
        assert_eq!(f, vec![0.0, 0.25, -0.5, -0.25]);
        let g: Vec<f64> = (0..5).map(|k| bin_frequency(k, 5)).collect();
        assert_eq!(g, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Field::zeros(0, 4, 1).is_err());
        assert!(Field::zeros(4, 4, 2).is_err());
        assert!(Field::from_planar(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
