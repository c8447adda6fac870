//! Direction- and scale-selective frequency masks.
//!
//! Each mask is the square root of a radial Gaussian band-pass times a von
//! Mises angular profile, scaled to unit squared sum. A [`MaskBank`] holds one
//! mask per diffusion step, enumerated over a [`GridSpec`].

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{bin_frequency, Plane};

/// Largest normalized radius on the frequency grid (the corner bin).
pub const MAX_RADIUS: f64 = 0.5 * std::f64::consts::SQRT_2;

/// Parameters of a single mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Centre of the radial pass band, in normalized frequency units.
    pub radius: f64,
    /// Standard deviation of the radial band.
    pub bandwidth: f64,
    /// Preferred spectral angle in radians, `[0, pi)`.
    pub orientation: f64,
    /// von Mises concentration.
    pub concentration: f64,
}

impl MaskParams {
    pub fn new(radius: f64, bandwidth: f64, orientation: f64, concentration: f64) -> Result<Self> {
        let p = Self {
            radius,
            bandwidth,
            orientation,
            concentration,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius <= MAX_RADIUS + 1e-12) {
            return Err(Error::Parameter(format!(
                "mask radius {} outside (0, {MAX_RADIUS:.4}]",
                self.radius
            )));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::Parameter(format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::Parameter(format!(
                "concentration must be > 0, got {}",
                self.concentration
            )));
        }
        if !(0.0..PI).contains(&self.orientation) {
            return Err(Error::Parameter(format!(
                "orientation {} outside [0, pi)",
                self.orientation
            )));
        }
        Ok(())
    }
}

/// Per-bin polar coordinates of an `H x W` DFT grid.
#[derive(Clone, Debug)]
pub struct FrequencyGrid {
    pub height: usize,
    pub width: usize,
    /// `sqrt(fx^2 + fy^2)` per bin.
    pub radius: Vec<f64>,
    /// `atan2(fy, fx)` per bin, in `(-pi, pi]`; zero at DC.
    pub angle: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty grid {height}x{width}")));
        }
        let n = height * width;
        let mut radius = Vec::with_capacity(n);
        let mut angle = Vec::with_capacity(n);
        for y in 0..height {
            let fy = bin_frequency(y, height);
            for x in 0..width {
                let fx = bin_frequency(x, width);
                radius.push((fx * fx + fy * fy).sqrt());
                angle.push(if fx == 0.0 && fy == 0.0 { 0.0 } else { fy.atan2(fx) });
            }
        }
        Ok(Self {
            height,
            width,
            radius,
            angle,
        })
    }

    pub fn len(&self) -> usize {
        self.radius.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radius.is_empty()
    }
}

/// Gaussian band-pass `exp(-(r - r_d)^2 / (2 sigma^2))`.
pub fn radial_mask(grid: &FrequencyGrid, radius: f64, bandwidth: f64) -> Result<Plane> {
    if !(bandwidth > 0.0) {
        return Err(Error::Parameter(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let denom = 2.0 * bandwidth * bandwidth;
    let data = grid
        .radius
        .iter()
        .map(|r| (-(r - radius).powi(2) / denom).exp())
        .collect();
    Plane::new(grid.height, grid.width, data)
}

/// von Mises profile `exp(kappa * cos(theta - theta_d))`, applied over the
/// full angular range without symmetrization.
pub fn angular_mask(grid: &FrequencyGrid, orientation: f64, concentration: f64) -> Result<Plane> {
    if !(concentration > 0.0) {
        return Err(Error::Parameter(format!(
            "concentration must be > 0, got {concentration}"
        )));
    }
    let data = grid
        .angle
        .iter()
        .map(|t| (concentration * (t - orientation).cos()).exp())
        .collect();
    Plane::new(grid.height, grid.width, data)
}

/// `sqrt(Mr * Mtheta)` scaled to unit squared sum.
pub fn compose_and_normalize(radial: &Plane, angular: &Plane) -> Result<Plane> {
    if radial.height != angular.height || radial.width != angular.width {
        return Err(Error::Shape(format!(
            "radial {}x{} vs angular {}x{}",
            radial.height, radial.width, angular.height, angular.width
        )));
    }
    let root: Vec<f64> = radial
        .data
        .iter()
        .zip(&angular.data)
        .map(|(a, b)| (a * b).sqrt())
        .collect();
    let norm = root.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Parameter(format!(
            "degenerate mask: product norm is {norm}"
        )));
    }
    Plane::new(radial.height, radial.width, root.into_iter().map(|v| v / norm).collect())
}

/// Builds the normalized mask for one parameter tuple.
pub fn build_mask(grid: &FrequencyGrid, params: &MaskParams) -> Result<Plane> {
    params.validate()?;
    let radial = radial_mask(grid, params.radius, params.bandwidth)?;
    let angular = angular_mask(grid, params.orientation, params.concentration)?;
    compose_and_normalize(&radial, &angular)
}

/// How grid tuples are assigned to diffusion steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepOrdering {
    /// `(radius, bandwidth, concentration, orientation)`, orientation innermost.
    #[default]
    Lexicographic,
    /// Lexicographic order permuted by a seeded shuffle.
    Shuffled { seed: u64 },
}

/// The parameter values enumerated by [`build_bank`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub radii: Vec<f64>,
    pub bandwidths: Vec<f64>,
    /// Radians.
    pub orientations: Vec<f64>,
    pub concentrations: Vec<f64>,
    #[serde(default)]
    pub ordering: StepOrdering,
}

fn orientations_every(step_degrees: f64) -> Vec<f64> {
    let n = (180.0 / step_degrees).round() as usize;
    (0..n).map(|k| (k as f64 * step_degrees).to_radians()).collect()
}

impl GridSpec {
    /// r in {0.1, 0.3, 0.5}, sigma in {0.05, 0.2}, theta every 3 degrees over
    /// [0, 180), kappa in {2, 5, 10}: 1080 masks.
    pub fn paper() -> Self {
        Self {
            radii: vec![0.1, 0.3, 0.5],
            bandwidths: vec![0.05, 0.2],
            orientations: orientations_every(3.0),
            concentrations: vec![2.0, 5.0, 10.0],
            ordering: StepOrdering::Lexicographic,
        }
    }

    /// Reduced grid for desk-scale runs: theta every 18 degrees and
    /// kappa in {2, 5}, giving 120 masks.
    pub fn toy() -> Self {
        Self {
            radii: vec![0.1, 0.3, 0.5],
            bandwidths: vec![0.05, 0.2],
            orientations: orientations_every(18.0),
            concentrations: vec![2.0, 5.0],
            ordering: StepOrdering::Lexicographic,
        }
    }

    pub fn len(&self) -> usize {
        self.radii.len() * self.bandwidths.len() * self.orientations.len() * self.concentrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameter tuples in step order.
    pub fn enumerate(&self) -> Result<Vec<MaskParams>> {
        for (name, dim) in [
            ("radii", &self.radii),
            ("bandwidths", &self.bandwidths),
            ("orientations", &self.orientations),
            ("concentrations", &self.concentrations),
        ] {
            if dim.is_empty() {
                return Err(Error::Parameter(format!("grid dimension `{name}` is empty")));
            }
        }
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.radii {
            for &s in &self.bandwidths {
                for &k in &self.concentrations {
                    for &t in &self.orientations {
                        out.push(MaskParams::new(r, s, t, k)?);
                    }
                }
            }
        }
        if let StepOrdering::Shuffled { seed } = self.ordering {
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(out)
    }
}

/// One normalized mask per diffusion step, bound to a resolution.
///
/// Step `d` (1-based) uses `mask(d)`. Mask values are stored in single
/// precision, which is also the on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBank {
    height: usize,
    width: usize,
    params: Vec<MaskParams>,
    masks: Vec<Vec<f32>>,
}

const BANK_MAGIC: &[u8; 4] = b"SDMB";
const BANK_VERSION: u32 = 1;

impl MaskBank {
    pub fn from_params(height: usize, width: usize, params: Vec<MaskParams>) -> Result<Self> {
        let grid = FrequencyGrid::new(height, width)?;
        let masks = params
            .iter()
            .map(|p| build_mask(&grid, p).map(|m| m.data.iter().map(|&v| v as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height,
            width,
            params,
            masks,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of masks, which is also the number of diffusion steps `D`.
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn params(&self) -> &[MaskParams] {
        &self.params
    }

    /// Parameters of step `d` (1-based).
    pub fn step_params(&self, d: usize) -> Result<&MaskParams> {
        self.check_step(d)?;
        Ok(&self.params[d - 1])
    }

    /// Mask of step `d` (1-based) widened to `f64`.
    pub fn mask(&self, d: usize) -> Result<Plane> {
        self.check_step(d)?;
        Plane::new(
            self.height,
            self.width,
            self.masks[d - 1].iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn raw_mask(&self, d: usize) -> Result<&[f32]> {
        self.check_step(d)?;
        Ok(&self.masks[d - 1])
    }

    fn check_step(&self, d: usize) -> Result<()> {
        if d == 0 || d > self.masks.len() {
            return Err(Error::Parameter(format!(
                "step {d} outside 1..={}",
                self.masks.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(20 + self.len() * (32 + 4 * n));
        out.extend_from_slice(BANK_MAGIC);
        for v in [BANK_VERSION, self.len() as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (p, m) in self.params.iter().zip(&self.masks) {
            for v in [p.radius, p.bandwidth, p.orientation, p.concentration] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in m {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BANK_MAGIC {
            return Err(Error::Format("not a mask bank (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported mask bank version {version}")));
        }
        let count = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        if height == 0 || width == 0 {
            return Err(Error::Format(format!("bad mask shape {height}x{width}")));
        }
        let n = height * width;
        let expected = (32 + 4 * n)
            .checked_mul(count)
            .ok_or_else(|| Error::Format("declared size overflows".into()))?;
        if r.remaining() != expected {
            return Err(Error::Format(format!(
                "declared {count} masks of {height}x{width} need {expected} payload bytes, found {}",
                r.remaining()
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        for _ in 0..count {
            let p = MaskParams {
                radius: r.f64()?,
                bandwidth: r.f64()?,
                orientation: r.f64()?,
                concentration: r.f64()?,
            };
            p.validate().map_err(|e| Error::Format(e.to_string()))?;
            params.push(p);
            masks.push((0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            height,
            width,
            params,
            masks,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One mask per tuple of `spec`, in step order.
pub fn build_bank(height: usize, width: usize, spec: &GridSpec) -> Result<MaskBank> {
    MaskBank::from_params(height, width, spec.enumerate()?)
}

pub fn save_bank(bank: &MaskBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MaskBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MaskBank::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Index of a bin with exactly the given frequency on a 16x16 grid.
    fn bin_at(grid: &FrequencyGrid, y: usize, x: usize) -> usize {
        y * grid.width + x
    }

    #[test]
    fn grid_coordinates() {
        let g = FrequencyGrid::new(8, 8).unwrap();
        assert_eq!(g.radius[0], 0.0);
        assert_eq!(g.angle[0], 0.0);
        // fy = 0.25, fx = 0 sits straight up the vertical axis.
        assert!(close(g.angle[bin_at(&g, 2, 0)], PI / 2.0, 1e-15));
        // fy = -0.5 (Nyquist row) maps to -pi/2.
        assert!(close(g.angle[bin_at(&g, 4, 0)], -PI / 2.0, 1e-15));
        assert!(g.angle.iter().all(|t| *t > -PI && *t <= PI));
    }

    #[test]
    fn radial_profile_values() {
        let g = FrequencyGrid::new(16, 16).unwrap();
        let sigma = 0.0625;
        // bin (0, 4) has r = 0.25; (0, 5) has r = 0.3125 = 0.25 + sigma.
        let m = radial_mask(&g, 0.25, sigma).unwrap();
        assert!(close(m.data[bin_at(&g, 0, 4)], 1.0, 1e-15));
        assert!(close(m.data[bin_at(&g, 0, 5)], (-0.5f64).exp(), 1e-12));
        assert!(close((-0.5f64).exp(), 0.60653, 1e-5));
        let far = radial_mask(&g, 0.0, 0.025).unwrap();
        // r = 0.25 = 10 sigma
        assert!(far.data[bin_at(&g, 0, 4)] < 1e-20);
        assert!(radial_mask(&g, 0.1, 0.0).is_err());
        assert!(radial_mask(&g, 0.1, -1.0).is_err());
    }

    #[test]
    fn angular_profile_values() {
        let g = FrequencyGrid::new(16, 16).unwrap();
        let kappa = 5.0;
        let m = angular_mask(&g, 0.0, kappa).unwrap();
        // (0, 3): theta = 0; (0, 13): theta = pi; (3, 0): theta = pi/2.
        assert!(close(m.data[bin_at(&g, 0, 3)], kappa.exp(), 1e-9));
        assert!(close(m.data[bin_at(&g, 0, 13)], (-kappa).exp(), 1e-12));
        assert!(close(m.data[bin_at(&g, 3, 0)], 1.0, 1e-12));
        let lo = (-kappa).exp() * (1.0 - 1e-12);
        let hi = kappa.exp() * (1.0 + 1e-12);
        assert!(m.data.iter().all(|v| (lo..=hi).contains(v)));
        assert!(angular_mask(&g, 0.0, 0.0).is_err());
    }

    #[test]
    fn normalization_and_symmetry() {
        let g = FrequencyGrid::new(16, 12).unwrap();
        let r = radial_mask(&g, 0.3, 0.05).unwrap();
        let a = angular_mask(&g, 1.0, 5.0).unwrap();
        let m = compose_and_normalize(&r, &a).unwrap();
        assert!(close(m.energy(), 1.0, 1e-12));
        assert_eq!(m, compose_and_normalize(&a, &r).unwrap());

        let ones = Plane::filled(4, 5, 1.0).unwrap();
        let u = compose_and_normalize(&ones, &ones).unwrap();
        assert!(u.data.iter().all(|v| close(*v, 1.0 / 20f64.sqrt(), 1e-15)));

        let zeros = Plane::filled(4, 5, 0.0).unwrap();
        assert!(compose_and_normalize(&zeros, &ones).is_err());
        assert!(compose_and_normalize(&ones, &Plane::filled(5, 4, 1.0).unwrap()).is_err());
    }

    #[test]
    fn peaks_sit_at_requested_radius_and_angle() {
        let g = FrequencyGrid::new(32, 32).unwrap();
        let argmax = |p: &Plane| {
            p.data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        let r = radial_mask(&g, 0.3, 0.05).unwrap();
        let nearest = g
            .radius
            .iter()
            .map(|v| (v - 0.3).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(close((g.radius[argmax(&r)] - 0.3).abs(), nearest, 1e-15));

        let theta = 60f64.to_radians();
        let a = angular_mask(&g, theta, 10.0).unwrap();
        let best = g
            .angle
            .iter()
            .map(|t| (t - theta).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(close((g.angle[argmax(&a)] - theta).abs(), best, 1e-12));
    }

    #[test]
    fn toy_grid_cardinality_and_order() {
        let spec = GridSpec {
            radii: vec![0.3],
            bandwidths: vec![0.1],
            orientations: vec![0.0, PI / 2.0],
            concentrations: vec![5.0],
            ordering: StepOrdering::Lexicographic,
        };
        let bank = build_bank(8, 8, &spec).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.step_params(2).unwrap().orientation, PI / 2.0);

        let paper = GridSpec::paper().enumerate().unwrap();
        assert_eq!(paper.len(), 1080);
        // theta innermost, then kappa, sigma, r.
        assert_eq!(paper[1].orientation, 3f64.to_radians());
        assert_eq!(paper[60].concentration, 5.0);
        assert_eq!(paper[180].bandwidth, 0.2);
        assert_eq!(paper[360].radius, 0.3);
        assert_eq!(GridSpec::toy().len(), 120);
    }

    #[test]
    fn shuffled_ordering_is_a_seeded_permutation() {
        let mut spec = GridSpec::toy();
        let lex = spec.enumerate().unwrap();
        spec.ordering = StepOrdering::Shuffled { seed: 4 };
        let a = spec.enumerate().unwrap();
        assert_ne!(a, lex);
        assert_eq!(a, spec.enumerate().unwrap());
        let key = |p: &MaskParams| {
            (
                p.radius.to_bits(),
                p.bandwidth.to_bits(),
                p.orientation.to_bits(),
                p.concentration.to_bits(),
            )
        };
        let mut x: Vec<_> = a.iter().map(key).collect();
        let mut y: Vec<_> = lex.iter().map(key).collect();
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }

    #[test]
    fn empty_dimension_is_rejected() {
        let mut spec = GridSpec::toy();
        spec.concentrations.clear();
        assert!(build_bank(8, 8, &spec).is_err());
    }

    #[test]
    fn step_lookup_is_one_based() {
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        assert!(bank.mask(0).is_err());
        assert!(bank.mask(121).is_err());
        assert!(bank.mask(120).is_ok());
    }

    #[test]
    fn bank_bytes_round_trip_and_reject_corruption() {
        let bank = build_bank(6, 10, &GridSpec::toy()).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(MaskBank::from_bytes(&bytes).unwrap(), bank);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(MaskBank::from_bytes(truncated), Err(Error::Format(_))));

        let mut wrong_count = bytes.clone();
        wrong_count[8..12].copy_from_slice(&121u32.to_le_bytes());
        assert!(matches!(MaskBank::from_bytes(&wrong_count), Err(Error::Format(_))));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(MaskBank::from_bytes(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = bytes;
        bad_version[4] = 2;
        assert!(matches!(MaskBank::from_bytes(&bad_version), Err(Error::Format(_))));
    }
}
