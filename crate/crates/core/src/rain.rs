//! Synthetic rain: layered streak fields added onto procedural clean images.
//!
//! A streak layer is the rectified real part of masked complex noise, so its
//! orientation and thickness follow the mask that generated it. This is a toy
//! stand-in for paired deraining data, not a physical renderer.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2, ifft2, sample_complex_gaussian, Field};
use crate::mask::{build_mask, FrequencyGrid, GridSpec, MaskParams};

/// One streak layer: the mask that shapes it and its amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainLayerSpec {
    #[serde(flatten)]
    pub mask: MaskParams,
    pub gain: f64,
}

/// `gain * max(0, Re(ifft2(M * eps_f)))`, identical across `channels`.
pub fn synth_rain_layer<R: Rng + ?Sized>(
    spec: &RainLayerSpec,
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut R,
) -> Result<Field> {
    if !(spec.gain >= 0.0) {
        return Err(Error::Parameter(format!("rain gain must be >= 0, got {}", spec.gain)));
    }
    let grid = FrequencyGrid::new(height, width)?;
    let mask = build_mask(&grid, &spec.mask)?;
    let eps_f = sample_complex_gaussian(height, width, 1, rng)?;
    let streaks = ifft2(&eps_f.apply_plane(&mask)?).real_part();
    streaks
        .map(|v| spec.gain * v.max(0.0))
        .broadcast_channels(channels)
}

/// `clamp(B + sum R_d, 0, 1)`.
pub fn compose_rainy(clean: &Field, layers: &[Field]) -> Result<Field> {
    let mut acc = clean.clone();
    for layer in layers {
        acc = acc.lincomb(1.0, layer, 1.0)?;
    }
    Ok(acc.clamp01())
}

/// Kind of procedural clean image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanKind {
    Gradient,
    Checker,
    BlurredNoise,
}

/// A random RGB image of the given kind.
pub fn procedural_clean<R: Rng + ?Sized>(
    kind: CleanKind,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Field> {
    let scale = height.max(width) as f64;
    match kind {
        CleanKind::Gradient => {
            let a: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let tint: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            Field::from_fn(height, width, 3, |y, x, c| {
                let ramp = a[0] * x as f64 / scale + a[1] * y as f64 / scale;
                (0.5 + 0.4 * ramp * (c + 1) as f64 / 3.0 + 0.2 * (tint[c] - 0.5)).clamp(0.0, 1.0)
            })
        }
        CleanKind::Checker => {
            let period = rng.random_range(4..12usize);
            let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let c2: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            Field::from_fn(height, width, 3, |y, x, c| {
                if (x / period + y / period) % 2 == 1 {
                    c1[c]
                } else {
                    c2[c]
                }
            })
        }
        CleanKind::BlurredNoise => {
            let noise = Field::from_fn(height, width, 3, |_, _, _| rng.sample(StandardNormal))?;
            let grid = FrequencyGrid::new(height, width)?;
            let sigma = 0.05;
            let lowpass = crate::fourier::Plane::new(
                height,
                width,
                grid.radius
                    .iter()
                    .map(|r| (-(r * r) / (2.0 * sigma * sigma)).exp())
                    .collect(),
            )?;
            let smooth = ifft2(&fft2(&noise).apply_plane(&lowpass)?).real_part();
            let mean = smooth.mean();
            let std = (smooth.energy() / smooth.len() as f64 - mean * mean).max(0.0).sqrt();
            Ok(smooth.map(|v| (0.5 + v / (std + 1e-9) * 0.15).clamp(0.0, 1.0)))
        }
    }
}

/// Settings for [`make_toy_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub n_pairs: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of streak layers per image.
    pub layer_count_range: (usize, usize),
    /// Half-open range `[lo, hi)` of layer gains; `lo == hi` fixes the gain.
    pub gain_range: (f64, f64),
    pub seed: u64,
    /// Mask parameters for streak layers are drawn uniformly from this grid.
    pub streak_grid: GridSpec,
}

impl ToyDatasetSpec {
    /// 32x32 pairs with 1 to 3 layers of gain in `[2, 5)` drawn from the toy grid.
    pub fn toy(n_pairs: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            height: 32,
            width: 32,
            layer_count_range: (1, 3),
            gain_range: (2.0, 5.0),
            seed,
            streak_grid: GridSpec::toy(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.layer_count_range;
        if lo > hi {
            return Err(Error::Parameter(format!("layer count range {lo}..={hi} is empty")));
        }
        let (g0, g1) = self.gain_range;
        if !(g0 >= 0.0 && g1 >= g0) {
            return Err(Error::Parameter(format!("bad gain range [{g0}, {g1})")));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Parameter("dataset images must be non-empty".into()));
        }
        Ok(())
    }
}

/// One generated pair and the layers that made it.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub kind: CleanKind,
    pub clean: Field,
    pub rainy: Field,
    pub layers: Vec<RainLayerSpec>,
}

/// Generates pair `index` of `spec`. Each pair has its own generator stream,
/// so pairs are independent of generation order.
pub fn synth_pair(spec: &ToyDatasetSpec, index: usize) -> Result<SynthPair> {
    spec.validate()?;
    let params = spec.streak_grid.enumerate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let kind = *[CleanKind::Gradient, CleanKind::Checker, CleanKind::BlurredNoise]
        .choose(&mut rng)
        .unwrap();
    let clean = procedural_clean(kind, spec.height, spec.width, &mut rng)?;
    let (lo, hi) = spec.layer_count_range;
    let count = rng.random_range(lo..=hi);
    let mut layers = Vec::with_capacity(count);
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let mask = *params.choose(&mut rng).unwrap();
        let (g0, g1) = spec.gain_range;
        let gain = if g1 > g0 { rng.random_range(g0..g1) } else { g0 };
        let layer = RainLayerSpec { mask, gain };
        fields.push(synth_rain_layer(&layer, spec.height, spec.width, 3, &mut rng)?);
        layers.push(layer);
    }
    let rainy = compose_rainy(&clean, &fields)?;
    Ok(SynthPair {
        kind,
        clean,
        rainy,
        layers,
    })
}

/// Entry for one pair in `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub clean: PathBuf,
    pub rainy: PathBuf,
    pub kind: CleanKind,
    pub layers: Vec<RainLayerSpec>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_pairs: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub seed: u64,
    pub layer_count_range: (usize, usize),
    pub gain_range: (f64, f64),
    pub pairs: Vec<ManifestEntry>,
}

/// Writes `clean/NNNN.png`, `rainy/NNNN.png` and `manifest.json` under
/// `out_dir`. Paths in the manifest are relative to `out_dir`.
pub fn make_toy_dataset(spec: &ToyDatasetSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["clean", "rainy"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let pairs = (0..spec.n_pairs)
        .into_par_iter()
        .map(|i| {
            let pair = synth_pair(spec, i)?;
            let name = format!("{i:04}.png");
            let clean = PathBuf::from("clean").join(&name);
            let rainy = PathBuf::from("rainy").join(&name);
            crate::image_io::save_png(&pair.clean, out_dir.join(&clean))?;
            crate::image_io::save_png(&pair.rainy, out_dir.join(&rainy))?;
            Ok(ManifestEntry {
                index: i,
                clean,
                rainy,
                kind: pair.kind,
                layers: pair.layers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        n_pairs: spec.n_pairs,
        height: spec.height,
        width: spec.width,
        seed: spec.seed,
        layer_count_range: spec.layer_count_range,
        gain_range: spec.gain_range,
        pairs,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Principal axes of a field's autocorrelation around zero lag.
#[derive(Clone, Copy, Debug)]
pub struct StreakAxes {
    /// Direction of the major axis in the image plane, degrees in `[0, 180)`
    /// measured from the +x axis towards +y (rows).
    pub major_angle_deg: f64,
    /// Ratio of major to minor axis length.
    pub aspect: f64,
}

/// Estimates streak orientation from the second moments of the positive
/// part of the circular autocorrelation within `radius` lags of the origin.
pub fn streak_axes(field: &Field, radius: usize) -> Result<StreakAxes> {
    let lum = field.luminance();
    let mean = lum.mean();
    let centered = lum.map(|v| v - mean);
    let spec = fft2(&centered);
    let power: Vec<_> = spec
        .as_slice()
        .iter()
        .map(|z| num_complex::Complex64::new(z.norm_sqr(), 0.0))
        .collect();
    let power = crate::fourier::ComplexField::from_planar(lum.height(), lum.width(), 1, power)?;
    let acf = ifft2(&power).real_part();
    let (h, w) = (lum.height() as isize, lum.width() as isize);
    let r = radius as isize;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = acf.get(dy.rem_euclid(h) as usize, dx.rem_euclid(w) as usize, 0).max(0.0);
            sxx += v * (dx * dx) as f64;
            syy += v * (dy * dy) as f64;
            sxy += v * (dx * dy) as f64;
        }
    }
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let l1 = 0.5 * (tr + disc);
    let l2 = 0.5 * (tr - disc);
    if !(l2 > 0.0) {
        return Err(Error::Parameter("autocorrelation has no spread".into()));
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Ok(StreakAxes {
        major_angle_deg: angle.to_degrees().rem_euclid(180.0),
        aspect: (l1 / l2).sqrt(),
    })
}
