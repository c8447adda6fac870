//! Noise schedule, the masked spectral forward process, and its spatial
//! counterpart.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2, ifft2, sample_complex_gaussian, Field, Plane, Spectrum};
use crate::mask::MaskBank;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp applied to every `beta_d`.
pub const MAX_BETA: f64 = 0.999;

/// Per-step variances `beta_1..beta_D` and their cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    /// Number of steps `D`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `beta_d` for `1 <= d <= D`.
    pub fn beta(&self, d: usize) -> Result<f64> {
        self.check(d, 1)?;
        Ok(self.beta[d - 1])
    }

    /// `alpha_bar_d` for `0 <= d <= D`; `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, d: usize) -> Result<f64> {
        self.check(d, 0)?;
        Ok(self.alpha_bar[d])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `alpha_bar_0..alpha_bar_D`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, d: usize, lo: usize) -> Result<()> {
        if d < lo || d > self.beta.len() {
            return Err(Error::Parameter(format!(
                "step {d} outside {lo}..={}",
                self.beta.len()
            )));
        }
        Ok(())
    }
}

/// Cosine schedule with offset `s = 0.008`.
///
/// The raw ratio `f(d)/f(0)` gives betas, which are clamped to `0.999`; the
/// cumulative products are then rebuilt from the clamped betas so that
/// `alpha_bar_d = prod (1 - beta_t)` holds exactly.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Parameter("schedule needs D >= 1".into()));
    }
    let f = |d: usize| {
        let t = (d as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let raw: Vec<f64> = (0..=steps).map(|d| f(d) / f0).collect();
    let beta = (1..=steps)
        .map(|d| (1.0 - raw[d] / raw[d - 1]).min(MAX_BETA))
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Which perturbation drives the forward process.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// i.i.d. standard normal pixels.
    SpatialIid,
    /// Complex Gaussian spectrum under a flat mask of unit squared sum.
    SpectralUnmasked,
    /// Complex Gaussian spectrum under the step's mask.
    #[default]
    SpectralMasked,
}

impl PerturbationMode {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationMode::SpatialIid => "spatial_iid",
            PerturbationMode::SpectralUnmasked => "spectral_unmasked",
            PerturbationMode::SpectralMasked => "spectral_masked",
        }
    }
}

impl std::str::FromStr for PerturbationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial_iid" => Ok(PerturbationMode::SpatialIid),
            "spectral_unmasked" => Ok(PerturbationMode::SpectralUnmasked),
            "spectral_masked" => Ok(PerturbationMode::SpectralMasked),
            other => Err(Error::Parameter(format!("unknown perturbation mode `{other}`"))),
        }
    }
}

/// Closed-form jump `sqrt(ab_d) x_f0 + sqrt(1 - ab_d) (M_d * eps_f)`.
pub fn forward_spectral(
    x_f0: &Spectrum,
    d: usize,
    eps_f: &Spectrum,
    mask: &Plane,
    schedule: &NoiseSchedule,
) -> Result<Spectrum> {
    if d == 0 {
        return Err(Error::Parameter("forward step must be >= 1".into()));
    }
    let ab = schedule.alpha_bar(d)?;
    let noise = eps_f.apply_plane(mask)?;
    x_f0.lincomb(ab.sqrt(), &noise, (1.0 - ab).sqrt())
}

/// One step `sqrt(1 - beta) x_prev + sqrt(beta) (M * eps_f)` in the
/// frequency domain.
pub fn spectral_step(
    x_prev: &Spectrum,
    beta: f64,
    eps_f: &Spectrum,
    mask: &Plane,
) -> Result<Spectrum> {
    let noise = eps_f.apply_plane(mask)?;
    x_prev.lincomb((1.0 - beta).sqrt(), &noise, beta.sqrt())
}

/// A spatial sample together with the imaginary energy dropped to get it.
#[derive(Clone, Debug)]
pub struct SpatialSample {
    pub field: Field,
    pub imag_energy: f64,
}

/// `Re(ifft2(x_fd))`.
pub fn to_spatial_sample(x_fd: &Spectrum) -> SpatialSample {
    let raster = ifft2(x_fd);
    SpatialSample {
        field: raster.real_part(),
        imag_energy: raster.imag_energy(),
    }
}

/// Inverts `x_sd = sqrt(ab) x_s0 + sqrt(1 - ab) eps_s` for `eps_s`.
pub fn induced_noise(x_sd: &Field, x_s0: &Field, alpha_bar: f64) -> Result<Field> {
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(Error::Parameter(format!(
            "induced noise needs alpha_bar in [0, 1), got {alpha_bar}"
        )));
    }
    let s = (1.0 - alpha_bar).sqrt();
    x_sd.lincomb(1.0 / s, x_s0, -alpha_bar.sqrt() / s)
}

/// `sqrt(1 - beta) x_prev + sqrt(beta) eps_s`.
pub fn forward_spatial_step(x_prev: &Field, beta: f64, eps_s: &Field) -> Result<Field> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta {beta} outside [0, 1]")));
    }
    x_prev.lincomb((1.0 - beta).sqrt(), eps_s, beta.sqrt())
}

/// Flat mask with unit squared sum.
pub fn uniform_mask(height: usize, width: usize) -> Result<Plane> {
    Plane::filled(height, width, 1.0 / ((height * width) as f64).sqrt())
}

/// Draws one spatial perturbation.
///
/// The spectral modes return `Re(ifft2(M * eps_f))`, whose expected squared
/// sum is 1 per channel. `bank` is required only for the masked mode.
pub fn sample_perturbation<R: Rng + ?Sized>(
    mode: PerturbationMode,
    d: usize,
    bank: Option<&MaskBank>,
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut R,
) -> Result<Field> {
    match mode {
        PerturbationMode::SpatialIid => {
            Field::from_fn(height, width, channels, |_, _, _| rng.sample(StandardNormal))
        }
        PerturbationMode::SpectralUnmasked => {
            let eps_f = sample_complex_gaussian(height, width, channels, rng)?;
            let mask = uniform_mask(height, width)?;
            Ok(to_spatial_sample(&eps_f.apply_plane(&mask)?).field)
        }
        PerturbationMode::SpectralMasked => {
            let bank = bank.ok_or_else(|| {
                Error::Parameter("masked perturbation needs a mask bank".into())
            })?;
            check_bank_shape(bank, height, width)?;
            let mask = bank.mask(d)?;
            let eps_f = sample_complex_gaussian(height, width, channels, rng)?;
            Ok(to_spatial_sample(&eps_f.apply_plane(&mask)?).field)
        }
    }
}

pub(crate) fn check_bank_shape(bank: &MaskBank, height: usize, width: usize) -> Result<()> {
    if bank.height() != height || bank.width() != width {
        return Err(Error::Shape(format!(
            "mask bank is {}x{}, data is {height}x{width}",
            bank.height(),
            bank.width()
        )));
    }
    Ok(())
}

/// A clean image pushed to step `d`, with the noise that explains it.
#[derive(Clone, Debug)]
pub struct Corruption {
    pub d: usize,
    pub x_sd: Field,
    pub eps_s: Field,
}

/// Corrupts `x0` to step `d` under `mode`.
///
/// Spectral modes follow the frequency-domain route: inject scaled masked
/// noise into `fft2(x0)`, take the real part of the inverse, and recover
/// `eps_s` by inversion. The spatial mode adds scaled i.i.d. noise directly.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &Field,
    d: usize,
    mode: PerturbationMode,
    bank: &MaskBank,
    schedule: &NoiseSchedule,
    energy_scale: f64,
    rng: &mut R,
) -> Result<Corruption> {
    let (h, w, c) = x0.shape();
    let ab = schedule.alpha_bar(d)?;
    if d == 0 {
        return Err(Error::Parameter("corruption step must be >= 1".into()));
    }
    let x_sd = match mode {
        PerturbationMode::SpatialIid => {
            let eps = sample_perturbation(mode, d, None, h, w, c, rng)?;
            x0.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt() * energy_scale)?
        }
        PerturbationMode::SpectralUnmasked | PerturbationMode::SpectralMasked => {
            let mask = if mode == PerturbationMode::SpectralMasked {
                check_bank_shape(bank, h, w)?;
                bank.mask(d)?
            } else {
                uniform_mask(h, w)?
            };
            let eps_f = sample_complex_gaussian(h, w, c, rng)?.scale(energy_scale);
            let x_fd = forward_spectral(&fft2(x0), d, &eps_f, &mask, schedule)?;
            to_spatial_sample(&x_fd).field
        }
    };
    let eps_s = induced_noise(&x_sd, x0, ab)?;
    Ok(Corruption { d, x_sd, eps_s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::ComplexField;
    use crate::mask::{build_bank, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Field {
        Field::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = cosine_schedule(1080).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|b| *b > 0.0 && *b <= MAX_BETA));
        assert_eq!(s.beta(1080).unwrap(), MAX_BETA);
        assert!(cosine_schedule(0).is_err());
        assert!(s.alpha_bar(1081).is_err());
        assert!(s.beta(0).is_err());
    }

    #[test]
    fn cosine_schedule_matches_direct_formula_before_clamp() {
        // Independent evaluation of cos^2 ratio at d = 10 of 120.
        let s = cosine_schedule(120).unwrap();
        let g = |t: f64| (((t + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        let expected = g(10.0 / 120.0) / g(0.0);
        assert!((s.alpha_bar(10).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn explicit_betas_are_validated() {
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        let s = NoiseSchedule::from_betas(vec![0.19, 0.5]).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.81 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_forward_scales_the_clean_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_field(8, 8, 1, &mut rng);
        let xf = fft2(&x);
        let zero = ComplexField::zeros(8, 8, 1).unwrap();
        let sched = cosine_schedule(16).unwrap();
        let mask = uniform_mask(8, 8).unwrap();
        let out = forward_spectral(&xf, 5, &zero, &mask, &sched).unwrap();
        let expected = xf.scale(sched.alpha_bar(5).unwrap().sqrt());
        for (a, b) in out.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!(forward_spectral(&xf, 0, &zero, &mask, &sched).is_err());
        assert!(forward_spectral(&xf, 17, &zero, &mask, &sched).is_err());
    }

    #[test]
    fn closed_form_matches_stepwise_recursion() {
        // With a fixed mask and per-step noises eps_t, the recursion equals the
        // closed form driven by the aggregated noise sum_t c_t eps_t / sqrt(1 - ab_d).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sched = cosine_schedule(16).unwrap();
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let mask = bank.mask(7).unwrap();
        let x0 = fft2(&random_field(8, 8, 1, &mut rng));
        for d in 1..=16 {
            let noises: Vec<_> = (0..d)
                .map(|_| sample_complex_gaussian(8, 8, 1, &mut rng).unwrap())
                .collect();
            let mut x = x0.clone();
            for (t, eps) in noises.iter().enumerate() {
                x = spectral_step(&x, sched.beta(t + 1).unwrap(), eps, &mask).unwrap();
            }
            let ab_d = sched.alpha_bar(d).unwrap();
            let mut agg = ComplexField::zeros(8, 8, 1).unwrap();
            for (t, eps) in noises.iter().enumerate() {
                let step = t + 1;
                let c = sched.beta(step).unwrap().sqrt()
                    * (ab_d / sched.alpha_bar(step).unwrap()).sqrt();
                agg = agg.lincomb(1.0, eps, c / (1.0 - ab_d).sqrt()).unwrap();
            }
            let closed = forward_spectral(&x0, d, &agg, &mask, &sched).unwrap();
            let err = x
                .as_slice()
                .iter()
                .zip(closed.as_slice())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "d={d} err={err}");
        }
    }

    #[test]
    fn real_spectrum_has_no_imaginary_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_field(8, 6, 3, &mut rng);
        let s = to_spatial_sample(&fft2(&x));
        assert!(s.imag_energy < 1e-10);
        assert!(s.field.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn real_projection_never_increases_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let eps = sample_complex_gaussian(8, 8, 1, &mut rng).unwrap();
        let masked = eps.apply_plane(&bank.mask(30).unwrap()).unwrap();
        let s = to_spatial_sample(&masked);
        assert!(s.imag_energy > 0.0);
        assert!(s.field.norm() <= ifft2(&masked).norm());
    }

    #[test]
    fn induced_noise_direct_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_field(4, 4, 1, &mut rng);
        let ab = 1.0 - 1e-2;
        let eps = induced_noise(&x, &x, ab).unwrap();
        let k = (1.0 - (1.0 - 1e-2f64).sqrt()) / 1e-2f64.sqrt();
        for (e, v) in eps.as_slice().iter().zip(x.as_slice()) {
            assert!((e - v * k).abs() < 1e-12);
        }
        assert!(induced_noise(&x, &x, 1.0).is_err());
    }

    #[test]
    fn induced_noise_recovers_masked_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let sched = cosine_schedule(bank.len()).unwrap();
        let x0 = random_field(8, 8, 3, &mut rng);
        for d in [1, 40, 120] {
            let eps_f = sample_complex_gaussian(8, 8, 3, &mut rng).unwrap();
            let mask = bank.mask(d).unwrap();
            let x_fd = forward_spectral(&fft2(&x0), d, &eps_f, &mask, &sched).unwrap();
            let x_sd = to_spatial_sample(&x_fd).field;
            let eps_s = induced_noise(&x_sd, &x0, sched.alpha_bar(d).unwrap()).unwrap();
            let direct = to_spatial_sample(&eps_f.apply_plane(&mask).unwrap()).field;
            assert!(eps_s.max_abs_diff(&direct) < 1e-6);
            let rebuilt = x0
                .lincomb(
                    sched.alpha_bar(d).unwrap().sqrt(),
                    &eps_s,
                    (1.0 - sched.alpha_bar(d).unwrap()).sqrt(),
                )
                .unwrap();
            assert!(rebuilt.max_abs_diff(&x_sd) < 1e-12);
        }
        let zero = ComplexField::zeros(8, 8, 3).unwrap();
        let x_fd = forward_spectral(&fft2(&x0), 3, &zero, &bank.mask(3).unwrap(), &sched).unwrap();
        let eps = induced_noise(&to_spatial_sample(&x_fd).field, &x0, sched.alpha_bar(3).unwrap())
            .unwrap();
        assert!(eps.norm() < 1e-12);
    }

    #[test]
    fn spatial_step_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_field(4, 4, 1, &mut rng);
        let e = random_field(4, 4, 1, &mut rng);
        assert_eq!(forward_spatial_step(&x, 0.0, &e).unwrap(), x);
        let zero = Field::zeros(4, 4, 1).unwrap();
        let out = forward_spatial_step(&x, 0.19, &zero).unwrap();
        assert!(out.max_abs_diff(&x.map(|v| 0.9 * v)) < 1e-15);
    }

    #[test]
    fn spectral_and_spatial_steps_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let sched = cosine_schedule(bank.len()).unwrap();
        for d in [1, 17, 64, 120] {
            let x = random_field(8, 8, 1, &mut rng);
            let eps_f = sample_complex_gaussian(8, 8, 1, &mut rng).unwrap();
            let mask = bank.mask(d).unwrap();
            let beta = sched.beta(d).unwrap();
            let spectral = to_spatial_sample(&spectral_step(&fft2(&x), beta, &eps_f, &mask).unwrap());
            let eps_s = to_spatial_sample(&eps_f.apply_plane(&mask).unwrap()).field;
            let spatial = forward_spatial_step(&x, beta, &eps_s).unwrap();
            assert!(spectral.field.max_abs_diff(&spatial) < 1e-5);
        }
    }

    #[test]
    fn perturbation_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let iid = sample_perturbation(PerturbationMode::SpatialIid, 1, None, 64, 64, 1, &mut rng)
            .unwrap();
        let var = iid.energy() / iid.len() as f64 - iid.mean().powi(2);
        assert!((0.9..=1.1).contains(&var), "{var}");

        let bank = build_bank(16, 16, &GridSpec::toy()).unwrap();
        for mode in [PerturbationMode::SpectralMasked, PerturbationMode::SpectralUnmasked] {
            let n = 400;
            let total: f64 = (0..n)
                .map(|i| {
                    sample_perturbation(mode, 1 + i % 120, Some(&bank), 16, 16, 1, &mut rng)
                        .unwrap()
                        .energy()
                })
                .sum();
            let mean = total / n as f64;
            assert!((0.9..=1.1).contains(&mean), "{mode:?} {mean}");
        }
    }

    #[test]
    fn masked_mode_needs_matching_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let m = PerturbationMode::SpectralMasked;
        assert!(sample_perturbation(m, 1, None, 8, 8, 1, &mut rng).is_err());
        assert!(sample_perturbation(m, 1, Some(&bank), 16, 16, 1, &mut rng).is_err());
        assert!(sample_perturbation(m, 0, Some(&bank), 8, 8, 1, &mut rng).is_err());
        assert!(sample_perturbation(m, 121, Some(&bank), 8, 8, 1, &mut rng).is_err());
    }

    #[test]
    fn corruption_uses_the_step_mask() {
        // Replaying the generator reproduces eps_s from bank[d] exactly.
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let sched = cosine_schedule(bank.len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random_field(8, 8, 1, &mut rng);
        let c = corrupt(&x0, 33, PerturbationMode::SpectralMasked, &bank, &sched, 1.0, &mut rng.clone())
            .unwrap();
        let replay = sample_perturbation(
            PerturbationMode::SpectralMasked,
            33,
            Some(&bank),
            8,
            8,
            1,
            &mut rng,
        )
        .unwrap();
        assert!(c.eps_s.max_abs_diff(&replay) < 1e-9);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            PerturbationMode::SpatialIid,
            PerturbationMode::SpectralUnmasked,
            PerturbationMode::SpectralMasked,
        ] {
            assert_eq!(m.name().parse::<PerturbationMode>().unwrap(), m);
        }
        assert!("fourier".parse::<PerturbationMode>().is_err());
    }
}
