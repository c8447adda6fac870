//! Direction-weighted step selection and deterministic DDIM deraining.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::fourier::{fft2, Field};
use crate::mask::{FrequencyGrid, MaskBank};
use crate::nn::model::DenoiserModel;

/// Number of orientation bins over `[0, 180)` degrees.
pub const DIRECTION_BINS: usize = 60;
/// Bins closer than this to DC carry no orientation.
pub const MIN_DIRECTION_RADIUS: f64 = 0.02;

/// Distribution of spectral energy over orientation, folded to `[0, pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionHistogram {
    weights: Vec<f64>,
}

/// Bin of a spectral angle, folded modulo `pi`.
pub fn direction_bin(angle: f64) -> usize {
    let folded = angle.rem_euclid(std::f64::consts::PI);
    let k = (folded / std::f64::consts::PI * DIRECTION_BINS as f64).floor() as usize;
    k.min(DIRECTION_BINS - 1)
}

impl DirectionHistogram {
    pub fn uniform() -> Self {
        Self {
            weights: vec![1.0 / DIRECTION_BINS as f64; DIRECTION_BINS],
        }
    }

    /// Normalizes nonnegative weights; all-zero input gives the uniform
    /// histogram.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != DIRECTION_BINS {
            return Err(Error::Shape(format!(
                "direction histogram needs {DIRECTION_BINS} bins, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter("histogram weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Ok(Self::uniform());
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Probability of the bin holding spectral angle `angle`.
    pub fn prob(&self, angle: f64) -> f64 {
        self.weights[direction_bin(angle)]
    }

    pub fn argmax(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// `p^(1/tau)`, renormalized. `tau = 1` is the identity.
    pub fn sharpen(&self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        if tau == 1.0 {
            return Ok(self.clone());
        }
        Self::from_weights(self.weights.iter().map(|w| w.powf(1.0 / tau)).collect())
    }
}

/// Histogram of `|fft2(luma(O))|^2` by spectral angle, excluding bins
/// with normalized radius below [`MIN_DIRECTION_RADIUS`].
pub fn estimate_direction_distribution(rainy: &Field) -> Result<DirectionHistogram> {
    let gray = rainy.luminance();
    let spec = fft2(&gray);
    let grid = FrequencyGrid::new(gray.height(), gray.width())?;
    let mut weights = vec![0.0; DIRECTION_BINS];
    for (i, s) in spec.as_slice().iter().enumerate() {
        if grid.radius[i] < MIN_DIRECTION_RADIUS {
            continue;
        }
        weights[direction_bin(grid.angle[i])] += s.norm_sqr();
    }
    // Treat roundoff-level energy as none.
    let total: f64 = weights.iter().sum();
    if total <= 1e-20 * gray.energy().max(1.0) {
        return Ok(DirectionHistogram::uniform());
    }
    DirectionHistogram::from_weights(weights)
}

/// Selected reverse steps `d_1 <= ... <= d_S = D`, duplicates kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    steps: Vec<usize>,
}

impl StepPlan {
    /// Sorts `steps` and checks that the largest equals `total`.
    pub fn new(mut steps: Vec<usize>, total: usize) -> Result<Self> {
        steps.sort_unstable();
        match steps.last() {
            Some(&last) if last == total && steps[0] >= 1 => Ok(Self { steps }),
            _ => Err(Error::Parameter(format!(
                "step plan must lie in 1..={total} and contain {total}"
            ))),
        }
    }

    /// Ascending order.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Visiting order of the reverse process (non-increasing).
    pub fn traversal(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().rev().copied()
    }
}

/// Per-step weights `w_d ∝ p(theta_d)` for `d = 1..=total`.
pub fn step_weights(p: &DirectionHistogram, bank: &MaskBank, total: usize) -> Result<Vec<f64>> {
    if total == 0 || total > bank.len() {
        return Err(Error::Parameter(format!(
            "step count {total} outside 1..={}",
            bank.len()
        )));
    }
    let w = (1..=total)
        .map(|d| Ok(p.prob(bank.step_params(d)?.orientation)))
        .collect::<Result<Vec<_>>>()?;
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        // No mask orientation has mass: fall back to uniform steps.
        return Ok(vec![1.0 / total as f64; total]);
    }
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// `S - 1` draws with replacement by `w_d`, plus the forced step `D`.
pub fn sample_steps<R: Rng + ?Sized>(
    p: &DirectionHistogram,
    bank: &MaskBank,
    total: usize,
    count: usize,
    rng: &mut R,
) -> Result<StepPlan> {
    if count < 1 {
        return Err(Error::Parameter("need at least one sampling step".into()));
    }
    let weights = step_weights(p, bank, total)?;
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Parameter(format!("step weights: {e}")))?;
    let mut steps: Vec<usize> = (1..count).map(|_| dist.sample(rng) + 1).collect();
    steps.push(total);
    StepPlan::new(steps, total)
}

/// Anything that predicts the noise in `x` at step `d` given `cond`.
pub trait NoisePredictor {
    fn predict(&self, x: &Field, d: usize, cond: &Field) -> Result<Field>;
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, x: &Field, d: usize, cond: &Field) -> Result<Field> {
        self.forward(x, d, cond)
    }
}

/// Clean estimates after each visited step.
#[derive(Clone, Debug, Default)]
pub struct DdimTrace {
    pub steps: Vec<usize>,
    pub x0: Vec<Field>,
}

/// Deterministic DDIM from `x = rainy` along `plan`; `rainy` is also the
/// condition. Returns the final clean estimate clamped to `[0, 1]`.
pub fn ddim_derain<P: NoisePredictor + ?Sized>(
    rainy: &Field,
    model: &P,
    schedule: &NoiseSchedule,
    plan: &StepPlan,
    mut trace: Option<&mut DdimTrace>,
) -> Result<Field> {
    let order: Vec<usize> = plan.traversal().collect();
    let mut x = rainy.clone();
    let mut x0 = rainy.clone();
    for (i, &d) in order.iter().enumerate() {
        let ab = schedule.alpha_bar(d)?;
        let eps = model.predict(&x, d, rainy)?;
        x0 = x.lincomb(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt())?;
        if !x0.is_finite() {
            return Err(Error::NonFinite(format!("DDIM trajectory at step {d}")));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.steps.push(d);
            t.x0.push(x0.clone());
        }
        if let Some(&next) = order.get(i + 1) {
            let an = schedule.alpha_bar(next)?;
            x = x0.lincomb(an.sqrt(), &eps, (1.0 - an).sqrt())?;
        }
    }
    Ok(x0.clamp01())
}

/// Sampling options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Number of visited steps `S`.
    pub steps: usize,
    /// Sharpening temperature of the direction histogram.
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            temperature: 1.0,
        }
    }
}

/// Full inference: direction estimate, step plan, DDIM.
pub fn derain<R: Rng + ?Sized>(
    rainy: &Field,
    model: &DenoiserModel,
    bank: &MaskBank,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Field> {
    let total = model.config().steps;
    let p = estimate_direction_distribution(rainy)?.sharpen(config.temperature)?;
    let plan = sample_steps(&p, bank, total, config.steps, rng)?;
    ddim_derain(rainy, model, model.schedule(), &plan, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::cosine_schedule;
    use crate::mask::{build_bank, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bins_fold_by_half_turn() {
        use std::f64::consts::PI;
        assert_eq!(direction_bin(0.0), 0);
        assert_eq!(direction_bin(PI), 0);
        assert_eq!(direction_bin(-PI / 2.0), 30);
        assert_eq!(direction_bin(PI / 2.0), 30);
        assert_eq!(direction_bin(PI - 1e-12), 59);
        assert_eq!(direction_bin((4.0f64).to_radians()), 1);
    }

    #[test]
    fn constant_image_gives_uniform() {
        let f = Field::filled(16, 16, 3, 0.4).unwrap();
        assert_eq!(estimate_direction_distribution(&f).unwrap(), DirectionHistogram::uniform());
    }

    #[test]
    fn vertical_stripes_load_the_horizontal_axis() {
        let f = Field::from_fn(32, 32, 3, |_, x, _| if x % 4 < 2 { 0.8 } else { 0.2 }).unwrap();
        let p = estimate_direction_distribution(&f).unwrap();
        assert_eq!(p.argmax(), 0);
        assert!(p.weights()[0] > 0.99);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_step_plan_is_terminal() {
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_steps(&DirectionHistogram::uniform(), &bank, 120, 1, &mut rng).unwrap();
        assert_eq!(plan.steps(), [120]);
        assert!(sample_steps(&DirectionHistogram::uniform(), &bank, 120, 0, &mut rng).is_err());
        assert!(sample_steps(&DirectionHistogram::uniform(), &bank, 121, 3, &mut rng).is_err());
    }

    #[test]
    fn concentrated_histogram_selects_matching_masks() {
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let mut w = vec![0.0; DIRECTION_BINS];
        w[direction_bin(36f64.to_radians())] = 1.0;
        let p = DirectionHistogram::from_weights(w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let plan = sample_steps(&p, &bank, 120, 10, &mut rng).unwrap();
            for &d in &plan.steps()[..9] {
                let th = bank.step_params(d).unwrap().orientation.to_degrees();
                assert!((th - 36.0).abs() < 1e-9, "step {d} at {th}");
            }
            assert_eq!(*plan.steps().last().unwrap(), 120);
        }
    }

    #[test]
    fn sharpening() {
        let p = DirectionHistogram::from_weights((0..60).map(|i| (i + 1) as f64).collect()).unwrap();
        assert_eq!(p.sharpen(1.0).unwrap(), p);
        let s = p.sharpen(0.5).unwrap();
        assert!(s.weights()[59] > p.weights()[59]);
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.sharpen(0.0).is_err());
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, x: &Field, _: usize, _: &Field) -> Result<Field> {
            Field::zeros(x.height(), x.width(), x.channels())
        }
    }

    #[test]
    fn zero_predictor_rescales_by_alpha_bar() {
        let sched = cosine_schedule(20).unwrap();
        let o = Field::from_fn(4, 4, 1, |y, x, _| 0.01 * (y * 4 + x) as f64).unwrap();
        let plan = StepPlan::new(vec![5, 12, 20], 20).unwrap();
        let mut trace = DdimTrace::default();
        ddim_derain(&o, &Zero, &sched, &plan, Some(&mut trace)).unwrap();
        assert_eq!(trace.steps, [20, 12, 5]);
        // x0 = x / sqrt(ab_d) and x = sqrt(ab_next) x0, so every visit
        // reproduces O / sqrt(ab_D).
        let scale = 1.0 / sched.alpha_bar(20).unwrap().sqrt();
        for x0 in &trace.x0 {
            assert!(x0.max_abs_diff(&o.map(|v| v * scale)) < 1e-12 * scale);
        }
    }

    #[test]
    fn plan_validation() {
        assert!(StepPlan::new(vec![3, 1], 4).is_err());
        assert!(StepPlan::new(vec![0, 4], 4).is_err());
        assert!(StepPlan::new(vec![], 4).is_err());
        let p = StepPlan::new(vec![4, 2, 2], 4).unwrap();
        assert_eq!(p.traversal().collect::<Vec<_>>(), [4, 2, 2]);
    }
}
