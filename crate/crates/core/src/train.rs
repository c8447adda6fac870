//! Noise-prediction training: corruption, objective, optimizer and the
//! finite-difference gradient check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{random_crop, PairedDataset};
use crate::diffusion::{corrupt, PerturbationMode};
use crate::error::{Error, Result};
use crate::fourier::Field;
use crate::mask::MaskBank;
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::model::{DenoiserConfig, DenoiserModel};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::tape::{Tape, Tensor};

/// Training hyperparameters. Missing JSON fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: DenoiserConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    /// Evaluations without improvement before the learning rate drops.
    pub plateau_patience: usize,
    /// Iterations averaged into one plateau evaluation.
    pub eval_every: usize,
    pub perturbation: PerturbationMode,
    /// Multiplies the injected perturbation in every mode.
    pub noise_energy_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::toy(),
            iterations: 3000,
            batch_size: 4,
            lr: 2e-4,
            min_lr: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 10,
            eval_every: 50,
            perturbation: PerturbationMode::SpectralMasked,
            noise_energy_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return bad("lr must lie in (0, 1)");
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr must lie in (0, lr]");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 || !(self.noise_energy_scale > 0.0) {
            return bad("weight_decay, adam_eps and noise_energy_scale out of range");
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Grads,
    v: Grads,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update at learning rate `lr`; values are snapped back to `f32`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            for (((p, g), m), v) in params.value_mut(id).iter_mut().zip(g).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * self.weight_decay * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        params.round_to_f32();
    }
}

/// Multiplies the learning rate by `factor` after `patience` evaluations
/// without a relative improvement of at least `threshold`.
#[derive(Clone, Debug)]
pub struct ReduceLrOnPlateau {
    pub lr: f64,
    pub min_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(lr: f64, min_lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            min_lr,
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feeds one evaluation. Returns true when the rate was reduced, or
    /// when a plateau is hit already at the minimum rate.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            self.lr = (self.lr * self.factor).max(self.min_lr);
            return true;
        }
        false
    }

    pub fn at_min(&self) -> bool {
        self.lr <= self.min_lr
    }
}

/// One corrupted training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x_sd: Field,
    pub d: usize,
    pub cond: Field,
    pub eps: Field,
}

/// `‖eps - eps_hat‖²` for one sample, plus parameter gradients of
/// `weight` times that loss.
pub fn sample_loss_and_grads(model: &DenoiserModel, s: &Sample, weight: f64) -> Result<(f64, Grads)> {
    let mut tape = Tape::new(&model.params);
    let out = model.forward_on_tape(&mut tape, &s.x_sd, s.d, &s.cond)?;
    let pred = &tape.value(out).data;
    let target = s.eps.as_slice();
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|v| v * v).sum::<f64>();
    let seed = Tensor {
        data: diff.iter().map(|v| 2.0 * weight * v).collect(),
        ..tape.value(out).clone()
    };
    let mut grads = model.params.zero_grads();
    tape.backward(out, &seed, &mut grads);
    Ok((loss, grads))
}

pub fn sample_loss(model: &DenoiserModel, s: &Sample) -> Result<f64> {
    let pred = model.forward(&s.x_sd, s.d, &s.cond)?;
    Ok(pred
        .as_slice()
        .iter()
        .zip(s.eps.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum())
}

/// Mean per-sample loss and its gradient. Samples are processed in
/// parallel and reduced in order.
pub fn batch_loss_and_grads(model: &DenoiserModel, batch: &[Sample]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(model, s, w))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = model.params.zero_grads();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grads.accumulate(g);
    }
    Ok((loss * w, grads))
}

/// Corrupts each clean image at a uniformly drawn step. The rainy image is
/// the condition.
pub fn make_batch<R: Rng + ?Sized>(
    pairs: &[(Field, Field)],
    bank: &MaskBank,
    model: &DenoiserModel,
    mode: PerturbationMode,
    energy_scale: f64,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let steps = model.config().steps;
    if bank.len() < steps {
        return Err(Error::Config(format!(
            "mask bank has {} masks, model needs {steps}",
            bank.len()
        )));
    }
    pairs
        .iter()
        .map(|(clean, rainy)| {
            let d = rng.random_range(1..=steps);
            let c = corrupt(clean, d, mode, bank, model.schedule(), energy_scale, rng)?;
            Ok(Sample {
                x_sd: c.x_sd,
                d,
                cond: rainy.clone(),
                eps: c.eps_s,
            })
        })
        .collect()
}

/// One optimizer step on `batch`. Returns the batch loss.
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    batch: &[Sample],
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(model, batch)?;
    if !loss.is_finite() || !grads.is_finite() {
        let steps: Vec<usize> = batch.iter().map(|s| s.d).collect();
        return Err(Error::NonFinite(format!(
            "training loss {loss} at optimizer step {} (steps {steps:?})",
            opt.steps() + 1
        )));
    }
    opt.step(&mut model.params, &grads, lr);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// True when training stopped on a plateau at the minimum rate.
    pub converged: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,lr\n");
        for r in &self.losses {
            let _ = writeln!(s, "{},{:.9e},{:.6e}", r.iteration, r.loss, r.lr);
        }
        s
    }

    /// Mean loss over the first and last `n` iterations.
    pub fn head_tail_means(&self, n: usize) -> (f64, f64) {
        let n = n.clamp(1, self.losses.len().max(1));
        let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len().max(1) as f64;
        (
            mean(&self.losses[..n.min(self.losses.len())]),
            mean(&self.losses[self.losses.len().saturating_sub(n)..]),
        )
    }
}

/// Trains `model` in place. All randomness derives from `config.seed`.
pub fn train_model(
    model: &mut DenoiserModel,
    data: &PairedDataset,
    bank: &MaskBank,
    config: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(
        &model.params,
        config.beta1,
        config.beta2,
        config.adam_eps,
        config.weight_decay,
    );
    let mut sched = ReduceLrOnPlateau::new(
        config.lr,
        config.min_lr,
        config.plateau_factor,
        config.plateau_patience,
    );
    let (h, w) = (bank.height(), bank.width());
    let mut losses = Vec::with_capacity(config.iterations);
    let mut window = 0.0;
    let mut converged = false;
    for it in 0..config.iterations {
        let pairs = (0..config.batch_size)
            .map(|_| {
                let pair = data.pairs.choose(&mut rng).expect("non-empty");
                random_crop(pair, h, w, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(
            &pairs,
            bank,
            model,
            config.perturbation,
            config.noise_energy_scale,
            &mut rng,
        )?;
        let lr = sched.lr;
        let loss = train_step(model, &mut opt, &batch, lr)?;
        let rec = LossRecord {
            iteration: it,
            loss,
            lr,
        };
        progress(&rec);
        losses.push(rec);
        window += loss;
        if (it + 1) % config.eval_every == 0 {
            let was_min = sched.at_min();
            if sched.observe(window / config.eval_every as f64) && was_min {
                converged = true;
                break;
            }
            window = 0.0;
        }
    }
    Ok(TrainReport {
        losses,
        checkpoint: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        converged,
    })
}

/// Builds a fresh model from `config.model`, trains it, and writes the
/// checkpoint and (optionally) the loss trace.
pub fn train_loop(
    data: &PairedDataset,
    bank: &MaskBank,
    config: &TrainConfig,
    checkpoint: impl AsRef<Path>,
    loss_csv: Option<&Path>,
) -> Result<(DenoiserModel, TrainReport)> {
    let mut model = DenoiserModel::new(config.model.clone(), config.seed)?;
    let mut report = train_model(&mut model, data, bank, config, |_| {})?;
    let path = checkpoint.as_ref();
    save_checkpoint(&model, path)?;
    report.checkpoint = Some(path.to_path_buf());
    if let Some(csv) = loss_csv {
        fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok((model, report))
}

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grads(&self) -> Result<(f64, Grads)>;
}

/// Mean noise-prediction loss of a model on fixed samples.
pub struct DenoiserObjective {
    pub model: DenoiserModel,
    pub samples: Vec<Sample>,
}

impl Objective for DenoiserObjective {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.samples {
            total += sample_loss(&self.model, s)?;
        }
        Ok(total / self.samples.len() as f64)
    }

    fn loss_and_grads(&self) -> Result<(f64, Grads)> {
        batch_loss_and_grads(&self.model, &self.samples)
    }
}

/// Denominator floor of the relative error, per unit of loss. Forward-pass
/// roundoff puts central differences at `h = 1e-5` about `1e-10 |loss|`
/// off, so coordinates whose gradient sits below
/// `GRAD_CHECK_FLOOR * max(1, |loss|)` are judged by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub loss: f64,
    pub floor: f64,
}

/// Compares the analytic gradient with central differences of step `h` on
/// `n` scalars drawn without replacement.
pub fn gradient_check<O: Objective>(obj: &mut O, n: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let (loss, grads) = obj.loss_and_grads()?;
    let floor = GRAD_CHECK_FLOOR * loss.abs().max(1.0);
    let total = obj.params().num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, n.min(total));
    let mut entries = Vec::with_capacity(picks.len());
    for k in picks {
        let (id, off) = obj.params().locate(k).expect("index within store");
        let orig = obj.params().value(id)[off];
        obj.params_mut().value_mut(id)[off] = orig + h;
        let up = obj.loss()?;
        obj.params_mut().value_mut(id)[off] = orig - h;
        let down = obj.loss()?;
        obj.params_mut().value_mut(id)[off] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id)[off];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        entries.push(GradCheckEntry {
            param: obj.params().name(id).to_string(),
            offset: off,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        loss,
        floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_perturbation;
    use crate::mask::{build_bank, GridSpec};
    use crate::nn::model::{AttentionPlacement, Backbone, Prediction};
    use crate::nn::params::Init;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            embed_dim: 8,
            steps: 12,
            prediction: Prediction::Epsilon,
            attention: AttentionPlacement {
                last_down: true,
                middle: true,
                first_up: true,
            },
            ..DenoiserConfig::toy()
        }
    }

    fn random_field(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Field {
        Field::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn samples(model: &DenoiserModel, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let pairs: Vec<_> = (0..n)
            .map(|_| (random_field(8, 8, 3, &mut rng), random_field(8, 8, 3, &mut rng)))
            .collect();
        make_batch(&pairs, &bank, model, PerturbationMode::SpectralMasked, 1.0, &mut rng).unwrap()
    }

    fn perturb(params: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in params.ids().collect::<Vec<_>>() {
            for v in params.value_mut(id) {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    #[test]
    fn zero_lr_step_is_identity() {
        let mut m = DenoiserModel::new(tiny_config(), 1).unwrap();
        perturb(&mut m.params, 2);
        m.params.round_to_f32();
        let before = m.params.clone();
        let batch = samples(&m, 2, 3);
        let mut opt = AdamW::new(&m.params, 0.9, 0.999, 1e-8, 1e-4);
        let loss = train_step(&mut m, &mut opt, &batch, 0.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(m.params, before);
    }

    #[test]
    fn loss_is_permutation_invariant_and_oracle_is_zero() {
        let mut m = DenoiserModel::new(tiny_config(), 1).unwrap();
        perturb(&mut m.params, 2);
        let batch = samples(&m, 3, 3);
        let (a, _) = batch_loss_and_grads(&m, &batch).unwrap();
        let rev: Vec<_> = batch.iter().rev().cloned().collect();
        let (b, _) = batch_loss_and_grads(&m, &rev).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
        let oracle: Vec<_> = batch
            .iter()
            .map(|s| Sample {
                eps: m.forward(&s.x_sd, s.d, &s.cond).unwrap(),
                ..s.clone()
            })
            .collect();
        assert_eq!(batch_loss_and_grads(&m, &oracle).unwrap().0, 0.0);
    }

    #[test]
    fn zero_head_loss_is_perturbation_energy() {
        let m = DenoiserModel::new(tiny_config(), 1).unwrap();
        let batch = samples(&m, 4, 5);
        let (loss, _) = batch_loss_and_grads(&m, &batch).unwrap();
        let energy = batch.iter().map(|s| s.eps.energy()).sum::<f64>() / 4.0;
        assert!((loss - energy).abs() < 1e-12 * energy);
        // Masked noise carries about unit energy per channel.
        assert!(loss > 0.3 && loss < 10.0, "{loss}");
    }

    #[test]
    fn zero_head_blocks_gradients_upstream() {
        let m = DenoiserModel::new(tiny_config(), 1).unwrap();
        let batch = samples(&m, 2, 5);
        let mut obj = DenoiserObjective { model: m, samples: batch };
        let (_, g) = obj.loss_and_grads().unwrap();
        for (id, v) in g.iter() {
            let name = obj.params().name(id).to_string();
            if name.starts_with("head.conv") {
                assert!(v.iter().any(|x| *x != 0.0), "{name}");
            } else {
                assert!(v.iter().all(|x| *x == 0.0), "{name}");
            }
        }
        let r = gradient_check(&mut obj, 50, 1e-5, 0).unwrap();
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn gradient_check_on_the_tiny_network() {
        for backbone in [Backbone::Product, Backbone::Conv] {
            let cfg = DenoiserConfig {
                backbone,
                prediction: Prediction::ConditionResidual,
                ..tiny_config()
            };
            let mut m = DenoiserModel::new(cfg, 1).unwrap();
            perturb(&mut m.params, 4);
            let batch = samples(&m, 2, 6);
            let mut obj = DenoiserObjective { model: m, samples: batch };
            let r = gradient_check(&mut obj, 200, 1e-5, 1).unwrap();
            assert_eq!(r.entries.len(), 200);
            assert!(r.max_rel_error < 1e-4, "{backbone:?} {}", r.max_rel_error);
        }
    }

    /// Two stacked pointwise layers with a squared-error loss.
    struct LinearNet {
        params: ParamStore,
        x: Tensor,
        y: Vec<f64>,
    }

    impl LinearNet {
        fn run(&self, grads: Option<&mut Grads>) -> f64 {
            let mut t = Tape::new(&self.params);
            let ids: Vec<_> = self.params.ids().collect();
            let x = t.leaf(self.x.clone());
            let (w1, b1) = (t.param(ids[0]), t.param(ids[1]));
            let h = t.pointwise(x, w1, b1);
            let (w2, b2) = (t.param(ids[2]), t.param(ids[3]));
            let out = t.pointwise(h, w2, b2);
            let diff: Vec<f64> = t.value(out).data.iter().zip(&self.y).map(|(a, b)| a - b).collect();
            if let Some(g) = grads {
                let seed = Tensor {
                    data: diff.iter().map(|v| 2.0 * v).collect(),
                    ..t.value(out).clone()
                };
                t.backward(out, &seed, g);
            }
            diff.iter().map(|v| v * v).sum()
        }
    }

    impl Objective for LinearNet {
        fn params(&self) -> &ParamStore {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.params
        }
        fn loss(&self) -> Result<f64> {
            Ok(self.run(None))
        }
        fn loss_and_grads(&self) -> Result<(f64, Grads)> {
            let mut g = self.params.zero_grads();
            let l = self.run(Some(&mut g));
            Ok((l, g))
        }
    }

    #[test]
    fn gradient_check_on_a_linear_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        params.add("w1", &[6, 3], Init::FanIn(3), &mut rng);
        params.add("b1", &[6], Init::FanIn(3), &mut rng);
        params.add("w2", &[2, 6], Init::FanIn(6), &mut rng);
        params.add("b2", &[2], Init::FanIn(6), &mut rng);
        let x = Tensor::new(3, 4, 4, (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = (0..32).map(|_| rng.random::<f64>()).collect();
        let mut net = LinearNet { params, x, y };
        let r = gradient_check(&mut net, 1000, 1e-5, 0).unwrap();
        assert_eq!(r.entries.len(), 38);
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = ReduceLrOnPlateau::new(1e-3, 1e-6, 0.5, 3);
        assert!(!s.observe(1.0));
        for _ in 0..3 {
            assert!(!s.observe(1.0));
        }
        assert!(s.observe(1.0));
        assert_eq!(s.lr, 5e-4);
        assert!(!s.observe(0.5));
        let mut s = ReduceLrOnPlateau::new(2e-6, 1e-6, 0.5, 0);
        s.observe(1.0);
        assert!(s.observe(1.0));
        assert!(s.at_min());
    }

    #[test]
    fn frozen_gradients_trigger_the_plateau_in_training() {
        // A constant loss never improves, so the rate halves every
        // `patience + 1` evaluations.
        let mut s = ReduceLrOnPlateau::new(2e-4, 1e-6, 0.5, 10);
        let mut drops = vec![];
        for k in 0..40 {
            if s.observe(0.7) {
                drops.push(k);
            }
        }
        assert_eq!(drops, [11, 22, 33]);
        assert_eq!(s.lr, 2.5e-5);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        use crate::rain::{synth_pair, ToyDatasetSpec};
        let spec = ToyDatasetSpec {
            height: 16,
            width: 16,
            ..ToyDatasetSpec::toy(16, 3)
        };
        let pairs = (0..16)
            .map(|i| {
                let p = synth_pair(&spec, i).unwrap();
                crate::dataset::ImagePair {
                    name: format!("{i}"),
                    clean: p.clean,
                    rainy: p.rainy,
                }
            })
            .collect();
        let data = PairedDataset { pairs };
        let bank = build_bank(16, 16, &GridSpec::toy()).unwrap();
        let cfg = TrainConfig {
            model: DenoiserConfig {
                steps: 40,
                ..DenoiserConfig::toy()
            },
            iterations: 150,
            lr: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("m.sdck");
        let csv = dir.path().join("loss.csv");
        let (m1, r1) = train_loop(&data, &bank, &cfg, &ck, Some(&csv)).unwrap();
        let (m2, r2) = train_loop(&data, &bank, &cfg, dir.path().join("n.sdck"), None).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(r1.losses, r2.losses);
        let (head, tail) = r1.head_tail_means(30);
        assert!(tail < head, "{head} -> {tail}");
        assert!(ck.exists());
        let text = fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("iteration,loss,lr\n"));
        assert_eq!(text.lines().count(), 151);
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"iterations": 7, "perturbation": "spatial_iid"}"#).unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.perturbation, PerturbationMode::SpatialIid);
        assert_eq!(cfg.batch_size, 4);
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig { lr: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn spatial_mode_trains_without_a_matching_bank_step() {
        let m = DenoiserModel::new(tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = sample_perturbation(PerturbationMode::SpatialIid, 1, None, 8, 8, 3, &mut rng).unwrap();
        assert_eq!(eps.shape(), (8, 8, 3));
        let bank = build_bank(8, 8, &GridSpec::toy()).unwrap();
        let pairs = vec![(random_field(8, 8, 3, &mut rng), random_field(8, 8, 3, &mut rng))];
        let b = make_batch(&pairs, &bank, &m, PerturbationMode::SpatialIid, 0.125, &mut rng).unwrap();
        assert!(b[0].eps.energy() < 0.5 * 192.0);
    }
}
