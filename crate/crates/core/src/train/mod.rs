//! Two training stages.
//!
//! Joint fine-tuning draws a mixed batch every step: detection samples
//! contribute the BCE and explanation terms, generation samples the flow
//! matching term. The alignment stage keeps a frozen snapshot of the model
//! as teacher, pulls projected generator features at one layer towards the
//! teacher's final detection tokens, and keeps training the flow term.
//!
//! Every sample gets its own tape; gradients are summed in sample order so
//! runs are bit-reproducible. The batch loss is the mean over samples.

mod optim;

pub use optim::{clip_global_norm, global_norm, AdamW};

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{flow_target, fm_loss_against, gaussian, noise};
use crate::image::Image;
use crate::kv_config;
use crate::model::{accumulate, Session, UnifiedModel, DETECTOR_HEAD_PREFIXES};
use crate::objectives::{det_loss, diga_loss, exp_loss, weighted_sum, LossWeights};
use crate::synthcorpus::{DetSample, GenSample, Vocab};
use crate::tensorgrad::{Tape, Tensor};

/// Which parameters stay fixed during alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Detection encoder, detection head and text head are frozen; the
    /// backbone keeps training.
    DetectorHeads,
    /// Everything except the velocity head and the projection is frozen.
    Backbone,
}

impl FreezePolicy {
    /// Per-parameter trainable flags for the alignment stage.
    pub fn trainable(self, model: &UnifiedModel) -> Vec<bool> {
        match self {
            FreezePolicy::DetectorHeads => model
                .params
                .select(|n| !DETECTOR_HEAD_PREFIXES.iter().any(|p| n.starts_with(p))),
            FreezePolicy::Backbone => model
                .params
                .select(|n| n.starts_with("vel_head.") || n.starts_with("diga.")),
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector-heads" => Ok(FreezePolicy::DetectorHeads),
            "backbone" => Ok(FreezePolicy::Backbone),
            _ => Err(Error::Domain(format!("unknown freeze policy {s:?}"))),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::DetectorHeads => "detector-heads",
            FreezePolicy::Backbone => "backbone",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub gduf_steps: usize,
    pub diga_steps: usize,
    /// Detection samples per step; with `gen_batch` this sets the mix ratio.
    pub det_batch: usize,
    pub gen_batch: usize,
    pub lambda_det: f64,
    pub lambda_exp: f64,
    pub lambda_fm: f64,
    pub lambda_diga: f64,
    /// Generator layer (1-based) whose latent rows are aligned; 0 picks
    /// the middle layer.
    pub diga_layer: usize,
    pub seed: u64,
    /// Held-out accuracy is logged every this many steps (0 disables).
    pub eval_every: usize,
    pub freeze: FreezePolicy,
    /// Draw half of the alignment targets from fake detection images.
    pub balanced_diga: bool,
    /// Lower bound of the training time distribution `t ~ U[t_min, 1]`.
    pub train_t_min: f64,
    /// Wall-clock seconds in the log; off keeps logs byte-reproducible.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            gduf_steps: 1000,
            diga_steps: 300,
            det_batch: 8,
            gen_batch: 8,
            lambda_det: w.lambda_det,
            lambda_exp: w.lambda_exp,
            lambda_fm: w.lambda_fm,
            lambda_diga: w.lambda_diga,
            diga_layer: 0,
            seed: 0,
            eval_every: 0,
            freeze: FreezePolicy::DetectorHeads,
            balanced_diga: false,
            train_t_min: 0.02,
            log_timing: false,
        }
    }
}

kv_config!(TrainConfig {
    lr: float,
    weight_decay: float,
    beta1: float,
    beta2: float,
    adam_eps: float,
    grad_clip: float,
    gduf_steps: value,
    diga_steps: value,
    det_batch: value,
    gen_batch: value,
    lambda_det: float,
    lambda_exp: float,
    lambda_fm: float,
    lambda_diga: float,
    diga_layer: value,
    seed: value,
    eval_every: value,
    freeze: value,
    balanced_diga: bool,
    train_t_min: float,
    log_timing: bool,
});

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_det: self.lambda_det,
            lambda_exp: self.lambda_exp,
            lambda_fm: self.lambda_fm,
            lambda_diga: self.lambda_diga,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.det_batch == 0 || self.gen_batch == 0 {
            return Err(Error::Domain("each step needs at least one sample of each task".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Domain("lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps < 0.0 {
            return Err(Error::Domain("adam betas must lie in [0, 1)".into()));
        }
        if !(self.train_t_min > 0.0 && self.train_t_min <= 1.0) {
            return Err(Error::Domain(format!("train_t_min {} outside (0, 1]", self.train_t_min)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.lr, self.beta1, self.beta2, self.adam_eps, self.weight_decay)
    }

    /// Resolved alignment layer for `layers` blocks.
    pub fn align_layer(&self, layers: usize) -> Result<usize> {
        let l = if self.diga_layer == 0 { layers.div_ceil(2) } else { self.diga_layer };
        if l == 0 || l > layers {
            return Err(Error::Domain(format!("alignment layer {l} outside 1..={layers}")));
        }
        Ok(l)
    }
}

/// One logged optimizer step. Absent losses print as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_det: Option<f64>,
    pub loss_exp: Option<f64>,
    pub loss_fm: Option<f64>,
    pub loss_diga: Option<f64>,
    pub lr: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,loss_det,loss_exp,loss_fm,loss_diga,lr,seconds";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                f(r.loss_det),
                f(r.loss_exp),
                f(r.loss_fm),
                f(r.loss_diga),
                r.lr,
                r.seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
            );
        }
        out
    }

    pub fn column(&self, pick: impl Fn(&LogRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter_map(pick).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UnifiedModel,
    pub log: TrainLog,
    /// `(step, held-out accuracy)` at the eval cadence.
    pub evals: Vec<(usize, f64)>,
}

/// Cycles through shuffled epochs of `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

type Grads = Vec<Option<Tensor<f32>>>;

/// Per-sample detection and explanation losses plus gradients of
/// `scale_det·L_det + scale_exp·L_exp`; zero-weight terms are left out.
fn det_sample_step(
    model: &UnifiedModel,
    trainable: &[bool],
    sample: &DetSample,
    scale_det: f64,
    scale_exp: f64,
) -> Result<(f64, f64, Option<Grads>)> {
    let mut tape = Tape::<f32>::new();
    let mut s = Session::new(&mut tape, &model.params, Some(trainable));
    let out = model.detect_forward(&mut s, &sample.image, &sample.instruction, Some(&sample.answer))?;
    let det = det_loss(s.tape, out.fake_logit, &[sample.label as f64])?;
    let answer_logits = out
        .answer_logits
        .ok_or_else(|| Error::Data("detection sample has an empty answer".into()))?;
    let exp = exp_loss(s.tape, answer_logits, &sample.answer)?;
    let (ld, le) = (s.tape.value(det).item() as f64, s.tape.value(exp).item() as f64);
    let mut terms = Vec::new();
    if scale_det > 0.0 {
        terms.push((det, scale_det));
    }
    if scale_exp > 0.0 {
        terms.push((exp, scale_exp));
    }
    if terms.is_empty() || !(ld.is_finite() && le.is_finite()) {
        return Ok((ld, le, None));
    }
    let total = weighted_sum(s.tape, &terms)?;
    s.tape.backward(total)?;
    Ok((ld, le, Some(s.grads())))
}

/// Noised training pair for one image.
fn flow_pair(model: &UnifiedModel, img: &Image, t_min: f64, rng: &mut ChaCha8Rng) -> Result<(f64, Tensor<f32>, Tensor<f32>)> {
    let c = &model.config;
    let x0 = model.standardize(&model.encode_gen(img)?);
    let eps = gaussian(c.n_gen(), c.gen_dim(), rng);
    let t = t_min + (1.0 - t_min) * rng.gen::<f64>();
    let x_t = noise(&x0, t, &eps)?;
    let target = flow_target(&x0, &x_t, &eps, c.flow_target)?;
    Ok((t, x_t, target))
}

/// Per-sample flow loss and, with `align`, the alignment loss against
/// teacher tokens `z_d`, plus gradients of the scaled sum.
#[allow(clippy::too_many_arguments)]
fn gen_sample_step(
    model: &UnifiedModel,
    trainable: &[bool],
    img: &Image,
    caption: &[usize],
    scale_fm: f64,
    align: Option<(usize, &Tensor<f32>, f64)>,
    t_min: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Option<f64>, Option<Grads>)> {
    let (t, x_t, target) = flow_pair(model, img, t_min, rng)?;
    let mut tape = Tape::<f32>::new();
    let mut s = Session::new(&mut tape, &model.params, Some(trainable));
    let x = s.constant(x_t);
    let out = model.gen_forward(&mut s, x, t, caption, align.map(|a| a.0))?;
    let target = s.constant(target);
    let fm = fm_loss_against(s.tape, out.velocity, target)?;
    let lf = s.tape.value(fm).item() as f64;
    let mut terms = Vec::new();
    if scale_fm > 0.0 {
        terms.push((fm, scale_fm));
    }
    let mut la = None;
    if let (Some((_, z_d, scale)), Some(z_g)) = (align, out.captured) {
        let proj = model.diga_project(&mut s, z_g)?;
        let zd = s.constant(z_d.clone());
        let al = diga_loss(s.tape, proj, zd)?;
        la = Some(s.tape.value(al).item() as f64);
        terms.push((al, scale));
    }
    if terms.is_empty() || !lf.is_finite() || la.is_some_and(|v| !v.is_finite()) {
        return Ok((lf, la, None));
    }
    let total = weighted_sum(s.tape, &terms)?;
    s.tape.backward(total)?;
    Ok((lf, la, Some(s.grads())))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn breakdown(parts: &[(&str, Option<f64>)]) -> String {
    parts
        .iter()
        .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Share of samples whose thresholded fake probability matches the label.
pub fn detection_accuracy(model: &UnifiedModel, samples: &[DetSample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        let p = model.fake_probability(&s.image, &s.instruction)?;
        correct += ((p > 0.5) as u8 == s.label) as usize;
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn step_update(model: &mut UnifiedModel, opt: &mut AdamW, mut grads: Grads, clip: f64) {
    clip_global_norm(&mut grads, clip);
    opt.step(&mut model.params, &grads);
}

/// Stage one. Fits the latent standardization on the generation images,
/// then runs `cfg.gduf_steps` optimizer steps.
pub fn train_gduf(
    mut model: UnifiedModel,
    det: &[DetSample],
    gen: &[GenSample],
    cfg: &TrainConfig,
    eval_set: Option<&[DetSample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if det.is_empty() || gen.is_empty() {
        return Err(Error::Data("joint training needs detection and generation samples".into()));
    }
    model.fit_latent_stats(gen.iter().map(|g| &g.image))?;
    let trainable = model.all_trainable();
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut det_order, mut gen_order) = (EpochSampler::new(det.len()), EpochSampler::new(gen.len()));
    let (nd, ng) = (cfg.det_batch as f64, cfg.gen_batch as f64);
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut evals = Vec::new();

    for step in 1..=cfg.gduf_steps {
        let mut grads: Grads = vec![None; model.params.len()];
        let (mut dl, mut el, mut fl) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.det_batch {
            let s = &det[det_order.next(&mut rng)];
            let (ld, le, g) = det_sample_step(&model, &trainable, s, cfg.lambda_det / nd, cfg.lambda_exp / nd)?;
            dl.push(ld);
            el.push(le);
            if let Some(g) = g {
                accumulate(&mut grads, g);
            }
        }
        for _ in 0..cfg.gen_batch {
            let s = &gen[gen_order.next(&mut rng)];
            let (lf, _, g) = gen_sample_step(
                &model,
                &trainable,
                &s.image,
                &s.caption,
                cfg.lambda_fm / ng,
                None,
                cfg.train_t_min,
                &mut rng,
            )?;
            fl.push(lf);
            if let Some(g) = g {
                accumulate(&mut grads, g);
            }
        }
        let (ld, le, lf) = (mean(&dl), mean(&el), mean(&fl));
        if !(ld.is_finite() && le.is_finite() && lf.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown(&[("loss_det", Some(ld)), ("loss_exp", Some(le)), ("loss_fm", Some(lf))]),
            });
        }
        step_update(&mut model, &mut opt, grads, cfg.grad_clip);
        log.rows.push(LogRow {
            step,
            loss_det: Some(ld),
            loss_exp: Some(le),
            loss_fm: Some(lf),
            loss_diga: None,
            lr: cfg.lr,
            seconds: cfg.log_timing.then(|| start.elapsed().as_secs_f64()),
        });
        log::debug!("gduf step {step}: det {ld:.4} exp {le:.4} fm {lf:.4}");
        if let Some(set) = eval_set.filter(|_| cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let acc = detection_accuracy(&model, set)?;
            log::info!("gduf step {step}: held-out accuracy {acc:.4}");
            evals.push((step, acc));
        }
    }
    Ok(TrainOutcome { model, log, evals })
}

/// Stage two. `fakes` supplies the fake half of the alignment targets when
/// `cfg.balanced_diga` is on; otherwise only real generation images are
/// used.
pub fn train_diga(mut model: UnifiedModel, gen: &[GenSample], fakes: &[DetSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layer = cfg.align_layer(model.config.layers)?;
    if model.config.n_det() != model.config.n_gen() {
        return Err(Error::Layout(format!(
            "alignment pairs tokens one to one, but there are {} detection and {} generation tokens",
            model.config.n_det(),
            model.config.n_gen()
        )));
    }
    let fakes: Vec<&DetSample> = fakes.iter().filter(|s| s.label == 1).collect();
    if gen.is_empty() || (cfg.balanced_diga && fakes.is_empty()) {
        return Err(Error::Data("alignment needs real (and, when balanced, fake) images".into()));
    }
    let teacher = model.clone();
    let instruction = Vocab::new().instruction(0);
    let trainable = cfg.freeze.trainable(&model);
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut real_order, mut fake_order) = (EpochSampler::new(gen.len()), EpochSampler::new(fakes.len()));
    let mut cache: HashMap<(bool, usize), Tensor<f32>> = HashMap::new();
    let n = cfg.gen_batch as f64;
    let start = Instant::now();
    let mut log = TrainLog::default();

    for step in 1..=cfg.diga_steps {
        let mut grads: Grads = vec![None; model.params.len()];
        let (mut fl, mut al) = (Vec::new(), Vec::new());
        for k in 0..cfg.gen_batch {
            let fake = cfg.balanced_diga && k % 2 == 1;
            let (key, img, caption) = if fake {
                let i = fake_order.next(&mut rng);
                ((true, i), &fakes[i].image, &fakes[i].caption)
            } else {
                let i = real_order.next(&mut rng);
                ((false, i), &gen[i].image, &gen[i].caption)
            };
            if !cache.contains_key(&key) {
                let mut tape = Tape::<f32>::new();
                let mut s = Session::new(&mut tape, &teacher.params, None);
                let out = teacher.detect_forward(&mut s, img, &instruction, None)?;
                cache.insert(key, s.tape.value(out.z_d).clone());
            }
            let align = (cfg.lambda_diga > 0.0).then(|| (layer, &cache[&key], cfg.lambda_diga / n));
            let (lf, la, g) = gen_sample_step(&model, &trainable, img, caption, 1.0 / n, align, cfg.train_t_min, &mut rng)?;
            fl.push(lf);
            al.extend(la);
            if let Some(g) = g {
                accumulate(&mut grads, g);
            }
        }
        let lf = mean(&fl);
        let la = (!al.is_empty()).then(|| mean(&al));
        if !lf.is_finite() || la.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown(&[("loss_fm", Some(lf)), ("loss_diga", la)]),
            });
        }
        step_update(&mut model, &mut opt, grads, cfg.grad_clip);
        log.rows.push(LogRow {
            step,
            loss_det: None,
            loss_exp: None,
            loss_fm: Some(lf),
            loss_diga: la,
            lr: cfg.lr,
            seconds: cfg.log_timing.then(|| start.elapsed().as_secs_f64()),
        });
        log::debug!("diga step {step}: fm {lf:.4} align {la:?}");
    }
    Ok(TrainOutcome {
        model,
        log,
        evals: Vec::new(),
    })
}

#[cfg(test)]
mod tests;
