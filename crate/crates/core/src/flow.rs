//! Linear-interpolation noising, the flow-matching regression loss and an
//! Euler sampler consistent with them.
//!
//! `x_t = (1 − t)·x0 + t·ε`, so `x0 − x_t = t·(x0 − ε)`: a predictor of the
//! literal target `x0 − x_t` is stepped with `Δ/t`, a predictor of the
//! velocity `x0 − ε` with `Δ`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::UnifiedModel;
use crate::tensorgrad::{Real, Tape, Tensor, Var};

/// Regression target of the velocity head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowTarget {
    /// `x0 − x_t`.
    #[default]
    Literal,
    /// `x0 − ε`, independent of `t`.
    Velocity,
}

impl FromStr for FlowTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "literal" => Ok(Self::Literal),
            "velocity" => Ok(Self::Velocity),
            other => Err(format!("unknown flow target {other:?} (literal|velocity)")),
        }
    }
}

impl fmt::Display for FlowTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Velocity => "velocity",
        })
    }
}

/// Uniform time grid from 1 down to `t_min`; the last step lands on 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSchedule {
    pub steps: usize,
    pub t_min: f64,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        Self {
            steps: 50,
            t_min: 0.02,
        }
    }
}

impl FlowSchedule {
    pub fn new(steps: usize, t_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::Domain(format!("t_min {t_min} outside (0, 1)")));
        }
        Ok(Self { steps, t_min })
    }

    /// `t_0 = 1 > t_1 > … > t_{steps−1} = t_min`.
    pub fn times(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![1.0];
        }
        let span = 1.0 - self.t_min;
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|k| if k + 1 == self.steps { self.t_min } else { 1.0 - span * k as f64 / last })
            .collect()
    }
}

/// `x_t = (1 − t)·x0 + t·ε`.
pub fn noise<T: Real>(x0: &Tensor<T>, t: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "noise",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
    }
    let (a, b) = (T::of(1.0 - t), T::of(t));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

/// Regression target for `kind`.
pub fn flow_target<T: Real>(x0: &Tensor<T>, x_t: &Tensor<T>, eps: &Tensor<T>, kind: FlowTarget) -> Result<Tensor<T>> {
    let other = match kind {
        FlowTarget::Literal => x_t,
        FlowTarget::Velocity => eps,
    };
    if x0.shape() != other.shape() {
        return Err(Error::Shape {
            op: "flow_target",
            lhs: x0.shape().to_vec(),
            rhs: other.shape().to_vec(),
        });
    }
    let data = x0.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
    Tensor::new(x0.shape(), data)
}

/// Mean squared error of `v_pred` against `target`.
pub fn fm_loss_against<T: Real>(tape: &mut Tape<T>, v_pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(v_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// `mean((v_pred − (x0 − x_t))²)`.
pub fn fm_loss<T: Real>(tape: &mut Tape<T>, v_pred: Var, x0: Var, x_t: Var) -> Result<Var> {
    let target = tape.sub(x0, x_t)?;
    fm_loss_against(tape, v_pred, target)
}

/// One Euler update from `t` to `t_next < t`.
pub fn euler_step<T: Real>(x: &Tensor<T>, v: &Tensor<T>, t: f64, t_next: f64, kind: FlowTarget) -> Result<Tensor<T>> {
    if x.shape() != v.shape() {
        return Err(Error::Shape {
            op: "euler_step",
            lhs: x.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let delta = t - t_next;
    let c = T::of(match kind {
        FlowTarget::Literal => delta / t,
        FlowTarget::Velocity => delta,
    });
    let data = x.data().iter().zip(v.data()).map(|(&a, &b)| a + c * b).collect();
    Tensor::new(x.shape(), data)
}

/// Integrates from `x` at `times[0]` down to 0, calling `predict(x, t)` once
/// per time point.
pub fn integrate<T: Real>(
    mut x: Tensor<T>,
    times: &[f64],
    kind: FlowTarget,
    mut predict: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    for (k, &t) in times.iter().enumerate() {
        let t_next = times.get(k + 1).copied().unwrap_or(0.0);
        let v = predict(&x, t)?;
        x = euler_step(&x, &v, t, t_next, kind)?;
        if !x.is_finite() {
            return Err(Error::NonFiniteState(k));
        }
    }
    Ok(x)
}

/// Standard-normal tensor from `rng`.
pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Generated latents (standardized space) for one caption.
pub fn sample_latents(model: &UnifiedModel, caption: &[usize], schedule: &FlowSchedule, seed: u64) -> Result<Tensor<f32>> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(c.n_gen(), c.gen_dim(), &mut rng);
    integrate(x, &schedule.times(), c.flow_target, |x, t| model.velocity(x, t, caption))
}

/// Generates one image: Gaussian latents at `t = 1`, Euler steps to 0,
/// then the exact decoder. Pixels are clamped to `[0, 1]`.
pub fn sample(model: &UnifiedModel, caption: &[usize], schedule: &FlowSchedule, seed: u64) -> Result<Image> {
    let z = sample_latents(model, caption, schedule, seed)?;
    let mut img = model.decode_gen(&model.destandardize(&z))?;
    img.clamp01();
    Ok(img)
}
