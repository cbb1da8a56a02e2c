//! Denoising score matching with Adam.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::WindowSample;
use crate::error::{shape_mismatch, Error, Result};
use crate::graph::ChebBasis;
use crate::model::{to_model_layout, PositionMarkers, ScoreInput, ScoreModel};
use crate::rng::{self, Stream};
use crate::sde::{perturb_sample, SdeKind, SdeSpec};
use crate::tensor::Tensor;

/// Which forward kernel perturbs the training targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    SubVp,
    St,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub t_min: f64,
    pub kernel_mode: KernelMode,
    /// Global L2 gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Random subset of training windows visited per epoch.
    pub max_windows_per_epoch: Option<usize>,
    /// Evenly spaced subset of validation windows used for the loss.
    pub max_val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            t_min: 1e-3,
            kernel_mode: KernelMode::SubVp,
            grad_clip: Some(1.0),
            max_windows_per_epoch: None,
            max_val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(1e-5..=1e-1).contains(&self.learning_rate) {
            return bad(format!("learning_rate {} outside [1e-5, 1e-1]", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad(format!("t_min {} outside (0, 1)", self.t_min));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.max_windows_per_epoch == Some(0) || self.max_val_windows == Some(0) {
            return bad("window caps must be positive".into());
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_mismatch(
            "adam_step",
            &[params.len(), state.m.len()],
            &[grads.len()],
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_mismatch("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Diffusion times, noise and perturbed futures for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DsmDraw {
    /// `[B, H, N, D]`
    pub x_tilde: Tensor,
    /// `[B, L, N, D]`
    pub history: Tensor,
    pub markers: Vec<PositionMarkers>,
    pub t: Vec<f64>,
    /// Standard normal noise, model layout `[B·N, D, H]`.
    pub noise: Tensor,
    /// Kernel standard deviation per element, model layout.
    pub sigma: Tensor,
    /// Output scale of the network per element, model layout: the score is
    /// `−ε̂ · inv_sigma_out`.
    pub inv_sigma_out: Tensor,
}

fn stack(parts: impl Iterator<Item = Tensor>, shape: &[usize]) -> Tensor {
    let mut data = Vec::new();
    let mut count = 0;
    for p in parts {
        data.extend_from_slice(p.data());
        count += 1;
    }
    let mut full = vec![count];
    full.extend_from_slice(shape);
    Tensor::from_vec(&full, data)
}

/// Draw `t ~ U(t_min, 1)` and `Z ~ N(0, I)` per window and perturb the
/// futures with the forward kernel of `kernel`.
pub fn draw_dsm(batch: &[&WindowSample], kernel: &SdeSpec, t_min: f64, rng: &mut Stream) -> Result<DsmDraw> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let fshape = first.future.shape().to_vec();
    let hshape = first.history.shape().to_vec();
    let sub = kernel.to_sub_vp();
    let mut t = Vec::with_capacity(batch.len());
    let mut x_tilde = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len());
    let mut sigma = Vec::with_capacity(batch.len());
    let mut inv_out = Vec::with_capacity(batch.len());
    for w in batch {
        if w.future.shape() != fshape.as_slice() || w.history.shape() != hshape.as_slice() {
            return Err(shape_mismatch("dsm batch", w.future.shape(), &fshape));
        }
        let ti = t_min + (1.0 - t_min) * rng.random::<f64>();
        let z = rng::normal_tensor(rng, &fshape);
        let p = perturb_sample(kernel, &w.future, ti, &z, 1)?;
        let s_out = sub.schedule().subvp_std(ti)?;
        t.push(ti);
        x_tilde.push(p.x_tilde);
        noise.push(z);
        sigma.push(p.sigma);
        inv_out.push(Tensor::full(&fshape, 1.0 / s_out));
    }
    let to_model = |parts: Vec<Tensor>| to_model_layout(&stack(parts.into_iter(), &fshape));
    Ok(DsmDraw {
        x_tilde: stack(x_tilde.into_iter(), &fshape),
        history: stack(batch.iter().map(|w| w.history.clone()), &hshape),
        markers: batch.iter().map(|w| w.markers.clone()).collect(),
        t,
        noise: to_model(noise)?,
        sigma: to_model(sigma)?,
        inv_sigma_out: to_model(inv_out)?,
    })
}

/// `mean(σ·s + Z)²`, i.e. the σ²-weighted score-matching error, for a
/// recorded score `s` in model layout.
pub fn dsm_loss_from_score(tape: &mut Tape, score: Var, draw: &DsmDraw) -> Result<Var> {
    let weighted = tape.mul_const(score, draw.sigma.clone())?;
    let resid = tape.add_const(weighted, &draw.noise)?;
    tape.mean_sq(resid)
}

/// Record the network score `−ε̂/σ_out(t)` for a draw.
pub fn record_score(
    model: &ScoreModel,
    tape: &mut Tape,
    vars: &[Var],
    cheb: &ChebBasis,
    draw: &DsmDraw,
) -> Result<Var> {
    let input = ScoreInput {
        x_tilde: &draw.x_tilde,
        history: &draw.history,
        markers: &draw.markers,
        t: &draw.t,
    };
    let eps = model.record(tape, vars, cheb, &input)?;
    tape.mul_const(eps, draw.inv_sigma_out.scale(-1.0))
}

/// Denoising score-matching loss of `model` on one batch.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss(
    model: &ScoreModel,
    tape: &mut Tape,
    vars: &[Var],
    cheb: &ChebBasis,
    batch: &[&WindowSample],
    kernel: &SdeSpec,
    t_min: f64,
    rng: &mut Stream,
) -> Result<Var> {
    let draw = draw_dsm(batch, kernel, t_min, rng)?;
    let score = record_score(model, tape, vars, cheb, &draw)?;
    dsm_loss_from_score(tape, score, &draw)
}

/// One row of the loss curve; epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: ScoreModel,
    pub best_epoch: usize,
    pub curve: Vec<LossRow>,
}

const VAL_STREAM: u64 = u64::MAX;
const EVAL_TRAIN_STREAM: u64 = u64::MAX - 1;
const SHUFFLE_STREAM: u64 = u64::MAX - 2;

/// Mean DSM loss over `windows` with noise keyed by `(seed, stream, batch)`,
/// without gradients.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_loss(
    model: &ScoreModel,
    cheb: &ChebBasis,
    windows: &[&WindowSample],
    kernel: &SdeSpec,
    t_min: f64,
    batch_size: usize,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (bi, chunk) in windows.chunks(batch_size.max(1)).enumerate() {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let mut r = rng::stream(seed, stream, bi as u64);
        let loss = dsm_loss(model, &mut tape, &vars, cheb, chunk, kernel, t_min, &mut r)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

fn evenly_spaced<'a>(windows: &'a [WindowSample], cap: Option<usize>) -> Vec<&'a WindowSample> {
    match cap {
        Some(c) if c < windows.len() => (0..c).map(|i| &windows[i * windows.len() / c]).collect(),
        _ => windows.iter().collect(),
    }
}

fn check_kernel(cfg: &TrainConfig, kernel: &SdeSpec) -> Result<()> {
    let ok = match cfg.kernel_mode {
        KernelMode::SubVp => kernel.kind() == SdeKind::SubVp,
        KernelMode::St => kernel.kind() == SdeKind::St,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "kernel mode {:?} does not match SDE {:?}",
            cfg.kernel_mode,
            kernel.kind()
        )))
    }
}

/// Epochs of shuffled mini-batch DSM + Adam, keeping the parameters with
/// the lowest validation loss. `on_epoch` sees every loss-curve row as it
/// is produced.
///
/// Fails with [`Error::Diverged`] when the validation loss is non-finite or
/// above ten times its initial value for three consecutive epochs.
#[allow(clippy::too_many_arguments)]
pub fn train(
    init: ScoreModel,
    cfg: &TrainConfig,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    cheb: &ChebBasis,
    kernel: &SdeSpec,
    mut on_epoch: impl FnMut(&LossRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_kernel(cfg, kernel)?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let val: Vec<&WindowSample> = evenly_spaced(val_windows, cfg.max_val_windows);
    // the epoch-0 training loss is measured on as many windows as validation
    let train_probe: Vec<&WindowSample> = evenly_spaced(train_windows, Some(val.len()));
    let eval = |m: &ScoreModel, ws: &[&WindowSample], stream: u64| {
        evaluate_loss(m, cheb, ws, kernel, cfg.t_min, cfg.batch_size, cfg.seed, stream)
    };

    let mut model = init;
    let initial_val = eval(&model, &val, VAL_STREAM)?;
    let row0 = LossRow {
        epoch: 0,
        train_loss: eval(&model, &train_probe, EVAL_TRAIN_STREAM)?,
        val_loss: initial_val,
    };
    on_epoch(&row0);
    let mut curve = vec![row0];
    let mut best = model.clone();
    let mut best_val = initial_val;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut adam = AdamState::new(model.params().tensors());
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let take = cfg.max_windows_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut sum = 0.0;
        let mut seen = 0;
        for (bi, idx) in order[..take].chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train_windows[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let mut r = rng::stream(cfg.seed, epoch as u64, bi as u64);
            let loss = match dsm_loss(&model, &mut tape, &vars, cheb, &batch, kernel, cfg.t_min, &mut r) {
                Err(Error::NonFiniteActivation(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        val_loss: f64::NAN,
                    })
                }
                other => other?,
            };
            let lv = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut g, c);
            }
            adam_step(model.params_mut().tensors_mut(), &g, &mut adam, cfg.learning_rate)?;
            sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let val_loss = match eval(&model, &val, VAL_STREAM) {
            Err(Error::NonFiniteActivation(_)) => f64::NAN,
            other => other?,
        };
        let row = LossRow {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
        };
        on_epoch(&row);
        curve.push(row);
        if !val_loss.is_finite() || val_loss > 10.0 * initial_val {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                return Err(Error::Diverged { epoch, val_loss });
            }
        } else {
            bad_epochs = 0;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        curve,
    })
}
