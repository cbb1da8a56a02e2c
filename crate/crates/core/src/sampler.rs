//! Reverse-time Euler–Maruyama sampling, single-SDE or with per-step
//! selection between the ST and sub-VP reverse updates.
//!
//! Ensembles are laid out `[S, H, N, D]`. Noise for sample `s` at step `k`
//! comes from the stream `(seed, s, k)`, so ensembles do not depend on batch
//! sizes or evaluation order, and runs with equal seeds share their noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{Normalizer, WindowSample};
use crate::error::{shape_mismatch, Error, Result};
use crate::graph::ChebBasis;
use crate::model::{score_forward, PositionMarkers, ScoreInput, ScoreModel};
use crate::rng;
use crate::sde::{BetaSchedule, SdeKind, SdeSpec};
use crate::tensor::Tensor;

/// Node axis of ensemble tensors `[S, H, N, D]`.
pub const NODE_AXIS: usize = 2;
/// States with larger magnitude count as diverged.
pub const STATE_LIMIT: f64 = 1e6;
const INIT_STEP: u64 = u64::MAX;

/// Score of a batch of states `[S, …]` at diffusion time `t`.
pub trait ScoreFn {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> ScoreFn for F {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// The network score for one conditioning window, evaluated in chunks of
/// at most `max_batch` samples.
pub struct ConditionedScore<'a> {
    pub model: &'a ScoreModel,
    pub cheb: &'a ChebBasis,
    /// `[L, N, D]`, normalized.
    pub history: &'a Tensor,
    pub markers: &'a PositionMarkers,
    pub schedule: BetaSchedule,
    pub max_batch: usize,
}

impl ScoreFn for ConditionedScore<'_> {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let s = x.dim(0);
        let per = x.len() / s.max(1);
        let mut inner = x.shape().to_vec();
        let mut out = Vec::with_capacity(x.len());
        for start in (0..s).step_by(self.max_batch.max(1)) {
            let b = self.max_batch.max(1).min(s - start);
            inner[0] = b;
            let chunk = Tensor::from_vec(&inner, x.data()[start * per..(start + b) * per].to_vec());
            let mut hist = Vec::with_capacity(b * self.history.len());
            for _ in 0..b {
                hist.extend_from_slice(self.history.data());
            }
            let mut hshape = vec![b];
            hshape.extend_from_slice(self.history.shape());
            let hist = Tensor::from_vec(&hshape, hist);
            let markers = vec![self.markers.clone(); b];
            let ts = vec![t; b];
            let input = ScoreInput {
                x_tilde: &chunk,
                history: &hist,
                markers: &markers,
                t: &ts,
            };
            let sched = self.schedule;
            let sc = score_forward(self.model, self.cheb, &input, |t| sched.subvp_std(t))?;
            out.extend_from_slice(sc.data());
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    SubVpOnly,
    StOnly,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_samples: usize,
    pub mode: SamplerMode,
    /// Return the noise-free mean at the final step.
    pub denoise_last: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            n_samples: 30,
            mode: SamplerMode::Adaptive,
            denoise_last: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "n_steps={} and n_samples={} must be positive",
                self.n_steps, self.n_samples
            )));
        }
        Ok(())
    }
}

/// `x − (drift − g²·score)·dt`, plus `g·sqrt(dt)·noise` when noise is given.
pub fn euler_update(
    x: &Tensor,
    drift: &Tensor,
    g: f64,
    score: &Tensor,
    noise: Option<&Tensor>,
    dt: f64,
) -> Result<Tensor> {
    if drift.shape() != x.shape() || score.shape() != x.shape() {
        return Err(shape_mismatch("reverse step", x.shape(), score.shape()));
    }
    let g2 = g * g;
    let mut out = x.clone();
    for ((o, &d), &s) in out.data_mut().iter_mut().zip(drift.data()).zip(score.data()) {
        *o -= (d - g2 * s) * dt;
    }
    if let Some(z) = noise {
        out.axpy(g * dt.sqrt(), z)?;
    }
    Ok(out)
}

/// One reverse step of `spec` from `t` to `t − dt` given the score at
/// `(x, t)`; `noise = None` returns the mean of the update.
pub fn reverse_step_with_score(
    spec: &SdeSpec,
    x: &Tensor,
    t: f64,
    score: &Tensor,
    noise: Option<&Tensor>,
    dt: f64,
) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    let drift = spec.drift(x, t, NODE_AXIS)?;
    euler_update(x, &drift, spec.diffusion(t)?, score, noise, dt)
}

pub fn reverse_step(
    spec: &SdeSpec,
    x: &Tensor,
    t: f64,
    score_fn: &dyn ScoreFn,
    noise: Option<&Tensor>,
    dt: f64,
) -> Result<Tensor> {
    let s = score_fn.score(x, t)?;
    reverse_step_with_score(spec, x, t, &s, noise, dt)
}

fn check_state(x: &Tensor, step: usize) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite() && v.abs() <= STATE_LIMIT) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn draw_stacked(seed: u64, n_samples: usize, key: u64, sample_shape: &[usize]) -> Tensor {
    let per: usize = sample_shape.iter().product();
    let mut data = Vec::with_capacity(n_samples * per);
    for s in 0..n_samples {
        data.extend(rng::normal_vec(&mut rng::stream(seed, s as u64, key), per));
    }
    let mut shape = vec![n_samples];
    shape.extend_from_slice(sample_shape);
    Tensor::from_vec(&shape, data)
}

/// Mean over the leading sample axis.
pub fn ensemble_mean(samples: &Tensor) -> Tensor {
    let s = samples.dim(0);
    let per = samples.len() / s.max(1);
    let mut out = vec![0.0; per];
    for chunk in samples.data().chunks(per) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= s as f64);
    Tensor::from_vec(&samples.shape()[1..], out)
}

fn mae_of_mean(samples: &Tensor, labels: &Tensor) -> Result<f64> {
    let m = ensemble_mean(samples);
    if m.shape() != labels.shape() {
        return Err(shape_mismatch("adaptive labels", labels.shape(), m.shape()));
    }
    Ok(m.data()
        .iter()
        .zip(labels.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / m.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    /// `[S, H, N, D]`
    pub samples: Tensor,
    /// Running-best ensemble mean `[H, N, D]` (adaptive mode with labels).
    pub best_tracked: Option<Tensor>,
    /// Ensemble-mean MAE of the chosen update at each step, first step first.
    pub step_metric: Vec<f64>,
    /// Running minimum of `step_metric`.
    pub best_metric: Vec<f64>,
    /// SDE chosen at each step (adaptive mode).
    pub selected: Vec<SdeKind>,
}

/// Single-SDE reverse trajectory from `N(0, I)` at `t = 1` down to `t = 0`.
pub fn reverse_trajectory(
    spec: &SdeSpec,
    score_fn: &dyn ScoreFn,
    cfg: &SamplerConfig,
    sample_shape: &[usize],
    seed: u64,
) -> Result<ForecastEnsemble> {
    cfg.validate()?;
    let k_steps = cfg.n_steps;
    let dt = 1.0 / k_steps as f64;
    let mut x = draw_stacked(seed, cfg.n_samples, INIT_STEP, sample_shape);
    for k in (1..=k_steps).rev() {
        let t = k as f64 * dt;
        let last = k == 1 && cfg.denoise_last;
        let z = (!last).then(|| draw_stacked(seed, cfg.n_samples, k as u64, sample_shape));
        x = reverse_step(spec, &x, t, score_fn, z.as_ref(), dt)?;
        check_state(&x, k_steps - k + 1)?;
    }
    Ok(ForecastEnsemble {
        samples: x,
        best_tracked: None,
        step_metric: Vec::new(),
        best_metric: Vec::new(),
        selected: Vec::new(),
    })
}

/// Source of the per-step SDE choice in adaptive sampling.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Compare both candidates against ground truth `[H, N, D]` each step.
    Oracle(&'a Tensor),
    /// Replay a fixed schedule (first step first); `labels`, when present,
    /// are only used to record metrics.
    Schedule {
        schedule: &'a [SdeKind],
        labels: Option<&'a Tensor>,
    },
}

/// Reverse sampling that advances both the ST and the sub-VP update from
/// the shared state with shared noise and keeps one of them per step. In
/// oracle mode the candidate whose ensemble mean has lower MAE wins (ties go
/// to sub-VP) and the best ensemble mean seen so far is tracked.
pub fn adaptive_reverse(
    st: &SdeSpec,
    sub: &SdeSpec,
    score_fn: &dyn ScoreFn,
    cfg: &SamplerConfig,
    sample_shape: &[usize],
    selection: Selection<'_>,
    seed: u64,
) -> Result<ForecastEnsemble> {
    cfg.validate()?;
    let k_steps = cfg.n_steps;
    if let Selection::Schedule { schedule, .. } = selection {
        if schedule.len() != k_steps {
            return Err(Error::InvalidConfig(format!(
                "selection schedule has {} steps, sampler has {k_steps}",
                schedule.len()
            )));
        }
    }
    let dt = 1.0 / k_steps as f64;
    let mut x = draw_stacked(seed, cfg.n_samples, INIT_STEP, sample_shape);
    let mut out = ForecastEnsemble {
        samples: Tensor::zeros(&[0]),
        best_tracked: None,
        step_metric: Vec::with_capacity(k_steps),
        best_metric: Vec::with_capacity(k_steps),
        selected: Vec::with_capacity(k_steps),
    };
    let mut best = f64::INFINITY;
    for k in (1..=k_steps).rev() {
        let idx = k_steps - k;
        let t = k as f64 * dt;
        let last = k == 1 && cfg.denoise_last;
        let z = (!last).then(|| draw_stacked(seed, cfg.n_samples, k as u64, sample_shape));
        let s = score_fn.score(&x, t)?;
        let cand_sub = reverse_step_with_score(sub, &x, t, &s, z.as_ref(), dt)?;
        let cand_st = reverse_step_with_score(st, &x, t, &s, z.as_ref(), dt)?;
        let (kind, metric, labels) = match selection {
            Selection::Oracle(labels) => {
                let m_sub = mae_of_mean(&cand_sub, labels)?;
                let m_st = mae_of_mean(&cand_st, labels)?;
                if m_st < m_sub {
                    (SdeKind::St, Some(m_st), Some(labels))
                } else {
                    (SdeKind::SubVp, Some(m_sub), Some(labels))
                }
            }
            Selection::Schedule { schedule, labels } => (schedule[idx], None, labels),
        };
        x = if kind == SdeKind::St { cand_st } else { cand_sub };
        check_state(&x, idx + 1)?;
        out.selected.push(kind);
        if let Some(labels) = labels {
            let m = match metric {
                Some(m) => m,
                None => mae_of_mean(&x, labels)?,
            };
            if m < best {
                best = m;
                out.best_tracked = Some(ensemble_mean(&x));
            }
            out.step_metric.push(m);
            out.best_metric.push(best);
        }
    }
    out.samples = x;
    Ok(out)
}

/// Per-step majority vote over selection traces; ties go to sub-VP.
pub fn calibrate_schedule(traces: &[Vec<SdeKind>]) -> Result<Vec<SdeKind>> {
    let first = traces.first().ok_or(Error::MissingLabels)?;
    let k = first.len();
    if traces.iter().any(|t| t.len() != k) {
        return Err(Error::InvalidConfig("selection traces differ in length".into()));
    }
    Ok((0..k)
        .map(|i| {
            let st = traces.iter().filter(|t| t[i] == SdeKind::St).count();
            if 2 * st > traces.len() {
                SdeKind::St
            } else {
                SdeKind::SubVp
            }
        })
        .collect())
}

/// Labels and calibration available to [`forecast`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForecastGuide<'a> {
    /// Use the window's own future (normalized) as oracle labels.
    pub oracle: bool,
    pub schedule: Option<&'a [SdeKind]>,
}

/// Sample a forecast ensemble for one (raw-scale) window and map it back to
/// raw units with `normalizer`.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    model: &ScoreModel,
    cheb: &ChebBasis,
    window: &WindowSample,
    normalizer: &Normalizer,
    st: &SdeSpec,
    cfg: &SamplerConfig,
    guide: ForecastGuide<'_>,
    seed: u64,
) -> Result<ForecastEnsemble> {
    let mc = model.config();
    let want_h = [mc.history_len, mc.n_nodes, mc.features];
    let want_f = [mc.horizon, mc.n_nodes, mc.features];
    if window.history.shape() != want_h || window.future.shape() != want_f {
        return Err(Error::ConfigMismatch(format!(
            "window shapes {:?}/{:?} do not match model {:?}/{:?}",
            window.history.shape(),
            window.future.shape(),
            want_h,
            want_f
        )));
    }
    if normalizer.mean.len() != mc.features {
        return Err(Error::ConfigMismatch(format!(
            "normalizer has {} features, model {}",
            normalizer.mean.len(),
            mc.features
        )));
    }
    let history = normalizer.apply(&window.history)?;
    let score = ConditionedScore {
        model,
        cheb,
        history: &history,
        markers: &window.markers,
        schedule: *st.schedule(),
        max_batch: 16,
    };
    let sub = st.to_sub_vp();
    let mut ens = match cfg.mode {
        SamplerMode::SubVpOnly => reverse_trajectory(&sub, &score, cfg, &want_f, seed)?,
        SamplerMode::StOnly => reverse_trajectory(st, &score, cfg, &want_f, seed)?,
        SamplerMode::Adaptive => {
            let labels = if guide.oracle {
                Some(normalizer.apply(&window.future)?)
            } else {
                None
            };
            let selection = match (guide.schedule, labels.as_ref()) {
                (Some(schedule), labels) => Selection::Schedule { schedule, labels },
                (None, Some(l)) => Selection::Oracle(l),
                (None, None) => return Err(Error::MissingLabels),
            };
            adaptive_reverse(st, &sub, &score, cfg, &want_f, selection, seed)?
        }
    };
    ens.samples = normalizer.invert(&ens.samples)?;
    if let Some(b) = ens.best_tracked.take() {
        ens.best_tracked = Some(normalizer.invert(&b)?);
    }
    Ok(ens)
}
