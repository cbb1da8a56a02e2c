//! Multivariate series over a sensor graph: chronological splits, sliding
//! windows with temporal markers, z-score normalization and a synthetic
//! generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{neighbor_mean_effect, Edge, Graph};
use crate::model::{PositionMarkers, DAYS_PER_WEEK};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS_PER_DAY: usize = 288;

/// Values `[T, N, D]` plus the calendar needed to derive markers. `start`
/// is the absolute index of the first row, so markers survive splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    values: Tensor,
    steps_per_day: usize,
    start_weekday: usize,
    start: usize,
}

impl SeriesDataset {
    pub fn new(values: Tensor, steps_per_day: usize, start_weekday: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(shape_mismatch("series", values.shape(), &[0, 0, 0]));
        }
        if steps_per_day == 0 || start_weekday >= DAYS_PER_WEEK {
            return Err(Error::InvalidArgument(format!(
                "steps_per_day={steps_per_day}, start_weekday={start_weekday}"
            )));
        }
        if !values.is_finite() {
            return Err(Error::InvalidArgument("series contains non-finite values".into()));
        }
        Ok(Self {
            values,
            steps_per_day,
            start_weekday,
            start: 0,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.values.dim(1)
    }

    pub fn features(&self) -> usize {
        self.values.dim(2)
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn start_weekday(&self) -> usize {
        self.start_weekday
    }

    /// Absolute index of the first row in the original series.
    pub fn start(&self) -> usize {
        self.start
    }

    /// `(time_of_day, day_of_week)` of absolute step `index`.
    pub fn marker(&self, index: usize) -> (usize, usize) {
        (
            index % self.steps_per_day,
            (self.start_weekday + index / self.steps_per_day) % DAYS_PER_WEEK,
        )
    }

    /// Rows `begin..end` (relative), keeping absolute positions.
    pub fn slice(&self, begin: usize, end: usize) -> Result<Self> {
        if begin > end || end > self.len() {
            return Err(Error::IndexOutOfRange {
                index: end,
                len: self.len(),
            });
        }
        let row = self.n_nodes() * self.features();
        let data = self.values.data()[begin * row..end * row].to_vec();
        Ok(Self {
            values: Tensor::from_vec(&[end - begin, self.n_nodes(), self.features()], data),
            steps_per_day: self.steps_per_day,
            start_weekday: self.start_weekday,
            start: self.start + begin,
        })
    }

    /// Rows `begin..end` as a `[len, N, D]` tensor.
    pub fn rows(&self, begin: usize, end: usize) -> Tensor {
        let row = self.n_nodes() * self.features();
        Tensor::from_vec(
            &[end - begin, self.n_nodes(), self.features()],
            self.values.data()[begin * row..end * row].to_vec(),
        )
    }

    fn with_values(&self, values: Tensor) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Chronological contiguous split by integer ratios; the last part takes
/// the rounding remainder. Every part must hold at least `min_len` steps.
pub fn split(
    ds: &SeriesDataset,
    ratios: [usize; 3],
    min_len: usize,
) -> Result<(SeriesDataset, SeriesDataset, SeriesDataset)> {
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("split ratios sum to zero".into()));
    }
    let t = ds.len();
    let n_train = t * ratios[0] / total;
    let n_val = t * ratios[1] / total;
    let parts = [n_train, n_val, t - n_train - n_val];
    if let Some(&short) = parts.iter().find(|&&p| p < min_len) {
        return Err(Error::TooShort {
            needed: min_len,
            got: short,
        });
    }
    Ok((
        ds.slice(0, n_train)?,
        ds.slice(n_train, n_train + n_val)?,
        ds.slice(n_train + n_val, t)?,
    ))
}

/// One forecasting example: `history` rows immediately followed by `future`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[L, N, D]`
    pub history: Tensor,
    /// `[H, N, D]`
    pub future: Tensor,
    pub markers: PositionMarkers,
    /// Absolute index of the first history step.
    pub start: usize,
}

/// Stride-1 windows of `history_len + horizon` consecutive steps.
pub fn make_windows(ds: &SeriesDataset, history_len: usize, horizon: usize) -> Result<Vec<WindowSample>> {
    let span = history_len + horizon;
    if history_len == 0 || horizon == 0 || ds.len() < span {
        return Err(Error::TooShort {
            needed: span,
            got: ds.len(),
        });
    }
    Ok((0..=ds.len() - span)
        .map(|s| window_at(ds, s, history_len, horizon))
        .collect())
}

/// The window whose history starts at relative row `s`.
pub fn window_at(ds: &SeriesDataset, s: usize, history_len: usize, horizon: usize) -> WindowSample {
    let (tod, dow) = (s..s + history_len)
        .map(|i| ds.marker(ds.start + i))
        .unzip();
    WindowSample {
        history: ds.rows(s, s + history_len),
        future: ds.rows(s + history_len, s + history_len + horizon),
        markers: PositionMarkers {
            time_of_day: tod,
            day_of_week: dow,
        },
        start: ds.start + s,
    }
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per feature over all steps and
    /// nodes of `train`.
    pub fn fit(train: &SeriesDataset) -> Result<Self> {
        let d = train.features();
        let count = (train.len() * train.n_nodes()) as f64;
        if count == 0.0 {
            return Err(Error::EmptyTensor("normalizer fit"));
        }
        let mut mean = vec![0.0; d];
        for row in train.values.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for row in train.values.data().chunks(d) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / count).sqrt()).collect();
        for (feature, (&s, &m)) in std.iter().zip(&mean).enumerate() {
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::ZeroStd { feature });
            }
        }
        Ok(Self { mean, std })
    }

    /// Identity statistics (mean 0, std 1) for `d` features.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let d = self.mean.len();
        if x.shape().last() != Some(&d) {
            return Err(shape_mismatch("normalizer", x.shape(), &[d]));
        }
        Ok(d)
    }

    /// `(x − mean) / std` along the trailing feature axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
        Ok(out)
    }

    /// `x · std + mean` along the trailing feature axis.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        Ok(ds.with_values(self.apply(&ds.values)?))
    }
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub steps_per_day: usize,
    pub start_weekday: usize,
    /// Autoregressive coefficient of the graph-diffused noise.
    pub ar_coeff: f64,
    pub noise_std: f64,
}

impl SynthConfig {
    pub fn new(n_nodes: usize, steps: usize, seed: u64) -> Self {
        Self {
            n_nodes,
            steps,
            seed,
            steps_per_day: DEFAULT_STEPS_PER_DAY,
            start_weekday: 0,
            ar_coeff: 0.9,
            noise_std: 2.0,
        }
    }
}

/// A ring with chords joining node `i` to `i + N/2` for even `i < N/2`.
pub fn ring_chords_graph(n_nodes: usize) -> Result<Graph> {
    if n_nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "graph needs at least 2 nodes, got {n_nodes}"
        )));
    }
    let mut edges = Vec::new();
    let ring = if n_nodes == 2 { 1 } else { n_nodes };
    for i in 0..ring {
        edges.push(Edge {
            from: i,
            to: (i + 1) % n_nodes,
            weight: 1.0,
        });
    }
    if n_nodes >= 6 {
        for i in (0..n_nodes / 2).step_by(2) {
            edges.push(Edge {
                from: i,
                to: i + n_nodes / 2,
                weight: 0.5,
            });
        }
    }
    Graph::from_edges(n_nodes, edges)
}

/// Single-feature traffic-like series: per-node level plus a daily sinusoid
/// (node-specific phase, weekly amplitude modulation) plus noise that
/// follows `e_{t+1} = ar·Â e_t + ε_t`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(SeriesDataset, Graph)> {
    let graph = ring_chords_graph(cfg.n_nodes)?;
    if cfg.steps == 0 || cfg.steps_per_day == 0 {
        return Err(Error::InvalidArgument("synthetic series needs steps > 0".into()));
    }
    let n = cfg.n_nodes;
    let a_norm = graph.normalized_adjacency();
    let mut node_rng = rng::stream(cfg.seed, 0x51_7e, 0);
    let mut level = vec![0.0; n];
    let mut amp = vec![0.0; n];
    let mut phase = vec![0.0; n];
    for i in 0..n {
        level[i] = 50.0 + 10.0 * node_rng.random::<f64>();
        amp[i] = 20.0 + 10.0 * node_rng.random::<f64>();
        // neighbours on the ring get similar phases
        phase[i] = PI * i as f64 / n as f64 + 0.3 * node_rng.random::<f64>();
    }
    let spd = cfg.steps_per_day as f64;
    let mut noise = Tensor::zeros(&[n]);
    let mut out = Vec::with_capacity(cfg.steps * n);
    for t in 0..cfg.steps {
        let day = (cfg.start_weekday + t / cfg.steps_per_day) % DAYS_PER_WEEK;
        let weekly = 1.0 + 0.3 * (2.0 * PI * day as f64 / DAYS_PER_WEEK as f64).sin();
        for i in 0..n {
            let daily = (2.0 * PI * t as f64 / spd + phase[i]).sin();
            out.push(level[i] + amp[i] * weekly * daily + noise.data()[i]);
        }
        let eps = rng::normal_tensor(&mut rng::stream(cfg.seed, 0xa2, t as u64), &[n]);
        noise = neighbor_mean_effect(&a_norm, &noise, 0)?.scale(cfg.ar_coeff);
        noise.axpy(cfg.noise_std, &eps)?;
    }
    let values = Tensor::from_vec(&[cfg.steps, n, 1], out);
    let ds = SeriesDataset::new(values, cfg.steps_per_day, cfg.start_weekday)?;
    Ok((ds, graph))
}
