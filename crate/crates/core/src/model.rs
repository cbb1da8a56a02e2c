//! Conditional score network over graph-structured sequences.
//!
//! The network sees the history window followed by the noisy future along
//! one time axis, lifts it to `st_channels`, runs an encoder/decoder of
//! residual spatiotemporal blocks (temporal conv + Chebyshev graph conv) and
//! predicts the standardized noise on the last `horizon` steps. The score is
//! recovered as `−ε̂ / σ(t)` by the caller that knows the noise schedule.
//!
//! Internally activations are laid out as `[B·N, C, T]`; the external layout
//! is `[B, T, N, D]`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::graph::ChebBasis;
use crate::rng;
use crate::tensor::Tensor;

pub const TEMPORAL_KERNEL: usize = 3;
pub const DAYS_PER_WEEK: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub st_channels: usize,
    pub hidden_dim: usize,
    pub embed_dim_time: usize,
    pub embed_dim_pos: usize,
    pub n_res_blocks: usize,
    pub channel_multipliers: Vec<usize>,
    pub cheb_order: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub n_nodes: usize,
    pub features: usize,
    pub steps_per_day: usize,
}

impl ModelConfig {
    /// Default desk-scale architecture for the given data shape.
    pub fn desk(n_nodes: usize, features: usize, history_len: usize, horizon: usize) -> Self {
        Self {
            st_channels: 32,
            hidden_dim: 64,
            embed_dim_time: 32,
            embed_dim_pos: 16,
            n_res_blocks: 2,
            channel_multipliers: vec![1, 2],
            cheb_order: 3,
            history_len,
            horizon,
            n_nodes,
            features,
            steps_per_day: 288,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.history_len + self.horizon
    }

    pub fn channels(&self, level: usize) -> usize {
        self.st_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let positive = [
            ("st_channels", self.st_channels),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim_time", self.embed_dim_time),
            ("embed_dim_pos", self.embed_dim_pos),
            ("n_res_blocks", self.n_res_blocks),
            ("cheb_order", self.cheb_order),
            ("history_len", self.history_len),
            ("horizon", self.horizon),
            ("n_nodes", self.n_nodes),
            ("features", self.features),
            ("steps_per_day", self.steps_per_day),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let m = &self.channel_multipliers;
        if m.is_empty() || m.contains(&0) || m.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!(
                "channel_multipliers must be nonempty, positive and nondecreasing, got {m:?}"
            ));
        }
        if self.embed_dim_time % 2 == 1 {
            return Err(Error::OddDim(self.embed_dim_time));
        }
        if self.embed_dim_pos % 2 == 1 {
            return Err(Error::OddDim(self.embed_dim_pos));
        }
        let div = 1usize << (self.levels() - 1);
        if self.seq_len() % div != 0 {
            return bad(format!(
                "history_len + horizon = {} must be divisible by {div} for {} levels",
                self.seq_len(),
                self.levels()
            ));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mults: Vec<String> = self
            .channel_multipliers
            .iter()
            .map(|m| m.to_string())
            .collect();
        format!(
            "st_channels={}\nhidden_dim={}\nembed_dim_time={}\nembed_dim_pos={}\n\
             n_res_blocks={}\nchannel_multipliers={}\ncheb_order={}\nhistory_len={}\n\
             horizon={}\nn_nodes={}\nfeatures={}\nsteps_per_day={}\n",
            self.st_channels,
            self.hidden_dim,
            self.embed_dim_time,
            self.embed_dim_pos,
            self.n_res_blocks,
            mults.join(","),
            self.cheb_order,
            self.history_len,
            self.horizon,
            self.n_nodes,
            self.features,
            self.steps_per_day,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim(), (i + 1, v.trim()));
        }
        let mut take = |key: &str| -> Result<(usize, &str)> {
            map.remove(key)
                .ok_or_else(|| Error::InvalidConfig(format!("missing model key {key}")))
        };
        let mut num = |key: &str| -> Result<usize> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("{key}: expected an integer, got {v:?}"),
            })
        };
        let cfg = Self {
            st_channels: num("st_channels")?,
            hidden_dim: num("hidden_dim")?,
            embed_dim_time: num("embed_dim_time")?,
            embed_dim_pos: num("embed_dim_pos")?,
            n_res_blocks: num("n_res_blocks")?,
            channel_multipliers: Vec::new(),
            cheb_order: num("cheb_order")?,
            history_len: num("history_len")?,
            horizon: num("horizon")?,
            n_nodes: num("n_nodes")?,
            features: num("features")?,
            steps_per_day: num("steps_per_day")?,
        };
        let (line, mults) = take("channel_multipliers")?;
        let channel_multipliers = mults
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("channel_multipliers: bad entry {s:?}"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        if let Some(k) = map.keys().next() {
            return Err(Error::InvalidConfig(format!("unknown model key {k}")));
        }
        Ok(Self {
            channel_multipliers,
            ..cfg
        })
    }
}

/// Temporal markers of the history steps.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PositionMarkers {
    pub time_of_day: Vec<usize>,
    pub day_of_week: Vec<usize>,
}

/// Name, shape and fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn push_spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], fan_in: usize) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        fan_in,
    });
}

fn push_block(out: &mut Vec<ParamSpec>, p: &str, cin: usize, cout: usize, cond: Option<usize>, k: usize) {
    let kt = TEMPORAL_KERNEL;
    push_spec(out, format!("{p}.ta.w"), &[cout, cin, kt], cin * kt);
    push_spec(out, format!("{p}.ta.b"), &[cout], cin * kt);
    if let Some(hd) = cond {
        push_spec(out, format!("{p}.cond.w"), &[hd, cout], hd);
        push_spec(out, format!("{p}.cond.b"), &[cout], hd);
    }
    push_spec(out, format!("{p}.cheb.w"), &[cout, k * cout, 1], k * cout);
    push_spec(out, format!("{p}.cheb.b"), &[cout], k * cout);
    push_spec(out, format!("{p}.tb.w"), &[cout, cout, kt], cout * kt);
    push_spec(out, format!("{p}.tb.b"), &[cout], cout * kt);
    if cin != cout {
        push_spec(out, format!("{p}.res.w"), &[cout, cin, 1], cin);
        push_spec(out, format!("{p}.res.b"), &[cout], cin);
    }
}

/// The ordered parameter inventory implied by a configuration.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (et, hd, ep, d) = (cfg.embed_dim_time, cfg.hidden_dim, cfg.embed_dim_pos, cfg.features);
    let k = cfg.cheb_order;
    let kt = TEMPORAL_KERNEL;
    let mut out = Vec::new();
    push_spec(&mut out, "time.w1".into(), &[et, hd], et);
    push_spec(&mut out, "time.b1".into(), &[hd], et);
    push_spec(&mut out, "time.w2".into(), &[hd, hd], hd);
    push_spec(&mut out, "time.b2".into(), &[hd], hd);
    push_spec(&mut out, "pos.tod".into(), &[cfg.steps_per_day, ep / 2], 1);
    push_spec(&mut out, "pos.dow".into(), &[DAYS_PER_WEEK, ep / 2], 1);
    push_spec(&mut out, "pos.proj".into(), &[ep, d], ep);
    let c0 = cfg.channels(0);
    push_spec(&mut out, "lift.w".into(), &[c0, d, 1], d);
    push_spec(&mut out, "lift.b".into(), &[c0], d);
    for l in 0..cfg.levels() {
        let c = cfg.channels(l);
        if l > 0 {
            let cp = cfg.channels(l - 1);
            push_spec(&mut out, format!("down.{l}.w"), &[c, cp, kt], cp * kt);
            push_spec(&mut out, format!("down.{l}.b"), &[c], cp * kt);
        }
        for r in 0..cfg.n_res_blocks {
            let cond = (l == 0 && r == 0).then_some(hd);
            push_block(&mut out, &format!("enc.{l}.{r}"), c, c, cond, k);
        }
    }
    for l in (0..cfg.levels() - 1).rev() {
        let (c, cn) = (cfg.channels(l), cfg.channels(l + 1));
        push_spec(&mut out, format!("up.{l}.w"), &[c, cn, kt], cn * kt);
        push_spec(&mut out, format!("up.{l}.b"), &[c], cn * kt);
        for r in 0..cfg.n_res_blocks {
            let cin = if r == 0 { 2 * c } else { c };
            push_block(&mut out, &format!("dec.{l}.{r}"), cin, c, None, k);
        }
    }
    push_spec(&mut out, "head.w".into(), &[d, c0, 1], c0);
    push_spec(&mut out, "head.b".into(), &[d], c0);
    Ok(out)
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ScoreModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }
}

/// Fan-in scaled uniform initialization, one random stream per tensor.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ScoreModelParams> {
    let specs = param_specs(cfg)?;
    let entries = specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            let mut r = rng::stream(seed, 0x5eed_0000 + i as u64, 0);
            (s.name, rng::uniform_tensor(&mut r, &s.shape, -bound, bound))
        })
        .collect();
    Ok(ScoreModelParams::new(entries))
}

/// Sinusoidal embedding of diffusion time at pseudo-timestep `1000·t`:
/// `[sin(1000t·ω_k)…, cos(1000t·ω_k)…]`, `ω_k = 10000^{−2k/dim}`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim % 2 == 1 {
        return Err(Error::OddDim(dim));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let a = 1000.0 * t * w;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    Ok(Tensor::from_vec(&[dim], out))
}

/// Handles to the weights of one residual block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ta: (Var, Var),
    pub cond: Option<(Var, Var)>,
    pub cheb: (Var, Var),
    pub tb: (Var, Var),
    pub res: Option<(Var, Var)>,
}

/// Residual spatiotemporal block on `x[B·N, C, T]`:
/// `res(x) + tconv_b(SiLU(cheb(SiLU(tconv_a(x)) + cond))))`, where the
/// Chebyshev conv is `Σ_k T_k x W_k` and `cond[B, Hd]` is projected to a
/// per-channel shift shared by the `group = N` nodes of a batch element.
pub fn st_block(
    tape: &mut Tape,
    x: Var,
    cheb: &ChebBasis,
    w: &BlockVars,
    cond: Option<Var>,
) -> Result<Var> {
    let n = cheb.n_nodes();
    let mut h = tape.temporal_conv1d(x, w.ta.0, Some(w.ta.1))?;
    h = tape.silu(h)?;
    if let (Some(c), Some((cw, cb))) = (cond, w.cond) {
        let proj = tape.matmul(c, cw)?;
        let proj = tape.add_row_bias(proj, cb)?;
        h = tape.add_cond(h, proj, n)?;
    }
    let (c_out, t) = {
        let v = tape.value(h);
        (v.dim(1), v.dim(2))
    };
    let mut parts = vec![h];
    for poly in &cheb.polys()[1..] {
        parts.push(tape.node_mix(poly, h, c_out * t)?);
    }
    let mixed = if parts.len() == 1 {
        h
    } else {
        tape.concat_channels(&parts)?
    };
    let mut g = tape.conv1d(mixed, w.cheb.0, Some(w.cheb.1), 1, 0)?;
    g = tape.silu(g)?;
    g = tape.temporal_conv1d(g, w.tb.0, Some(w.tb.1))?;
    let res = match w.res {
        Some((rw, rb)) => tape.conv1d(x, rw, Some(rb), 1, 0)?,
        None => x,
    };
    tape.add(res, g)
}

/// A batch of conditioning data and noisy futures, external layout.
#[derive(Clone, Copy, Debug)]
pub struct ScoreInput<'a> {
    /// `[B, H, N, D]`
    pub x_tilde: &'a Tensor,
    /// `[B, L, N, D]`
    pub history: &'a Tensor,
    pub markers: &'a [PositionMarkers],
    pub t: &'a [f64],
}

/// `[B, T, N, D]` → `[B·N, D, T]`.
pub fn to_model_layout(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(shape_mismatch("to_model_layout", x.shape(), &[0, 0, 0, 0]));
    }
    let s = x.shape();
    x.permute(&[0, 2, 3, 1]).reshape(&[s[0] * s[2], s[3], s[1]])
}

/// `[B·N, D, T]` → `[B, T, N, D]`.
pub fn from_model_layout(y: &Tensor, batch: usize) -> Result<Tensor> {
    if y.rank() != 3 || batch == 0 || y.dim(0) % batch != 0 {
        return Err(shape_mismatch("from_model_layout", y.shape(), &[batch]));
    }
    let n = y.dim(0) / batch;
    Ok(y
        .reshape(&[batch, n, y.dim(1), y.dim(2)])?
        .permute(&[0, 3, 1, 2]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    cfg: ModelConfig,
    params: ScoreModelParams,
    index: BTreeMap<String, usize>,
}

impl ScoreModel {
    /// Wrap parameters, checking names and shapes against the config.
    pub fn new(cfg: ModelConfig, params: ScoreModelParams) -> Result<Self> {
        let specs = param_specs(&cfg)?;
        if specs.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, (spec, (name, t))) in specs.iter().zip(params.iter()).enumerate() {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            index.insert(spec.name.clone(), i);
        }
        Ok(Self { cfg, params, index })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ScoreModelParams {
        &self.params
    }

    /// Mutable access to tensor values; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut ScoreModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ScoreModelParams {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Put every parameter on the tape, as gradient leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    fn pair(&self, vars: &[Var], prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(vars, &format!("{prefix}.w"))?,
            self.var(vars, &format!("{prefix}.b"))?,
        ))
    }

    fn block_vars(&self, vars: &[Var], p: &str) -> Result<BlockVars> {
        let opt = |s: &str| -> Result<Option<(Var, Var)>> {
            if self.index.contains_key(&format!("{p}.{s}.w")) {
                Ok(Some(self.pair(vars, &format!("{p}.{s}"))?))
            } else {
                Ok(None)
            }
        };
        Ok(BlockVars {
            ta: self.pair(vars, &format!("{p}.ta"))?,
            cond: opt("cond")?,
            cheb: self.pair(vars, &format!("{p}.cheb"))?,
            tb: self.pair(vars, &format!("{p}.tb"))?,
            res: opt("res")?,
        })
    }

    fn check_input(&self, cheb: &ChebBasis, input: &ScoreInput<'_>) -> Result<usize> {
        let c = &self.cfg;
        let b = input.x_tilde.shape().first().copied().unwrap_or(0);
        let want_f = [b, c.horizon, c.n_nodes, c.features];
        let want_h = [b, c.history_len, c.n_nodes, c.features];
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if input.x_tilde.shape() != want_f {
            return Err(shape_mismatch("score input", input.x_tilde.shape(), &want_f));
        }
        if input.history.shape() != want_h {
            return Err(shape_mismatch("score history", input.history.shape(), &want_h));
        }
        if input.markers.len() != b || input.t.len() != b {
            return Err(shape_mismatch(
                "score conditioning",
                &[input.markers.len(), input.t.len()],
                &[b, b],
            ));
        }
        for m in input.markers {
            if m.time_of_day.len() != c.history_len || m.day_of_week.len() != c.history_len {
                return Err(shape_mismatch(
                    "position markers",
                    &[m.time_of_day.len(), m.day_of_week.len()],
                    &[c.history_len, c.history_len],
                ));
            }
        }
        if cheb.n_nodes() != c.n_nodes || cheb.order() != c.cheb_order {
            return Err(shape_mismatch(
                "chebyshev basis",
                &[cheb.n_nodes(), cheb.order()],
                &[c.n_nodes, c.cheb_order],
            ));
        }
        Ok(b)
    }

    /// Learned position embedding `[B·L, D]` projected into feature space.
    fn record_position(&self, tape: &mut Tape, vars: &[Var], markers: &[PositionMarkers]) -> Result<Var> {
        let half = self.cfg.embed_dim_pos / 2;
        let tod: Vec<usize> = markers.iter().flat_map(|m| m.time_of_day.iter().copied()).collect();
        let dow: Vec<usize> = markers.iter().flat_map(|m| m.day_of_week.iter().copied()).collect();
        let rows = tod.len();
        let a = tape.gather_rows(self.var(vars, "pos.tod")?, &tod)?;
        let a = tape.reshape(a, &[rows, half, 1])?;
        let b = tape.gather_rows(self.var(vars, "pos.dow")?, &dow)?;
        let b = tape.reshape(b, &[rows, half, 1])?;
        let e = tape.concat_channels(&[a, b])?;
        let e = tape.reshape(e, &[rows, 2 * half])?;
        tape.matmul(e, self.var(vars, "pos.proj")?)
    }

    /// Position embedding rows `[L, embed_dim_pos]` for one marker set.
    pub fn position_embedding(&self, markers: &PositionMarkers) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let half = self.cfg.embed_dim_pos / 2;
        let l = markers.time_of_day.len();
        let a = tape.gather_rows(self.var(&vars, "pos.tod")?, &markers.time_of_day)?;
        let a = tape.reshape(a, &[l, half, 1])?;
        let b = tape.gather_rows(self.var(&vars, "pos.dow")?, &markers.day_of_week)?;
        let b = tape.reshape(b, &[l, half, 1])?;
        let e = tape.concat_channels(&[a, b])?;
        tape.value(e).reshape(&[l, 2 * half])
    }

    /// Record the forward pass; returns the predicted standardized noise in
    /// model layout `[B·N, D, H]`.
    pub fn record(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        cheb: &ChebBasis,
        input: &ScoreInput<'_>,
    ) -> Result<Var> {
        let b = self.check_input(cheb, input)?;
        let c = &self.cfg;
        let (n, d, l, h, seq) = (c.n_nodes, c.features, c.history_len, c.horizon, c.seq_len());

        let mut x_in = vec![0.0; b * n * d * seq];
        let (hist, fut) = (input.history.data(), input.x_tilde.data());
        for bi in 0..b {
            for ni in 0..n {
                for di in 0..d {
                    let row = ((bi * n + ni) * d + di) * seq;
                    for ti in 0..l {
                        x_in[row + ti] = hist[((bi * l + ti) * n + ni) * d + di];
                    }
                    for ti in 0..h {
                        x_in[row + l + ti] = fut[((bi * h + ti) * n + ni) * d + di];
                    }
                }
            }
        }
        let x = tape.constant(Tensor::from_vec(&[b * n, d, seq], x_in));

        let pos = self.record_position(tape, vars, input.markers)?;
        let pos = tape.reshape(pos, &[b, l, d])?;
        let pos = tape.swap_last2(pos)?;
        let x = tape.add_leading(x, pos, n)?;

        let et = c.embed_dim_time;
        let mut temb = Vec::with_capacity(b * et);
        for &t in input.t {
            temb.extend_from_slice(time_embedding(t, et)?.data());
        }
        let temb = tape.constant(Tensor::from_vec(&[b, et], temb));
        let (w1, b1) = (self.var(vars, "time.w1")?, self.var(vars, "time.b1")?);
        let (w2, b2) = (self.var(vars, "time.w2")?, self.var(vars, "time.b2")?);
        let mut te = tape.matmul(temb, w1)?;
        te = tape.add_row_bias(te, b1)?;
        te = tape.silu(te)?;
        te = tape.matmul(te, w2)?;
        te = tape.add_row_bias(te, b2)?;
        let te = tape.silu(te)?;

        let (lw, lb) = self.pair(vars, "lift")?;
        let mut hid = tape.conv1d(x, lw, Some(lb), 1, 0)?;
        let mut skips = Vec::with_capacity(c.levels());
        for lvl in 0..c.levels() {
            if lvl > 0 {
                let (dw, db) = self.pair(vars, &format!("down.{lvl}"))?;
                hid = tape.conv1d(hid, dw, Some(db), 2, TEMPORAL_KERNEL / 2)?;
            }
            for r in 0..c.n_res_blocks {
                let w = self.block_vars(vars, &format!("enc.{lvl}.{r}"))?;
                let cond = (lvl == 0 && r == 0).then_some(te);
                hid = st_block(tape, hid, cheb, &w, cond)?;
            }
            skips.push(hid);
        }
        for lvl in (0..c.levels() - 1).rev() {
            hid = tape.upsample2(hid)?;
            let (uw, ub) = self.pair(vars, &format!("up.{lvl}"))?;
            hid = tape.temporal_conv1d(hid, uw, Some(ub))?;
            hid = tape.concat_channels(&[hid, skips[lvl]])?;
            for r in 0..c.n_res_blocks {
                let w = self.block_vars(vars, &format!("dec.{lvl}.{r}"))?;
                hid = st_block(tape, hid, cheb, &w, None)?;
            }
        }
        hid = tape.silu(hid)?;
        let (hw, hb) = self.pair(vars, "head")?;
        let out = tape.conv1d(hid, hw, Some(hb), 1, 0)?;
        let out = tape.slice_time(out, l, seq)?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFiniteActivation("score output"));
        }
        Ok(out)
    }

    /// Predicted standardized noise `[B, H, N, D]` without gradients.
    pub fn predict_noise(&self, cheb: &ChebBasis, input: &ScoreInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.record(&mut tape, &vars, cheb, input)?;
        from_model_layout(tape.value(out), input.t.len())
    }
}

/// Score `−ε̂ / σ(t_b)` for each batch element, external layout.
pub fn score_forward(
    model: &ScoreModel,
    cheb: &ChebBasis,
    input: &ScoreInput<'_>,
    sigma: impl Fn(f64) -> Result<f64>,
) -> Result<Tensor> {
    let mut eps = model.predict_noise(cheb, input)?;
    let per = eps.len() / input.t.len();
    for (chunk, &t) in eps.data_mut().chunks_mut(per).zip(input.t) {
        let s = sigma(t)?;
        if !(s > 0.0) {
            return Err(Error::ZeroSigma(s));
        }
        for v in chunk {
            *v = -*v / s;
        }
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{cheb_basis, parse_edge_list};

    fn tiny() -> ModelConfig {
        ModelConfig {
            st_channels: 4,
            hidden_dim: 6,
            embed_dim_time: 4,
            embed_dim_pos: 4,
            n_res_blocks: 1,
            channel_multipliers: vec![1, 2],
            cheb_order: 2,
            history_len: 4,
            horizon: 4,
            n_nodes: 3,
            features: 1,
            steps_per_day: 6,
        }
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = ModelConfig::desk(12, 1, 12, 12);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("st_channels=3\n").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.channel_multipliers = vec![2, 1];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = tiny();
        c.embed_dim_time = 5;
        assert_eq!(c.validate(), Err(Error::OddDim(5)));
        let mut c = tiny();
        c.channel_multipliers = vec![1, 2, 2, 2, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn time_embedding_cases() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(time_embedding(0.5, 7), Err(Error::OddDim(7)));
        let a = time_embedding(0.1, 32).unwrap();
        let b = time_embedding(0.9, 32).unwrap();
        let cos = crate::tensor::dot(a.data(), b.data()) / (a.sum_sq() * b.sum_sq()).sqrt();
        assert!(cos < 0.999);
        assert!((a.sum_sq() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny();
        let model = ScoreModel::init(cfg.clone(), 3).unwrap();
        let g = parse_edge_list("0,1,1\n1,2,1\n", None).unwrap();
        let cheb = cheb_basis(&g.scaled_laplacian().unwrap(), 2).unwrap();
        let x = Tensor::full(&[2, 4, 3, 1], 0.3);
        let hist = Tensor::full(&[2, 4, 3, 1], -0.2);
        let m = PositionMarkers {
            time_of_day: vec![0, 1, 2, 3],
            day_of_week: vec![0; 4],
        };
        let markers = [m.clone(), m];
        let input = ScoreInput {
            x_tilde: &x,
            history: &hist,
            markers: &markers,
            t: &[0.2, 0.7],
        };
        let a = model.predict_noise(&cheb, &input).unwrap();
        let b = model.predict_noise(&cheb, &input).unwrap();
        assert_eq!(a.shape(), &[2, 4, 3, 1]);
        assert_eq!(a, b);
        let bad = [markers[0].clone()];
        let input = ScoreInput {
            markers: &bad,
            ..input
        };
        assert!(model.predict_noise(&cheb, &input).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let x = Tensor::from_vec(&[2, 3, 4, 5], (0..120).map(|v| v as f64).collect());
        let y = to_model_layout(&x).unwrap();
        assert_eq!(y.shape(), &[8, 5, 3]);
        assert_eq!(from_model_layout(&y, 2).unwrap(), x);
    }
}
