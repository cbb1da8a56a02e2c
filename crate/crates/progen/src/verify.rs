//! Self-contained numerical verification suites behind `progen verify`.

use std::fmt::Write as _;
use std::path::Path;

use progen_core::autodiff::{gradient_check, Tape, Var};
use progen_core::data::WindowSample;
use progen_core::graph::{
    cheb_basis, lyapunov_residual, solve_lyapunov_stationary, stability_check, Edge, Graph,
};
use progen_core::model::{PositionMarkers, ScoreModel};
use progen_core::rng::{normal_tensor, normal_vec, stream, uniform_tensor};
use progen_core::sampler::{reverse_trajectory, SamplerConfig, SamplerMode};
use progen_core::sde::{st_covariance_closed_form, st_covariance_rk4, st_marginal, subvp_marginal};
use progen_core::train::{draw_dsm, dsm_loss_from_score, record_score};
use progen_core::{BetaSchedule, Error, ModelConfig, SdeSpec, Tensor};

use crate::error::{CliError, Result};
use crate::io::write_text;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Kernels,
    Lyapunov,
    Gradients,
    Analytic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl Check {
    fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            note: String::new(),
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Neighbor coupling for the Lyapunov suite (default 0.5). Unstable
    /// values are reported as expected failures.
    pub alpha: Option<f64>,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>> {
    match suite {
        Suite::Kernels => kernels(),
        Suite::Lyapunov => lyapunov(opts.alpha.unwrap_or(0.5)),
        Suite::Gradients => gradients(),
        Suite::Analytic => analytic(),
    }
}

pub fn checks_csv(checks: &[Check]) -> String {
    let mut out = String::from("check,measured,tolerance,status,note\n");
    for c in checks {
        let status = if c.passed { "pass" } else { "FAIL" };
        writeln!(out, "{},{:e},{:e},{status},{}", c.name, c.measured, c.tolerance, c.note).unwrap();
    }
    out
}

/// Runs a suite, writes its table and fails with `SuiteFailure` when any
/// check fails.
pub fn verify_cmd(suite: Suite, opts: &VerifyOptions, out: Option<&Path>) -> Result<String> {
    let checks = run_suite(suite, opts)?;
    let table = checks_csv(&checks);
    if let Some(p) = out {
        write_text(p, &table)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        print!("{table}");
        Err(CliError::SuiteFailure(failed.join(", ")))
    }
}

fn path_graph(n: usize) -> Graph {
    let edges = (0..n - 1)
        .map(|i| Edge {
            from: i,
            to: i + 1,
            weight: 1.0,
        })
        .collect();
    Graph::from_edges(n, edges).expect("path graph")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Sub-VP closed-form marginals against an Euler–Maruyama simulation, and
/// the ST covariance by RK4 against its eigen closed form.
pub fn kernels() -> Result<Vec<Check>> {
    let sched = BetaSchedule::default();
    let mut checks = Vec::new();

    // the t = 1 mean is 0.0066·x0, so x0 must dwarf the Monte Carlo error
    const PATHS: usize = 20_000;
    const STEPS: usize = 1000;
    let x0 = 1000.0;
    let dt = 1.0 / STEPS as f64;
    let mut x = vec![x0; PATHS];
    let mut rng = stream(11, 0, 0);
    for i in 0..STEPS {
        let t = i as f64 * dt;
        let half_beta = 0.5 * sched.beta(t)?;
        let g = sched.diffusion_coeff(t)? * dt.sqrt();
        for (v, z) in x.iter_mut().zip(normal_vec(&mut rng, PATHS)) {
            *v += -half_beta * *v * dt + g * z;
        }
        let t_next = (i + 1) as f64 * dt;
        if [250, 500, 1000].contains(&(i + 1)) {
            let n = PATHS as f64;
            let mean = x.iter().sum::<f64>() / n;
            let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            let m = subvp_marginal(&sched, &Tensor::scalar(x0), t_next)?;
            checks.push(Check::at_most(
                format!("subvp_mean_t{t_next}"),
                rel(mean, m.mean.data()[0]),
                0.02,
            ));
            checks.push(Check::at_most(format!("subvp_std_t{t_next}"), rel(std, m.std), 0.05));
        }
    }

    for (n, alpha) in [(2, 0.5), (3, 0.9), (4, -0.3), (4, 0.7)] {
        let spec = SdeSpec::st(sched, alpha, path_graph(n).normalized_adjacency())?;
        let mut worst: f64 = 0.0;
        for t in [0.1, 0.5, 1.0] {
            let a = st_covariance_rk4(&spec, t, 1000)?;
            let b = st_covariance_closed_form(&spec, t)?;
            worst = worst.max(max_abs_diff(&a, &b));
        }
        checks.push(Check::at_most(format!("st_cov_rk4_vs_eigen_n{n}_a{alpha}"), worst, 1e-6));
    }

    let spec0 = SdeSpec::st(sched, 0.0, path_graph(3).normalized_adjacency())?;
    let x = Tensor::from_vec(&[3, 1], vec![1.0, -2.0, 0.5]);
    let mut worst: f64 = 0.0;
    for k in 1..=20 {
        let t = k as f64 * 0.05;
        let st = st_marginal(&spec0, &x, t, 0)?;
        let sub = subvp_marginal(&sched, &x, t)?;
        worst = worst.max(max_abs_diff(&st.mean, &sub.mean));
        for i in 0..3 {
            worst = worst.max((st.covariance.data()[i * 3 + i] - sub.std * sub.std).abs());
        }
    }
    checks.push(Check::at_most("st_alpha0_equals_subvp", worst, 1e-6));
    Ok(checks)
}

/// Stationary covariance, stability classification and the approach of
/// the covariance ODE to its stationary value.
pub fn lyapunov(alpha: f64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let two = path_graph(2).normalized_adjacency();

    let v0 = solve_lyapunov_stationary(&two, 0.0)?;
    checks.push(Check::at_most(
        "alpha0_stationary_is_identity",
        max_abs_diff(&v0, &Tensor::eye(2)),
        0.0,
    ));
    let s = stability_check(&two, 1.5)?;
    checks.push(
        Check {
            name: "alpha1.5_two_nodes_unstable".into(),
            measured: s.min_real_eig,
            tolerance: 0.0,
            passed: !s.stable && (s.min_real_eig + 0.5).abs() < 1e-12,
            note: String::new(),
        }
        .with_note("expected min eigenvalue -0.5"),
    );

    // B(1) = 15.05 with this schedule, enough for the slowest mode to settle
    let sched = BetaSchedule::new(0.1, 30.0)?;
    for (name, a) in [("path2", two.clone()), ("path4", path_graph(4).normalized_adjacency())] {
        match solve_lyapunov_stationary(&a, alpha) {
            Ok(v) => {
                let r = lyapunov_residual(&a, alpha, &v, 2.0)?;
                checks.push(Check::at_most(format!("residual_{name}_a{alpha}"), r, 1e-8));
                let spec = SdeSpec::st(sched, alpha, a.clone())?;
                let vt = st_covariance_rk4(&spec, 1.0, 2000)?;
                checks.push(
                    Check::at_most(format!("ode_reaches_stationary_{name}_a{alpha}"), max_abs_diff(&vt, &v), 1e-3)
                        .with_note(format!("B(1)={}", sched.beta_integral(1.0)?)),
                );
            }
            Err(Error::Unstable { min_real_eig }) => checks.push(Check {
                name: format!("unstable_{name}_a{alpha}"),
                measured: min_real_eig,
                tolerance: 0.0,
                passed: true,
                note: "expected failure: Unstable".into(),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(checks)
}

fn check_op(
    checks: &mut Vec<Check>,
    name: &str,
    x: &Tensor,
    f: impl Fn(&mut Tape, Var) -> progen_core::Result<Var>,
) -> Result<()> {
    let err = gradient_check(f, x, 1e-5)?;
    checks.push(Check::at_most(format!("op_{name}"), err, 1e-4));
    Ok(())
}

/// The smallest model the gradient checks run on.
pub fn tiny_config() -> ModelConfig {
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

/// Finite-difference checks of every differentiable op and of the DSM
/// loss of a tiny model with respect to each parameter tensor.
pub fn gradients() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut r = stream(5, 0, 0);
    let mut rand = |shape: &[usize]| normal_tensor(&mut r, shape);
    let x = rand(&[2, 3, 5]);
    let other = rand(&[2, 3, 5]);
    let weights = rand(&[2, 3, 5]);
    let w = rand(&[4, 3, 3]);
    let bias = rand(&[4]);
    let m = rand(&[5, 4]);
    let cond = rand(&[1, 3]);
    let lead = rand(&[1, 3, 2]);
    let table = rand(&[4, 3]);
    let a = path_graph(2).normalized_adjacency();

    let dot = |t: &mut Tape, v: Var, c: &Tensor| t.dot_const(v, c.clone());
    check_op(&mut checks, "add", &x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.add(v, o)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "sub", &x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.sub(o, v)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "mul", &x, |t, v| {
        let y = t.mul(v, v)?;
        dot(t, y, &weights)
    })?;
    check_op(&mut checks, "scale", &x, |t, v| {
        let y = t.scale(v, -1.7)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "mul_const", &x, |t, v| {
        let y = t.mul_const(v, other.clone())?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "add_const", &x, |t, v| {
        let y = t.add_const(v, &other)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "silu", &x, |t, v| {
        let y = t.silu(v)?;
        dot(t, y, &weights)
    })?;
    check_op(&mut checks, "mean_sq", &x, |t, v| t.mean_sq(v))?;
    check_op(&mut checks, "dot_const", &x, |t, v| dot(t, v, &weights))?;
    check_op(&mut checks, "matmul_left", &m, |t, v| {
        let b = t.constant(table.clone());
        let y = t.matmul(v, b)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "matmul_right", &table, |t, v| {
        let a = t.constant(m.clone());
        let y = t.matmul(a, v)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "add_row_bias", &bias, |t, v| {
        let xm = t.constant(m.clone());
        let y = t.add_row_bias(xm, v)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "conv1d_input", &x, |t, v| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(bias.clone()));
        let y = t.conv1d(v, wv, Some(bv), 2, 1)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "conv1d_kernel", &w, |t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(bias.clone()));
        let y = t.temporal_conv1d(xv, v, Some(bv))?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "conv1d_bias", &bias, |t, v| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.temporal_conv1d(xv, wv, Some(v))?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "node_mix", &x, |t, v| {
        let y = t.node_mix(&a, v, 5)?;
        dot(t, y, &weights)
    })?;
    check_op(&mut checks, "add_cond", &cond, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.add_cond(xv, v, 2)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "add_leading", &lead, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.add_leading(xv, v, 2)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "swap_last2", &x, |t, v| {
        let y = t.swap_last2(v)?;
        let c = weights.permute(&[0, 2, 1]);
        dot(t, y, &c)
    })?;
    check_op(&mut checks, "concat_channels", &x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.concat_channels(&[v, o, v])?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "slice_time", &x, |t, v| {
        let y = t.slice_time(v, 1, 4)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "upsample2", &x, |t, v| {
        let y = t.upsample2(v)?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "gather_rows", &table, |t, v| {
        let y = t.gather_rows(v, &[3, 0, 3, 1])?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    })?;
    check_op(&mut checks, "reshape", &x, |t, v| {
        let y = t.reshape(v, &[6, 5])?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    })?;

    checks.extend(tiny_model_gradients()?);
    Ok(checks)
}

/// DSM-loss gradient of every parameter tensor of the tiny model.
pub fn tiny_model_gradients() -> Result<Vec<Check>> {
    let cfg = tiny_config();
    let g = path_graph(3);
    let cheb = cheb_basis(&g.scaled_laplacian()?, cfg.cheb_order)?;
    let model = ScoreModel::init(cfg.clone(), 3)?;
    let mut r = stream(6, 0, 0);
    let windows: Vec<WindowSample> = (0..2)
        .map(|i| WindowSample {
            history: normal_tensor(&mut r, &[4, 3, 1]),
            future: normal_tensor(&mut r, &[4, 3, 1]),
            markers: PositionMarkers {
                time_of_day: vec![i, i + 1, 5, 0],
                day_of_week: vec![i, i, 6, 0],
            },
            start: 0,
        })
        .collect();
    let batch: Vec<&WindowSample> = windows.iter().collect();
    let spec = SdeSpec::sub_vp(BetaSchedule::default());
    let draw = draw_dsm(&batch, &spec, 0.05, &mut r)?;
    let mut checks = Vec::new();
    for (i, (name, p)) in model.params().iter().enumerate() {
        let err = gradient_check(
            |tape, leaf| {
                let mut vars = model.bind(tape, false);
                vars[i] = leaf;
                let s = record_score(&model, tape, &vars, &cheb, &draw)?;
                dsm_loss_from_score(tape, s, &draw)
            },
            p,
            1e-5,
        )?;
        checks.push(Check::at_most(format!("model_{name}"), err, 1e-3));
    }
    Ok(checks)
}

/// Per-coordinate Gaussian data `N(mean, std²)` pushed through the sub-VP
/// kernel has a Gaussian marginal with a closed-form score.
#[derive(Clone, Copy, Debug)]
pub struct GaussianTask {
    pub mean: f64,
    pub std: f64,
    pub schedule: BetaSchedule,
}

impl GaussianTask {
    pub fn marginal(&self, t: f64) -> (f64, f64) {
        let c = self.schedule.mean_coeff(t).expect("t in [0, 1]");
        let k = self.schedule.subvp_std(t).expect("t in [0, 1]");
        (c * self.mean, c * c * self.std * self.std + k * k)
    }

    pub fn score(&self, x: &Tensor, t: f64) -> progen_core::Result<Tensor> {
        let (m, var) = self.marginal(t);
        Ok(x.map(|v| -(v - m) / var))
    }
}

/// Mean and (sample) standard deviation over all entries.
pub fn pooled_stats(x: &Tensor) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Reverse sampling with the exact score recovers the data Gaussian.
pub fn analytic() -> Result<Vec<Check>> {
    let task = GaussianTask {
        mean: 2.0,
        std: 0.5,
        schedule: BetaSchedule::default(),
    };
    let spec = SdeSpec::sub_vp(task.schedule);
    let cfg = SamplerConfig {
        n_steps: 1000,
        n_samples: 2000,
        mode: SamplerMode::SubVpOnly,
        denoise_last: true,
    };
    let score = |x: &Tensor, t: f64| task.score(x, t);
    let ens = reverse_trajectory(&spec, &score, &cfg, &[1, 2, 1], 21)?;
    let (m, s) = pooled_stats(&ens.samples);
    Ok(vec![
        Check::at_most("oracle_score_mean", rel(m, task.mean), 0.05),
        Check::at_most("oracle_score_std", rel(s, task.std), 0.10),
    ])
}

/// Windows whose futures are i.i.d. `N(mean, std²)` and whose histories are
/// unrelated noise.
pub fn gaussian_windows(task: &GaussianTask, count: usize, cfg: &ModelConfig, seed: u64) -> Vec<WindowSample> {
    let (l, h, n, d) = (cfg.history_len, cfg.horizon, cfg.n_nodes, cfg.features);
    (0..count)
        .map(|i| {
            let mut r = stream(seed, 0x6a55, i as u64);
            let future = normal_tensor(&mut r, &[h, n, d]).map(|z| task.mean + task.std * z);
            WindowSample {
                history: uniform_tensor(&mut r, &[l, n, d], -1.0, 1.0),
                future,
                markers: PositionMarkers {
                    time_of_day: (0..l).map(|k| (i + k) % cfg.steps_per_day).collect(),
                    day_of_week: vec![i % 7; l],
                },
                start: i,
            }
        })
        .collect()
}
