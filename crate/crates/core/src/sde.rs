//! Forward SDE family: VP, sub-VP and the graph-coupled spatiotemporal (ST)
//! SDE `dX = −½β(t)(X − αÂX)dt + G(t)dw` with
//! `G(t)² = β(t)(1 − e^{−2∫β})`, plus their perturbation kernels.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{self, neighbor_mean_effect};
use crate::linalg::SymEigen;
use crate::tensor::Tensor;

/// Linear noise schedule `β(t) = β₀ + t(β₁ − β₀)` on `t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

impl BetaSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta1 >= beta0 && beta1.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "beta schedule needs 0 < beta0 <= beta1, got ({beta0}, {beta1})"
            )));
        }
        Ok(Self { beta0, beta1 })
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.beta0 + t * (self.beta1 - self.beta0))
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn beta_integral(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.integral_unchecked(t))
    }

    fn integral_unchecked(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    /// Diffusion coefficient shared by the sub-VP and ST SDEs,
    /// `sqrt(β(t)(1 − e^{−2B(t)}))`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        let b = self.beta(t)?;
        let big_b = self.integral_unchecked(t);
        Ok((b * -(-2.0 * big_b).exp_m1()).sqrt())
    }

    /// Sub-VP marginal standard deviation `1 − e^{−B(t)}`.
    pub fn subvp_std(&self, t: f64) -> Result<f64> {
        Ok(-(-self.beta_integral(t)?).exp_m1())
    }

    /// Sub-VP mean decay factor `e^{−B(t)/2}`.
    pub fn mean_coeff(&self, t: f64) -> Result<f64> {
        Ok((-0.5 * self.beta_integral(t)?).exp())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SdeKind {
    Vp,
    SubVp,
    St,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeSpec {
    kind: SdeKind,
    schedule: BetaSchedule,
    alpha: f64,
    adjacency: Option<Tensor>,
    eigen: Option<SymEigen>,
}

impl SdeSpec {
    pub fn vp(schedule: BetaSchedule) -> Self {
        Self::plain(SdeKind::Vp, schedule)
    }

    pub fn sub_vp(schedule: BetaSchedule) -> Self {
        Self::plain(SdeKind::SubVp, schedule)
    }

    fn plain(kind: SdeKind, schedule: BetaSchedule) -> Self {
        Self {
            kind,
            schedule,
            alpha: 0.0,
            adjacency: None,
            eigen: None,
        }
    }

    /// Spatiotemporal SDE over the normalized adjacency `a_norm`; rejects
    /// non-symmetric operators and unstable `I − αÂ`.
    pub fn st(schedule: BetaSchedule, alpha: f64, a_norm: Tensor) -> Result<Self> {
        let eigen = graph::drift_eigen(&a_norm, alpha)?;
        let min = eigen.values.first().copied().unwrap_or(1.0);
        if min <= 0.0 {
            return Err(Error::Unstable { min_real_eig: min });
        }
        Ok(Self {
            kind: SdeKind::St,
            schedule,
            alpha,
            adjacency: Some(a_norm),
            eigen: Some(eigen),
        })
    }

    pub fn kind(&self) -> SdeKind {
        self.kind
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn adjacency(&self) -> Option<&Tensor> {
        self.adjacency.as_ref()
    }

    /// The sub-VP SDE on the same schedule.
    pub fn to_sub_vp(&self) -> SdeSpec {
        Self::sub_vp(self.schedule)
    }

    pub fn diffusion(&self, t: f64) -> Result<f64> {
        match self.kind {
            SdeKind::Vp => Ok(self.schedule.beta(t)?.sqrt()),
            SdeKind::SubVp | SdeKind::St => self.schedule.diffusion_coeff(t),
        }
    }

    /// `f(x, t)`: `−½β(t)(x − αÂx)` for ST, `−½β(t)x` otherwise.
    pub fn drift(&self, x: &Tensor, t: f64, node_axis: usize) -> Result<Tensor> {
        let half_beta = -0.5 * self.schedule.beta(t)?;
        match (self.kind, &self.adjacency) {
            (SdeKind::St, Some(a)) => {
                let m = neighbor_mean_effect(a, x, node_axis)?;
                let alpha = self.alpha;
                let data = x
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(&xv, &mv)| half_beta * (xv - alpha * mv))
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            _ => Ok(x.scale(half_beta)),
        }
    }
}

/// Free-function form of [`SdeSpec::drift`].
pub fn drift(spec: &SdeSpec, x: &Tensor, t: f64, node_axis: usize) -> Result<Tensor> {
    spec.drift(x, t, node_axis)
}

/// Isotropic Gaussian marginal `N(mean, std²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalParams {
    pub mean: Tensor,
    pub std: f64,
}

pub fn subvp_marginal(schedule: &BetaSchedule, x0: &Tensor, t: f64) -> Result<MarginalParams> {
    Ok(MarginalParams {
        mean: x0.scale(schedule.mean_coeff(t)?),
        std: schedule.subvp_std(t)?,
    })
}

pub fn vp_marginal(schedule: &BetaSchedule, x0: &Tensor, t: f64) -> Result<MarginalParams> {
    let b = schedule.beta_integral(t)?;
    Ok(MarginalParams {
        mean: x0.scale((-0.5 * b).exp()),
        std: (-(-b).exp_m1()).sqrt(),
    })
}

/// Gaussian marginal of the ST SDE: mean `P(t)x₀` with propagator
/// `P(t) = exp(−½B(t)(I−αÂ))`, and node covariance `V(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StMarginal {
    pub propagator: Tensor,
    pub mean: Tensor,
    pub covariance: Tensor,
}

fn st_parts(spec: &SdeSpec) -> Result<(&Tensor, &SymEigen)> {
    match (spec.kind, &spec.adjacency, &spec.eigen) {
        (SdeKind::St, Some(a), Some(e)) => Ok((a, e)),
        _ => Err(Error::InvalidArgument("expected an ST SDE".into())),
    }
}

pub fn st_propagator(spec: &SdeSpec, t: f64) -> Result<Tensor> {
    let (_, eig) = st_parts(spec)?;
    let b = spec.schedule.beta_integral(t)?;
    Ok(eig.apply_fn(|l| (-0.5 * b * l).exp()))
}

/// Mean by eigendecomposition; covariance by RK4 on
/// `dV/dt = −½β(t)[FV + VFᵀ] + G(t)²I`, `F = I − αÂ`, `V(0) = 0`, with
/// steps of at most 1/1000.
pub fn st_marginal(spec: &SdeSpec, x0: &Tensor, t: f64, node_axis: usize) -> Result<StMarginal> {
    let propagator = st_propagator(spec, t)?;
    let mean = neighbor_mean_effect(&propagator, x0, node_axis)?;
    let covariance = st_covariance_rk4(spec, t, 1000)?;
    Ok(StMarginal {
        propagator,
        mean,
        covariance,
    })
}

/// RK4 integration of the ST covariance ODE with `steps_per_unit` steps per
/// unit diffusion time.
pub fn st_covariance_rk4(spec: &SdeSpec, t: f64, steps_per_unit: usize) -> Result<Tensor> {
    let (a, _) = st_parts(spec)?;
    check_t(t)?;
    let n = a.dim(0);
    let mut f = a.scale(-spec.alpha);
    for i in 0..n {
        f.data_mut()[i * n + i] += 1.0;
    }
    let sched = spec.schedule;
    let rhs = |s: f64, v: &Tensor| -> Tensor {
        let s = s.clamp(0.0, 1.0);
        let beta = sched.beta0 + s * (sched.beta1 - sched.beta0);
        let g2 = beta * -(-2.0 * sched.integral_unchecked(s)).exp_m1();
        let fv = f.matmul(v).expect("square");
        // V symmetric ⇒ V Fᵀ = (F V)ᵀ
        let mut out = fv.add(&fv.transpose().expect("matrix")).expect("shape");
        out = out.scale(-0.5 * beta);
        for i in 0..n {
            out.data_mut()[i * n + i] += g2;
        }
        out
    };
    let steps = ((t * steps_per_unit as f64).ceil() as usize).max(1);
    let h = t / steps as f64;
    let mut v = Tensor::zeros(&[n, n]);
    if t == 0.0 {
        return Ok(v);
    }
    for k in 0..steps {
        let s = k as f64 * h;
        let k1 = rhs(s, &v);
        let mut tmp = v.clone();
        tmp.axpy(0.5 * h, &k1)?;
        let k2 = rhs(s + 0.5 * h, &tmp);
        let mut tmp = v.clone();
        tmp.axpy(0.5 * h, &k2)?;
        let k3 = rhs(s + 0.5 * h, &tmp);
        let mut tmp = v.clone();
        tmp.axpy(h, &k3)?;
        let k4 = rhs(s + h, &tmp);
        v.axpy(h / 6.0, &k1)?;
        v.axpy(h / 3.0, &k2)?;
        v.axpy(h / 3.0, &k3)?;
        v.axpy(h / 6.0, &k4)?;
    }
    Ok(v)
}

/// Variance of one eigenmode (eigenvalue `λ` of `I − αÂ`) after integrated
/// noise `B`: `∫₀ᴮ e^{−λ(B−u)}(1 − e^{−2u}) du`.
pub fn st_mode_variance(lambda: f64, big_b: f64) -> f64 {
    let first = if lambda.abs() < 1e-9 {
        big_b * (1.0 - 0.5 * lambda * big_b)
    } else {
        -(-lambda * big_b).exp_m1() / lambda
    };
    let d = lambda - 2.0;
    let g = if d.abs() < 1e-9 {
        big_b * (1.0 + 0.5 * d * big_b)
    } else {
        (d * big_b).exp_m1() / d
    };
    first - (-lambda * big_b).exp() * g
}

/// Closed-form ST covariance `Q diag(w(λ_i, B(t))) Qᵀ`.
pub fn st_covariance_closed_form(spec: &SdeSpec, t: f64) -> Result<Tensor> {
    let (_, eig) = st_parts(spec)?;
    let b = spec.schedule.beta_integral(t)?;
    Ok(eig.apply_fn(|l| st_mode_variance(l, b)))
}

/// `∇ log N(x̃; mean, σ²I) = −(x̃ − mean)/σ²`.
pub fn gaussian_score_target(x_tilde: &Tensor, mean: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::ZeroSigma(sigma));
    }
    let inv = -1.0 / (sigma * sigma);
    Ok(x_tilde.sub(mean)?.scale(inv))
}

/// A perturbed training target.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub x_tilde: Tensor,
    pub target_score: Tensor,
    /// Per-element kernel standard deviation.
    pub sigma: Tensor,
}

/// `x̃ = m + σ·z` and `target = −z/σ` under the kernel of `spec`. For the ST
/// SDE the kernel uses the diagonal of the node covariance.
pub fn perturb_sample(
    spec: &SdeSpec,
    x0: &Tensor,
    t: f64,
    noise: &Tensor,
    node_axis: usize,
) -> Result<Perturbed> {
    if noise.shape() != x0.shape() {
        return Err(shape_mismatch("perturb_sample", x0.shape(), noise.shape()));
    }
    let (mean, sigma) = match spec.kind {
        SdeKind::SubVp | SdeKind::Vp => {
            let m = if spec.kind == SdeKind::SubVp {
                subvp_marginal(&spec.schedule, x0, t)?
            } else {
                vp_marginal(&spec.schedule, x0, t)?
            };
            if !(m.std > 0.0) {
                return Err(Error::ZeroSigma(t));
            }
            (m.mean, Tensor::full(x0.shape(), m.std))
        }
        SdeKind::St => {
            let (_, eig) = st_parts(spec)?;
            let b = spec.schedule.beta_integral(t)?;
            let prop = eig.apply_fn(|l| (-0.5 * b * l).exp());
            let mean = neighbor_mean_effect(&prop, x0, node_axis)?;
            let cov = eig.apply_fn(|l| st_mode_variance(l, b));
            let n = cov.dim(0);
            let node_std: Vec<f64> = (0..n).map(|i| cov.data()[i * n + i].max(0.0).sqrt()).collect();
            if node_std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::ZeroSigma(t));
            }
            let inner: usize = x0.shape()[node_axis + 1..].iter().product();
            let mut sig = vec![0.0; x0.len()];
            for (i, s) in sig.iter_mut().enumerate() {
                *s = node_std[(i / inner) % n];
            }
            (mean, Tensor::from_vec(x0.shape(), sig))
        }
    };
    let scaled = noise.mul(&sigma)?;
    let x_tilde = mean.add(&scaled)?;
    let target_score = Tensor::from_vec(
        x0.shape(),
        noise
            .data()
            .iter()
            .zip(sigma.data())
            .map(|(&z, &s)| -z / s)
            .collect(),
    );
    Ok(Perturbed {
        x_tilde,
        target_score,
        sigma,
    })
}
