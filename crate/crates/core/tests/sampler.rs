use progen_core::graph::{Edge, Graph};
use progen_core::linalg::lu_solve;
use progen_core::metrics::mae;
use progen_core::sampler::{
    adaptive_reverse, calibrate_schedule, ensemble_mean, reverse_trajectory, SamplerConfig, SamplerMode,
    Selection,
};
use progen_core::sde::{st_covariance_closed_form, st_propagator};
use progen_core::{BetaSchedule, Error, Result, SdeKind, SdeSpec, Tensor};

fn cfg(n_steps: usize, n_samples: usize, mode: SamplerMode) -> SamplerConfig {
    SamplerConfig {
        n_steps,
        n_samples,
        mode,
        denoise_last: true,
    }
}

/// Exact sub-VP score when every element of the clean data is independently
/// `N(mu, s²)`: the marginal at `t` is `N(c·mu, c²s² + σ²)`.
fn gaussian_score(sched: BetaSchedule, mu: f64, s: f64) -> impl Fn(&Tensor, f64) -> Result<Tensor> {
    move |x: &Tensor, t: f64| {
        let c = sched.mean_coeff(t)?;
        let sig = sched.subvp_std(t)?;
        let var = c * c * s * s + sig * sig;
        Ok(x.map(|v| -(v - c * mu) / var))
    }
}

fn stats(x: &Tensor) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.mean();
    let v = x.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn path_graph(n: usize) -> Graph {
    let edges = (0..n - 1).map(|i| Edge { from: i, to: i + 1, weight: 1.0 }).collect();
    Graph::from_edges(n, edges).unwrap()
}

#[test]
fn standard_normal_target_recovers_unit_std() {
    let sched = BetaSchedule::default();
    let spec = SdeSpec::sub_vp(sched);
    let out = reverse_trajectory(&spec, &gaussian_score(sched, 0.0, 1.0), &cfg(1000, 4000, SamplerMode::SubVpOnly), &[1, 1, 1], 3)
        .unwrap();
    let (m, s) = stats(&out.samples);
    assert!((s - 1.0).abs() < 0.1, "std {s}");
    assert!(m.abs() < 0.1, "mean {m}");
}

#[test]
fn shifted_gaussian_target() {
    let sched = BetaSchedule::default();
    let spec = SdeSpec::sub_vp(sched);
    let out = reverse_trajectory(&spec, &gaussian_score(sched, 2.0, 0.5), &cfg(1000, 2000, SamplerMode::SubVpOnly), &[1, 1, 1], 4)
        .unwrap();
    let (m, s) = stats(&out.samples);
    assert!((m - 2.0).abs() < 0.05 * 2.0, "mean {m}");
    assert!((s - 0.5).abs() < 0.1 * 0.5, "std {s}");
}

#[test]
fn graph_coupled_reverse_recovers_independent_gaussian() {
    // clean data N(mu, s²I) over three nodes; the ST marginal is
    // N(P mu, s²PPᵀ + V(t)) with P the mean propagator
    let sched = BetaSchedule::default();
    let spec = SdeSpec::st(sched, 0.6, path_graph(3).normalized_adjacency()).unwrap();
    let mu = [1.0, -1.0, 0.5];
    let s = 0.4;
    let score = |x: &Tensor, t: f64| -> Result<Tensor> {
        let p = st_propagator(&spec, t)?;
        let v = st_covariance_closed_form(&spec, t)?;
        let pp = p.matmul(&p.transpose()?)?;
        let sigma = pp.scale(s * s).add(&v)?;
        let mean: Vec<f64> = (0..3).map(|i| (0..3).map(|j| p.data()[i * 3 + j] * mu[j]).sum()).collect();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(3) {
            let d: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let sol = lu_solve(sigma.data().to_vec(), 3, d)?;
            out.extend(sol.into_iter().map(|v| -v));
        }
        Tensor::new(x.shape().to_vec(), out)
    };
    let out = reverse_trajectory(&spec, &score, &cfg(1000, 3000, SamplerMode::StOnly), &[1, 3, 1], 5).unwrap();
    let d = out.samples.data();
    for i in 0..3 {
        let col: Vec<f64> = d.iter().skip(i).step_by(3).copied().collect();
        let (m, sd) = stats(&Tensor::from_vec(&[col.len()], col));
        assert!((m - mu[i]).abs() < 0.05, "node {i} mean {m}");
        assert!((sd - s).abs() < 0.1 * s, "node {i} std {sd}");
    }
    // cross-node correlation vanishes for independent targets
    let c01 = d.chunks(3).map(|r| (r[0] - mu[0]) * (r[1] - mu[1])).sum::<f64>() / 3000.0;
    assert!(c01.abs() < 0.02, "cov {c01}");
}

#[test]
fn one_step_one_sample() {
    let sched = BetaSchedule::default();
    let spec = SdeSpec::sub_vp(sched);
    let calls = std::cell::Cell::new(0);
    let score = |x: &Tensor, t: f64| -> Result<Tensor> {
        calls.set(calls.get() + 1);
        assert_eq!(t, 1.0);
        Ok(Tensor::zeros(x.shape()))
    };
    let out = reverse_trajectory(&spec, &score, &cfg(1, 1, SamplerMode::SubVpOnly), &[2, 1, 1], 0).unwrap();
    assert_eq!(calls.get(), 1);
    assert_eq!(out.samples.shape(), &[1, 2, 1, 1]);
}

#[test]
fn seeded_and_sample_count_stable() {
    let sched = BetaSchedule::default();
    let spec = SdeSpec::sub_vp(sched);
    let score = gaussian_score(sched, 0.0, 1.0);
    let a = reverse_trajectory(&spec, &score, &cfg(50, 6, SamplerMode::SubVpOnly), &[2, 2, 1], 9).unwrap();
    let b = reverse_trajectory(&spec, &score, &cfg(50, 6, SamplerMode::SubVpOnly), &[2, 2, 1], 9).unwrap();
    let c = reverse_trajectory(&spec, &score, &cfg(50, 3, SamplerMode::SubVpOnly), &[2, 2, 1], 9).unwrap();
    let d = reverse_trajectory(&spec, &score, &cfg(50, 6, SamplerMode::SubVpOnly), &[2, 2, 1], 10).unwrap();
    assert_eq!(a, b);
    // the first samples do not depend on how many are drawn
    assert_eq!(&a.samples.data()[..12], c.samples.data());
    assert_ne!(a.samples, d.samples);
}

#[test]
fn zero_coupling_is_bit_identical_to_sub_vp() {
    let sched = BetaSchedule::default();
    let sub = SdeSpec::sub_vp(sched);
    let st = SdeSpec::st(sched, 0.0, path_graph(3).normalized_adjacency()).unwrap();
    let score = gaussian_score(sched, 1.0, 0.5);
    let c = cfg(200, 5, SamplerMode::SubVpOnly);
    let a = reverse_trajectory(&sub, &score, &c, &[2, 3, 1], 1).unwrap();
    let b = reverse_trajectory(&st, &score, &c, &[2, 3, 1], 1).unwrap();
    assert_eq!(a.samples.data(), b.samples.data());
    let labels = Tensor::full(&[2, 3, 1], 1.0);
    let ad = adaptive_reverse(&st, &sub, &score, &c, &[2, 3, 1], Selection::Oracle(&labels), 1).unwrap();
    assert!(ad.selected.iter().all(|k| *k == SdeKind::SubVp));
    assert_eq!(ad.samples.data(), a.samples.data());
}

#[test]
fn adaptive_contract() {
    let sched = BetaSchedule::default();
    let sub = SdeSpec::sub_vp(sched);
    let st = SdeSpec::st(sched, 0.8, path_graph(4).normalized_adjacency()).unwrap();
    let score = gaussian_score(sched, 0.7, 0.3);
    let labels = Tensor::full(&[3, 4, 1], 0.7);
    for seed in 0..5 {
        let c = cfg(300, 8, SamplerMode::Adaptive);
        let ad = adaptive_reverse(&st, &sub, &score, &c, &[3, 4, 1], Selection::Oracle(&labels), seed).unwrap();
        assert_eq!(ad.selected.len(), 300);
        assert_eq!(ad.step_metric.len(), 300);
        assert!(ad.best_metric.windows(2).all(|w| w[1] <= w[0]));
        let best = ad.best_metric.last().copied().unwrap();
        let min_step = ad.step_metric.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(best, min_step);
        let tracked = mae(ad.best_tracked.as_ref().unwrap(), &labels).unwrap();
        assert!((tracked - best).abs() < 1e-12);
        // the final step metric is the MAE of the final ensemble mean
        let final_mae = mae(&ensemble_mean(&ad.samples), &labels).unwrap();
        assert!((final_mae - ad.step_metric[299]).abs() < 1e-12);

        // replaying the oracle's own choices reproduces the run
        let replay = adaptive_reverse(
            &st,
            &sub,
            &score,
            &c,
            &[3, 4, 1],
            Selection::Schedule { schedule: &ad.selected, labels: Some(&labels) },
            seed,
        )
        .unwrap();
        assert_eq!(replay.samples, ad.samples);
        assert_eq!(replay.step_metric, ad.step_metric);
    }
}

#[test]
fn schedule_replay_without_labels() {
    let sched = BetaSchedule::default();
    let sub = SdeSpec::sub_vp(sched);
    let st = SdeSpec::st(sched, 0.5, path_graph(2).normalized_adjacency()).unwrap();
    let score = gaussian_score(sched, 0.0, 1.0);
    let c = cfg(20, 3, SamplerMode::Adaptive);
    let all_st = vec![SdeKind::St; 20];
    let r = adaptive_reverse(&st, &sub, &score, &c, &[1, 2, 1], Selection::Schedule { schedule: &all_st, labels: None }, 2)
        .unwrap();
    assert!(r.step_metric.is_empty() && r.best_tracked.is_none());
    let pure = reverse_trajectory(&st, &score, &c, &[1, 2, 1], 2).unwrap();
    assert_eq!(r.samples, pure.samples);
    let short = vec![SdeKind::St; 19];
    let bad = adaptive_reverse(&st, &sub, &score, &c, &[1, 2, 1], Selection::Schedule { schedule: &short, labels: None }, 2);
    assert!(matches!(bad, Err(Error::InvalidConfig(_))));
}

#[test]
fn majority_vote_calibration() {
    use SdeKind::{St, SubVp};
    let traces = vec![vec![St, St, SubVp, St], vec![St, SubVp, SubVp, St], vec![SubVp, SubVp, St, St]];
    assert_eq!(calibrate_schedule(&traces).unwrap(), vec![St, SubVp, SubVp, St]);
    // ties go to sub-VP
    assert_eq!(calibrate_schedule(&traces[..2]).unwrap(), vec![St, SubVp, SubVp, St]);
    assert_eq!(calibrate_schedule(&[vec![St], vec![SubVp]]).unwrap(), vec![SubVp]);
    assert!(matches!(calibrate_schedule(&[]), Err(Error::MissingLabels)));
    assert!(calibrate_schedule(&[vec![St], vec![St, St]]).is_err());
}

#[test]
fn final_denoising_does_not_hurt_on_average() {
    let sched = BetaSchedule::default();
    let spec = SdeSpec::sub_vp(sched);
    let score = gaussian_score(sched, 2.0, 0.5);
    let truth = Tensor::full(&[4, 3, 1], 2.0);
    let (mut with, mut without) = (0.0, 0.0);
    for seed in 0..10 {
        let mut c = cfg(1000, 30, SamplerMode::SubVpOnly);
        let a = reverse_trajectory(&spec, &score, &c, &[4, 3, 1], seed).unwrap();
        c.denoise_last = false;
        let b = reverse_trajectory(&spec, &score, &c, &[4, 3, 1], seed).unwrap();
        with += mae(&ensemble_mean(&a.samples), &truth).unwrap();
        without += mae(&ensemble_mean(&b.samples), &truth).unwrap();
    }
    assert!(with <= without, "{with} vs {without}");
}

#[test]
fn divergent_state_detected() {
    let spec = SdeSpec::sub_vp(BetaSchedule::default());
    let blowup = |x: &Tensor, _t: f64| -> Result<Tensor> { Ok(x.map(|v| 1e9 * (v + 1.0))) };
    let r = reverse_trajectory(&spec, &blowup, &cfg(10, 2, SamplerMode::SubVpOnly), &[1, 1, 1], 0);
    assert!(matches!(r, Err(Error::NonFiniteState { step: 1 })));
}

#[test]
fn invalid_sampler_config() {
    let spec = SdeSpec::sub_vp(BetaSchedule::default());
    let score = gaussian_score(BetaSchedule::default(), 0.0, 1.0);
    assert!(reverse_trajectory(&spec, &score, &cfg(0, 2, SamplerMode::SubVpOnly), &[1, 1, 1], 0).is_err());
    assert!(reverse_trajectory(&spec, &score, &cfg(5, 0, SamplerMode::SubVpOnly), &[1, 1, 1], 0).is_err());
}
