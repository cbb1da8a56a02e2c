use progen_core::autodiff::{gradient_check, Tape, Var};
use progen_core::data::WindowSample;
use progen_core::graph::{cheb_basis, parse_edge_list};
use progen_core::model::{st_block, BlockVars, ModelConfig, PositionMarkers, ScoreModel};
use progen_core::rng::{normal_tensor, stream};
use progen_core::train::{draw_dsm, dsm_loss_from_score, record_score};
use progen_core::{BetaSchedule, SdeSpec, Tensor};
use proptest::prelude::*;

const OP_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    normal_tensor(&mut stream(seed, 1, 2), shape)
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> progen_core::Result<Var>) {
    let err = gradient_check(f, x, EPS).unwrap();
    assert!(err <= OP_TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    let x = rand(1, &[3, 4]);
    let y = rand(2, &[3, 4]);
    let w = rand(3, &[3, 4]);
    check("add", &x, |t, v| {
        let c = t.constant(y.clone());
        let s = t.add(v, c)?;
        t.mean_sq(s)
    });
    check("sub", &x, |t, v| {
        let c = t.constant(y.clone());
        let s = t.sub(c, v)?;
        t.mean_sq(s)
    });
    check("mul", &x, |t, v| {
        let c = t.constant(y.clone());
        let s = t.mul(v, c)?;
        let s = t.mul(s, v)?;
        t.dot_const(s, w.clone())
    });
    check("scale", &x, |t, v| {
        let s = t.scale(v, 0.37)?;
        t.mean_sq(s)
    });
    check("mul_const", &x, |t, v| {
        let s = t.mul_const(v, y.clone())?;
        t.mean_sq(s)
    });
    check("add_const", &x, |t, v| {
        let s = t.add_const(v, &y)?;
        t.mean_sq(s)
    });
    check("silu", &x, |t, v| {
        let s = t.silu(v)?;
        t.dot_const(s, w.clone())
    });
    check("mean_sq", &x, |t, v| t.mean_sq(v));
    check("dot_const", &x, |t, v| t.dot_const(v, w.clone()));
}

#[test]
fn linear_ops() {
    let a = rand(4, &[3, 5]);
    let b = rand(5, &[5, 2]);
    let bias = rand(6, &[2]);
    check("matmul lhs", &a, |t, v| {
        let c = t.constant(b.clone());
        let m = t.matmul(v, c)?;
        t.mean_sq(m)
    });
    check("matmul rhs", &b, |t, v| {
        let c = t.constant(a.clone());
        let m = t.matmul(c, v)?;
        t.mean_sq(m)
    });
    check("add_row_bias", &bias, |t, v| {
        let c = t.constant(a.clone());
        let bc = t_const(t, &b);
        let m = t.matmul(c, bc)?;
        let m = t.add_row_bias(m, v)?;
        t.mean_sq(m)
    });
}

fn t_const(t: &mut Tape, x: &Tensor) -> Var {
    t.constant(x.clone())
}

#[test]
fn convolutions() {
    let x = rand(7, &[2, 3, 6]);
    let w = rand(8, &[4, 3, 3]);
    let b = rand(9, &[4]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        check("conv1d x", &x, |t, v| {
            let (wv, bv) = (t_const(t, &w), t_const(t, &b));
            let y = t.conv1d(v, wv, Some(bv), stride, pad)?;
            t.mean_sq(y)
        });
        check("conv1d w", &w, |t, v| {
            let xv = t_const(t, &x);
            let y = t.conv1d(xv, v, None, stride, pad)?;
            t.mean_sq(y)
        });
        check("conv1d b", &b, |t, v| {
            let (xv, wv) = (t_const(t, &x), t_const(t, &w));
            let y = t.conv1d(xv, wv, Some(v), stride, pad)?;
            t.mean_sq(y)
        });
    }
    check("temporal_conv1d", &x, |t, v| {
        let wv = t_const(t, &w);
        let y = t.temporal_conv1d(v, wv, None)?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    });
}

#[test]
fn structural_ops() {
    let x = rand(10, &[4, 3, 6]);
    let a = rand(11, &[2, 2]);
    let c = rand(12, &[2, 3]);
    let p = rand(13, &[2, 3, 2]);
    let w = rand(14, &[4, 3, 6]);
    let table = rand(15, &[5, 3]);
    check("node_mix", &x, |t, v| {
        let y = t.node_mix(&a, v, 18)?;
        t.dot_const(y, w.clone())
    });
    check("add_cond x", &x, |t, v| {
        let cv = t_const(t, &c);
        let y = t.add_cond(v, cv, 2)?;
        t.mean_sq(y)
    });
    check("add_cond c", &c, |t, v| {
        let xv = t_const(t, &x);
        let y = t.add_cond(xv, v, 2)?;
        t.mean_sq(y)
    });
    check("add_leading p", &p, |t, v| {
        let xv = t_const(t, &x);
        let y = t.add_leading(xv, v, 2)?;
        t.mean_sq(y)
    });
    check("swap_last2", &x, |t, v| {
        let y = t.swap_last2(v)?;
        t.dot_const(y, w.permute(&[0, 2, 1]))
    });
    check("concat_channels", &x, |t, v| {
        let s = t.silu(v)?;
        let y = t.concat_channels(&[v, s])?;
        t.mean_sq(y)
    });
    check("slice_time", &x, |t, v| {
        let y = t.slice_time(v, 2, 5)?;
        t.mean_sq(y)
    });
    check("upsample2", &x, |t, v| {
        let y = t.upsample2(v)?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    });
    check("gather_rows", &table, |t, v| {
        let y = t.gather_rows(v, &[4, 0, 4, 2, 2])?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    });
    check("reshape", &x, |t, v| {
        let y = t.reshape(v, &[12, 6])?;
        let y = t.silu(y)?;
        t.mean_sq(y)
    });
}

fn ring3() -> progen_core::ChebBasis {
    let g = parse_edge_list("0,1,1\n1,2,1\n2,0,1\n", None).unwrap();
    cheb_basis(&g.scaled_laplacian().unwrap(), 2).unwrap()
}

#[test]
fn st_block_weights() {
    let cheb = ring3();
    let (cin, cout, t_len, hd) = (2, 3, 5, 4);
    let x = rand(20, &[3, cin, t_len]);
    let weights = [
        rand(21, &[cout, cin, 3]),
        rand(22, &[cout]),
        rand(23, &[cout, 2 * cout, 1]),
        rand(24, &[cout]),
        rand(25, &[cout, cout, 3]),
        rand(26, &[cout]),
        rand(27, &[cout, cin, 1]),
        rand(28, &[cout]),
        rand(29, &[hd, cout]),
        rand(30, &[cout]),
    ];
    let cond = rand(31, &[1, hd]);
    for which in 0..weights.len() {
        check("st_block", &weights[which], |t, v| {
            let mut vs: Vec<Var> = weights.iter().map(|w| t.constant(w.clone())).collect();
            vs[which] = v;
            let bv = BlockVars {
                ta: (vs[0], vs[1]),
                cond: Some((vs[8], vs[9])),
                cheb: (vs[2], vs[3]),
                tb: (vs[4], vs[5]),
                res: Some((vs[6], vs[7])),
            };
            let xv = t.constant(x.clone());
            let cv = t.constant(cond.clone());
            let y = st_block(t, xv, &cheb, &bv, Some(cv))?;
            t.dot_const(y, Tensor::full(&[3, cout, t_len], 1.0))
        });
    }
}

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
fn tiny_model_dsm_loss_every_parameter() {
    let cheb = ring3();
    let model = ScoreModel::init(tiny(), 17).unwrap();
    let mut r = stream(40, 0, 0);
    let windows: Vec<WindowSample> = (0..2)
        .map(|i| WindowSample {
            history: normal_tensor(&mut r, &[4, 3, 1]),
            future: normal_tensor(&mut r, &[4, 3, 1]),
            markers: PositionMarkers {
                time_of_day: vec![i, 2, 3, 5],
                day_of_week: vec![0, 6, 6, i],
            },
            start: 0,
        })
        .collect();
    let batch: Vec<&WindowSample> = windows.iter().collect();
    let spec = SdeSpec::sub_vp(BetaSchedule::default());
    let draw = draw_dsm(&batch, &spec, 0.05, &mut r).unwrap();
    for (i, (name, p)) in model.params().iter().enumerate() {
        let err = gradient_check(
            |tape, leaf| {
                let mut vars = model.bind(tape, false);
                vars[i] = leaf;
                let s = record_score(&model, tape, &vars, &cheb, &draw)?;
                dsm_loss_from_score(tape, s, &draw)
            },
            p,
            EPS,
        )
        .unwrap();
        assert!(err <= 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn position_tables_receive_gradient() {
    let cheb = ring3();
    let model = ScoreModel::init(tiny(), 2).unwrap();
    let mut r = stream(41, 0, 0);
    let w = WindowSample {
        history: normal_tensor(&mut r, &[4, 3, 1]),
        future: normal_tensor(&mut r, &[4, 3, 1]),
        markers: PositionMarkers {
            time_of_day: vec![1, 2, 3, 4],
            day_of_week: vec![2, 2, 2, 2],
        },
        start: 0,
    };
    let spec = SdeSpec::sub_vp(BetaSchedule::default());
    let draw = draw_dsm(&[&w], &spec, 0.05, &mut r).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let s = record_score(&model, &mut tape, &vars, &cheb, &draw).unwrap();
    let loss = dsm_loss_from_score(&mut tape, s, &draw).unwrap();
    let grads = tape.backward(loss).unwrap();
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    let tod = grads.get(vars[names.iter().position(|n| *n == "pos.tod").unwrap()]);
    let dow = grads.get(vars[names.iter().position(|n| *n == "pos.dow").unwrap()]);
    let row = |g: &Tensor, i: usize| g.data()[i * 2..i * 2 + 2].iter().map(|v| v.abs()).sum::<f64>();
    assert!(row(&tod, 1) > 0.0 && row(&dow, 2) > 0.0);
    assert_eq!(row(&tod, 0), 0.0, "unused rows get no gradient");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradient_any_geometry(
        m in 1usize..3, cin in 1usize..4, cout in 1usize..4, t_in in 3usize..8,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        prop_assume!(t_in + 2 * pad >= k);
        let x = rand(seed, &[m, cin, t_in]);
        let w = rand(seed + 1, &[cout, cin, k]);
        let err = gradient_check(|t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv1d(v, wv, None, stride, pad)?;
            t.mean_sq(y)
        }, &x, EPS).unwrap();
        prop_assert!(err <= OP_TOL, "err {err:e}");
    }

    #[test]
    fn node_mix_gradient_any_size(n in 1usize..5, b in 1usize..3, inner in 1usize..4, seed in 0u64..1000) {
        let a = rand(seed, &[n, n]);
        let x = rand(seed + 1, &[b, n, inner]);
        let err = gradient_check(|t, v| {
            let y = t.node_mix(&a, v, inner)?;
            let y = t.silu(y)?;
            t.mean_sq(y)
        }, &x, EPS).unwrap();
        prop_assert!(err <= OP_TOL, "err {err:e}");
    }
}
