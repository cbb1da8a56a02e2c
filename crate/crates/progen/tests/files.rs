use std::fs;

use progen::checkpoint::{self, Checkpoint, VERSION};
use progen::io;
use progen::CliError;
use progen_core::data::{synth_generate, Normalizer, SeriesDataset, SynthConfig};
use progen_core::metrics::EvalReport;
use progen_core::rng::{normal_tensor, stream};
use progen_core::sampler::ForecastEnsemble;
use progen_core::{ModelConfig, ScoreModel, SdeKind, Tensor};
use proptest::prelude::*;
use tempfile::TempDir;

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
        features: 2,
        steps_per_day: 6,
    }
}

fn checkpoint() -> Checkpoint {
    Checkpoint {
        model: ScoreModel::init(tiny(), 4).unwrap(),
        normalizer: Normalizer {
            mean: vec![51.25, -0.1],
            std: vec![13.0 / 3.0, 1e-3],
        },
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("sub/model.ckpt");
    let ck = checkpoint();
    checkpoint::save(&p, &ck).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(checkpoint::load_expecting(&p, &tiny()).unwrap(), ck);
}

#[test]
fn truncated_checkpoints_are_corrupt() {
    let bytes = checkpoint::encode(&checkpoint());
    for cut in [0, 3, 7, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        let r = checkpoint::decode(&bytes[..cut]);
        assert!(matches!(r, Err(CliError::CorruptPayload(_))), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(checkpoint::decode(&extra), Err(CliError::CorruptPayload(_))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad_magic), Err(CliError::CorruptPayload(_))));
}

#[test]
fn version_and_config_mismatches() {
    let mut bytes = checkpoint::encode(&checkpoint());
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(checkpoint::decode(&bytes), Err(CliError::VersionMismatch(_))));

    let dir = TempDir::new().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&p, &checkpoint()).unwrap();
    let mut other = tiny();
    other.hidden_dim = 8;
    assert!(matches!(checkpoint::load_expecting(&p, &other), Err(CliError::VersionMismatch(_))));
}

#[test]
fn series_csv_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("series.csv");
    let (ds, _) = synth_generate(&SynthConfig::new(4, 50, 1)).unwrap();
    io::write_series_csv(&p, &ds).unwrap();
    let (back, warnings) = io::load_series_csv(&p, Some(4), 1).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(back, ds);
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("n0_f0,n1_f0"));
}

#[test]
fn series_csv_defaults_and_errors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("s.csv");
    fs::write(&p, "a,b,c,d\n1,2,3,4\n5,6,7,8\n").unwrap();
    let (ds, warnings) = io::load_series_csv(&p, None, 2).unwrap();
    assert_eq!(warnings.len(), 2);
    assert_eq!(ds.steps_per_day(), 288);
    assert_eq!(ds.values().shape(), &[2, 2, 2]);
    assert_eq!(ds.values().data()[2], 3.0);

    match io::load_series_csv(&p, Some(3), 1) {
        Err(CliError::ColumnCountMismatch { expected: 3, found: 4, .. }) => {}
        other => panic!("{other:?}"),
    }
    fs::write(&p, "# steps_per_day=24\na,b\n1,2\n3\n").unwrap();
    match io::load_series_csv(&p, None, 1) {
        Err(CliError::ColumnCountMismatch { line: 4, expected: 2, found: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
    fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
    match io::load_series_csv(&p, None, 1) {
        Err(CliError::Parse { line: 3, message, .. }) => assert!(message.contains("column b"), "{message}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(io::load_series_csv(&dir.path().join("missing.csv"), None, 1), Err(CliError::Io { .. })));
}

#[test]
fn edge_list_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("edges.csv");
    let (_, g) = synth_generate(&SynthConfig::new(8, 10, 1)).unwrap();
    io::write_edge_list(&p, &g).unwrap();
    let back = io::load_edge_list(&p, None).unwrap();
    assert_eq!(back, g);
    fs::write(&p, "0,1,1\n1,x,1\n").unwrap();
    assert!(matches!(io::load_edge_list(&p, None), Err(CliError::Parse { line: 2, .. })));
}

#[test]
fn ensemble_and_truth_round_trip() {
    let dir = TempDir::new().unwrap();
    let ens = normal_tensor(&mut stream(1, 0, 0), &[3, 2, 4, 2]);
    let truth = normal_tensor(&mut stream(2, 0, 0), &[2, 4, 2]);
    let pe = dir.path().join("pred.csv");
    let pt = dir.path().join("pred_truth.csv");
    io::write_ensemble_csv(&pe, &ens, &[("mode", "adaptive".into()), ("seed", "3".into())]).unwrap();
    io::write_truth_csv(&pt, &truth, &[]).unwrap();
    let (e2, meta) = io::read_ensemble_csv(&pe).unwrap();
    let (t2, _) = io::read_truth_csv(&pt).unwrap();
    assert_eq!(e2, ens);
    assert_eq!(t2, truth);
    assert_eq!(meta.get("mode").map(String::as_str), Some("adaptive"));
    let text = fs::read_to_string(&pe).unwrap();
    assert_eq!(text.lines().count(), 2 + 3 * 2 * 4 * 2);
    assert_eq!(text.lines().nth(1), Some("sample,horizon,node,feature,value"));
}

#[test]
fn indexed_csv_errors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("t.csv");
    fs::write(&p, "horizon,node,feature,value\n0,0,0,1\n0,0,0,2\n").unwrap();
    assert!(matches!(io::read_truth_csv(&p), Err(CliError::Parse { line: 3, .. })));
    fs::write(&p, "horizon,node,feature,value\n0,0,0,1\n1,1,0,2\n").unwrap();
    assert!(matches!(io::read_truth_csv(&p), Err(CliError::Parse { .. })));
    fs::write(&p, "h,n,f,v\n0,0,0,1\n").unwrap();
    assert!(matches!(io::read_truth_csv(&p), Err(CliError::Parse { line: 1, .. })));
    fs::write(&p, "horizon,node,feature,value\n").unwrap();
    assert!(io::read_truth_csv(&p).is_err());
}

#[test]
fn report_and_curve_files() {
    let dir = TempDir::new().unwrap();
    let report = EvalReport {
        mae: 1.5,
        rmse: 2.0,
        crps: 0.75,
        mis: 4.0,
        crps_normalized: 0.1,
        n_points: 6,
        n_samples: 3,
        interval_alpha: 0.05,
    };
    let p = dir.path().join("r.csv");
    let text = io::write_report_csv(Some(&p), &report, &[("oracle", "true".into())]).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# oracle=true");
    assert_eq!(&lines[1..], &["metric,value", "mae,1.5", "rmse,2", "crps,0.75", "mis,4", "crps_normalized,0.1"]);
    assert_eq!(io::parse_metadata(&text).get("oracle").map(String::as_str), Some("true"));
}

#[test]
fn trace_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("trace.csv");
    let ens = ForecastEnsemble {
        samples: Tensor::zeros(&[1, 1, 1, 1]),
        best_tracked: None,
        step_metric: vec![],
        best_metric: vec![],
        selected: vec![SdeKind::St, SdeKind::SubVp, SdeKind::St],
    };
    io::write_trace_csv(&p, &ens, &[]).unwrap();
    assert_eq!(io::read_trace_selection(&p).unwrap(), ens.selected);
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().nth(2), Some("1,1,st,,"));
}

#[test]
fn sibling_paths() {
    let p = std::path::Path::new("/tmp/out/pred.csv");
    assert_eq!(io::sibling(p, "_truth.csv"), std::path::Path::new("/tmp/out/pred_truth.csv"));
    assert_eq!(io::sibling(std::path::Path::new("model.ckpt"), "_loss.csv"), std::path::Path::new("model_loss.csv"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn series_round_trip_any_values(t in 1usize..20, n in 1usize..4, d in 1usize..3, seed in 0u64..1000, spd in 1usize..300, wd in 0usize..7) {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("s.csv");
        let v = normal_tensor(&mut stream(seed, 0, 0), &[t, n, d]).scale(1e3);
        let ds = SeriesDataset::new(v, spd, wd).unwrap();
        io::write_series_csv(&p, &ds).unwrap();
        let (back, _) = io::load_series_csv(&p, Some(n), d).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn checkpoint_decode_never_panics(cut in 0usize..2000, flip in 0usize..2000, byte in any::<u8>()) {
        let mut bytes = checkpoint::encode(&checkpoint());
        let i = flip % bytes.len();
        bytes[i] = byte;
        bytes.truncate(cut.min(bytes.len()));
        let _ = checkpoint::decode(&bytes);
    }
}
