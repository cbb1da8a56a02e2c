//! The CLI stages as library functions.

use std::path::{Path, PathBuf};

use progen_core::data::{make_windows, split, synth_generate, Normalizer, SeriesDataset, SynthConfig, WindowSample};
use progen_core::graph::{cheb_basis, Graph};
use progen_core::metrics;
use progen_core::sampler::{calibrate_schedule, forecast, ForecastEnsemble, ForecastGuide};
use progen_core::train::{train, KernelMode, LossRow};
use progen_core::{ChebBasis, Error, ModelConfig, ScoreModel, SdeSpec};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{mode_label, ModeName, RunConfig};
use crate::error::Result;
use crate::io;

pub const SPLIT_RATIOS: [usize; 3] = [6, 2, 2];

/// Writes `series.csv`, `edges.csv` and a default `config.toml` into
/// `out_dir`.
pub fn synth(nodes: usize, steps: usize, seed: u64, out_dir: &Path) -> Result<()> {
    let (ds, graph) = synth_generate(&SynthConfig::new(nodes, steps, seed))?;
    io::write_series_csv(&out_dir.join("series.csv"), &ds)?;
    io::write_edge_list(&out_dir.join("edges.csv"), &graph)?;
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    io::write_text(&out_dir.join("config.toml"), &cfg.to_toml())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn label(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Dataset, graph and splits named by a run config.
pub struct Prepared {
    pub graph: Graph,
    pub cheb: ChebBasis,
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
    pub model_config: ModelConfig,
    pub warnings: Vec<String>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let graph = io::load_edge_list(&cfg.data.edges, None)?;
        let (ds, warnings) = io::load_series_csv(&cfg.data.series, Some(graph.n_nodes()), cfg.data.features)?;
        let min_len = cfg.data.history_len + cfg.data.horizon;
        let (train, val, test) = split(&ds, SPLIT_RATIOS, min_len)?;
        let model_config = cfg.model_config(graph.n_nodes(), ds.steps_per_day());
        model_config.validate()?;
        let cheb = cheb_basis(&graph.scaled_laplacian()?, model_config.cheb_order)?;
        Ok(Self {
            graph,
            cheb,
            train,
            val,
            test,
            model_config,
            warnings,
        })
    }

    pub fn split(&self, which: SplitName) -> &SeriesDataset {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn st_spec(&self, cfg: &RunConfig) -> Result<SdeSpec> {
        Ok(SdeSpec::st(cfg.schedule()?, cfg.sde.alpha, self.graph.normalized_adjacency())?)
    }
}

pub struct TrainSummary {
    pub best_epoch: usize,
    pub curve: Vec<LossRow>,
    pub param_count: usize,
}

/// Train from the config and write the best checkpoint to `out` and the
/// loss curve to `loss_out`.
pub fn train_cmd(cfg: &RunConfig, out: &Path, loss_out: &Path, verbose: bool) -> Result<TrainSummary> {
    let prep = Prepared::load(cfg)?;
    for w in &prep.warnings {
        eprintln!("warning: {w}");
    }
    let normalizer = Normalizer::fit(&prep.train)?;
    let (h, f) = (cfg.data.history_len, cfg.data.horizon);
    let train_w = make_windows(&normalizer.apply_dataset(&prep.train)?, h, f)?;
    let val_w = make_windows(&normalizer.apply_dataset(&prep.val)?, h, f)?;
    let tc = cfg.train_config();
    let kernel = match tc.kernel_mode {
        KernelMode::SubVp => SdeSpec::sub_vp(cfg.schedule()?),
        KernelMode::St => prep.st_spec(cfg)?,
    };
    let model = ScoreModel::init(prep.model_config.clone(), cfg.seed)?;
    let param_count = model.param_count();
    let outcome = train(model, &tc, &train_w, &val_w, &prep.cheb, &kernel, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3}  train {:.5}  val {:.5}",
                r.epoch, r.train_loss, r.val_loss
            );
        }
    })?;
    checkpoint::save(
        out,
        &Checkpoint {
            model: outcome.best,
            normalizer,
        },
    )?;
    io::write_loss_curve_csv(
        loss_out,
        &outcome.curve,
        &[
            ("seed", cfg.seed.to_string()),
            ("best_epoch", outcome.best_epoch.to_string()),
            ("params", param_count.to_string()),
            ("config_digest", cfg.digest()),
        ],
    )?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        curve: outcome.curve,
        param_count,
    })
}

pub struct ForecastArgs {
    pub checkpoint: PathBuf,
    pub split: SplitName,
    pub window_index: usize,
    pub out: PathBuf,
}

pub struct ForecastOutput {
    pub ensemble: ForecastEnsemble,
    pub window: WindowSample,
    pub files: Vec<PathBuf>,
}

/// The truth file written next to an ensemble file.
pub fn truth_path(out: &Path) -> PathBuf {
    io::sibling(out, "_truth.csv")
}

pub fn trace_path(out: &Path) -> PathBuf {
    io::sibling(out, "_trace.csv")
}

pub fn best_path(out: &Path) -> PathBuf {
    io::sibling(out, "_best.csv")
}

/// Sample one window and write the ensemble, its ground truth and, in
/// adaptive mode, the selection trace.
pub fn forecast_cmd(cfg: &RunConfig, args: &ForecastArgs) -> Result<ForecastOutput> {
    let prep = Prepared::load(cfg)?;
    let ck = checkpoint::load(&args.checkpoint)?;
    if ck.model.config() != &prep.model_config {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was trained with\n{}but the config describes\n{}",
            ck.model.config().to_kv(),
            prep.model_config.to_kv()
        ))
        .into());
    }
    let windows = make_windows(prep.split(args.split), cfg.data.history_len, cfg.data.horizon)?;
    let window = windows
        .get(args.window_index)
        .ok_or(Error::IndexOutOfRange {
            index: args.window_index,
            len: windows.len(),
        })?
        .clone();
    let sc = cfg.sampler_config();
    let adaptive = cfg.sampler.mode == ModeName::Adaptive;
    let schedule = if adaptive && !cfg.sampler.calibration.is_empty() {
        let traces = cfg
            .sampler
            .calibration
            .iter()
            .map(|p| io::read_trace_selection(p))
            .collect::<Result<Vec<_>>>()?;
        Some(calibrate_schedule(&traces)?)
    } else {
        None
    };
    let guide = ForecastGuide {
        oracle: cfg.sampler.oracle,
        schedule: schedule.as_deref(),
    };
    let st = prep.st_spec(cfg)?;
    let ens = forecast(&ck.model, &prep.cheb, &window, &ck.normalizer, &st, &sc, guide, cfg.seed)?;
    let selection = match (adaptive, &schedule) {
        (false, _) => "none",
        (true, Some(_)) => "calibrated",
        (true, None) => "oracle",
    };
    let meta = vec![
        ("mode", mode_label(cfg.sampler.mode).to_string()),
        ("selection", selection.to_string()),
        ("oracle", (selection == "oracle").to_string()),
        ("seed", cfg.seed.to_string()),
        ("n_steps", sc.n_steps.to_string()),
        ("n_samples", sc.n_samples.to_string()),
        ("alpha", cfg.sde.alpha.to_string()),
        ("split", args.split.label().to_string()),
        ("window_index", args.window_index.to_string()),
        ("window_start", window.start.to_string()),
        ("config_digest", cfg.digest()),
    ];
    let mut files = vec![args.out.clone(), truth_path(&args.out)];
    io::write_ensemble_csv(&args.out, &ens.samples, &meta)?;
    io::write_truth_csv(&files[1], &window.future, &meta)?;
    if adaptive {
        let p = trace_path(&args.out);
        io::write_trace_csv(&p, &ens, &meta)?;
        files.push(p);
    }
    if let Some(best) = &ens.best_tracked {
        let p = best_path(&args.out);
        io::write_truth_csv(&p, best, &meta)?;
        files.push(p);
    }
    Ok(ForecastOutput {
        ensemble: ens,
        window,
        files,
    })
}

/// Score an ensemble file against a truth file; returns the report CSV.
pub fn evaluate_cmd(pred: &Path, truth: &Path, alpha: f64, out: Option<&Path>) -> Result<String> {
    let (ens, meta) = io::read_ensemble_csv(pred)?;
    let (truth, _) = io::read_truth_csv(truth)?;
    let report = metrics::evaluate(&ens, &truth, alpha)?;
    let mut rmeta = vec![
        ("n_samples", report.n_samples.to_string()),
        ("n_points", report.n_points.to_string()),
        ("alpha", alpha.to_string()),
    ];
    for key in ["mode", "selection", "oracle"] {
        if let Some(v) = meta.get(key) {
            rmeta.push((key, v.clone()));
        }
    }
    io::write_report_csv(out, &report, &rmeta)
}
