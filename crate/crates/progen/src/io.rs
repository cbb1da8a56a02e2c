//! CSV file formats.
//!
//! Every file may start with `# key=value,key=value` metadata comments.
//! Floats are written in Rust's shortest round-trip form, so identical
//! values always produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use progen_core::data::{SeriesDataset, DEFAULT_STEPS_PER_DAY};
use progen_core::graph::{parse_edge_list, Graph};
use progen_core::metrics::EvalReport;
use progen_core::sampler::ForecastEnsemble;
use progen_core::train::LossRow;
use progen_core::{SdeKind, Tensor};

use crate::error::{CliError, Result};

pub type Metadata = BTreeMap<String, String>;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Keys and values from all leading `# k=v,k=v` lines.
pub fn parse_metadata(text: &str) -> Metadata {
    let mut meta = Metadata::new();
    for line in text.lines().map(str::trim) {
        let Some(body) = line.strip_prefix('#') else {
            if line.is_empty() {
                continue;
            }
            break;
        };
        for pair in body.split(',') {
            if let Some((k, v)) = pair.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    meta
}

fn metadata_line(meta: &[(&str, String)]) -> String {
    let body: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(","))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn parse_cell<T: std::str::FromStr>(path: &Path, line: usize, column: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("column {column}: invalid value {v:?}"),
    })
}

fn meta_usize(path: &Path, meta: &Metadata, key: &str) -> Result<Option<usize>> {
    meta.get(key)
        .map(|v| parse_cell(path, 1, key, v))
        .transpose()
}

/// Series CSV: a header row, then one row per time step holding the
/// `N·D` values in node-major order. The first comment line carries
/// `steps_per_day` and `start_weekday`; missing values fall back to 288 and
/// 0 with a warning. Returns the dataset and any warnings.
pub fn load_series_csv(
    path: &Path,
    n_nodes: Option<usize>,
    features: usize,
) -> Result<(SeriesDataset, Vec<String>)> {
    let text = read_text(path)?;
    let meta = parse_metadata(&text);
    let mut warnings = Vec::new();
    let steps_per_day = match meta_usize(path, &meta, "steps_per_day")? {
        Some(v) => v,
        None => {
            warnings.push(format!(
                "{}: no steps_per_day metadata, assuming {DEFAULT_STEPS_PER_DAY}",
                path.display()
            ));
            DEFAULT_STEPS_PER_DAY
        }
    };
    let start_weekday = match meta_usize(path, &meta, "start_weekday")? {
        Some(v) => v,
        None => {
            warnings.push(format!("{}: no start_weekday metadata, assuming 0", path.display()));
            0
        }
    };
    let mut rdr = reader(&text);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = header.len();
    let expected = match n_nodes {
        Some(n) => n * features,
        None => cols,
    };
    if features == 0 || cols != expected || cols % features != 0 {
        return Err(CliError::ColumnCountMismatch {
            path: path.to_path_buf(),
            line: header.position().map_or(1, |p| p.line() as usize),
            expected,
            found: cols,
        });
    }
    let mut values = Vec::new();
    let mut steps = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != cols {
            return Err(CliError::ColumnCountMismatch {
                path: path.to_path_buf(),
                line,
                expected: cols,
                found: rec.len(),
            });
        }
        for (c, v) in rec.iter().enumerate() {
            values.push(parse_cell::<f64>(path, line, &header[c], v)?);
        }
        steps += 1;
    }
    let n = cols / features;
    let tensor = Tensor::new(vec![steps, n, features], values)?;
    Ok((SeriesDataset::new(tensor, steps_per_day, start_weekday)?, warnings))
}

pub fn write_series_csv(path: &Path, ds: &SeriesDataset) -> Result<()> {
    let (n, d) = (ds.n_nodes(), ds.features());
    let mut out = metadata_line(&[
        ("steps_per_day", ds.steps_per_day().to_string()),
        ("start_weekday", ds.start_weekday().to_string()),
    ]);
    let header: Vec<String> = (0..n)
        .flat_map(|i| (0..d).map(move |j| format!("n{i}_f{j}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in ds.values().data().chunks(n * d) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_edge_list(path: &Path, n_nodes: Option<usize>) -> Result<Graph> {
    let text = read_text(path)?;
    parse_edge_list(&text, n_nodes).map_err(|e| match e {
        progen_core::Error::Parse { line, message } => CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other.into(),
    })
}

pub fn write_edge_list(path: &Path, g: &Graph) -> Result<()> {
    let mut out = String::from("from,to,weight\n");
    writeln!(out, "# nodes={}", g.n_nodes()).unwrap();
    for e in g.edges() {
        writeln!(out, "{},{},{}", e.from, e.to, e.weight).unwrap();
    }
    write_text(path, &out)
}

/// Rows `i0,…,ik,value` over every index of `t`, row-major.
fn indexed_rows(out: &mut String, t: &Tensor) {
    let shape = t.shape();
    let mut idx = vec![0usize; shape.len()];
    for &v in t.data() {
        for i in &idx {
            write!(out, "{i},").unwrap();
        }
        writeln!(out, "{v}").unwrap();
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Reads an indexed CSV whose header is `columns` (index columns then
/// `value`) into a dense tensor; every index combination must appear once.
fn read_indexed(path: &Path, columns: &[&str]) -> Result<(Tensor, Metadata)> {
    let text = read_text(path)?;
    let meta = parse_metadata(&text);
    let mut rdr = reader(&text);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != columns {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: header.position().map_or(1, |p| p.line() as usize),
            message: format!("expected header {}", columns.join(",")),
        });
    }
    let rank = columns.len() - 1;
    let mut rows: Vec<(Vec<usize>, f64, usize)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != columns.len() {
            return Err(CliError::ColumnCountMismatch {
                path: path.to_path_buf(),
                line,
                expected: columns.len(),
                found: rec.len(),
            });
        }
        let idx = (0..rank)
            .map(|c| parse_cell(path, line, columns[c], &rec[c]))
            .collect::<Result<Vec<usize>>>()?;
        let v = parse_cell(path, line, "value", &rec[rank])?;
        rows.push((idx, v, line));
    }
    let mut shape = vec![0usize; rank];
    for (idx, _, _) in &rows {
        for (s, &i) in shape.iter_mut().zip(idx) {
            *s = (*s).max(i + 1);
        }
    }
    let total: usize = shape.iter().product();
    let mut data = vec![f64::NAN; total];
    let mut seen = vec![false; total];
    for (idx, v, line) in &rows {
        let flat = idx.iter().zip(&shape).fold(0, |acc, (&i, &s)| acc * s + i);
        if seen[flat] {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("duplicate index {idx:?}"),
            });
        }
        seen[flat] = true;
        data[flat] = *v;
    }
    if rows.is_empty() || rows.len() != total {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{} rows do not fill shape {shape:?}", rows.len()),
        });
    }
    Ok((Tensor::new(shape, data)?, meta))
}

pub const ENSEMBLE_COLUMNS: [&str; 5] = ["sample", "horizon", "node", "feature", "value"];
pub const TRUTH_COLUMNS: [&str; 4] = ["horizon", "node", "feature", "value"];

/// Ensemble `[S, H, N, D]` with metadata.
pub fn write_ensemble_csv(path: &Path, samples: &Tensor, meta: &[(&str, String)]) -> Result<()> {
    let mut out = metadata_line(meta);
    out.push_str(&ENSEMBLE_COLUMNS.join(","));
    out.push('\n');
    indexed_rows(&mut out, samples);
    write_text(path, &out)
}

pub fn read_ensemble_csv(path: &Path) -> Result<(Tensor, Metadata)> {
    read_indexed(path, &ENSEMBLE_COLUMNS)
}

/// Ground truth `[H, N, D]`.
pub fn write_truth_csv(path: &Path, truth: &Tensor, meta: &[(&str, String)]) -> Result<()> {
    let mut out = metadata_line(meta);
    out.push_str(&TRUTH_COLUMNS.join(","));
    out.push('\n');
    indexed_rows(&mut out, truth);
    write_text(path, &out)
}

pub fn read_truth_csv(path: &Path) -> Result<(Tensor, Metadata)> {
    read_indexed(path, &TRUTH_COLUMNS)
}

pub fn write_report_csv(path: Option<&Path>, report: &EvalReport, meta: &[(&str, String)]) -> Result<String> {
    let mut out = metadata_line(meta);
    out.push_str("metric,value\n");
    for (k, v) in [
        ("mae", report.mae),
        ("rmse", report.rmse),
        ("crps", report.crps),
        ("mis", report.mis),
        ("crps_normalized", report.crps_normalized),
    ] {
        writeln!(out, "{k},{v}").unwrap();
    }
    if let Some(p) = path {
        write_text(p, &out)?;
    }
    Ok(out)
}

pub fn write_loss_curve_csv(path: &Path, curve: &[LossRow], meta: &[(&str, String)]) -> Result<()> {
    let mut out = metadata_line(meta);
    out.push_str("epoch,train_loss,val_loss\n");
    for r in curve {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss).unwrap();
    }
    write_text(path, &out)
}

pub fn kind_name(kind: SdeKind) -> &'static str {
    match kind {
        SdeKind::Vp => "vp",
        SdeKind::SubVp => "subvp",
        SdeKind::St => "st",
    }
}

/// Adaptive trace: the SDE chosen at every step and, when labels were
/// available, the step metric and its running minimum (empty otherwise).
pub fn write_trace_csv(path: &Path, ens: &ForecastEnsemble, meta: &[(&str, String)]) -> Result<()> {
    let k = ens.selected.len();
    let mut out = metadata_line(meta);
    out.push_str("step,t,selected,metric,best_metric\n");
    for (i, kind) in ens.selected.iter().enumerate() {
        let t = (k - i) as f64 / k as f64;
        let (m, b) = match (ens.step_metric.get(i), ens.best_metric.get(i)) {
            (Some(m), Some(b)) => (m.to_string(), b.to_string()),
            _ => (String::new(), String::new()),
        };
        writeln!(out, "{},{t},{},{m},{b}", i + 1, kind_name(*kind)).unwrap();
    }
    write_text(path, &out)
}

/// The `selected` column of a trace file, first step first.
pub fn read_trace_selection(path: &Path) -> Result<Vec<SdeKind>> {
    let text = read_text(path)?;
    let mut rdr = reader(&text);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = header.iter().position(|h| h == "selected").ok_or_else(|| CliError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "no `selected` column".into(),
    })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push(match rec.get(col) {
            Some("st") => SdeKind::St,
            Some("subvp") => SdeKind::SubVp,
            other => {
                return Err(CliError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("unknown SDE {other:?}"),
                })
            }
        });
    }
    Ok(out)
}

/// `<dir>/<stem><suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}
