//! End-to-end runs: data, training, evaluation and on-disk artifacts.
//!
//! Output layout under `out`:
//!
//! ```text
//! config.json
//! residual_similarity.csv
//! bit_acc_vs_n.svg
//! <model>/train_log.csv      (trained models only)
//! <model>/model.rgwm
//! <model>/eval_report.json
//! <model>/eval_report.csv
//! <model>/sweep.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{sweep_csv, MessageMode, SweepRow};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codec::Codec;
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{generate_synthetic_range, load_image_dir};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainLog, Variant};

pub const RESIDUAL_CSV_HEADER: &str = "model,enable_rse,enable_knl,residual_similarity";

/// Eval report plus the flags of the model it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub enable_rse: bool,
    pub enable_knl: bool,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ModelOutcome {
    pub variant: Variant,
    pub codec: Codec,
    pub log: Option<TrainLog>,
    pub report: ModelReport,
}

/// Training and attacker/eval image sets.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    match &cfg.dataset {
        DatasetSource::Synthetic { train, eval } => Ok((
            generate_synthetic_range(0, *train, cfg.image_size, cfg.seed)?,
            generate_synthetic_range(*train, *eval, cfg.image_size, cfg.seed)?,
        )),
        DatasetSource::Directory { train, eval } => Ok((
            load_image_dir(train, cfg.image_size)?,
            load_image_dir(eval, cfg.image_size)?,
        )),
    }
}

/// Train `variant` on `data`, or load it when the config names a checkpoint.
pub fn train_or_load(cfg: &ExperimentConfig, variant: Variant, data: &[Tensor]) -> Result<(Codec, Option<TrainLog>)> {
    if let Some(path) = cfg.load.get(variant.name()) {
        let ck = load_checkpoint(path)?;
        if ck.codec.arch() != &cfg.architecture() {
            return Err(Error::Checkpoint {
                field: "architecture".into(),
                reason: format!("{} does not match the config", path.display()),
            });
        }
        return Ok((ck.codec, None));
    }
    let mut codec = Codec::new(cfg.architecture(), cfg.seed)?;
    let tc = cfg.train_config(variant);
    log::info!("training {} for {} steps", variant.name(), tc.steps);
    let log = train(&mut codec, data, &tc)?;
    Ok((codec, Some(log)))
}

pub fn model_report(cfg: &ExperimentConfig, variant: Variant, codec: &Codec, eval: &[Tensor]) -> Result<ModelReport> {
    let (enable_rse, enable_knl) = variant.flags();
    Ok(ModelReport {
        model: variant.name().into(),
        enable_rse,
        enable_knl,
        seed: cfg.seed,
        report: evaluate(codec, eval, &cfg.eval_settings(), cfg.seed)?,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Train (or load) and evaluate every configured model, writing all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ModelOutcome>> {
    cfg.validate()?;
    let (train_set, eval_set) = load_datasets(cfg)?;
    let out = &cfg.out;
    std::fs::create_dir_all(out)?;
    write(&out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut outcomes = Vec::new();
    for &variant in &cfg.models {
        let dir = out.join(variant.name());
        std::fs::create_dir_all(&dir)?;
        let (codec, log) = train_or_load(cfg, variant, &train_set)?;
        if let Some(log) = &log {
            write(&dir.join("train_log.csv"), log.to_csv())?;
        }
        let tc = serde_json::to_value(cfg.train_config(variant))?;
        save_checkpoint(&dir.join("model.rgwm"), &codec, &tc, cfg.seed)?;
        let report = model_report(cfg, variant, &codec, &eval_set)?;
        write_model_report(&dir, &report)?;
        outcomes.push(ModelOutcome {
            variant,
            codec,
            log,
            report,
        });
    }
    let reports: Vec<ModelReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    write_summary(out, &reports)?;
    Ok(outcomes)
}

pub fn write_model_report(dir: &Path, r: &ModelReport) -> Result<()> {
    write(&dir.join("eval_report.json"), serde_json::to_string_pretty(r)?)?;
    write(&dir.join("eval_report.csv"), r.report.to_csv())?;
    write(&dir.join("sweep.csv"), sweep_csv(&r.report.koa))?;
    Ok(())
}

/// Cross-model residual-similarity CSV and the sweep plot.
pub fn write_summary(out: &Path, reports: &[ModelReport]) -> Result<()> {
    write(&out.join("residual_similarity.csv"), residual_csv(reports))?;
    let series: Vec<(&str, &[SweepRow])> = reports.iter().map(|r| (r.model.as_str(), &r.report.koa[..])).collect();
    write(&out.join("bit_acc_vs_n.svg"), sweep_svg(&series))?;
    Ok(())
}

/// Re-read the per-model reports under `out` (in directory order).
pub fn collect_reports(out: &Path) -> Result<Vec<ModelReport>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("eval_report.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no eval reports under {}", out.display())));
    }
    dirs.iter()
        .map(|d| Ok(serde_json::from_str(&std::fs::read_to_string(d.join("eval_report.json"))?)?))
        .collect()
}

pub fn residual_csv(reports: &[ModelReport]) -> String {
    let mut s = format!("{RESIDUAL_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.enable_rse, r.enable_knl, r.report.residual_similarity);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot of KOA bit accuracy against `N`, one line per model and message mode.
pub fn sweep_svg(series: &[(&str, &[SweepRow])]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let rows = series.iter().flat_map(|(_, rows)| rows.iter());
    let max_n = rows.clone().map(|r| r.n).max().unwrap_or(1).max(2) as f64;
    let min_acc = rows.map(|r| r.bit_acc_mean).fold(0.5, f64::min);
    let y_lo = (min_acc * 10.0).floor() / 10.0;
    let px = |n: f64| left + (n - 1.0) / (max_n - 1.0) * (w - left - right);
    let py = |a: f64| top + (1.0 - (a - y_lo) / (1.0 - y_lo)) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, h - bottom, top);
    let _ = writeln!(s, r#"<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>"#);
    let steps = ((1.0 - y_lo) * 10.0).round() as usize;
    for i in 0..=steps {
        let a = y_lo + i as f64 / 10.0;
        let y = py(a);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.1}</text>"#, x0 - 7.0, y + 4.0);
    }
    let mut ns: Vec<usize> = series.iter().flat_map(|(_, rows)| rows.iter().map(|k| k.n)).collect();
    ns.sort_unstable();
    ns.dedup();
    for n in ns {
        let x = px(n as f64);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{n}</text>"#, y0 + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">N (known pairs)</text>"#, (x0 + x1) / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">bit accuracy</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let mut legend_row = 0;
    for (mi, (name, rows)) in series.iter().enumerate() {
        for mode in [MessageMode::Same, MessageMode::Different] {
            let pts: Vec<String> = rows
                .iter()
                .filter(|k| k.message_mode == mode)
                .map(|k| format!("{:.1},{:.1}", px(k.n as f64), py(k.bit_acc_mean)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let color = PALETTE[mi % PALETTE.len()];
            let dash = if mode == MessageMode::Different { r#" stroke-dasharray="6 3""# } else { "" };
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, pts.join(" "));
            let ly = top + 10.0 + 18.0 * legend_row as f64;
            let lx = w - right + 15.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 24.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{} ({mode})</text>"#, lx + 30.0, ly + 4.0, name);
            legend_row += 1;
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::SWEEP_CSV_HEADER;

    fn tiny(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            image_size: 16,
            width: 4,
            message_length: 4,
            steps: 3,
            batch: 2,
            rse_start: 0,
            dataset: DatasetSource::Synthetic { train: 8, eval: 14 },
            n_grid: vec![1, 2],
            num_targets: 4,
            residual_images: 3,
            models: Variant::ALL.to_vec(),
            out: out.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn ablation_grid_bookkeeping_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let outcomes = run_experiment(&tiny(a.path())).unwrap();
        assert_eq!(outcomes.len(), 4);
        let reports = collect_reports(a.path()).unwrap();
        assert_eq!(reports.len(), 4);
        let flags: Vec<(bool, bool)> = outcomes.iter().map(|o| (o.report.enable_rse, o.report.enable_knl)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true), (true, true)]);

        let sweep = std::fs::read_to_string(a.path().join("base/sweep.csv")).unwrap();
        let mut lines = sweep.lines();
        assert_eq!(lines.next(), Some(SWEEP_CSV_HEADER));
        assert_eq!(lines.count(), 2 * 2);

        run_experiment(&tiny(b.path())).unwrap();
        for f in ["residual_similarity.csv", "bit_acc_vs_n.svg", "base/sweep.csv", "resguard/train_log.csv", "knl/eval_report.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn loading_a_checkpoint_reproduces_the_report() {
        let a = tempfile::tempdir().unwrap();
        let mut cfg = tiny(a.path());
        cfg.models = vec![Variant::Base];
        let first = run_experiment(&cfg).unwrap();
        let b = tempfile::tempdir().unwrap();
        cfg.load.insert("base".into(), a.path().join("base/model.rgwm"));
        cfg.out = b.path().to_path_buf();
        let second = run_experiment(&cfg).unwrap();
        assert!(second[0].log.is_none());
        assert_eq!(first[0].report, second[0].report);
    }

    #[test]
    fn residual_csv_header() {
        let csv = residual_csv(&[]);
        assert_eq!(csv, format!("{RESIDUAL_CSV_HEADER}\n"));
    }
}
