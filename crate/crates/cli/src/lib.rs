//! Command-line front end. Every subcommand resolves a flat config
//! (defaults, `--config` file, `--key=value` overrides), logs it, and calls
//! into the `spectralseg` library.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use spectralseg::audit::{gradient_audit, AuditOptions};
use spectralseg::checkpoint::load_checkpoint;
use spectralseg::data::{generate_synthetic, ingest_duke, Corpus, Split};
use spectralseg::losses::evaluate_dataset;
use spectralseg::model::{ModelConfig, Variant};
use spectralseg::report::{
    alpha_table_rows, emit_overlay, emit_tables, frequency_table_rows, TableRow, TableStyle,
};
use spectralseg::train::{
    run_alpha_ablation, run_frequency_ablation, train_on_corpus, AblationRow, RunRecord,
    SplitData, BEST_CHECKPOINT,
};

pub use config::{ResolvedConfig, UsageError};

#[derive(Debug, Parser)]
#[command(name = "spectralseg", about = "Spatial/spectral OCT segmentation toolkit")]
struct Cli {
    /// Flat JSON config with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Convert raw Duke subject files into a PNG corpus.
    Convert,
    /// Generate a synthetic layered-speckle corpus.
    Synth,
    /// Train one model and evaluate its best-validation weights.
    Train,
    /// Evaluate a checkpoint on a corpus split.
    Eval,
    /// Train one model per alpha plus a conv-only second branch.
    AblateAlpha,
    /// Train one model per frequency filter.
    AblateFreq,
    /// Finite-difference gradient audit on tiny models.
    Audit,
    /// Build CSV and markdown tables from saved results.
    Report,
    /// Write an input / ground truth / prediction panel image.
    Overlay,
}

/// Splits argv into clap arguments and `--key=value` overrides.
fn split_overrides(argv: &[String]) -> (Vec<String>, Vec<String>) {
    let mut clap_args = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in argv.iter().enumerate() {
        match a.strip_prefix("--") {
            Some(rest) if i > 0 && rest.contains('=') && !rest.starts_with("config=") => {
                overrides.push(rest.to_string());
            }
            _ => clap_args.push(a.clone()),
        }
    }
    (clap_args, overrides)
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(
                e.downcast_ref::<spectralseg::Error>(),
                Some(spectralseg::Error::Config(_))
            )
    })
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run_cli(argv: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let (clap_args, overrides) = split_overrides(&argv);
    let cli = match Cli::try_parse_from(&clap_args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let resolved = match resolve(cli.config.as_deref(), &overrides) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    match dispatch(cli.command, &resolved) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                1
            } else {
                2
            }
        }
    }
}

pub fn resolve(config: Option<&Path>, overrides: &[String]) -> anyhow::Result<ResolvedConfig> {
    let mut resolved = ResolvedConfig::default();
    if let Some(path) = config {
        resolved.apply_file(path)?;
    }
    for o in overrides {
        resolved.apply_override(o)?;
    }
    Ok(resolved)
}

pub fn dispatch(command: Command, cfg: &ResolvedConfig) -> anyhow::Result<()> {
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&cfg.to_json()).expect("config serializes")
    );
    match command {
        Command::Convert => convert(cfg),
        Command::Synth => synth(cfg),
        Command::Train => train(cfg),
        Command::Eval => eval(cfg),
        Command::AblateAlpha => ablate_alpha(cfg),
        Command::AblateFreq => ablate_freq(cfg),
        Command::Audit => audit(cfg),
        Command::Report => report(cfg),
        Command::Overlay => overlay(cfg),
    }
}

fn parse_split(cfg: &ResolvedConfig, key: &str) -> anyhow::Result<Split> {
    cfg.str(key)
        .parse()
        .map_err(|e: spectralseg::Error| UsageError(format!("{key}: {e}")).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn convert(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let raw = cfg.path("data.raw_dir");
    if raw.as_os_str().is_empty() {
        bail!(UsageError("convert needs data.raw_dir".into()));
    }
    let out = cfg.path("data.dir");
    let manifest = ingest_duke(&raw, &out)?;
    println!(
        "converted {} B-scans from {} patients into {}",
        manifest.records.len(),
        manifest.patients().len(),
        out.display()
    );
    Ok(())
}

fn synth(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let out = cfg.path("data.dir");
    let manifest = generate_synthetic(
        cfg.u64("synth.seed"),
        cfg.usize("synth.n"),
        &out,
        cfg.synth_params(),
    )?;
    println!(
        "wrote {} synthetic B-scans to {} (train {}, val {}, test {})",
        manifest.records.len(),
        out.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(())
}

fn print_report(title: &str, report: &spectralseg::losses::EvalReport) {
    println!("{title}");
    for c in &report.classes {
        match c.dice {
            Some(d) => println!("  {:<8} dice {d:.3}", c.name),
            None => println!("  {:<8} dice n/a", c.name),
        }
    }
    println!("  mean dice {:.3}, mean IoU {:.3}", report.mean_dice, report.mean_iou);
}

fn train(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let model = cfg.model()?;
    let train_cfg = cfg.train()?;
    let record = train_on_corpus(&model, &cfg.path("data.dir"), &train_cfg)?;
    print_report(
        &format!("best epoch {} of {}", record.best_epoch, train_cfg.max_epochs),
        &record.test,
    );
    Ok(())
}

fn checkpoint_path(cfg: &ResolvedConfig) -> PathBuf {
    let explicit = cfg.path("checkpoint");
    if explicit.as_os_str().is_empty() {
        cfg.path("output.dir").join(BEST_CHECKPOINT)
    } else {
        explicit
    }
}

fn load_model(cfg: &ResolvedConfig) -> anyhow::Result<spectralseg::model::SegmentationModel> {
    let path = checkpoint_path(cfg);
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let split = parse_split(cfg, "eval.split")?;
    let mut model = load_model(cfg)?;
    let size = model.config().input_size.0;
    let corpus = Corpus::open(cfg.path("data.dir"))?;
    let set = corpus.tensors(split, size)?;
    let report = evaluate_dataset(&mut model, &set, cfg.usize("train.batch_size"))?;
    write_json(&cfg.path("output.dir").join(format!("eval_{split}.json")), &report)?;
    print_report(&format!("{split} split, {} scans", report.num_scans), &report);
    Ok(())
}

fn load_splits(cfg: &ResolvedConfig, model: &ModelConfig) -> anyhow::Result<SplitData> {
    let corpus = Corpus::open(cfg.path("data.dir"))?;
    Ok(SplitData::load(&corpus, model.input_size.0)?)
}

fn finish_ablation(
    cfg: &ResolvedConfig,
    rows: &[AblationRow],
    style: TableStyle,
    stem: &str,
) -> anyhow::Result<()> {
    let out = cfg.path("output.dir");
    write_json(&out.join(format!("{stem}.json")), &rows)?;
    let table = match style {
        TableStyle::Table2 => alpha_table_rows(rows),
        _ => frequency_table_rows(rows),
    };
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.label.as_str())
        .collect();
    if !table.is_empty() {
        let files = emit_tables(&table, style, false, &out, stem)?;
        println!("wrote {} and {}", files.csv.display(), files.markdown.display());
    }
    if !failed.is_empty() {
        bail!("ablation rows failed: {}", failed.join(", "));
    }
    Ok(())
}

fn ablate_alpha(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let model = cfg.model()?;
    let train_cfg = cfg.train()?;
    let alphas = cfg.alphas()?;
    for &alpha in &alphas {
        ModelConfig { alpha, ..model.clone() }.validate()?;
    }
    let data = load_splits(cfg, &model)?;
    let rows = run_alpha_ablation(&alphas, &model, &data, &train_cfg)?;
    finish_ablation(cfg, &rows, TableStyle::Table2, "table2")
}

fn ablate_freq(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let model = cfg.model()?;
    let train_cfg = cfg.train()?;
    let filters = cfg.filters()?;
    let data = load_splits(cfg, &model)?;
    let rows = run_frequency_ablation(&filters, &model, &data, &train_cfg)?;
    finish_ablation(cfg, &rows, TableStyle::Table3, "table3")
}

fn audit(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let size = cfg.usize("audit.input_size");
    let opts = AuditOptions {
        seed: cfg.u64("audit.seed"),
        samples_per_tensor: cfg.usize("audit.samples"),
        ..AuditOptions::default()
    };
    for name in config::split_list(&cfg.str("audit.variants")) {
        let variant: Variant = name
            .parse()
            .map_err(|e: spectralseg::Error| UsageError(e.to_string()))?;
        let model = ModelConfig {
            variant,
            base_width: cfg.usize("audit.base_width"),
            input_size: (size, size),
            ..cfg.model()?
        };
        model.validate().map_err(|e| UsageError(e.to_string()))?;
        let report = gradient_audit(&model, &opts)
            .with_context(|| format!("gradient audit of {variant}"))?;
        println!(
            "{variant}: {} tensors, max relative error {:.2e} (tolerance {:.0e})",
            report.layers.len(),
            report.max_rel_error,
            report.tolerance
        );
    }
    Ok(())
}

fn report(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let style: TableStyle = cfg
        .str("report.style")
        .parse()
        .map_err(|e: spectralseg::Error| UsageError(e.to_string()))?;
    let inputs: Vec<PathBuf> = config::split_list(&cfg.str("report.inputs"))
        .map(PathBuf::from)
        .collect();
    if inputs.is_empty() {
        bail!(UsageError("report needs report.inputs (comma-separated JSON files)".into()));
    }
    let mut rows: Vec<TableRow> = Vec::new();
    for path in &inputs {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        match style {
            TableStyle::Table1 => {
                let record: RunRecord = serde_json::from_str(&text)
                    .with_context(|| format!("{} is not a run record", path.display()))?;
                let label = if inputs.len() == 1 {
                    cfg.str("report.label")
                } else {
                    format!("{} ({})", record.model_config.variant, path.display())
                };
                rows.push(TableRow {
                    labels: vec![label],
                    report: record.test,
                });
            }
            TableStyle::Table2 | TableStyle::Table3 => {
                let ablation: Vec<AblationRow> = serde_json::from_str(&text)
                    .with_context(|| format!("{} is not an ablation result", path.display()))?;
                rows.extend(if style == TableStyle::Table2 {
                    alpha_table_rows(&ablation)
                } else {
                    frequency_table_rows(&ablation)
                });
            }
        }
    }
    let stem = match style {
        TableStyle::Table1 => "table1",
        TableStyle::Table2 => "table2",
        TableStyle::Table3 => "table3",
    };
    let files = emit_tables(
        &rows,
        style,
        cfg.bool("report.literature"),
        &cfg.path("output.dir"),
        stem,
    )?;
    println!("wrote {} and {}", files.csv.display(), files.markdown.display());
    Ok(())
}

fn overlay(cfg: &ResolvedConfig) -> anyhow::Result<()> {
    let split = parse_split(cfg, "overlay.split")?;
    let mut model = load_model(cfg)?;
    let size = model.config().input_size.0;
    let corpus = Corpus::open(cfg.path("data.dir"))?;
    let index = cfg.usize("overlay.index");
    let entry = corpus
        .manifest
        .entries(split)
        .nth(index)
        .with_context(|| format!("{split} split has no record {index}"))?;
    let record = spectralseg::data::load_record(&corpus.dir, entry)?;
    let out = cfg.path("output.dir").join(format!(
        "overlay_p{:02}_s{:03}.png",
        record.patient_id, record.scan_index
    ));
    emit_overlay(&mut model, &record, size, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_separated_from_flags() {
        let argv: Vec<String> = ["spectralseg", "train", "--config", "a.json", "--batch_size=4", "--config=b.json"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (clap_args, overrides) = split_overrides(&argv);
        assert_eq!(clap_args, ["spectralseg", "train", "--config", "a.json", "--config=b.json"]);
        assert_eq!(overrides, ["batch_size=4"]);
    }
}
