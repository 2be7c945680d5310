//! `puw` — the command-line workbench for the pressure ulcer detection
//! pipeline.
//!
//! The binary wires the library crates into file-to-file commands: annotation
//! ingestion, dataset splitting and augmentation, evaluation sweeps, PR
//! curves, small numeric desk checks, and the HTTP submission gateway.  Every
//! command is deterministic under fixed inputs and seed; outputs are
//! byte-stable so they can be diffed across runs.
//!
//! Exit codes distinguish the failure families:
//!
//! * `0` — success
//! * `2` — input could not be parsed (bad file, unknown class name)
//! * `3` — an invariant was violated (bad argument, degenerate box, strict
//!   mode escalation, detection for an unknown image)
//! * `4` — the requested result set came out empty (e.g. a curve for a class
//!   with no ground truth)
//! * `1` — anything else (I/O, network)

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use puw_core::anchors::{
    assign_rpn_targets, generate_anchors, sample_minibatch, AnchorLabel, RpnThresholds,
};
use puw_core::dataset::{
    augment, from_canonical, parse_labelme, parse_voc, split, AugmentOp, AugmentOptions,
    Provenance,
};
use puw_core::eval::curve::{curve_to_csv, curve_to_svg};
use puw_core::eval::{parse_detections_csv, pr_curve, render_csv, render_jsonl, render_table, sweep};
use puw_core::geometry::iou;
use puw_core::trainmath::{combine_losses, AdamState};
use puw_core::{
    DatasetManifest, Detection, Error as CoreError, ImageRecord, LabeledBox, Strictness,
    UlcerClass,
};
use puw_gateway::{load_store_entries, AppState};

#[derive(Parser)]
#[command(
    name = "puw",
    version,
    about = "Detection-pipeline workbench: ingest annotations, run evaluation sweeps, \
             draw PR curves, desk-check the training math, and serve the submission gateway.",
    after_help = "Exit codes: 0 success, 2 parse error, 3 invariant violation, 4 empty result, 1 other."
)]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "PUW_OUT_DIR", value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse annotation files into a JSONL manifest and print the class histogram.
    Ingest(IngestArgs),
    /// Shuffle a manifest into train and validation manifests.
    Split(SplitArgs),
    /// Apply geometric augmentation ops to every record of a manifest.
    Augment(AugmentArgs),
    /// Evaluate detections against ground truth over a confidence ladder.
    Eval(EvalArgs),
    /// Compute a per-class precision-recall curve as SVG plus a point table.
    Curve(CurveArgs),
    /// Small numeric desk checks (anchor grids, target bands, losses, Adam).
    Desk {
        #[command(subcommand)]
        check: DeskCommand,
    },
    /// Flatten a gateway submission store into a detections CSV.
    ExportStore(ExportStoreArgs),
    /// Run the HTTP submission gateway.
    Serve(ServeArgs),
}

fn main() -> ExitCode {
    // Rust masks SIGPIPE, which turns `puw ... | head` into a panic the
    // moment the pipe closes mid-print; restore the default disposition so
    // the process dies quietly like any other filter.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args, out_dir),
        Command::Split(args) => cmd_split(args, out_dir),
        Command::Augment(args) => cmd_augment(args, out_dir),
        Command::Eval(args) => cmd_eval(args, out_dir),
        Command::Curve(args) => cmd_curve(args, out_dir),
        Command::Desk { check } => cmd_desk(check),
        Command::ExportStore(args) => cmd_export_store(args, out_dir),
        Command::Serve(args) => cmd_serve(args),
    }
}

/// Maps the error chain onto the documented exit-code families.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(
            CoreError::Parse(_)
            | CoreError::UnknownClass { .. }
            | CoreError::Xml(_)
            | CoreError::Json(_)
            | CoreError::Csv(_),
        ) => 2,
        Some(
            CoreError::InvalidArgument(_)
            | CoreError::InvalidBox(_)
            | CoreError::DegenerateBox(_)
            | CoreError::Strict(_)
            | CoreError::UnknownImage(_),
        ) => 3,
        Some(CoreError::Empty(_)) => 4,
        _ => 1,
    }
}

// ------------------------------------------------------------------ helpers

fn strictness_of(strict: bool) -> Strictness {
    if strict {
        Strictness::Strict
    } else {
        Strictness::Lenient
    }
}

/// Resolves an output path against `--out-dir` and creates its parent
/// directories.
fn resolve_out(path: &Path, out_dir: Option<&Path>) -> anyhow::Result<PathBuf> {
    let resolved = match out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    };
    if let Some(parent) = resolved.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating output directory {}", parent.display()))?;
        }
    }
    Ok(resolved)
}

fn parse_provenance(s: &str) -> anyhow::Result<Provenance> {
    match s.to_ascii_lowercase().as_str() {
        "medetec" => Ok(Provenance::Medetec),
        "web" => Ok(Provenance::Web),
        "trial" => Ok(Provenance::Trial),
        other => Err(CoreError::Parse(format!(
            "unknown provenance {other:?}; expected medetec, web or trial"
        ))
        .into()),
    }
}

fn parse_f64_list(text: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| CoreError::Parse(format!("bad {what} {s:?}: {e}")).into())
        })
        .collect()
}

/// Loads ground truth from either a JSONL manifest or the canonical CSV,
/// sniffed by file extension.
fn load_ground_truth(
    path: &Path,
    provenance: Provenance,
    strictness: Strictness,
) -> anyhow::Result<Vec<ImageRecord>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext.to_ascii_lowercase().as_str() {
        "jsonl" | "json" => {
            let manifest = DatasetManifest::read_jsonl(path)
                .with_context(|| format!("reading manifest {}", path.display()))?;
            Ok(manifest.into_records())
        }
        "csv" => {
            let text = fs::read_to_string(path)
                .map_err(CoreError::from)
                .with_context(|| format!("reading table {}", path.display()))?;
            let parsed = from_canonical(&text, provenance, strictness)?;
            for w in &parsed.warnings {
                eprintln!("warning: {w}");
            }
            Ok(parsed.value)
        }
        other => Err(CoreError::Parse(format!(
            "cannot tell the ground-truth format from extension {other:?} \
             (expected .jsonl manifest or .csv table)"
        ))
        .into()),
    }
}

fn load_detections(path: &Path) -> anyhow::Result<Vec<Detection>> {
    let text = fs::read_to_string(path)
        .map_err(CoreError::from)
        .with_context(|| format!("reading detections {}", path.display()))?;
    Ok(parse_detections_csv(&text)?)
}

fn write_output(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

// ------------------------------------------------------------------- ingest

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum IngestFormat {
    /// Infer per file: `.xml` means VOC, `.json` means Labelme.
    Auto,
    /// Pascal VOC XML.
    Voc,
    /// Labelme JSON (rectangle shapes only).
    Labelme,
}

#[derive(Args)]
struct IngestArgs {
    /// Annotation files to ingest.
    #[arg(required = true, value_name = "FILE")]
    files: Vec<PathBuf>,

    /// Annotation format of the input files.
    #[arg(long, value_enum, default_value_t = IngestFormat::Auto)]
    format: IngestFormat,

    /// Collection the images came from.
    #[arg(long, default_value = "trial")]
    provenance: String,

    /// Refuse repairable defects (degenerate or out-of-bounds boxes) instead
    /// of fixing them up with a warning.
    #[arg(long)]
    strict: bool,

    /// Manifest file to write.
    #[arg(long, default_value = "manifest.jsonl", value_name = "FILE")]
    out: PathBuf,
}

fn sniff_format(path: &Path) -> anyhow::Result<IngestFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("xml") => Ok(IngestFormat::Voc),
        Some("json") => Ok(IngestFormat::Labelme),
        _ => Err(CoreError::Parse(format!(
            "cannot infer the annotation format of {}; pass --format",
            path.display()
        ))
        .into()),
    }
}

fn cmd_ingest(args: IngestArgs, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let provenance = parse_provenance(&args.provenance)?;
    let strictness = strictness_of(args.strict);

    // Resolve the format of every file up front so a mixed bag fails before
    // anything is parsed.
    let mut formats = Vec::with_capacity(args.files.len());
    for path in &args.files {
        formats.push(match args.format {
            IngestFormat::Auto => sniff_format(path)?,
            explicit => explicit,
        });
    }
    if args.format == IngestFormat::Auto
        && formats.windows(2).any(|pair| pair[0] != pair[1])
    {
        return Err(CoreError::InvalidArgument(
            "input files mix VOC and Labelme annotations; pass --format to pick one".into(),
        )
        .into());
    }

    let mut records = Vec::with_capacity(args.files.len());
    let mut warning_count = 0usize;
    for (path, format) in args.files.iter().zip(&formats) {
        let text = fs::read_to_string(path)
            .map_err(CoreError::from)
            .with_context(|| format!("reading {}", path.display()))?;
        let parsed = match format {
            IngestFormat::Voc => parse_voc(&text, provenance, strictness),
            IngestFormat::Labelme => parse_labelme(&text, provenance, strictness),
            IngestFormat::Auto => unreachable!("auto resolved above"),
        }
        .with_context(|| format!("parsing {}", path.display()))?;
        for w in &parsed.warnings {
            eprintln!("warning: {w}");
        }
        warning_count += parsed.warnings.len();
        records.push(parsed.value);
    }

    let manifest = DatasetManifest::new(records)?;
    let out = resolve_out(&args.out, out_dir)?;
    manifest.write_jsonl(&out)?;

    let histogram = manifest.class_histogram();
    println!(
        "ingested {} files: {} records, {} annotations, {} warnings",
        args.files.len(),
        manifest.len(),
        histogram.total(),
        warning_count
    );
    println!("{histogram}");
    println!("wrote {}", out.display());
    Ok(())
}

// -------------------------------------------------------------------- split

#[derive(Args)]
struct SplitArgs {
    /// Manifest to split.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,

    /// Fraction of records that go to the train side.
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,

    /// Shuffle seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Train manifest to write.
    #[arg(long, default_value = "train.jsonl", value_name = "FILE")]
    train_out: PathBuf,

    /// Validation manifest to write.
    #[arg(long, default_value = "val.jsonl", value_name = "FILE")]
    val_out: PathBuf,
}

fn cmd_split(args: SplitArgs, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let manifest = DatasetManifest::read_jsonl(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let (train, val) = split(&manifest, args.train_fraction, args.seed)?;

    let train_out = resolve_out(&args.train_out, out_dir)?;
    let val_out = resolve_out(&args.val_out, out_dir)?;
    train.write_jsonl(&train_out)?;
    val.write_jsonl(&val_out)?;

    println!(
        "split {} records into {} train + {} val (fraction {}, seed {})",
        manifest.len(),
        train.len(),
        val.len(),
        args.train_fraction,
        args.seed
    );
    println!("wrote {}", train_out.display());
    println!("wrote {}", val_out.display());
    Ok(())
}

// ------------------------------------------------------------------ augment

#[derive(Args)]
struct AugmentArgs {
    /// Manifest to augment.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,

    /// Comma-separated op list, applied in order to every record.  Ops:
    /// flip-h, flip-v, rotate, tilt, scale, skew.  A bare name draws its
    /// parameter from the default range; `rotate=10` fixes it.
    #[arg(long, value_name = "OPS")]
    ops: String,

    /// Base seed for the random parameter draws (offset per record).
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Keep a transformed box only if at least this fraction of it remains
    /// inside the image.
    #[arg(long, default_value_t = 0.25)]
    min_retained_area: f64,

    /// Treat a record that loses all of its annotations as an error.
    #[arg(long)]
    strict: bool,

    /// Augmented manifest to write.
    #[arg(long, default_value = "augmented.jsonl", value_name = "FILE")]
    out: PathBuf,
}

fn parse_ops(text: &str) -> anyhow::Result<Vec<AugmentOp>> {
    let mut ops = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, value) = match item.split_once('=') {
            Some((name, value)) => {
                let v: f64 = value.parse().map_err(|e| {
                    CoreError::Parse(format!("bad parameter for op {name:?}: {value:?}: {e}"))
                })?;
                (name, Some(v))
            }
            None => (item, None),
        };
        let op = match name.to_ascii_lowercase().as_str() {
            "flip-h" | "fliph" => AugmentOp::FlipHorizontal,
            "flip-v" | "flipv" => AugmentOp::FlipVertical,
            "rotate" => AugmentOp::Rotate(value),
            "tilt" => AugmentOp::Tilt(value),
            "scale" => AugmentOp::Scale(value),
            "skew" => AugmentOp::Skew(value),
            other => {
                return Err(CoreError::Parse(format!(
                    "unknown augmentation op {other:?}; expected flip-h, flip-v, rotate, \
                     tilt, scale or skew"
                ))
                .into())
            }
        };
        if value.is_some() && matches!(op, AugmentOp::FlipHorizontal | AugmentOp::FlipVertical) {
            return Err(CoreError::Parse(format!(
                "op {name:?} takes no parameter"
            ))
            .into());
        }
        ops.push(op);
    }
    if ops.is_empty() {
        return Err(CoreError::InvalidArgument("the op list is empty".into()).into());
    }
    Ok(ops)
}

fn cmd_augment(args: AugmentArgs, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let ops = parse_ops(&args.ops)?;
    let strictness = strictness_of(args.strict);
    let manifest = DatasetManifest::read_jsonl(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;

    let mut augmented = Vec::with_capacity(manifest.len());
    let mut warning_count = 0usize;
    let mut boxes_in = 0usize;
    let mut boxes_out = 0usize;
    for (i, record) in manifest.records().iter().enumerate() {
        let options = AugmentOptions {
            min_retained_area: args.min_retained_area,
            seed: args.seed.wrapping_add(i as u64),
            ..AugmentOptions::default()
        };
        let result = augment(record, &ops, &options, strictness)
            .with_context(|| format!("augmenting image {:?}", record.image_id))?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        warning_count += result.warnings.len();
        boxes_in += record.annotations.len();
        boxes_out += result.value.annotations.len();
        augmented.push(result.value);
    }

    let out_manifest = DatasetManifest::new(augmented)?;
    let out = resolve_out(&args.out, out_dir)?;
    out_manifest.write_jsonl(&out)?;

    println!(
        "augmented {} records: {} of {} boxes kept, {} warnings",
        out_manifest.len(),
        boxes_out,
        boxes_in,
        warning_count
    );
    println!("wrote {}", out.display());
    Ok(())
}

// --------------------------------------------------------------------- eval

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    /// Aligned text tables, one per confidence cutoff.
    Table,
    /// One CSV with a row per class per cutoff.
    Csv,
    /// One JSON document per line, one line per cutoff.
    Structured,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground truth: a JSONL manifest or a canonical CSV table (by extension).
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,

    /// Detections CSV to score.
    #[arg(long, value_name = "FILE")]
    det: PathBuf,

    /// IoU threshold for a detection to count as a hit.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,

    /// Comma-separated ascending ladder of confidence cutoffs.
    #[arg(long, default_value = "0.30,0.50,0.75,0.90", value_name = "LIST")]
    cs: String,

    /// Output format.
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    format: ReportFormat,

    /// Provenance to assume when the ground truth is a CSV table.
    #[arg(long, default_value = "trial")]
    provenance: String,

    /// Refuse repairable ground-truth defects instead of fixing them up.
    #[arg(long)]
    strict: bool,

    /// Write the report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Concatenates per-report CSVs under a single header.
fn merge_report_csv(rendered: &[String]) -> String {
    let mut out = String::new();
    for (i, csv) in rendered.iter().enumerate() {
        match csv.split_once('\n') {
            Some((header, body)) => {
                if i == 0 {
                    out.push_str(header);
                    out.push('\n');
                }
                out.push_str(body);
            }
            None => out.push_str(csv),
        }
    }
    out
}

fn cmd_eval(args: EvalArgs, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let provenance = parse_provenance(&args.provenance)?;
    let records = load_ground_truth(&args.gt, provenance, strictness_of(args.strict))?;
    let detections = load_detections(&args.det)?;
    let cutoffs = parse_f64_list(&args.cs, "confidence cutoff")?;

    let reports = sweep(&records, &detections, args.iou, &cutoffs)?;
    let output = match args.format {
        ReportFormat::Table => reports.iter().map(render_table).collect::<Vec<_>>().join("\n"),
        ReportFormat::Csv => {
            merge_report_csv(&reports.iter().map(render_csv).collect::<Vec<_>>())
        }
        ReportFormat::Structured => render_jsonl(&reports)?,
    };

    match &args.out {
        Some(path) => {
            let path = resolve_out(path, out_dir)?;
            write_output(&path, &output)?;
            println!("wrote {}", path.display());
        }
        None => print!("{output}"),
    }
    Ok(())
}

// -------------------------------------------------------------------- curve

#[derive(Args)]
struct CurveArgs {
    /// Ground truth: a JSONL manifest or a canonical CSV table (by extension).
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,

    /// Detections CSV to score.
    #[arg(long, value_name = "FILE")]
    det: PathBuf,

    /// Class to trace the curve for.
    #[arg(long)]
    class: UlcerClass,

    /// IoU threshold for a detection to count as a hit.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,

    /// Provenance to assume when the ground truth is a CSV table.
    #[arg(long, default_value = "trial")]
    provenance: String,

    /// SVG file to write; the point table lands next to it as `.csv`.
    #[arg(long, default_value = "curve.svg", value_name = "FILE")]
    out: PathBuf,
}

fn cmd_curve(args: CurveArgs, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let provenance = parse_provenance(&args.provenance)?;
    let records = load_ground_truth(&args.gt, provenance, Strictness::Lenient)?;
    let detections = load_detections(&args.det)?;

    let curve = pr_curve(&records, &detections, args.class, args.iou)?;
    let svg_out = resolve_out(&args.out, out_dir)?;
    let csv_out = svg_out.with_extension("csv");
    write_output(&svg_out, &curve_to_svg(&curve))?;
    write_output(&csv_out, &curve_to_csv(&curve))?;

    println!(
        "{} IoU@{:.2}: {} points, AUC={:.4}",
        curve.class,
        curve.iou_threshold,
        curve.points.len(),
        curve.auc
    );
    println!("wrote {}", svg_out.display());
    println!("wrote {}", csv_out.display());
    Ok(())
}

// --------------------------------------------------------------------- desk

#[derive(Subcommand)]
enum DeskCommand {
    /// Generate an anchor grid and print its shape table.
    Anchors(DeskAnchorsArgs),
    /// Assign anchors of a small worked scene to foreground/background bands.
    Assign(DeskAssignArgs),
    /// Combine the four partial losses into the training objective.
    Losses(DeskLossesArgs),
    /// Minimize a quadratic with Adam and trace the convergence.
    Adam(DeskAdamArgs),
}

#[derive(Args)]
struct DeskAnchorsArgs {
    /// Image width in pixels.
    #[arg(long, default_value_t = 1024)]
    width: u32,

    /// Image height in pixels.
    #[arg(long, default_value_t = 1024)]
    height: u32,

    /// Feature stride in pixels per cell.
    #[arg(long, default_value_t = 16)]
    stride: u32,

    /// Comma-separated anchor scales (square-root areas) in pixels.
    #[arg(long, default_value = "128,256,512", value_name = "LIST")]
    scales: String,

    /// Comma-separated aspect ratios (height over width).
    #[arg(long, default_value = "0.5,1,2", value_name = "LIST")]
    ratios: String,
}

fn cmd_desk_anchors(args: DeskAnchorsArgs) -> anyhow::Result<()> {
    let scales = parse_f64_list(&args.scales, "scale")?;
    let ratios = parse_f64_list(&args.ratios, "ratio")?;
    let grid = generate_anchors(args.width, args.height, args.stride, &scales, &ratios)?;

    println!(
        "image {} x {}, stride {}: {} x {} cells, {} shapes per cell",
        grid.image_width,
        grid.image_height,
        grid.stride,
        grid.cells_x,
        grid.cells_y,
        scales.len() * ratios.len()
    );
    for &scale in &scales {
        for &ratio in &ratios {
            let w = scale / ratio.sqrt();
            let h = scale * ratio.sqrt();
            println!(
                "  scale {:>6.1}  ratio {:>4.2}  ->  {:7.1} x {:7.1} (area {:.0})",
                scale,
                ratio,
                w,
                h,
                w * h
            );
        }
    }
    println!("{} anchors", grid.len());
    Ok(())
}

#[derive(Args)]
struct DeskAssignArgs {
    /// Foreground IoU threshold (anchors strictly above are positives).
    #[arg(long, default_value_t = RpnThresholds::DEFAULT.fg)]
    fg_thr: f64,

    /// Background IoU threshold (anchors strictly below are negatives).
    #[arg(long, default_value_t = RpnThresholds::DEFAULT.bg)]
    bg_thr: f64,

    /// Ignore anchors that poke outside the image instead of labelling them.
    #[arg(long)]
    exclude_outside: bool,

    /// Minibatch size for the sampling demonstration.
    #[arg(long, default_value_t = 256)]
    batch: usize,

    /// Foreground share of the minibatch.
    #[arg(long, default_value_t = 0.5)]
    fg_fraction: f64,

    /// Sampling seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn cmd_desk_assign(args: DeskAssignArgs) -> anyhow::Result<()> {
    // A fixed worked scene: two ulcers on a 256 px image with a coarse grid,
    // small enough that the band counts can be checked by hand.
    const SIDE: u32 = 256;
    let grid = generate_anchors(SIDE, SIDE, 32, &[64.0, 128.0], &[0.5, 1.0, 2.0])?;
    let gts = vec![
        LabeledBox::new(UlcerClass::CategoryII, puw_core::BBox::new(40.0, 40.0, 140.0, 150.0)?),
        LabeledBox::new(UlcerClass::Dti, puw_core::BBox::new(150.0, 60.0, 230.0, 140.0)?),
    ];

    let thresholds = RpnThresholds { fg: args.fg_thr, bg: args.bg_thr };
    let assignments = assign_rpn_targets(
        &grid.anchors,
        &gts,
        SIDE as f64,
        SIDE as f64,
        thresholds,
        args.exclude_outside,
    )?;

    let count = |label: AnchorLabel| assignments.iter().filter(|a| a.label == label).count();
    println!(
        "image {SIDE} x {SIDE}, {} anchors, {} ground-truth boxes, bands fg>{} bg<{}{}",
        grid.len(),
        gts.len(),
        thresholds.fg,
        thresholds.bg,
        if args.exclude_outside { ", outside anchors ignored" } else { "" }
    );
    println!(
        "foreground {}  background {}  ignored {}",
        count(AnchorLabel::Foreground),
        count(AnchorLabel::Background),
        count(AnchorLabel::Ignore)
    );

    for (g, gt) in gts.iter().enumerate() {
        let mut owners = 0usize;
        let mut best = 0.0f64;
        for a in &assignments {
            if a.label == AnchorLabel::Foreground && a.matched_gt == Some(g) {
                owners += 1;
                best = best.max(iou(&grid.anchors[a.anchor_index], &gt.bbox));
            }
        }
        println!(
            "gt {g} ({}): {} foreground anchors, best IoU {:.4}",
            gt.class_id, owners, best
        );
    }

    let sample = sample_minibatch(&assignments, args.batch, args.fg_fraction, args.seed)?;
    for w in &sample.warnings {
        eprintln!("warning: {w}");
    }
    let fg_in_batch = sample
        .value
        .iter()
        .filter(|&&i| assignments[i].label == AnchorLabel::Foreground)
        .count();
    println!(
        "minibatch (batch {}, fg fraction {}, seed {}): {} foreground + {} background",
        args.batch,
        args.fg_fraction,
        args.seed,
        fg_in_batch,
        sample.value.len() - fg_in_batch
    );
    Ok(())
}

#[derive(Args)]
struct DeskLossesArgs {
    /// The four partial losses: RPN objectness, RPN localisation, classifier
    /// classification, classifier localisation.
    #[arg(long, default_value = "0.0593,0.0598,0.2015,0.0564", value_name = "LIST")]
    parts: String,

    /// Mixing weights for the four parts.
    #[arg(long, default_value = "1,1,1,1", value_name = "LIST")]
    weights: String,
}

fn cmd_desk_losses(args: DeskLossesArgs) -> anyhow::Result<()> {
    let to_array = |values: Vec<f64>, what: &str| -> anyhow::Result<[f64; 4]> {
        values.try_into().map_err(|v: Vec<f64>| {
            CoreError::InvalidArgument(format!("expected 4 {what}, got {}", v.len())).into()
        })
    };
    let parts = to_array(parse_f64_list(&args.parts, "loss part")?, "loss parts")?;
    let weights = to_array(parse_f64_list(&args.weights, "weight")?, "weights")?;

    let breakdown = combine_losses(parts, weights)?;
    let rows = [
        ("rpn objectness", breakdown.rpn_objectness),
        ("rpn localisation", breakdown.rpn_localisation),
        ("classifier classification", breakdown.classifier_classification),
        ("classifier localisation", breakdown.classifier_localisation),
    ];
    for ((name, part), weight) in rows.iter().zip(breakdown.weights) {
        println!("{name:<26} {part:>8.4}  x {weight}");
    }
    println!("{:<26} {:>8.4}", "total", breakdown.total);
    Ok(())
}

#[derive(Args)]
struct DeskAdamArgs {
    /// Learning rate.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,

    /// Starting parameter value.
    #[arg(long, default_value_t = 1.0)]
    start: f64,

    /// Step budget.
    #[arg(long, default_value_t = 200)]
    max_steps: u64,

    /// Convergence bar on |theta|.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn cmd_desk_adam(args: DeskAdamArgs) -> anyhow::Result<()> {
    // Minimize f(theta) = theta^2 from the configured start.
    let mut state = AdamState::new(1, args.lr)?;
    let mut theta = [args.start];
    println!("step {:>3}  theta {:+.6}  loss {:.6e}", 0, theta[0], theta[0] * theta[0]);
    for step in 1..=args.max_steps {
        let update = state.step(&[2.0 * theta[0]])?;
        theta[0] += update[0];
        if step % 20 == 0 {
            println!("step {step:>3}  theta {:+.6}  loss {:.6e}", theta[0], theta[0] * theta[0]);
        }
        if theta[0].abs() < args.tolerance {
            println!(
                "converged after {step} steps: |theta| = {:.6e} < {:e}",
                theta[0].abs(),
                args.tolerance
            );
            return Ok(());
        }
    }
    Err(CoreError::InvalidArgument(format!(
        "no convergence within {} steps: |theta| = {:.6e}",
        args.max_steps,
        theta[0].abs()
    ))
    .into())
}

fn cmd_desk(check: DeskCommand) -> anyhow::Result<()> {
    match check {
        DeskCommand::Anchors(args) => cmd_desk_anchors(args),
        DeskCommand::Assign(args) => cmd_desk_assign(args),
        DeskCommand::Losses(args) => cmd_desk_losses(args),
        DeskCommand::Adam(args) => cmd_desk_adam(args),
    }
}

// ------------------------------------------------------------- export-store

#[derive(Args)]
struct ExportStoreArgs {
    /// Gateway submission store (JSONL) to flatten.
    #[arg(long, value_name = "FILE")]
    store: PathBuf,

    /// Detections CSV to write.
    #[arg(long, default_value = "detections.csv", value_name = "FILE")]
    out: PathBuf,
}

fn cmd_export_store(args: ExportStoreArgs, out_dir: Option<&Path>) -> anyhow::Result<()> {
    // A store that was never written is a fresh start for `serve`, but for an
    // export it is almost certainly a typo.
    if !args.store.exists() {
        return Err(CoreError::InvalidArgument(format!(
            "store {} does not exist",
            args.store.display()
        ))
        .into());
    }
    let entries = load_store_entries(&args.store)
        .with_context(|| format!("reading store {}", args.store.display()))?;
    let mut detections = Vec::new();
    for entry in &entries {
        for (i, det) in entry.detections.iter().enumerate() {
            let class: UlcerClass = det.class.parse().map_err(|e| {
                CoreError::Parse(format!(
                    "submission {} detection {i}: {e}",
                    entry.submission_id
                ))
            })?;
            let bbox = puw_core::BBox::new(det.xmin, det.ymin, det.xmax, det.ymax)?;
            detections.push(Detection::new(
                entry.image_id.clone(),
                class,
                det.confidence,
                bbox,
            )?);
        }
    }

    let out = resolve_out(&args.out, out_dir)?;
    write_output(&out, &puw_core::eval::detections_to_csv(&detections))?;
    println!(
        "exported {} detections from {} submissions",
        detections.len(),
        entries.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

// -------------------------------------------------------------------- serve

#[derive(Args)]
struct ServeArgs {
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,

    /// Port to bind; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    port: u16,

    /// Ground-truth manifest backing the report endpoint; without one the
    /// gateway accepts submissions but answers reports with 503.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,

    /// Append-only submission store.
    #[arg(long, default_value = "store.jsonl", value_name = "FILE")]
    store_path: PathBuf,
}

fn cmd_serve(args: ServeArgs) -> anyhow::Result<()> {
    let manifest = match &args.manifest {
        Some(path) => Some(
            DatasetManifest::read_jsonl(path)
                .with_context(|| format!("reading manifest {}", path.display()))?
                .into_records(),
        ),
        None => None,
    };

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let state = Arc::new(AppState::new(manifest, &args.store_path)?);
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.host, args.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        println!("store at {}", args.store_path.display());
        tokio::select! {
            served = puw_gateway::serve_on(listener, state) => served.map_err(anyhow::Error::from),
            interrupted = tokio::signal::ctrl_c() => {
                interrupted?;
                println!("shutting down");
                Ok(())
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_parse_names_and_parameters() {
        let ops = parse_ops("flip-h,rotate=10,scale").unwrap();
        assert_eq!(
            ops,
            vec![
                AugmentOp::FlipHorizontal,
                AugmentOp::Rotate(Some(10.0)),
                AugmentOp::Scale(None)
            ]
        );
        assert!(parse_ops("flip-h=1").is_err());
        assert!(parse_ops("sharpen").is_err());
        assert!(parse_ops("").is_err());
    }

    #[test]
    fn csv_reports_merge_under_one_header() {
        let a = "h1,h2\n1,2\n".to_string();
        let b = "h1,h2\n3,4\n".to_string();
        assert_eq!(merge_report_csv(&[a, b]), "h1,h2\n1,2\n3,4\n");
    }

    #[test]
    fn exit_codes_follow_error_families() {
        let parse: anyhow::Error = CoreError::Parse("x".into()).into();
        let invariant: anyhow::Error = CoreError::Strict("x".into()).into();
        let empty: anyhow::Error = CoreError::Empty("x".into()).into();
        let other = anyhow::anyhow!("plain");
        assert_eq!(exit_code(&parse), 2);
        assert_eq!(exit_code(&invariant), 3);
        assert_eq!(exit_code(&empty), 4);
        assert_eq!(exit_code(&other), 1);
    }
}
