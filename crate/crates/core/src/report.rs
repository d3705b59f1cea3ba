//! Result tables (CSV + markdown) and side-by-side overlay images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, BScanRecord};
use crate::losses::{EvalReport, Segmenter};
use crate::model::Variant;
use crate::spectral::{FilterMode, FrequencyFilter};
use crate::train::AblationRow;
use crate::{Error, FeatureMap, Result, CLASS_NAMES, NUM_CLASSES};

/// Prior-work rows quoted from the literature; never recomputed.
pub const LITERATURE_CSV: &str = include_str!("../data/literature_table1.csv");
pub const LITERATURE_STATUS: &str = "reported, not reproduced";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableStyle {
    /// Method + per-class dice + Mean.
    Table1,
    /// FFC flag + α + per-class dice + Mean.
    Table2,
    /// Spectral range + per-class dice + Mean.
    Table3,
}

impl TableStyle {
    pub fn leading_columns(self) -> &'static [&'static str] {
        match self {
            TableStyle::Table1 => &["Method"],
            TableStyle::Table2 => &["FFC Block", "alpha"],
            TableStyle::Table3 => &["Spectral features range"],
        }
    }

    pub fn header(self) -> Vec<String> {
        self.leading_columns()
            .iter()
            .chain(CLASS_NAMES.iter())
            .chain(["Mean"].iter())
            .map(|s| s.to_string())
            .collect()
    }
}

impl FromStr for TableStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(TableStyle::Table1),
            "table2" => Ok(TableStyle::Table2),
            "table3" => Ok(TableStyle::Table3),
            other => Err(Error::Config(format!("unknown table style `{other}`"))),
        }
    }
}

/// One table line: leading label cells plus an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub labels: Vec<String>,
    pub report: EvalReport,
}

fn fmt_score(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "n/a".to_string(),
    }
}

/// Row cells in header order: class dice to 2 decimals, Mean to 3.
pub fn row_cells(style: TableStyle, row: &TableRow) -> Result<Vec<String>> {
    if row.labels.len() != style.leading_columns().len() {
        return Err(Error::InvalidInput(format!(
            "{style:?} rows need {} label cells, got {}",
            style.leading_columns().len(),
            row.labels.len()
        )));
    }
    let mut cells = row.labels.clone();
    for name in CLASS_NAMES {
        let class = row
            .report
            .classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("report lacks the `{name}` column")))?;
        cells.push(fmt_score(class.dice, 2));
    }
    cells.push(fmt_score(Some(row.report.mean_dice), 3));
    Ok(cells)
}

/// Literature rows as table-1 cells, status column dropped.
pub fn literature_rows() -> Result<Vec<Vec<String>>> {
    let mut reader = csv::Reader::from_reader(LITERATURE_CSV.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let expected = TableStyle::Table1.header();
    if header[..expected.len()] != expected[..] {
        return Err(Error::InvalidInput("literature table columns are out of order".into()));
    }
    reader
        .records()
        .map(|r| {
            let r = r?;
            Ok(r.iter().take(expected.len()).map(str::to_string).collect())
        })
        .collect()
}

fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(md, "| {} |", r.join(" | "));
    }
    md
}

/// Paths of an emitted table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableFiles {
    pub csv: PathBuf,
    pub markdown: PathBuf,
}

/// Writes `<stem>.csv` and `<stem>.md`. With `with_literature` (table 1 only),
/// quoted prior-work rows are listed first under a separate heading and marked
/// as reported rather than reproduced.
pub fn emit_tables(
    rows: &[TableRow],
    style: TableStyle,
    with_literature: bool,
    out_dir: &Path,
    stem: &str,
) -> Result<TableFiles> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no reports to tabulate".into()));
    }
    let cells = rows
        .iter()
        .map(|r| row_cells(style, r))
        .collect::<Result<Vec<_>>>()?;
    let literature = if with_literature && style == TableStyle::Table1 {
        literature_rows()?
    } else {
        Vec::new()
    };

    let mut header = style.header();
    let mut md = String::new();
    if !literature.is_empty() {
        let _ = writeln!(md, "Prior work ({LITERATURE_STATUS}):\n");
        md.push_str(&markdown(&header, &literature));
        md.push_str("\nThis run:\n\n");
    }
    md.push_str(&markdown(&header, &cells));

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let md_path = out_dir.join(format!("{stem}.md"));
    let mut writer = csv::Writer::from_path(&csv_path)?;
    if !literature.is_empty() {
        header.push("Status".into());
    }
    writer.write_record(&header)?;
    for r in &literature {
        writer.write_record(r.iter().map(String::as_str).chain([LITERATURE_STATUS]))?;
    }
    for r in &cells {
        if literature.is_empty() {
            writer.write_record(r)?;
        } else {
            writer.write_record(r.iter().map(String::as_str).chain(["this run"]))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    Ok(TableFiles {
        csv: csv_path,
        markdown: md_path,
    })
}

/// Table label for a frequency filter, e.g. `keep(-10,10)`.
pub fn range_label(filter: &FrequencyFilter) -> String {
    match filter.mode {
        FilterMode::None => "No change".into(),
        FilterMode::Keep => format!("keep(-{0},{0})", filter.bound),
        FilterMode::Remove => format!("remove(-{0},{0})", filter.bound),
    }
}

/// Table-2 rows: conv-only branch rows first, then spectral rows by α.
/// Rows whose training failed are skipped with a warning.
pub fn alpha_table_rows(rows: &[AblationRow]) -> Vec<TableRow> {
    let mut out: Vec<(bool, f64, TableRow)> = Vec::new();
    for row in rows {
        let Some(report) = row.report() else {
            log::warn!("row `{}` has no result: {:?}", row.label, row.error);
            continue;
        };
        let spectral = row.model_config.variant == Variant::Ynet;
        let labels = if spectral {
            vec!["yes".into(), format!("{}", row.model_config.alpha)]
        } else {
            vec!["-".into(), "-".into()]
        };
        out.push((
            spectral,
            row.model_config.alpha,
            TableRow {
                labels,
                report: report.clone(),
            },
        ));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    out.into_iter().map(|(_, _, r)| r).collect()
}

pub fn frequency_table_rows(rows: &[AblationRow]) -> Vec<TableRow> {
    rows.iter()
        .filter_map(|row| match row.report() {
            Some(report) => Some(TableRow {
                labels: vec![range_label(&row.model_config.filter)],
                report: report.clone(),
            }),
            None => {
                log::warn!("row `{}` has no result: {:?}", row.label, row.error);
                None
            }
        })
        .collect()
}

/// Fixed colour per class id (background first).
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [255, 255, 255],
];

pub const LEGEND_HEIGHT: u32 = 24;

fn paint_mask(img: &mut RgbImage, mask: &Array2<u8>, x0: u32) {
    for ((i, j), &c) in mask.indexed_iter() {
        img.put_pixel(x0 + j as u32, i as u32, Rgb(PALETTE[c as usize % NUM_CLASSES]));
    }
}

/// Three panels (input, ground truth, prediction) over a legend strip of the
/// nine class colours, left to right by class id.
pub fn render_overlay(image: &Array2<f64>, gt: &Array2<u8>, pred: &Array2<u8>) -> Result<RgbImage> {
    let (h, w) = image.dim();
    if gt.dim() != (h, w) || pred.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "overlay panels differ: {:?}, {:?}, {:?}",
            image.dim(),
            gt.dim(),
            pred.dim()
        )));
    }
    let (w32, h32) = (w as u32, h as u32);
    let mut img = RgbImage::new(3 * w32, h32 + LEGEND_HEIGHT);
    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for ((i, j), &v) in image.indexed_iter() {
        let g = (((v - lo) / span) * 255.0).round() as u8;
        img.put_pixel(j as u32, i as u32, Rgb([g, g, g]));
    }
    paint_mask(&mut img, gt, w32);
    paint_mask(&mut img, pred, 2 * w32);
    let swatch = 3 * w32 / NUM_CLASSES as u32;
    for x in 0..3 * w32 {
        let c = ((x / swatch.max(1)) as usize).min(NUM_CLASSES - 1);
        for y in h32..h32 + LEGEND_HEIGHT {
            img.put_pixel(x, y, Rgb(PALETTE[c]));
        }
    }
    Ok(img)
}

/// Preprocesses `record`, segments it with `model` and writes the panel PNG.
pub fn emit_overlay<S: Segmenter + ?Sized>(
    model: &mut S,
    record: &BScanRecord,
    size: usize,
    out: &Path,
) -> Result<()> {
    let (image, gt) = preprocess(record, size)?;
    let x = image
        .clone()
        .into_shape_with_order((1, 1, size, size))
        .expect("preprocess returns size x size");
    let x: FeatureMap = x;
    let pred: Array3<u8> = model.segment(&x)?;
    let pred = pred.slice(s![0, .., ..]).to_owned();
    let img = render_overlay(&image, &gt, &pred)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(out).map_err(|e| Error::image(out, e))
}
