//! On-disk formats: prediction CSV, FTB1 feature tensors, ROC CSV, weights
//! and report JSON, serialized head models.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use wae_core::ensemble::WeightVector;
use wae_core::head::{FeatureBatch, HeadModel};
use wae_core::metrics::{percent_2dp, ClassMetrics, ClassificationReport, ConfusionCounts, RocCurve, RocPoint, WeightedMetrics};
use wae_core::model::{PredictionRecord, PredictionSet};
use wae_core::Label;

const PRED_HEADER: [&str; 3] = ["sample_id", "label", "score"];
const ROC_HEADER: [&str; 3] = ["fpr", "tpr", "threshold"];
const FTB_MAGIC: &[u8; 4] = b"FTB1";

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn check_header(reader: &mut csv::Reader<fs::File>, want: &[&str], path: &Path) -> Result<()> {
    let header = reader
        .headers()
        .with_context(|| format!("{}: cannot read header", path.display()))?;
    if header.is_empty() {
        bail!("{}: empty file, expected header `{}`", path.display(), want.join(","));
    }
    if header.iter().ne(want.iter().copied()) {
        bail!(
            "{}:1: header is `{}`, expected `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(","),
            want.join(",")
        );
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> anyhow::Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => {
            let line = pos.as_ref().map_or(0, |p| p.line());
            anyhow!("{}:{line}: expected {expected_len} fields, found {len}", path.display())
        }
        _ => anyhow!("{}: {e}", path.display()),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads `sample_id,label,score` rows. The model is named after the file stem.
pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let mut reader = open_csv(path)?;
    check_header(&mut reader, &PRED_HEADER, path)?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let at = |msg: String| anyhow!("{}:{line}: {msg}", path.display());
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(at("empty sample_id".into()));
        }
        let label = match &row[1] {
            "0" => Label::Normal,
            "1" => Label::Pneumonia,
            other => return Err(at(format!("invalid label `{other}`, expected 0 or 1"))),
        };
        let score: f64 = row[2]
            .trim()
            .parse()
            .map_err(|_| at(format!("score `{}` is not a number", &row[2])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(at(format!("score {score} outside [0, 1]")));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(at(format!("duplicate sample_id `{id}` (first seen on line {first})")));
        }
        records.push(PredictionRecord::new(id, label, score).map_err(|e| at(e.to_string()))?);
    }
    if records.is_empty() {
        bail!("{}: no prediction rows", path.display());
    }
    Ok(PredictionSet::new(file_stem(path), records)?)
}

pub fn write_predictions(path: &Path, set: &PredictionSet) -> Result<()> {
    write_prediction_rows(
        path,
        set.records().iter().map(|r| (r.sample_id.as_str(), r.true_label, r.score)),
    )
}

pub fn write_prediction_rows<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, Label, f64)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(PRED_HEADER)?;
    for (id, label, score) in rows {
        w.write_record([id, &label.bit().to_string(), &score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// FTB1: magic, `n h w c` as u32 LE, `n*h*w*c` f32 LE values, `n` label bytes.
pub fn encode_ftb(batch: &FeatureBatch) -> Result<Vec<u8>> {
    let (n, h, w, c) = batch.dims();
    let mut out = Vec::with_capacity(20 + 4 * batch.values().len() + n);
    out.extend_from_slice(FTB_MAGIC);
    for d in [n, h, w, c] {
        let d = u32::try_from(d).map_err(|_| anyhow!("dimension {d} does not fit in u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in batch.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(batch.labels().iter().map(|l| l.bit()));
    Ok(out)
}

pub fn decode_ftb(bytes: &[u8]) -> Result<FeatureBatch> {
    if bytes.len() < 20 {
        bail!("truncated FTB1 file: {} bytes, header needs 20", bytes.len());
    }
    if &bytes[..4] != FTB_MAGIC {
        bail!("bad magic {:?}, expected FTB1", String::from_utf8_lossy(&bytes[..4]));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as u64;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| anyhow!("FTB1 dimensions overflow"))?;
    let expected = 20 + 4 * count as u128 + n as u128;
    if bytes.len() as u128 != expected {
        bail!(
            "FTB1 length mismatch: {} bytes, dims {n}x{h}x{w}x{c} need {expected}",
            bytes.len()
        );
    }
    let count = count as usize;
    let values = bytes[20..20 + 4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels = bytes[20 + 4 * count..]
        .iter()
        .enumerate()
        .map(|(i, &b)| Label::from_bit(b).ok_or_else(|| anyhow!("label byte {b} of sample {i} is not 0 or 1")))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureBatch::new(h as usize, w as usize, c as usize, values, labels)?)
}

pub fn read_ftb(path: &Path) -> Result<FeatureBatch> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    decode_ftb(&bytes).with_context(|| format!("{}", path.display()))
}

pub fn write_ftb(path: &Path, batch: &FeatureBatch) -> Result<()> {
    fs::write(path, encode_ftb(batch)?).with_context(|| format!("cannot write {}", path.display()))
}

/// `fpr,tpr,threshold`; the leading point's threshold is written as `inf`.
pub fn write_roc(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(ROC_HEADER)?;
    for p in curve.points() {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_roc(path: &Path) -> Result<RocCurve> {
    let mut reader = open_csv(path)?;
    check_header(&mut reader, &ROC_HEADER, path)?;
    let mut points = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse()
                .map_err(|_| anyhow!("{}:{line}: `{}` is not a number", path.display(), &row[k]))
        };
        points.push(RocPoint {
            fpr: num(0)?,
            tpr: num(1)?,
            threshold: num(2)?,
        });
    }
    RocCurve::from_points(points).with_context(|| format!("{}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub model_names: Vec<String>,
    pub weights: WeightVector,
    pub step: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

pub fn read_model(path: &Path) -> Result<HeadModel> {
    let model: HeadModel = read_json(path)?;
    model.validate().with_context(|| format!("{}", path.display()))?;
    Ok(model)
}

/// Percentages rounded to two decimals, for the human-readable table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PercentRow {
    fn of_class(m: &ClassMetrics) -> Self {
        Self {
            precision: percent_2dp(m.precision),
            recall: percent_2dp(m.recall),
            f1: percent_2dp(m.f1),
        }
    }

    fn of_weighted(m: &WeightedMetrics) -> Self {
        Self {
            precision: percent_2dp(m.precision),
            recall: percent_2dp(m.recall),
            f1: percent_2dp(m.f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentTable {
    pub accuracy: f64,
    pub pneumonia: PercentRow,
    pub normal: PercentRow,
    pub weighted: PercentRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub step: f64,
    pub grid_size: usize,
    pub per_model_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub tool_version: String,
    pub model_names: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub threshold: f64,
    pub n_samples: u64,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub pneumonia: ClassMetrics,
    pub normal: ClassMetrics,
    pub weighted: WeightedMetrics,
    pub percent: PercentTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSummary>,
}

impl ReportDocument {
    pub fn new(report: &ClassificationReport, model_names: Vec<String>, weights: Option<&WeightVector>, threshold: f64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            model_names,
            weights: weights.map(|w| w.as_slice().to_vec()),
            threshold,
            n_samples: report.counts.total(),
            counts: report.counts,
            accuracy: report.accuracy,
            auc: report.auc,
            pneumonia: report.pneumonia,
            normal: report.normal,
            weighted: report.weighted,
            percent: PercentTable {
                accuracy: percent_2dp(report.accuracy),
                pneumonia: PercentRow::of_class(&report.pneumonia),
                normal: PercentRow::of_class(&report.normal),
                weighted: PercentRow::of_weighted(&report.weighted),
            },
            search: None,
        }
    }

    /// Table of the rounded percentages.
    pub fn table(&self) -> String {
        let p = &self.percent;
        let row = |name: &str, r: &PercentRow, support: u64| {
            format!("{name:<10} {:>9.2} {:>9.2} {:>9.2} {support:>8}\n", r.precision, r.recall, r.f1)
        };
        let mut s = format!("models: {}\n", self.model_names.join(", "));
        if let Some(w) = &self.weights {
            let w: Vec<String> = w.iter().map(|v| v.to_string()).collect();
            s += &format!("weights: {}\n", w.join(", "));
        }
        s += &format!("{:<10} {:>9} {:>9} {:>9} {:>8}\n", "", "precision", "recall", "f1", "support");
        s += &row("PNEUMONIA", &p.pneumonia, self.pneumonia.support);
        s += &row("NORMAL", &p.normal, self.normal.support);
        s += &row("weighted", &p.weighted, self.n_samples);
        s += &format!("accuracy   {:.2}%", p.accuracy);
        if let Some(a) = self.auc {
            s += &format!("  auc {a:.6}");
        }
        s.push('\n');
        s
    }
}
