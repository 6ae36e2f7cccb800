//! Layer × measure correlation of hidden states against gaze measures.
//!
//! Each layer's pooled word states are reduced to one scalar per word by the
//! first principal component (fit per layer over the whole corpus), then
//! correlated with every reading measure.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gaze::{AlignedActivations, GazeCorpus, Measure};
use crate::numkit::{pca_first_component, pearson, Matrix};

/// Identifier of the PC1 orientation rule recorded in reports.
pub const PCA_SIGN_CONVENTION: &str = "first-nonzero-loading-positive";

/// Inclusive 1-based layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct LayerRange {
    pub lo: usize,
    pub hi: usize,
}

impl LayerRange {
    pub fn iter(self) -> RangeInclusive<usize> {
        self.lo..=self.hi
    }

    pub fn len(self) -> usize {
        (self.hi + 1).saturating_sub(self.lo)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn contains(self, layer: usize) -> bool {
        (self.lo..=self.hi).contains(&layer)
    }
}

impl From<LayerRange> for [usize; 2] {
    fn from(r: LayerRange) -> Self {
        [r.lo, r.hi]
    }
}

impl From<[usize; 2]> for LayerRange {
    fn from([lo, hi]: [usize; 2]) -> Self {
        LayerRange { lo, hi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub premature: LayerRange,
    pub middle: LayerRange,
    pub mature: LayerRange,
}

impl Buckets {
    pub fn bucket_of(&self, layer: usize) -> Option<&'static str> {
        if self.premature.contains(layer) {
            Some("premature")
        } else if self.middle.contains(layer) {
            Some("middle")
        } else if self.mature.contains(layer) {
            Some("mature")
        } else {
            None
        }
    }
}

fn require_three(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "bucket tripartition needs at least 3 layers, got {n}"
        )));
    }
    Ok(())
}

pub fn buckets(n: usize) -> Result<Buckets> {
    require_three(n)?;
    let a = n / 3;
    let b = 2 * n / 3;
    Ok(Buckets {
        premature: LayerRange { lo: 1, hi: a },
        middle: LayerRange { lo: a + 1, hi: b },
        mature: LayerRange { lo: b + 1, hi: n },
    })
}

/// Layers `l` with `ceil(N/3) <= l <= floor(2N/3)`, ascending.
pub fn candidate_layers(n: usize) -> Result<Vec<usize>> {
    require_three(n)?;
    Ok((n.div_ceil(3)..=2 * n / 3).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model_digest: String,
    pub corpus_id: String,
    pub n_layers: usize,
    pub measures: Vec<Measure>,
    /// `[layer - 1][measure]`; `None` where the correlation is undefined.
    #[serde(with = "na_cells")]
    pub rho: Vec<Vec<Option<f64>>>,
    #[serde(with = "na_cells")]
    pub abs_rho: Vec<Vec<Option<f64>>>,
    pub buckets: Buckets,
    pub pca_sign_convention: String,
}

impl CorrelationReport {
    pub fn rho(&self, layer: usize, m: Measure) -> Option<f64> {
        self.rho[layer - 1][m.index()]
    }
}

/// Serializes undefined cells as the string `"NA"`.
mod na_cells {
    use super::*;
    use serde::de::Error as _;

    pub fn serialize<S: Serializer>(cells: &[Vec<Option<f64>>], s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<Vec<serde_json::Value>> = cells
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| match c {
                        Some(x) => serde_json::Value::from(*x),
                        None => serde_json::Value::from("NA"),
                    })
                    .collect()
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<Option<f64>>>, D::Error> {
        let v: Vec<Vec<serde_json::Value>> = Deserialize::deserialize(d)?;
        v.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|c| match c {
                        serde_json::Value::String(s) if s == "NA" => Ok(None),
                        serde_json::Value::Number(n) => n
                            .as_f64()
                            .map(Some)
                            .ok_or_else(|| D::Error::custom("non-f64 correlation")),
                        other => Err(D::Error::custom(format!("bad correlation cell {other}"))),
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_same_words(aligned: &AlignedActivations, corpus: &GazeCorpus) -> Result<()> {
    if aligned.spans.len() != corpus.n_total() {
        return Err(Error::InvalidArgument(format!(
            "aligned activations cover {} words, corpus has {}",
            aligned.spans.len(),
            corpus.n_total()
        )));
    }
    for (span, rec) in aligned.spans.iter().zip(corpus.records()) {
        if span.sentence_id != rec.sentence_id || span.word_index != rec.word_index {
            return Err(Error::InvalidArgument(format!(
                "aligned word {}:{} does not match corpus word {}:{}",
                span.sentence_id, span.word_index, rec.sentence_id, rec.word_index
            )));
        }
    }
    Ok(())
}

/// Signed correlation per measure for one layer matrix.
pub fn correlate_layer(states: &Matrix, measures: &[Vec<Option<f64>>]) -> Result<Vec<Option<f64>>> {
    let pc = match pca_first_component(states) {
        Ok(pc) => pc,
        Err(Error::ZeroVariance | Error::TooFewSamples { .. }) => return Ok(vec![None; measures.len()]),
        Err(e) => return Err(e),
    };
    measures
        .iter()
        .map(|col| {
            let (x, y): (Vec<f64>, Vec<f64>) = pc
                .scores
                .iter()
                .zip(col)
                .filter_map(|(s, e)| e.map(|e| (*s, e)))
                .unzip();
            match pearson(&x, &y) {
                Ok(r) => Ok(Some(r)),
                Err(Error::UndefinedCorrelation(_) | Error::TooFewSamples { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

pub fn correlate(aligned: &AlignedActivations, corpus: &GazeCorpus) -> Result<CorrelationReport> {
    check_same_words(aligned, corpus)?;
    let n_layers = aligned.layers.len();
    let bk = buckets(n_layers)?;
    let columns: Vec<Vec<Option<f64>>> = Measure::ALL.iter().map(|&m| corpus.measure_column(m)).collect();
    let rho: Vec<Vec<Option<f64>>> = aligned
        .layers
        .par_iter()
        .map(|states| correlate_layer(states, &columns))
        .collect::<Result<_>>()?;
    let abs_rho = rho
        .iter()
        .map(|row| row.iter().map(|c| c.map(f64::abs)).collect())
        .collect();
    Ok(CorrelationReport {
        model_digest: aligned.model_digest.clone(),
        corpus_id: corpus.id.clone(),
        n_layers,
        measures: Measure::ALL.to_vec(),
        rho,
        abs_rho,
        buckets: bk,
        pca_sign_convention: PCA_SIGN_CONVENTION.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn cell(c: Option<f64>) -> String {
    c.map_or_else(|| "NA".to_string(), |v| format!("{v}"))
}

/// One row per (layer, measure) with its bucket name.
pub fn report_csv(report: &CorrelationReport) -> String {
    let mut out = String::from("layer,measure,rho,abs_rho,bucket\n");
    for l in 1..=report.n_layers {
        for (k, m) in report.measures.iter().enumerate() {
            let _ = writeln!(
                out,
                "{l},{m},{},{},{}",
                cell(report.rho[l - 1][k]),
                cell(report.abs_rho[l - 1][k]),
                report.buckets.bucket_of(l).unwrap_or("NA")
            );
        }
    }
    out
}

pub fn emit_report(report: &CorrelationReport, path: &Path, format: ReportFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)?,
        ReportFormat::Csv => report_csv(report),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<CorrelationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
