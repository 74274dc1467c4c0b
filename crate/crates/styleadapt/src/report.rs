//! Line-delimited training logs and evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use styleadapt_core::composition::TransferDirective;
use styleadapt_core::evaluation::{summarize, EvalReport, EvalRow, EvalSummary, PplAggregation, Prediction};
use styleadapt_core::training::LogRecord;

use crate::corpus_io::write_file;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamLossLine {
    pub stream: String,
    pub l_rec: Option<f64>,
    pub l_cls: Option<f64>,
    pub mean_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLine {
    pub epoch: usize,
    pub step: u64,
    pub l_rec: f64,
    pub l_cls: f64,
    pub loss: f64,
    pub streams: Vec<StreamLossLine>,
    /// Greedy transfer accuracy per stream on the probe sentences, in [0, 1].
    pub probe_accuracy: BTreeMap<String, f64>,
    pub backbone_checksum: String,
}

impl From<&LogRecord> for LogLine {
    fn from(r: &LogRecord) -> Self {
        Self {
            epoch: r.epoch,
            step: r.step,
            l_rec: r.loss.rec,
            l_cls: r.loss.cls,
            loss: r.loss.total,
            streams: r
                .loss
                .per_stream
                .iter()
                .map(|s| StreamLossLine { stream: s.value.clone(), l_rec: s.rec, l_cls: s.cls, mean_reward: s.mean_reward })
                .collect(),
            probe_accuracy: r.probe_accuracy.iter().cloned().collect(),
            backbone_checksum: r.backbone_checksum.clone(),
        }
    }
}

pub fn log_jsonl(records: &[LogRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(&LogLine::from(r)).expect("log lines serialize") + "\n").collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub attribute: String,
    pub target: String,
    pub predicted: String,
    pub probability: f64,
    pub transfer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowLine {
    pub index: usize,
    pub source: String,
    pub directive: BTreeMap<String, String>,
    pub stream: String,
    pub output: String,
    pub predictions: Vec<PredictionLine>,
    pub bs: f64,
    pub ppl: f64,
    pub nll: f64,
    pub tokens: usize,
}

impl From<&EvalRow> for RowLine {
    fn from(r: &EvalRow) -> Self {
        Self {
            index: r.index,
            source: r.source.clone(),
            directive: r.directive.iter().map(|(a, v)| (a.to_string(), v.to_string())).collect(),
            stream: r.stream.clone(),
            output: r.output.clone(),
            predictions: r
                .predictions
                .iter()
                .map(|p| PredictionLine {
                    attribute: p.attribute.clone(),
                    target: p.target.clone(),
                    predicted: p.predicted.clone(),
                    probability: p.probability,
                    transfer: p.transfer,
                })
                .collect(),
            bs: r.content,
            ppl: r.ppl,
            nll: r.nll,
            tokens: r.tokens,
        }
    }
}

impl RowLine {
    pub fn to_row(&self) -> EvalRow {
        EvalRow {
            index: self.index,
            source: self.source.clone(),
            directive: TransferDirective::new(self.directive.clone()),
            stream: self.stream.clone(),
            output: self.output.clone(),
            predictions: self
                .predictions
                .iter()
                .map(|p| Prediction {
                    attribute: p.attribute.clone(),
                    target: p.target.clone(),
                    predicted: p.predicted.clone(),
                    probability: p.probability,
                    transfer: p.transfer,
                })
                .collect(),
            content: self.bs,
            ppl: self.ppl,
            nll: self.nll,
            tokens: self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyLine {
    pub attribute: String,
    pub acc: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamAccuracyLine {
    pub stream: String,
    pub acc: f64,
    pub count: usize,
}

/// The aggregate block closing a report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryLine {
    pub plan: String,
    pub acc: Vec<AccuracyLine>,
    pub stream_acc: Vec<StreamAccuracyLine>,
    pub joint_acc: Option<f64>,
    pub bs: f64,
    pub ppl: f64,
    pub ppl_aggregation: String,
    pub g: f64,
    pub rows: usize,
    pub sources: usize,
    /// What stands in for each reference metric.
    pub proxies: BTreeMap<String, String>,
}

impl From<&EvalSummary> for SummaryLine {
    fn from(s: &EvalSummary) -> Self {
        Self {
            plan: s.plan.clone(),
            acc: s.accuracy.iter().map(|a| AccuracyLine { attribute: a.attribute.clone(), acc: a.acc, count: a.count }).collect(),
            stream_acc: s.streams.iter().map(|a| StreamAccuracyLine { stream: a.stream.clone(), acc: a.acc, count: a.count }).collect(),
            joint_acc: s.joint_accuracy,
            bs: s.content,
            ppl: s.ppl,
            ppl_aggregation: s.ppl_aggregation.as_str().into(),
            g: s.g,
            rows: s.rows,
            sources: s.sources,
            proxies: BTreeMap::from([
                ("bs".to_string(), "greedy-match F1 over frozen backbone encoder states".to_string()),
                ("ppl".to_string(), "in-artifact causal transformer language model".to_string()),
            ]),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Footer {
    summary: SummaryLine,
}

/// One JSON row per output followed by a `{"summary": ...}` footer line.
pub fn report_jsonl(report: &EvalReport) -> String {
    let mut out = String::new();
    for r in &report.rows {
        out.push_str(&serde_json::to_string(&RowLine::from(r)).expect("rows serialize"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&Footer { summary: SummaryLine::from(&report.summary) }).expect("summary serializes"));
    out.push('\n');
    out
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_file(path, report_jsonl(report).as_bytes())
}

/// Parses a report file back into rows and its footer.
pub fn read_report(path: &Path) -> Result<(Vec<RowLine>, SummaryLine)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let (footer, rows) = lines.split_last().ok_or_else(|| CliError::format(path, "empty report"))?;
    let footer: Footer = serde_json::from_str(footer).map_err(|e| CliError::format(path, format!("footer: {e}")))?;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1))))
        .collect::<Result<Vec<RowLine>>>()?;
    Ok((rows, footer.summary))
}

/// Recomputes the aggregate of a parsed report from its rows alone.
pub fn resummarize(rows: &[RowLine], summary: &SummaryLine) -> Result<SummaryLine> {
    let rows: Vec<EvalRow> = rows.iter().map(RowLine::to_row).collect();
    let attributes: Vec<String> = summary.acc.iter().map(|a| a.attribute.clone()).collect();
    let agg = PplAggregation::parse(&summary.ppl_aggregation)?;
    let s = summarize(&rows, &summary.plan, &attributes, agg, summary.joint_acc.is_some())?;
    Ok(SummaryLine::from(&s))
}
