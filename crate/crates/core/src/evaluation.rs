//! Precision/recall/F1 on both the rejection and acceptance side, falsehood
//! accuracy, examination statistics, and report rendering.
//!
//! Zero denominators yield a metric of 0 and a flag naming the metric.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::exam::{Transcript, Verdict};
use crate::labeling::GoldLabel;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("record `{0}` is labeled Excluded and must not be evaluated")]
    Excluded(String),
    #[error("falsehood accuracy needs Incorrect gold labels only; `{0}` is labeled Correct")]
    CorrectInFalsehoods(String),
    #[error("no transcripts to summarize")]
    NoTranscripts,
    #[error("unknown report format `{0}` (expected json or markdown)")]
    UnknownFormat(String),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub gold: GoldLabel,
    pub verdict: Verdict,
    pub detector: String,
    #[serde(default)]
    pub dataset: String,
}

/// Confusion counts where the positive class is the side's target
/// (Incorrect/Reject on the rejection side).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// Adds one rejection-side observation. Excluded labels are ignored.
    pub fn add(&mut self, gold: GoldLabel, verdict: Verdict) {
        match (gold, verdict) {
            (GoldLabel::Incorrect, Verdict::Reject) => self.tp += 1,
            (GoldLabel::Correct, Verdict::Reject) => self.fp += 1,
            (GoldLabel::Correct, Verdict::Accept) => self.tn += 1,
            (GoldLabel::Incorrect, Verdict::Accept) => self.fn_ += 1,
            (GoldLabel::Excluded, _) => {}
        }
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same confusion matrix seen from the acceptance side.
    pub fn mirrored(&self) -> Counts {
        Counts {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

fn ratio<T: Float>(num: usize, den: usize) -> Option<T> {
    (den > 0).then(|| T::from(num).unwrap() / T::from(den).unwrap())
}

/// Harmonic mean of precision and recall; 0 when either is undefined or
/// both are 0.
pub fn f1_score<T: Float>(tp: usize, fp: usize, fn_: usize) -> T {
    let p = ratio::<T>(tp, tp + fp).unwrap_or_else(T::zero);
    let r = ratio::<T>(tp, tp + fn_).unwrap_or_else(T::zero);
    if p + r > T::zero() {
        (T::one() + T::one()) * p * r / (p + r)
    } else {
        T::zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideMetrics<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
    /// Counts from this side's point of view.
    pub counts: Counts,
    /// Metrics whose denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl<T: Float> SideMetrics<T> {
    pub fn from_counts(counts: Counts) -> Self {
        let mut flags = Vec::new();
        let precision = ratio(counts.tp, counts.tp + counts.fp).unwrap_or_else(|| {
            flags.push("precision undefined".to_string());
            T::zero()
        });
        let recall = ratio(counts.tp, counts.tp + counts.fn_).unwrap_or_else(|| {
            flags.push("recall undefined".to_string());
            T::zero()
        });
        Self {
            precision,
            recall,
            f1: f1_score(counts.tp, counts.fp, counts.fn_),
            counts,
            flags,
        }
    }
}

fn rejection_counts(records: &[EvalRecord]) -> Result<Counts, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Counts::default();
    for r in records {
        if r.gold == GoldLabel::Excluded {
            return Err(EvalError::Excluded(r.item_id.clone()));
        }
        c.add(r.gold, r.verdict);
    }
    Ok(c)
}

/// Precision and recall of rejecting incorrect claims.
pub fn rejection_metrics<T: Float>(records: &[EvalRecord]) -> Result<SideMetrics<T>, EvalError> {
    Ok(SideMetrics::from_counts(rejection_counts(records)?))
}

/// Precision and recall of accepting correct claims.
pub fn acceptance_metrics<T: Float>(records: &[EvalRecord]) -> Result<SideMetrics<T>, EvalError> {
    Ok(SideMetrics::from_counts(rejection_counts(records)?.mirrored()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub detector: String,
    pub dataset: String,
    pub n: usize,
    pub rejection: SideMetrics<T>,
    pub acceptance: SideMetrics<T>,
    /// Rejection-side counts.
    pub counts: Counts,
}

pub fn metrics_report<T: Float>(
    detector: &str,
    dataset: &str,
    records: &[EvalRecord],
) -> Result<MetricsReport<T>, EvalError> {
    let counts = rejection_counts(records)?;
    Ok(MetricsReport {
        detector: detector.to_string(),
        dataset: dataset.to_string(),
        n: counts.n(),
        rejection: SideMetrics::from_counts(counts),
        acceptance: SideMetrics::from_counts(counts.mirrored()),
        counts,
    })
}

/// Fraction of known-false claims that were rejected.
pub fn falsehood_accuracy<T: Float>(records: &[EvalRecord]) -> Result<T, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(r) = records.iter().find(|r| r.gold != GoldLabel::Incorrect) {
        return Err(match r.gold {
            GoldLabel::Excluded => EvalError::Excluded(r.item_id.clone()),
            _ => EvalError::CorrectInFalsehoods(r.item_id.clone()),
        });
    }
    let rejected = records.iter().filter(|r| r.verdict == Verdict::Reject).count();
    Ok(ratio(rejected, records.len()).unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsehoodResult<T> {
    pub detector: String,
    pub dataset: String,
    pub n: usize,
    pub accuracy: T,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd<T> {
    pub mean: T,
    pub std: T,
}

impl<T: Float> MeanStd<T> {
    pub fn of(values: &[T]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = T::from(values.len()).unwrap();
        let mean = values.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = values.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl<T: Float> fmt::Display for MeanStd<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.1} ± {:.1}",
            self.mean.to_f64().unwrap_or(f64::NAN),
            self.std.to_f64().unwrap_or(f64::NAN)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamStats<T> {
    pub n: usize,
    pub questions_total: MeanStd<T>,
    /// Over follow-up batches only; absent when no run asked follow-ups.
    pub followup_questions_per_iteration: Option<MeanStd<T>>,
    pub followup_iterations: MeanStd<T>,
    /// Over every batch, the setup batch included.
    pub questions_per_iteration: MeanStd<T>,
    pub inconclusive_rate: T,
}

pub fn compute_exam_stats<T: Float>(transcripts: &[Transcript]) -> Result<ExamStats<T>, EvalError> {
    if transcripts.is_empty() {
        return Err(EvalError::NoTranscripts);
    }
    let cast = |v: usize| T::from(v).unwrap();
    let totals: Vec<T> = transcripts.iter().map(|t| cast(t.counters.questions_total)).collect();
    let iterations: Vec<T> = transcripts
        .iter()
        .map(|t| cast(t.counters.followup_iterations as usize))
        .collect();
    let all_batches: Vec<T> = transcripts
        .iter()
        .flat_map(|t| t.counters.questions_per_iteration.iter().map(|&q| cast(q)))
        .collect();
    let followup_batches: Vec<T> = transcripts
        .iter()
        .flat_map(|t| t.counters.followup_batches().iter().map(|&q| cast(q)))
        .collect();
    let inconclusive = transcripts.iter().filter(|t| t.decision.inconclusive).count();
    let zero = MeanStd {
        mean: T::zero(),
        std: T::zero(),
    };
    Ok(ExamStats {
        n: transcripts.len(),
        questions_total: MeanStd::of(&totals).unwrap(),
        followup_questions_per_iteration: MeanStd::of(&followup_batches),
        followup_iterations: MeanStd::of(&iterations).unwrap(),
        questions_per_iteration: MeanStd::of(&all_batches).unwrap_or(zero),
        inconclusive_rate: ratio(inconclusive, transcripts.len()).unwrap(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExamStats<T> {
    /// E.g. the examiner/examinee pairing the stats were collected for.
    pub label: String,
    pub stats: ExamStats<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct Report<T> {
    pub schema_version: u32,
    #[serde(default)]
    pub metrics: Vec<MetricsReport<T>>,
    #[serde(default)]
    pub falsehood: Vec<FalsehoodResult<T>>,
    #[serde(default)]
    pub exam_stats: Vec<LabeledExamStats<T>>,
}

impl<T> Default for Report<T> {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            metrics: Vec::new(),
            falsehood: Vec::new(),
            exam_stats: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

fn pct<T: Float>(v: T) -> String {
    format!("{:.1}", v.to_f64().unwrap_or(f64::NAN) * 100.0)
}

/// Keys in order of first appearance.
fn ordered<'a>(keys: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for k in keys {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn side_table<T: Float>(metrics: &[MetricsReport<T>], side: fn(&MetricsReport<T>) -> &SideMetrics<T>) -> String {
    let detectors = ordered(metrics.iter().map(|m| m.detector.as_str()));
    let datasets = ordered(metrics.iter().map(|m| m.dataset.as_str()));
    let cells: BTreeMap<(&str, &str), &SideMetrics<T>> = metrics
        .iter()
        .map(|m| ((m.detector.as_str(), m.dataset.as_str()), side(m)))
        .collect();

    let mut header = vec!["Detector".to_string()];
    for d in &datasets {
        let name = if d.is_empty() { "all" } else { d };
        header.extend(["P", "R", "F1"].map(|c| format!("{name} {c}")));
    }
    let mut lines = vec![
        format!("| {} |", header.join(" | ")),
        format!("|{}", "---|".repeat(header.len())),
    ];
    for det in &detectors {
        let mut row = vec![det.to_string()];
        for ds in &datasets {
            match cells.get(&(*det, *ds)) {
                Some(m) => row.extend([pct(m.precision), pct(m.recall), pct(m.f1)]),
                None => row.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
            }
        }
        lines.push(format!("| {} |", row.join(" | ")));
    }
    lines.join("\n")
}

fn render_markdown<T: Float>(report: &Report<T>) -> String {
    let mut sections = Vec::new();
    if !report.metrics.is_empty() {
        sections.push(format!("## Rejection\n\n{}", side_table(&report.metrics, |m| &m.rejection)));
        sections.push(format!("## Acceptance\n\n{}", side_table(&report.metrics, |m| &m.acceptance)));
        let flagged: Vec<String> = report
            .metrics
            .iter()
            .flat_map(|m| {
                let rej = m.rejection.flags.iter().map(move |f| format!("rejection {f}"));
                let acc = m.acceptance.flags.iter().map(move |f| format!("acceptance {f}"));
                rej.chain(acc).map(move |f| format!("- {} / {}: {} (reported as 0)", m.detector, m.dataset, f))
            })
            .collect();
        if !flagged.is_empty() {
            sections.push(format!("Flags:\n\n{}", flagged.join("\n")));
        }
    }
    if !report.falsehood.is_empty() {
        let detectors = ordered(report.falsehood.iter().map(|f| f.detector.as_str()));
        let datasets = ordered(report.falsehood.iter().map(|f| f.dataset.as_str()));
        let mut lines = vec![
            format!("| Detector | {} |", datasets.join(" | ")),
            format!("|{}", "---|".repeat(datasets.len() + 1)),
        ];
        for det in &detectors {
            let row: Vec<String> = datasets
                .iter()
                .map(|ds| {
                    report
                        .falsehood
                        .iter()
                        .find(|f| f.detector == *det && f.dataset == *ds)
                        .map(|f| pct(f.accuracy))
                        .unwrap_or_else(|| "-".to_string())
                })
                .collect();
            lines.push(format!("| {} | {} |", det, row.join(" | ")));
        }
        sections.push(format!("## Falsehood accuracy\n\n{}", lines.join("\n")));
    }
    if !report.exam_stats.is_empty() {
        let labels: Vec<&str> = report.exam_stats.iter().map(|s| s.label.as_str()).collect();
        let mut lines = vec![
            format!("| Statistic | {} |", labels.join(" | ")),
            format!("|{}", "---|".repeat(labels.len() + 1)),
        ];
        let rows: [StatRow<T>; 5] = [
            ("# of questions", |s| s.questions_total.to_string()),
            ("# of follow-up questions per iteration", |s| {
                s.followup_questions_per_iteration
                    .map(|m| m.to_string())
                    .unwrap_or_else(|| "-".to_string())
            }),
            ("# of follow-up iterations", |s| s.followup_iterations.to_string()),
            ("# of questions per iteration", |s| s.questions_per_iteration.to_string()),
            ("% inconclusive decisions", |s| pct(s.inconclusive_rate)),
        ];
        for (name, cell) in rows {
            let row: Vec<String> = report.exam_stats.iter().map(|s| cell(&s.stats)).collect();
            lines.push(format!("| {} | {} |", name, row.join(" | ")));
        }
        sections.push(format!("## Examination statistics\n\n{}", lines.join("\n")));
    }
    let mut out = sections.join("\n\n");
    out.push('\n');
    out
}

type StatRow<T> = (&'static str, fn(&ExamStats<T>) -> String);

/// Renders a report. JSON is the canonical form; markdown lays out one row
/// per detector and a P/R/F1 column group per dataset, in percent.
pub fn emit_report<T: Float + Serialize>(report: &Report<T>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => render_markdown(report),
    }
}

pub fn load_report<T: Float + for<'de> Deserialize<'de>>(json: &str) -> Result<Report<T>, EvalError> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, gold: GoldLabel, verdict: Verdict) -> EvalRecord {
        EvalRecord {
            item_id: id.into(),
            gold,
            verdict,
            detector: "d".into(),
            dataset: "lama".into(),
        }
    }

    #[test]
    fn worked_example() {
        use GoldLabel::*;
        use Verdict::*;
        // rejected {b,c,d}, incorrect {b,c,e}
        let rs = [
            rec("a", Correct, Accept),
            rec("b", Incorrect, Reject),
            rec("c", Incorrect, Reject),
            rec("d", Correct, Reject),
            rec("e", Incorrect, Accept),
        ];
        let m = rejection_metrics::<f64>(&rs).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(m.flags.is_empty());
    }

    #[test]
    fn all_accept_flags_precision() {
        let rs = [
            rec("a", GoldLabel::Correct, Verdict::Accept),
            rec("b", GoldLabel::Incorrect, Verdict::Accept),
        ];
        let m = rejection_metrics::<f64>(&rs).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.flags, ["precision undefined"]);
        let a = acceptance_metrics::<f64>(&rs).unwrap();
        assert_eq!(a.recall, 1.0);
        assert_eq!(a.precision, 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(rejection_metrics::<f64>(&[]), Err(EvalError::Empty)));
        assert!(matches!(
            rejection_metrics::<f64>(&[rec("x", GoldLabel::Excluded, Verdict::Accept)]),
            Err(EvalError::Excluded(_))
        ));
        assert!(matches!(
            falsehood_accuracy::<f64>(&[rec("x", GoldLabel::Correct, Verdict::Reject)]),
            Err(EvalError::CorrectInFalsehoods(_))
        ));
        assert!(matches!(compute_exam_stats::<f64>(&[]), Err(EvalError::NoTranscripts)));
    }

    #[test]
    fn falsehood_fraction() {
        let mut rs: Vec<_> = (0..9).map(|i| rec(&i.to_string(), GoldLabel::Incorrect, Verdict::Reject)).collect();
        rs.push(rec("9", GoldLabel::Incorrect, Verdict::Accept));
        assert!((falsehood_accuracy::<f64>(&rs).unwrap() - 0.9).abs() < 1e-12);
        rs.pop();
        assert_eq!(falsehood_accuracy::<f64>(&rs).unwrap(), 1.0);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[6.0f64, 8.0]).unwrap();
        assert_eq!((m.mean, m.std), (7.0, 1.0));
        assert_eq!(m.to_string(), "7.0 ± 1.0");
        assert!(MeanStd::<f32>::of(&[]).is_none());
    }

    #[test]
    fn format_parse() {
        assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
        assert_eq!("markdown".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert!("csv".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn single_row_markdown() {
        let rs = [
            rec("a", GoldLabel::Correct, Verdict::Accept),
            rec("b", GoldLabel::Incorrect, Verdict::Reject),
        ];
        let report = Report {
            metrics: vec![metrics_report::<f64>("lmvlm", "lama", &rs).unwrap()],
            ..Report::default()
        };
        let md = emit_report(&report, ReportFormat::Markdown);
        assert!(md.contains("| Detector | lama P | lama R | lama F1 |"));
        assert!(md.contains("| lmvlm | 100.0 | 100.0 | 100.0 |"));
        let json = emit_report(&report, ReportFormat::Json);
        let back: Report<f64> = load_report(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(emit_report(&back, ReportFormat::Json), json);
    }
}
