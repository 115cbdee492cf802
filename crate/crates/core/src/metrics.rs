//! Report-level evaluation: BLEU, ROUGE-L and label F1 aggregations.
//!
//! Tokenization lowercases, splits on whitespace and turns every character that
//! is neither alphanumeric nor whitespace into its own token.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The fourteen observation classes of the CheXbert labeler.
pub const CHEXBERT_CLASSES: [&str; 14] = [
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
];

/// The common five-class subset.
pub const CHEXBERT_5: [&str; 5] = ["Cardiomegaly", "Edema", "Consolidation", "Atelectasis", "Pleural Effusion"];

pub const ROUGE_BETA: f64 = 1.2;

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLabel {
    Positive,
    Negative,
    Uncertain,
    Absent,
}

impl RawLabel {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            "uncertain" => Ok(Self::Uncertain),
            "absent" | "" => Ok(Self::Absent),
            other => Err(Error::parse("label", format!("unknown label value {other:?}"))),
        }
    }
}

/// Binary example-by-class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    classes: Vec<String>,
    rows: Vec<Vec<bool>>,
}

impl LabelMatrix {
    pub fn new(classes: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != classes.len()) {
            return Err(Error::validation(format!(
                "label row {i} has {} entries for {} classes",
                r.len(),
                classes.len()
            )));
        }
        Ok(Self { classes, rows })
    }

    /// Rows over the CheXbert class list; every row must have 14 entries.
    pub fn chexbert(rows: Vec<Vec<bool>>) -> Result<Self> {
        Self::new(CHEXBERT_CLASSES.iter().map(|s| s.to_string()).collect(), rows)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps only the named columns, in the order given.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| {
                self.classes
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::validation(format!("unknown class {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: names.iter().map(|s| s.to_string()).collect(),
            rows: self.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect(),
        })
    }
}

/// Positive maps to 1; negative, uncertain and absent map to 0.
pub fn binarize_labels(raw: &[Vec<RawLabel>], classes: &[&str]) -> Result<LabelMatrix> {
    LabelMatrix::new(
        classes.iter().map(|s| s.to_string()).collect(),
        raw.iter().map(|r| r.iter().map(|&l| l == RawLabel::Positive).collect()).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Suite {
    pub micro: f64,
    pub macro_: f64,
    pub example: f64,
    pub per_class: Vec<ClassScore>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

/// F1 of two sets; two empty sets score 1.
pub fn set_f1<T: PartialEq>(pred: &[T], reference: &[T]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let tp = pred.iter().filter(|p| reference.contains(p)).count();
    f1_counts(tp, pred.len() - tp, reference.len() - tp)
}

/// Mean of [`set_f1`] over paired examples.
pub fn example_f1_sets<T: PartialEq>(pred: &[Vec<T>], reference: &[Vec<T>]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::validation("no examples to score"));
    }
    Ok(pred.iter().zip(reference).map(|(p, r)| set_f1(p, r)).sum::<f64>() / pred.len() as f64)
}

/// Micro, macro and example-based F1.
///
/// Pooled counts with no positives anywhere give micro F1 = 1. A class with no
/// positives in either matrix scores 0 in the macro average. A row with no
/// positives in either matrix scores 1 in the example average.
pub fn f1_suite(pred: &LabelMatrix, reference: &LabelMatrix) -> Result<F1Suite> {
    if pred.classes != reference.classes {
        return Err(Error::validation("prediction and reference class lists differ"));
    }
    if pred.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::validation("no examples to score"));
    }
    let k = pred.classes.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut example_sum = 0.0;
    for (p, r) in pred.rows.iter().zip(&reference.rows) {
        let (mut etp, mut efp, mut efn) = (0, 0, 0);
        for c in 0..k {
            match (p[c], r[c]) {
                (true, true) => {
                    tp[c] += 1;
                    etp += 1
                }
                (true, false) => {
                    fp[c] += 1;
                    efp += 1
                }
                (false, true) => {
                    fn_[c] += 1;
                    efn += 1
                }
                (false, false) => {}
            }
        }
        example_sum += if etp + efp + efn == 0 { 1.0 } else { f1_counts(etp, efp, efn) };
    }

    let per_class: Vec<ClassScore> = (0..k)
        .map(|c| ClassScore {
            class: pred.classes[c].clone(),
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            f1: f1_counts(tp[c], fp[c], fn_[c]),
            support: tp[c] + fn_[c],
        })
        .collect();
    let (stp, sfp, sfn) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let micro = if stp + sfp + sfn == 0 { 1.0 } else { f1_counts(stp, sfp, sfn) };
    let macro_ = if k == 0 { 0.0 } else { per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64 };
    Ok(F1Suite {
        micro,
        macro_,
        example: example_sum / pred.len() as f64,
        per_class,
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with uniform weights over orders `1..=max_n` and no smoothing.
pub fn bleu<S: AsRef<str>>(candidates: &[S], references: &[S], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::validation("BLEU needs at least one candidate"));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::validation(format!("BLEU order must lie in 1..=4, got {max_n}")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        let ct = tokenize(cand.as_ref());
        let rt = tokenize(reference.as_ref());
        c += ct.len();
        r += rt.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&rt, n);
            for (g, k) in ngram_counts(&ct, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / max_n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure of one candidate against one reference.
pub fn rouge_l(candidate: &str, reference: &str, beta: f64) -> Result<f64> {
    let rt = tokenize(reference);
    if rt.is_empty() {
        return Err(Error::validation("ROUGE-L reference is empty"));
    }
    let ct = tokenize(candidate);
    let lcs = lcs_len(&ct, &rt);
    if lcs == 0 {
        return Ok(0.0);
    }
    let rec = lcs as f64 / rt.len() as f64;
    let prec = lcs as f64 / ct.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * rec * prec / (rec + b2 * prec))
}

/// Mean ROUGE-L over pairs.
pub fn corpus_rouge_l<S: AsRef<str>>(candidates: &[S], references: &[S], beta: f64) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::validation("ROUGE-L needs at least one pair"));
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c.as_ref(), r.as_ref(), beta)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// One label entry in an evaluation record: binary 0/1 or a named status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Binary(u8),
    Named(String),
}

impl LabelValue {
    fn is_positive(&self) -> Result<bool> {
        match self {
            LabelValue::Binary(0) => Ok(false),
            LabelValue::Binary(1) => Ok(true),
            LabelValue::Binary(v) => Err(Error::parse("label", format!("binary label must be 0 or 1, got {v}"))),
            LabelValue::Named(s) => Ok(RawLabel::parse(s)? == RawLabel::Positive),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub id: String,
    pub candidate: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_labels: Option<Vec<LabelValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_labels: Option<Vec<LabelValue>>,
}

pub fn read_eval_records<R: BufRead>(reader: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Label metrics are present only when every record carries labels.
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub example_f1: Option<f64>,
    pub per_class: Vec<ClassScore>,
}

impl MetricReport {
    /// Writes `metric,value` rows, then one row per class statistic.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(w, "metric,value")?;
        writeln!(w, "examples,{}", self.examples)?;
        writeln!(w, "bleu1,{}", self.bleu1)?;
        writeln!(w, "bleu4,{}", self.bleu4)?;
        writeln!(w, "rouge_l,{}", self.rouge_l)?;
        writeln!(w, "micro_f1,{}", opt(self.micro_f1))?;
        writeln!(w, "macro_f1,{}", opt(self.macro_f1))?;
        writeln!(w, "example_f1,{}", opt(self.example_f1))?;
        for c in &self.per_class {
            let name = c.class.replace(',', " ");
            writeln!(w, "precision/{name},{}", c.precision)?;
            writeln!(w, "recall/{name},{}", c.recall)?;
            writeln!(w, "f1/{name},{}", c.f1)?;
        }
        Ok(())
    }
}

/// Scores a set of records; `classes` names the label columns and `subset`
/// optionally restricts the F1 suite to some of them.
pub fn evaluate_records(records: &[EvalRecord], classes: &[&str], subset: Option<&[&str]>) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::validation("no records to evaluate"));
    }
    let candidates: Vec<&str> = records.iter().map(|r| r.candidate.as_str()).collect();
    let references: Vec<&str> = records.iter().map(|r| r.reference.as_str()).collect();
    let bleu1 = bleu(&candidates, &references, 1)?;
    let bleu4 = bleu(&candidates, &references, 4)?;
    let rouge = corpus_rouge_l(&candidates, &references, ROUGE_BETA)?;

    let labelled = records.iter().filter(|r| r.pred_labels.is_some() && r.ref_labels.is_some()).count();
    let suite = if labelled == 0 {
        None
    } else if labelled < records.len() {
        return Err(Error::validation("labels must be given for every record or for none"));
    } else {
        let to_matrix = |pick: fn(&EvalRecord) -> &Vec<LabelValue>| -> Result<LabelMatrix> {
            let rows = records
                .iter()
                .map(|r| pick(r).iter().map(LabelValue::is_positive).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            LabelMatrix::new(classes.iter().map(|s| s.to_string()).collect(), rows)
        };
        let mut pred = to_matrix(|r| r.pred_labels.as_ref().expect("checked"))?;
        let mut reference = to_matrix(|r| r.ref_labels.as_ref().expect("checked"))?;
        if let Some(names) = subset {
            pred = pred.select(names)?;
            reference = reference.select(names)?;
        }
        Some(f1_suite(&pred, &reference)?)
    };
    Ok(MetricReport {
        examples: records.len(),
        bleu1,
        bleu4,
        rouge_l: rouge,
        micro_f1: suite.as_ref().map(|s| s.micro),
        macro_f1: suite.as_ref().map(|s| s.macro_),
        example_f1: suite.as_ref().map(|s| s.example),
        per_class: suite.map(|s| s.per_class).unwrap_or_default(),
    })
}
