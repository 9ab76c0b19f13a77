//! Standalone scorer over run documents.
//!
//! A run document is a JSON array of records; each record carries one
//! question's prediction and ground truth:
//!
//! ```json
//! {
//!   "sample_id": "highalt-test-00003",
//!   "scenario": "highalt",
//!   "kind": "counting",
//!   "prediction": 4,
//!   "ground_truth": 5
//! }
//! ```
//!
//! Box-valued predictions are arrays of `[x1, y1, x2, y2, class, confidence]`;
//! ground-truth boxes omit the confidence. Validation failures report a
//! JSON-pointer-style path to the offending value.

use super::{f1, match_boxes, score_classification, score_counting, score_exact, BBox, MatchResult};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Counting,
    Classification,
    TrueFalse,
    Grounding,
    FineGrained,
}

impl RecordKind {
    pub fn parse(s: &str) -> Option<RecordKind> {
        match s {
            "counting" => Some(RecordKind::Counting),
            "classification" => Some(RecordKind::Classification),
            "true_false" => Some(RecordKind::TrueFalse),
            "grounding" => Some(RecordKind::Grounding),
            "fine_grained" => Some(RecordKind::FineGrained),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum RecordValue {
    Count(i64),
    Classes(BTreeSet<u16>),
    Token(String),
    Boxes(Vec<BBox>),
}

#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub scenario: String,
    pub kind: RecordKind,
    pub prediction: RecordValue,
    pub ground_truth: RecordValue,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ScenarioScore {
    pub vqa: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ScoreReport {
    pub per_scenario: BTreeMap<String, ScenarioScore>,
    pub records_scored: usize,
}

impl ScoreReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,vqa,f1\n");
        for (scenario, s) in &self.per_scenario {
            let vqa = s.vqa.map(|v| format!("{v:.6}")).unwrap_or_default();
            let f1v = s.f1.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{scenario},{vqa},{f1v}\n"));
        }
        out
    }
}

fn want_str(v: &Value, path: &str) -> Result<String> {
    v.as_str().map(|s| s.to_string()).ok_or_else(|| Error::data(path, "expected a string"))
}

fn want_count(v: &Value, path: &str) -> Result<i64> {
    let n = v.as_i64().ok_or_else(|| Error::data(path, "expected an integer count"))?;
    if n < 0 {
        return Err(Error::data(path, "count must be nonnegative"));
    }
    Ok(n)
}

fn want_classes(v: &Value, path: &str) -> Result<BTreeSet<u16>> {
    let arr = v.as_array().ok_or_else(|| Error::data(path, "expected an array of class ids"))?;
    let mut out = BTreeSet::new();
    for (i, e) in arr.iter().enumerate() {
        let n = e
            .as_u64()
            .ok_or_else(|| Error::data(format!("{path}/{i}"), "expected a class id"))?;
        if n > u16::MAX as u64 {
            return Err(Error::data(format!("{path}/{i}"), "class id out of range"));
        }
        out.insert(n as u16);
    }
    Ok(out)
}

fn want_boxes(v: &Value, path: &str, with_confidence: bool) -> Result<Vec<BBox>> {
    let arr = v.as_array().ok_or_else(|| Error::data(path, "expected an array of boxes"))?;
    let want_len = if with_confidence { 6 } else { 5 };
    let mut out = Vec::with_capacity(arr.len());
    for (i, e) in arr.iter().enumerate() {
        let bpath = format!("{path}/{i}");
        let fields = e.as_array().ok_or_else(|| Error::data(&*bpath, "expected a box array"))?;
        if fields.len() != want_len {
            return Err(Error::data(&*bpath, format!("expected {want_len} box fields, got {}", fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .as_f64()
                .ok_or_else(|| Error::data(format!("{bpath}/{j}"), "expected a number"))
        };
        let class = fields[4]
            .as_u64()
            .ok_or_else(|| Error::data(format!("{bpath}/4"), "expected a class id"))?;
        let mut b = BBox::new(num(0)?, num(1)?, num(2)?, num(3)?).with_class(class as u16);
        if with_confidence {
            b = b.with_confidence(num(5)?);
        }
        if let Err(e) = b.validate() {
            return Err(Error::data(&*bpath, e.to_string()));
        }
        Ok::<(), Error>(())?;
        out.push(b);
    }
    Ok(out)
}

/// Parse and validate a run document (a JSON array of records).
pub fn parse_run_document(doc: &str) -> Result<Vec<ScoreRecord>> {
    let root: Value = serde_json::from_str(doc)?;
    let arr = root
        .as_array()
        .ok_or_else(|| Error::data("", "run document must be a JSON array of records"))?;
    let mut records = Vec::with_capacity(arr.len());
    for (i, rec) in arr.iter().enumerate() {
        let base = format!("/{i}");
        let obj = rec
            .as_object()
            .ok_or_else(|| Error::data(&*base, "expected a record object"))?;
        let field = |name: &str| -> Result<&Value> {
            obj.get(name)
                .ok_or_else(|| Error::data(format!("{base}/{name}"), "missing required field"))
        };
        let sample_id = want_str(field("sample_id")?, &format!("{base}/sample_id"))?;
        let scenario = want_str(field("scenario")?, &format!("{base}/scenario"))?;
        let kind_str = want_str(field("kind")?, &format!("{base}/kind"))?;
        let kind = RecordKind::parse(&kind_str)
            .ok_or_else(|| Error::data(format!("{base}/kind"), format!("unknown kind `{kind_str}`")))?;
        let pred = field("prediction")?;
        let gt = field("ground_truth")?;
        let ppath = format!("{base}/prediction");
        let gpath = format!("{base}/ground_truth");
        let (prediction, ground_truth) = match kind {
            RecordKind::Counting => (
                RecordValue::Count(want_count(pred, &ppath)?),
                RecordValue::Count(want_count(gt, &gpath)?),
            ),
            RecordKind::Classification => {
                let g = want_classes(gt, &gpath)?;
                if g.is_empty() {
                    return Err(Error::data(&*gpath, "classification ground truth must be nonempty"));
                }
                (RecordValue::Classes(want_classes(pred, &ppath)?), RecordValue::Classes(g))
            }
            RecordKind::TrueFalse => (
                RecordValue::Token(want_str(pred, &ppath)?),
                RecordValue::Token(want_str(gt, &gpath)?),
            ),
            RecordKind::Grounding | RecordKind::FineGrained => (
                RecordValue::Boxes(want_boxes(pred, &ppath, true)?),
                RecordValue::Boxes(want_boxes(gt, &gpath, false)?),
            ),
        };
        records.push(ScoreRecord { sample_id, scenario, kind, prediction, ground_truth });
    }
    Ok(records)
}

/// Score validated records: pooled VQA percentage per scenario and pooled
/// grounding/fine-grained F1 percentage per scenario.
pub fn score_records(records: &[ScoreRecord]) -> Result<ScoreReport> {
    #[derive(Default)]
    struct Pool {
        easy: Vec<f64>,
        grounding: MatchResult,
        has_grounding: bool,
        fine: MatchResult,
        has_fine: bool,
    }
    let mut pools: BTreeMap<String, Pool> = BTreeMap::new();
    for rec in records {
        let pool = pools.entry(rec.scenario.clone()).or_default();
        match (&rec.kind, &rec.prediction, &rec.ground_truth) {
            (RecordKind::Counting, RecordValue::Count(p), RecordValue::Count(g)) => {
                pool.easy.push(score_counting(*p, *g)?);
            }
            (RecordKind::Classification, RecordValue::Classes(p), RecordValue::Classes(g)) => {
                pool.easy.push(score_classification(p, g)?);
            }
            (RecordKind::TrueFalse, RecordValue::Token(p), RecordValue::Token(g)) => {
                pool.easy.push(score_exact(p, g));
            }
            (RecordKind::Grounding, RecordValue::Boxes(p), RecordValue::Boxes(g)) => {
                pool.grounding.merge(&match_boxes(p, g, false)?);
                pool.has_grounding = true;
            }
            (RecordKind::FineGrained, RecordValue::Boxes(p), RecordValue::Boxes(g)) => {
                pool.fine.merge(&match_boxes(p, g, true)?);
                pool.has_fine = true;
            }
            _ => return Err(Error::integrity("record kind/value mismatch after validation")),
        }
    }
    let mut report = ScoreReport { records_scored: records.len(), ..Default::default() };
    for (scenario, pool) in pools {
        let vqa = if pool.easy.is_empty() {
            None
        } else {
            Some(pool.easy.iter().sum::<f64>() / pool.easy.len() as f64 * 100.0)
        };
        let f1v = match (pool.has_grounding, pool.has_fine) {
            (true, true) => {
                let (_, _, a) = f1(&pool.grounding);
                let (_, _, b) = f1(&pool.fine);
                Some((a + b) / 2.0 * 100.0)
            }
            (true, false) => Some(f1(&pool.grounding).2 * 100.0),
            (false, true) => Some(f1(&pool.fine).2 * 100.0),
            (false, false) => None,
        };
        report.per_scenario.insert(scenario, ScenarioScore { vqa, f1: f1v });
    }
    Ok(report)
}

pub fn score_run_document(doc: &str) -> Result<ScoreReport> {
    score_records(&parse_run_document(doc)?)
}
