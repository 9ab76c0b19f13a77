//! Shared domain types: scenarios, images, question/answer structures, and
//! the JSON-lines dataset file format.

use crate::error::{Error, Result};
use crate::metrics::BBox;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Data-collection context. Each id names the visual statistics it mimics:
/// sparse tiny objects seen from far above, dim low-contrast scenes, dense
/// street-level clutter, and a few large close-up objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    HighAlt,
    Underwater,
    LowAlt,
    Indoor,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] =
        [ScenarioId::HighAlt, ScenarioId::Underwater, ScenarioId::LowAlt, ScenarioId::Indoor];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioId::HighAlt => "high_alt",
            ScenarioId::Underwater => "underwater",
            ScenarioId::LowAlt => "low_alt",
            ScenarioId::Indoor => "indoor",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioId> {
        ScenarioId::ALL.iter().copied().find(|sc| sc.name() == s)
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Square RGB image, row-major H×W×C, values in [0, 1]. Pixel values are
/// quantized to f32 precision at render time so the base64 f32 encoding in
/// dataset files round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(size: usize, channels: usize, v: f64) -> Image {
        Image { size, channels, pixels: vec![v; size * size * channels] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.size + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.size + x) * self.channels + c] = v;
    }

    /// Clamp to [0,1] and quantize every value to f32 precision.
    pub fn quantize(&mut self) {
        for p in self.pixels.iter_mut() {
            *p = (p.clamp(0.0, 1.0) as f32) as f64;
        }
    }

    pub fn to_b64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.pixels.len() * 4);
        for &p in &self.pixels {
            bytes.extend_from_slice(&(p as f32).to_le_bytes());
        }
        B64.encode(bytes)
    }

    pub fn from_b64(size: usize, channels: usize, b64: &str) -> Result<Image> {
        let bytes = B64
            .decode(b64)
            .map_err(|e| Error::data("/image/data_b64", format!("bad base64: {e}")))?;
        let want = size * size * channels * 4;
        if bytes.len() != want {
            return Err(Error::data(
                "/image/data_b64",
                format!("expected {want} bytes, got {}", bytes.len()),
            ));
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Image { size, channels, pixels })
    }
}

/// One rendered object with its exact raster extent and class.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Counting,
    Classification,
    TrueFalse,
    Grounding,
    FineGrained,
}

impl QuestionKind {
    pub fn name(&self) -> &'static str {
        match self {
            QuestionKind::Counting => "counting",
            QuestionKind::Classification => "classification",
            QuestionKind::TrueFalse => "true_false",
            QuestionKind::Grounding => "grounding",
            QuestionKind::FineGrained => "fine_grained",
        }
    }

    /// Easy kinds feed the VQA score; grounding kinds feed F1.
    pub fn is_easy(&self) -> bool {
        matches!(self, QuestionKind::Counting | QuestionKind::Classification | QuestionKind::TrueFalse)
    }
}

/// Structured stand-in for a natural-language question: a task kind plus an
/// optional class id for the fine-grained kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub kind: QuestionKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class: Option<u16>,
}

impl Question {
    pub fn plain(kind: QuestionKind) -> Question {
        Question { kind, class: None }
    }

    pub fn about(kind: QuestionKind, class: u16) -> Question {
        Question { kind, class: Some(class) }
    }
}

/// Ground truth or model response for a question. Ground-truth boxes leave
/// `confidence` unset; predicted boxes carry one.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Count(u32),
    Classes(BTreeSet<u16>),
    YesNo(bool),
    Boxes(Vec<BBox>),
}

/// One generated sample: image, exact object list, derived questions.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub scenario: ScenarioId,
    pub image: Image,
    pub objects: Vec<SceneObject>,
    pub questions: Vec<(Question, Answer)>,
}

// ── dataset file format ─────────────────────────────────────────────────
// One JSON object per line; see docs/formats.md for the field-level contract.

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    size: usize,
    channels: usize,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct QuestionRecord {
    kind: QuestionKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    class: Option<u16>,
    answer: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    scenario: ScenarioId,
    image: ImageRecord,
    objects: Vec<(f64, f64, f64, f64, u16)>,
    questions: Vec<QuestionRecord>,
}

fn answer_to_value(a: &Answer) -> serde_json::Value {
    use serde_json::json;
    match a {
        Answer::Count(n) => json!(n),
        Answer::Classes(set) => json!(set.iter().collect::<Vec<_>>()),
        Answer::YesNo(b) => json!(if *b { "yes" } else { "no" }),
        Answer::Boxes(boxes) => json!(boxes
            .iter()
            .map(|b| (b.x1, b.y1, b.x2, b.y2, b.class.unwrap_or(0)))
            .collect::<Vec<_>>()),
    }
}

fn answer_from_value(kind: QuestionKind, v: &serde_json::Value, path: &str) -> Result<Answer> {
    match kind {
        QuestionKind::Counting => v
            .as_u64()
            .map(|n| Answer::Count(n as u32))
            .ok_or_else(|| Error::data(path, "expected a count")),
        QuestionKind::Classification => {
            let arr = v.as_array().ok_or_else(|| Error::data(path, "expected class array"))?;
            let mut set = BTreeSet::new();
            for e in arr {
                set.insert(
                    e.as_u64().ok_or_else(|| Error::data(path, "expected class id"))? as u16,
                );
            }
            Ok(Answer::Classes(set))
        }
        QuestionKind::TrueFalse => match v.as_str() {
            Some("yes") => Ok(Answer::YesNo(true)),
            Some("no") => Ok(Answer::YesNo(false)),
            _ => Err(Error::data(path, "expected \"yes\" or \"no\"")),
        },
        QuestionKind::Grounding | QuestionKind::FineGrained => {
            let arr = v.as_array().ok_or_else(|| Error::data(path, "expected box array"))?;
            let mut boxes = Vec::new();
            for e in arr {
                let t: (f64, f64, f64, f64, u16) = serde_json::from_value(e.clone())
                    .map_err(|e| Error::data(path, format!("bad box: {e}")))?;
                boxes.push(BBox::new(t.0, t.1, t.2, t.3).with_class(t.4));
            }
            Ok(Answer::Boxes(boxes))
        }
    }
}

pub fn sample_to_json(sample: &SynthSample) -> Result<String> {
    let rec = SampleRecord {
        sample_id: sample.id.clone(),
        scenario: sample.scenario,
        image: ImageRecord {
            size: sample.image.size,
            channels: sample.image.channels,
            data_b64: sample.image.to_b64(),
        },
        objects: sample
            .objects
            .iter()
            .map(|o| (o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2, o.class))
            .collect(),
        questions: sample
            .questions
            .iter()
            .map(|(q, a)| QuestionRecord { kind: q.kind, class: q.class, answer: answer_to_value(a) })
            .collect(),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn sample_from_json(line: &str) -> Result<SynthSample> {
    let rec: SampleRecord = serde_json::from_str(line)?;
    let image = Image::from_b64(rec.image.size, rec.image.channels, &rec.image.data_b64)?;
    let objects = rec
        .objects
        .iter()
        .map(|&(x1, y1, x2, y2, class)| SceneObject { bbox: BBox::new(x1, y1, x2, y2).with_class(class), class })
        .collect();
    let mut questions = Vec::new();
    for (i, q) in rec.questions.iter().enumerate() {
        let answer = answer_from_value(q.kind, &q.answer, &format!("/questions/{i}/answer"))?;
        questions.push((Question { kind: q.kind, class: q.class }, answer));
    }
    Ok(SynthSample { id: rec.sample_id, scenario: rec.scenario, image, objects, questions })
}

pub fn write_dataset(path: &Path, samples: &[SynthSample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(out, "{}", sample_to_json(s)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SynthSample>> {
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(sample_from_json(&line)?);
    }
    Ok(samples)
}
