//! Task heads that read the encoder's final representation. They stand in
//! for a language decoder at desk scale: counting, multi-label presence,
//! yes/no class queries, and per-token box grounding.

use crate::data::{Answer, Question, QuestionKind};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::params::{ParamBinder, ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::tape::{ReduceAxis, Tape, Var};
use crate::tensor::{InitMode, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const OBJECTNESS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub count_w: ParamId,
    pub count_b: ParamId,
    pub multi_w: ParamId,
    pub multi_b: ParamId,
    pub bin_w: ParamId,
    pub bin_b: ParamId,
    /// Class conditioning table for fine-grained questions, `[n_classes, d]`.
    pub class_embed: ParamId,
    pub ground_w: ParamId,
    pub ground_b: ParamId,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, d: usize, c_max: usize, n_classes: usize, seed: u64) -> HeadParams {
        let w = |_name: &str, shape: &[usize], ix: u64| {
            Tensor::init(shape, InitMode::Normal { seed: derive_seed(seed, &[0xbead, ix]), std: 0.02 })
                .expect("static shape")
        };
        let ground_out = 1 + 4 + n_classes;
        HeadParams {
            count_w: store.add("head.count.w", w("count", &[d, c_max + 1], 0), true),
            count_b: store.add("head.count.b", Tensor::zeros(&[c_max + 1]), true),
            multi_w: store.add("head.multi.w", w("multi", &[d, n_classes], 1), true),
            multi_b: store.add("head.multi.b", Tensor::zeros(&[n_classes]), true),
            bin_w: store.add("head.binary.w", w("binary", &[d, 1], 2), true),
            bin_b: store.add("head.binary.b", Tensor::zeros(&[1]), true),
            class_embed: store.add("head.class_embed", w("embed", &[n_classes, d], 3), true),
            ground_w: store.add("head.ground.w", w("ground", &[d, ground_out], 4), true),
            ground_b: store.add("head.ground.b", Tensor::zeros(&[ground_out]), true),
        }
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.count_w,
            self.count_b,
            self.multi_w,
            self.multi_b,
            self.bin_w,
            self.bin_b,
            self.class_embed,
            self.ground_w,
            self.ground_b,
        ]
    }
}

/// Tape-level head outputs; values are logits, not probabilities.
#[derive(Debug, Clone)]
pub enum HeadOutput {
    Count { logits: Var },
    Multi { logits: Var },
    Binary { logit: Var },
    Ground { obj: Var, box_raw: Var, class_logits: Var },
}

/// Mean-pool tokens into a `[1, d]` summary.
fn pooled(tape: &mut Tape, r_last: Var) -> Result<Var> {
    let d = tape.shape(r_last)[1];
    let m = tape.mean_reduce(r_last, ReduceAxis::Feature)?;
    tape.reshape(m, &[1, d])
}

pub fn head_forward(
    heads: &HeadParams,
    tape: &mut Tape,
    binder: &mut ParamBinder,
    r_last: Var,
    question: &Question,
    n_classes: usize,
) -> Result<HeadOutput> {
    match question.kind {
        QuestionKind::Counting => {
            let x = pooled(tape, r_last)?;
            let w = binder.var(tape, heads.count_w);
            let b = binder.var(tape, heads.count_b);
            let logits = tape.matmul(x, w)?;
            let logits = tape.add_row(logits, b)?;
            Ok(HeadOutput::Count { logits })
        }
        QuestionKind::Classification => {
            let x = pooled(tape, r_last)?;
            let w = binder.var(tape, heads.multi_w);
            let b = binder.var(tape, heads.multi_b);
            let logits = tape.matmul(x, w)?;
            let logits = tape.add_row(logits, b)?;
            Ok(HeadOutput::Multi { logits })
        }
        QuestionKind::TrueFalse => {
            let class = question
                .class
                .ok_or_else(|| Error::config("question.class", "true/false questions carry a class id"))?;
            if class as usize >= n_classes {
                return Err(Error::config("question.class", format!("class {class} out of range {n_classes}")));
            }
            let x = pooled(tape, r_last)?;
            let table = binder.var(tape, heads.class_embed);
            let emb = tape.embed_row(table, class as usize)?;
            let x = tape.add(x, emb)?;
            let w = binder.var(tape, heads.bin_w);
            let b = binder.var(tape, heads.bin_b);
            let logit = tape.matmul(x, w)?;
            let logit = tape.add_row(logit, b)?;
            Ok(HeadOutput::Binary { logit })
        }
        QuestionKind::Grounding | QuestionKind::FineGrained => {
            let w = binder.var(tape, heads.ground_w);
            let b = binder.var(tape, heads.ground_b);
            let out = tape.matmul(r_last, w)?;
            let out = tape.add_row(out, b)?;
            let obj = tape.slice_cols(out, 0, 1)?;
            let box_raw = tape.slice_cols(out, 1, 5)?;
            let class_logits = tape.slice_cols(out, 5, 5 + n_classes)?;
            Ok(HeadOutput::Ground { obj, box_raw, class_logits })
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Decode one token's raw box parameters into a clamped pixel box. Centers
/// are token-relative (the sigmoid spans the token's own patch); sizes are
/// image-relative.
fn decode_box(raw: &[f64], token: usize, grid: usize, patch: f64) -> (f64, f64, f64, f64) {
    let image_size = grid as f64 * patch;
    let (ty, tx) = (token / grid, token % grid);
    let cx = (tx as f64 + sigmoid(raw[0])) * patch;
    let cy = (ty as f64 + sigmoid(raw[1])) * patch;
    let w = sigmoid(raw[2]) * image_size;
    let h = sigmoid(raw[3]) * image_size;
    let x1 = (cx - w / 2.0).clamp(0.0, image_size);
    let y1 = (cy - h / 2.0).clamp(0.0, image_size);
    let x2 = (cx + w / 2.0).clamp(0.0, image_size);
    let y2 = (cy + h / 2.0).clamp(0.0, image_size);
    (x1, y1, x2, y2)
}

/// Regression targets in sigmoid space for a box assigned to `token`:
/// patch-fraction center offsets and image-fraction sizes.
pub fn box_targets(b: &BBox, token: usize, grid: usize, patch: f64) -> [f64; 4] {
    let image_size = grid as f64 * patch;
    let (ty, tx) = (token / grid, token % grid);
    let cx = (b.x1 + b.x2) / 2.0;
    let cy = (b.y1 + b.y2) / 2.0;
    [
        (cx / patch - tx as f64).clamp(0.0, 1.0),
        (cy / patch - ty as f64).clamp(0.0, 1.0),
        (b.x2 - b.x1) / image_size,
        (b.y2 - b.y1) / image_size,
    ]
}

/// Value-space prediction extraction for evaluation.
pub fn predict(
    tape: &Tape,
    out: &HeadOutput,
    question: &Question,
    grid: usize,
    patch: f64,
    objectness_threshold: f64,
) -> Result<Answer> {
    match out {
        HeadOutput::Count { logits } => {
            let row = &tape.value(*logits).data;
            Ok(Answer::Count(argmax(row) as u32))
        }
        HeadOutput::Multi { logits } => {
            let row = &tape.value(*logits).data;
            let set: BTreeSet<u16> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| sigmoid(v) >= 0.5)
                .map(|(i, _)| i as u16)
                .collect();
            Ok(Answer::Classes(set))
        }
        HeadOutput::Binary { logit } => {
            let v = tape.value(*logit).data[0];
            Ok(Answer::YesNo(sigmoid(v) >= 0.5))
        }
        HeadOutput::Ground { obj, box_raw, class_logits } => {
            let objs = &tape.value(*obj).data;
            let raws = &tape.value(*box_raw).data;
            let classes = &tape.value(*class_logits).data;
            let n_classes = tape.shape(*class_logits)[1];
            let mut boxes = Vec::new();
            for (t, &o) in objs.iter().enumerate() {
                let conf = sigmoid(o);
                if conf < objectness_threshold {
                    continue;
                }
                let class = argmax(&classes[t * n_classes..(t + 1) * n_classes]) as u16;
                if let Some(want) = question.class {
                    if question.kind == QuestionKind::FineGrained && class != want {
                        continue;
                    }
                }
                let (x1, y1, x2, y2) = decode_box(&raws[t * 4..(t + 1) * 4], t, grid, patch);
                boxes.push(BBox::new(x1, y1, x2, y2).with_class(class).with_confidence(conf));
            }
            Ok(Answer::Boxes(boxes))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore, HeadParams) {
        let mut store = ParamStore::new();
        let heads = HeadParams::init(&mut store, 8, 4, 6, 99);
        (store, heads)
    }

    fn rep(tape: &mut Tape) -> Var {
        tape.constant(Tensor::init(&[4, 8], InitMode::Normal { seed: 3, std: 1.0 }).unwrap())
    }

    #[test]
    fn count_head_probabilities_sum_to_one() {
        let (store, heads) = setup();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let r = rep(&mut tape);
        let out = head_forward(&heads, &mut tape, &mut binder, r, &Question::plain(QuestionKind::Counting), 6).unwrap();
        if let HeadOutput::Count { logits } = out {
            let p = tape.softmax(logits, 1).unwrap();
            let total: f64 = tape.value(p).data.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        } else {
            panic!("wrong head output");
        }
    }

    #[test]
    fn binary_head_on_zero_logit_is_half() {
        let (mut store, heads) = setup();
        // Zero all binary-path params so the logit is exactly 0.
        for id in [heads.bin_w, heads.bin_b] {
            let shape = store.value(id).shape.clone();
            store.replace_value(id, Tensor::zeros(&shape));
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let r = rep(&mut tape);
        let q = Question::about(QuestionKind::TrueFalse, 2);
        let out = head_forward(&heads, &mut tape, &mut binder, r, &q, 6).unwrap();
        if let HeadOutput::Binary { logit } = out {
            assert_eq!(tape.value(logit).data[0], 0.0);
            // sigmoid(0) = 0.5 sits exactly on the >= 0.5 decision edge.
            match predict(&tape, &HeadOutput::Binary { logit }, &q, 2, 8.0, 0.5).unwrap() {
                Answer::YesNo(b) => assert!(b),
                _ => panic!("wrong answer kind"),
            }
        } else {
            panic!("wrong head output");
        }
    }

    #[test]
    fn grounding_threshold_one_emits_nothing() {
        let (store, heads) = setup();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let r = rep(&mut tape);
        let q = Question::plain(QuestionKind::Grounding);
        let out = head_forward(&heads, &mut tape, &mut binder, r, &q, 6).unwrap();
        match predict(&tape, &out, &q, 2, 8.0, 1.0).unwrap() {
            Answer::Boxes(b) => assert!(b.is_empty()),
            _ => panic!("wrong answer kind"),
        }
    }

    #[test]
    fn predicted_boxes_stay_in_bounds() {
        let (store, heads) = setup();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let r = tape.constant(Tensor::init(&[4, 8], InitMode::Normal { seed: 8, std: 5.0 }).unwrap());
        let q = Question::plain(QuestionKind::Grounding);
        let out = head_forward(&heads, &mut tape, &mut binder, r, &q, 6).unwrap();
        if let Answer::Boxes(boxes) = predict(&tape, &out, &q, 2, 16.0, 0.0).unwrap() {
            assert_eq!(boxes.len(), 4);
            for b in boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 32.0);
                assert!(b.x1 <= b.x2 && b.y1 <= b.y2);
                assert!(b.validate().is_ok());
            }
        } else {
            panic!("wrong answer kind");
        }
    }

    #[test]
    fn fine_grained_filters_by_class() {
        let (store, heads) = setup();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let r = rep(&mut tape);
        let plain = Question::plain(QuestionKind::Grounding);
        let out = head_forward(&heads, &mut tape, &mut binder, r, &plain, 6).unwrap();
        let all = match predict(&tape, &out, &plain, 2, 8.0, 0.0).unwrap() {
            Answer::Boxes(b) => b,
            _ => unreachable!(),
        };
        for want in 0..6u16 {
            let fq = Question::about(QuestionKind::FineGrained, want);
            let got = match predict(&tape, &out, &fq, 2, 8.0, 0.0).unwrap() {
                Answer::Boxes(b) => b,
                _ => unreachable!(),
            };
            let expect = all.iter().filter(|b| b.class == Some(want)).count();
            assert_eq!(got.len(), expect);
        }
    }

    #[test]
    fn true_false_requires_class() {
        let (store, heads) = setup();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&store);
        let r = rep(&mut tape);
        let q = Question::plain(QuestionKind::TrueFalse);
        assert!(head_forward(&heads, &mut tape, &mut binder, r, &q, 6).is_err());
        let q = Question::about(QuestionKind::TrueFalse, 9);
        assert!(head_forward(&heads, &mut tape, &mut binder, r, &q, 6).is_err());
    }

    #[test]
    fn box_targets_round_trip_through_decode() {
        // Center (7.5, 9.5) lives in token (ty=1, tx=0) of a 4x4 grid of
        // 8px patches.
        let b = BBox::new(4.0, 6.0, 11.0, 13.0);
        let token = 4;
        let t = box_targets(&b, token, 4, 8.0);
        // Feed exact logit values whose sigmoid reproduces the targets.
        let logits: Vec<f64> = t.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
        let (x1, y1, x2, y2) = decode_box(&logits, token, 4, 8.0);
        assert!((x1 - 4.0).abs() < 1e-9);
        assert!((y1 - 6.0).abs() < 1e-9);
        assert!((x2 - 11.0).abs() < 1e-9);
        assert!((y2 - 13.0).abs() < 1e-9);
    }
}
