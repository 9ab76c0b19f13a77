//! Deterministic synthetic scenario streams: four visually distinct scene
//! families with programmatic ground truth for counting, classification,
//! yes/no queries, and box grounding. Every answer is recomputable from the
//! object list alone.

use crate::data::{Answer, Image, Question, QuestionKind, ScenarioId, SceneObject, SynthSample};
use crate::error::Result;
use crate::metrics::BBox;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const IMAGE_SIZE: usize = 32;
pub const N_SHAPES: usize = 4;
pub const N_COLORS: usize = 4;
pub const N_CLASSES: usize = N_SHAPES * N_COLORS;

const PLACEMENT_TRIES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Smooth vertical gradient (terrain seen from far above).
    Gradient,
    /// Horizontal sinusoidal bands in blue (open water).
    Waves,
    /// Diagonal stripes in grays (pavement and structure).
    Stripes,
    /// Uniform warm tone (interior wall/table).
    Flat,
}

/// Rendering recipe for one scenario family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scenario: ScenarioId,
    pub count_range: (usize, usize),
    pub size_range: (usize, usize),
    pub texture: Texture,
    pub noise_std: f64,
    pub occlusion_prob: f64,
    /// Blend factor of object color over background; low values produce
    /// camouflaged, low-contrast objects.
    pub contrast: f64,
    /// Relative class frequencies, length `N_CLASSES`.
    pub class_weights: Vec<f64>,
    /// Question kinds this scenario's samples carry.
    pub question_kinds: Vec<QuestionKind>,
}

fn weights(favored: &[u16], favored_w: f64) -> Vec<f64> {
    (0..N_CLASSES as u16)
        .map(|c| if favored.contains(&c) { favored_w } else { 1.0 })
        .collect()
}

/// The four built-in scenario families. They differ in object count/size
/// statistics, background texture, contrast, and class priors.
pub fn default_specs() -> BTreeMap<ScenarioId, SceneSpec> {
    let five = vec![
        QuestionKind::Counting,
        QuestionKind::Classification,
        QuestionKind::TrueFalse,
        QuestionKind::Grounding,
        QuestionKind::FineGrained,
    ];
    let mut specs = BTreeMap::new();
    specs.insert(
        ScenarioId::HighAlt,
        SceneSpec {
            scenario: ScenarioId::HighAlt,
            count_range: (4, 8),
            size_range: (4, 6),
            texture: Texture::Gradient,
            noise_std: 0.02,
            occlusion_prob: 0.0,
            contrast: 1.0,
            class_weights: weights(&[0, 3, 12, 15], 4.0),
            question_kinds: five.clone(),
        },
    );
    specs.insert(
        ScenarioId::Underwater,
        SceneSpec {
            scenario: ScenarioId::Underwater,
            count_range: (1, 4),
            size_range: (6, 10),
            texture: Texture::Waves,
            noise_std: 0.06,
            occlusion_prob: 0.15,
            contrast: 0.45,
            class_weights: weights(&[4, 5, 6, 7], 4.0),
            question_kinds: five.clone(),
        },
    );
    specs.insert(
        ScenarioId::LowAlt,
        SceneSpec {
            scenario: ScenarioId::LowAlt,
            count_range: (3, 8),
            size_range: (4, 8),
            texture: Texture::Stripes,
            noise_std: 0.04,
            occlusion_prob: 0.6,
            contrast: 0.9,
            class_weights: weights(&[1, 2, 9, 10], 4.0),
            question_kinds: five,
        },
    );
    specs.insert(
        ScenarioId::Indoor,
        SceneSpec {
            scenario: ScenarioId::Indoor,
            count_range: (1, 3),
            size_range: (9, 14),
            texture: Texture::Flat,
            noise_std: 0.03,
            occlusion_prob: 0.2,
            contrast: 1.0,
            class_weights: weights(&[8, 11, 13, 14], 4.0),
            question_kinds: vec![QuestionKind::TrueFalse, QuestionKind::Grounding],
        },
    );
    specs
}

fn class_color(class: u16) -> [f64; 3] {
    match class % N_COLORS as u16 {
        0 => [0.85, 0.15, 0.15],
        1 => [0.15, 0.80, 0.20],
        2 => [0.20, 0.30, 0.90],
        _ => [0.90, 0.85, 0.20],
    }
}

fn paint_background(img: &mut Image, texture: Texture, noise_std: f64, rng: &mut Rng) {
    let s = img.size;
    for y in 0..s {
        for x in 0..s {
            let base = match texture {
                Texture::Gradient => {
                    let t = y as f64 / (s - 1) as f64;
                    [0.55 + 0.25 * t, 0.55 + 0.2 * t, 0.45 + 0.15 * t]
                }
                Texture::Waves => {
                    let w = (y as f64 * 0.9).sin() * 0.06;
                    [0.05 + w.max(0.0), 0.16 + w, 0.35 + w]
                }
                Texture::Stripes => {
                    if (x + y) / 4 % 2 == 0 {
                        [0.30, 0.30, 0.32]
                    } else {
                        [0.58, 0.58, 0.60]
                    }
                }
                Texture::Flat => [0.62, 0.45, 0.30],
            };
            for (c, b) in base.iter().enumerate() {
                let noise: f64 = {
                    // Cheap uniform noise centered at zero.
                    (rng.gen::<f64>() - 0.5) * 2.0 * noise_std
                };
                img.set(y, x, c, (b + noise).clamp(0.0, 1.0));
            }
        }
    }
}

fn shape_mask(shape: u16, size: usize, x: usize, y: usize) -> bool {
    let c = size as f64 / 2.0;
    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
    match shape {
        0 => true,                                                   // square
        1 => (fx - c).powi(2) + (fy - c).powi(2) <= (c - 0.1).powi(2), // circle
        2 => (fx - c).abs() <= fy / 2.0 + 0.25,                      // triangle
        _ => (fx - c).abs() + (fy - c).abs() <= c,                   // diamond
    }
}

fn sample_class(weights: &[f64], rng: &mut Rng) -> u16 {
    let total: f64 = weights.iter().sum();
    let mut roll = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        roll -= w;
        if roll <= 0.0 {
            return i as u16;
        }
    }
    (weights.len() - 1) as u16
}

fn overlaps(a: (usize, usize, usize), placed: &[(usize, usize, usize)]) -> bool {
    let (ax, ay, asz) = a;
    placed.iter().any(|&(bx, by, bsz)| {
        ax < bx + bsz && bx < ax + asz && ay < by + bsz && by < ay + asz
    })
}

/// Render one scene. Deterministic in (spec, seed). Returns `None` when an
/// object cannot be placed within the retry budget; callers draw the next
/// seed and log the skip.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Option<SynthSample> {
    let mut rng = rng_from_seed(seed);
    let mut image = Image::filled(IMAGE_SIZE, 3, 0.0);
    paint_background(&mut image, spec.texture, spec.noise_std, &mut rng);

    let count = rng.gen_range(spec.count_range.0..=spec.count_range.1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        let mut placed_ok = false;
        for _try in 0..PLACEMENT_TRIES {
            let size = rng.gen_range(spec.size_range.0..=spec.size_range.1);
            let x0 = rng.gen_range(0..=IMAGE_SIZE - size);
            let y0 = rng.gen_range(0..=IMAGE_SIZE - size);
            let allow_overlap = rng.gen::<f64>() < spec.occlusion_prob;
            if !allow_overlap && overlaps((x0, y0, size), &placed) {
                continue;
            }
            let class = sample_class(&spec.class_weights, &mut rng);
            let color = class_color(class);
            let shape = class / N_COLORS as u16;
            let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
            for dy in 0..size {
                for dx in 0..size {
                    if !shape_mask(shape, size, dx, dy) {
                        continue;
                    }
                    let (px, py) = (x0 + dx, y0 + dy);
                    for c in 0..3 {
                        let bg = image.get(py, px, c);
                        image.set(py, px, c, bg * (1.0 - spec.contrast) + color[c] * spec.contrast);
                    }
                    min_x = min_x.min(px);
                    min_y = min_y.min(py);
                    max_x = max_x.max(px);
                    max_y = max_y.max(py);
                }
            }
            debug_assert!(min_x != usize::MAX, "shape painted no pixels at size {size}");
            let bbox = BBox::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64)
                .with_class(class);
            objects.push(SceneObject { bbox, class });
            placed.push((x0, y0, size));
            placed_ok = true;
            break;
        }
        if !placed_ok {
            return None;
        }
    }
    image.quantize();
    Some(SynthSample {
        id: String::new(),
        scenario: spec.scenario,
        image,
        objects,
        questions: Vec::new(),
    })
}

/// Derive this sample's questions from its object list. The yes/no question
/// alternates between a present class (even index) and an absent class (odd
/// index); fine-grained grounding always targets a present class.
pub fn make_questions(sample: &SynthSample, spec: &SceneSpec, index: u64, seed: u64) -> Vec<(Question, Answer)> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0x9e57, index]));
    let present: BTreeSet<u16> = sample.objects.iter().map(|o| o.class).collect();
    let absent: Vec<u16> =
        (0..N_CLASSES as u16).filter(|c| !present.contains(c)).collect();
    let present_vec: Vec<u16> = present.iter().copied().collect();
    let mut out = Vec::new();
    for kind in &spec.question_kinds {
        match kind {
            QuestionKind::Counting => {
                out.push((Question::plain(QuestionKind::Counting), Answer::Count(sample.objects.len() as u32)));
            }
            QuestionKind::Classification => {
                out.push((Question::plain(QuestionKind::Classification), Answer::Classes(present.clone())));
            }
            QuestionKind::TrueFalse => {
                let positive = index % 2 == 0;
                let (class, yes) = if positive || absent.is_empty() {
                    (present_vec[rng.gen_range(0..present_vec.len())], true)
                } else {
                    (absent[rng.gen_range(0..absent.len())], false)
                };
                out.push((Question::about(QuestionKind::TrueFalse, class), Answer::YesNo(yes)));
            }
            QuestionKind::Grounding => {
                let boxes: Vec<BBox> = sample.objects.iter().map(|o| o.bbox).collect();
                out.push((Question::plain(QuestionKind::Grounding), Answer::Boxes(boxes)));
            }
            QuestionKind::FineGrained => {
                let class = present_vec[rng.gen_range(0..present_vec.len())];
                let boxes: Vec<BBox> =
                    sample.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect();
                out.push((Question::about(QuestionKind::FineGrained, class), Answer::Boxes(boxes)));
            }
        }
    }
    out
}

/// Generated train/test pools for one scenario, image-disjoint by
/// construction: the two splits consume disjoint seed streams.
#[derive(Debug, Clone)]
pub struct ScenarioPool {
    pub scenario: ScenarioId,
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    /// Seeds whose placement failed and were skipped, for the run log.
    pub skipped_seeds: Vec<u64>,
}

fn scenario_ordinal(s: ScenarioId) -> u64 {
    ScenarioId::ALL.iter().position(|&x| x == s).unwrap() as u64
}

fn generate_split(
    spec: &SceneSpec,
    split: &str,
    split_ix: u64,
    n: usize,
    seed: u64,
    skipped: &mut Vec<u64>,
) -> Vec<SynthSample> {
    let mut out = Vec::with_capacity(n);
    let mut counter = 0u64;
    while out.len() < n {
        let sample_seed =
            derive_seed(seed, &[scenario_ordinal(spec.scenario), split_ix, counter]);
        counter += 1;
        match render_scene(spec, sample_seed) {
            Some(mut sample) => {
                let index = out.len() as u64;
                sample.id = format!("{}-{split}-{index:05}", spec.scenario);
                sample.questions = make_questions(&sample, spec, index, sample_seed);
                out.push(sample);
            }
            None => skipped.push(sample_seed),
        }
    }
    out
}

/// Build both splits for a scenario. Deterministic in (spec, sizes, seed).
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64) -> Result<ScenarioPool> {
    let mut skipped = Vec::new();
    let train = generate_split(spec, "train", 0, n_train, seed, &mut skipped);
    let test = generate_split(spec, "test", 1, n_test, seed, &mut skipped);
    Ok(ScenarioPool { scenario: spec.scenario, train, test, skipped_seeds: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_count_is_exact() {
        let mut spec = default_specs()[&ScenarioId::HighAlt].clone();
        spec.count_range = (3, 3);
        let s = render_scene(&spec, 5).unwrap();
        assert_eq!(s.objects.len(), 3);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = default_specs()[&ScenarioId::Underwater].clone();
        let a = render_scene(&spec, 77).unwrap();
        let b = render_scene(&spec, 77).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects, b.objects);
        let c = render_scene(&spec, 78).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn boxes_stay_inside_the_image() {
        for (_, spec) in default_specs() {
            for seed in 0..40 {
                if let Some(s) = render_scene(&spec, seed) {
                    for o in &s.objects {
                        assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0);
                        assert!(o.bbox.x2 <= IMAGE_SIZE as f64 && o.bbox.y2 <= IMAGE_SIZE as f64);
                        assert!(o.bbox.area() > 0.0);
                        o.bbox.validate().unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn questions_are_consistent_with_objects() {
        let specs = default_specs();
        let spec = &specs[&ScenarioId::LowAlt];
        for index in 0..12u64 {
            let sample = render_scene(spec, 1000 + index).unwrap();
            let qs = make_questions(&sample, spec, index, 1000 + index);
            assert_eq!(qs.len(), spec.question_kinds.len());
            for (q, a) in &qs {
                match (q.kind, a) {
                    (QuestionKind::Counting, Answer::Count(n)) => {
                        assert_eq!(*n as usize, sample.objects.len());
                    }
                    (QuestionKind::Classification, Answer::Classes(set)) => {
                        let want: BTreeSet<u16> = sample.objects.iter().map(|o| o.class).collect();
                        assert_eq!(set, &want);
                    }
                    (QuestionKind::TrueFalse, Answer::YesNo(yes)) => {
                        let class = q.class.unwrap();
                        let present = sample.objects.iter().any(|o| o.class == class);
                        assert_eq!(*yes, present);
                        // Even indices ask about present classes.
                        assert_eq!(*yes, index % 2 == 0);
                    }
                    (QuestionKind::Grounding, Answer::Boxes(b)) => {
                        assert_eq!(b.len(), sample.objects.len());
                    }
                    (QuestionKind::FineGrained, Answer::Boxes(b)) => {
                        let class = q.class.unwrap();
                        let want = sample.objects.iter().filter(|o| o.class == class).count();
                        assert_eq!(b.len(), want);
                        assert!(want >= 1, "fine-grained must target a present class");
                    }
                    other => panic!("unexpected question/answer pairing {other:?}"),
                }
            }
        }
    }

    #[test]
    fn indoor_carries_single_grounding_kind() {
        let specs = default_specs();
        let kinds = &specs[&ScenarioId::Indoor].question_kinds;
        assert!(kinds.contains(&QuestionKind::Grounding));
        assert!(!kinds.contains(&QuestionKind::FineGrained));
    }

    #[test]
    fn dataset_splits_are_disjoint_and_sized() {
        let specs = default_specs();
        let pool = generate_dataset(&specs[&ScenarioId::Indoor], 6, 4, 9).unwrap();
        assert_eq!(pool.train.len(), 6);
        assert_eq!(pool.test.len(), 4);
        let train_ids: BTreeSet<&str> = pool.train.iter().map(|s| s.id.as_str()).collect();
        let test_ids: BTreeSet<&str> = pool.test.iter().map(|s| s.id.as_str()).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        // No duplicated pixel buffers across the two splits.
        for tr in &pool.train {
            for te in &pool.test {
                assert_ne!(tr.image.pixels, te.image.pixels);
            }
        }
    }

    #[test]
    fn dataset_regeneration_is_checksum_identical() {
        let specs = default_specs();
        let sum = |pool: &ScenarioPool| -> u64 {
            let mut acc = 0u64;
            for s in pool.train.iter().chain(&pool.test) {
                acc ^= crate::hash::checksum_f64(&s.image.pixels);
            }
            acc
        };
        let a = generate_dataset(&specs[&ScenarioId::HighAlt], 5, 3, 11).unwrap();
        let b = generate_dataset(&specs[&ScenarioId::HighAlt], 5, 3, 11).unwrap();
        assert_eq!(sum(&a), sum(&b));
    }

    #[test]
    fn scenario_stats_linear_probe_separates_families() {
        // Per-channel mean/std features, one-vs-rest least squares, and the
        // premise the whole stream rests on: scenarios are distinct enough
        // that a linear probe tells them apart.
        let specs = default_specs();
        let mut feats: Vec<[f64; 7]> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for (ord, (_, spec)) in specs.iter().enumerate() {
            for seed in 0..100u64 {
                let s = render_scene(spec, derive_seed(31, &[ord as u64, seed]))
                    .expect("probe scenes should place");
                let n = (s.image.size * s.image.size) as f64;
                let mut f = [0.0f64; 7];
                for c in 0..3 {
                    let mut mean = 0.0;
                    for y in 0..s.image.size {
                        for x in 0..s.image.size {
                            mean += s.image.get(y, x, c);
                        }
                    }
                    mean /= n;
                    let mut var = 0.0;
                    for y in 0..s.image.size {
                        for x in 0..s.image.size {
                            var += (s.image.get(y, x, c) - mean).powi(2);
                        }
                    }
                    f[c] = mean;
                    f[3 + c] = (var / n).sqrt();
                }
                f[6] = 1.0;
                feats.push(f);
                labels.push(ord);
            }
        }
        // Normal equations per class.
        let dim = 7;
        let mut xtx = vec![0.0; dim * dim];
        for f in &feats {
            for i in 0..dim {
                for j in 0..dim {
                    xtx[i * dim + j] += f[i] * f[j];
                }
            }
        }
        for i in 0..dim {
            xtx[i * dim + i] += 1e-6;
        }
        let solve = |a: &mut Vec<f64>, b: &mut Vec<f64>| {
            for col in 0..dim {
                let mut piv = col;
                for r in col + 1..dim {
                    if a[r * dim + col].abs() > a[piv * dim + col].abs() {
                        piv = r;
                    }
                }
                for j in 0..dim {
                    a.swap(col * dim + j, piv * dim + j);
                }
                b.swap(col, piv);
                let d = a[col * dim + col];
                for r in 0..dim {
                    if r == col {
                        continue;
                    }
                    let f = a[r * dim + col] / d;
                    for j in 0..dim {
                        a[r * dim + j] -= f * a[col * dim + j];
                    }
                    b[r] -= f * b[col];
                }
            }
            (0..dim).map(|i| b[i] / a[i * dim + i]).collect::<Vec<f64>>()
        };
        let mut w = Vec::new();
        for class in 0..4 {
            let mut xty = vec![0.0; dim];
            for (f, &l) in feats.iter().zip(&labels) {
                let y = if l == class { 1.0 } else { 0.0 };
                for i in 0..dim {
                    xty[i] += f[i] * y;
                }
            }
            let mut a = xtx.clone();
            w.push(solve(&mut a, &mut xty));
        }
        let mut correct = 0;
        for (f, &l) in feats.iter().zip(&labels) {
            let scores: Vec<f64> =
                w.iter().map(|wc| wc.iter().zip(f).map(|(a, b)| a * b).sum()).collect();
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == l {
                correct += 1;
            }
        }
        let acc = correct as f64 / feats.len() as f64;
        assert!(acc >= 0.9, "scenario separability probe accuracy {acc}");
    }
}
