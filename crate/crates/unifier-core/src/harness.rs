//! The continual-learning protocol: stream construction, per-task training
//! with branch expansion and freeze discipline, old-model snapshots, and
//! per-step evaluation with average/last summaries.

use crate::config::{Mode, RunConfig};
use crate::data::{Answer, Question, QuestionKind, ScenarioId, SynthSample};
use crate::error::{Error, Result};
use crate::loss::task::task_loss;
use crate::loss::vcc::{vcc_loss_for_trace, LayerConsistencyReport};
use crate::metrics::{
    f1_scenario, match_boxes, score_classification, score_counting, score_exact, vqa_scenario_score,
    MatchResult,
};
use crate::model::csr::ExpansionRecord;
use crate::model::heads::{head_forward, predict, OBJECTNESS_THRESHOLD};
use crate::model::{encoder_forward, VisionModel};
use crate::params::{optimizer_for, ParamBinder, ParamId};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synth::{default_specs, generate_dataset};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One step's training set: all samples share a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioTask {
    /// 1-based step index.
    pub index: usize,
    pub scenario: ScenarioId,
    pub samples: Vec<SynthSample>,
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub tasks: Vec<ScenarioTask>,
    pub seed: u64,
}

/// Split each scenario's pool into T/|scenarios| near-equal image-disjoint
/// subsets, then shuffle the (scenario, subset) pairs into a step order.
pub fn build_stream(
    pools: &BTreeMap<ScenarioId, Vec<SynthSample>>,
    t: usize,
    seed: u64,
) -> Result<Stream> {
    if pools.is_empty() {
        return Err(Error::config("scenarios", "no scenario pools supplied"));
    }
    if t == 0 || t % pools.len() != 0 {
        return Err(Error::config(
            "steps",
            format!("T={t} must be a positive multiple of the scenario count {}", pools.len()),
        ));
    }
    let subsets_per_scenario = t / pools.len();
    let mut pairs: Vec<(ScenarioId, Vec<SynthSample>)> = Vec::with_capacity(t);
    for (&scenario, pool) in pools {
        if pool.len() < subsets_per_scenario {
            return Err(Error::config(
                "train_per_scenario",
                format!("{scenario}: {} samples cannot fill {subsets_per_scenario} subsets", pool.len()),
            ));
        }
        // Balanced contiguous partition; the first `rem` subsets get one extra.
        let base = pool.len() / subsets_per_scenario;
        let rem = pool.len() % subsets_per_scenario;
        let mut start = 0;
        for s in 0..subsets_per_scenario {
            let len = base + usize::from(s < rem);
            pairs.push((scenario, pool[start..start + len].to_vec()));
            start += len;
        }
        debug_assert_eq!(start, pool.len());
    }
    let mut rng = rng_from_seed(seed);
    pairs.shuffle(&mut rng);
    let tasks = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (scenario, samples))| ScenarioTask { index: i + 1, scenario, samples })
        .collect();
    Ok(Stream { tasks, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub step: usize,
    pub scenario: ScenarioId,
    pub vqa: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub task: usize,
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub l_vcc: f64,
    pub l_c_sum: f64,
    pub l_p_sum: f64,
}

/// Checksums proving a frozen branch stayed bit-identical after its last
/// training task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub branch: usize,
    pub at_freeze: String,
    pub at_end: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ScoreRow>,
    pub expansions: Vec<ExpansionRecord>,
    pub freeze_audits: Vec<FreezeAudit>,
    /// Seconds per task; reporting only, never part of checked outputs.
    pub task_wall_times: Vec<f64>,
}

pub const RECORD_CSV_HEADER: &str = "step,scenario,vqa,f1,mode,seed";

pub fn record_csv_row(row: &ScoreRow, mode: Mode, seed: u64) -> String {
    format!("{},{},{:.6},{:.6},{},{}", row.step, row.scenario, row.vqa, row.f1, mode, seed)
}

pub const TRAIN_LOG_CSV_HEADER: &str = "task,step,lr,task_loss,l_vcc,l_c_sum,l_p_sum";

pub fn train_log_csv_row(r: &TrainLogRow) -> String {
    format!(
        "{},{},{:.8},{:.6},{:.6},{:.6},{:.6}",
        r.task, r.step, r.lr, r.task_loss, r.l_vcc, r.l_c_sum, r.l_p_sum
    )
}

/// Streaming hooks for long runs. Rows arrive as they are produced so a
/// killed run still leaves complete partial output.
pub trait RunObserver {
    fn on_score_row(&mut self, _row: &ScoreRow) -> Result<()> {
        Ok(())
    }
    fn on_train_step(&mut self, _row: &TrainLogRow) -> Result<()> {
        Ok(())
    }
    fn on_note(&mut self, _note: &str) {}
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

// ── data plumbing ───────────────────────────────────────────────────────

pub struct DataBundle {
    pub train: BTreeMap<ScenarioId, Vec<SynthSample>>,
    pub test: BTreeMap<ScenarioId, Vec<SynthSample>>,
}

/// Generate (or read from `dataset_dir`) the per-scenario pools.
pub fn load_or_generate_data(cfg: &RunConfig) -> Result<DataBundle> {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    if let Some(dir) = &cfg.data.dataset_dir {
        for &scenario in &cfg.scenarios {
            let base = dir.join(scenario.name());
            train.insert(scenario, crate::data::read_dataset(&base.join("train.jsonl"))?);
            test.insert(scenario, crate::data::read_dataset(&base.join("test.jsonl"))?);
        }
    } else {
        let specs = default_specs();
        for &scenario in &cfg.scenarios {
            let pool = generate_dataset(
                &specs[&scenario],
                cfg.data.train_per_scenario,
                cfg.data.test_per_scenario,
                cfg.data_seed,
            )?;
            train.insert(scenario, pool.train);
            test.insert(scenario, pool.test);
        }
    }
    Ok(DataBundle { train, test })
}

// ── evaluation ──────────────────────────────────────────────────────────

fn yesno(v: bool) -> &'static str {
    if v {
        "yes"
    } else {
        "no"
    }
}

fn score_easy(q: &Question, pred: &Answer, gt: &Answer) -> Result<f64> {
    match (q.kind, pred, gt) {
        (QuestionKind::Counting, Answer::Count(p), Answer::Count(g)) => {
            score_counting(*p as i64, *g as i64)
        }
        (QuestionKind::Classification, Answer::Classes(p), Answer::Classes(g)) => {
            score_classification(p, g)
        }
        (QuestionKind::TrueFalse, Answer::YesNo(p), Answer::YesNo(g)) => {
            Ok(score_exact(yesno(*p), yesno(*g)))
        }
        _ => Err(Error::contract("prediction does not match question kind")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub vqa: f64,
    pub f1: f64,
}

/// Score arbitrary predictions against the test pools; the model-based
/// evaluation and oracle stubs share this path.
pub fn evaluate_predictions<F>(
    tests: &BTreeMap<ScenarioId, Vec<SynthSample>>,
    mut predictor: F,
) -> Result<BTreeMap<ScenarioId, ScenarioScore>>
where
    F: FnMut(&SynthSample, &Question) -> Result<Answer>,
{
    let mut out = BTreeMap::new();
    for (&scenario, samples) in tests {
        if samples.is_empty() {
            return Err(Error::contract(format!("empty test set for {scenario}")));
        }
        let mut easy = Vec::new();
        let mut ground = MatchResult::default();
        let mut has_ground = false;
        let mut fine = MatchResult::default();
        let mut has_fine = false;
        for sample in samples {
            for (q, gt) in &sample.questions {
                let pred = predictor(sample, q)?;
                if q.kind.is_easy() {
                    easy.push(score_easy(q, &pred, gt)?);
                    continue;
                }
                let (pred_boxes, gt_boxes) = match (&pred, gt) {
                    (Answer::Boxes(p), Answer::Boxes(g)) => (p, g),
                    _ => return Err(Error::contract("grounding answer expected boxes")),
                };
                match q.kind {
                    QuestionKind::Grounding => {
                        ground.merge(&match_boxes(pred_boxes, gt_boxes, false)?);
                        has_ground = true;
                    }
                    QuestionKind::FineGrained => {
                        fine.merge(&match_boxes(pred_boxes, gt_boxes, true)?);
                        has_fine = true;
                    }
                    _ => unreachable!(),
                }
            }
        }
        let vqa = vqa_scenario_score(&easy)?;
        let f1 = match (has_ground, has_fine) {
            (true, true) => f1_scenario(&ground, Some(&fine)),
            (true, false) => f1_scenario(&ground, None),
            (false, true) => f1_scenario(&fine, None),
            (false, false) => {
                return Err(Error::contract(format!("{scenario} has no grounding questions")))
            }
        };
        out.insert(scenario, ScenarioScore { vqa, f1 });
    }
    Ok(out)
}

/// Run every test sample through the frozen model and score per scenario.
/// One encoder pass per image serves all of its questions.
pub fn evaluate_model(
    model: &VisionModel,
    tests: &BTreeMap<ScenarioId, Vec<SynthSample>>,
) -> Result<BTreeMap<ScenarioId, ScenarioScore>> {
    let mut cache: Option<(String, Tape, crate::model::EncoderTrace)> = None;
    evaluate_predictions(tests, |sample, q| {
        let refresh = match &cache {
            Some((id, _, _)) => id != &sample.id,
            None => true,
        };
        if refresh {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::frozen(&model.store);
            let trace = encoder_forward(model, &mut tape, &mut binder, &sample.image)?;
            cache = Some((sample.id.clone(), tape, trace));
        }
        let (_, tape, trace) = cache.as_mut().unwrap();
        let mut binder = ParamBinder::frozen(&model.store);
        let out = head_forward(&model.heads, tape, &mut binder, trace.r_final, q, model.dims.n_classes)?;
        let grid = model.dims.image / model.dims.patch;
        predict(tape, &out, q, grid, model.dims.patch as f64, OBJECTNESS_THRESHOLD)
    })
}

// ── aggregation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub vqa_avg: f64,
    pub vqa_last: f64,
    pub f1_avg: f64,
    pub f1_last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub per_scenario: BTreeMap<ScenarioId, MetricSummary>,
}

/// Average-over-steps and last-step scores per scenario and metric. Every
/// step contributes, including steps before a scenario was first trained.
pub fn aggregate(rows: &[ScoreRow], t: usize) -> Result<Summary> {
    let mut by_scenario: BTreeMap<ScenarioId, Vec<&ScoreRow>> = BTreeMap::new();
    for row in rows {
        by_scenario.entry(row.scenario).or_default().push(row);
    }
    let mut out = Summary::default();
    for (scenario, mut rows) in by_scenario {
        rows.sort_by_key(|r| r.step);
        if rows.len() != t || rows.last().map(|r| r.step) != Some(t) {
            return Err(Error::contract(format!(
                "{scenario} has {} rows, expected one per step up to {t}",
                rows.len()
            )));
        }
        let n = rows.len() as f64;
        out.per_scenario.insert(
            scenario,
            MetricSummary {
                vqa_avg: rows.iter().map(|r| r.vqa).sum::<f64>() / n,
                vqa_last: rows.last().unwrap().vqa,
                f1_avg: rows.iter().map(|r| r.f1).sum::<f64>() / n,
                f1_last: rows.last().unwrap().f1,
            },
        );
    }
    Ok(out)
}

// ── training ────────────────────────────────────────────────────────────

struct VccContext<'a> {
    old_model: &'a VisionModel,
    cfg: &'a crate::loss::vcc::ConsistencyConfig,
}

/// One task's gradient steps over (image, question) pairs.
#[allow(clippy::too_many_arguments)]
fn train_on(
    model: &mut VisionModel,
    samples: &[SynthSample],
    schedule: &crate::config::ScheduleConfig,
    epochs: usize,
    trainable: &[ParamId],
    vcc: Option<VccContext<'_>>,
    task_seed: u64,
    task_index: usize,
    observer: &mut dyn RunObserver,
) -> Result<()> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for qi in 0..s.questions.len() {
            pairs.push((si, qi));
        }
    }
    if pairs.is_empty() {
        return Err(Error::contract("task has no training questions"));
    }
    let batches_per_epoch = pairs.len().div_ceil(schedule.batch_size);
    let total_steps = epochs * batches_per_epoch;
    let mut opt = optimizer_for(&model.store, trainable, schedule.weight_decay);
    let mut rng = rng_from_seed(derive_seed(task_seed, &[0x7a5c, task_index as u64]));
    let mut step = 0usize;
    for _epoch in 0..epochs {
        pairs.shuffle(&mut rng);
        for batch in pairs.chunks(schedule.batch_size) {
            step += 1;
            let lr = crate::tensor::optim::lr_schedule(
                step,
                total_steps,
                schedule.warmup_frac,
                schedule.base_lr,
            )?;
            if lr == 0.0 {
                continue;
            }
            // Group the batch by image so each image is encoded once.
            let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(si, qi) in batch {
                by_image.entry(si).or_default().push(qi);
            }
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(&model.store);
            let mut task_terms = Vec::new();
            let mut vcc_terms = Vec::new();
            let mut vcc_report_acc = LayerConsistencyReport::default();
            for (&si, qis) in &by_image {
                let sample = &samples[si];
                let trace = encoder_forward(model, &mut tape, &mut binder, &sample.image)?;
                for &qi in qis {
                    let (q, a) = &sample.questions[qi];
                    let out =
                        head_forward(&model.heads, &mut tape, &mut binder, trace.r_final, q, model.dims.n_classes)?;
                    task_terms.push(task_loss(&mut tape, &model.dims, &out, q, a)?);
                }
                if let Some(ctx) = &vcc {
                    // Old model's projected outputs on the same input.
                    let mut old_tape = Tape::new();
                    let mut old_binder = ParamBinder::frozen(&ctx.old_model.store);
                    let old_trace =
                        encoder_forward(ctx.old_model, &mut old_tape, &mut old_binder, &sample.image)?;
                    let old_p: Vec<Tensor> = old_trace
                        .layers
                        .iter()
                        .map(|l| {
                            l.p.map(|p| old_tape.value(p).clone()).ok_or_else(|| {
                                Error::integrity("old model lacks adapter outputs")
                            })
                        })
                        .collect::<Result<_>>()?;
                    let (loss, report) =
                        vcc_loss_for_trace(&mut tape, ctx.cfg, &trace.layers, Some(&old_p))?;
                    vcc_terms.push(loss);
                    vcc_report_acc.total += report.total;
                    vcc_report_acc.layers.extend(report.layers);
                }
            }
            // Mean task loss over questions, plus weighted mean constraint
            // over images.
            let mut loss = task_terms[0];
            for &t in &task_terms[1..] {
                loss = tape.add(loss, t)?;
            }
            loss = tape.scale(loss, 1.0 / task_terms.len() as f64);
            let task_loss_value = tape.value(loss).item();
            let mut vcc_value = 0.0;
            if let Some(ctx) = &vcc {
                if !vcc_terms.is_empty() && ctx.cfg.lambda_vcc > 0.0 {
                    let mut vsum = vcc_terms[0];
                    for &t in &vcc_terms[1..] {
                        vsum = tape.add(vsum, t)?;
                    }
                    let vmean = tape.scale(vsum, 1.0 / vcc_terms.len() as f64);
                    vcc_value = tape.value(vmean).item();
                    let weighted = tape.scale(vmean, ctx.cfg.lambda_vcc);
                    loss = tape.add(loss, weighted)?;
                }
            }
            tape.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate_from_tape(&tape);
            model.store.adamw_step(trainable, &mut opt, lr)?;
            let n_img = by_image.len() as f64;
            observer.on_train_step(&TrainLogRow {
                task: task_index,
                step,
                lr,
                task_loss: task_loss_value,
                l_vcc: vcc_value,
                l_c_sum: vcc_report_acc.l_c_sum() / n_img,
                l_p_sum: vcc_report_acc.l_p_sum() / n_img,
            })?;
        }
    }
    Ok(())
}

/// Train a plain-backbone base model on a mixed pool drawn from every
/// scenario family, on a seed stream disjoint from the task pools. All
/// protocol modes start from this shared base; zero-shot evaluates it as is.
pub fn pretrain_base(cfg: &RunConfig, seed: u64, observer: &mut dyn RunObserver) -> Result<VisionModel> {
    let model_seed = derive_seed(seed, &[0x0de1]);
    let mut model = VisionModel::new(cfg.model.clone(), model_seed, false)?;
    if !cfg.pretrain.enabled {
        return Ok(model);
    }
    let specs = default_specs();
    let pretrain_seed = derive_seed(cfg.data_seed, &[0xba5e]);
    let mut pool = Vec::new();
    for scenario in crate::data::ScenarioId::ALL {
        let generated =
            generate_dataset(&specs[&scenario], cfg.pretrain.images_per_scenario, 1, pretrain_seed)?;
        pool.extend(generated.train);
    }
    let trainable = model.all_param_ids();
    let t0 = std::time::Instant::now();
    train_on(
        &mut model,
        &pool,
        &cfg.schedule,
        cfg.pretrain.epochs,
        &trainable,
        None,
        derive_seed(seed, &[0xba5e]),
        0,
        observer,
    )?;
    observer.on_note(&format!(
        "pretrained base on {} mixed samples for {} epochs in {:.1}s",
        pool.len(),
        cfg.pretrain.epochs,
        t0.elapsed().as_secs_f64()
    ));
    Ok(model)
}

/// Deep frozen copy used as the previous-generation reference.
pub fn snapshot_old(model: &VisionModel) -> VisionModel {
    let mut snap = model.clone();
    for id in snap.store.ids().collect::<Vec<_>>() {
        snap.store.set_trainable(id, false);
    }
    snap
}

/// Capture per-layer adapter inputs on probe images, then expand every
/// block's module with a bit-exactness audit against those inputs.
pub fn expand_for_scenario(
    model: &mut VisionModel,
    task_index: usize,
    seed: u64,
    probe_images: &[&crate::data::Image],
) -> Result<Vec<ExpansionRecord>> {
    let mut per_layer_probes: Vec<Vec<Tensor>> = vec![Vec::new(); model.blocks.len()];
    for image in probe_images {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        let trace = encoder_forward(model, &mut tape, &mut binder, image)?;
        for (l, layer) in trace.layers.iter().enumerate() {
            per_layer_probes[l].push(tape.value(layer.a).clone());
        }
    }
    let mut records = Vec::new();
    for l in 0..model.blocks.len() {
        let mut csr = model.blocks[l]
            .csr
            .take()
            .ok_or_else(|| Error::protocol("cannot expand a model built without adapters"))?;
        let rec = csr.expand_branch_probed(
            &mut model.store,
            task_index,
            derive_seed(seed, &[0xe4, l as u64]),
            &per_layer_probes[l],
        )?;
        model.blocks[l].csr = Some(csr);
        records.push(rec);
    }
    Ok(records)
}

/// Per-run protocol state: which scenario owns which branch.
#[derive(Debug, Default, Clone)]
pub struct BranchLedger {
    pub scenario_branch: BTreeMap<ScenarioId, usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub model: VisionModel,
}

/// Execute the full stream under the configured mode. Deterministic given
/// (config, seed).
pub fn run_protocol(
    cfg: &RunConfig,
    seed: u64,
    data: &DataBundle,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let base = pretrain_base(cfg, seed, observer)?;
    run_protocol_with_base(cfg, seed, data, &base, observer)
}

/// Protocol run from an already-built base model, so callers comparing
/// modes on one seed can pretrain once. The base must match the config's
/// dims and seed lineage.
pub fn run_protocol_with_base(
    cfg: &RunConfig,
    seed: u64,
    data: &DataBundle,
    base: &VisionModel,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let stream = build_stream(&data.train, cfg.steps, cfg.stream_seed)?;
    let model_seed = derive_seed(seed, &[0x0de1]);
    let with_adapters = cfg.mode == Mode::Unifier;
    let mut model = if with_adapters {
        let mut m = VisionModel::new(cfg.model.clone(), model_seed, true)?;
        m.adopt_values(base);
        m
    } else {
        let mut m = base.clone();
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.set_trainable(id, true);
        }
        m
    };

    let mut record = RunRecord {
        mode: cfg.mode,
        seed,
        config_hash: cfg.hash(),
        rows: Vec::new(),
        expansions: Vec::new(),
        freeze_audits: Vec::new(),
        task_wall_times: Vec::new(),
    };
    let mut ledger = BranchLedger::default();
    let mut freeze_marks: BTreeMap<usize, u64> = BTreeMap::new();
    let mut joint_pool: Vec<SynthSample> = Vec::new();

    if cfg.mode == Mode::Unifier {
        // Vision-side isolation: the backbone never trains in this mode.
        for id in model.backbone_param_ids() {
            model.store.set_trainable(id, false);
        }
    }

    for task in &stream.tasks {
        let t0 = std::time::Instant::now();
        let epochs = if task.index == 1 { cfg.schedule.epochs_initial } else { cfg.schedule.epochs_later };
        match cfg.mode {
            Mode::ZeroShot => {}
            Mode::Finetune | Mode::Joint => {
                let samples: &[SynthSample] = if cfg.mode == Mode::Joint {
                    joint_pool.extend(task.samples.iter().cloned());
                    &joint_pool
                } else {
                    &task.samples
                };
                let trainable = model.all_param_ids();
                train_on(
                    &mut model,
                    samples,
                    &cfg.schedule,
                    epochs,
                    &trainable,
                    None,
                    derive_seed(seed, &[0x7e, task.index as u64]),
                    task.index,
                    observer,
                )?;
            }
            Mode::Unifier => {
                let old = if task.index >= 2 { Some(snapshot_old(&model)) } else { None };
                let branch = match ledger.scenario_branch.get(&task.scenario) {
                    Some(&b) => b,
                    None => {
                        if ledger.scenario_branch.is_empty() {
                            // The initial module's sole branch serves the
                            // first scenario; no expansion needed.
                            0
                        } else {
                            let probe: Vec<&crate::data::Image> =
                                task.samples.iter().take(64).map(|s| &s.image).collect();
                            let recs = expand_for_scenario(
                                &mut model,
                                task.index,
                                derive_seed(seed, &[0xe7, task.index as u64]),
                                &probe,
                            )?;
                            for rec in &recs {
                                if rec.max_output_delta != 0.0 {
                                    return Err(Error::integrity(format!(
                                        "expansion changed outputs at layer {} by {}",
                                        rec.layer, rec.max_output_delta
                                    )));
                                }
                            }
                            let b = model.branch_count() - 1;
                            record.expansions.extend(recs);
                            b
                        }
                    }
                };
                ledger.scenario_branch.insert(task.scenario, branch);
                for block in &model.blocks {
                    let csr = block.csr.as_ref().expect("adapters exist in this mode");
                    csr.set_trainable(&mut model.store, branch)?;
                }
                for id in model.head_param_ids() {
                    model.store.set_trainable(id, true);
                }
                let mut trainable: Vec<ParamId> = model.branch_param_ids(branch);
                trainable.extend(model.projector_param_ids());
                trainable.extend(model.head_param_ids());
                let vcc_ctx = old
                    .as_ref()
                    .map(|old_model| VccContext { old_model, cfg: &cfg.vcc });
                train_on(
                    &mut model,
                    &task.samples,
                    &cfg.schedule,
                    epochs,
                    &trainable,
                    vcc_ctx,
                    derive_seed(seed, &[0x7e, task.index as u64]),
                    task.index,
                    observer,
                )?;
                freeze_marks.insert(branch, model.store.checksum(&model.branch_param_ids(branch)));
            }
        }
        let scores = evaluate_model(&model, &data.test)?;
        for (scenario, s) in &scores {
            let row = ScoreRow { step: task.index, scenario: *scenario, vqa: s.vqa, f1: s.f1 };
            observer.on_score_row(&row)?;
            record.rows.push(row);
        }
        let dt = t0.elapsed().as_secs_f64();
        record.task_wall_times.push(dt);
        observer.on_note(&format!(
            "task {} [{}] done in {dt:.1}s ({} samples, {} epochs)",
            task.index,
            task.scenario,
            task.samples.len(),
            epochs
        ));
    }

    for (branch, mark) in freeze_marks {
        record.freeze_audits.push(FreezeAudit {
            branch,
            at_freeze: crate::hash::hex64(mark),
            at_end: crate::hash::hex64(model.store.checksum(&model.branch_param_ids(branch))),
        });
    }
    Ok(RunOutcome { record, model })
}
