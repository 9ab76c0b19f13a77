//! The vision encoder: patch embedding, pre-norm attention/FFN blocks with a
//! per-block scenario-adapter hook, and task heads.

pub mod csr;
pub mod heads;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{ParamBinder, ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{InitMode, Tensor};
use csr::CsrModule;
use heads::HeadParams;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// Model dimensions and structural switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub d_bottleneck: usize,
    pub c_max: usize,
    pub n_classes: usize,
    /// Drop the block's own residual so the adapter output replaces it.
    pub literal_block_form: bool,
    /// Ablation: sum branch outputs instead of projecting them.
    pub use_projector: bool,
}

impl Default for ModelDims {
    fn default() -> ModelDims {
        ModelDims {
            image: 32,
            channels: 3,
            patch: 8,
            d_model: 64,
            heads: 4,
            layers: 4,
            ffn_hidden: 128,
            d_bottleneck: 16,
            c_max: 16,
            n_classes: 16,
            literal_block_form: false,
            use_projector: true,
        }
    }
}

impl ModelDims {
    pub fn seq_len(&self) -> usize {
        let g = self.image / self.patch;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.image % self.patch != 0 {
            return Err(Error::config("patch", format!("patch {} must divide image size {}", self.patch, self.image)));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config("heads", format!("head count {} must divide width {}", self.heads, self.d_model)));
        }
        if self.d_bottleneck >= self.d_model {
            return Err(Error::config("d_bottleneck", "bottleneck must be narrower than the model width"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "at least one block required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchParams {
    pub w: ParamId,
    pub b: ParamId,
    pub pos: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub csr: Option<CsrModule>,
}

impl BlockParams {
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// Per-layer intermediates surfaced for the consistency losses.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Attention block output (adapter input).
    pub a: Var,
    /// Raw per-branch adapter outputs, empty without an adapter.
    pub branch_outs: Vec<Var>,
    /// Projected adapter output, when an adapter is present.
    pub p: Option<Var>,
    /// Block output.
    pub r: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub layers: Vec<LayerTrace>,
    pub r_final: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisionModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub patch: PatchParams,
    pub blocks: Vec<BlockParams>,
    pub heads: HeadParams,
}

impl VisionModel {
    /// Build a fresh model. With `with_adapters`, every block hosts a
    /// scenario-adapter module starting at one branch.
    pub fn new(dims: ModelDims, seed: u64, with_adapters: bool) -> Result<VisionModel> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let d = dims.d_model;
        let tok = dims.patch * dims.patch * dims.channels;
        let norm = |store: &mut ParamStore, name: String, shape: &[usize], ix: u64| {
            store.add(
                name,
                Tensor::init(shape, InitMode::Normal { seed: derive_seed(seed, &[0xd1, ix]), std: 0.02 })
                    .expect("static shape"),
                true,
            )
        };
        let patch = PatchParams {
            w: norm(&mut store, "patch.w".into(), &[tok, d], 0),
            b: store.add("patch.b", Tensor::zeros(&[d]), true),
            pos: norm(&mut store, "patch.pos".into(), &[dims.seq_len(), d], 1),
        };
        let mut blocks = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let lx = 16 + l as u64 * 16;
            let name = |part: &str| format!("block{l}.{part}");
            let csr = if with_adapters {
                Some(CsrModule::init(
                    &mut store,
                    l,
                    d,
                    dims.d_bottleneck,
                    derive_seed(seed, &[0xc5, l as u64]),
                    dims.use_projector,
                )?)
            } else {
                None
            };
            blocks.push(BlockParams {
                ln1_g: store.add(name("ln1.g"), Tensor::init(&[d], InitMode::Ones)?, true),
                ln1_b: store.add(name("ln1.b"), Tensor::zeros(&[d]), true),
                wq: norm(&mut store, name("attn.wq"), &[d, d], lx),
                bq: store.add(name("attn.bq"), Tensor::zeros(&[d]), true),
                wk: norm(&mut store, name("attn.wk"), &[d, d], lx + 1),
                bk: store.add(name("attn.bk"), Tensor::zeros(&[d]), true),
                wv: norm(&mut store, name("attn.wv"), &[d, d], lx + 2),
                bv: store.add(name("attn.bv"), Tensor::zeros(&[d]), true),
                wo: norm(&mut store, name("attn.wo"), &[d, d], lx + 3),
                bo: store.add(name("attn.bo"), Tensor::zeros(&[d]), true),
                ln2_g: store.add(name("ln2.g"), Tensor::init(&[d], InitMode::Ones)?, true),
                ln2_b: store.add(name("ln2.b"), Tensor::zeros(&[d]), true),
                w1: norm(&mut store, name("ffn.w1"), &[d, dims.ffn_hidden], lx + 4),
                b1: store.add(name("ffn.b1"), Tensor::zeros(&[dims.ffn_hidden]), true),
                w2: norm(&mut store, name("ffn.w2"), &[dims.ffn_hidden, d], lx + 5),
                b2: store.add(name("ffn.b2"), Tensor::zeros(&[d]), true),
                csr,
            });
        }
        let heads = HeadParams::init(&mut store, d, dims.c_max, dims.n_classes, derive_seed(seed, &[0x4ead]));
        Ok(VisionModel { dims, store, patch, blocks, heads })
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.csr.is_some())
    }

    /// Branch count, identical across blocks by construction.
    pub fn branch_count(&self) -> usize {
        self.blocks.first().and_then(|b| b.csr.as_ref()).map_or(0, |m| m.k())
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch.w, self.patch.b, self.patch.pos];
        for b in &self.blocks {
            ids.extend(b.backbone_param_ids());
        }
        ids
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.heads.all_param_ids()
    }

    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| b.csr.as_ref())
            .flat_map(|m| m.all_param_ids())
            .collect()
    }

    /// Parameter ids of one branch across every block.
    pub fn branch_param_ids(&self, branch_idx: usize) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| b.csr.as_ref())
            .flat_map(|m| m.branch_param_ids(branch_idx))
            .collect()
    }

    pub fn projector_param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().filter_map(|b| b.csr.as_ref()).map(|m| m.projector).collect()
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Copy parameter values in from another model wherever names coincide
    /// and shapes agree (adapter-bearing models adopting a plain-backbone
    /// base, checkpoints restoring into a fresh build).
    pub fn adopt_values(&mut self, from: &VisionModel) -> usize {
        let mut adopted = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store[id].name.clone();
            if let Some(src) = from.store.find(&name) {
                let value = from.store.value(src);
                if value.shape == self.store.value(id).shape {
                    let mut t = value.clone();
                    t.grad = None;
                    self.store.replace_value(id, t);
                    adopted += 1;
                }
            }
        }
        adopted
    }
}

/// Tokenize an image into per-patch vectors and embed them.
pub fn patchify(
    model: &VisionModel,
    tape: &mut Tape,
    binder: &mut ParamBinder,
    image: &Image,
) -> Result<Var> {
    let p = model.dims.patch;
    if image.size != model.dims.image || image.channels != model.dims.channels {
        return Err(Error::shape(format!(
            "image {}x{}x{} does not match model input {}x{}x{}",
            image.size, image.size, image.channels, model.dims.image, model.dims.image, model.dims.channels
        )));
    }
    if image.size % p != 0 {
        return Err(Error::shape(format!("patch size {p} must divide image size {}", image.size)));
    }
    let grid = image.size / p;
    let seq = grid * grid;
    let tok = p * p * image.channels;
    let mut tokens = vec![0.0; seq * tok];
    for gy in 0..grid {
        for gx in 0..grid {
            let t = gy * grid + gx;
            let mut ix = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..image.channels {
                        tokens[t * tok + ix] = image.get(gy * p + py, gx * p + px, c);
                        ix += 1;
                    }
                }
            }
        }
    }
    let tokens = tape.constant(Tensor::from_data(&[seq, tok], tokens)?);
    let w = binder.var(tape, model.patch.w);
    let b = binder.var(tape, model.patch.b);
    let pos = binder.var(tape, model.patch.pos);
    let x = tape.matmul(tokens, w)?;
    let x = tape.add_row(x, b)?;
    tape.add(x, pos)
}

/// Pre-norm multi-head self-attention with residual.
pub fn attention_forward(
    model: &VisionModel,
    tape: &mut Tape,
    binder: &mut ParamBinder,
    block: &BlockParams,
    r_prev: Var,
) -> Result<Var> {
    let d = model.dims.d_model;
    let h = model.dims.heads;
    let dh = d / h;
    if tape.shape(r_prev) != [model.dims.seq_len(), d] {
        return Err(Error::shape(format!(
            "attention input must be [{}, {d}], got {:?}",
            model.dims.seq_len(),
            tape.shape(r_prev)
        )));
    }
    let ln_g = binder.var(tape, block.ln1_g);
    let ln_b = binder.var(tape, block.ln1_b);
    let x = tape.layer_norm(r_prev, ln_g, ln_b, LN_EPS)?;

    let project = |tape: &mut Tape, binder: &mut ParamBinder, w, b| -> Result<Var> {
        let wv = binder.var(tape, w);
        let bv = binder.var(tape, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    };
    let q = project(tape, binder, block.wq, block.bq)?;
    let k = project(tape, binder, block.wk, block.bk)?;
    let v = project(tape, binder, block.wv, block.bv)?;

    let mut head_outs = Vec::with_capacity(h);
    for i in 0..h {
        let (from, to) = (i * dh, (i + 1) * dh);
        let qh = tape.slice_cols(q, from, to)?;
        let kh = tape.slice_cols(k, from, to)?;
        let vh = tape.slice_cols(v, from, to)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scores, 1)?;
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let wo = binder.var(tape, block.wo);
    let bo = binder.var(tape, block.bo);
    let out = tape.matmul(cat, wo)?;
    let out = tape.add_row(out, bo)?;
    tape.add(out, r_prev)
}

/// FFN half of the block. The default form keeps the usual residual and adds
/// the adapter output on top; the literal form drops the residual so the
/// adapter term stands in for it.
pub fn block_forward(
    model: &VisionModel,
    tape: &mut Tape,
    binder: &mut ParamBinder,
    block: &BlockParams,
    a: Var,
    p: Option<Var>,
) -> Result<Var> {
    if let Some(pv) = p {
        if tape.shape(pv) != tape.shape(a) {
            return Err(Error::shape(format!(
                "adapter output {:?} does not match block width {:?}",
                tape.shape(pv),
                tape.shape(a)
            )));
        }
    }
    let ln_g = binder.var(tape, block.ln2_g);
    let ln_b = binder.var(tape, block.ln2_b);
    let x = tape.layer_norm(a, ln_g, ln_b, LN_EPS)?;
    let w1 = binder.var(tape, block.w1);
    let b1 = binder.var(tape, block.b1);
    let w2 = binder.var(tape, block.w2);
    let b2 = binder.var(tape, block.b2);
    let hmid = tape.matmul(x, w1)?;
    let hmid = tape.add_row(hmid, b1)?;
    let hmid = tape.gelu(hmid);
    let ffn = tape.matmul(hmid, w2)?;
    let ffn = tape.add_row(ffn, b2)?;
    let mut r = if model.dims.literal_block_form { ffn } else { tape.add(ffn, a)? };
    if let Some(pv) = p {
        r = tape.add(r, pv)?;
    }
    Ok(r)
}

/// Full encoder pass, keeping every layer's intermediates.
pub fn encoder_forward(
    model: &VisionModel,
    tape: &mut Tape,
    binder: &mut ParamBinder,
    image: &Image,
) -> Result<EncoderTrace> {
    let mut r = patchify(model, tape, binder, image)?;
    let mut layers = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let a = attention_forward(model, tape, binder, block, r)?;
        let (branch_outs, p) = match &block.csr {
            Some(m) => {
                let fwd = m.forward(tape, binder, a)?;
                (fwd.branch_outs, Some(fwd.p))
            }
            None => (Vec::new(), None),
        };
        r = block_forward(model, tape, binder, block, a, p)?;
        layers.push(LayerTrace { a, branch_outs, p, r });
    }
    Ok(EncoderTrace { layers, r_final: r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            image: 16,
            channels: 3,
            patch: 8,
            d_model: 16,
            heads: 2,
            layers: 2,
            ffn_hidden: 24,
            d_bottleneck: 4,
            c_max: 8,
            n_classes: 8,
            literal_block_form: false,
            use_projector: true,
        }
    }

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        let mut img = Image::filled(size, 3, 0.0);
        for p in img.pixels.iter_mut() {
            *p = rng.gen::<f64>();
        }
        img.quantize();
        img
    }

    #[test]
    fn patchify_shapes_and_zero_case() {
        let model = VisionModel::new(tiny_dims(), 1, true).unwrap();
        let img = random_image(16, 2);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        let x = patchify(&model, &mut tape, &mut binder, &img).unwrap();
        assert_eq!(tape.shape(x), &[4, 16]);

        // All-zero image with zeroed bias/pos embeds maps to zero.
        let mut m2 = VisionModel::new(tiny_dims(), 1, true).unwrap();
        let pos_shape = m2.store.value(m2.patch.pos).shape.clone();
        m2.store.replace_value(m2.patch.pos, Tensor::zeros(&pos_shape));
        let zero = Image::filled(16, 3, 0.0);
        let mut tape2 = Tape::new();
        let mut binder2 = ParamBinder::frozen(&m2.store);
        let x2 = patchify(&m2, &mut tape2, &mut binder2, &zero).unwrap();
        assert!(tape2.value(x2).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_mismatched_image() {
        let model = VisionModel::new(tiny_dims(), 1, true).unwrap();
        let img = random_image(32, 2);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        assert!(patchify(&model, &mut tape, &mut binder, &img).is_err());
    }

    #[test]
    fn zeroed_output_projection_makes_attention_identity() {
        let mut model = VisionModel::new(tiny_dims(), 3, true).unwrap();
        let wo_shape = model.store.value(model.blocks[0].wo).shape.clone();
        model.store.replace_value(model.blocks[0].wo, Tensor::zeros(&wo_shape));
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        let r =
            tape.constant(Tensor::init(&[4, 16], InitMode::Normal { seed: 5, std: 1.0 }).unwrap());
        let block = model.blocks[0].clone();
        let a = attention_forward(&model, &mut tape, &mut binder, &block, r).unwrap();
        assert_eq!(tape.value(a).data, tape.value(r).data);
    }

    #[test]
    fn block_residual_identity_with_zero_ffn_output() {
        let mut model = VisionModel::new(tiny_dims(), 3, true).unwrap();
        let w2_shape = model.store.value(model.blocks[0].w2).shape.clone();
        model.store.replace_value(model.blocks[0].w2, Tensor::zeros(&w2_shape));
        let block = model.blocks[0].clone();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        let a = tape.constant(Tensor::init(&[4, 16], InitMode::Normal { seed: 5, std: 1.0 }).unwrap());
        // Default form with p absent: r == a.
        let r = block_forward(&model, &mut tape, &mut binder, &block, a, None).unwrap();
        assert_eq!(tape.value(r).data, tape.value(a).data);

        // Literal form with p absent and zero FFN: r == 0.
        let mut literal = model.clone();
        literal.dims.literal_block_form = true;
        let r0 = block_forward(&literal, &mut tape, &mut binder, &block, a, None).unwrap();
        assert!(tape.value(r0).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_and_literal_forms_differ_by_exactly_the_residual() {
        let model = VisionModel::new(tiny_dims(), 3, true).unwrap();
        let mut literal = model.clone();
        literal.dims.literal_block_form = true;
        let block = model.blocks[0].clone();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        let a = tape.constant(Tensor::init(&[4, 16], InitMode::Normal { seed: 5, std: 1.0 }).unwrap());
        let rd = block_forward(&model, &mut tape, &mut binder, &block, a, None).unwrap();
        let rl = block_forward(&literal, &mut tape, &mut binder, &block, a, None).unwrap();
        let diff = tape.sub(rd, rl).unwrap();
        for (d, av) in tape.value(diff).data.iter().zip(&tape.value(a).data) {
            assert!((d - av).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_trace_has_one_entry_per_layer_with_matching_shapes() {
        let model = VisionModel::new(tiny_dims(), 7, true).unwrap();
        let img = random_image(16, 9);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::frozen(&model.store);
        let trace = encoder_forward(&model, &mut tape, &mut binder, &img).unwrap();
        assert_eq!(trace.layers.len(), 2);
        for layer in &trace.layers {
            assert_eq!(tape.shape(layer.a), &[4, 16]);
            assert_eq!(tape.shape(layer.p.unwrap()), &[4, 16]);
            assert_eq!(tape.shape(layer.r), &[4, 16]);
            assert_eq!(layer.branch_outs.len(), 1);
        }
        assert_eq!(trace.r_final, trace.layers.last().unwrap().r);
    }

    #[test]
    fn adapterless_blocks_match_plain_transformer() {
        // With zeroed branch up-projections, the adapter adds exactly zero,
        // so adapterful and adapterless models agree bit for bit when their
        // backbone weights agree.
        let with = VisionModel::new(tiny_dims(), 11, true).unwrap();
        let without = VisionModel::new(tiny_dims(), 11, false).unwrap();
        // Same seed means same backbone/head init; adapters only add params.
        let img = random_image(16, 13);
        let mut t1 = Tape::new();
        let mut b1 = ParamBinder::frozen(&with.store);
        let tr1 = encoder_forward(&with, &mut t1, &mut b1, &img).unwrap();
        let mut t2 = Tape::new();
        let mut b2 = ParamBinder::frozen(&without.store);
        let tr2 = encoder_forward(&without, &mut t2, &mut b2, &img).unwrap();
        assert_eq!(t1.value(tr1.r_final).data, t2.value(tr2.r_final).data);
    }

    #[test]
    fn encoder_is_deterministic() {
        let model = VisionModel::new(tiny_dims(), 21, true).unwrap();
        let img = random_image(16, 22);
        let run = || {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::frozen(&model.store);
            let tr = encoder_forward(&model, &mut tape, &mut binder, &img).unwrap();
            tape.value(tr.r_final).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dims_validation_catches_bad_configs() {
        let mut d = tiny_dims();
        d.patch = 5;
        assert!(d.validate().is_err());
        let mut d = tiny_dims();
        d.heads = 3;
        assert!(d.validate().is_err());
        let mut d = tiny_dims();
        d.d_bottleneck = 16;
        assert!(d.validate().is_err());
    }
}
