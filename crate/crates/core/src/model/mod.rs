//! The multi-task network: a shared strided encoder (E2..E7), a shared decoder
//! (D2..D6) feeding the segmentation and depth heads, and an FPN instance head
//! on E3..E5 predicting FCOS-style detections, mask codes and instance depths.
//!
//! Parameters live in a flat named store. The architecture is written once as
//! generic forward code over a [`ParamSource`]; building a model runs that code
//! with an initializing source, so names and shapes can never drift apart.

mod checkpoint;
mod decode;

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{Task, TaskSet};
use crate::tensor::{Graph, NodeId, Scalar};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{decode_detections, nms, DecodeParams, Detection};

/// Strides of E2..E7.
pub const ENCODER_STRIDES: [usize; 6] = [4, 8, 16, 32, 64, 128];
/// Strides of the instance-head levels P3..P5.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_stuff_classes: usize,
    pub num_thing_classes: usize,
    pub stem_channels: usize,
    /// Widths of E2..E7.
    pub encoder_channels: [usize; 6],
    /// Width of D2..D6.
    pub decoder_channels: usize,
    /// Per-level width after the 1×1 reduction in the pixel heads.
    pub head_channels: usize,
    /// Width of the fused map before the final upsampling in the pixel heads.
    pub head_fuse_channels: usize,
    pub fpn_channels: usize,
    pub tower_depth: usize,
    pub mask_code_dim: usize,
    /// Upper bounds of the P3 and P4 regression ranges; P5 takes the rest,
    /// giving (0, b0], (b0, b1], (b1, ∞).
    pub level_bounds: [f64; 2],
    /// Multiplier applied after softplus for the depth outputs (meters).
    pub depth_scale: f64,
    /// Typical depths used to initialize the depth output biases.
    pub depth_prior: f64,
    pub instance_depth_prior: f64,
    pub cls_prior: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_stuff_classes: 2,
            num_thing_classes: 3,
            stem_channels: 16,
            encoder_channels: [16, 24, 32, 48, 64, 64],
            decoder_channels: 32,
            head_channels: 64,
            head_fuse_channels: 16,
            fpn_channels: 32,
            tower_depth: 2,
            mask_code_dim: crate::maskcodec::DEFAULT_CODE_DIM,
            level_bounds: [16.0, 32.0],
            depth_scale: 10.0,
            depth_prior: 20.0,
            instance_depth_prior: 6.0,
            cls_prior: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.num_stuff_classes + self.num_thing_classes
    }

    /// Regression range `(lo, hi]` of instance level `level` (0 = P3).
    pub fn level_range(&self, level: usize) -> (f64, f64) {
        match level {
            0 => (0.0, self.level_bounds[0]),
            1 => (self.level_bounds[0], self.level_bounds[1]),
            _ => (self.level_bounds[1], f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.stem_channels,
            self.decoder_channels,
            self.head_channels,
            self.head_fuse_channels,
            self.fpn_channels,
        ];
        if widths.iter().chain(&self.encoder_channels).any(|&c| c == 0) {
            return Err(Error::Config("all channel widths must be positive".into()));
        }
        if self.num_thing_classes == 0 || self.num_classes() < 2 {
            return Err(Error::Config("need at least one thing class and two classes overall".into()));
        }
        if self.mask_code_dim == 0 {
            return Err(Error::Config("mask_code_dim must be at least 1".into()));
        }
        let [a, b] = self.level_bounds;
        if !(a > 0.0 && b > a && b.is_finite()) {
            return Err(Error::Config(format!("level bounds {a}, {b} must satisfy 0 < b0 < b1")));
        }
        if !(self.depth_scale > 0.0 && self.depth_prior > 0.0 && self.instance_depth_prior > 0.0) {
            return Err(Error::Config("depth scale and priors must be positive".into()));
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return Err(Error::Config("cls_prior must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// How a parameter is initialized when a model is built.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Gaussian with std `sqrt(2 / fan_in)`.
    He,
    Normal(f64),
    Const(f64),
}

/// Supplies parameter nodes to the forward code.
pub trait ParamSource<T: Scalar> {
    fn param(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], init: Init) -> Result<NodeId>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: ArrayD<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Initializer {
    seed: u64,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSource<f32> for Initializer {
    fn param(&mut self, g: &mut Graph<f32>, name: &str, shape: &[usize], init: Init) -> Result<NodeId> {
        if let Some(&i) = self.index.get(name) {
            return Ok(g.constant(self.params[i].value.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let value = match init {
            Init::Const(c) => ArrayD::from_elem(IxDyn(shape), c as f32),
            Init::He | Init::Normal(_) => {
                let std = match init {
                    Init::Normal(s) => s,
                    _ => (2.0 / shape[1..].iter().product::<usize>().max(1) as f64).sqrt(),
                };
                let dist = Normal::new(0.0, std).expect("finite std");
                ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut rng) as f32)
            }
        };
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), value: value.clone() });
        Ok(g.constant(value))
    }
}

/// Binds stored parameters into a graph, one node per parameter.
pub struct Binder<'m> {
    model: &'m Model,
    trainable: bool,
    nodes: HashMap<usize, NodeId>,
}

impl<'m> Binder<'m> {
    pub fn new(model: &'m Model, trainable: bool) -> Self {
        Binder { model, trainable, nodes: HashMap::new() }
    }

    /// `(parameter index, node)` for every parameter touched, sorted by index.
    pub fn bound(&self) -> Vec<(usize, NodeId)> {
        let mut v: Vec<_> = self.nodes.iter().map(|(&i, &n)| (i, n)).collect();
        v.sort();
        v
    }
}

impl<T: Scalar> ParamSource<T> for Binder<'_> {
    fn param(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], _init: Init) -> Result<NodeId> {
        let &i = self
            .model
            .index
            .get(name)
            .ok_or_else(|| Error::NotFound { what: "parameter", name: name.to_string() })?;
        if let Some(&n) = self.nodes.get(&i) {
            return Ok(n);
        }
        let stored = &self.model.params[i].value;
        if stored.shape() != shape {
            return Err(Error::Shape(format!(
                "parameter {name}: stored shape {:?}, architecture expects {shape:?}",
                stored.shape()
            )));
        }
        let value = stored.mapv(|v| T::of(v as f64));
        let n = if self.trainable { g.leaf(value) } else { g.constant(value) };
        self.nodes.insert(i, n);
        Ok(n)
    }
}

/// Per-level instance-head nodes, all `[C, H_l, W_l]`.
#[derive(Clone, Copy, Debug)]
pub struct LevelNodes {
    pub stride: usize,
    pub cls_logits: NodeId,
    pub centerness: NodeId,
    pub box_dists: NodeId,
    pub mask_codes: Option<NodeId>,
    pub inst_depth: Option<NodeId>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct DenseNodes {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<LevelNodes>,
    /// `[num_classes, H, W]`.
    pub seg_logits: Option<NodeId>,
    /// `[1, H, W]`.
    pub depth_map: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs {
    pub stride: usize,
    pub cls_logits: Array3<f32>,
    pub centerness: Array3<f32>,
    /// Left, top, right, bottom distances in pixels.
    pub box_dists: Array3<f32>,
    pub mask_codes: Option<Array3<f32>>,
    pub inst_depth: Option<Array3<f32>>,
}

/// Raw network outputs of one image in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutputs {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<LevelOutputs>,
    pub seg_logits: Option<Array3<f32>>,
    pub depth_map: Option<Array2<f32>>,
}

fn to_f32<T: Scalar>(a: &ArrayD<T>) -> ArrayD<f32> {
    a.mapv(|v| v.as_f64() as f32)
}

impl DenseNodes {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> DenseOutputs {
        let a3 = |n: NodeId| to_f32(g.value(n)).into_dimensionality::<Ix3>().unwrap();
        DenseOutputs {
            image_height: self.image_height,
            image_width: self.image_width,
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutputs {
                    stride: l.stride,
                    cls_logits: a3(l.cls_logits),
                    centerness: a3(l.centerness),
                    box_dists: a3(l.box_dists),
                    mask_codes: l.mask_codes.map(a3),
                    inst_depth: l.inst_depth.map(a3),
                })
                .collect(),
            seg_logits: self.seg_logits.map(a3),
            depth_map: self.depth_map.map(|n| {
                let d = to_f32(g.value(n));
                let (h, w) = (d.shape()[1], d.shape()[2]);
                d.into_shape_with_order((h, w)).unwrap().into_dimensionality::<Ix2>().unwrap()
            }),
        }
    }

    /// Every output node, for gradient checks and bookkeeping.
    pub fn all_nodes(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            let p = i + 3;
            out.push((format!("p{p}.cls_logits"), l.cls_logits));
            out.push((format!("p{p}.centerness"), l.centerness));
            out.push((format!("p{p}.box_dists"), l.box_dists));
            if let Some(n) = l.mask_codes {
                out.push((format!("p{p}.mask_codes"), n));
            }
            if let Some(n) = l.inst_depth {
                out.push((format!("p{p}.inst_depth"), n));
            }
        }
        if let Some(n) = self.seg_logits {
            out.push(("seg_logits".into(), n));
        }
        if let Some(n) = self.depth_map {
            out.push(("depth_map".into(), n));
        }
        out
    }
}

fn conv<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    x: NodeId,
    name: &str,
    out: usize,
    k: usize,
    stride: usize,
    weight: Init,
    bias: Init,
) -> Result<NodeId> {
    let cin = g.shape(x)[0];
    let w = p.param(g, &format!("{name}.w"), &[out, cin, k, k], weight)?;
    let b = p.param(g, &format!("{name}.b"), &[out], bias)?;
    Ok(g.conv2d(x, w, Some(b), stride, k / 2))
}

fn conv_relu<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    x: NodeId,
    name: &str,
    out: usize,
    k: usize,
    stride: usize,
) -> Result<NodeId> {
    let y = conv(g, p, x, name, out, k, stride, Init::He, Init::Const(0.0))?;
    Ok(g.relu(y))
}

/// `relu(skip(x) + conv(relu(conv(x))))`, with a 1×1 projection on the skip
/// when the width changes.
fn res_block<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    x: NodeId,
    name: &str,
    out: usize,
) -> Result<NodeId> {
    let cin = g.shape(x)[0];
    let h = conv_relu(g, p, x, &format!("{name}.conv1"), out, 3, 1)?;
    let h = conv(g, p, h, &format!("{name}.conv2"), out, 3, 1, Init::He, Init::Const(0.0))?;
    let skip = if cin == out { x } else { conv(g, p, x, &format!("{name}.proj"), out, 1, 1, Init::He, Init::Const(0.0))? };
    let s = g.add(h, skip);
    Ok(g.relu(s))
}

fn inv_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Encoder features E2..E7.
pub fn encode<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<Vec<NodeId>> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}")));
    }
    if s[1] == 0 || s[1] % 128 != 0 || s[2] == 0 || s[2] % 128 != 0 {
        return Err(Error::Shape(format!("image size {}x{} is not a positive multiple of 128", s[1], s[2])));
    }
    let mut x = conv_relu(g, p, image, "encoder.stem", cfg.stem_channels, 3, 2)?;
    let mut feats = Vec::with_capacity(6);
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        let name = format!("encoder.e{}", i + 2);
        x = conv_relu(g, p, x, &format!("{name}.down"), c, 3, 2)?;
        x = res_block(g, p, x, &format!("{name}.res"), c)?;
        feats.push(x);
    }
    Ok(feats)
}

/// Decoder features D2..D6 from E2..E7.
pub fn decode<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    cfg: &ModelConfig,
    enc: &[NodeId],
) -> Result<Vec<NodeId>> {
    if enc.len() != 6 {
        return Err(Error::Shape(format!("decoder needs 6 encoder levels, got {}", enc.len())));
    }
    let mut upper = enc[5];
    let mut out = vec![upper; 5];
    for l in (0..5).rev() {
        let up = g.resize_like(upper, enc[l]);
        let cat = g.concat(&[enc[l], up]);
        upper = res_block(g, p, cat, &format!("decoder.d{}", l + 2), cfg.decoder_channels)?;
        out[l] = upper;
    }
    Ok(out)
}

/// Shared structure of the segmentation and depth heads.
fn pixel_head<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    cfg: &ModelConfig,
    dec: &[NodeId],
    name: &str,
    out: usize,
    out_bias: f64,
    height: usize,
    width: usize,
) -> Result<NodeId> {
    let (qh, qw) = (height / 4, width / 4);
    let mut parts = Vec::with_capacity(dec.len());
    for (l, &d) in dec.iter().enumerate() {
        let r = conv_relu(g, p, d, &format!("{name}.reduce{}", l + 2), cfg.head_channels, 1, 1)?;
        parts.push(g.resize_bilinear(r, qh, qw));
    }
    let cat = g.concat(&parts);
    let fused = conv_relu(g, p, cat, &format!("{name}.fuse"), cfg.head_fuse_channels, 3, 1)?;
    let up = g.resize_bilinear(fused, height, width);
    conv(g, p, up, &format!("{name}.out"), out, 3, 1, Init::Normal(0.01), Init::Const(out_bias))
}

/// FPN over E3..E5 and the shared towers, producing per-level nodes.
pub fn instance_head<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    cfg: &ModelConfig,
    enc: &[NodeId],
    tasks: TaskSet,
) -> Result<Vec<LevelNodes>> {
    let c = cfg.fpn_channels;
    let lateral: Vec<NodeId> = (0..3)
        .map(|i| conv(g, p, enc[i + 1], &format!("inst.fpn.lateral{}", i + 3), c, 1, 1, Init::He, Init::Const(0.0)))
        .collect::<Result<_>>()?;
    let mut merged = vec![lateral[2]; 3];
    for i in (0..2).rev() {
        let up = g.resize_like(merged[i + 1], lateral[i]);
        merged[i] = g.add(lateral[i], up);
    }
    let cls_bias = -((1.0 - cfg.cls_prior) / cfg.cls_prior).ln();
    let id_bias = inv_softplus(cfg.instance_depth_prior / cfg.depth_scale);
    let mut levels = Vec::with_capacity(3);
    for (i, &m) in merged.iter().enumerate() {
        let stride = LEVEL_STRIDES[i];
        let pl = conv_relu(g, p, m, &format!("inst.fpn.smooth{}", i + 3), c, 3, 1)?;
        let mut ct = pl;
        for t in 0..cfg.tower_depth {
            ct = conv_relu(g, p, ct, &format!("inst.cls_tower.{t}"), c, 3, 1)?;
        }
        let mut rt = pl;
        for t in 0..cfg.tower_depth {
            rt = conv_relu(g, p, rt, &format!("inst.reg_tower.{t}"), c, 3, 1)?;
        }
        let small = Init::Normal(0.01);
        let cls_logits = conv(g, p, ct, "inst.cls_logits", cfg.num_thing_classes, 3, 1, small, Init::Const(cls_bias))?;
        let centerness = conv(g, p, ct, "inst.centerness", 1, 3, 1, small, Init::Const(0.0))?;
        let raw_box = conv(g, p, rt, "inst.box", 4, 3, 1, small, Init::Const(0.0))?;
        let e = g.exp(raw_box);
        let box_dists = g.mul_scalar(e, T::of(stride as f64));
        let mask_codes = if tasks.contains(Task::Is) {
            Some(conv(g, p, rt, "inst.mask_codes", cfg.mask_code_dim, 3, 1, small, Init::Const(0.0))?)
        } else {
            None
        };
        let inst_depth = if tasks.contains(Task::Id) {
            let z = conv(g, p, rt, "inst.inst_depth", 1, 3, 1, small, Init::Const(id_bias))?;
            let sp = g.softplus(z);
            Some(g.mul_scalar(sp, T::of(cfg.depth_scale)))
        } else {
            None
        };
        levels.push(LevelNodes { stride, cls_logits, centerness, box_dists, mask_codes, inst_depth });
    }
    Ok(levels)
}

/// Runs the heads selected by `tasks` on a `[3, H, W]` image node.
pub fn forward_with<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    p: &mut P,
    cfg: &ModelConfig,
    image: NodeId,
    tasks: TaskSet,
) -> Result<DenseNodes> {
    TaskSet::new(&tasks.iter().collect::<Vec<_>>())?;
    let enc = encode(g, p, cfg, image)?;
    let (h, w) = (g.shape(image)[1], g.shape(image)[2]);
    let mut out = DenseNodes { image_height: h, image_width: w, levels: Vec::new(), seg_logits: None, depth_map: None };
    if tasks.contains(Task::Od) {
        out.levels = instance_head(g, p, cfg, &enc, tasks)?;
    }
    if tasks.needs_decoder() {
        let dec = decode(g, p, cfg, &enc)?;
        if tasks.contains(Task::Ss) {
            out.seg_logits = Some(pixel_head(g, p, cfg, &dec, "seg_head", cfg.num_classes(), 0.0, h, w)?);
        }
        if tasks.contains(Task::D) {
            let bias = inv_softplus(cfg.depth_prior / cfg.depth_scale);
            let z = pixel_head(g, p, cfg, &dec, "depth_head", 1, bias, h, w)?;
            let sp = g.softplus(z);
            out.depth_map = Some(g.mul_scalar(sp, T::of(cfg.depth_scale)));
        }
    }
    Ok(out)
}

/// Result of [`Model::forward`]: output nodes plus the parameter nodes bound.
pub struct ForwardPass {
    pub dense: DenseNodes,
    pub params: Vec<(usize, NodeId)>,
}

impl Model {
    /// Builds a model with every parameter of the five-task network initialized
    /// deterministically from `config.seed` and the parameter name.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer { seed: config.seed, params: Vec::new(), index: HashMap::new() };
        let mut g = Graph::<f32>::new();
        let image = g.constant(ArrayD::zeros(IxDyn(&[3, 128, 128])));
        forward_with(&mut g, &mut init, &config, image, TaskSet::all())?;
        Ok(Model { config, params: init.params, index: init.index })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let reference = Model::new(config.clone())?;
        if params.len() != reference.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            let &j = reference.index.get(&p.name).ok_or_else(|| Error::NotFound { what: "parameter", name: p.name.clone() })?;
            if reference.params[j].value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("parameter {} has shape {:?}", p.name, p.value.shape())));
            }
            index.insert(p.name.clone(), i);
        }
        Ok(Model { config, params, index })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Builds the forward graph for `tasks`. With `trainable`, parameters become
    /// gradient-carrying leaves; otherwise they are constants.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: NodeId, tasks: TaskSet, trainable: bool) -> Result<ForwardPass> {
        let mut binder = Binder::new(self, trainable);
        let dense = forward_with(g, &mut binder, &self.config, image, tasks)?;
        Ok(ForwardPass { dense, params: binder.bound() })
    }

    /// Inference on one `[3, H, W]` image.
    pub fn predict(&self, image: &Array3<f32>, tasks: TaskSet) -> Result<DenseOutputs> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(image.clone().into_dyn());
        let pass = self.forward(&mut g, x, tasks, false)?;
        Ok(pass.dense.values(&g))
    }

    /// Names of the parameters a forward pass over `tasks` reads, in store order.
    pub fn parameter_names(&self, tasks: TaskSet) -> Result<Vec<String>> {
        let mut g = Graph::<f32>::new();
        let image = g.constant(ArrayD::zeros(IxDyn(&[3, 128, 128])));
        let pass = self.forward(&mut g, image, tasks, false)?;
        Ok(pass.params.iter().map(|&(i, _)| self.params[i].name.clone()).collect())
    }

    /// Order-sensitive FNV-1a hash over every parameter name and value bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.iter() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}
