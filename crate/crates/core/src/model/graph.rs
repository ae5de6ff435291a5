use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::config::{check_heads_and_pan, Head, ModelConfig, PanMode};
use crate::nn::{self, BlockParams, CaSpec, ConvBnActSpec, ConvSpec, CspSpec, Ctx, ParamStore, SppfSpec};
use crate::tensor::ops::{self, RunningStats};
use crate::tensor::{Float, Tensor};

/// Hidden-width ratio of backbone and top-down CSP blocks.
pub const CSP_EXPANSION: f64 = 0.5;
/// Hidden-width ratio of the bottom-up CSP blocks, which only carry
/// information back down to the coarse heads.
pub const PAN_EXPANSION: f64 = 0.25;
/// Per-cell outputs before the class logits: box (4) and objectness (1).
pub const BOX_OBJ_CHANNELS: usize = 5;
/// Initial objectness bias, a prior probability of about 1%.
pub const OBJECTNESS_PRIOR_BIAS: f32 = -4.6;

/// Width of the 3×3 conv in a head reading `c` channels.
pub fn head_hidden(c: usize) -> usize {
    (c / 2).clamp(16, 64)
}

/// Which part of the detector a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Backbone,
    /// Top-down path.
    Neck,
    /// Bottom-up path aggregation.
    Pan,
    Attention,
    Head(Head),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    ConvBnAct(ConvBnActSpec),
    Csp(CspSpec),
    Sppf(SppfSpec),
    Upsample,
    Concat,
    CoordAtt(CaSpec),
    /// 3×3 conv-BN-SiLU followed by the 1×1 prediction conv.
    Detect {
        stem: ConvBnActSpec,
        pred: ConvSpec,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
    pub group: Group,
    pub out_channels: usize,
    /// Output stride relative to the input image.
    pub stride: usize,
}

impl Layer {
    fn params(&self) -> BlockParams {
        let n = &self.name;
        match &self.op {
            LayerOp::ConvBnAct(s) => s.params(n),
            LayerOp::Csp(s) => s.params(n),
            LayerOp::Sppf(s) => s.params(n),
            LayerOp::CoordAtt(s) => s.params(n),
            LayerOp::Detect { stem, pred } => {
                let mut p = stem.params(&format!("{n}.stem"));
                p.extend(pred.params(&format!("{n}.pred")));
                p
            }
            LayerOp::Upsample | LayerOp::Concat => BlockParams::default(),
        }
    }

    fn forward<T: Float>(&self, ctx: &Ctx<T>, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let n = &self.name;
        match &self.op {
            LayerOp::ConvBnAct(s) => nn::conv_bn_act(ctx, n, &inputs[0], s.stride),
            LayerOp::Csp(s) => nn::csp_block(ctx, n, &inputs[0], s.n),
            LayerOp::Sppf(_) => nn::sppf_block(ctx, n, &inputs[0]),
            LayerOp::Upsample => ops::upsample_nearest2x(&inputs[0]),
            LayerOp::Concat => ops::concat_channels(inputs),
            LayerOp::CoordAtt(_) => nn::coordinate_attention(ctx, n, &inputs[0]),
            LayerOp::Detect { .. } => {
                let y = nn::conv_bn_act(ctx, &format!("{n}.stem"), &inputs[0], 1)?;
                nn::conv(ctx, &format!("{n}.pred"), &y)
            }
        }
    }

    /// Cost of one forward pass given input spatial sizes.
    fn flops(&self, batch: usize, h: usize, w: usize) -> Result<u64> {
        Ok(match &self.op {
            LayerOp::ConvBnAct(s) => s.flops(batch, h, w)?.0,
            LayerOp::Csp(s) => s.flops(batch, h, w)?,
            LayerOp::Sppf(s) => s.flops(batch, h, w)?,
            LayerOp::CoordAtt(s) => s.flops(batch, h, w),
            LayerOp::Detect { stem, pred } => stem.flops(batch, h, w)?.0 + pred.flops(batch, h, w),
            LayerOp::Upsample | LayerOp::Concat => 0,
        })
    }
}

/// Name of the layer owning a parameter or statistics entry.
pub fn layer_of(param_name: &str) -> &str {
    param_name.split('.').next().unwrap_or(param_name)
}

/// A detector: ordered layers, the layer feeding each head, and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: ModelConfig,
    seed: u64,
    layers: Vec<Layer>,
    outputs: BTreeMap<Head, String>,
    store: ParamStore,
}

struct Builder {
    layers: Vec<Layer>,
}

impl Builder {
    fn channels(&self, name: &str) -> usize {
        self.get(name).out_channels
    }

    fn get(&self, name: &str) -> &Layer {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .expect("layer defined earlier")
    }

    fn add(&mut self, name: &str, op: LayerOp, inputs: &[&str], group: Group) -> String {
        let first = inputs.first().filter(|n| **n != INPUT).map(|n| self.get(n));
        let (in_c, in_stride) = first.map_or((1, 1), |l| (l.out_channels, l.stride));
        let (out_channels, stride) = match &op {
            LayerOp::ConvBnAct(s) => (s.cout, in_stride * s.stride),
            LayerOp::Csp(s) => (s.cout, in_stride),
            LayerOp::Sppf(s) => (s.cout, in_stride),
            LayerOp::Upsample => (in_c, in_stride / 2),
            LayerOp::Concat => (inputs.iter().map(|i| self.channels(i)).sum(), in_stride),
            LayerOp::CoordAtt(s) => (s.channels, in_stride),
            LayerOp::Detect { pred, .. } => (pred.cout, in_stride),
        };
        self.layers.push(Layer {
            name: name.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            group,
            out_channels,
            stride,
        });
        name.to_string()
    }

    fn cba(&mut self, name: &str, input: &str, cout: usize, k: usize, stride: usize, group: Group) -> String {
        let cin = if input == INPUT { 1 } else { self.channels(input) };
        self.add(
            name,
            LayerOp::ConvBnAct(ConvBnActSpec::new(cin, cout, k, stride)),
            &[input],
            group,
        )
    }

    fn csp(&mut self, name: &str, input: &str, cout: usize, depth: usize, expansion: f64, group: Group) -> String {
        let cin = self.channels(input);
        self.add(
            name,
            LayerOp::Csp(CspSpec::new(cin, cout, depth, expansion)),
            &[input],
            group,
        )
    }

    /// `upsample(deep) ++ skip → csp`, the top-down fusion step.
    fn fuse_up(&mut self, name: &str, deep: &str, skip: &str, cout: usize, depth: usize) -> String {
        let up = self.add(&format!("{name}_up"), LayerOp::Upsample, &[deep], Group::Neck);
        let cat = self.add(&format!("{name}_cat"), LayerOp::Concat, &[&up, skip], Group::Neck);
        self.csp(name, &cat, cout, depth, CSP_EXPANSION, Group::Neck)
    }

    /// `downsample(fine) ++ lateral → csp`, the bottom-up fusion step.
    fn fuse_down(&mut self, name: &str, fine: &str, lateral: &str, cout: usize, depth: usize) -> String {
        let c = self.channels(fine);
        let down = self.cba(&format!("{name}_down"), fine, c, 3, 2, Group::Pan);
        let cat = self.add(&format!("{name}_cat"), LayerOp::Concat, &[&down, lateral], Group::Pan);
        self.csp(name, &cat, cout, depth, PAN_EXPANSION, Group::Pan)
    }
}

/// Pseudo layer name of the input image.
pub const INPUT: &str = "input";

impl ModelGraph {
    /// Builds the untrimmed graph implied by `config`, initializes it from
    /// `seed`, then trims it to `config.active_heads` and `config.pan_mode`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let d = config.csp_depth;
        let mut b = Builder { layers: Vec::new() };

        // Backbone. The stem carries the configurable stride; every later
        // stage halves the resolution once.
        let stem = b.cba("stem", INPUT, ch[0], 3, config.stem_stride, Group::Backbone);
        let mut prev = stem;
        let mut stages = Vec::new();
        for (i, &c) in ch.iter().enumerate().skip(1) {
            let down = b.cba(&format!("down{}", i + 1), &prev, c, 3, 2, Group::Backbone);
            prev = b.csp(&format!("c{}", i + 1), &down, c, d, CSP_EXPANSION, Group::Backbone);
            stages.push(prev.clone());
        }
        let (c2, c3, c4, c5) = (&stages[0], &stages[1], &stages[2], &stages[3]);
        let sppf = b.add(
            "sppf",
            LayerOp::Sppf(SppfSpec {
                cin: ch[4],
                cout: ch[4],
            }),
            &[c5],
            Group::Backbone,
        );

        // Top-down path; with P2 enabled it reaches down to C2.
        let td4 = b.fuse_up("td4", &sppf, c4, ch[3], d);
        let td3 = b.fuse_up("td3", &td4, c3, ch[2], d);
        let mut sources: BTreeMap<Head, String> = BTreeMap::new();
        let p3_source = if config.enable_p2_head {
            let td2 = b.fuse_up("td2", &td3, c2, ch[1], d);
            let mut p2 = td2.clone();
            for i in 0..config.ca_blocks_on_p2 {
                p2 = b.add(
                    &format!("ca{i}"),
                    LayerOp::CoordAtt(CaSpec::new(ch[1], config.ca_reduction)),
                    &[&p2],
                    Group::Attention,
                );
            }
            sources.insert(Head::P2, p2);
            b.fuse_down("pan3", &td2, &td3, ch[2], d)
        } else {
            td3
        };
        sources.insert(Head::P3, p3_source.clone());
        let pan4 = b.fuse_down("pan4", &p3_source, &td4, ch[3], d);
        let pan5 = b.fuse_down("pan5", &pan4, &sppf, ch[4], d);
        sources.insert(Head::P4, pan4);
        sources.insert(Head::P5, pan5);

        let mut outputs = BTreeMap::new();
        for (head, src) in &sources {
            let c = b.channels(src);
            let hc = head_hidden(c);
            let name = format!("head_{}", head.tag().to_ascii_lowercase());
            let op = LayerOp::Detect {
                stem: ConvBnActSpec::new(c, hc, 3, 1),
                pred: ConvSpec {
                    cin: hc,
                    cout: BOX_OBJ_CHANNELS + config.num_classes,
                    k: 1,
                },
            };
            outputs.insert(*head, b.add(&name, op, &[src], Group::Head(*head)));
        }

        let mut store = ParamStore::new();
        for layer in &b.layers {
            init_layer(&mut store, layer, seed);
        }
        let full = ModelConfig {
            active_heads: config.available_heads(),
            pan_mode: PanMode::Full,
            ..config.clone()
        };
        let graph = Self {
            config: full,
            seed,
            layers: b.layers,
            outputs,
            store,
        };
        graph.trim(&config.active_heads, config.pan_mode)
    }

    /// Removes heads not in `keep_heads` and the PAN layers `pan_mode` drops,
    /// along with any layer nothing surviving depends on. Surviving layers
    /// keep their parameters unchanged.
    pub fn trim(&self, keep_heads: &BTreeSet<Head>, pan_mode: PanMode) -> Result<Self> {
        check_heads_and_pan(keep_heads, pan_mode)?;
        if let Some(h) = keep_heads.iter().find(|h| !self.outputs.contains_key(h)) {
            return Err(Error::config(format!(
                "cannot keep head {h}: the model does not have it"
            )));
        }
        let pan_kept = |l: &Layer| match pan_mode {
            PanMode::Full => true,
            PanMode::Partial => l.name.starts_with("pan3"),
            PanMode::Identity => false,
        };
        let mut roots: Vec<&str> = keep_heads.iter().map(|h| self.outputs[h].as_str()).collect();
        roots.extend(
            self.layers
                .iter()
                .filter(|l| l.group == Group::Pan && pan_kept(l))
                .map(|l| l.name.as_str()),
        );

        let by_name: HashMap<&str, &Layer> = self.layers.iter().map(|l| (l.name.as_str(), l)).collect();
        let mut keep: BTreeSet<&str> = BTreeSet::new();
        let mut stack = roots;
        while let Some(name) = stack.pop() {
            if name == INPUT || !keep.insert(name) {
                continue;
            }
            stack.extend(by_name[name].inputs.iter().map(String::as_str));
        }
        if let Some(l) = self
            .layers
            .iter()
            .find(|l| l.group == Group::Pan && keep.contains(l.name.as_str()) && !pan_kept(l))
        {
            return Err(Error::config(format!(
                "pan_mode = {pan_mode} drops layer {} but an active head depends on it",
                l.name
            )));
        }

        let layers: Vec<Layer> = self
            .layers
            .iter()
            .filter(|l| keep.contains(l.name.as_str()))
            .cloned()
            .collect();
        let mut store = self.store.clone();
        store.retain(|p| keep.contains(layer_of(p)));
        let outputs = self
            .outputs
            .iter()
            .filter(|(h, _)| keep_heads.contains(h))
            .map(|(h, n)| (*h, n.clone()))
            .collect();
        Ok(Self {
            config: ModelConfig {
                active_heads: keep_heads.clone(),
                pan_mode,
                ..self.config.clone()
            },
            seed: self.seed,
            layers,
            outputs,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn heads(&self) -> BTreeSet<Head> {
        self.outputs.keys().copied().collect()
    }

    pub fn head_layer(&self, head: Head) -> Option<&str> {
        self.outputs.get(&head).map(String::as_str)
    }

    /// `(head, stride)` for every active head.
    pub fn head_strides(&self) -> Vec<(Head, usize)> {
        self.outputs
            .keys()
            .map(|h| (*h, h.stride(self.config.stem_stride)))
            .collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Group of the layer owning a parameter.
    pub fn group_of_param(&self, param: &str) -> Option<Group> {
        self.layer(layer_of(param)).map(|l| l.group)
    }

    /// Number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count_scalars()
    }

    /// Floating-point operations of one forward pass on `[N,1,H,W]`.
    /// Convolutions count two per multiply-accumulate plus the bias adds,
    /// batch norm and activations two per element, residual adds and gate
    /// products one per element, upsampling and concatenation nothing.
    pub fn count_flops(&self, input_shape: [usize; 4]) -> Result<u64> {
        let [n, _, h, w] = input_shape;
        self.check_input_hw(h, w)?;
        let mut total = 0u64;
        for l in &self.layers {
            let in_stride = match l.inputs[0].as_str() {
                INPUT => 1,
                src => self.layer(src).expect("inputs precede").stride,
            };
            total += l.flops(n, h / in_stride, w / in_stride)?;
        }
        Ok(total)
    }

    fn check_input_hw(&self, h: usize, w: usize) -> Result<()> {
        let s = self.config.max_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "input size {h}x{w} must be a positive multiple of {s} (deepest stride with stem_stride {})",
                self.config.stem_stride
            )));
        }
        Ok(())
    }

    /// Raw head outputs `[N, 5+classes, H/s, W/s]` in inference mode.
    pub fn forward(&self, images: &Tensor<f32>) -> Result<BTreeMap<Head, Tensor<f32>>> {
        self.forward_with(&Ctx::eval(&self.store), images)
    }

    /// Forward through an explicit context (training, gradient checks).
    pub fn forward_with<T: Float>(&self, ctx: &Ctx<T>, images: &Tensor<T>) -> Result<BTreeMap<Head, Tensor<T>>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 {
            return Err(Error::invalid(format!("expected single-channel images, got C={c}")));
        }
        self.check_input_hw(h, w)?;
        let mut values: HashMap<&str, Tensor<T>> = HashMap::new();
        // drop each activation after its last consumer
        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            for src in &l.inputs {
                last_use.insert(src.as_str(), i);
            }
        }
        let head_layers: BTreeSet<&str> = self.outputs.values().map(String::as_str).collect();
        for (i, l) in self.layers.iter().enumerate() {
            let inputs: Vec<Tensor<T>> = l
                .inputs
                .iter()
                .map(|s| {
                    if s == INPUT {
                        images.clone()
                    } else {
                        values[s.as_str()].clone()
                    }
                })
                .collect();
            let y = l.forward(ctx, &inputs)?;
            for src in &l.inputs {
                if last_use.get(src.as_str()) == Some(&i) && !head_layers.contains(src.as_str()) {
                    values.remove(src.as_str());
                }
            }
            values.insert(&l.name, y);
        }
        Ok(self
            .outputs
            .iter()
            .map(|(h, n)| (*h, values[n.as_str()].clone()))
            .collect())
    }

    /// Runs the forward pass layer by layer and returns the first layer whose
    /// parameters or output contain a non-finite value.
    pub fn first_non_finite_layer<T: Float>(&self, ctx: &Ctx<T>, images: &Tensor<T>) -> Result<Option<String>> {
        if !images.is_finite() {
            return Ok(Some(INPUT.to_string()));
        }
        let mut values: HashMap<&str, Tensor<T>> = HashMap::new();
        for l in &self.layers {
            let bad_param = l.params().params.iter().any(|spec| {
                self.store
                    .get(&spec.name)
                    .is_some_and(|p| p.data.iter().any(|v| !v.is_finite()))
            });
            if bad_param {
                return Ok(Some(l.name.clone()));
            }
            let inputs: Vec<Tensor<T>> = l
                .inputs
                .iter()
                .map(|s| {
                    if s == INPUT {
                        images.clone()
                    } else {
                        values[s.as_str()].clone()
                    }
                })
                .collect();
            let y = l.forward(ctx, &inputs)?;
            if !y.is_finite() {
                return Ok(Some(l.name.clone()));
            }
            values.insert(&l.name, y);
        }
        Ok(None)
    }

    /// Re-draws the parameters of every layer in `groups` from `seed` and
    /// resets their running statistics.
    pub fn reinit_groups(&mut self, groups: &[Group], seed: u64) {
        let layers: Vec<Layer> = self
            .layers
            .iter()
            .filter(|l| groups.contains(&l.group))
            .cloned()
            .collect();
        for l in &layers {
            init_layer(&mut self.store, l, seed);
        }
    }

    /// Replaces the parameter store, e.g. after loading a checkpoint. Every
    /// parameter the graph needs must be present with the right shape.
    pub fn set_store(&mut self, store: ParamStore) -> Result<()> {
        let mut missing = Vec::new();
        for l in &self.layers {
            let p = l.params();
            for spec in &p.params {
                match store.get(&spec.name) {
                    None => missing.push(spec.name.clone()),
                    Some(found) if found.shape != spec.shape => {
                        return Err(Error::CorruptCheckpoint(format!(
                            "{} has shape {:?}, the model expects {:?}",
                            spec.name, found.shape, spec.shape
                        )))
                    }
                    Some(_) => {}
                }
            }
            for (name, c) in &p.batchnorms {
                match store.stats(name) {
                    None => missing.push(name.clone()),
                    Some(s) if s.mean.len() != *c => {
                        return Err(Error::CorruptCheckpoint(format!(
                            "{name} running stats have the wrong channel count"
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingParams(missing));
        }
        let mut store = store;
        let needed: BTreeSet<String> = self.layers.iter().map(|l| l.name.clone()).collect();
        store.retain(|p| needed.contains(layer_of(p)));
        self.store = store;
        Ok(())
    }
}

fn init_layer(store: &mut ParamStore, layer: &Layer, seed: u64) {
    let p = layer.params();
    for spec in &p.params {
        store.init(spec, seed);
    }
    for (name, c) in &p.batchnorms {
        store.set_stats(name.clone(), RunningStats::new(*c));
    }
    if let LayerOp::Detect { .. } = layer.op {
        let bias = store
            .get_mut(&format!("{}.pred.bias", layer.name))
            .expect("head bias registered");
        bias.data[..BOX_OBJ_CHANNELS].fill(0.0);
        bias.data[4] = OBJECTNESS_PRIOR_BIAS;
    }
}
