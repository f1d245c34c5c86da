//! Multi-task U-Net: a segmentation decoder and a classification branch
//! sharing one encoder.

mod io;

pub use io::{load_model, save_model};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NormMode, RunningStats, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrganClass {
    Brain = 0,
    Abdomen = 1,
    Femur = 2,
}

impl OrganClass {
    pub const ALL: [OrganClass; 3] = [OrganClass::Brain, OrganClass::Abdomen, OrganClass::Femur];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("organ class index {i} outside 0..3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            OrganClass::Brain => "brain",
            OrganClass::Abdomen => "abdomen",
            OrganClass::Femur => "femur",
        }
    }

    /// Brain and abdomen are measured by ellipse circumference.
    pub fn is_elliptical(self) -> bool {
        self != OrganClass::Femur
    }
}

impl fmt::Display for OrganClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrganClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "brain" | "head" => Ok(OrganClass::Brain),
            "abdomen" => Ok(OrganClass::Abdomen),
            "femur" => Ok(OrganClass::Femur),
            other => Err(Error::invalid(format!("unknown organ {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of 2×2 downsampling steps.
    pub depth: usize,
    /// Channels at level 0; doubled at every level below.
    pub base_channels: usize,
    /// Side of the square input image.
    pub input_size: usize,
    pub num_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            input_size: 64,
            num_classes: OrganClass::COUNT,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.depth > 16 {
            return Err(Error::invalid(format!("depth {} outside 1..=16", self.depth)));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("base_channels must be ≥ 1"));
        }
        if self.num_classes != OrganClass::COUNT {
            return Err(Error::invalid(format!(
                "num_classes must be {}, got {}",
                OrganClass::COUNT,
                self.num_classes
            )));
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::invalid(format!(
                "input_size {} not divisible by 2^depth = {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_side(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Width of the flattened bottleneck fed to the classifier.
    pub fn bottleneck_features(&self) -> usize {
        let side = self.bottleneck_side();
        self.channels(self.depth) * side * side
    }
}

/// Where a parameter tensor sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Bottleneck,
    Decoder,
    SegHead,
    ClassHead,
}

#[derive(Debug, Clone, Copy)]
struct ConvBnRelu {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct UpLevel {
    up: ConvBnRelu,
    blocks: [ConvBnRelu; 2],
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[ConvBnRelu; 2]>,
    bottleneck: [ConvBnRelu; 2],
    /// Ordered deepest level first.
    decoder: Vec<UpLevel>,
    seg_head: (usize, usize),
    class_head: (usize, usize),
}

/// Parameter shapes, names and groups in declaration order, plus the
/// layout indexing into them.
struct Blueprint {
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<Option<usize>>,
    init_one: Vec<bool>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    bn_channels: Vec<usize>,
    layout: Layout,
}

impl Blueprint {
    fn new(cfg: &UNetConfig) -> Self {
        let mut bp = Blueprint {
            shapes: Vec::new(),
            fan_in: Vec::new(),
            init_one: Vec::new(),
            names: Vec::new(),
            groups: Vec::new(),
            bn_channels: Vec::new(),
            layout: Layout {
                encoder: Vec::new(),
                bottleneck: [dummy_block(); 2],
                decoder: Vec::new(),
                seg_head: (0, 0),
                class_head: (0, 0),
            },
        };
        for level in 0..cfg.depth {
            let cin = if level == 0 { 1 } else { cfg.channels(level - 1) };
            let c = cfg.channels(level);
            let b0 = bp.block(&format!("enc{level}.0"), cin, c, 3, ParamGroup::Encoder);
            let b1 = bp.block(&format!("enc{level}.1"), c, c, 3, ParamGroup::Encoder);
            bp.layout.encoder.push([b0, b1]);
        }
        let (cin, c) = (cfg.channels(cfg.depth - 1), cfg.channels(cfg.depth));
        let b0 = bp.block("bottleneck.0", cin, c, 3, ParamGroup::Bottleneck);
        let b1 = bp.block("bottleneck.1", c, c, 3, ParamGroup::Bottleneck);
        bp.layout.bottleneck = [b0, b1];
        for level in (0..cfg.depth).rev() {
            let c = cfg.channels(level);
            let up = bp.block(
                &format!("dec{level}.up"),
                cfg.channels(level + 1),
                c,
                3,
                ParamGroup::Decoder,
            );
            let b0 = bp.block(&format!("dec{level}.0"), 2 * c, c, 3, ParamGroup::Decoder);
            let b1 = bp.block(&format!("dec{level}.1"), c, c, 3, ParamGroup::Decoder);
            bp.layout.decoder.push(UpLevel { up, blocks: [b0, b1] });
        }
        let c0 = cfg.channels(0);
        let w = bp.tensor(
            "seg_head.weight",
            vec![1, c0, 1, 1],
            Some(c0),
            false,
            ParamGroup::SegHead,
        );
        let b = bp.tensor("seg_head.bias", vec![1], None, false, ParamGroup::SegHead);
        bp.layout.seg_head = (w, b);
        let f = cfg.bottleneck_features();
        let w = bp.tensor(
            "classifier.weight",
            vec![f, cfg.num_classes],
            Some(f),
            false,
            ParamGroup::ClassHead,
        );
        let b = bp.tensor(
            "classifier.bias",
            vec![cfg.num_classes],
            None,
            false,
            ParamGroup::ClassHead,
        );
        bp.layout.class_head = (w, b);
        bp
    }

    fn tensor(&mut self, name: &str, shape: Vec<usize>, fan_in: Option<usize>, one: bool, group: ParamGroup) -> usize {
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.init_one.push(one);
        self.names.push(name.to_string());
        self.groups.push(group);
        self.shapes.len() - 1
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, k: usize, group: ParamGroup) -> ConvBnRelu {
        let fan = cin * k * k;
        let weight = self.tensor(
            &format!("{name}.conv.weight"),
            vec![cout, cin, k, k],
            Some(fan),
            false,
            group,
        );
        let bias = self.tensor(&format!("{name}.conv.bias"), vec![cout], None, false, group);
        let gamma = self.tensor(&format!("{name}.bn.gamma"), vec![cout], None, true, group);
        let beta = self.tensor(&format!("{name}.bn.beta"), vec![cout], None, false, group);
        self.bn_channels.push(cout);
        ConvBnRelu {
            weight,
            bias,
            gamma,
            beta,
            stats: self.bn_channels.len() - 1,
        }
    }
}

fn dummy_block() -> ConvBnRelu {
    ConvBnRelu {
        weight: 0,
        bias: 0,
        gamma: 0,
        beta: 0,
        stats: 0,
    }
}

/// Graph handles for both heads.
#[derive(Debug, Clone, Copy)]
pub struct MultiTaskOutput {
    /// `[N,1,H,W]` pre-sigmoid mask logits.
    pub seg_logits: Var,
    /// `[N,3]` class logits.
    pub class_logits: Var,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub output: MultiTaskOutput,
    /// One handle per parameter tensor, in declaration order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: UNetConfig,
    params: Vec<Tensor>,
    stats: Vec<RunningStats>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    layout: Layout,
}

// Names, groups and layout are functions of the config.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.stats == other.stats
    }
}

impl Model {
    /// Builds a model with He-uniform conv/FC weights drawn from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bp = Blueprint::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = bp
            .shapes
            .iter()
            .zip(&bp.fan_in)
            .zip(&bp.init_one)
            .map(|((shape, fan), &one)| {
                let n: usize = shape.iter().product();
                let data = match fan {
                    Some(f) => {
                        let bound = (6.0 / *f as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    None => vec![if one { 1.0 } else { 0.0 }; n],
                };
                Tensor::new(shape, data).expect("blueprint shapes are valid")
            })
            .collect();
        Ok(Self::assemble(config, bp, params))
    }

    fn assemble(config: UNetConfig, bp: Blueprint, params: Vec<Tensor>) -> Self {
        Model {
            config,
            params,
            stats: bp.bn_channels.iter().map(|&c| RunningStats::new(c)).collect(),
            names: bp.names,
            groups: bp.groups,
            layout: bp.layout,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Adds parameters to `graph` and runs both heads. Train mode uses batch
    /// statistics and updates the running statistics in place.
    pub fn forward(&mut self, graph: &mut Graph, images: Var, mode: NormMode) -> Result<ForwardPass> {
        let (pass, updates) = self.run(graph, images, mode, true)?;
        for (slot, upd) in self.stats.iter_mut().zip(updates) {
            if let Some(u) = upd {
                *slot = u;
            }
        }
        Ok(pass)
    }

    /// Eval-mode inference without gradient tracking; returns
    /// `(seg_logits [N,1,H,W], class_logits [N,3])`.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone().with_requires_grad(false));
        let (pass, _) = self.run(&mut g, x, NormMode::Eval, false)?;
        Ok((
            g.value(pass.output.seg_logits).clone(),
            g.value(pass.output.class_logits).clone(),
        ))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            _ => Err(Error::shape(format!(
                "model expects [N,1,{s},{s}] images, got {shape:?}"
            ))),
        }
    }

    fn run(
        &self,
        g: &mut Graph,
        images: Var,
        mode: NormMode,
        track: bool,
    ) -> Result<(ForwardPass, Vec<Option<RunningStats>>)> {
        self.check_input(g.shape(images))?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|t| {
                if track {
                    g.param(t.clone())
                } else {
                    g.leaf(t.clone().with_requires_grad(false))
                }
            })
            .collect();
        let mut updates = vec![None; self.stats.len()];
        let layout = &self.layout;
        let mut block = |g: &mut Graph, x: Var, b: &ConvBnRelu| -> Result<Var> {
            let y = g.conv2d(x, params[b.weight], params[b.bias], 1, 1)?;
            let (y, upd) = g.batchnorm2d(y, params[b.gamma], params[b.beta], &self.stats[b.stats], mode)?;
            updates[b.stats] = upd;
            Ok(g.relu(y))
        };

        let mut x = images;
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in &layout.encoder {
            x = block(g, x, &level[0])?;
            x = block(g, x, &level[1])?;
            skips.push(x);
            x = g.maxpool2x2(x)?;
        }
        x = block(g, x, &layout.bottleneck[0])?;
        x = block(g, x, &layout.bottleneck[1])?;

        let flat = g.flatten(x)?;
        let (fw, fb) = layout.class_head;
        let logits = g.matmul(flat, params[fw])?;
        let class_logits = g.add_row_bias(logits, params[fb])?;

        for up in &layout.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            x = g.upsample2x_nearest(x)?;
            x = block(g, x, &up.up)?;
            x = g.concat_channels(&[skip, x])?;
            x = block(g, x, &up.blocks[0])?;
            x = block(g, x, &up.blocks[1])?;
        }
        let (sw, sb) = layout.seg_head;
        let seg_logits = g.conv2d(x, params[sw], params[sb], 0, 1)?;

        Ok((
            ForwardPass {
                output: MultiTaskOutput {
                    seg_logits,
                    class_logits,
                },
                params,
            },
            updates,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let bad = |f: fn(&mut UNetConfig)| {
            let mut c = UNetConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.depth = 0));
        assert!(bad(|c| c.base_channels = 0));
        assert!(bad(|c| c.num_classes = 2));
        assert!(bad(|c| c.input_size = 60));
    }

    #[test]
    fn organ_round_trip() {
        for o in OrganClass::ALL {
            assert_eq!(OrganClass::from_index(o.index()).unwrap(), o);
            assert_eq!(o.name().parse::<OrganClass>().unwrap(), o);
        }
        assert!(OrganClass::from_index(3).is_err());
        assert!("liver".parse::<OrganClass>().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 2,
            input_size: 8,
            num_classes: 3,
        };
        let a = Model::new(cfg, 5).unwrap();
        let b = Model::new(cfg, 5).unwrap();
        let c = Model::new(cfg, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn smallest_model_shapes() {
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 1,
            input_size: 2,
            num_classes: 3,
        };
        let m = Model::new(cfg, 0).unwrap();
        let (seg, cls) = m.predict(&Tensor::full(&[1, 1, 2, 2], 0.5)).unwrap();
        assert_eq!(seg.shape(), &[1, 1, 2, 2]);
        assert_eq!(cls.shape(), &[1, 3]);
    }

    #[test]
    fn rejects_wrong_input_size() {
        let m = Model::new(UNetConfig::default(), 0).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 1, 32, 32])),
            Err(Error::Shape(_))
        ));
    }
}
