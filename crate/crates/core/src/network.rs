//! The multi-resolution segmentation network.
//!
//! Layout, top to bottom:
//!
//! ```text
//! Stem           Conv(3,2,1) Norm ReLU, Bottleneck x2          -> 1/2 res
//! Transition 1   branch 1: Conv(3,1,1); branch 2: Conv(3,2,1)  -> 1/2, 1/4
//! Stage 1        per branch Basic x3, fusion
//! Transition 2   Conv(3,1,1) per branch; new branch Conv(3,2,1) -> 1/2, 1/4, 1/8
//! Stage 2        2 x (per branch Basic x3, fusion)
//! Concatenation  upsample branches 2.. to 1/2 res, concat
//! Regression     Conv(1,1,0) Norm ReLU Conv(1,1,0) softmax, upsample to input
//! ```
//!
//! Convolutions carry no bias except in the regression head. Every
//! transition convolution is followed by Norm and ReLU.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{ConfigError, ConfigMap};
use crate::halfprec::OpClass;
use crate::tensor::{conv_output_extent, Shape, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input too small: {0}")]
    InputTooSmall(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ConfigError> for NetworkError {
    fn from(e: ConfigError) -> Self {
        NetworkError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Channels of the first strided stem convolution.
    pub stem_conv_channels: usize,
    /// Middle width of the stem bottlenecks; their output is
    /// `bottleneck_mid_channels * bottleneck_expansion`.
    pub bottleneck_mid_channels: usize,
    pub bottleneck_expansion: usize,
    pub stem_blocks: usize,
    /// Channels per resolution branch, highest resolution first.
    pub branch_channels: Vec<usize>,
    /// Exchange modules per stage. Stage `k` (1-based) runs `k + 1` branches.
    pub stage_modules: Vec<usize>,
    pub blocks_per_module: usize,
    /// Width of the first regression convolution; defaults to the
    /// concatenated channel count.
    pub head_channels: Option<usize>,
    pub norm_eps: f32,
    /// Accepted for completeness. Instance norm keeps no running
    /// statistics, so this has no effect.
    pub norm_momentum: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 55,
            in_channels: 1,
            stem_conv_channels: 32,
            bottleneck_mid_channels: 16,
            bottleneck_expansion: 4,
            stem_blocks: 2,
            branch_channels: vec![16, 32, 64],
            stage_modules: vec![1, 2],
            blocks_per_module: 3,
            head_channels: None,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

pub const NETWORK_KEYS: &[&str] = &[
    "num_classes",
    "in_channels",
    "stem_conv_channels",
    "bottleneck_mid_channels",
    "bottleneck_expansion",
    "stem_blocks",
    "branch_channels",
    "stage_modules",
    "blocks_per_module",
    "head_channels",
    "norm_eps",
    "norm_momentum",
];

impl NetworkConfig {
    /// 12/24/48 branch widths.
    pub fn small() -> Self {
        NetworkConfig {
            branch_channels: vec![12, 24, 48],
            ..Default::default()
        }
    }

    /// 24/48/96 branch widths.
    pub fn large() -> Self {
        NetworkConfig {
            branch_channels: vec![24, 48, 96],
            ..Default::default()
        }
    }

    /// A narrow network for desk-scale experiments.
    pub fn tiny(branch: [usize; 3], num_classes: usize) -> Self {
        NetworkConfig {
            num_classes,
            stem_conv_channels: 2 * branch[0],
            bottleneck_mid_channels: branch[0],
            branch_channels: branch.to_vec(),
            ..Default::default()
        }
    }

    pub fn stem_out_channels(&self) -> usize {
        self.bottleneck_mid_channels * self.bottleneck_expansion
    }

    pub fn concat_channels(&self) -> usize {
        self.branch_channels.iter().sum()
    }

    pub fn num_branches(&self) -> usize {
        self.stage_modules.len() + 1
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.stage_modules.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.branch_channels.len() != self.stage_modules.len() + 1 {
            return bad(format!(
                "{} stages need {} branch widths, got {}",
                self.stage_modules.len(),
                self.stage_modules.len() + 1,
                self.branch_channels.len()
            ));
        }
        let counts = [
            ("in_channels", self.in_channels),
            ("stem_conv_channels", self.stem_conv_channels),
            ("bottleneck_mid_channels", self.bottleneck_mid_channels),
            ("bottleneck_expansion", self.bottleneck_expansion),
            ("blocks_per_module", self.blocks_per_module),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(format!("{k} must be at least 1"));
            }
        }
        if self.branch_channels.contains(&0) {
            return bad("branch widths must be at least 1".into());
        }
        if self.stage_modules.contains(&0) {
            return bad("every stage needs at least one module".into());
        }
        if self.head_channels == Some(0) {
            return bad("head_channels must be at least 1".into());
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps {} must be positive", self.norm_eps));
        }
        Ok(())
    }

    /// Smallest input extent that keeps the lowest-resolution branch at one
    /// voxel or more under a natural reading of "1/2^b resolution".
    pub fn min_extent(&self) -> usize {
        1 << self.num_branches()
    }

    pub fn to_config_map(&self) -> ConfigMap {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = ConfigMap::new();
        m.set("num_classes", self.num_classes.to_string());
        m.set("in_channels", self.in_channels.to_string());
        m.set("stem_conv_channels", self.stem_conv_channels.to_string());
        m.set("bottleneck_mid_channels", self.bottleneck_mid_channels.to_string());
        m.set("bottleneck_expansion", self.bottleneck_expansion.to_string());
        m.set("stem_blocks", self.stem_blocks.to_string());
        m.set("branch_channels", list(&self.branch_channels));
        m.set("stage_modules", list(&self.stage_modules));
        m.set("blocks_per_module", self.blocks_per_module.to_string());
        if let Some(h) = self.head_channels {
            m.set("head_channels", h.to_string());
        }
        m.set("norm_eps", format!("{:e}", self.norm_eps));
        m.set("norm_momentum", format!("{:e}", self.norm_momentum));
        m
    }

    /// Read network keys from a config map, defaulting the rest.
    pub fn from_config_map(m: &ConfigMap) -> Result<Self, NetworkError> {
        let d = NetworkConfig::default();
        let cfg = NetworkConfig {
            num_classes: m.get_or("num_classes", d.num_classes)?,
            in_channels: m.get_or("in_channels", d.in_channels)?,
            stem_conv_channels: m.get_or("stem_conv_channels", d.stem_conv_channels)?,
            bottleneck_mid_channels: m.get_or("bottleneck_mid_channels", d.bottleneck_mid_channels)?,
            bottleneck_expansion: m.get_or("bottleneck_expansion", d.bottleneck_expansion)?,
            stem_blocks: m.get_or("stem_blocks", d.stem_blocks)?,
            branch_channels: m.get_list("branch_channels")?.unwrap_or(d.branch_channels),
            stage_modules: m.get_list("stage_modules")?.unwrap_or(d.stage_modules),
            blocks_per_module: m.get_or("blocks_per_module", d.blocks_per_module)?,
            head_channels: m.get("head_channels")?,
            norm_eps: m.get_or("norm_eps", d.norm_eps)?,
            norm_momentum: m.get_or("norm_momentum", d.norm_momentum)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Residual block flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Conv(3,1,1) Norm ReLU Conv(3,1,1) Norm, plus residual, then ReLU.
    Basic,
    /// Conv(1,1,0) Norm ReLU Conv(3,1,1) Norm ReLU Conv(1,1,0) Norm, plus
    /// residual, then ReLU.
    Bottleneck,
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Convolution with optional bias and optional instance norm.
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
    stride: usize,
    pad: usize,
    desc: String,
}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<ConvUnit>,
    shortcut: Option<ConvUnit>,
}

#[derive(Debug, Clone)]
struct TransitionPath {
    source: usize,
    conv: ConvUnit,
}

#[derive(Debug, Clone)]
enum FusePath {
    Identity,
    Down(Vec<ConvUnit>),
    Up(ConvUnit),
}

#[derive(Debug, Clone)]
struct ExchangeModule {
    branches: Vec<Vec<Block>>,
    /// `fusion[target][source]`
    fusion: Vec<Vec<FusePath>>,
}

#[derive(Debug, Clone)]
struct Stage {
    transition: Vec<TransitionPath>,
    modules: Vec<ExchangeModule>,
}

#[derive(Debug, Clone)]
struct Architecture {
    stem_conv: ConvUnit,
    stem_blocks: Vec<Block>,
    stages: Vec<Stage>,
    head_hidden: ConvUnit,
    head_out: ConvUnit,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, norm: bool) -> ConvUnit {
        let fan_in = (cin * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let shape: Shape = [cout, cin, k, k, k];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        let weight = self.push(format!("{name}.weight"), Tensor::from_vec(shape, data).unwrap());
        let bias = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1, 1])));
        let norm = norm.then(|| {
            let g = self.push(format!("{name}.norm.gamma"), Tensor::full([cout, 1, 1, 1, 1], 1.0));
            let b = self.push(format!("{name}.norm.beta"), Tensor::zeros([cout, 1, 1, 1, 1]));
            (g, b)
        });
        ConvUnit {
            weight,
            bias,
            norm,
            stride,
            pad,
            desc: format!("Conv({k}, {stride}, {pad}) {cin}->{cout}{}", if norm.is_some() { " | Norm" } else { "" }),
        }
    }

    fn block(&mut self, name: &str, kind: BlockKind, cin: usize, mid: usize, cout: usize) -> Block {
        let convs = match kind {
            BlockKind::Basic => vec![
                self.conv(&format!("{name}.conv1"), cin, mid, 3, 1, 1, false, true),
                self.conv(&format!("{name}.conv2"), mid, cout, 3, 1, 1, false, true),
            ],
            BlockKind::Bottleneck => vec![
                self.conv(&format!("{name}.conv1"), cin, mid, 1, 1, 0, false, true),
                self.conv(&format!("{name}.conv2"), mid, mid, 3, 1, 1, false, true),
                self.conv(&format!("{name}.conv3"), mid, cout, 1, 1, 0, false, true),
            ],
        };
        let shortcut = (cin != cout).then(|| self.conv(&format!("{name}.shortcut"), cin, cout, 1, 1, 0, false, true));
        Block { convs, shortcut }
    }
}

/// Instantiated network: config, ordered parameters, and the block graph.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
    arch: Architecture,
}

/// One row of the layer listing.
#[derive(Debug, Clone, PartialEq)]
pub struct ListingRow {
    pub layer: String,
    /// Spatial dims `(D, H, W)` of every live branch after the layer.
    pub dims: Vec<[usize; 3]>,
    pub channels: Vec<usize>,
    pub ops: String,
    pub params: usize,
}

/// Per-layer listing of a network applied to a given input size.
#[derive(Debug, Clone, PartialEq)]
pub struct Listing {
    pub rows: Vec<ListingRow>,
    pub total_params: usize,
}

impl fmt::Display for Listing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:<40} {:<14} {:>10}  ops", "layer", "output dims", "channels", "params")?;
        for row in &self.rows {
            let dims = row
                .dims
                .iter()
                .map(|d| format!("{}x{}x{}", d[0], d[1], d[2]))
                .collect::<Vec<_>>()
                .join(" ");
            let ch = row.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("/");
            writeln!(f, "{:<16} {:<40} {:<14} {:>10}  {}", row.layer, dims, ch, row.params, row.ops)?;
        }
        write!(
            f,
            "total_params {} (~{:.1}M)",
            self.total_params,
            self.total_params as f64 / 1e6
        )
    }
}

fn halve(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|e| conv_output_extent(e, 3, 2, 1).unwrap_or(0))
}

impl Network {
    /// Build and initialize: Kaiming fan-in normal convolution weights,
    /// unit norm scales, zero norm shifts and biases.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let cfg = config.clone();
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let stem_conv = b.conv("stem.conv", cfg.in_channels, cfg.stem_conv_channels, 3, 2, 1, false, true);
        let stem_out = cfg.stem_out_channels();
        let mut stem_blocks = Vec::new();
        let mut c = cfg.stem_conv_channels;
        for i in 0..cfg.stem_blocks {
            stem_blocks.push(b.block(&format!("stem.block{i}"), BlockKind::Bottleneck, c, cfg.bottleneck_mid_channels, stem_out));
            c = stem_out;
        }

        let mut prev: Vec<usize> = vec![c];
        let mut stages = Vec::new();
        for (s, &modules) in cfg.stage_modules.iter().enumerate() {
            let nb = s + 2;
            let widths = &cfg.branch_channels[..nb];
            let mut transition = Vec::new();
            for (i, &w) in widths.iter().enumerate() {
                let (source, stride) = if i < prev.len() { (i, 1) } else { (prev.len() - 1, 2) };
                let name = format!("transition{}.branch{}", s + 1, i + 1);
                let conv = b.conv(&name, prev[source], w, 3, stride, 1, false, true);
                transition.push(TransitionPath { source, conv });
            }
            let mut mods = Vec::new();
            for m in 0..modules {
                let mut branches = Vec::new();
                for (i, &w) in widths.iter().enumerate() {
                    let blocks = (0..cfg.blocks_per_module)
                        .map(|k| b.block(&format!("stage{}.module{m}.branch{}.block{k}", s + 1, i + 1), BlockKind::Basic, w, w, w))
                        .collect();
                    branches.push(blocks);
                }
                let mut fusion = Vec::new();
                for (t, &wt) in widths.iter().enumerate() {
                    let mut row = Vec::new();
                    for (src, &ws) in widths.iter().enumerate() {
                        let name = format!("stage{}.module{m}.fuse.to{}.from{}", s + 1, t + 1, src + 1);
                        let path = if src == t {
                            FusePath::Identity
                        } else if src < t {
                            let steps = t - src;
                            let convs = (0..steps)
                                .map(|k| {
                                    let cout = if k + 1 == steps { wt } else { ws };
                                    b.conv(&format!("{name}.down{k}"), ws, cout, 3, 2, 1, false, true)
                                })
                                .collect();
                            FusePath::Down(convs)
                        } else {
                            FusePath::Up(b.conv(&format!("{name}.up"), ws, wt, 1, 1, 0, false, true))
                        };
                        row.push(path);
                    }
                    fusion.push(row);
                }
                mods.push(ExchangeModule { branches, fusion });
            }
            stages.push(Stage {
                transition,
                modules: mods,
            });
            prev = widths.to_vec();
        }

        let concat = cfg.concat_channels();
        let hidden = cfg.head_channels.unwrap_or(concat);
        let head_hidden = b.conv("head.conv1", concat, hidden, 1, 1, 0, true, true);
        let head_out = b.conv("head.conv2", hidden, cfg.num_classes, 1, 1, 0, true, false);

        Ok(Network {
            config: cfg,
            params: b.params,
            arch: Architecture {
                stem_conv,
                stem_blocks,
                stages,
                head_hidden,
                head_out,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Replace all parameter values; shapes must match.
    pub fn set_param_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), NetworkError> {
        if tensors.len() != self.params.len() {
            return Err(NetworkError::Checkpoint(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        for (p, t) in self.params.iter().zip(&tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(NetworkError::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            p.tensor = t.with_requires_grad(false);
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Spatial dims of each branch for a given input, checking that the
    /// lowest-resolution branch is non-degenerate.
    pub fn branch_dims(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>, NetworkError> {
        let nb = self.config.num_branches();
        let min = self.config.min_extent();
        if let Some(&e) = input.iter().find(|&&e| e < min) {
            return Err(NetworkError::InputTooSmall(format!(
                "extent {e} in input {input:?} leaves branch {nb} (1/{} resolution) degenerate; every extent must be >= {min}",
                1 << nb
            )));
        }
        let mut dims = vec![halve(input)];
        for _ in 1..nb {
            let next = halve(*dims.last().unwrap());
            dims.push(next);
        }
        Ok(dims)
    }

    /// Wrap every parameter as a tape leaf.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.bind_values(tape, self.param_tensors(), trainable)
    }

    /// Wrap externally held parameter values (e.g. FP16 working copies).
    pub fn bind_values(&self, tape: &Tape, values: Vec<Tensor>, trainable: bool) -> Vec<Var> {
        values
            .into_iter()
            .map(|t| tape.leaf(t.with_requires_grad(trainable)))
            .collect()
    }

    /// Inference without gradient tracking in FP32.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let tape = Tape::default();
        let params = self.bind(&tape, false);
        let x = tape.constant(x.clone());
        Ok(self.forward_on(&tape, &params, &x)?.into_tensor())
    }

    /// Forward pass on a tape with bound parameters. Returns per-voxel class
    /// probabilities at the input resolution.
    pub fn forward_on(&self, tape: &Tape, params: &[Var], x: &Var) -> Result<Var, NetworkError> {
        self.forward_traced(tape, params, x, &mut |_, _| {})
    }

    /// As [`Network::forward_on`], reporting each layer's branch shapes.
    pub fn forward_traced(
        &self,
        tape: &Tape,
        params: &[Var],
        x: &Var,
        trace: &mut dyn FnMut(&str, &[Shape]),
    ) -> Result<Var, NetworkError> {
        if params.len() != self.params.len() {
            return Err(NetworkError::Config(format!(
                "{} bound parameters for {} network parameters",
                params.len(),
                self.params.len()
            )));
        }
        let shape = x.shape();
        if shape[1] != self.config.in_channels {
            return Err(TensorError::shape(
                "forward",
                format!("input has {} channels, network expects {}", shape[1], self.config.in_channels),
            )
            .into());
        }
        let input_dims = [shape[2], shape[3], shape[4]];
        let dims = self.branch_dims(input_dims)?;
        let a = &self.arch;

        let x = tape.cast(x, OpClass::Input);
        let mut h = self.conv_unit(tape, params, &a.stem_conv, &x)?;
        h = tape.relu(&h);
        for blk in &a.stem_blocks {
            h = self.block(tape, params, blk, &h)?;
        }
        trace("stem", &[h.shape()]);

        let mut branches = vec![h];
        for (s, stage) in a.stages.iter().enumerate() {
            let mut next = Vec::with_capacity(stage.transition.len());
            for path in &stage.transition {
                let y = self.conv_unit(tape, params, &path.conv, &branches[path.source])?;
                next.push(tape.relu(&y));
            }
            branches = next;
            trace(&format!("transition{}", s + 1), &shapes(&branches));
            for (m, module) in stage.modules.iter().enumerate() {
                for (b, blocks) in module.branches.iter().enumerate() {
                    for blk in blocks {
                        branches[b] = self.block(tape, params, blk, &branches[b])?;
                    }
                }
                trace(&format!("stage{}.{}", s + 1, m + 1), &shapes(&branches));
                branches = self.fuse(tape, params, &module.fusion, &branches, &dims)?;
                trace(&format!("fusion{}.{}", s + 1, m + 1), &shapes(&branches));
            }
        }

        let mut parts = vec![branches[0].clone()];
        for b in &branches[1..] {
            parts.push(tape.trilinear_resize(b, dims[0])?);
        }
        let refs: Vec<&Var> = parts.iter().collect();
        let cat = tape.concat_channels(&refs)?;
        trace("concat", &[cat.shape()]);

        let h = self.conv_unit(tape, params, &a.head_hidden, &cat)?;
        let h = tape.relu(&h);
        let logits = self.conv_unit(tape, params, &a.head_out, &h)?;
        let probs = tape.softmax_channels(&logits);
        let out = tape.trilinear_resize(&probs, input_dims)?;
        trace("regression", &[out.shape()]);
        Ok(out)
    }

    fn conv_unit(&self, tape: &Tape, params: &[Var], u: &ConvUnit, x: &Var) -> Result<Var, NetworkError> {
        let y = tape.conv3d(x, &params[u.weight], u.bias.map(|b| &params[b]), u.stride, u.pad)?;
        match u.norm {
            Some((g, b)) => Ok(tape.instance_norm(&y, &params[g], &params[b], self.config.norm_eps)?),
            None => Ok(y),
        }
    }

    fn block(&self, tape: &Tape, params: &[Var], blk: &Block, x: &Var) -> Result<Var, NetworkError> {
        let mut h = x.clone();
        let last = blk.convs.len() - 1;
        for (i, u) in blk.convs.iter().enumerate() {
            h = self.conv_unit(tape, params, u, &h)?;
            if i != last {
                h = tape.relu(&h);
            }
        }
        let residual = match &blk.shortcut {
            Some(u) => self.conv_unit(tape, params, u, x)?,
            None => x.clone(),
        };
        let sum = tape.add(&h, &residual)?;
        Ok(tape.relu(&sum))
    }

    fn fuse(
        &self,
        tape: &Tape,
        params: &[Var],
        fusion: &[Vec<FusePath>],
        branches: &[Var],
        dims: &[[usize; 3]],
    ) -> Result<Vec<Var>, NetworkError> {
        let mut out = Vec::with_capacity(fusion.len());
        for (t, row) in fusion.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for (s, path) in row.iter().enumerate() {
                let contrib = match path {
                    FusePath::Identity => branches[s].clone(),
                    FusePath::Down(convs) => {
                        let mut h = branches[s].clone();
                        for u in convs {
                            h = self.conv_unit(tape, params, u, &h)?;
                        }
                        h
                    }
                    FusePath::Up(u) => {
                        let h = self.conv_unit(tape, params, u, &branches[s])?;
                        tape.trilinear_resize(&h, dims[t])?
                    }
                };
                acc = Some(match acc {
                    None => contrib,
                    Some(a) => tape.add(&a, &contrib)?,
                });
            }
            out.push(tape.relu(&acc.expect("fusion row is non-empty")));
        }
        Ok(out)
    }

    /// Layer-by-layer listing for an input of spatial size `input` (D, H, W),
    /// computed from the architecture without running the network.
    pub fn listing(&self, input: [usize; 3]) -> Result<Listing, NetworkError> {
        let dims = self.branch_dims(input)?;
        let cfg = &self.config;
        let count = |units: &[&ConvUnit]| -> usize {
            units
                .iter()
                .map(|u| {
                    let mut n = self.params[u.weight].tensor.numel();
                    n += u.bias.map_or(0, |b| self.params[b].tensor.numel());
                    n += u.norm.map_or(0, |(g, b)| self.params[g].tensor.numel() + self.params[b].tensor.numel());
                    n
                })
                .sum()
        };
        let mut rows = Vec::new();
        let a = &self.arch;

        let mut units = vec![&a.stem_conv];
        for b in &a.stem_blocks {
            units.extend(block_units(b));
        }
        rows.push(ListingRow {
            layer: "Stem".into(),
            dims: vec![dims[0]],
            channels: vec![if cfg.stem_blocks > 0 { cfg.stem_out_channels() } else { cfg.stem_conv_channels }],
            ops: format!("{} | ReLU | Bottleneck x {}", a.stem_conv.desc, cfg.stem_blocks),
            params: count(&units),
        });

        for (s, stage) in a.stages.iter().enumerate() {
            let nb = stage.transition.len();
            let widths = cfg.branch_channels[..nb].to_vec();
            let live = dims[..nb].to_vec();
            let ops = stage
                .transition
                .iter()
                .enumerate()
                .map(|(i, p)| format!("{}: {} | ReLU", i + 1, p.conv.desc))
                .collect::<Vec<_>>()
                .join("; ");
            rows.push(ListingRow {
                layer: format!("Transition {}", s + 1),
                dims: live.clone(),
                channels: widths.clone(),
                ops,
                params: count(&stage.transition.iter().map(|p| &p.conv).collect::<Vec<_>>()),
            });
            for (m, module) in stage.modules.iter().enumerate() {
                let suffix = if stage.modules.len() > 1 {
                    format!("{}.{}", s + 1, m + 1)
                } else {
                    format!("{}", s + 1)
                };
                let mut units = Vec::new();
                for blocks in &module.branches {
                    for b in blocks {
                        units.extend(block_units(b));
                    }
                }
                rows.push(ListingRow {
                    layer: format!("Stage {suffix}"),
                    dims: live.clone(),
                    channels: widths.clone(),
                    ops: format!("per branch: Basic x {}", cfg.blocks_per_module),
                    params: count(&units),
                });
                let mut units = Vec::new();
                let mut ops = Vec::new();
                for (t, row) in module.fusion.iter().enumerate() {
                    for (src, path) in row.iter().enumerate() {
                        let what = match path {
                            FusePath::Identity => "Identity".to_string(),
                            FusePath::Down(convs) => {
                                units.extend(convs.iter());
                                format!("[Conv(3, 2, 1) | Norm] x {}", convs.len())
                            }
                            FusePath::Up(u) => {
                                units.push(u);
                                "Conv(1, 1, 0) | Norm | Upsample".to_string()
                            }
                        };
                        ops.push(format!("{}->{}: {what}", src + 1, t + 1));
                    }
                }
                rows.push(ListingRow {
                    layer: format!("Fusion {suffix}"),
                    dims: live.clone(),
                    channels: widths.clone(),
                    ops: format!("{}; sum | ReLU", ops.join(", ")),
                    params: count(&units),
                });
            }
        }
        rows.push(ListingRow {
            layer: "Concatenation".into(),
            dims: vec![dims[0]],
            channels: vec![cfg.concat_channels()],
            ops: "1: Identity, others: Upsample".into(),
            params: 0,
        });
        rows.push(ListingRow {
            layer: "Regression".into(),
            dims: vec![input],
            channels: vec![cfg.num_classes],
            ops: format!("{} | ReLU | {} | Softmax | Upsample", a.head_hidden.desc, a.head_out.desc),
            params: count(&[&a.head_hidden, &a.head_out]),
        });
        Ok(Listing {
            rows,
            total_params: self.count_parameters(),
        })
    }
}

fn block_units(b: &Block) -> Vec<&ConvUnit> {
    b.convs.iter().chain(b.shortcut.iter()).collect()
}

fn shapes(vars: &[Var]) -> Vec<Shape> {
    vars.iter().map(Var::shape).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VXCKPT1\n";

fn logical_dims(shape: Shape) -> Vec<usize> {
    let mut rank = 5;
    while rank > 1 && shape[rank - 1] == 1 {
        rank -= 1;
    }
    shape[..rank].to_vec()
}

/// Serialize parameters and config.
pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = net.config.to_config_map().to_string();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let dims = logical_dims(p.tensor.shape());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if self.bytes.len() - self.pos < n {
            return Err(NetworkError::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes into a network.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network, NetworkError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(NetworkError::Checkpoint("bad magic".into()));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    let cfg_map = ConfigMap::parse(cfg_text).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    let config = NetworkConfig::from_config_map(&cfg_map).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    let mut net = Network::build(&config, 0)?;
    let count = r.u32()? as usize;
    if count != net.params.len() {
        return Err(NetworkError::Checkpoint(format!(
            "{count} parameter records, config implies {}",
            net.params.len()
        )));
    }
    for p in net.params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        if name != p.name {
            return Err(NetworkError::Checkpoint(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 5 {
            return Err(NetworkError::Checkpoint(format!("{name}: rank {rank}")));
        }
        let mut shape = [1usize; 5];
        for d in shape.iter_mut().take(rank) {
            *d = r.u32()? as usize;
        }
        if shape != p.tensor.shape() {
            return Err(NetworkError::Checkpoint(format!(
                "{name}: shape {:?} does not match {:?}",
                shape,
                p.tensor.shape()
            )));
        }
        let n = p.tensor.numel();
        let payload = r.take(4 * n)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.tensor = Tensor::from_vec(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(NetworkError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network, NetworkError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Load a checkpoint and require that it was written for `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Network, NetworkError> {
    let net = load_checkpoint(path)?;
    if &net.config != expected {
        return Err(NetworkError::Checkpoint(format!(
            "checkpoint config (branches {:?}, classes {}) does not match the requested config (branches {:?}, classes {})",
            net.config.branch_channels, net.config.num_classes, expected.branch_channels, expected.num_classes
        )));
    }
    Ok(net)
}
