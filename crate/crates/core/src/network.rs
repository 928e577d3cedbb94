//! Network assembly from a declarative [`ModelConfig`].
//!
//! Pipeline, with every convolution followed by a ReLU:
//!
//! ```text
//! front-end   3×3 convs and 2×2 max pools (VGG16 plan up to conv4_3)
//! attention   x ← x ⊙ channel_gate(x);  x ← x ⊙ spatial_gate(x)     [use_cbam]
//! pyramid     concat(conv3×3 dilated at each rate) → 1×1 fuse      [use_spm]
//! mid-end     3×3 convs
//! back-end    deformable 3×3 convs, offsets from a 3×3 conv          [use_dcm]
//!             (plain 3×3 convs of the same widths otherwise)
//! head        1×1 conv to one channel, ReLU
//! ```
//!
//! Parameter names are hierarchical (`frontend.conv1.weight`,
//! `cbam.channel.fc1.bias`, `backend.layer2.offset.weight`, …). A back-end
//! layer keeps its name whether or not it is deformable; enabling DCM only
//! adds the `.offset` predictor, so the ablation variants nest by name.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::attention::channel_mlp_specs;
use crate::ops::{AttentionSpec, ChannelAttentionParams, ConvSpec, SpatialAttentionParams};
use crate::tensor::{gaussian_values, pairwise_sum};
use crate::{rng, Graph, ParamStore, Scalar, Tensor, Var};

pub const INPUT_CHANNELS: usize = 3;
/// Spatial reduction of the three front-end pools.
pub const OUTPUT_STRIDE: usize = 8;

const HEAD_STD: f64 = 0.01;

/// One entry of the front-end plan: a 3×3 convolution with that many filters,
/// or a 2×2 max pool (`"P"` in JSON).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub enum FrontendLayer {
    Conv(usize),
    Pool,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerRepr {
    Conv(usize),
    Marker(String),
}

impl TryFrom<LayerRepr> for FrontendLayer {
    type Error = String;
    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        match r {
            LayerRepr::Conv(c) => Ok(FrontendLayer::Conv(c)),
            LayerRepr::Marker(s) if s == "P" => Ok(FrontendLayer::Pool),
            LayerRepr::Marker(s) => Err(format!("unknown front-end layer {s:?} (expected a width or \"P\")")),
        }
    }
}

impl From<FrontendLayer> for LayerRepr {
    fn from(l: FrontendLayer) -> Self {
        match l {
            FrontendLayer::Conv(c) => LayerRepr::Conv(c),
            FrontendLayer::Pool => LayerRepr::Marker("P".into()),
        }
    }
}

/// Weight initialisation. Biases follow the same rule as weights under
/// `Gaussian`; `He` draws weights from N(0, 2/fan_in) and zeroes biases,
/// except the density head, which keeps N(0, 0.01²) so initial maps start
/// near zero. Offset predictors are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightInit {
    Gaussian { std: f64 },
    He,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::Gaussian { std: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub use_cbam: bool,
    pub use_spm: bool,
    pub use_dcm: bool,
    pub frontend_channels: Vec<FrontendLayer>,
    pub spm_rates: Vec<usize>,
    pub spm_branch_channels: usize,
    pub midend_channels: Vec<usize>,
    pub backend_channels: Vec<usize>,
    pub attention: AttentionSpec,
    #[serde(default)]
    pub init: WeightInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use FrontendLayer::{Conv, Pool};
        Self {
            use_cbam: true,
            use_spm: true,
            use_dcm: true,
            frontend_channels: vec![
                Conv(64),
                Conv(64),
                Pool,
                Conv(128),
                Conv(128),
                Pool,
                Conv(256),
                Conv(256),
                Conv(256),
                Pool,
                Conv(512),
                Conv(512),
                Conv(512),
            ],
            spm_rates: vec![2, 4, 8, 12],
            spm_branch_channels: 512,
            midend_channels: vec![512, 512, 512],
            backend_channels: vec![256, 128, 64],
            attention: AttentionSpec::default(),
            init: WeightInit::default(),
        }
    }
}

/// Which of the optional stages are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    BaselineCbam,
    BaselineCbamSpm,
    Full,
}

impl Variant {
    /// Ablation rows in table order.
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::BaselineCbam, Variant::BaselineCbamSpm, Variant::Full];

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::BaselineCbam => (true, false, false),
            Variant::BaselineCbamSpm => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::BaselineCbam => "Baseline+CBAM",
            Variant::BaselineCbamSpm => "Baseline+CBAM+SPM",
            Variant::Full => "ASPDNet",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl ModelConfig {
    /// Desk-scale network: front-end `[16,P,32,P,32,P,64]`, two pyramid
    /// rates and a single deformable layer.
    pub fn tiny() -> Self {
        use FrontendLayer::{Conv, Pool};
        Self {
            frontend_channels: vec![Conv(16), Pool, Conv(32), Pool, Conv(32), Pool, Conv(64)],
            spm_rates: vec![2, 4],
            spm_branch_channels: 32,
            midend_channels: vec![32],
            backend_channels: vec![16],
            attention: AttentionSpec { reduction_ratio: 16, spatial_kernel: 7 },
            init: WeightInit::He,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_cbam, self.use_spm, self.use_dcm) = v.flags();
        self
    }

    pub fn frontend_out_channels(&self) -> usize {
        self.frontend_channels
            .iter()
            .rev()
            .find_map(|l| match l {
                FrontendLayer::Conv(c) => Some(*c),
                FrontendLayer::Pool => None,
            })
            .unwrap_or(INPUT_CHANNELS)
    }

    pub fn num_pools(&self) -> usize {
        self.frontend_channels.iter().filter(|l| **l == FrontendLayer::Pool).count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_pools() != 3 {
            return bad(format!("the front-end needs exactly 3 pools, found {}", self.num_pools()));
        }
        if !self.frontend_channels.iter().any(|l| matches!(l, FrontendLayer::Conv(_))) {
            return bad("the front-end has no convolution".into());
        }
        let widths = self
            .frontend_channels
            .iter()
            .filter_map(|l| match l {
                FrontendLayer::Conv(c) => Some(*c),
                FrontendLayer::Pool => None,
            })
            .chain(self.midend_channels.iter().copied())
            .chain(self.backend_channels.iter().copied());
        for w in widths.chain([self.spm_branch_channels]) {
            if w == 0 {
                return bad("zero-width layer".into());
            }
        }
        if self.spm_rates.is_empty() {
            return bad("spm_rates is empty".into());
        }
        if self.spm_rates.windows(2).any(|p| p[0] >= p[1]) || self.spm_rates[0] == 0 {
            return bad(format!("spm_rates {:?} must be positive and strictly increasing", self.spm_rates));
        }
        if self.use_cbam {
            self.attention.validate(self.frontend_out_channels())?;
        }
        match self.init {
            WeightInit::Gaussian { std } if !(std >= 0.0 && std.is_finite()) => {
                return bad(format!("initialisation std {std} must be finite and non-negative"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::json("<model config>", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        c.validate()?;
        Ok(c)
    }

    /// Every parameter the configuration owns, in registration order.
    pub fn param_plan(&self) -> Vec<ParamSpec> {
        let mut plan = Vec::new();
        let conv = |plan: &mut Vec<ParamSpec>, name: String, k: usize, cin: usize, cout: usize, zero: bool| {
            let fan_in = cin * k * k;
            let kind = |bias| if zero { ParamKind::Zero } else { ParamKind::Learned { fan_in, bias } };
            plan.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin, k, k], kind: kind(false) });
            plan.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], kind: kind(true) });
        };
        let mut c = INPUT_CHANNELS;
        let mut i = 0;
        for l in &self.frontend_channels {
            if let FrontendLayer::Conv(w) = *l {
                i += 1;
                conv(&mut plan, format!("frontend.conv{i}"), 3, c, w, false);
                c = w;
            }
        }
        if self.use_cbam {
            let (s1, s2) = channel_mlp_specs(c, &self.attention);
            conv(&mut plan, "cbam.channel.fc1".into(), 1, s1.in_channels, s1.out_channels, false);
            conv(&mut plan, "cbam.channel.fc2".into(), 1, s2.in_channels, s2.out_channels, false);
            conv(&mut plan, "cbam.spatial.conv".into(), self.attention.spatial_kernel, 2, 1, false);
        }
        if self.use_spm {
            for (j, _) in self.spm_rates.iter().enumerate() {
                conv(&mut plan, format!("spm.branch{}", j + 1), 3, c, self.spm_branch_channels, false);
            }
            conv(&mut plan, "spm.fuse".into(), 1, self.spm_branch_channels * self.spm_rates.len(), c, false);
        }
        for (j, &w) in self.midend_channels.iter().enumerate() {
            conv(&mut plan, format!("midend.conv{}", j + 1), 3, c, w, false);
            c = w;
        }
        for (j, &w) in self.backend_channels.iter().enumerate() {
            let name = format!("backend.layer{}", j + 1);
            conv(&mut plan, name.clone(), 3, c, w, false);
            if self.use_dcm {
                conv(&mut plan, format!("{name}.offset"), 3, c, 2 * 9, true);
            }
            c = w;
        }
        conv(&mut plan, "head".into(), 1, c, 1, false);
        plan
    }

    /// Output extents for a `B×3×H×W` input.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [b, c, h, w] = input;
        if c != INPUT_CHANNELS {
            return Err(Error::InvalidInput(format!("expected {INPUT_CHANNELS} input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::InvalidInput(format!(
                "input {h}×{w} is not a positive multiple of {OUTPUT_STRIDE} in both extents"
            )));
        }
        Ok([b, 1, h / OUTPUT_STRIDE, w / OUTPUT_STRIDE])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    Learned { fan_in: usize, bias: bool },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    /// Name with the trailing `.weight`/`.bias` removed.
    pub fn group(&self) -> &str {
        self.name.rsplit_once('.').map_or(&self.name, |(g, _)| g)
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Builds a model with freshly initialised parameters. Each parameter draws
/// from its own stream keyed by `(seed, name)`, so layers shared between
/// configurations start from identical values.
pub fn build_aspdnet<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    for spec in config.param_plan() {
        let n: usize = spec.shape.iter().product();
        let data = match (spec.kind, config.init) {
            (ParamKind::Zero, _) | (ParamKind::Learned { bias: true, .. }, WeightInit::He) => vec![T::zero(); n],
            (ParamKind::Learned { .. }, WeightInit::Gaussian { std }) => {
                gaussian_values(&mut rng::stream(seed, &spec.name), n, 0.0, std)
            }
            (ParamKind::Learned { fan_in, bias: false }, WeightInit::He) => {
                let std = if spec.group() == "head" { HEAD_STD } else { (2.0 / fan_in as f64).sqrt() };
                gaussian_values(&mut rng::stream(seed, &spec.name), n, 0.0, std)
            }
        };
        params.insert(spec.name, Tensor::new(&spec.shape, data)?)?;
    }
    Ok(Model { config: config.clone(), params })
}

impl<T: Scalar> Model<T> {
    /// Loads parameters from a checkpoint, checking names and shapes against
    /// the configuration.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let plan = config.param_plan();
        if plan.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, configuration expects {}",
                params.len(),
                plan.len()
            )));
        }
        for spec in &plan {
            let t = params.require(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::Config(format!(
                    "{} has shape {:?}, configuration expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { config: config.clone(), params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.params.require(name)?))
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, name: &str, spec: &ConvSpec) -> Result<Var> {
        let w = self.p(g, &format!("{name}.weight"))?;
        let b = self.p(g, &format!("{name}.bias"))?;
        g.conv2d(x, w, b, spec)
    }

    fn conv_relu(&self, g: &mut Graph<T>, x: Var, name: &str, spec: &ConvSpec) -> Result<Var> {
        let y = self.conv(g, x, name, spec)?;
        g.relu(y)
    }

    /// Records the network on `g` and returns the `B×1×H/8×W/8` density map.
    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let cfg = &self.config;
        let dims = g.value(image).dims4()?;
        cfg.output_shape(dims)?;

        let mut x = image;
        let mut c = INPUT_CHANNELS;
        let mut i = 0;
        for l in &cfg.frontend_channels {
            match *l {
                FrontendLayer::Conv(w) => {
                    i += 1;
                    x = self.conv_relu(g, x, &format!("frontend.conv{i}"), &ConvSpec::same(3, c, w, 1))?;
                    c = w;
                }
                FrontendLayer::Pool => x = g.max_pool2x2(x)?,
            }
        }

        if cfg.use_cbam {
            let cp = ChannelAttentionParams {
                fc1_weight: self.p(g, "cbam.channel.fc1.weight")?,
                fc1_bias: self.p(g, "cbam.channel.fc1.bias")?,
                fc2_weight: self.p(g, "cbam.channel.fc2.weight")?,
                fc2_bias: self.p(g, "cbam.channel.fc2.bias")?,
            };
            let gate = g.channel_attention(x, &cp, &cfg.attention)?;
            x = g.mul(x, gate)?;
            let sp = SpatialAttentionParams {
                weight: self.p(g, "cbam.spatial.conv.weight")?,
                bias: self.p(g, "cbam.spatial.conv.bias")?,
            };
            let gate = g.spatial_attention(x, &sp, &cfg.attention)?;
            x = g.mul(x, gate)?;
        }

        if cfg.use_spm {
            let s = cfg.spm_branch_channels;
            let mut branches = Vec::with_capacity(cfg.spm_rates.len());
            for (j, &r) in cfg.spm_rates.iter().enumerate() {
                branches.push(self.conv_relu(g, x, &format!("spm.branch{}", j + 1), &ConvSpec::same(3, c, s, r))?);
            }
            let cat = g.concat_channels(&branches)?;
            x = self.conv_relu(g, cat, "spm.fuse", &ConvSpec::new(1, s * branches.len(), c))?;
        }

        for (j, &w) in cfg.midend_channels.iter().enumerate() {
            x = self.conv_relu(g, x, &format!("midend.conv{}", j + 1), &ConvSpec::same(3, c, w, 1))?;
            c = w;
        }

        for (j, &w) in cfg.backend_channels.iter().enumerate() {
            let name = format!("backend.layer{}", j + 1);
            let spec = ConvSpec::same(3, c, w, 1);
            x = if cfg.use_dcm {
                let offsets = self.conv(g, x, &format!("{name}.offset"), &ConvSpec::same(3, c, 2 * spec.taps(), 1))?;
                let wv = self.p(g, &format!("{name}.weight"))?;
                let bv = self.p(g, &format!("{name}.bias"))?;
                let y = g.deform_conv2d(x, wv, bv, offsets, &spec)?;
                g.relu(y)?
            } else {
                self.conv_relu(g, x, &name, &spec)?
            };
            c = w;
        }

        self.conv_relu(g, x, "head", &ConvSpec::new(1, c, 1))
    }

    /// Forward pass on a throwaway graph.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Per-item counts of a `B×1×h×w` (or any `B×…`) density tensor.
pub fn predict_count<T: Scalar>(density: &Tensor<T>) -> Vec<T> {
    let b = density.shape()[0];
    let per = density.numel() / b;
    density.data().chunks(per).map(pairwise_sum).collect()
}
