//! Toy end-to-end classifiers assembled from the operators.
//!
//! Every variant runs: patch embedding (anchored for `*_poly`), positional
//! encoding, a stack of pre-norm transformer blocks
//! `[LN -> attention -> residual -> LN -> MLP -> residual]`, global average
//! pooling over the token grid, a final layer norm and a linear head.
//!
//! `vit*` blocks use global self-attention. `twins*` models alternate a
//! window-attention block and a global-subsampled-attention block; `depth`
//! counts those pairs. Subsampling uses the window size as its stride.
//!
//! For poly variants each windowed or subsampled attention anchors its
//! (normalized) input. With `restore_mode` the attention output is shifted
//! back by the anchoring phase before the residual add. Without it the
//! residual stream itself is moved onto the anchored grid instead, so the
//! two summands stay aligned in both modes.

mod layers;

pub use layers::{layer_norm, mlp_block, Activation, MlpParams, LAYER_NORM_EPS};

use serde::{Deserialize, Serialize};

use crate::attention::{
    abs_pos_embed, gsa, gsa_poly, self_attention, window_attention, window_attention_poly, AttentionParams, WindowSpec,
};
use crate::conv::{depthwise_conv_circular, patch_embed_poly, ConvFilter, DepthwiseFilter};
use crate::error::{shape_err, Error, Result};
use crate::polyphase::{restore_phase, PolyphaseIndex};
use crate::rng::Rng;
use crate::sum::exact_sum;
use crate::tensor::{NormOrder, Tensor};

/// Standard deviation of every randomly initialized weight.
pub const INIT_SCALE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vit,
    VitPoly,
    Twins,
    TwinsPoly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vit, Variant::VitPoly, Variant::Twins, Variant::TwinsPoly];

    pub fn is_poly(self) -> bool {
        matches!(self, Variant::VitPoly | Variant::TwinsPoly)
    }

    pub fn is_twins(self) -> bool {
        matches!(self, Variant::Twins | Variant::TwinsPoly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vit => "vit",
            Variant::VitPoly => "vit_poly",
            Variant::Twins => "twins",
            Variant::TwinsPoly => "twins_poly",
        }
    }

    /// The baseline / poly counterpart of the same family.
    pub fn counterpart(self) -> Variant {
        match self {
            Variant::Vit => Variant::VitPoly,
            Variant::VitPoly => Variant::Vit,
            Variant::Twins => Variant::TwinsPoly,
            Variant::TwinsPoly => Variant::Twins,
        }
    }

    pub fn default_pos_encoding(self) -> PosEncoding {
        match self {
            Variant::Vit => PosEncoding::Absolute,
            _ => PosEncoding::DepthwiseCircular,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Absolute,
    DepthwiseCircular,
    None,
}

/// Declarative model description; also the `model` section of the CLI
/// config. Omitted JSON fields take the desk-scale defaults of
/// [`ModelSpec::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ModelSpec {
    pub variant: Variant,
    /// `[C, H, W]`
    pub image: [usize; 3],
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub pos_encoding: PosEncoding,
    pub classes: usize,
    pub seed: u64,
    pub p_norm: NormOrder,
    pub restore_mode: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    variant: Variant,
    image: Option<[usize; 3]>,
    patch_stride: Option<usize>,
    embed_dim: Option<usize>,
    depth: Option<usize>,
    window: Option<usize>,
    mlp_hidden: Option<usize>,
    pos_encoding: Option<PosEncoding>,
    classes: Option<usize>,
    seed: Option<u64>,
    p_norm: Option<NormOrder>,
    restore_mode: Option<bool>,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = Error;

    fn try_from(r: RawSpec) -> Result<Self> {
        let d = ModelSpec::new(r.variant);
        let spec = ModelSpec {
            variant: r.variant,
            image: r.image.unwrap_or(d.image),
            patch_stride: r.patch_stride.unwrap_or(d.patch_stride),
            embed_dim: r.embed_dim.unwrap_or(d.embed_dim),
            depth: r.depth.unwrap_or(d.depth),
            window: r.window.unwrap_or(d.window),
            mlp_hidden: r.mlp_hidden.unwrap_or(d.mlp_hidden),
            pos_encoding: r.pos_encoding.unwrap_or(d.pos_encoding),
            classes: r.classes.unwrap_or(d.classes),
            seed: r.seed.unwrap_or(d.seed),
            p_norm: r.p_norm.unwrap_or(d.p_norm),
            restore_mode: r.restore_mode.unwrap_or(d.restore_mode),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ModelSpec {
    /// Desk-scale defaults: 3x32x32 input, patch stride 4, d = 16, depth 2,
    /// window 2, MLP hidden 64, 10 classes.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            image: [3, 32, 32],
            patch_stride: 4,
            embed_dim: 16,
            depth: 2,
            window: 2,
            mlp_hidden: 64,
            pos_encoding: variant.default_pos_encoding(),
            classes: 10,
            seed: 0,
            p_norm: NormOrder::L2,
            restore_mode: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Spatial size of the token grid after patch embedding.
    pub fn grid(&self) -> (usize, usize) {
        (self.image[1] / self.patch_stride, self.image[2] / self.patch_stride)
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        if self.variant.is_twins() {
            (0..self.depth).flat_map(|_| [BlockKind::Window, BlockKind::Subsampled]).collect()
        } else {
            vec![BlockKind::Global; self.depth]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        let [c, h, w] = self.image;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("image dimensions must be positive, got {:?}", self.image));
        }
        for (name, v) in [
            ("patch_stride", self.patch_stride),
            ("embed_dim", self.embed_dim),
            ("window", self.window),
            ("mlp_hidden", self.mlp_hidden),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let s = self.patch_stride;
        if h % s != 0 || w % s != 0 {
            return bad(format!("patch stride {s} does not divide image {h}x{w}"));
        }
        let (gh, gw) = self.grid();
        if self.variant.is_twins() && (gh % self.window != 0 || gw % self.window != 0) {
            return bad(format!("window {} does not divide token grid {gh}x{gw}", self.window));
        }
        if self.pos_encoding == PosEncoding::DepthwiseCircular && (gh < POS_KERNEL || gw < POS_KERNEL) {
            return bad(format!("token grid {gh}x{gw} smaller than the {POS_KERNEL}x{POS_KERNEL} positional kernel"));
        }
        Ok(())
    }
}

const POS_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Global,
    Window,
    Subsampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        Self { gamma: Tensor::full(&[d], 1.0), beta: Tensor::zeros(&[d]) }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub kind: BlockKind,
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    /// Key/value subsampler for [`BlockKind::Subsampled`] blocks.
    pub subsample: Option<ConvFilter>,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub patch: ConvFilter,
    pub pos_absolute: Option<Tensor>,
    pub pos_depthwise: Option<DepthwiseFilter>,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNormParams,
    /// `[d, classes]`
    pub head_w: Tensor,
    /// `[classes]`
    pub head_b: Tensor,
}

impl ModelWeights {
    /// Every weight tensor with a stable name, in generation order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("patch.weight".into(), &self.patch.weights)];
        if let Some(b) = &self.patch.bias {
            out.push(("patch.bias".into(), b));
        }
        if let Some(e) = &self.pos_absolute {
            out.push(("pos.absolute".into(), e));
        }
        if let Some(f) = &self.pos_depthwise {
            out.push(("pos.depthwise".into(), &f.weights));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.norm1.gamma"), &b.norm1.gamma));
            out.push((format!("{p}.norm1.beta"), &b.norm1.beta));
            out.push((format!("{p}.attn.wq"), &b.attn.wq));
            out.push((format!("{p}.attn.wk"), &b.attn.wk));
            out.push((format!("{p}.attn.wv"), &b.attn.wv));
            if let Some(h) = &b.subsample {
                out.push((format!("{p}.attn.subsample"), &h.weights));
            }
            out.push((format!("{p}.norm2.gamma"), &b.norm2.gamma));
            out.push((format!("{p}.norm2.beta"), &b.norm2.beta));
            out.push((format!("{p}.mlp.w1"), &b.mlp.w1));
            out.push((format!("{p}.mlp.b1"), &b.mlp.b1));
            out.push((format!("{p}.mlp.w2"), &b.mlp.w2));
            out.push((format!("{p}.mlp.b2"), &b.mlp.b2));
        }
        out.push(("norm.gamma".into(), &self.norm.gamma));
        out.push(("norm.beta".into(), &self.norm.beta));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }
}

/// 64-bit FNV-1a, used to give each named weight its own RNG stream.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Init {
    seed: u64,
}

impl Init {
    fn normal(&self, name: &str, shape: &[usize]) -> Tensor {
        Rng::with_stream(self.seed, stream_id(name)).normal(shape).scale(INIT_SCALE)
    }
}

/// Deterministic weights: `N(0, 0.02^2)` for projections and kernels, zero
/// biases, identity layer norms. Each tensor is drawn from a stream keyed
/// by its name, so variants sharing a layer get identical values for it.
pub fn build_model(spec: &ModelSpec) -> Result<ModelWeights> {
    spec.validate()?;
    let init = Init { seed: spec.seed };
    let [c, _, _] = spec.image;
    let (d, s, hid) = (spec.embed_dim, spec.patch_stride, spec.mlp_hidden);
    let (gh, gw) = spec.grid();

    let patch = ConvFilter::new(init.normal("patch.weight", &[d, c, s, s]), s, Some(Tensor::zeros(&[d])))?;
    let pos_absolute = (spec.pos_encoding == PosEncoding::Absolute).then(|| init.normal("pos.absolute", &[d, gh, gw]));
    let pos_depthwise = match spec.pos_encoding {
        PosEncoding::DepthwiseCircular => {
            Some(DepthwiseFilter::new(init.normal("pos.depthwise", &[d, POS_KERNEL, POS_KERNEL]))?)
        }
        _ => None,
    };
    let mut blocks = Vec::new();
    for (i, kind) in spec.block_kinds().into_iter().enumerate() {
        let p = format!("block{i}");
        let attn = AttentionParams::new(
            init.normal(&format!("{p}.attn.wq"), &[d, d]),
            init.normal(&format!("{p}.attn.wk"), &[d, d]),
            init.normal(&format!("{p}.attn.wv"), &[d, d]),
        )?;
        let subsample = match kind {
            BlockKind::Subsampled => {
                let w = spec.window;
                Some(ConvFilter::new(init.normal(&format!("{p}.attn.subsample"), &[d, d, w, w]), w, None)?)
            }
            _ => None,
        };
        let mlp = MlpParams {
            w1: init.normal(&format!("{p}.mlp.w1"), &[d, hid]),
            b1: Tensor::zeros(&[hid]),
            w2: init.normal(&format!("{p}.mlp.w2"), &[hid, d]),
            b2: Tensor::zeros(&[d]),
            activation: Activation::Gelu,
        };
        blocks.push(BlockWeights {
            kind,
            norm1: LayerNormParams::identity(d),
            attn,
            subsample,
            norm2: LayerNormParams::identity(d),
            mlp,
        });
    }
    Ok(ModelWeights {
        patch,
        pos_absolute,
        pos_depthwise,
        blocks,
        norm: LayerNormParams::identity(d),
        head_w: init.normal("head.weight", &[d, spec.classes]),
        head_b: Tensor::zeros(&[spec.classes]),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Token-grid feature maps `[d, H/s, W/s]`: after patch embedding,
    /// after positional encoding, then after each block.
    pub features: Vec<Tensor>,
}

fn tokenwise(grid: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let (_, h, w) = grid.dims3()?;
    f(&grid.grid_to_tokens()?)?.tokens_to_grid(h, w)
}

fn attention_branch(spec: &ModelSpec, block: &BlockWeights, normed: &Tensor) -> Result<(Tensor, PolyphaseIndex)> {
    let poly = spec.variant.is_poly();
    let zero = PolyphaseIndex::default();
    match block.kind {
        BlockKind::Global => Ok((tokenwise(normed, |t| self_attention(t, &block.attn))?, zero)),
        BlockKind::Window => {
            let ws = WindowSpec::for_tensor(spec.window, normed)?;
            if poly {
                window_attention_poly(normed, &ws, &block.attn, spec.p_norm)
            } else {
                Ok((window_attention(normed, &ws, &block.attn)?, zero))
            }
        }
        BlockKind::Subsampled => {
            let h = block
                .subsample
                .as_ref()
                .ok_or_else(|| Error::Spec("subsampled block without a subsampling filter".into()))?;
            if poly {
                gsa_poly(normed, spec.window, h, &block.attn, spec.p_norm)
            } else {
                Ok((gsa(normed, spec.window, h, &block.attn)?, zero))
            }
        }
    }
}

fn run_block(spec: &ModelSpec, block: &BlockWeights, x: &Tensor) -> Result<Tensor> {
    let normed = tokenwise(x, |t| block.norm1.apply(t))?;
    let (attn, phase) = attention_branch(spec, block, &normed)?;
    let y = if spec.restore_mode {
        x.add(&restore_phase(&attn, phase)?)?
    } else {
        x.circular_shift(phase.anchor_shift())?.add(&attn)?
    };
    let mlp = tokenwise(&y, |t| mlp_block(&block.norm2.apply(t)?, &block.mlp))?;
    y.add(&mlp)
}

/// Per-channel mean over the token grid, summed exactly so that any
/// permutation of the grid gives the same pooled vector.
fn global_average_pool(grid: &Tensor) -> Result<Tensor> {
    let (c, h, w) = grid.dims3()?;
    let n = (h * w) as f64;
    let pooled = grid.data().chunks_exact(h * w).map(|plane| exact_sum(plane.iter().copied()) / n).collect();
    Tensor::new(vec![1, c], pooled)
}

pub fn forward(spec: &ModelSpec, weights: &ModelWeights, x: &Tensor) -> Result<ForwardOutput> {
    if x.shape() != spec.image {
        return shape_err(format!("input shape {:?}, model expects {:?}", x.shape(), spec.image));
    }
    let s = spec.patch_stride;
    let mut grid = if spec.variant.is_poly() {
        patch_embed_poly(x, &weights.patch, s, spec.p_norm)?.0
    } else {
        weights.patch.apply(x)?
    };
    let mut features = vec![grid.clone()];
    if let Some(e) = &weights.pos_absolute {
        grid = abs_pos_embed(&grid, e)?;
    }
    if let Some(f) = &weights.pos_depthwise {
        grid = grid.add(&depthwise_conv_circular(&grid, f)?)?;
    }
    features.push(grid.clone());
    for block in &weights.blocks {
        grid = run_block(spec, block, &grid)?;
        features.push(grid.clone());
    }
    let pooled = weights.norm.apply(&global_average_pool(&grid)?)?;
    let logits = pooled.matmul(&weights.head_w)?;
    let logits = logits.add(&weights.head_b.clone().reshape(&[1, spec.classes])?)?;
    Ok(ForwardOutput { logits: logits.reshape(&[spec.classes])?, features })
}

/// Index of the largest logit; the smallest index wins ties.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

pub fn predict(spec: &ModelSpec, weights: &ModelWeights, x: &Tensor) -> Result<usize> {
    Ok(argmax(&forward(spec, weights, x)?.logits))
}

/// A spec together with its generated weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: ModelWeights,
}

impl Model {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        let weights = build_model(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        forward(&self.spec, &self.weights, x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        predict(&self.spec, &self.weights, x)
    }

    /// Draws a standard-normal input of the model's image shape.
    pub fn sample_input(&self, rng: &mut Rng) -> Tensor {
        rng.normal(&self.spec.image)
    }
}
