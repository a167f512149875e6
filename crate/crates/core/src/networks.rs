//! Stage-1 E-2AUNet and the stage-2 weight-shared specialist networks.
//!
//! Both are the same encoder-decoder shape:
//!
//! ```text
//! embed (3x3 conv -> C1)
//! stage s = 0..3: conv block -> E-2A -> 2x2/2 conv (C_s -> C_{s+1})
//! stage 4:        conv block -> E-2A                   (bottleneck)
//! stage s = 3..0: 2x2/2 transposed conv (C_{s+1} -> C_s) -> concat skip -> conv block -> E-2A
//! head:           1x1 conv -> sigmoid
//! ```
//!
//! The specialists run LV, RV and MYO through one parameter set by stacking the
//! three streams along the batch axis; their encoder attention is cross E-2A.
//!
//! Parameter names follow `stage{k}.{block}.{layer}`, e.g.
//! `stage2.enc.conv1.weight`, `stage2.enc_attn.wq`, `stage2.down.weight`,
//! `stage1.up.weight`, `stage1.dec.bn2.gamma`, with `stage0.embed.*` and `head.*`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{E2ABlock, QueryKeyProduct};
use crate::autograd::{Mode, Tape, Var};
use crate::error::{cfg_err, dim_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBlock, ConvTranspose2d, BN_EPS, BN_MOMENTUM};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const STAGES: usize = 5;
/// Input extents must be multiples of this (four halvings).
pub const SIDE_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stage_channels: Vec<usize>,
    #[serde(default)]
    pub product: QueryKeyProduct,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_eps() -> f64 {
    BN_EPS
}

fn default_bn_momentum() -> f64 {
    BN_MOMENTUM
}

impl UNetConfig {
    /// Stage-1 network: 1 input channel, 4 sigmoid outputs (BG, LV, RV, MYO).
    pub fn e2aunet() -> Self {
        Self::with(1, 4, vec![32, 64, 128, 256, 512])
    }

    /// Stage-2 specialist: cropped intensity plus one initial mask in, one mask out.
    pub fn specialist() -> Self {
        Self::with(2, 1, vec![16, 32, 64, 128, 256])
    }

    pub fn with(in_channels: usize, out_channels: usize, stage_channels: Vec<usize>) -> Self {
        Self {
            in_channels,
            out_channels,
            stage_channels,
            product: QueryKeyProduct::GlobalQuery,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        }
    }

    /// Channel schedule doubling from `first`.
    pub fn doubling(first: usize) -> Vec<usize> {
        (0..STAGES).map(|s| first << s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.stage_channels;
        if c.len() != STAGES {
            return Err(cfg_err!("expected {STAGES} stage widths, got {}", c.len()));
        }
        if c[0] == 0 || c.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(cfg_err!("stage widths must double at every stage: {c:?}"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(cfg_err!("channel counts must be positive"));
        }
        Ok(())
    }
}

/// One learnable layer, for counting and inspection.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, kernel: usize },
    ConvTranspose { cin: usize, cout: usize },
    BatchNorm { channels: usize },
    E2A { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind) -> Self {
        Self { name, kind }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cin, cout, kernel } => Conv2d::param_count(cin, cout, kernel),
            LayerKind::ConvTranspose { cin, cout } => ConvTranspose2d::param_count(cin, cout),
            LayerKind::BatchNorm { channels } => BatchNorm2d::param_count(channels),
            LayerKind::E2A { dim } => E2ABlock::param_count(dim),
        }
    }
}

fn conv_block_specs(out: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize) {
    out.push(LayerSpec::new(format!("{prefix}.conv1"), LayerKind::Conv { cin, cout, kernel: 3 }));
    out.push(LayerSpec::new(format!("{prefix}.bn1"), LayerKind::BatchNorm { channels: cout }));
    out.push(LayerSpec::new(format!("{prefix}.conv2"), LayerKind::Conv { cin: cout, cout, kernel: 3 }));
    out.push(LayerSpec::new(format!("{prefix}.bn2"), LayerKind::BatchNorm { channels: cout }));
}

/// Every learnable layer of the network, in construction order.
pub fn layer_specs(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let c = &cfg.stage_channels;
    let mut out = vec![LayerSpec::new(
        "stage0.embed".into(),
        LayerKind::Conv {
            cin: cfg.in_channels,
            cout: c[0],
            kernel: 3,
        },
    )];
    for s in 0..STAGES {
        conv_block_specs(&mut out, &format!("stage{s}.enc"), c[s], c[s]);
        out.push(LayerSpec::new(format!("stage{s}.enc_attn"), LayerKind::E2A { dim: c[s] }));
        if s + 1 < STAGES {
            out.push(LayerSpec::new(
                format!("stage{s}.down"),
                LayerKind::Conv {
                    cin: c[s],
                    cout: c[s + 1],
                    kernel: 2,
                },
            ));
        }
    }
    for s in (0..STAGES - 1).rev() {
        out.push(LayerSpec::new(
            format!("stage{s}.up"),
            LayerKind::ConvTranspose {
                cin: c[s + 1],
                cout: c[s],
            },
        ));
        conv_block_specs(&mut out, &format!("stage{s}.dec"), 2 * c[s], c[s]);
        out.push(LayerSpec::new(format!("stage{s}.dec_attn"), LayerKind::E2A { dim: c[s] }));
    }
    out.push(LayerSpec::new(
        "head".into(),
        LayerKind::Conv {
            cin: c[0],
            cout: cfg.out_channels,
            kernel: 1,
        },
    ));
    out
}

pub fn count_layers(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

/// Learnable scalar count in closed form.
pub fn param_count(cfg: &UNetConfig) -> usize {
    let c = &cfg.stage_channels;
    let conv3 = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let bn = |ch: usize| 2 * ch;
    let attn = |d: usize| 3 * d * d + 4 * d;
    let mut total = conv3(cfg.in_channels, c[0]) + c[0] * cfg.out_channels + cfg.out_channels;
    for s in 0..STAGES {
        total += conv3(c[s], c[s]) * 2 + 2 * bn(c[s]) + attn(c[s]);
        if s + 1 < STAGES {
            // down and up between s and s+1
            total += 4 * c[s] * c[s + 1] + c[s + 1];
            total += 4 * c[s + 1] * c[s] + c[s];
            // decoder block at s
            total += conv3(2 * c[s], c[s]) + conv3(c[s], c[s]) + 2 * bn(c[s]) + attn(c[s]);
        }
    }
    total
}

#[derive(Clone, Debug)]
struct Level {
    block: ConvBlock,
    attn: E2ABlock,
}

impl Level {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        attn_prefix: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            block: ConvBlock::new(store, prefix, cin, cout, cfg.bn_eps, cfg.bn_momentum, rng)?,
            attn: E2ABlock::new(store, attn_prefix, cout, cfg.product, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode, cross: bool) -> Result<Var> {
        let y = self.block.forward(tape, store, x, mode)?;
        self.attn.forward_map(tape, store, y, cross)
    }
}

/// Output of a forward pass, with the encoder feature map of every stage.
pub struct UNetOutput {
    pub output: Var,
    pub encoder_features: Vec<Var>,
}

/// Encoder-decoder with E-2A after every conv block.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    cross_encoder: bool,
    embed: Conv2d,
    encoder: Vec<Level>,
    downs: Vec<Conv2d>,
    ups: Vec<ConvTranspose2d>,
    decoder: Vec<Level>,
    head: Conv2d,
}

impl UNet {
    fn build<T: Scalar>(store: &mut ParamStore<T>, config: UNetConfig, cross_encoder: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.stage_channels.clone();
        let embed = Conv2d::new(store, "stage0.embed", config.in_channels, c[0], 3, 1, 1, &mut rng)?;
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for s in 0..STAGES {
            encoder.push(Level::new(
                store,
                &format!("stage{s}.enc"),
                &format!("stage{s}.enc_attn"),
                c[s],
                c[s],
                &config,
                &mut rng,
            )?);
            if s + 1 < STAGES {
                downs.push(Conv2d::new(store, &format!("stage{s}.down"), c[s], c[s + 1], 2, 2, 0, &mut rng)?);
            }
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for s in (0..STAGES - 1).rev() {
            ups.push(ConvTranspose2d::new(store, &format!("stage{s}.up"), c[s + 1], c[s], &mut rng)?);
            decoder.push(Level::new(
                store,
                &format!("stage{s}.dec"),
                &format!("stage{s}.dec_attn"),
                2 * c[s],
                c[s],
                &config,
                &mut rng,
            )?);
        }
        let head = Conv2d::new(store, "head", c[0], config.out_channels, 1, 1, 0, &mut rng)?;
        Ok(Self {
            config,
            cross_encoder,
            embed,
            encoder,
            downs,
            ups,
            decoder,
            head,
        })
    }

    /// `x` is `[N, in_channels, H, W]` with `H`, `W` multiples of 16.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<UNetOutput> {
        let (n, c, h, w) = tape.value(x).nchw()?;
        if c != self.config.in_channels {
            return Err(dim_err!("network expects {} input channels, got {c}", self.config.in_channels));
        }
        if h % SIDE_MULTIPLE != 0 || w % SIDE_MULTIPLE != 0 {
            return Err(cfg_err!("input extents {h}x{w} must be multiples of {SIDE_MULTIPLE}"));
        }
        if self.cross_encoder && n % 3 != 0 {
            return Err(dim_err!("coupled specialists need three stacked streams, batch is {n}"));
        }
        let mut y = self.embed.forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            y = self.encoder[s].forward(tape, store, y, mode, self.cross_encoder)?;
            skips.push(y);
            if s + 1 < STAGES {
                y = self.downs[s].forward(tape, store, y)?;
            }
        }
        for (i, s) in (0..STAGES - 1).rev().enumerate() {
            let up = self.ups[i].forward(tape, store, y)?;
            let cat = tape.concat_channels(up, skips[s])?;
            y = self.decoder[i].forward(tape, store, cat, mode, false)?;
        }
        let logits = self.head.forward(tape, store, y)?;
        Ok(UNetOutput {
            output: tape.sigmoid(logits),
            encoder_features: skips,
        })
    }
}

/// Stage-1 network.
#[derive(Clone, Debug)]
pub struct E2AUNet {
    pub net: UNet,
}

impl E2AUNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: UNetConfig, seed: u64) -> Result<Self> {
        if config.in_channels != 1 || config.out_channels != 4 {
            return Err(cfg_err!("E-2AUNet maps 1 channel to 4 (BG, LV, RV, MYO)"));
        }
        Ok(Self {
            net: UNet::build(store, config, false, seed)?,
        })
    }

    /// `[N, 1, H, W]` -> `[N, 4, H, W]` sigmoid maps (channel order BG, LV, RV, MYO).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.net.forward(tape, store, x, mode)?.output)
    }
}

/// Anatomies handled by the specialists, in stream order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Anatomy {
    Lv,
    Rv,
    Myo,
}

impl Anatomy {
    pub const ALL: [Anatomy; 3] = [Anatomy::Lv, Anatomy::Rv, Anatomy::Myo];

    pub fn name(self) -> &'static str {
        match self {
            Anatomy::Lv => "LV",
            Anatomy::Rv => "RV",
            Anatomy::Myo => "MYO",
        }
    }
}

/// LV-Net, RV-Net and MYO-Net: three views of one parameter set.
#[derive(Clone, Debug)]
pub struct Specialists {
    pub net: UNet,
}

impl Specialists {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: UNetConfig, seed: u64) -> Result<Self> {
        if config.in_channels != 2 || config.out_channels != 1 {
            return Err(cfg_err!("specialists take crop + mask (2 channels) and emit 1 channel"));
        }
        Ok(Self {
            net: UNet::build(store, config, true, seed)?,
        })
    }

    /// Parameters seen by one specialist instance. All instances resolve to
    /// the same store entries.
    pub fn instance_params<T: Scalar>(&self, store: &ParamStore<T>, _anatomy: Anatomy) -> Vec<ParamId> {
        store.trainable_ids()
    }

    /// Stack `concat(crop, init_i)` for the three anatomies along the batch axis.
    pub fn stack_inputs<T: Scalar>(crop: &Tensor<T>, init: [&Tensor<T>; 3]) -> Result<Tensor<T>> {
        let (n, c, h, w) = crop.nchw()?;
        if c != 1 {
            return Err(dim_err!("crop must have one channel, got {c}"));
        }
        for m in init {
            if m.shape() != crop.shape() {
                return Err(dim_err!("mask shape {:?} differs from crop {:?}", m.shape(), crop.shape()));
            }
            if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Validation("initial masks must be binary".into()));
            }
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * n * 2 * plane);
        for m in init {
            for b in 0..n {
                data.extend_from_slice(&crop.data()[b * plane..(b + 1) * plane]);
                data.extend_from_slice(&m.data()[b * plane..(b + 1) * plane]);
            }
        }
        Tensor::new(&[3 * n, 2, h, w], data)
    }

    /// Joint forward; returns `[3N, 1, h, w]` with streams LV, RV, MYO stacked.
    pub fn forward_stacked<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, stacked: Var, mode: Mode) -> Result<Var> {
        Ok(self.net.forward(tape, store, stacked, mode)?.output)
    }

    /// Refined masks `(m_lv, m_rv, m_myo)`, each `[N, 1, h, w]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        crop: &Tensor<T>,
        init: [&Tensor<T>; 3],
        mode: Mode,
    ) -> Result<[Var; 3]> {
        let n = crop.shape()[0];
        let stacked = tape.constant(Self::stack_inputs(crop, init)?);
        let out = self.forward_stacked(tape, store, stacked, mode)?;
        Ok([
            tape.slice(out, 0, 0, n)?,
            tape.slice(out, 0, n, n)?,
            tape.slice(out, 0, 2 * n, n)?,
        ])
    }
}
