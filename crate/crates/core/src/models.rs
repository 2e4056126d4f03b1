//! The six architectures.
//!
//! | variant | mask branch                                   | tied decoder |
//! |---------|-----------------------------------------------|--------------|
//! | `unet`  | none                                          | no           |
//! | `inter` | the image network itself, run on `m`          | no           |
//! | `ae`    | separate auto-encoder without skips           | no           |
//! | `sae`   | own encoder, decoder shared with the image one | no           |
//! | `twi`   | as `inter`                                    | yes          |
//! | `twae`  | as `sae`                                      | yes          |
//!
//! Intermediate heads sit at the bottleneck (`j = 0`) and after every decoder
//! block (`j = 1..`), each a 1×1 conv followed by a sigmoid at that level's
//! native resolution.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, DoubleConvBlock, ParamHandle, ParamStore, TiedConvTranspose};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Unet,
    Inter,
    Ae,
    Sae,
    Twi,
    Twae,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Unet, Variant::Inter, Variant::Ae, Variant::Sae, Variant::Twi, Variant::Twae];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::Inter => "inter",
            Variant::Ae => "ae",
            Variant::Sae => "sae",
            Variant::Twi => "twi",
            Variant::Twae => "twae",
        }
    }

    /// Whether training consumes the mask as a second input.
    pub fn has_mask_branch(self) -> bool {
        self != Variant::Unet
    }

    pub fn has_tied_decoder(self) -> bool {
        matches!(self, Variant::Twi | Variant::Twae)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown model variant `{s}` (expected one of unet, inter, ae, sae, twi, twae)"))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Resolution levels; the bottleneck is level `depth - 1`.
    pub depth: usize,
    /// Channels at level 0; doubles per level, capped at 8× base.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Stop gradients through the mask-branch intermediate outputs in the MSE terms.
    pub detach_mask_branch: bool,
    /// SAE/TWAE: also share the intermediate and final heads with the mask branch.
    pub share_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Unet,
            depth: 5,
            base_channels: 16,
            in_channels: 1,
            detach_mask_branch: false,
            share_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, ..Default::default() }
    }

    /// Channel count per level.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.depth).map(|l| (self.base_channels << l).min(8 * self.base_channels)).collect()
    }

    /// Required divisor of input height and width.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(1..=8).contains(&self.depth) {
            return Err(Error::Config(format!("unsupported depth {}", self.depth)));
        }
        if self.variant.has_mask_branch() && self.depth != crate::losses::LEVELS {
            return Err(Error::Config(format!(
                "variant {} needs depth {} (one intermediate pair per supervised level), got {}",
                self.variant,
                crate::losses::LEVELS,
                self.depth
            )));
        }
        Ok(())
    }
}

/// All heads of one forward pass. Heads a variant does not train are `None`.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub y: Var,
    pub y_prime: Option<Var>,
    /// Image-branch intermediate outputs, bottleneck first.
    pub y_j: Option<Vec<Var>>,
    /// Mask-branch intermediate outputs, same shapes as `y_j`.
    pub y_prime_j: Option<Vec<Var>>,
    pub x_tilde: Option<Var>,
    /// Per-level tied-decoder activations, deepest first; the last is `x_tilde`.
    /// Inspection only, no loss terms attach to them.
    pub x_tilde_j: Option<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<DoubleConvBlock>,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, in_channels: usize, chans: &[usize]) -> Result<Self> {
        let mut blocks = Vec::with_capacity(chans.len());
        let mut cin = in_channels;
        for (l, &c) in chans.iter().enumerate() {
            blocks.push(DoubleConvBlock::new(store, &format!("{prefix}enc.{l}"), cin, c)?);
            cin = c;
        }
        Ok(Self { blocks })
    }

    /// Feature map of every level; the last one is the bottleneck.
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = tape.maxpool2d(h, 2)?;
            }
            h = block.forward(tape, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    fn handles(&self, out: &mut BTreeSet<ParamHandle>) {
        for b in &self.blocks {
            push_block(b, out);
        }
    }
}

/// Expanding path. Index `i` works at level `depth - 2 - i`.
#[derive(Clone, Debug)]
struct Decoder {
    ups: Vec<Conv2d>,
    blocks: Vec<DoubleConvBlock>,
    skips: bool,
}

impl Decoder {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, chans: &[usize], skips: bool) -> Result<Self> {
        let depth = chans.len();
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for level in (0..depth.saturating_sub(1)).rev() {
            let c = chans[level];
            ups.push(Conv2d::new(store, &format!("{prefix}dec.{level}.up"), chans[level + 1], c, 3)?);
            let cin = if skips { 2 * c } else { c };
            blocks.push(DoubleConvBlock::new(store, &format!("{prefix}dec.{level}.block"), cin, c)?);
        }
        Ok(Self { ups, blocks, skips })
    }

    /// The same decoder at another graph site; every handle is shared.
    fn shared<T: Real>(&self, store: &ParamStore<T>) -> Self {
        let share_conv = |c: &Conv2d| Conv2d { weight: store.share(c.weight), bias: store.share(c.bias), ..*c };
        Self {
            ups: self.ups.iter().map(share_conv).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DoubleConvBlock { conv1: share_conv(&b.conv1), conv2: share_conv(&b.conv2) })
                .collect(),
            skips: self.skips,
        }
    }

    /// Output of every decoder block, deepest first.
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, feats: &[Var]) -> Result<Vec<Var>> {
        let depth = feats.len();
        let mut h = feats[depth - 1];
        let mut outs = Vec::with_capacity(depth - 1);
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let level = depth - 2 - i;
            let u = tape.upsample_nearest(h, 2)?;
            let u = up.forward(tape, u)?;
            let u = tape.relu(u);
            let input = if self.skips { tape.concat_channels(feats[level], u)? } else { u };
            h = block.forward(tape, input)?;
            outs.push(h);
        }
        Ok(outs)
    }

    fn handles(&self, out: &mut BTreeSet<ParamHandle>) {
        for c in &self.ups {
            push_conv(c, out);
        }
        for b in &self.blocks {
            push_block(b, out);
        }
    }
}

#[derive(Clone, Debug)]
struct Heads {
    /// One per level `j`, bottleneck first. Empty for the plain U-Net.
    levels: Vec<Conv2d>,
    last: Conv2d,
}

impl Heads {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, chans: &[usize], intermediate: bool) -> Result<Self> {
        let depth = chans.len();
        let mut levels = Vec::new();
        if intermediate {
            for j in 0..depth {
                let c = chans[depth - 1 - j];
                levels.push(Conv2d::new(store, &format!("{prefix}head.j{j}"), c, 1, 1)?);
            }
        }
        let last = Conv2d::new(store, &format!("{prefix}head.final"), chans[0], 1, 1)?;
        Ok(Self { levels, last })
    }

    fn handles(&self, out: &mut BTreeSet<ParamHandle>) {
        for c in self.levels.iter().chain(std::iter::once(&self.last)) {
            push_conv(c, out);
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    encoder: Encoder,
    decoder: Decoder,
    heads: Heads,
}

struct BranchOutputs {
    y: Var,
    y_j: Vec<Var>,
    bottleneck: Var,
}

impl Branch {
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<BranchOutputs> {
        let feats = self.encoder.forward(tape, x)?;
        let bottleneck = *feats.last().expect("depth >= 1");
        let dec = self.decoder.forward(tape, &feats)?;
        let mut y_j = Vec::with_capacity(self.heads.levels.len());
        for (j, head) in self.heads.levels.iter().enumerate() {
            let src = if j == 0 { bottleneck } else { dec[j - 1] };
            let logits = head.forward(tape, src)?;
            y_j.push(tape.sigmoid(logits));
        }
        let top = dec.last().copied().unwrap_or(bottleneck);
        let logits = self.heads.last.forward(tape, top)?;
        Ok(BranchOutputs { y: tape.sigmoid(logits), y_j, bottleneck })
    }

    fn handles(&self, out: &mut BTreeSet<ParamHandle>) {
        self.encoder.handles(out);
        self.decoder.handles(out);
        self.heads.handles(out);
    }
}

#[derive(Clone, Debug)]
enum MaskBranch {
    Absent,
    /// The image network run a second time on `m`.
    SameNetwork,
    Separate(Branch),
}

/// A built architecture. Holds parameter handles only; values live in the
/// [`ParamStore`] it was built against.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    image: Branch,
    mask: MaskBranch,
    /// Tied transposed convs, deepest level first.
    tied: Vec<TiedConvTranspose>,
}

impl Model {
    pub fn build<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let chans = config.channels();
        let supervised = config.variant.has_mask_branch();
        let image = Branch {
            encoder: Encoder::new(store, "", config.in_channels, &chans)?,
            decoder: Decoder::new(store, "", &chans, true)?,
            heads: Heads::new(store, "", &chans, supervised)?,
        };
        let mask = match config.variant {
            Variant::Unet => MaskBranch::Absent,
            Variant::Inter | Variant::Twi => MaskBranch::SameNetwork,
            Variant::Ae => MaskBranch::Separate(Branch {
                encoder: Encoder::new(store, "mask.", config.in_channels, &chans)?,
                decoder: Decoder::new(store, "mask.", &chans, false)?,
                heads: Heads::new(store, "mask.", &chans, true)?,
            }),
            Variant::Sae | Variant::Twae => {
                let encoder = Encoder::new(store, "mask.", config.in_channels, &chans)?;
                let decoder = image.decoder.shared(store);
                let heads = if config.share_heads {
                    Heads { levels: image.heads.levels.clone(), last: image.heads.last }
                } else {
                    Heads::new(store, "mask.", &chans, true)?
                };
                MaskBranch::Separate(Branch { encoder, decoder, heads })
            }
        };
        let mut tied = Vec::new();
        if config.variant.has_tied_decoder() {
            for level in (0..config.depth).rev() {
                let view = store.tie_transposed(image.encoder.blocks[level].conv1.weight)?;
                tied.push(TiedConvTranspose::new(store, &format!("tied.{level}"), view)?);
            }
        }
        Ok(Self { config: config.clone(), image, mask, tied })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Every parameter the model reads, each storage once.
    pub fn handles(&self) -> BTreeSet<ParamHandle> {
        let mut out = BTreeSet::new();
        self.image.handles(&mut out);
        if let MaskBranch::Separate(b) = &self.mask {
            b.handles(&mut out);
        }
        for t in &self.tied {
            out.insert(t.view.source());
            out.insert(t.bias);
        }
        out
    }

    /// Trainable scalar count, counting shared and tied storage once.
    pub fn parameter_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        self.handles().into_iter().map(|h| store.value(h).len()).sum()
    }

    /// Handles of the image-branch expanding path and heads that no other
    /// path reads. The tied reconstruction does not depend on these.
    pub fn expansion_only_handles(&self) -> BTreeSet<ParamHandle> {
        let mut out = BTreeSet::new();
        self.image.decoder.handles(&mut out);
        self.image.heads.handles(&mut out);
        out
    }

    /// Handles of the mask branch's own encoder (SAE/TWAE/AE).
    pub fn mask_encoder_handles(&self) -> BTreeSet<ParamHandle> {
        let mut out = BTreeSet::new();
        if let MaskBranch::Separate(b) = &self.mask {
            b.encoder.handles(&mut out);
        }
        out
    }

    /// Handles of the image decoder that the mask branch also reads.
    pub fn shared_decoder_handles(&self) -> BTreeSet<ParamHandle> {
        let mut image = BTreeSet::new();
        self.image.decoder.handles(&mut image);
        self.image.heads.handles(&mut image);
        let mut mask = BTreeSet::new();
        if let MaskBranch::Separate(b) = &self.mask {
            b.decoder.handles(&mut mask);
            b.heads.handles(&mut mask);
        }
        image.intersection(&mask).copied().collect()
    }

    /// Handles owned by the tied decoder (its biases).
    pub fn tied_bias_handles(&self) -> BTreeSet<ParamHandle> {
        self.tied.iter().map(|t| t.bias).collect()
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>, what: &'static str) -> Result<()> {
        let (_, c, h, w) = x.dims4("forward")?;
        let d = self.config.spatial_divisor();
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("{what} has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "forward",
                format!("{what} is {h}×{w}; extents must be divisible by {d} at depth {}", self.config.depth),
            ));
        }
        Ok(())
    }

    fn mask_input<T: Real>(&self, x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = m.dims4("forward")?;
        let (nx, _, hx, wx) = x.dims4("forward")?;
        if (n, h, w) != (nx, hx, wx) {
            return Err(Error::shape("forward", format!("mask {:?} does not match image {:?}", m.shape(), x.shape())));
        }
        let m =
            if c == 1 && self.config.in_channels > 1 { m.repeat_channels(self.config.in_channels)? } else { m.clone() };
        self.check_input(&m, "mask")?;
        Ok(m)
    }

    /// Training-time forward pass. `m` is required for every variant with a
    /// mask branch and ignored by the plain U-Net.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: &Tensor<T>,
        m: Option<&Tensor<T>>,
    ) -> Result<ForwardOutputs> {
        self.check_input(x, "image")?;
        let xv = tape.leaf(x.clone(), false);
        let img = self.image.forward(tape, xv)?;
        let mut out =
            ForwardOutputs { y: img.y, y_prime: None, y_j: None, y_prime_j: None, x_tilde: None, x_tilde_j: None };
        if self.config.variant.has_mask_branch() {
            let m = m.ok_or_else(|| {
                Error::invalid("forward", format!("variant {} needs the mask as a second input", self.config.variant))
            })?;
            let mv = tape.leaf(self.mask_input(x, m)?, false);
            let msk = match &self.mask {
                MaskBranch::SameNetwork => self.image.forward(tape, mv)?,
                MaskBranch::Separate(b) => b.forward(tape, mv)?,
                MaskBranch::Absent => unreachable!("variant with a mask branch"),
            };
            out.y_prime = Some(msk.y);
            out.y_j = Some(img.y_j);
            out.y_prime_j = Some(msk.y_j);
        }
        if !self.tied.is_empty() {
            let mut h = img.bottleneck;
            let mut levels = Vec::with_capacity(self.tied.len());
            for (i, layer) in self.tied.iter().enumerate() {
                if i > 0 {
                    h = tape.upsample_nearest(h, 2)?;
                }
                h = layer.forward(tape, h)?;
                h = if i + 1 < self.tied.len() { tape.relu(h) } else { tape.sigmoid(h) };
                levels.push(h);
            }
            out.x_tilde = Some(h);
            out.x_tilde_j = Some(levels);
        }
        Ok(out)
    }

    /// Inference: the image branch only.
    pub fn predict<T: Real>(&self, tape: &mut Tape<'_, T>, x: &Tensor<T>) -> Result<Var> {
        self.check_input(x, "image")?;
        let xv = tape.leaf(x.clone(), false);
        Ok(self.image.forward(tape, xv)?.y)
    }
}

fn push_conv(c: &Conv2d, out: &mut BTreeSet<ParamHandle>) {
    out.insert(c.weight);
    out.insert(c.bias);
}

fn push_block(b: &DoubleConvBlock, out: &mut BTreeSet<ParamHandle>) {
    push_conv(&b.conv1, out);
    push_conv(&b.conv2, out);
}
