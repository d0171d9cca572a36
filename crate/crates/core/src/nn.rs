//! Network construction: the VGG16-style encoder, the U-Net segmentation
//! model, the dense block and the pneumonia classifier.
//!
//! Models are ordered lists of named [`Block`]s. Each block owns its parameter
//! tensors and a trainable flag; the optimizer only touches trainable blocks.

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Conv layers per VGG16 block.
pub const VGG_CONVS: [usize; 5] = [2, 2, 3, 3, 3];
/// Channel multipliers of the VGG16 blocks relative to the base width.
pub const VGG_WIDTHS: [usize; 5] = [1, 2, 4, 8, 8];
pub const ENCODER_BLOCKS: [&str; 5] = ["enc1", "enc2", "enc3", "enc4", "enc5"];
pub const DECODER_BLOCKS: [&str; 4] = ["dec4", "dec3", "dec2", "dec1"];
pub const NUM_CLASSES: usize = 3;
/// Bottleneck factor of the dense-block 1x1 convolutions.
pub const DENSE_BOTTLENECK: usize = 4;
/// Smallest spatial side the models accept (four 2x2 pools down to 1x1).
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub dense_layers: usize,
    pub growth: usize,
}

impl Default for WidthConfig {
    fn default() -> Self {
        WidthConfig {
            in_channels: 1,
            base_channels: 64,
            dense_layers: 4,
            growth: 32,
        }
    }
}

impl WidthConfig {
    /// Reduced-width configuration for fast runs.
    pub fn desk(base_channels: usize) -> Self {
        WidthConfig {
            base_channels,
            ..Default::default()
        }
    }

    /// Full-width configuration with the three-channel input of an ImageNet VGG16.
    pub fn full_scale_rgb() -> Self {
        WidthConfig {
            in_channels: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "in_channels and base_channels must be >= 1".into(),
            ));
        }
        if self.growth == 0 {
            return Err(Error::Config("growth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoder_channels(&self, block: usize) -> usize {
        VGG_WIDTHS[block] * self.base_channels
    }

    /// Channels entering the dense block (output of enc4).
    pub fn dense_input_channels(&self) -> usize {
        self.encoder_channels(3)
    }

    pub fn dense_output_channels(&self) -> usize {
        self.dense_input_channels() + self.dense_layers * self.growth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Segmentation,
    Classifier,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Segmentation => "segmentation",
            ModelKind::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "segmentation" => Some(ModelKind::Segmentation),
            "classifier" => Some(ModelKind::Classifier),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// `convs` 3x3 conv + ReLU layers followed by a 2x2 max pool.
    Encoder { convs: usize },
    /// Nearest 2x upsample, skip concatenation, two 3x3 conv + ReLU layers.
    Decoder,
    /// 1x1 conv to one channel and a sigmoid.
    SegmentationHead,
    /// DenseNet-style composite layers (BN, ReLU, 1x1 conv, BN, ReLU, 3x3 conv).
    Dense { layers: usize, growth: usize },
    /// Global average pool and a fully connected layer to the class logits.
    ClassifierHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub name: String,
    pub kind: BlockKind,
    pub trainable: bool,
    pub params: Vec<Param<T>>,
    pub norms: Vec<NormState<T>>,
}

impl<T: Element> Block<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            p.value.bit_pattern().hash(&mut h);
        }
        h.finish()
    }

    fn push_conv(&mut self, name: String, cout: usize, cin: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng, std: f64) {
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: normal_tensor([cout, cin, k, k], std, rng),
        });
        if bias {
            self.params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros([cout]),
            });
        }
    }

    fn push_norm(&mut self, name: String, channels: usize) {
        self.params.push(Param {
            name: format!("{name}.gamma"),
            value: Tensor::full([channels], T::one()),
        });
        self.params.push(Param {
            name: format!("{name}.beta"),
            value: Tensor::zeros([channels]),
        });
        self.norms.push(NormState {
            name,
            stats: RunningStats::new(channels),
        });
    }
}

fn normal_tensor<T: Element>(shape: [usize; 4], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn empty_block<T>(name: &str, kind: BlockKind) -> Block<T> {
    Block {
        name: name.to_string(),
        kind,
        trainable: true,
        params: Vec::new(),
        norms: Vec::new(),
    }
}

/// The five VGG16 blocks: 3x3 convs (stride 1, pad 1, ReLU) and a closing 2x2 max pool.
pub fn build_vgg_encoder<T: Element>(width: &WidthConfig, rng: &mut ChaCha8Rng) -> Vec<Block<T>> {
    let mut cin = width.in_channels;
    let mut blocks = Vec::with_capacity(5);
    for (i, &convs) in VGG_CONVS.iter().enumerate() {
        let cout = width.encoder_channels(i);
        let mut block = empty_block(ENCODER_BLOCKS[i], BlockKind::Encoder { convs });
        for c in 0..convs {
            let name = format!("{}.conv{c}", ENCODER_BLOCKS[i]);
            block.push_conv(name, cout, cin, 3, true, rng, he_std(cin * 9));
            cin = cout;
        }
        blocks.push(block);
    }
    blocks
}

fn expected_encoder_shapes(width: &WidthConfig, block: usize) -> Vec<Vec<usize>> {
    let mut cin = if block == 0 {
        width.in_channels
    } else {
        width.encoder_channels(block - 1)
    };
    let cout = width.encoder_channels(block);
    let mut shapes = Vec::new();
    for _ in 0..VGG_CONVS[block] {
        shapes.push(vec![cout, cin, 3, 3]);
        shapes.push(vec![cout]);
        cin = cout;
    }
    shapes
}

fn check_encoder_block<T: Element>(block: &Block<T>, width: &WidthConfig, index: usize) -> Result<()> {
    let expected = expected_encoder_shapes(width, index);
    if block.name != ENCODER_BLOCKS[index] {
        return Err(Error::UnknownBlock(block.name.clone()));
    }
    for (i, shape) in expected.iter().enumerate() {
        match block.params.get(i) {
            Some(p) if p.value.shape() == shape.as_slice() => {}
            Some(p) => {
                return Err(Error::Transfer {
                    tensor: p.name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                })
            }
            None => {
                return Err(Error::Transfer {
                    tensor: format!("{}[{i}]", block.name),
                    expected: shape.clone(),
                    found: vec![],
                })
            }
        }
    }
    if block.params.len() != expected.len() {
        return Err(Error::Transfer {
            tensor: block.params[expected.len()].name.clone(),
            expected: vec![],
            found: block.params[expected.len()].value.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Which parameters are recorded as requiring gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrads {
    Trainable,
    All,
    None,
}

#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub block: usize,
    pub norm: usize,
    pub stats: RunningStats<T>,
}

/// Result of a recorded forward pass.
#[derive(Debug)]
pub struct Forward<T> {
    pub output: Var,
    /// Tape handle of every parameter, indexed `[block][param]`.
    pub params: Vec<Vec<Var>>,
    /// Named intermediate activations (encoder pre-pool outputs, dense-block convs).
    pub taps: Vec<(String, Var)>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

impl<T> Forward<T> {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub per_block: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn of_blocks(&self, names: &[&str]) -> usize {
        self.per_block
            .iter()
            .filter(|(n, _)| names.contains(&n.as_str()))
            .map(|(_, c)| c)
            .sum()
    }
}

pub trait Model<T: Element> {
    fn kind(&self) -> ModelKind;
    fn width(&self) -> &WidthConfig;
    fn blocks(&self) -> &[Block<T>];
    fn blocks_mut(&mut self) -> &mut [Block<T>];

    /// Records the forward pass on `tape`. Never mutates the model; batch-norm
    /// statistics computed in [`Mode::Train`] are returned in the [`Forward`].
    fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode, grads: ParamGrads) -> Result<Forward<T>>;

    /// Names of blocks that are never frozen by an unfreeze schedule.
    fn always_trainable(&self) -> Vec<String> {
        self.blocks()
            .iter()
            .filter(|b| !matches!(b.kind, BlockKind::Encoder { .. }))
            .map(|b| b.name.clone())
            .collect()
    }

    fn encoder_block_names(&self) -> Vec<String> {
        self.blocks()
            .iter()
            .filter(|b| matches!(b.kind, BlockKind::Encoder { .. }))
            .map(|b| b.name.clone())
            .collect()
    }

    fn block(&self, name: &str) -> Result<&Block<T>> {
        self.blocks()
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    /// Sets the trainable flag of exactly the named blocks.
    fn set_trainable(&mut self, names: &[&str], flag: bool) -> Result<()> {
        for n in names {
            self.block(n)?;
        }
        for b in self.blocks_mut() {
            if names.contains(&b.name.as_str()) {
                b.trainable = flag;
            }
        }
        Ok(())
    }

    /// Makes exactly `names` trainable and freezes everything else.
    fn set_trainable_only(&mut self, names: &BTreeSet<String>) -> Result<()> {
        for n in names {
            self.block(n)?;
        }
        for b in self.blocks_mut() {
            b.trainable = names.contains(&b.name);
        }
        Ok(())
    }

    fn param_count(&self) -> ParamCount {
        let per_block: Vec<(String, usize)> = self
            .blocks()
            .iter()
            .map(|b| (b.name.clone(), b.param_count()))
            .collect();
        ParamCount {
            total: per_block.iter().map(|(_, c)| c).sum(),
            per_block,
        }
    }

    fn trainable_param_count(&self) -> usize {
        self.blocks()
            .iter()
            .filter(|b| b.trainable)
            .map(Block::param_count)
            .sum()
    }

    fn block_fingerprint(&self, name: &str) -> Result<u64> {
        Ok(self.block(name)?.fingerprint())
    }

    fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        let blocks = self.blocks_mut();
        for u in updates {
            blocks[u.block].norms[u.norm].stats = u.stats;
        }
    }

    /// Forward in [`Mode::Train`] that also commits the batch-norm statistics.
    fn forward_train(&mut self, tape: &mut Tape<T>, input: Var, grads: ParamGrads) -> Result<Forward<T>> {
        let mut fwd = self.forward(tape, input, Mode::Train, grads)?;
        self.apply_stat_updates(std::mem::take(&mut fwd.stat_updates));
        Ok(fwd)
    }
}

fn check_input<T: Element>(tape: &Tape<T>, input: Var, width: &WidthConfig) -> Result<()> {
    let (_, c, h, w) = tape.value(input).dims4()?;
    if c != width.in_channels {
        return Err(Error::dim(format!(
            "model expects {} input channels, got {c}",
            width.in_channels
        )));
    }
    for side in [h, w] {
        if !side.is_power_of_two() || side < MIN_SIDE {
            return Err(Error::dim(format!(
                "input spatial size {h}x{w} must be powers of two >= {MIN_SIDE}"
            )));
        }
    }
    Ok(())
}

struct Recorder<'a, T: Element> {
    tape: &'a mut Tape<T>,
    blocks: &'a [Block<T>],
    mode: Mode,
    params: Vec<Vec<Var>>,
    taps: Vec<(String, Var)>,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Element> Recorder<'a, T> {
    fn new(tape: &'a mut Tape<T>, blocks: &'a [Block<T>], mode: Mode, grads: ParamGrads) -> Self {
        let params = blocks
            .iter()
            .map(|b| {
                let rg = match grads {
                    ParamGrads::All => true,
                    ParamGrads::Trainable => b.trainable,
                    ParamGrads::None => false,
                };
                b.params.iter().map(|p| tape.param(&p.value, rg)).collect()
            })
            .collect();
        Recorder {
            tape,
            blocks,
            mode,
            params,
            taps: Vec::new(),
            updates: Vec::new(),
        }
    }

    fn p(&self, block: usize, idx: usize) -> Var {
        self.params[block][idx]
    }

    fn conv_relu(&mut self, x: Var, block: usize, idx: usize) -> Result<Var> {
        let (w, b) = (self.p(block, idx), self.p(block, idx + 1));
        let y = self.tape.conv2d(x, w, Some(b), 1, 1)?;
        Ok(self.tape.relu(y))
    }

    /// Conv stack of an encoder block; returns the pre-pool activation.
    fn encoder(&mut self, x: Var, block: usize) -> Result<Var> {
        let BlockKind::Encoder { convs } = self.blocks[block].kind else {
            return Err(Error::UnknownBlock(self.blocks[block].name.clone()));
        };
        let mut h = x;
        for c in 0..convs {
            h = self.conv_relu(h, block, 2 * c)?;
        }
        self.taps.push((self.blocks[block].name.clone(), h));
        Ok(h)
    }

    fn decoder(&mut self, x: Var, skip: Var, block: usize) -> Result<Var> {
        let up = self.tape.upsample_nearest2x(x)?;
        let cat = self.tape.concat_channels(up, skip)?;
        let h = self.conv_relu(cat, block, 0)?;
        let h = self.conv_relu(h, block, 2)?;
        self.taps.push((self.blocks[block].name.clone(), h));
        Ok(h)
    }

    fn norm(&mut self, x: Var, block: usize, param: usize, norm: usize) -> Result<Var> {
        let (g, b) = (self.p(block, param), self.p(block, param + 1));
        let state = &self.blocks[block].norms[norm];
        match self.mode {
            Mode::Train => {
                let mut stats = state.stats.clone();
                let y = self.tape.batch_norm_train(x, g, b, &mut stats)?;
                self.updates.push(StatUpdate { block, norm, stats });
                Ok(y)
            }
            Mode::Eval => {
                let name = state.name.clone();
                self.tape.batch_norm_eval(x, g, b, &state.stats, &name)
            }
        }
    }

    fn dense_block(&mut self, x: Var, block: usize) -> Result<Var> {
        let BlockKind::Dense { layers, .. } = self.blocks[block].kind else {
            return Err(Error::UnknownBlock(self.blocks[block].name.clone()));
        };
        let name = self.blocks[block].name.clone();
        let mut features = x;
        for l in 0..layers {
            let base = 6 * l;
            let h = self.norm(features, block, base, 2 * l)?;
            let h = self.tape.relu(h);
            let h = self.tape.conv2d(h, self.p(block, base + 2), None, 1, 0)?;
            let h = self.norm(h, block, base + 3, 2 * l + 1)?;
            let h = self.tape.relu(h);
            let h = self.tape.conv2d(h, self.p(block, base + 5), None, 1, 1)?;
            self.taps.push((format!("{name}.layer{l}"), h));
            if l + 1 == layers {
                self.taps.push((name.clone(), h));
            }
            features = self.tape.concat_channels(features, h)?;
        }
        self.taps.push((format!("{name}.concat"), features));
        Ok(features)
    }

    fn finish(self, output: Var) -> Forward<T> {
        Forward {
            output,
            params: self.params,
            taps: self.taps,
            stat_updates: self.updates,
        }
    }
}

/// U-Net with a VGG16 encoder: enc1..enc4 feed skip connections, enc5 (without
/// its pool) is the bottleneck, dec4..dec1 mirror the encoder widths.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel<T> {
    width: WidthConfig,
    blocks: Vec<Block<T>>,
}

pub fn build_unet<T: Element>(
    encoder: Vec<Block<T>>,
    width: &WidthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentationModel<T>> {
    width.validate()?;
    if encoder.len() != 5 {
        return Err(Error::dim(format!(
            "U-Net needs 5 encoder blocks, got {}",
            encoder.len()
        )));
    }
    for (i, b) in encoder.iter().enumerate() {
        check_encoder_block(b, width, i)?;
    }
    let mut blocks = encoder;
    // dec_i: up(prev) ++ skip_i -> enc_i width
    for (j, name) in DECODER_BLOCKS.iter().enumerate() {
        let level = 3 - j;
        let below = width.encoder_channels(level + 1);
        let skip = width.encoder_channels(level);
        let cin = below + skip;
        let cout = skip;
        let mut block = empty_block(name, BlockKind::Decoder);
        block.push_conv(format!("{name}.conv0"), cout, cin, 3, true, rng, he_std(cin * 9));
        block.push_conv(format!("{name}.conv1"), cout, cout, 3, true, rng, he_std(cout * 9));
        blocks.push(block);
    }
    let b = width.base_channels;
    let mut head = empty_block("head", BlockKind::SegmentationHead);
    head.push_conv("head.conv".into(), 1, b, 1, true, rng, (1.0 / b as f64).sqrt());
    blocks.push(head);
    Ok(SegmentationModel {
        width: *width,
        blocks,
    })
}

impl<T: Element> SegmentationModel<T> {
    pub fn new(width: &WidthConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = build_vgg_encoder(width, &mut rng);
        build_unet(enc, width, &mut rng)
    }

    /// Zeroes the 1x1 output conv so every output is exactly sigmoid(0) = 0.5.
    pub fn zero_head(&mut self) {
        for p in &mut self.blocks.last_mut().expect("head").params {
            p.value.data_mut().fill(T::zero());
        }
    }
}

impl<T: Element> Model<T> for SegmentationModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Segmentation
    }

    fn width(&self) -> &WidthConfig {
        &self.width
    }

    fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode, grads: ParamGrads) -> Result<Forward<T>> {
        check_input(tape, input, &self.width)?;
        let mut r = Recorder::new(tape, &self.blocks, mode, grads);
        let mut skips = Vec::with_capacity(4);
        let mut x = input;
        for i in 0..4 {
            let s = r.encoder(x, i)?;
            skips.push(s);
            x = r.tape.max_pool2d(s, 2, 2)?;
        }
        x = r.encoder(x, 4)?;
        for j in 0..4 {
            x = r.decoder(x, skips[3 - j], 5 + j)?;
        }
        let head = 9;
        let logits = r.tape.conv2d(x, r.p(head, 0), Some(r.p(head, 1)), 1, 0)?;
        let out = r.tape.sigmoid(logits);
        Ok(r.finish(out))
    }
}

/// VGG16 blocks enc1..enc4, one dense block and a linear head over pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    width: WidthConfig,
    blocks: Vec<Block<T>>,
}

pub fn build_classifier<T: Element>(
    encoder: Vec<Block<T>>,
    width: &WidthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierModel<T>> {
    width.validate()?;
    if encoder.len() != 4 {
        return Err(Error::dim(format!(
            "classifier needs encoder blocks enc1..enc4, got {}",
            encoder.len()
        )));
    }
    for (i, b) in encoder.iter().enumerate() {
        check_encoder_block(b, width, i)?;
    }
    let mut blocks = encoder;
    let (layers, growth) = (width.dense_layers, width.growth);
    let inner = DENSE_BOTTLENECK * growth;
    let mut dense = empty_block("dense_block", BlockKind::Dense { layers, growth });
    for l in 0..layers {
        let cin = width.dense_input_channels() + l * growth;
        let p = format!("dense_block.layer{l}");
        dense.push_norm(format!("{p}.norm1"), cin);
        dense.push_conv(format!("{p}.conv1"), inner, cin, 1, false, rng, he_std(cin));
        dense.push_norm(format!("{p}.norm2"), inner);
        dense.push_conv(format!("{p}.conv2"), growth, inner, 3, false, rng, he_std(inner * 9));
    }
    blocks.push(dense);
    let features = width.dense_output_channels();
    let mut head = empty_block("head", BlockKind::ClassifierHead);
    let std = (1.0 / features as f64).sqrt();
    head.params.push(Param {
        name: "head.fc.weight".into(),
        value: Tensor::from_fn([features, NUM_CLASSES], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        }),
    });
    head.params.push(Param {
        name: "head.fc.bias".into(),
        value: Tensor::zeros([NUM_CLASSES]),
    });
    blocks.push(head);
    Ok(ClassifierModel {
        width: *width,
        blocks,
    })
}

impl<T: Element> ClassifierModel<T> {
    /// Classifier with a randomly initialized encoder (the from-scratch path).
    pub fn new(width: &WidthConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = build_vgg_encoder(width, &mut rng);
        enc.truncate(4);
        build_classifier(enc, width, &mut rng)
    }

    /// Classifier whose encoder is copied from a segmentation model. The dense
    /// block and head match `ClassifierModel::new(seg.width(), seed)` exactly.
    pub fn from_segmentation(seg: &SegmentationModel<T>, seed: u64) -> Result<Self> {
        let mut m = Self::new(seg.width(), seed)?;
        transfer_encoder_weights(seg, &mut m)?;
        Ok(m)
    }

    /// Marks every batch-norm layer as having usable running statistics.
    pub fn mark_stats_initialized(&mut self) {
        for b in &mut self.blocks {
            for n in &mut b.norms {
                n.stats.initialized = true;
            }
        }
    }
}

impl<T: Element> Model<T> for ClassifierModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Classifier
    }

    fn width(&self) -> &WidthConfig {
        &self.width
    }

    fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    fn forward(&self, tape: &mut Tape<T>, input: Var, mode: Mode, grads: ParamGrads) -> Result<Forward<T>> {
        check_input(tape, input, &self.width)?;
        let mut r = Recorder::new(tape, &self.blocks, mode, grads);
        let mut x = input;
        for i in 0..4 {
            let s = r.encoder(x, i)?;
            x = r.tape.max_pool2d(s, 2, 2)?;
        }
        x = r.dense_block(x, 4)?;
        let pooled = r.tape.global_avg_pool(x)?;
        let logits = r.tape.dense(pooled, r.p(5, 0), r.p(5, 1))?;
        Ok(r.finish(logits))
    }
}

/// Copies enc1..enc4 of `source` into `target` bit for bit. Nothing is
/// modified unless every tensor shape matches.
pub fn transfer_encoder_weights<T: Element>(
    source: &SegmentationModel<T>,
    target: &mut ClassifierModel<T>,
) -> Result<()> {
    for i in 0..4 {
        let (s, t) = (&source.blocks[i], &target.blocks[i]);
        if s.params.len() != t.params.len() {
            return Err(Error::Transfer {
                tensor: t.name.clone(),
                expected: vec![t.params.len()],
                found: vec![s.params.len()],
            });
        }
        for (sp, tp) in s.params.iter().zip(&t.params) {
            if sp.name != tp.name || sp.value.shape() != tp.value.shape() {
                return Err(Error::Transfer {
                    tensor: tp.name.clone(),
                    expected: tp.value.shape().to_vec(),
                    found: sp.value.shape().to_vec(),
                });
            }
        }
    }
    for i in 0..4 {
        for (sp, tp) in source.blocks[i]
            .params
            .iter()
            .zip(target.blocks[i].params.iter_mut())
        {
            tp.value.data_mut().copy_from_slice(sp.value.data());
        }
    }
    Ok(())
}
