//! A minimal from-scratch deep-learning engine: an inception-style
//! convolutional classifier over 3-channel square images, softmax
//! cross-entropy, SGDM/ADAM/RMSPROP optimizers, and a deterministic
//! minibatch training loop.
//!
//! The network is `stem conv 3x3 -> maxpool 2 -> [inception block ->
//! maxpool 2]* -> flatten -> dropout -> linear -> softmax`. The head keeps
//! the final feature map's spatial layout instead of average-pooling it
//! away: the image embeddings place their discriminative entries at fixed
//! coordinates, and position-aware head weights let a short training budget
//! exploit that directly.
//! Each inception block runs four parallel branches (1x1, 3x3, 5x5
//! convolutions and a max-pooled 1x1 projection), concatenates them along
//! the channel axis, and applies the configured activation both after every
//! convolution and again after the concatenation. All arithmetic is 64-bit.

pub mod activation;
pub mod ops;

pub use activation::{sigmoid, swish, ActivationKind};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::image::ImageTensor;
use crate::dataset::{Dataset, EmbedKind};
use crate::error::{Error, Result};
use crate::util;
use ops::pooled_side;

// --- architecture ------------------------------------------------------------

/// Branch widths of one inception block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    /// 1x1 convolution branch width.
    pub b1: usize,
    /// 3x3 convolution branch width.
    pub b3: usize,
    /// 5x5 convolution branch width.
    pub b5: usize,
    /// Width of the 1x1 projection applied to the max-pooled input.
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.pool_proj
    }
}

/// Full architecture description; the parameter vector layout is derived
/// from this deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_side: usize,
    pub input_channels: usize,
    /// Output channels of the 3x3 stem convolution.
    pub stem_width: usize,
    pub inception_blocks: Vec<InceptionSpec>,
    pub dropout_rate: f64,
    /// Output classes: unassigned plus one per RF chain.
    pub n_classes: usize,
    pub activation: ActivationKind,
}

impl NetworkSpec {
    /// The classifier used for desk-scale experiments (32x32 inputs).
    pub fn desk(n_classes: usize, activation: ActivationKind) -> Self {
        NetworkSpec {
            input_side: 32,
            input_channels: 3,
            stem_width: 6,
            inception_blocks: vec![
                InceptionSpec { b1: 4, b3: 6, b5: 3, pool_proj: 3 },
                InceptionSpec { b1: 6, b3: 8, b5: 4, pool_proj: 4 },
            ],
            dropout_rate: 0.4,
            n_classes,
            activation,
        }
    }

    /// A slimmer variant for 16x16 inputs, used for ensemble weak learners.
    pub fn compact(n_classes: usize, activation: ActivationKind) -> Self {
        NetworkSpec {
            input_side: 16,
            input_channels: 3,
            stem_width: 4,
            inception_blocks: vec![InceptionSpec { b1: 4, b3: 5, b5: 2, pool_proj: 3 }],
            dropout_rate: 0.4,
            n_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if self.input_channels == 0 || self.stem_width == 0 {
            return Err(Error::invalid("channel widths must be at least 1"));
        }
        if self.inception_blocks.is_empty() {
            return Err(Error::invalid("need at least one inception block"));
        }
        for blk in &self.inception_blocks {
            if blk.b1 == 0 || blk.b3 == 0 || blk.b5 == 0 || blk.pool_proj == 0 {
                return Err(Error::invalid("inception branch widths must be at least 1"));
            }
        }
        // One 2x pool after the stem and after every block.
        if self.input_side >> (1 + self.inception_blocks.len()) == 0 {
            return Err(Error::invalid(format!(
                "input side {} too small for {} pooling stages",
                self.input_side,
                1 + self.inception_blocks.len()
            )));
        }
        Ok(())
    }

    /// Working spatial side at each stage: `[stem, block 0, ..., block B-1,
    /// pooled output fed to global average pooling]`.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut sides = vec![self.input_side];
        let mut s = self.input_side;
        for _ in 0..=self.inception_blocks.len() {
            s = pooled_side(s, 2, 2, 0);
            sides.push(s);
        }
        sides
    }

    /// Channels entering each block, plus the final (head input) width.
    pub fn stage_channels(&self) -> Vec<usize> {
        let mut chans = vec![self.stem_width];
        for blk in &self.inception_blocks {
            chans.push(blk.out_channels());
        }
        chans
    }

    pub fn layout(&self) -> Layout {
        let mut off = 0usize;
        let mut seg = |len: usize| -> Range<usize> {
            let r = off..off + len;
            off += len;
            r
        };
        let stem_w = seg(self.stem_width * self.input_channels * 9);
        let stem_b = seg(self.stem_width);
        let mut blocks = Vec::with_capacity(self.inception_blocks.len());
        let mut c = self.stem_width;
        for blk in &self.inception_blocks {
            blocks.push(BlockLayout {
                b1_w: seg(blk.b1 * c),
                b1_b: seg(blk.b1),
                b3_w: seg(blk.b3 * c * 9),
                b3_b: seg(blk.b3),
                b5_w: seg(blk.b5 * c * 25),
                b5_b: seg(blk.b5),
                pp_w: seg(blk.pool_proj * c),
                pp_b: seg(blk.pool_proj),
            });
            c = blk.out_channels();
        }
        let s_last = *self.stage_sides().last().unwrap();
        let head_w = seg(self.n_classes * c * s_last * s_last);
        let head_b = seg(self.n_classes);
        Layout { stem_w, stem_b, blocks, head_w, head_b, total: off }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Parameter indices of the final linear layer (the part retrained when
    /// fine-tuning a checkpoint).
    pub fn head_range(&self) -> Range<usize> {
        let lay = self.layout();
        lay.head_w.start..lay.head_b.end
    }

    /// He-uniform weights (`limit = sqrt(6 / fan_in)`), zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let lay = self.layout();
        let mut params = vec![0.0; lay.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |w: &Range<usize>, fan_in: usize, params: &mut [f64]| {
            let limit = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[w.clone()] {
                *p = rng.random_range(-limit..limit);
            }
        };
        he(&lay.stem_w, self.input_channels * 9, &mut params);
        let mut c = self.stem_width;
        for (blk, bl) in self.inception_blocks.iter().zip(&lay.blocks) {
            he(&bl.b1_w, c, &mut params);
            he(&bl.b3_w, c * 9, &mut params);
            he(&bl.b5_w, c * 25, &mut params);
            he(&bl.pp_w, c, &mut params);
            c = blk.out_channels();
        }
        let s_last = *self.stage_sides().last().unwrap();
        he(&lay.head_w, c * s_last * s_last, &mut params);
        params
    }
}

/// Parameter-vector ranges of every layer, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub stem_w: Range<usize>,
    pub stem_b: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub b1_w: Range<usize>,
    pub b1_b: Range<usize>,
    pub b3_w: Range<usize>,
    pub b3_b: Range<usize>,
    pub b5_w: Range<usize>,
    pub b5_b: Range<usize>,
    pub pp_w: Range<usize>,
    pub pp_b: Range<usize>,
}

/// A trained (or freshly initialized) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
    pub training_log: TrainLog,
}

impl ClassifierModel {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(seed);
        Ok(ClassifierModel { spec, params, training_log: TrainLog::default() })
    }
}

// --- image sources ------------------------------------------------------------

/// A supply of labeled 3-channel square images. Implementations may hold
/// materialized tensors or expand compact feature vectors on demand.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn side(&self) -> usize;
    fn class_count(&self) -> usize;
    fn label(&self, i: usize) -> u8;
    /// Writes sample `i` as CHW into `out` (`3 * side * side` entries).
    fn write_image(&self, i: usize, out: &mut [f64]) -> Result<()>;
}

/// Materialized image tensors; convenient for small sets and tests.
pub struct TensorSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

impl ImageSource for TensorSet {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn side(&self) -> usize {
        self.images.first().map_or(0, |t| t.height)
    }
    fn class_count(&self) -> usize {
        self.class_count
    }
    fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }
    fn write_image(&self, i: usize, out: &mut [f64]) -> Result<()> {
        let t = &self.images[i];
        if t.data.len() != out.len() {
            return Err(Error::invalid("image size mismatch"));
        }
        out.copy_from_slice(&t.data);
        Ok(())
    }
}

/// Lazily expands dataset feature vectors into image tensors, so a full
/// image set never has to be materialized in memory.
pub struct DatasetImages<'a> {
    ds: &'a Dataset,
    side: usize,
    kind: EmbedKind,
}

impl<'a> DatasetImages<'a> {
    pub fn new(ds: &'a Dataset, side: usize, kind: EmbedKind) -> Self {
        DatasetImages { ds, side, kind }
    }
}

impl ImageSource for DatasetImages<'_> {
    fn len(&self) -> usize {
        self.ds.samples.len()
    }
    fn side(&self) -> usize {
        self.side
    }
    fn class_count(&self) -> usize {
        self.ds.class_count
    }
    fn label(&self, i: usize) -> u8 {
        self.ds.samples[i].label
    }
    fn write_image(&self, i: usize, out: &mut [f64]) -> Result<()> {
        let img = self.ds.image(i, self.side, self.kind)?;
        if img.data.len() != out.len() {
            return Err(Error::invalid("image size mismatch"));
        }
        out.copy_from_slice(&img.data);
        Ok(())
    }
}

/// A re-indexed view over another source (sample subsets, held-out slices).
pub struct SubsetSource<'a> {
    base: &'a dyn ImageSource,
    indices: Vec<usize>,
}

impl<'a> SubsetSource<'a> {
    pub fn new(base: &'a dyn ImageSource, indices: Vec<usize>) -> Self {
        SubsetSource { base, indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl ImageSource for SubsetSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn side(&self) -> usize {
        self.base.side()
    }
    fn class_count(&self) -> usize {
        self.base.class_count()
    }
    fn label(&self, i: usize) -> u8 {
        self.base.label(self.indices[i])
    }
    fn write_image(&self, i: usize, out: &mut [f64]) -> Result<()> {
        self.base.write_image(self.indices[i], out)
    }
}

// --- forward / backward --------------------------------------------------------

/// Per-sample forward state, preallocated once and reused across samples.
struct Tape {
    input: Vec<f64>,
    stem_pre: Vec<f64>,
    stem_act: Vec<f64>,
    stem_pool: Vec<f64>,
    stem_idx: Vec<usize>,
    blocks: Vec<BlockTape>,
    mask: Vec<f64>,
    dropped: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

struct BlockTape {
    b1_pre: Vec<f64>,
    b3_pre: Vec<f64>,
    b5_pre: Vec<f64>,
    bp_pre: Vec<f64>,
    pool_out: Vec<f64>,
    pool_idx: Vec<usize>,
    /// Activated branch outputs, concatenated (pre-value of the concat
    /// activation).
    concat_pre: Vec<f64>,
    concat_act: Vec<f64>,
    down: Vec<f64>,
    down_idx: Vec<usize>,
}

impl Tape {
    fn new(spec: &NetworkSpec) -> Self {
        let sides = spec.stage_sides();
        let chans = spec.stage_channels();
        let s0 = sides[0] * sides[0];
        let mut blocks = Vec::with_capacity(spec.inception_blocks.len());
        for (i, blk) in spec.inception_blocks.iter().enumerate() {
            let s = sides[i + 1] * sides[i + 1];
            let sd = sides[i + 2] * sides[i + 2];
            let c_in = chans[i];
            let c_out = blk.out_channels();
            blocks.push(BlockTape {
                b1_pre: vec![0.0; blk.b1 * s],
                b3_pre: vec![0.0; blk.b3 * s],
                b5_pre: vec![0.0; blk.b5 * s],
                bp_pre: vec![0.0; blk.pool_proj * s],
                pool_out: vec![0.0; c_in * s],
                pool_idx: vec![0; c_in * s],
                concat_pre: vec![0.0; c_out * s],
                concat_act: vec![0.0; c_out * s],
                down: vec![0.0; c_out * sd],
                down_idx: vec![0; c_out * sd],
            });
        }
        let s1 = sides[1] * sides[1];
        let flat = *chans.last().unwrap() * sides.last().unwrap() * sides.last().unwrap();
        Tape {
            input: vec![0.0; spec.input_channels * s0],
            stem_pre: vec![0.0; spec.stem_width * s0],
            stem_act: vec![0.0; spec.stem_width * s0],
            stem_pool: vec![0.0; spec.stem_width * s1],
            stem_idx: vec![0; spec.stem_width * s1],
            blocks,
            mask: vec![1.0; flat],
            dropped: vec![0.0; flat],
            logits: vec![0.0; spec.n_classes],
            probs: vec![0.0; spec.n_classes],
        }
    }
}

fn apply_act_into(act: ActivationKind, pre: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(pre) {
        *o = act.apply(x);
    }
}

/// One forward pass; `dropout_rng` enables train-mode inverted dropout.
fn forward_sample(
    spec: &NetworkSpec,
    lay: &Layout,
    params: &[f64],
    image: &[f64],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    tape: &mut Tape,
) {
    let act = spec.activation;
    let sides = spec.stage_sides();
    let chans = spec.stage_channels();
    tape.input.copy_from_slice(image);

    // Stem: 3x3 conv, activation, 2x2 stride-2 pool.
    ops::conv2d_forward(
        &tape.input,
        spec.input_channels,
        sides[0],
        &params[lay.stem_w.clone()],
        &params[lay.stem_b.clone()],
        spec.stem_width,
        3,
        &mut tape.stem_pre,
    );
    apply_act_into(act, &tape.stem_pre, &mut tape.stem_act);
    ops::maxpool_forward(
        &tape.stem_act,
        spec.stem_width,
        sides[0],
        2,
        2,
        0,
        &mut tape.stem_pool,
        &mut tape.stem_idx,
    );

    for (i, (blk, bl)) in spec.inception_blocks.iter().zip(&lay.blocks).enumerate() {
        let side = sides[i + 1];
        let ss = side * side;
        let c_in = chans[i];
        // The block input lives in the previous stage's buffer; split the
        // slice so the immutable read and the mutable tape coexist.
        let (done, rest) = tape.blocks.split_at_mut(i);
        let t = &mut rest[0];
        let input: &[f64] = if i == 0 { &tape.stem_pool } else { &done[i - 1].down };

        // Branches.
        ops::conv2d_forward(
            input, c_in, side,
            &params[bl.b1_w.clone()], &params[bl.b1_b.clone()],
            blk.b1, 1, &mut t.b1_pre,
        );
        ops::conv2d_forward(
            input, c_in, side,
            &params[bl.b3_w.clone()], &params[bl.b3_b.clone()],
            blk.b3, 3, &mut t.b3_pre,
        );
        ops::conv2d_forward(
            input, c_in, side,
            &params[bl.b5_w.clone()], &params[bl.b5_b.clone()],
            blk.b5, 5, &mut t.b5_pre,
        );
        ops::maxpool_forward(input, c_in, side, 3, 1, 1, &mut t.pool_out, &mut t.pool_idx);
        ops::conv2d_forward(
            &t.pool_out, c_in, side,
            &params[bl.pp_w.clone()], &params[bl.pp_b.clone()],
            blk.pool_proj, 1, &mut t.bp_pre,
        );

        // Concatenate activated branches, then activate the concatenation.
        let (o1, o3, o5, op) = (blk.b1 * ss, (blk.b1 + blk.b3) * ss, (blk.b1 + blk.b3 + blk.b5) * ss, blk.out_channels() * ss);
        apply_act_into(act, &t.b1_pre, &mut t.concat_pre[..o1]);
        apply_act_into(act, &t.b3_pre, &mut t.concat_pre[o1..o3]);
        apply_act_into(act, &t.b5_pre, &mut t.concat_pre[o3..o5]);
        apply_act_into(act, &t.bp_pre, &mut t.concat_pre[o5..op]);
        apply_act_into(act, &t.concat_pre, &mut t.concat_act);

        ops::maxpool_forward(
            &t.concat_act,
            blk.out_channels(),
            side,
            2,
            2,
            0,
            &mut t.down,
            &mut t.down_idx,
        );
    }

    let flat_side = *sides.last().unwrap();
    let flat_n = *chans.last().unwrap() * flat_side * flat_side;

    // Inverted dropout on the flattened final map: scale kept units by
    // 1/(1-rate) so the expected activation matches eval mode.
    match dropout_rng.as_deref_mut() {
        Some(rng) if spec.dropout_rate > 0.0 => {
            let keep_scale = 1.0 / (1.0 - spec.dropout_rate);
            for m in &mut tape.mask {
                *m = if rng.random::<f64>() < spec.dropout_rate { 0.0 } else { keep_scale };
            }
        }
        _ => tape.mask.fill(1.0),
    }
    let flat = &tape.blocks.last().unwrap().down;
    for i in 0..flat_n {
        tape.dropped[i] = flat[i] * tape.mask[i];
    }

    let w = &params[lay.head_w.clone()];
    let b = &params[lay.head_b.clone()];
    for j in 0..spec.n_classes {
        let row = &w[j * flat_n..(j + 1) * flat_n];
        tape.logits[j] =
            b[j] + row.iter().zip(&tape.dropped).map(|(a, x)| a * x).sum::<f64>();
    }
    softmax_into(&tape.logits, &mut tape.probs);
}

/// Cross-entropy of the true-class probability. The finiteness check matters:
/// `f64::max` ignores NaN, so clamping alone would silently turn a diverged
/// probability into a finite loss.
pub(crate) fn ce_term(p: f64) -> f64 {
    if p.is_finite() {
        -p.max(f64::MIN_POSITIVE).ln()
    } else {
        f64::NAN
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax_into(logits: &[f64], probs: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - m).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
}

/// Backward pass for one sample. `d_logits` must already carry the batch
/// scaling; gradients accumulate into `grads` (same layout as `params`).
fn backward_sample(
    spec: &NetworkSpec,
    lay: &Layout,
    params: &[f64],
    tape: &Tape,
    d_logits: &[f64],
    grads: &mut [f64],
) {
    let act = spec.activation;
    let sides = spec.stage_sides();
    let chans = spec.stage_channels();
    let c_last = *chans.last().unwrap();
    let flat_side = *sides.last().unwrap();
    let flat_n = c_last * flat_side * flat_side;

    // Head.
    let mut d_dropped = vec![0.0; flat_n];
    {
        let w = &params[lay.head_w.clone()];
        for j in 0..spec.n_classes {
            let g = d_logits[j];
            grads[lay.head_b.clone()][j] += g;
            let gw = &mut grads[lay.head_w.clone()][j * flat_n..(j + 1) * flat_n];
            for i in 0..flat_n {
                gw[i] += g * tape.dropped[i];
                d_dropped[i] += w[j * flat_n + i] * g;
            }
        }
    }
    // Dropout; the flattened map is the final block's pooled output.
    let mut d_stage = vec![0.0; flat_n];
    for i in 0..flat_n {
        d_stage[i] = d_dropped[i] * tape.mask[i];
    }

    // Inception blocks, last to first. `d_stage` holds the gradient at the
    // current block's pooled output.
    for i in (0..spec.inception_blocks.len()).rev() {
        let blk = &spec.inception_blocks[i];
        let bl = &lay.blocks[i];
        let side = sides[i + 1];
        let ss = side * side;
        let c_in = chans[i];
        let c_out = blk.out_channels();
        let t = &tape.blocks[i];

        let mut d_concat = vec![0.0; c_out * ss];
        ops::maxpool_backward(&d_stage, &t.down_idx, &mut d_concat);
        // Concat activation, then branch activations (in place on segments).
        for (d, &pre) in d_concat.iter_mut().zip(&t.concat_pre) {
            *d *= act.grad(pre);
        }
        let (o1, o3, o5) = (blk.b1 * ss, (blk.b1 + blk.b3) * ss, (blk.b1 + blk.b3 + blk.b5) * ss);
        for (d, &pre) in d_concat[..o1].iter_mut().zip(&t.b1_pre) {
            *d *= act.grad(pre);
        }
        for (d, &pre) in d_concat[o1..o3].iter_mut().zip(&t.b3_pre) {
            *d *= act.grad(pre);
        }
        for (d, &pre) in d_concat[o3..o5].iter_mut().zip(&t.b5_pre) {
            *d *= act.grad(pre);
        }
        for (d, &pre) in d_concat[o5..].iter_mut().zip(&t.bp_pre) {
            *d *= act.grad(pre);
        }

        let input: &[f64] = if i == 0 { &tape.stem_pool } else { &tape.blocks[i - 1].down };
        let mut d_input = vec![0.0; c_in * ss];
        let (gw, gb) = (bl.b1_w.clone(), bl.b1_b.clone());
        split_conv_backward(
            input, c_in, side, params, grads, &gw, &gb, blk.b1, 1,
            &d_concat[..o1], Some(&mut d_input),
        );
        split_conv_backward(
            input, c_in, side, params, grads, &bl.b3_w, &bl.b3_b, blk.b3, 3,
            &d_concat[o1..o3], Some(&mut d_input),
        );
        split_conv_backward(
            input, c_in, side, params, grads, &bl.b5_w, &bl.b5_b, blk.b5, 5,
            &d_concat[o3..o5], Some(&mut d_input),
        );
        let mut d_pool = vec![0.0; c_in * ss];
        split_conv_backward(
            &t.pool_out, c_in, side, params, grads, &bl.pp_w, &bl.pp_b, blk.pool_proj, 1,
            &d_concat[o5..], Some(&mut d_pool),
        );
        ops::maxpool_backward(&d_pool, &t.pool_idx, &mut d_input);
        d_stage = d_input;
    }

    // Stem.
    let mut d_stem_act = vec![0.0; spec.stem_width * sides[0] * sides[0]];
    ops::maxpool_backward(&d_stage, &tape.stem_idx, &mut d_stem_act);
    for (d, &pre) in d_stem_act.iter_mut().zip(&tape.stem_pre) {
        *d *= act.grad(pre);
    }
    split_conv_backward(
        &tape.input, spec.input_channels, sides[0], params, grads,
        &lay.stem_w, &lay.stem_b, spec.stem_width, 3, &d_stem_act, None,
    );
}

/// Routes disjoint weight/bias gradient slices out of the flat gradient
/// vector and invokes the convolution backward kernel.
#[allow(clippy::too_many_arguments)]
fn split_conv_backward(
    input: &[f64],
    c_in: usize,
    side: usize,
    params: &[f64],
    grads: &mut [f64],
    w_range: &Range<usize>,
    b_range: &Range<usize>,
    c_out: usize,
    k: usize,
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
) {
    debug_assert!(w_range.end <= b_range.start);
    let (left, right) = grads.split_at_mut(b_range.start);
    ops::conv2d_backward(
        input,
        c_in,
        side,
        &params[w_range.clone()],
        c_out,
        k,
        d_out,
        d_input,
        &mut left[w_range.clone()],
        &mut right[..b_range.len()],
    );
}

fn check_batch(spec: &NetworkSpec, images: &[ImageTensor], labels: &[u8]) -> Result<()> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid("batch images and labels must align and be nonempty"));
    }
    let expect = spec.input_channels * spec.input_side * spec.input_side;
    for img in images {
        if img.height != spec.input_side || img.width != spec.input_side || img.data.len() != expect
        {
            return Err(Error::invalid(format!(
                "image {}x{} does not match network input {}",
                img.height, img.width, spec.input_side
            )));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| (l as usize) >= spec.n_classes) {
        return Err(Error::invalid(format!(
            "label {l} out of range for {} classes",
            spec.n_classes
        )));
    }
    Ok(())
}

/// Class-probability matrix for a batch (rows sum to 1). In train mode the
/// dropout mask is drawn from `rng`; eval mode is deterministic.
pub fn forward(
    model: &ClassifierModel,
    batch: &[ImageTensor],
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    Ok(forward_logits_probs(model, batch, train_mode, rng)?.1)
}

/// Raw logits alongside probabilities; logits are linear in the dropout
/// mask, which makes expectation checks possible.
pub fn forward_logits(
    model: &ClassifierModel,
    batch: &[ImageTensor],
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    Ok(forward_logits_probs(model, batch, train_mode, rng)?.0)
}

#[allow(clippy::type_complexity)]
fn forward_logits_probs(
    model: &ClassifierModel,
    batch: &[ImageTensor],
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let spec = &model.spec;
    spec.validate()?;
    let labels = vec![0u8; batch.len()];
    check_batch(spec, batch, &labels)?;
    let lay = spec.layout();
    if model.params.len() != lay.total {
        return Err(Error::Mismatch("parameter vector does not match spec".into()));
    }
    let mut tape = Tape::new(spec);
    let mut logits = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    for img in batch {
        let rng_opt = if train_mode { Some(&mut *rng) } else { None };
        forward_sample(spec, &lay, &model.params, &img.data, rng_opt, &mut tape);
        logits.push(tape.logits.clone());
        probs.push(tape.probs.clone());
    }
    Ok((logits, probs))
}

/// Mean cross-entropy loss and its gradient over a batch (dropout off, so
/// the result is deterministic and finite-difference checkable).
pub fn backward(
    model: &ClassifierModel,
    batch: &[ImageTensor],
    labels: &[u8],
) -> Result<(f64, Vec<f64>)> {
    let spec = &model.spec;
    spec.validate()?;
    check_batch(spec, batch, labels)?;
    let lay = spec.layout();
    let mut tape = Tape::new(spec);
    let mut grads = vec![0.0; lay.total];
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    let mut d_logits = vec![0.0; spec.n_classes];
    for (img, &label) in batch.iter().zip(labels) {
        forward_sample(spec, &lay, &model.params, &img.data, None, &mut tape);
        let term = ce_term(tape.probs[label as usize]);
        if !term.is_finite() {
            return Err(Error::TrainingDiverged("non-finite loss".into()));
        }
        loss += term * inv_b;
        for j in 0..spec.n_classes {
            let y = if j == label as usize { 1.0 } else { 0.0 };
            d_logits[j] = (tape.probs[j] - y) * inv_b;
        }
        backward_sample(spec, &lay, &model.params, &tape, &d_logits, &mut grads);
    }
    Ok((loss, grads))
}

// --- optimizers ----------------------------------------------------------------

/// Optimizer family, as compared in the activation/optimizer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgdm,
    Adam,
    Rmsprop,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgdm => "sgdm",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        })
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// SGDM momentum coefficient.
    pub momentum: f64,
    /// ADAM first/second moment decays.
    pub beta1: f64,
    pub beta2: f64,
    /// RMSPROP squared-average decay.
    pub decay: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        Optimizer {
            kind,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.99,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update: `SGDM: v <- beta*v + g, p <- p - lr*v`; ADAM with
    /// bias-corrected moments; RMSPROP with squared-average decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgdm => {
                for i in 0..params.len() {
                    self.m[i] = self.momentum * self.m[i] + grads[i];
                    params[i] -= lr * self.m[i];
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
            OptimizerKind::Rmsprop => {
                for i in 0..params.len() {
                    self.v[i] =
                        self.decay * self.v[i] + (1.0 - self.decay) * grads[i] * grads[i];
                    params[i] -= lr * grads[i] / (self.v[i].sqrt() + self.epsilon);
                }
            }
        }
    }
}

// --- training -------------------------------------------------------------------

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_initial_lr")]
    pub initial_lr: f64,
    /// Validate every this many training iterations.
    #[serde(default = "default_validation_frequency")]
    pub validation_frequency: usize,
    #[serde(default = "default_true")]
    pub shuffle_per_epoch: bool,
    /// Scale each sample's loss by the inverse training-set frequency of its
    /// class (normalized to mean weight 1). Per-beam labelings are heavily
    /// skewed toward "unassigned", and the plain mean otherwise pulls short
    /// training budgets into the majority-class collapse. Balanced data is
    /// unaffected (all weights 1).
    #[serde(default = "default_true")]
    pub class_weighting: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

fn default_max_epochs() -> usize {
    6
}
fn default_minibatch() -> usize {
    128
}
fn default_initial_lr() -> f64 {
    1e-3
}
fn default_validation_frequency() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: default_max_epochs(),
            minibatch: default_minibatch(),
            initial_lr: default_initial_lr(),
            validation_frequency: default_validation_frequency(),
            shuffle_per_epoch: true,
            class_weighting: true,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.minibatch == 0 || self.validation_frequency == 0 {
            return Err(Error::invalid("training counts must be at least 1"));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Validation,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Validation => "validation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-iteration training history for both streams.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn validation_entries(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(|e| e.phase == Phase::Validation)
    }

    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.validation_entries().last().map(|e| e.accuracy)
    }

    /// CSV with columns `iteration,epoch,phase,loss,accuracy`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "iteration,epoch,phase,loss,accuracy")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{},{}", e.iteration, e.epoch, e.phase, e.loss, e.accuracy)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains a fresh model; convenience wrapper over [`train_with_options`].
pub fn train(
    spec: &NetworkSpec,
    train_set: &dyn ImageSource,
    val_set: &dyn ImageSource,
    cfg: &TrainConfig,
) -> Result<ClassifierModel> {
    train_with_options(spec, None, None, train_set, val_set, cfg).1
}

/// Loads a trained model and retrains only its final linear layer on a new
/// dataset (checkpoint freeze-and-fine-tune).
pub fn fine_tune_head(
    base: &ClassifierModel,
    train_set: &dyn ImageSource,
    val_set: &dyn ImageSource,
    cfg: &TrainConfig,
) -> (TrainLog, Result<ClassifierModel>) {
    train_with_options(
        &base.spec,
        Some(base.params.clone()),
        Some(base.spec.head_range()),
        train_set,
        val_set,
        cfg,
    )
}

/// Full training loop. Returns the log alongside the result so a diverged
/// run still surfaces its partial history. `init` overrides the seeded
/// initialization; `trainable` masks gradients outside the given range.
pub fn train_with_options(
    spec: &NetworkSpec,
    init: Option<Vec<f64>>,
    trainable: Option<Range<usize>>,
    train_set: &dyn ImageSource,
    val_set: &dyn ImageSource,
    cfg: &TrainConfig,
) -> (TrainLog, Result<ClassifierModel>) {
    let mut log = TrainLog::default();
    let res = run_training(spec, init, trainable, train_set, val_set, cfg, &mut log);
    (log, res)
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    spec: &NetworkSpec,
    init: Option<Vec<f64>>,
    trainable: Option<Range<usize>>,
    train_set: &dyn ImageSource,
    val_set: &dyn ImageSource,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<ClassifierModel> {
    spec.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    for (set, name) in [(&train_set, "train"), (&val_set, "validation")] {
        if set.side() != spec.input_side {
            return Err(Error::invalid(format!(
                "{name} set side {} does not match network input {}",
                set.side(),
                spec.input_side
            )));
        }
        for i in 0..set.len() {
            if (set.label(i) as usize) >= spec.n_classes {
                return Err(Error::invalid(format!("{name} label out of range at {i}")));
            }
        }
    }

    let lay = spec.layout();
    let mut params = match init {
        Some(p) => {
            if p.len() != lay.total {
                return Err(Error::Mismatch("initial parameters do not match spec".into()));
            }
            p
        }
        None => spec.init_params(util::derive_seed(cfg.seed, 0)),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, 2));
    let mut optimizer = Optimizer::new(cfg.optimizer, lay.total);

    let pixels = spec.input_channels * spec.input_side * spec.input_side;
    let mut image_buf = vec![0.0; pixels];
    let mut tape = Tape::new(spec);
    let mut grads = vec![0.0; lay.total];
    let mut d_logits = vec![0.0; spec.n_classes];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iteration = 0usize;
    let mut last_was_validated = false;
    let class_weights = if cfg.class_weighting {
        let mut counts = vec![0usize; spec.n_classes];
        for i in 0..train_set.len() {
            counts[train_set.label(i) as usize] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count() as f64;
        let n = train_set.len() as f64;
        counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
            .collect()
    } else {
        vec![1.0; spec.n_classes]
    };

    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle_per_epoch {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(cfg.minibatch) {
            iteration += 1;
            grads.fill(0.0);
            let inv_b = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut correct = 0usize;
            for &si in chunk {
                train_set.write_image(si, &mut image_buf)?;
                forward_sample(spec, &lay, &params, &image_buf, Some(&mut dropout_rng), &mut tape);
                let label = train_set.label(si) as usize;
                let weight = class_weights[label];
                let term = ce_term(tape.probs[label]);
                if !term.is_finite() {
                    loss = f64::NAN;
                    break;
                }
                loss += weight * term * inv_b;
                if argmax(&tape.probs) == label {
                    correct += 1;
                }
                for j in 0..spec.n_classes {
                    let y = if j == label { 1.0 } else { 0.0 };
                    d_logits[j] = weight * (tape.probs[j] - y) * inv_b;
                }
                backward_sample(spec, &lay, &params, &tape, &d_logits, &mut grads);
            }
            log.entries.push(LogEntry {
                iteration,
                epoch,
                phase: Phase::Train,
                loss,
                accuracy: correct as f64 / chunk.len() as f64,
            });
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "loss became non-finite at iteration {iteration}"
                )));
            }
            if let Some(range) = &trainable {
                grads[..range.start].fill(0.0);
                grads[range.end..].fill(0.0);
            }
            optimizer.step(&mut params, &grads, cfg.initial_lr);

            last_was_validated = iteration % cfg.validation_frequency == 0;
            if last_was_validated {
                let (vl, va) =
                    eval_pass(spec, &lay, &params, val_set, &class_weights, &mut tape, &mut image_buf)?;
                log.entries.push(LogEntry {
                    iteration,
                    epoch,
                    phase: Phase::Validation,
                    loss: vl,
                    accuracy: va,
                });
            }
        }
    }
    if !last_was_validated {
        let (vl, va) =
            eval_pass(spec, &lay, &params, val_set, &class_weights, &mut tape, &mut image_buf)?;
        log.entries.push(LogEntry {
            iteration,
            epoch: cfg.max_epochs,
            phase: Phase::Validation,
            loss: vl,
            accuracy: va,
        });
    }
    Ok(ClassifierModel { spec: spec.clone(), params, training_log: log.clone() })
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn eval_pass(
    spec: &NetworkSpec,
    lay: &Layout,
    params: &[f64],
    set: &dyn ImageSource,
    class_weights: &[f64],
    tape: &mut Tape,
    image_buf: &mut [f64],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..set.len() {
        set.write_image(i, image_buf)?;
        forward_sample(spec, lay, params, image_buf, None, tape);
        let label = set.label(i) as usize;
        loss += class_weights[label] * ce_term(tape.probs[label]);
        if argmax(&tape.probs) == label {
            correct += 1;
        }
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

// --- evaluation ------------------------------------------------------------------

/// Predicted class per sample (argmax with ties toward the lower index).
pub fn predict(model: &ClassifierModel, set: &dyn ImageSource) -> Result<Vec<u8>> {
    let spec = &model.spec;
    spec.validate()?;
    let lay = spec.layout();
    if model.params.len() != lay.total {
        return Err(Error::Mismatch("parameter vector does not match spec".into()));
    }
    let mut tape = Tape::new(spec);
    let mut image_buf = vec![0.0; spec.input_channels * spec.input_side * spec.input_side];
    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        set.write_image(i, &mut image_buf)?;
        forward_sample(spec, &lay, &model.params, &image_buf, None, &mut tape);
        out.push(argmax(&tape.probs) as u8);
    }
    Ok(out)
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate_accuracy(model: &ClassifierModel, set: &dyn ImageSource) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let preds = predict(model, set)?;
    let correct = preds
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p == set.label(i))
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Mean per-class recall over the classes present in the set; insensitive
/// to class imbalance, unlike plain accuracy.
pub fn evaluate_balanced_accuracy(model: &ClassifierModel, set: &dyn ImageSource) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let preds = predict(model, set)?;
    let classes = model.spec.n_classes;
    let mut totals = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (i, &p) in preds.iter().enumerate() {
        let label = set.label(i) as usize;
        totals[label] += 1;
        if p as usize == label {
            hits[label] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if totals[c] > 0 {
            sum += hits[c] as f64 / totals[c] as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

// --- checkpoints -------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"BSNN";
const VERSION: u32 = 1;

/// Binary checkpoint: magic, version, JSON-encoded spec, parameter vector.
pub fn write_model(path: &Path, model: &ClassifierModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model_to(&mut w, model)?;
    w.flush()?;
    Ok(())
}

/// Serializes a checkpoint into any writer (used by container formats that
/// embed several models in one file).
pub fn write_model_to<W: IoWrite>(w: &mut W, model: &ClassifierModel) -> Result<()> {
    w.write_all(MAGIC)?;
    util::write_u32(w, VERSION)?;
    let spec_json = serde_json::to_vec(&model.spec)?;
    util::write_u64(w, spec_json.len() as u64)?;
    w.write_all(&spec_json)?;
    util::write_u64(w, model.params.len() as u64)?;
    for &p in &model.params {
        util::write_f64(w, p)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_model`]. The training log is not
/// part of the checkpoint; the returned model carries an empty one.
pub fn read_model(path: &Path) -> Result<ClassifierModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_model_from(&mut r)
}

/// Counterpart of [`write_model_to`].
pub fn read_model_from<R: Read>(r: &mut R) -> Result<ClassifierModel> {
    util::expect_magic(r, MAGIC, "model checkpoint")?;
    util::expect_version(r, VERSION, "model checkpoint")?;
    let spec_len = util::read_u64(r)? as usize;
    let mut spec_buf = vec![0u8; spec_len];
    r.read_exact(&mut spec_buf)?;
    let spec: NetworkSpec = serde_json::from_slice(&spec_buf)?;
    spec.validate()?;
    let n = util::read_u64(r)? as usize;
    if n != spec.param_count() {
        return Err(Error::Mismatch(format!(
            "checkpoint holds {n} parameters but the spec needs {}",
            spec.param_count()
        )));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(util::read_f64(r)?);
    }
    Ok(ClassifierModel { spec, params, training_log: TrainLog::default() })
}
