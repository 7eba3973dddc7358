//! The segmentation model: residual encoder with a pyramid pooling context
//! module, non-local MITrans block, pixel-shuffle decoder with a skip
//! connection, and a multi-label classifier on the pooled features.
//!
//! Feature maps are `[C, H, W]` tensors of `f64`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, Normalization};
use crate::error::{ensure, Error, Result};
use crate::pairing::FeatureVector;
use crate::params::{ParamId, ParamStore};
use crate::rng::{keyed, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pre-softmax class scores, `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap(Tensor);

impl LogitMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        ensure!(
            scores.shape().len() == 3 && scores.shape()[0] >= 1,
            Validation,
            "logit map must be [C, H, W], got {:?}",
            scores.shape()
        );
        ensure!(scores.is_finite(), Numeric, "logit map contains non-finite scores");
        Ok(LogitMap(scores))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Highest-scoring class per pixel, row-major; ties go to the lower id.
    pub fn argmax(&self) -> Vec<u8> {
        let (c, h, w) = self.0.chw();
        let hw = h * w;
        let d = self.0.data();
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * hw + p] > d[best * hw + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderDepth {
    /// One basic block per stage after the stem.
    Tiny,
    Resnet18,
    Resnet50,
}

impl EncoderDepth {
    /// `(channel multiplier, blocks, stride)` per stage after the stem.
    fn stages(self) -> &'static [(usize, usize, usize)] {
        match self {
            EncoderDepth::Tiny => &[(1, 1, 2), (2, 1, 2)],
            EncoderDepth::Resnet18 => &[(1, 2, 1), (2, 2, 2), (4, 2, 2)],
            EncoderDepth::Resnet50 => &[(1, 3, 1), (2, 4, 2), (4, 6, 2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub depth: EncoderDepth,
    /// Channels after the stem.
    pub width: usize,
    /// Channels of the decoder path.
    pub decoder_width: usize,
    pub psp_bins: Vec<usize>,
    pub mitrans_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: EncoderDepth::Tiny,
            width: 8,
            decoder_width: 8,
            psp_bins: vec![1, 2, 3, 6],
            mitrans_blocks: 1,
        }
    }
}

impl NetConfig {
    pub fn feature_channels(&self) -> usize {
        self.width * self.depth.stages().last().expect("at least one stage").0
    }

    fn skip_channels(&self) -> usize {
        let stages = self.depth.stages();
        self.width * stages[stages.len() - 2].0
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1, Config, "network.width must be positive");
        ensure!(self.decoder_width >= 1, Config, "network.decoder_width must be positive");
        ensure!(!self.psp_bins.is_empty(), Config, "network.psp_bins must not be empty");
        ensure!(self.psp_bins.iter().all(|&b| b >= 1), Config, "network.psp_bins must be positive");
        let c = self.feature_channels();
        ensure!(c % 2 == 0, Config, "MITrans needs an even channel count, encoder gives {}", c);
        ensure!(c >= 4, Config, "encoder output needs at least 4 channels for pyramid pooling, got {}", c);
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Mitrans {
    q: Conv,
    k: Conv,
    v: Conv,
}

/// Model topology with parameter handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: NetConfig,
    num_classes: usize,
    stem: [Conv; 2],
    stages: Vec<Vec<Block>>,
    psp_branches: Vec<(usize, Conv)>,
    psp_fuse: Conv,
    mitrans: Vec<Mitrans>,
    dec_up1: Conv,
    dec_fuse: Conv,
    dec_up2: Conv,
    dec_out: Conv,
    cls_w: ParamId,
    cls_b: ParamId,
}

struct Builder {
    store: ParamStore,
    seed: u64,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(&format!("{name}.w"), &[cout, cin, k, k], (2.0 / fan_in).sqrt());
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            name: name.to_string(),
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = keyed(self.seed, &[stream::INIT, self.store.len() as u64]);
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.store
            .add(name, Tensor::from_vec(shape, data).expect("shape matches length"))
    }
}

/// Every intermediate of one forward pass, as nodes of the tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Globally pooled `v_j`, the classifier input and pairing feature.
    pub pooled: Var,
    pub cls_logits: Var,
    pub v_prev: Var,
    pub v_pre_psp: Var,
    pub v_j: Var,
    pub v_prime: Var,
    /// Post-activation output of every convolution layer, in order.
    pub conv_outputs: Vec<(String, Var)>,
}

/// Encoder intermediates.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub v_prev: Var,
    pub v_pre_psp: Var,
    pub v_j: Var,
}

impl Network {
    /// Topology plus freshly initialised parameters (He normal weights,
    /// zero biases).
    pub fn build(config: &NetConfig, num_classes: usize, seed: u64) -> Result<(Network, ParamStore)> {
        config.validate()?;
        ensure!(num_classes >= 2, Config, "need at least 2 classes, got {}", num_classes);
        let mut b = Builder {
            store: ParamStore::new(),
            seed,
        };
        let w = config.width;
        let stem = [
            b.conv("encoder.stem1", 3, w, 3, 2),
            b.conv("encoder.stem2", w, w, 3, 2),
        ];
        let mut cin = w;
        let mut stages = Vec::new();
        for (s, &(mult, blocks, stride)) in config.depth.stages().iter().enumerate() {
            let cout = w * mult;
            let mut stage = Vec::new();
            for i in 0..blocks {
                let st = if i == 0 { stride } else { 1 };
                let name = format!("encoder.s{s}b{i}");
                let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3, st);
                let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
                let shortcut = (st != 1 || cin != cout).then(|| b.conv(&format!("{name}.down"), cin, cout, 1, st));
                stage.push(Block { conv1, conv2, shortcut });
                cin = cout;
            }
            stages.push(stage);
        }
        let c = config.feature_channels();
        let branch = c / 4;
        let psp_branches = config
            .psp_bins
            .iter()
            .map(|&bin| (bin, b.conv(&format!("psp.bin{bin}"), c, branch, 1, 1)))
            .collect::<Vec<_>>();
        let psp_fuse = b.conv("psp.fuse", c + branch * psp_branches.len(), c, 3, 1);
        let mitrans = (0..config.mitrans_blocks)
            .map(|i| Mitrans {
                q: b.conv(&format!("mitrans.{i}.q"), c, c / 2, 1, 1),
                k: b.conv(&format!("mitrans.{i}.k"), c, c / 2, 1, 1),
                v: b.conv(&format!("mitrans.{i}.v"), c, c, 1, 1),
            })
            .collect();
        let d = config.decoder_width;
        let dec_up1 = b.conv("decoder.up1", c, 4 * d, 3, 1);
        let dec_fuse = b.conv("decoder.fuse", d + config.skip_channels(), d, 3, 1);
        let dec_up2 = b.conv("decoder.up2", d, 4 * d, 3, 1);
        let dec_out = b.conv("decoder.out", d, num_classes, 1, 1);
        let cls_w = b.normal("classifier.w", &[num_classes - 1, c], (1.0 / c as f64).sqrt());
        let cls_b = b.store.add("classifier.b", Tensor::zeros(&[num_classes - 1]));
        let net = Network {
            config: config.clone(),
            num_classes,
            stem,
            stages,
            psp_branches,
            psp_fuse,
            mitrans,
            dec_up1,
            dec_fuse,
            dec_up2,
            dec_out,
            cls_w,
            cls_b,
        };
        Ok((net, b.store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Total downsampling of `v_j`.
    pub const STRIDE: usize = 16;

    /// Names of every convolution layer in forward order.
    pub fn conv_layer_names(&self) -> Vec<String> {
        self.all_convs().map(|c| c.name.clone()).collect()
    }

    fn all_convs(&self) -> impl Iterator<Item = &Conv> {
        let blocks = self
            .stages
            .iter()
            .flatten()
            .flat_map(|b| [Some(&b.conv1), Some(&b.conv2), b.shortcut.as_ref()].into_iter().flatten());
        self.stem
            .iter()
            .chain(blocks)
            .chain(self.psp_branches.iter().map(|(_, c)| c))
            .chain(std::iter::once(&self.psp_fuse))
            .chain(self.mitrans.iter().flat_map(|m| [&m.q, &m.k, &m.v]))
            .chain([&self.dec_up1, &self.dec_fuse, &self.dec_up2, &self.dec_out])
    }

    /// Handles of the MITrans value projections (weight, bias) per block.
    pub fn mitrans_value_params(&self) -> Vec<(ParamId, ParamId)> {
        self.mitrans.iter().map(|m| (m.v.w, m.v.b)).collect()
    }

    /// Handles of the MITrans query projections (weight, bias) per block.
    pub fn mitrans_query_params(&self) -> Vec<(ParamId, ParamId)> {
        self.mitrans.iter().map(|m| (m.q.w, m.q.b)).collect()
    }

    /// Handles of the final 1×1 class projection (weight, bias).
    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.dec_out.w, self.dec_out.b)
    }

    pub fn classifier_params(&self) -> (ParamId, ParamId) {
        (self.cls_w, self.cls_b)
    }

    /// Handles of the pyramid branch for `bin` (weight, bias).
    pub fn psp_branch_params(&self, bin: usize) -> Option<(ParamId, ParamId)> {
        self.psp_branches.iter().find(|(b, _)| *b == bin).map(|(_, c)| (c.w, c.b))
    }

    fn conv_relu(&self, tape: &mut Tape, conv: &Conv, x: Var, log: &mut Vec<(String, Var)>) -> Result<Var> {
        let y = conv.apply(tape, x)?;
        let y = tape.relu(y);
        log.push((conv.name.clone(), y));
        Ok(y)
    }

    fn check_input(&self, tape: &Tape, image: Var) -> Result<()> {
        let shape = tape.value(image).shape();
        ensure!(
            shape.len() == 3 && shape[0] == 3,
            Validation,
            "network input must be [3, H, W], got {:?}",
            shape
        );
        ensure!(
            shape[1] % Self::STRIDE == 0 && shape[2] % Self::STRIDE == 0 && shape[1] > 0 && shape[2] > 0,
            Validation,
            "input size {}x{} is not divisible by {}",
            shape[1],
            shape[2],
            Self::STRIDE
        );
        Ok(())
    }

    /// Residual stages and the pyramid pooling module.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        image: Var,
        log: &mut Vec<(String, Var)>,
    ) -> Result<EncoderOutput> {
        self.check_input(tape, image)?;
        let mut x = image;
        for conv in &self.stem {
            x = self.conv_relu(tape, conv, x, log)?;
        }
        let mut outputs = Vec::new();
        for stage in &self.stages {
            for block in stage {
                let h = self.conv_relu(tape, &block.conv1, x, log)?;
                let h = block.conv2.apply(tape, h)?;
                let skip = match &block.shortcut {
                    Some(s) => {
                        let y = s.apply(tape, x)?;
                        log.push((s.name.clone(), y));
                        y
                    }
                    None => x,
                };
                let sum = tape.add(h, skip)?;
                x = tape.relu(sum);
                log.push((block.conv2.name.clone(), x));
            }
            outputs.push(x);
        }
        let v_prev = outputs[outputs.len() - 2];
        let v_pre_psp = x;
        let v_j = self.psp_forward(tape, v_pre_psp, log)?;
        Ok(EncoderOutput { v_prev, v_pre_psp, v_j })
    }

    fn psp_forward(&self, tape: &mut Tape, x: Var, log: &mut Vec<(String, Var)>) -> Result<Var> {
        let (_, h, w) = tape.value(x).chw();
        let mut parts = vec![x];
        for (bin, conv) in &self.psp_branches {
            let pooled = tape.adaptive_avg_pool(x, *bin, *bin);
            let y = self.conv_relu(tape, conv, pooled, log)?;
            parts.push(tape.resize_bilinear(y, h, w));
        }
        let cat = tape.concat(&parts)?;
        self.conv_relu(tape, &self.psp_fuse, cat, log)
    }

    /// Non-local blocks with residual connections; identity when disabled.
    pub fn mitrans_forward(
        &self,
        tape: &mut Tape,
        v_j: Var,
        enabled: bool,
        log: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        if !enabled {
            return Ok(v_j);
        }
        let mut x = v_j;
        for block in &self.mitrans {
            let q = block.q.apply(tape, x)?;
            let k = block.k.apply(tape, x)?;
            let v = block.v.apply(tape, x)?;
            log.push((block.q.name.clone(), q));
            log.push((block.k.name.clone(), k));
            log.push((block.v.name.clone(), v));
            let agg = tape.attention(q, k, v)?;
            x = tape.add(agg, x)?;
        }
        Ok(x)
    }

    /// Decoder from `v'_j` (stride 16) with the `v_{j-1}` skip (stride 8)
    /// back to the input resolution `out_h × out_w`.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        v_prime: Var,
        v_prev: Var,
        out_h: usize,
        out_w: usize,
        log: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let (_, h, w) = tape.value(v_prime).chw();
        let (_, ph, pw) = tape.value(v_prev).chw();
        ensure!(
            (ph, pw) == (2 * h, 2 * w),
            Validation,
            "skip feature {}x{} is not twice the deep feature {}x{}",
            ph,
            pw,
            h,
            w
        );
        let y = self.conv_relu(tape, &self.dec_up1, v_prime, log)?;
        let y = tape.pixel_shuffle(y, 2)?;
        let y = tape.concat(&[y, v_prev])?;
        let y = self.conv_relu(tape, &self.dec_fuse, y, log)?;
        let y = self.conv_relu(tape, &self.dec_up2, y, log)?;
        let y = tape.pixel_shuffle(y, 2)?;
        let y = self.dec_out.apply(tape, y)?;
        log.push((self.dec_out.name.clone(), y));
        Ok(tape.resize_bilinear(y, out_h, out_w))
    }

    /// Foreground-presence logits (`C − 1`) from the pooled feature.
    pub fn classifier_forward(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        tape.linear(pooled, self.cls_w, self.cls_b)
    }

    /// Record a complete forward pass of `image` (`[3, H, W]`, normalised).
    pub fn forward(&self, tape: &mut Tape, image: Var, use_mitrans: bool) -> Result<Forward> {
        let mut log = Vec::new();
        let (_, h, w) = tape.value(image).chw();
        let enc = self.encoder_forward(tape, image, &mut log)?;
        let v_prime = self.mitrans_forward(tape, enc.v_j, use_mitrans, &mut log)?;
        let logits = self.decoder_forward(tape, v_prime, enc.v_prev, h, w, &mut log)?;
        let pooled = tape.global_avg_pool(enc.v_j);
        let cls_logits = self.classifier_forward(tape, pooled)?;
        Ok(Forward {
            logits,
            pooled,
            cls_logits,
            v_prev: enc.v_prev,
            v_pre_psp: enc.v_pre_psp,
            v_j: enc.v_j,
            v_prime,
            conv_outputs: log,
        })
    }

    /// Inference: logit map and pooled feature of one input tensor. Inputs
    /// of any size are zero-padded to the stride and the logits cropped back.
    pub fn full_forward(&self, params: &ParamStore, image: &Tensor, use_mitrans: bool) -> Result<(LogitMap, Vec<f64>)> {
        let (_, h, w) = image.chw();
        let mut tape = Tape::new(params);
        let x = tape.constant(pad_to_stride(image));
        let f = self.forward(&mut tape, x, use_mitrans)?;
        let logits = tape.value(f.logits).crop_top_left(h, w);
        Ok((LogitMap::new(logits)?, tape.value(f.pooled).data().to_vec()))
    }

    /// Logit map and pooled feature vector of an image sample.
    pub fn predict(
        &self,
        params: &ParamStore,
        norm: &Normalization,
        image: &ImageSample,
        use_mitrans: bool,
    ) -> Result<(LogitMap, FeatureVector)> {
        let (logits, values) = self.full_forward(params, &norm.to_input(image), use_mitrans)?;
        Ok((
            logits,
            FeatureVector {
                id: image.id.clone(),
                values,
            },
        ))
    }

    /// Pooled encoder feature only (skips MITrans and the decoder), on the
    /// stride-padded input.
    pub fn pooled(&self, params: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let x = tape.constant(pad_to_stride(image));
        let enc = self.encoder_forward(&mut tape, x, &mut Vec::new())?;
        let pooled = tape.global_avg_pool(enc.v_j);
        Ok(tape.value(pooled).data().to_vec())
    }

    /// Confirm a parameter store has every tensor this topology expects.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let (fresh_net, fresh) = Network::build(&self.config, self.num_classes, 0)?;
        drop(fresh_net);
        for (_, name, t) in fresh.iter() {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Validation(format!("parameter {name} is missing")))?;
            ensure!(
                params.get(id).shape() == t.shape(),
                Validation,
                "parameter {} has shape {:?}, expected {:?}",
                name,
                params.get(id).shape(),
                t.shape()
            );
        }
        ensure!(params.is_finite(), Numeric, "parameters contain non-finite values");
        Ok(())
    }
}

/// Zero-pad a `[C, H, W]` tensor at the bottom and right so both sides are
/// multiples of [`Network::STRIDE`]. Zero is the dataset mean after
/// normalisation.
pub fn pad_to_stride(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (ph, pw) = (padded_len(h), padded_len(w));
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.data_mut()[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    out
}

/// Pad a row-major label map to the stride with the ignore id.
pub fn pad_labels(labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let (ph, pw) = (padded_len(h), padded_len(w));
    let mut out = vec![crate::data::IGNORE; ph * pw];
    for y in 0..h {
        out[y * pw..y * pw + w].copy_from_slice(&labels[y * w..(y + 1) * w]);
    }
    out
}

fn padded_len(n: usize) -> usize {
    n.div_ceil(Network::STRIDE) * Network::STRIDE
}
