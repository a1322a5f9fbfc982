//! CAM-gated 3D UNet.
//!
//! Encoder: a full-resolution stem of two conv units followed by one level
//! per remaining channel width, each a stride-2 conv unit and a stride-1
//! conv unit. A conv unit is a bias-free 3×3×3 convolution, affine instance
//! norm and leaky ReLU. The deepest encoder output `e3` is the bottleneck.
//!
//! Bottleneck: global average pooling feeds a linear patch classifier
//! `P = σ(W·GAP(e3) + b)`; the same weight vector forms the class activation
//! map `A(x) = Σ_k W_k e3[k, x]`, and the decoder receives
//! `d0 = e3 ⊙ σ(A)` with the gate broadcast over channels.
//!
//! Decoder: per level a 2×2×2 transposed-conv unit, concatenation with the
//! encoder skip, and two conv units; a 1×1×1 convolution with bias and a
//! sigmoid produce voxel probabilities.
//!
//! With widths `[16, 32, 64, 128]` this has 1,401,377 parameters without the
//! classifier and 1,401,506 with it.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, NormCache, LEAKY_SLOPE};
use crate::tensor::Tensor;
use crate::volume::Shape3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamUNetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// `false` gives the plain UNet ablation: no classifier, no gating.
    pub classifier_enabled: bool,
    pub patch_edge: usize,
}

impl Default for CamUNetConfig {
    fn default() -> Self {
        CamUNetConfig {
            in_channels: 1,
            channels: vec![16, 32, 64, 128],
            classifier_enabled: true,
            patch_edge: 128,
        }
    }
}

impl CamUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be >= 1".into()));
        }
        if self.channels.len() < 2 {
            return Err(Error::InvalidConfig("channels needs at least two widths".into()));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::InvalidConfig(format!(
                "channels must be strictly increasing and positive, got {:?}",
                self.channels
            )));
        }
        let factor = 1usize << self.levels_down();
        if self.patch_edge == 0 || self.patch_edge % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_edge {} must be a positive multiple of {factor}",
                self.patch_edge
            )));
        }
        Ok(())
    }

    /// Number of stride-2 reductions.
    pub fn levels_down(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn bottleneck_edge(&self) -> usize {
        self.patch_edge >> self.levels_down()
    }

    pub fn patch_shape(&self) -> Shape3 {
        Shape3::cube(self.patch_edge)
    }
}

/// One named parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitKind {
    Conv { stride: usize },
    Up,
}

#[derive(Debug, Clone)]
struct Unit {
    kind: UnitKind,
    cin: usize,
    cout: usize,
    weight: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
}

impl Unit {
    fn fan_in(&self) -> usize {
        match self.kind {
            UnitKind::Conv { .. } => self.cin * 27,
            UnitKind::Up => self.cin * 8,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<ParamEntry>,
    units: Vec<Unit>,
    head_weight: Range<usize>,
    head_bias: Range<usize>,
    cam: Option<(Range<usize>, Range<usize>)>,
    total: usize,
}

impl Layout {
    fn build(config: &CamUNetConfig) -> Self {
        let mut entries: Vec<ParamEntry> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| -> Range<usize> {
            let offset = entries.last().map(|e| e.offset + e.len()).unwrap_or(0);
            let e = ParamEntry {
                name,
                shape,
                offset,
            };
            let r = e.range();
            entries.push(e);
            r
        };
        let mut units = Vec::new();
        let mut unit = |push: &mut dyn FnMut(String, Vec<usize>) -> Range<usize>,
                        name: String,
                        kind: UnitKind,
                        cin: usize,
                        cout: usize| {
            let wshape = match kind {
                UnitKind::Conv { .. } => vec![cout, cin, 3, 3, 3],
                UnitKind::Up => vec![cin, cout, 2, 2, 2],
            };
            let weight = push(format!("{name}.weight"), wshape);
            let gamma = push(format!("{name}.norm.gamma"), vec![cout]);
            let beta = push(format!("{name}.norm.beta"), vec![cout]);
            units.push(Unit {
                kind,
                cin,
                cout,
                weight,
                gamma,
                beta,
            });
        };
        let ch = &config.channels;
        let c1 = UnitKind::Conv { stride: 1 };
        let c2 = UnitKind::Conv { stride: 2 };
        unit(&mut push, "enc0.conv0".into(), c1, config.in_channels, ch[0]);
        unit(&mut push, "enc0.conv1".into(), c1, ch[0], ch[0]);
        for l in 1..ch.len() {
            unit(&mut push, format!("enc{l}.down"), c2, ch[l - 1], ch[l]);
            unit(&mut push, format!("enc{l}.conv"), c1, ch[l], ch[l]);
        }
        for l in (0..ch.len() - 1).rev() {
            unit(&mut push, format!("dec{l}.up"), UnitKind::Up, ch[l + 1], ch[l]);
            unit(&mut push, format!("dec{l}.conv0"), c1, 2 * ch[l], ch[l]);
            unit(&mut push, format!("dec{l}.conv1"), c1, ch[l], ch[l]);
        }
        let head_weight = push("head.weight".into(), vec![1, ch[0], 1, 1, 1]);
        let head_bias = push("head.bias".into(), vec![1]);
        let cam = config.classifier_enabled.then(|| {
            let c = config.bottleneck_channels();
            (
                push("cam.weight".into(), vec![c]),
                push("cam.bias".into(), vec![1]),
            )
        });
        let total = entries.last().map(|e| e.offset + e.len()).unwrap_or(0);
        Layout {
            entries,
            units,
            head_weight,
            head_bias,
            cam,
            total,
        }
    }

    fn levels(&self) -> usize {
        // 2 units per encoder level, 3 per decoder stage: 5L - 3 in total
        (self.units.len() + 3) / 5
    }

    fn enc_unit(&self, level: usize, second: bool) -> usize {
        2 * level + second as usize
    }

    /// Units `[up, conv0, conv1]` of decoder stage writing level `level`.
    fn dec_units(&self, level: usize) -> [usize; 3] {
        let l = self.levels();
        let base = 2 * l + 3 * (l - 2 - level);
        [base, base + 1, base + 2]
    }
}

/// Number of trainable scalars for `config`.
pub fn param_count(config: &CamUNetConfig) -> usize {
    Layout::build(config).total
}

/// All learnable parameters in one flat vector plus the layout to slice it.
#[derive(Debug, Clone)]
pub struct CamUNetParams {
    pub config: CamUNetConfig,
    pub values: Vec<f32>,
    layout: Layout,
}

/// Output of a forward pass over one patch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Voxel probabilities over the patch.
    pub seg_probs: Vec<f32>,
    /// Patch fracture probability; `None` when the classifier is disabled.
    pub cls_prob: Option<f32>,
    /// Bottleneck features `e3`.
    pub bottleneck: Tensor,
    /// Gated features `d0` fed to the decoder.
    pub gated: Tensor,
    /// Pre-sigmoid class activation map over the bottleneck grid.
    pub activation_map: Option<Vec<f32>>,
}

/// Encoder outputs: skips for levels `0..L-1` and the bottleneck.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

/// Intermediate values recorded for [`CamUNetParams::backward`].
pub struct Tape {
    inputs: Vec<Option<Tensor>>,
    caches: Vec<Option<NormCache>>,
    bottleneck: Tensor,
    gap: Vec<f32>,
    gate: Vec<f32>,
    cls_prob: Option<f32>,
    head_input: Tensor,
    probs: Vec<f32>,
}

/// Channel-wise global average pooling.
pub fn gap_channelwise(e: &Tensor) -> Result<Vec<f32>> {
    let n = e.spatial();
    if n == 0 {
        return Err(Error::InvalidArgument("empty spatial extent".into()));
    }
    Ok((0..e.channels)
        .map(|c| (e.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect())
}

/// `σ(Wᵀ F + b)`.
pub fn classify_patch(features: &[f32], weight: &[f32], bias: f32) -> Result<f32> {
    if features.len() != weight.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![weight.len()],
            actual: vec![features.len()],
        });
    }
    let z: f64 = features
        .iter()
        .zip(weight)
        .map(|(&f, &w)| f as f64 * w as f64)
        .sum::<f64>()
        + bias as f64;
    Ok(sigmoid(z as f32))
}

/// Class activation map `A(x) = Σ_k W_k e[k, x]` (pre-sigmoid).
pub fn activation_map(e: &Tensor, weight: &[f32]) -> Result<Vec<f32>> {
    if weight.len() != e.channels {
        return Err(Error::ShapeMismatch {
            expected: vec![e.channels],
            actual: vec![weight.len()],
        });
    }
    let mut a = vec![0.0f32; e.spatial()];
    for (k, &w) in weight.iter().enumerate() {
        for (dst, &v) in a.iter_mut().zip(e.channel(k)) {
            *dst += w * v;
        }
    }
    Ok(a)
}

/// CAM gating: returns `(e ⊙ σ(A), A)`.
pub fn cam_gate(e: &Tensor, weight: &[f32]) -> Result<(Tensor, Vec<f32>)> {
    let a = activation_map(e, weight)?;
    let gate: Vec<f32> = a.iter().map(|&v| sigmoid(v)).collect();
    let mut d0 = e.clone();
    for k in 0..e.channels {
        for (v, &g) in d0.channel_mut(k).iter_mut().zip(&gate) {
            *v *= g;
        }
    }
    Ok((d0, a))
}

/// Parameters with Kaiming-normal (fan-in) convolution weights, unit norm
/// gains and zero biases. Classifier parameters are drawn last, so the
/// UNet part is identical with and without the classifier for one seed.
pub fn init_params(config: &CamUNetConfig, seed: u64) -> Result<CamUNetParams> {
    config.validate()?;
    let layout = Layout::build(config);
    let mut values = vec![0.0f32; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |r: Range<usize>, fan_in: usize, values: &mut [f32]| {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in &mut values[r] {
            *v = dist.sample(&mut rng) as f32;
        }
    };
    for u in &layout.units {
        fill(u.weight.clone(), u.fan_in(), &mut values);
        values[u.gamma.clone()].fill(1.0);
    }
    fill(layout.head_weight.clone(), config.channels[0], &mut values);
    if let Some((w, _)) = &layout.cam {
        fill(w.clone(), config.bottleneck_channels(), &mut values);
    }
    Ok(CamUNetParams {
        config: config.clone(),
        values,
        layout,
    })
}

impl CamUNetParams {
    /// Rebuild from a config and a flat parameter vector.
    pub fn from_values(config: CamUNetConfig, values: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: vec![layout.total],
                actual: vec![values.len()],
            });
        }
        Ok(CamUNetParams {
            config,
            values,
            layout,
        })
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.layout.entries
    }

    /// Slice of the named parameter block.
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let r = self.layout.entries.iter().find(|e| e.name == name)?.range();
        Some(&mut self.values[r])
    }

    /// Classifier weight vector and bias, when enabled.
    pub fn classifier(&self) -> Option<(&[f32], f32)> {
        self.layout
            .cam
            .as_ref()
            .map(|(w, b)| (&self.values[w.clone()], self.values[b.start]))
    }

    fn check_input(&self, patch: &Tensor) -> Result<()> {
        let want = self.config.patch_shape();
        if patch.channels != self.config.in_channels || patch.shape != want {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.in_channels, want.w(), want.h(), want.d()],
                actual: vec![patch.channels, patch.shape.w(), patch.shape.h(), patch.shape.d()],
            });
        }
        Ok(())
    }

    fn run_unit(&self, u: &Unit, x: &Tensor) -> (Tensor, NormCache) {
        let w = &self.values[u.weight.clone()];
        let pre = match u.kind {
            UnitKind::Conv { stride } => nn::conv3d(x, w, u.cout, stride),
            UnitKind::Up => nn::upconv(x, w, u.cout),
        };
        let (mut y, cache) = nn::instance_norm(
            &pre,
            &self.values[u.gamma.clone()],
            &self.values[u.beta.clone()],
        );
        nn::leaky_relu_inplace(&mut y);
        (y, cache)
    }

    fn unit_backward(
        &self,
        idx: usize,
        tape: &Tape,
        mut dy: Tensor,
        grads: &mut [f32],
        want_dx: bool,
    ) -> Option<Tensor> {
        let u = &self.layout.units[idx];
        let cache = tape.caches[idx].as_ref().expect("recorded");
        let x = tape.inputs[idx].as_ref().expect("recorded");
        let gamma = &self.values[u.gamma.clone()];
        let beta = &self.values[u.beta.clone()];
        let n = dy.spatial();
        for c in 0..dy.channels {
            let (g, b) = (gamma[c], beta[c]);
            let xh = &cache.xhat.data[c * n..(c + 1) * n];
            for (d, &h) in dy.data[c * n..(c + 1) * n].iter_mut().zip(xh) {
                if g * h + b < 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            }
        }
        let (dg, db) = {
            let (lo, hi) = grads.split_at_mut(u.beta.start);
            (&mut lo[u.gamma.clone()], &mut hi[..u.beta.len()])
        };
        let dpre = nn::instance_norm_backward(cache, gamma, &dy, dg, db);
        let w = &self.values[u.weight.clone()];
        let dw = &mut grads[u.weight.clone()];
        match u.kind {
            UnitKind::Conv { stride } => nn::conv3d_backward(x, w, stride, &dpre, dw, want_dx),
            UnitKind::Up => nn::upconv_backward(x, w, &dpre, dw, want_dx),
        }
    }

    /// Run the encoder; used directly as the plain-UNet reference path.
    pub fn encode(&self, patch: &Tensor) -> Result<Encoded> {
        self.check_input(patch)?;
        let levels = self.layout.levels();
        let mut skips = Vec::with_capacity(levels - 1);
        let mut x = patch.clone();
        for l in 0..levels {
            x = self.run_unit(&self.layout.units[self.layout.enc_unit(l, false)], &x).0;
            x = self.run_unit(&self.layout.units[self.layout.enc_unit(l, true)], &x).0;
            if l + 1 < levels {
                skips.push(x.clone());
            }
        }
        Ok(Encoded {
            skips,
            bottleneck: x,
        })
    }

    /// Run the decoder from (possibly gated) bottleneck features.
    pub fn decode(&self, skips: &[Tensor], d0: &Tensor) -> Vec<f32> {
        let mut x = d0.clone();
        for l in (0..skips.len()).rev() {
            let [up, c0, c1] = self.layout.dec_units(l);
            let u = self.run_unit(&self.layout.units[up], &x).0;
            let cat = Tensor::concat(&u, &skips[l]);
            x = self.run_unit(&self.layout.units[c0], &cat).0;
            x = self.run_unit(&self.layout.units[c1], &x).0;
        }
        self.head(&x)
    }

    fn head(&self, x: &Tensor) -> Vec<f32> {
        let logits = nn::pointwise(
            x,
            &self.values[self.layout.head_weight.clone()],
            &self.values[self.layout.head_bias.clone()],
        );
        logits.data.iter().map(|&v| sigmoid(v)).collect()
    }

    /// Inference forward pass over one normalized patch.
    pub fn forward(&self, patch: &Tensor) -> Result<ForwardOutput> {
        let enc = self.encode(patch)?;
        let (gated, cls_prob, activation_map) = match self.classifier() {
            Some((w, b)) => {
                let f = gap_channelwise(&enc.bottleneck)?;
                let p = classify_patch(&f, w, b)?;
                let (d0, a) = cam_gate(&enc.bottleneck, w)?;
                (d0, Some(p), Some(a))
            }
            None => (enc.bottleneck.clone(), None, None),
        };
        let seg_probs = self.decode(&enc.skips, &gated);
        Ok(ForwardOutput {
            seg_probs,
            cls_prob,
            bottleneck: enc.bottleneck,
            gated,
            activation_map,
        })
    }

    /// Forward pass that records what [`CamUNetParams::backward`] needs.
    pub fn forward_train(&self, patch: &Tensor) -> Result<(ForwardOutput, Tape)> {
        self.check_input(patch)?;
        let nunits = self.layout.units.len();
        let levels = self.layout.levels();
        let mut inputs: Vec<Option<Tensor>> = vec![None; nunits];
        let mut caches: Vec<Option<NormCache>> = vec![None; nunits];
        let mut record = |idx: usize, x: Tensor| -> Tensor {
            let (y, cache) = self.run_unit(&self.layout.units[idx], &x);
            inputs[idx] = Some(x);
            caches[idx] = Some(cache);
            y
        };
        let mut skips = Vec::with_capacity(levels - 1);
        let mut x = patch.clone();
        for l in 0..levels {
            x = record(self.layout.enc_unit(l, false), x);
            x = record(self.layout.enc_unit(l, true), x);
            if l + 1 < levels {
                skips.push(x.clone());
            }
        }
        let e3 = x;
        let (gated, gap, gate, cls_prob, amap) = match self.classifier() {
            Some((w, b)) => {
                let f = gap_channelwise(&e3)?;
                let p = classify_patch(&f, w, b)?;
                let (d0, a) = cam_gate(&e3, w)?;
                let g = a.iter().map(|&v| sigmoid(v)).collect();
                (d0, f, g, Some(p), Some(a))
            }
            None => (e3.clone(), Vec::new(), Vec::new(), None, None),
        };
        let mut x = gated.clone();
        for l in (0..levels - 1).rev() {
            let [up, c0, c1] = self.layout.dec_units(l);
            let u = record(up, x);
            let cat = Tensor::concat(&u, &skips[l]);
            x = record(c0, cat);
            x = record(c1, x);
        }
        let probs = self.head(&x);
        let out = ForwardOutput {
            seg_probs: probs.clone(),
            cls_prob,
            bottleneck: e3.clone(),
            gated,
            activation_map: amap,
        };
        let tape = Tape {
            inputs,
            caches,
            bottleneck: e3,
            gap,
            gate,
            cls_prob,
            head_input: x,
            probs,
        };
        Ok((out, tape))
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the loss
    /// gradients w.r.t. the voxel probabilities and the patch probability.
    pub fn backward(&self, tape: &Tape, dprobs: &[f32], dcls: f32) -> Vec<f32> {
        let mut grads = vec![0.0f32; self.values.len()];
        let levels = self.layout.levels();
        let shape = tape.head_input.shape;
        let dlogits: Vec<f32> = dprobs
            .iter()
            .zip(&tape.probs)
            .map(|(&g, &p)| g * p * (1.0 - p))
            .collect();
        let dlogits = Tensor::from_vec(1, shape, dlogits);
        let mut dx = {
            let (lo, hi) = grads.split_at_mut(self.layout.head_bias.start);
            nn::pointwise_backward(
                &tape.head_input,
                &self.values[self.layout.head_weight.clone()],
                &dlogits,
                &mut lo[self.layout.head_weight.clone()],
                &mut hi[..1],
            )
        };
        let mut dskips: Vec<Option<Tensor>> = vec![None; levels - 1];
        for l in 0..levels - 1 {
            let [up, c0, c1] = self.layout.dec_units(l);
            dx = self.unit_backward(c1, tape, dx, &mut grads, true).expect("dx");
            let dcat = self.unit_backward(c0, tape, dx, &mut grads, true).expect("dx");
            let first = self.layout.units[up].cout;
            let (dup, dskip) = dcat.split(first);
            dskips[l] = Some(dskip);
            dx = self.unit_backward(up, tape, dup, &mut grads, true).expect("dx");
        }
        // dx is now the gradient w.r.t. d0.
        let mut de3 = match (&self.layout.cam, tape.cls_prob) {
            (Some((wr, br)), Some(p)) => self.cam_backward(tape, wr.clone(), br.start, dx, p, dcls, &mut grads),
            _ => dx,
        };
        for l in (0..levels).rev() {
            let second = self.layout.enc_unit(l, true);
            let first = self.layout.enc_unit(l, false);
            de3 = self.unit_backward(second, tape, de3, &mut grads, true).expect("dx");
            match self.unit_backward(first, tape, de3, &mut grads, l > 0) {
                Some(mut d) => {
                    if let Some(ds) = dskips[l - 1].take() {
                        for (a, b) in d.data.iter_mut().zip(&ds.data) {
                            *a += b;
                        }
                    }
                    de3 = d;
                }
                None => break,
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn cam_backward(
        &self,
        tape: &Tape,
        wr: Range<usize>,
        bias_idx: usize,
        dd0: Tensor,
        p: f32,
        dcls: f32,
        grads: &mut [f32],
    ) -> Tensor {
        let e3 = &tape.bottleneck;
        let w = &self.values[wr.clone()];
        let n = e3.spatial();
        let dz = dcls as f64 * p as f64 * (1.0 - p as f64);
        grads[bias_idx] += dz as f32;
        // dA(x) = σ'(A) · Σ_k dd0[k,x] e3[k,x]
        let mut da = vec![0.0f64; n];
        for k in 0..e3.channels {
            for ((acc, &g), &e) in da.iter_mut().zip(dd0.channel(k)).zip(e3.channel(k)) {
                *acc += g as f64 * e as f64;
            }
        }
        for (acc, &g) in da.iter_mut().zip(&tape.gate) {
            *acc *= g as f64 * (1.0 - g as f64);
        }
        let mut de = Tensor::zeros(e3.channels, e3.shape);
        for k in 0..e3.channels {
            let wk = w[k] as f64;
            let dfk = dz * wk / n as f64;
            let ek = e3.channel(k);
            let mut dwk = dz * tape.gap[k] as f64;
            let src = dd0.channel(k);
            let dst = de.channel_mut(k);
            for x in 0..n {
                dwk += da[x] * ek[x] as f64;
                dst[x] = (src[x] as f64 * tape.gate[x] as f64 + da[x] * wk + dfk) as f32;
            }
            grads[wr.start + k] += dwk as f32;
        }
        de
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_counts() {
        let with = CamUNetConfig::default();
        let without = CamUNetConfig {
            classifier_enabled: false,
            ..CamUNetConfig::default()
        };
        assert_eq!(param_count(&with), 1_401_506);
        assert_eq!(param_count(&without), 1_401_377);
    }

    #[test]
    fn config_validation() {
        let mut c = CamUNetConfig::default();
        c.channels = vec![16, 16, 32];
        assert!(c.validate().is_err());
        c.channels = vec![16];
        assert!(c.validate().is_err());
        c = CamUNetConfig::default();
        c.patch_edge = 100;
        assert!(c.validate().is_err());
        c.patch_edge = 32;
        assert!(c.validate().is_ok());
        assert_eq!(c.bottleneck_edge(), 4);
    }

    #[test]
    fn gap_examples() {
        let e = Tensor::from_vec(1, Shape3::cube(2), vec![3.0; 8]);
        assert_eq!(gap_channelwise(&e).unwrap(), vec![3.0]);
        let e = Tensor::from_vec(1, Shape3::cube(2), (0..8).map(|v| v as f32).collect());
        assert_eq!(gap_channelwise(&e).unwrap(), vec![3.5]);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_patch(&[1.0, 2.0], &[0.0, 0.0], 0.0).unwrap(), 0.5);
        assert_eq!(classify_patch(&[0.0, 5.0], &[1.0, 0.0], 0.0).unwrap(), 0.5);
        let p = classify_patch(&[1.0], &[3f32.ln()], 0.0).unwrap();
        assert!((p - 0.75).abs() < 1e-6);
        assert!(classify_patch(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn cam_gate_examples() {
        let e = Tensor::from_vec(2, Shape3::cube(2), (0..16).map(|v| v as f32 - 4.0).collect());
        let (d0, a) = cam_gate(&e, &[0.0, 0.0]).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        for (x, y) in d0.data.iter().zip(&e.data) {
            assert_eq!(*x, 0.5 * y);
        }
        let z = Tensor::zeros(2, Shape3::cube(2));
        let (d0, _) = cam_gate(&z, &[3.0, -1.0]).unwrap();
        assert!(d0.data.iter().all(|&v| v == 0.0));
        let mut one = Tensor::zeros(1, Shape3::cube(2));
        one.data[5] = 2.0;
        let (d0, _) = cam_gate(&one, &[1.0]).unwrap();
        assert!((d0.data[5] - 1.761_594_2).abs() < 1e-6);
        assert!(cam_gate(&one, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_layout_is_dense() {
        let mut cfg = CamUNetConfig::default();
        cfg.channels = vec![2, 4, 8];
        cfg.patch_edge = 8;
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a.values, b.values);
        let c = init_params(&cfg, 4).unwrap();
        assert_ne!(a.values, c.values);
        let mut next = 0;
        for e in a.entries() {
            assert_eq!(e.offset, next);
            next += e.len();
        }
        assert_eq!(next, a.count());
        assert!(a.get("enc0.conv0.norm.gamma").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.get("head.bias").unwrap() == [0.0]);
        assert_eq!(a.get("cam.weight").unwrap().len(), 8);
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let cfg = CamUNetConfig {
            channels: vec![2, 4, 8],
            patch_edge: 8,
            ..CamUNetConfig::default()
        };
        let p = init_params(&cfg, 1).unwrap();
        let x = Tensor::from_vec(
            1,
            Shape3::cube(8),
            (0..512).map(|i| ((i * 37) % 200) as f32 / 100.0 - 1.0).collect(),
        );
        let out = p.forward(&x).unwrap();
        assert_eq!(out.seg_probs.len(), 512);
        assert!(out.seg_probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let cls = out.cls_prob.unwrap();
        assert!(cls > 0.0 && cls < 1.0);
        assert_eq!(out.bottleneck.shape, Shape3::cube(2));
        assert_eq!(out.bottleneck.channels, 8);
        assert_eq!(out.activation_map.as_ref().unwrap().len(), 8);
        assert!(p.forward(&Tensor::zeros(1, Shape3::cube(4))).is_err());

        let (train_out, _) = p.forward_train(&x).unwrap();
        assert_eq!(train_out.seg_probs, out.seg_probs);
        assert_eq!(train_out.cls_prob, out.cls_prob);
    }
}
