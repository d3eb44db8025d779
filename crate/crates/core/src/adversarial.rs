//! Patch discriminator and the temporal conditional adversarial losses.
//!
//! Edited supervision is frame-inconsistent, so the discriminator judges
//! temporal difference pairs rather than single frames. For one view at
//! adjacent timesteps t and k, with E the edited target and C the current
//! render,
//!
//!   real = (E_t, E_t - E_k),   fake = (C_t, C_t - E_k),
//!
//! concatenated to six channels (anchor in 0-2, difference in 3-5; the
//! signed difference is stored with a +0.5 offset so every channel sits
//! near [0, 1]). A small convolutional stack scores local patches and the
//! losses average over the patch logit map:
//!
//!   L_D = mean(-log sig(r)) + mean(-log(1 - sig(f)))
//!   L_G = mean(-log sig(f))
//!
//! Both reduce through the stable identities -log sig(x) = softplus(-x)
//! and -log(1 - sig(x)) = softplus(x), so logits of any magnitude produce
//! finite losses. `d_loss` differentiates only discriminator parameters
//! (the render is a constant there); `g_loss` differentiates only the
//! rendered image, flowing through both the anchor and the difference
//! channels:
//!
//!   dL/dC_t = g_anchor + g_difference.

use rand_distr::{Distribution, Normal};

use crate::buffers::ImageBuffer;
use crate::error::{Error, Result};
use crate::rng::{mix64, stream_rng};

/// Negative-side slope of the hidden activations.
const LEAKY_SLOPE: f64 = 0.2;

/// Standard deviation of the seeded normal weight init; biases start at 0.
const INIT_SIGMA: f64 = 0.02;

/// Offset added to signed difference channels before concatenation.
pub const DIFFERENCE_OFFSET: f64 = 0.5;

/// Checkpoint blob magic; bump the trailing digits on layout changes.
const BLOB_MAGIC: &[u8; 8] = b"WSDISC01";

/// Inner product of two equal-length rows, summed left to right.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense (channel, row, column) tensor backing the discriminator.
#[derive(Debug, Clone, PartialEq)]
struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }
}

/// One convolution layer: `out x in x k x k` weights plus per-channel bias.
#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_SIGMA).expect("constant sigma is finite");
        ConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights: (0..out_channels * in_channels * kernel * kernel)
                .map(|_| normal.sample(rng))
                .collect(),
            bias: vec![0.0; out_channels],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn out_extent(&self, extent: usize) -> usize {
        assert!(
            extent + 2 * self.padding >= self.kernel,
            "input extent {extent} smaller than a {0}x{0} kernel",
            self.kernel
        );
        (extent + 2 * self.padding - self.kernel) / self.stride + 1
    }

    #[inline]
    fn weight_idx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Range of kernel taps that land inside the padded input for output
    /// position `op` along an axis of the given extent.
    fn tap_window(&self, op: usize, extent: usize) -> (usize, usize) {
        let base = op * self.stride;
        let lo = self.padding.saturating_sub(base);
        let hi = self.kernel.min(extent + self.padding - base);
        (lo, hi)
    }

    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let oh = self.out_extent(input.height);
        let ow = self.out_extent(input.width);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            for oy in 0..oh {
                let (ky_lo, ky_hi) = self.tap_window(oy, input.height);
                for ox in 0..ow {
                    let (kx_lo, kx_hi) = self.tap_window(ox, input.width);
                    let taps = kx_hi - kx_lo;
                    let ix = ox * self.stride + kx_lo - self.padding;
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        for ky in ky_lo..ky_hi {
                            let iy = oy * self.stride + ky - self.padding;
                            let w0 = self.weight_idx(o, i, ky, kx_lo);
                            let r0 = input.idx(i, iy, ix);
                            acc += dot(&self.weights[w0..w0 + taps], &input.data[r0..r0 + taps]);
                        }
                    }
                    let slot = out.idx(o, oy, ox);
                    out.data[slot] = acc;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `gw`/`gb` and, when requested,
    /// returns the gradient with respect to this layer's input.
    fn backward(
        &self,
        input: &FeatureMap,
        g_out: &FeatureMap,
        gw: &mut [f64],
        gb: &mut [f64],
        want_input: bool,
    ) -> Option<FeatureMap> {
        let mut g_in = want_input.then(|| FeatureMap::zeros(input.channels, input.height, input.width));
        for o in 0..self.out_channels {
            for oy in 0..g_out.height {
                let (ky_lo, ky_hi) = self.tap_window(oy, input.height);
                for ox in 0..g_out.width {
                    let g = g_out.at(o, oy, ox);
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let (kx_lo, kx_hi) = self.tap_window(ox, input.width);
                    let taps = kx_hi - kx_lo;
                    let ix = ox * self.stride + kx_lo - self.padding;
                    for i in 0..self.in_channels {
                        for ky in ky_lo..ky_hi {
                            let iy = oy * self.stride + ky - self.padding;
                            let w0 = self.weight_idx(o, i, ky, kx_lo);
                            let r0 = input.idx(i, iy, ix);
                            for (gw_slot, x) in
                                gw[w0..w0 + taps].iter_mut().zip(&input.data[r0..r0 + taps])
                            {
                                *gw_slot += g * x;
                            }
                            if let Some(gi) = g_in.as_mut() {
                                let s0 = gi.idx(i, iy, ix);
                                for (gi_slot, w) in gi.data[s0..s0 + taps]
                                    .iter_mut()
                                    .zip(&self.weights[w0..w0 + taps])
                                {
                                    *gi_slot += g * w;
                                }
                            }
                        }
                    }
                }
            }
        }
        g_in
    }
}

fn leaky_forward(map: &FeatureMap) -> FeatureMap {
    let mut out = map.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    out
}

fn leaky_backward(pre: &FeatureMap, g: &mut FeatureMap) {
    for (slot, v) in g.data.iter_mut().enumerate() {
        if pre.data[slot] < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Everything the backward pass replays: each convolution's input and the
/// hidden pre-activations the leaky slopes branch on.
struct ForwardTrace {
    inputs: Vec<FeatureMap>,
    pres: Vec<FeatureMap>,
    logits: FeatureMap,
}

/// Patch discriminator over six-channel temporal pairs: three strided
/// 4x4 convolutions (6 -> 16 -> 32 -> 64, leaky slope 0.2) and a 3x3
/// head producing a one-channel patch logit map.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    layers: Vec<ConvLayer>,
}

/// Layer shapes in declaration order: (in, out, kernel, stride, padding).
const ARCHITECTURE: [(usize, usize, usize, usize, usize); 4] = [
    (6, 16, 4, 2, 1),
    (16, 32, 4, 2, 1),
    (32, 64, 4, 2, 1),
    (64, 1, 3, 1, 1),
];

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xd15c);
        Discriminator {
            layers: ARCHITECTURE
                .iter()
                .map(|&(i, o, k, s, p)| ConvLayer::new(i, o, k, s, p, &mut rng))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Parameters flattened in declaration order (per layer: weights, then
    /// bias). Gradients from `d_loss` use the same layout.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "flat parameter length");
        let mut offset = 0;
        for layer in &mut self.layers {
            let (w, b) = (layer.weights.len(), layer.bias.len());
            layer.weights.copy_from_slice(&params[offset..offset + w]);
            offset += w;
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
    }

    /// Order-sensitive hash of the parameter bits; equal only when every
    /// parameter is bit-identical. Routing tests assert on this.
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0x5eed_0f_d15cu64;
        for layer in &self.layers {
            for p in layer.weights.iter().chain(&layer.bias) {
                h = mix64(h ^ p.to_bits());
            }
        }
        h
    }

    /// Patch logit map extents for an input image of the given size.
    pub fn logit_extent(&self, mut height: usize, mut width: usize) -> (usize, usize) {
        for layer in &self.layers {
            height = layer.out_extent(height);
            width = layer.out_extent(width);
        }
        (height, width)
    }

    fn forward_trace(&self, input: FeatureMap) -> ForwardTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len() - 1);
        let mut current = input;
        for (li, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&current);
            inputs.push(current);
            if li + 1 == self.layers.len() {
                return ForwardTrace {
                    inputs,
                    pres,
                    logits: pre,
                };
            }
            current = leaky_forward(&pre);
            pres.push(pre);
        }
        unreachable!("architecture has at least one layer");
    }

    /// Backpropagates a logit-map gradient. Parameter gradients accumulate
    /// into `g_params` (flat layout); the input gradient is returned only
    /// when requested.
    fn backward_trace(
        &self,
        trace: &ForwardTrace,
        g_logits: FeatureMap,
        g_params: &mut [f64],
        want_input: bool,
    ) -> Option<FeatureMap> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.param_count();
        }
        let mut g = g_logits;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let (gw, gb) = g_params[offsets[li]..offsets[li] + layer.param_count()]
                .split_at_mut(layer.weights.len());
            let need_input = li > 0 || want_input;
            let g_in = layer.backward(&trace.inputs[li], &g, gw, gb, need_input);
            if li == 0 {
                return g_in;
            }
            let mut g_in = g_in.expect("hidden layers always need input gradients");
            leaky_backward(&trace.pres[li - 1], &mut g_in);
            g = g_in;
        }
        unreachable!("loop returns at layer 0");
    }
}

/// Which side of the discriminator objective a pair sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Real,
    Fake,
}

/// Six-channel discriminator input: an anchor frame plus its offset-stored
/// temporal difference against the adjacent edited frame.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub anchor: ImageBuffer,
    pub difference: ImageBuffer,
    pub label: PairLabel,
}

impl PairSample {
    /// Signed anchor-minus-reference difference with the offset removed.
    pub fn raw_difference(&self) -> ImageBuffer {
        self.difference.map(|v| v - DIFFERENCE_OFFSET)
    }
}

/// Builds the real pair (E_t, E_t - E_k) and fake pair (C_t, C_t - E_k)
/// for one view at adjacent timesteps t and k.
pub fn make_pairs(
    edited_t: &ImageBuffer,
    edited_k: &ImageBuffer,
    rendered_t: &ImageBuffer,
) -> Result<(PairSample, PairSample)> {
    edited_t.require_same_shape(edited_k, "temporal pair")?;
    edited_t.require_same_shape(rendered_t, "temporal pair")?;
    let offset_diff = |a: &ImageBuffer, b: &ImageBuffer| {
        ImageBuffer::from_fn(a.width(), a.height(), |x, y| {
            (a.get(x, y) - b.get(x, y)).add_scalar(DIFFERENCE_OFFSET)
        })
    };
    let real = PairSample {
        anchor: edited_t.clone(),
        difference: offset_diff(edited_t, edited_k),
        label: PairLabel::Real,
    };
    let fake = PairSample {
        anchor: rendered_t.clone(),
        difference: offset_diff(rendered_t, edited_k),
        label: PairLabel::Fake,
    };
    Ok((real, fake))
}

fn pair_input(pair: &PairSample) -> FeatureMap {
    let (w, h) = (pair.anchor.width(), pair.anchor.height());
    let mut map = FeatureMap::zeros(6, h, w);
    for y in 0..h {
        for x in 0..w {
            let a = pair.anchor.get(x, y);
            let d = pair.difference.get(x, y);
            for c in 0..3 {
                let slot = map.idx(c, y, x);
                map.data[slot] = a[c];
                let slot = map.idx(c + 3, y, x);
                map.data[slot] = d[c];
            }
        }
    }
    map
}

/// softplus(x) = ln(1 + e^x), computed without overflow at either tail.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discriminator objective on one (real, fake) pair. Returns the loss and
/// its gradient with respect to the discriminator parameters (flat layout);
/// the rendered image inside `fake` is a constant here.
///
/// Per patch logit, d softplus(-r)/dr = sig(r) - 1 and
/// d softplus(f)/df = sig(f), each divided by the patch count.
pub fn d_loss(
    disc: &Discriminator,
    real: &PairSample,
    fake: &PairSample,
) -> Result<(f64, Vec<f64>)> {
    real.anchor.require_same_shape(&fake.anchor, "adversarial pair")?;
    let trace_r = disc.forward_trace(pair_input(real));
    let trace_f = disc.forward_trace(pair_input(fake));
    let n = trace_r.logits.data.len() as f64;
    let mut loss = 0.0;
    let mut g_r = FeatureMap::zeros(1, trace_r.logits.height, trace_r.logits.width);
    let mut g_f = FeatureMap::zeros(1, trace_f.logits.height, trace_f.logits.width);
    for (slot, &r) in trace_r.logits.data.iter().enumerate() {
        loss += softplus(-r) / n;
        g_r.data[slot] = (sigmoid(r) - 1.0) / n;
    }
    for (slot, &f) in trace_f.logits.data.iter().enumerate() {
        loss += softplus(f) / n;
        g_f.data[slot] = sigmoid(f) / n;
    }
    let mut g_params = vec![0.0; disc.param_count()];
    disc.backward_trace(&trace_r, g_r, &mut g_params, false);
    disc.backward_trace(&trace_f, g_f, &mut g_params, false);
    Ok((loss, g_params))
}

/// Generator objective on the fake pair. Returns the loss and its gradient
/// with respect to the rendered image C_t; discriminator parameters are
/// constants here. C_t enters both the anchor and the difference channels,
/// so the pixel gradient is their sum.
pub fn g_loss(disc: &Discriminator, fake: &PairSample) -> Result<(f64, ImageBuffer)> {
    let trace = disc.forward_trace(pair_input(fake));
    let n = trace.logits.data.len() as f64;
    let mut loss = 0.0;
    let mut g_logits = FeatureMap::zeros(1, trace.logits.height, trace.logits.width);
    for (slot, &f) in trace.logits.data.iter().enumerate() {
        loss += softplus(-f) / n;
        g_logits.data[slot] = (sigmoid(f) - 1.0) / n;
    }
    let mut scratch = vec![0.0; disc.param_count()];
    let g_in = disc
        .backward_trace(&trace, g_logits, &mut scratch, true)
        .expect("input gradient requested");
    let mut pixels = ImageBuffer::zeros(fake.anchor.width(), fake.anchor.height());
    for y in 0..g_in.height {
        for x in 0..g_in.width {
            for c in 0..3 {
                let v = g_in.at(c, y, x) + g_in.at(c + 3, y, x);
                let mut p = pixels.get(x, y);
                p[c] = v;
                pixels.set(x, y, p);
            }
        }
    }
    Ok((loss, pixels))
}

/// Serializes parameters as the magic, a layer-shape header (u32 little
/// endian: layer count, then in/out/kernel/stride/padding per layer), and
/// all parameters as f32 little endian in declaration order.
pub fn to_blob(disc: &Discriminator) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(disc.layers.len() as u32).to_le_bytes());
    for layer in &disc.layers {
        for dim in [
            layer.in_channels,
            layer.out_channels,
            layer.kernel,
            layer.stride,
            layer.padding,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
    }
    for p in disc.flat_params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: &mut usize) -> Result<u32> {
    let end = *offset + 4;
    if end > bytes.len() {
        return Err(Error::BadCheckpoint {
            reason: format!("truncated at byte {offset}"),
        });
    }
    let v = u32::from_le_bytes(bytes[*offset..end].try_into().expect("length checked"));
    *offset = end;
    Ok(v)
}

/// Parses a blob written by `to_blob`, validating the magic and that the
/// shape header matches this crate's fixed architecture.
pub fn from_blob(bytes: &[u8]) -> Result<Discriminator> {
    if bytes.len() < BLOB_MAGIC.len() || &bytes[..BLOB_MAGIC.len()] != BLOB_MAGIC {
        return Err(Error::BadCheckpoint {
            reason: "bad magic".into(),
        });
    }
    let mut offset = BLOB_MAGIC.len();
    let layers = read_u32(bytes, &mut offset)? as usize;
    if layers != ARCHITECTURE.len() {
        return Err(Error::BadCheckpoint {
            reason: format!("expected {} layers, found {layers}", ARCHITECTURE.len()),
        });
    }
    for (li, &(i, o, k, s, p)) in ARCHITECTURE.iter().enumerate() {
        for (name, want) in [("in", i), ("out", o), ("kernel", k), ("stride", s), ("padding", p)] {
            let got = read_u32(bytes, &mut offset)? as usize;
            if got != want {
                return Err(Error::BadCheckpoint {
                    reason: format!("layer {li} {name}: expected {want}, found {got}"),
                });
            }
        }
    }
    let mut disc = Discriminator::new(0);
    let expected = disc.param_count();
    let body = &bytes[offset..];
    if body.len() != expected * 4 {
        return Err(Error::BadCheckpoint {
            reason: format!(
                "expected {} parameter bytes, found {}",
                expected * 4,
                body.len()
            ),
        });
    }
    let params: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunked by 4")) as f64)
        .collect();
    disc.set_flat_params(&params);
    Ok(disc)
}
