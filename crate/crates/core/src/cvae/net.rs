//! Encoder/decoder layer stacks with explicit forward and backward passes.

use serde::{Deserialize, Serialize};

use crate::nn::{
    concat_label_maps, global_avg_pool, global_avg_pool_backward, sigmoid, silu, silu_grad,
    take_channels, upsample2, upsample2_backward, Conv2d, Init, Linear, MaxPool2, ParamLayout,
    Real, Tensor,
};

/// Where the class label is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Every residual block input (encoder) and every conv input (decoder).
    Full,
    /// Encoder stem and decoder dense layer only.
    FirstLayer,
    /// No label anywhere.
    None,
}

/// Label widths at each injection site: encoder stem, encoder blocks,
/// decoder dense layer, decoder convs.
pub(crate) fn injection_widths(mode: LabelMode, k: usize) -> [usize; 4] {
    match mode {
        LabelMode::Full => [k, k, k, k],
        LabelMode::FirstLayer => [k, 0, k, 0],
        LabelMode::None => [0, 0, 0, 0],
    }
}

pub(crate) struct Block {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    inject: bool,
}

pub(crate) struct Arch {
    stem: Conv2d,
    stem_inject: bool,
    blocks: Vec<Block>,
    head: Linear,
    fc: Linear,
    fc_inject: bool,
    convs: Vec<Conv2d>,
    conv_inject: bool,
    latent: usize,
    decoder_width: usize,
}

/// A conv whose weights start at zero, so each residual branch starts as
/// the identity (no normalisation layers are used).
fn zero_conv(layout: &mut ParamLayout, c: usize, kernel: usize) -> Conv2d {
    let fan_in = c * kernel * kernel;
    let weight = layout.alloc(c * fan_in, Init::Zeros);
    let bias = layout.alloc(c, Init::Zeros);
    Conv2d {
        in_c: c,
        out_c: c,
        kernel,
        stride: 1,
        pad: kernel / 2,
        weight,
        bias,
    }
}

impl Arch {
    pub(crate) fn build(
        latent: usize,
        num_classes: usize,
        base_width: usize,
        blocks: [usize; 4],
        decoder_width: usize,
        mode: LabelMode,
    ) -> (Self, ParamLayout) {
        let [k_stem, k_block, k_fc, k_conv] = injection_widths(mode, num_classes);
        let mut layout = ParamLayout::new();
        let stem = layout.conv(3 + k_stem, base_width, 3, 2, 1, true);
        let mut in_c = base_width;
        let mut list = Vec::new();
        for (s, &count) in blocks.iter().enumerate() {
            let out_c = base_width << s;
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let conv1 = layout.conv(in_c + k_block, out_c, 3, stride, 1, true);
                let conv2 = zero_conv(&mut layout, out_c, 3);
                let shortcut = (stride != 1 || in_c != out_c)
                    .then(|| layout.conv(in_c, out_c, 1, stride, 0, false));
                list.push(Block {
                    conv1,
                    conv2,
                    shortcut,
                    inject: k_block > 0,
                });
                in_c = out_c;
            }
        }
        let head = layout.linear(in_c, 2 * latent, false);
        let fc = layout.linear(latent + k_fc, decoder_width * 64, true);
        let mut convs = Vec::new();
        let mut c = decoder_width;
        for i in 0..4 {
            let out = if i == 3 { 3 } else { c / 2 };
            convs.push(layout.conv(c + k_conv, out, 3, 1, 1, i < 3));
            c = out;
        }
        (
            Self {
                stem,
                stem_inject: k_stem > 0,
                blocks: list,
                head,
                fc,
                fc_inject: k_fc > 0,
                convs,
                conv_inject: k_conv > 0,
                latent,
                decoder_width,
            },
            layout,
        )
    }
}

fn act_backward<T: Real>(grad: &mut Tensor<T>, pre: &Tensor<T>) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        *g = *g * silu_grad(p);
    }
}

fn maybe_labels<T: Real>(x: &Tensor<T>, label: &[T], inject: bool) -> Tensor<T> {
    if inject {
        concat_label_maps(x, label)
    } else {
        x.clone()
    }
}

struct BlockCache<T> {
    in_shape: (usize, usize, usize),
    cols1: Vec<T>,
    h1_pre: Tensor<T>,
    cols2: Vec<T>,
    sc_cols: Option<Vec<T>>,
    sum_pre: Tensor<T>,
}

pub(crate) struct EncoderCache<T> {
    stem_cols: Vec<T>,
    stem_pre: Tensor<T>,
    pub(crate) pool_arg: Vec<u32>,
    input_hw: (usize, usize),
    blocks: Vec<BlockCache<T>>,
    last_shape: (usize, usize, usize),
    feat: Vec<T>,
}

struct ConvCache<T> {
    in_shape: (usize, usize, usize),
    cols: Vec<T>,
    pre: Tensor<T>,
}

pub(crate) struct DecoderCache<T> {
    zin: Vec<T>,
    fc_pre: Vec<T>,
    convs: Vec<ConvCache<T>>,
    output: Tensor<T>,
}

impl Arch {
    /// Raw head output `[μ ‖ log σ²]` (unclamped) plus the backward cache.
    /// With `routing`, the stem pool reuses those choices.
    pub(crate) fn encode<T: Real>(
        &self,
        p: &[T],
        x: &Tensor<T>,
        label: &[T],
        routing: Option<&[u32]>,
    ) -> (Vec<T>, EncoderCache<T>) {
        let xin = maybe_labels(x, label, self.stem_inject);
        let (stem_pre, stem_cols) = self.stem.forward(p, &xin);
        let (mut h, pool_arg) = match routing {
            Some(arg) => (MaxPool2.forward_routed(&stem_pre.map(silu), arg), arg.to_vec()),
            None => MaxPool2.forward(&stem_pre.map(silu)),
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let xin = maybe_labels(&h, label, b.inject);
            let (h1_pre, cols1) = b.conv1.forward(p, &xin);
            let (h2, cols2) = b.conv2.forward(p, &h1_pre.map(silu));
            let (sc, sc_cols) = match &b.shortcut {
                Some(c) => {
                    let (o, cols) = c.forward(p, &h);
                    (o, Some(cols))
                }
                None => (h.clone(), None),
            };
            let mut sum_pre = h2;
            for (a, &s) in sum_pre.data.iter_mut().zip(&sc.data) {
                *a = *a + s;
            }
            let out = sum_pre.map(silu);
            blocks.push(BlockCache {
                in_shape: h.shape(),
                cols1,
                h1_pre,
                cols2,
                sc_cols,
                sum_pre,
            });
            h = out;
        }
        let feat = global_avg_pool(&h);
        let raw = self.head.forward(p, &feat, 1);
        (
            raw,
            EncoderCache {
                stem_cols,
                stem_pre,
                pool_arg,
                input_hw: (x.h, x.w),
                blocks,
                last_shape: h.shape(),
                feat,
            },
        )
    }

    /// Accumulates parameter gradients given `d loss / d raw head output`.
    pub(crate) fn encode_backward<T: Real>(
        &self,
        p: &[T],
        cache: &EncoderCache<T>,
        grad_raw: &[T],
        grads: &mut [T],
    ) {
        let g_feat = self
            .head
            .backward(p, &cache.feat, grad_raw, 1, grads, true)
            .expect("input gradient");
        let mut g = global_avg_pool_backward(&g_feat, cache.last_shape);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut g_sum = g;
            act_backward(&mut g_sum, &c.sum_pre);
            let (_, h, w) = c.sum_pre.shape();
            let mut g_h1 = b
                .conv2
                .backward(p, &c.cols2, h, w, &g_sum, grads, true)
                .expect("input gradient");
            act_backward(&mut g_h1, &c.h1_pre);
            let (in_c, in_h, in_w) = c.in_shape;
            let g_xin = b
                .conv1
                .backward(p, &c.cols1, in_h, in_w, &g_h1, grads, true)
                .expect("input gradient");
            let mut g_x = take_channels(&g_xin, in_c).expect("label planes appended last");
            let g_sc = match (&b.shortcut, &c.sc_cols) {
                (Some(conv), Some(cols)) => conv
                    .backward(p, cols, in_h, in_w, &g_sum, grads, true)
                    .expect("input gradient"),
                _ => g_sum,
            };
            for (a, &s) in g_x.data.iter_mut().zip(&g_sc.data) {
                *a = *a + s;
            }
            g = g_x;
        }
        let mut g_stem = MaxPool2.backward(&cache.pool_arg, cache.stem_pre.shape(), &g);
        act_backward(&mut g_stem, &cache.stem_pre);
        let (h, w) = cache.input_hw;
        self.stem
            .backward(p, &cache.stem_cols, h, w, &g_stem, grads, false);
    }

    pub(crate) fn decode<T: Real>(
        &self,
        p: &[T],
        z: &[T],
        label: &[T],
    ) -> (Tensor<T>, DecoderCache<T>) {
        let mut zin = z.to_vec();
        if self.fc_inject {
            zin.extend_from_slice(label);
        }
        let fc_pre = self.fc.forward(p, &zin, 1);
        let mut h = Tensor::from_vec(
            self.decoder_width,
            8,
            8,
            fc_pre.iter().map(|&v| silu(v)).collect(),
        )
        .expect("dense output reshapes to 8x8 maps");
        let mut convs = Vec::with_capacity(4);
        for (i, conv) in self.convs.iter().enumerate() {
            let u = upsample2(&h);
            let uin = maybe_labels(&u, label, self.conv_inject);
            let (pre, cols) = conv.forward(p, &uin);
            h = if i == 3 { pre.map(sigmoid) } else { pre.map(silu) };
            convs.push(ConvCache {
                in_shape: u.shape(),
                cols,
                pre,
            });
        }
        (
            h.clone(),
            DecoderCache {
                zin,
                fc_pre,
                convs,
                output: h,
            },
        )
    }

    /// Accumulates parameter gradients and returns `d loss / d z`.
    pub(crate) fn decode_backward<T: Real>(
        &self,
        p: &[T],
        cache: &DecoderCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut [T],
    ) -> Vec<T> {
        let mut g = grad_out.clone();
        for (i, (conv, c)) in self.convs.iter().zip(&cache.convs).enumerate().rev() {
            if i == 3 {
                for (gv, &y) in g.data.iter_mut().zip(&cache.output.data) {
                    *gv = *gv * y * (T::one() - y);
                }
            } else {
                act_backward(&mut g, &c.pre);
            }
            let (uc, uh, uw) = c.in_shape;
            let g_in = conv
                .backward(p, &c.cols, uh, uw, &g, grads, true)
                .expect("input gradient");
            g = upsample2_backward(&take_channels(&g_in, uc).expect("label planes appended last"));
        }
        let g_fc: Vec<T> = g
            .data
            .iter()
            .zip(&cache.fc_pre)
            .map(|(&gv, &pre)| gv * silu_grad(pre))
            .collect();
        let g_zin = self
            .fc
            .backward(p, &cache.zin, &g_fc, 1, grads, true)
            .expect("input gradient");
        g_zin[..self.latent].to_vec()
    }
}
