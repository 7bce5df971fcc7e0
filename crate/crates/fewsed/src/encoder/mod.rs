//! The feature extractor: a small convolutional network with analytic
//! parameter gradients.
//!
//! Four blocks of {3x3 conv (same padding), ReLU, 2x2 max-pool}, followed by
//! global average pooling over the remaining time-frequency grid. Parameters
//! live in one flat `Vec<f64>` so the optimizer and finite-difference checks
//! can treat the network as a single parameter vector.

mod adam;
mod checkpoint;
mod train;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train_base, ClassificationHead, TrainExample, TrainOptions};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const KERNEL: usize = 3;

/// Architecture of the encoder. The embedding dimension equals the channel
/// count of the last block (global average pooling).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_frames: usize,
    pub in_bins: usize,
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_frames: 17,
            in_bins: 128,
            channels: vec![16, 32, 64, 64],
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    pub fn segment_len(&self) -> usize {
        self.in_frames * self.in_bins
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockLayout {
    c_in: usize,
    c_out: usize,
    h: usize, // input height (time frames)
    w: usize, // input width (mel bins)
    kernel_off: usize,
    bias_off: usize,
}

impl BlockLayout {
    fn pooled(&self) -> (usize, usize) {
        ((self.h / 2).max(1), (self.w / 2).max(1))
    }
}

fn build_layout(cfg: &EncoderConfig) -> (Vec<BlockLayout>, usize) {
    let mut blocks = Vec::with_capacity(cfg.channels.len());
    let mut c_in = 1;
    let mut h = cfg.in_frames;
    let mut w = cfg.in_bins;
    let mut off = 0;
    for &c_out in &cfg.channels {
        let kernel_off = off;
        off += c_out * c_in * KERNEL * KERNEL;
        let bias_off = off;
        off += c_out;
        blocks.push(BlockLayout {
            c_in,
            c_out,
            h,
            w,
            kernel_off,
            bias_off,
        });
        h = (h / 2).max(1);
        w = (w / 2).max(1);
        c_in = c_out;
    }
    (blocks, off)
}

/// The feature extractor network.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: Vec<f64>,
    blocks: Vec<BlockLayout>,
}

/// Forward activations retained for the backward pass.
pub struct ForwardCache {
    block_inputs: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
    pool_out_last: Vec<f64>,
}

impl Encoder {
    /// He-normal initialization from a seeded RNG.
    pub fn new_seeded(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.in_frames == 0 || cfg.in_bins == 0 {
            return Err(Error::InvalidArgument("degenerate encoder config".into()));
        }
        let (blocks, n_params) = build_layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; n_params];
        for b in &blocks {
            let scale = (2.0 / (b.c_in * KERNEL * KERNEL) as f64).sqrt();
            for p in params[b.kernel_off..b.kernel_off + b.c_out * b.c_in * KERNEL * KERNEL]
                .iter_mut()
            {
                let g: f64 = StandardNormal.sample(&mut rng);
                *p = g * scale;
            }
            // biases start at zero
        }
        Ok(Self {
            cfg,
            params,
            blocks,
        })
    }

    pub fn from_params(cfg: EncoderConfig, params: Vec<f64>) -> Result<Self> {
        let (blocks, n_params) = build_layout(&cfg);
        if params.len() != n_params {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_params} params"),
                actual: format!("{} params", params.len()),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("encoder parameter".into()));
        }
        Ok(Self {
            cfg,
            params,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim()
    }

    /// FNV-1a hash of the raw parameter bytes; used to assert immutability.
    pub fn param_checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        for p in &self.params {
            for byte in p.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }

    fn check_segment(&self, segment: &[f64]) -> Result<()> {
        if segment.len() != self.cfg.segment_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.cfg.segment_len()),
                actual: format!("{} values", segment.len()),
            });
        }
        Ok(())
    }

    /// Embed one segment: conv blocks then global average pooling.
    pub fn forward(&self, segment: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(segment)?.0)
    }

    /// Forward pass that also returns the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, segment: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_segment(segment)?;
        let mut cache = ForwardCache {
            block_inputs: Vec::with_capacity(self.blocks.len()),
            conv_pre: Vec::with_capacity(self.blocks.len()),
            pool_argmax: Vec::with_capacity(self.blocks.len()),
            pool_out_last: Vec::new(),
        };
        let mut act = segment.to_vec();
        for b in &self.blocks {
            let conv = self.conv_forward(b, &act);
            let (pooled, argmax) = pool_relu_forward(b, &conv);
            cache.block_inputs.push(act);
            cache.conv_pre.push(conv);
            cache.pool_argmax.push(argmax);
            act = pooled;
        }
        let last = self.blocks.last().unwrap();
        let (ph, pw) = last.pooled();
        let spatial = ph * pw;
        let embed: Vec<f64> = (0..last.c_out)
            .map(|c| act[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64)
            .collect();
        cache.pool_out_last = act;
        Ok((embed, cache))
    }

    /// Backpropagate `upstream` (gradient wrt the raw embedding) to gradients
    /// of every encoder parameter. Returns a vector shaped like `params()`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.embed_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.embed_dim()),
                actual: format!("{} values", upstream.len()),
            });
        }
        let mut grads = vec![0.0; self.params.len()];

        // global average pool backward
        let last = self.blocks.last().unwrap();
        let (ph, pw) = last.pooled();
        let spatial = ph * pw;
        let mut d_act: Vec<f64> = Vec::with_capacity(last.c_out * spatial);
        for c in 0..last.c_out {
            let g = upstream[c] / spatial as f64;
            d_act.extend(std::iter::repeat_n(g, spatial));
        }

        for (bi, b) in self.blocks.iter().enumerate().rev() {
            // pool + relu backward: scatter to argmax, mask by conv_pre > 0
            let conv_pre = &cache.conv_pre[bi];
            let argmax = &cache.pool_argmax[bi];
            let mut d_conv = vec![0.0; conv_pre.len()];
            for (cell, &src) in argmax.iter().enumerate() {
                let src = src as usize;
                if conv_pre[src] > 0.0 {
                    d_conv[src] += d_act[cell];
                }
            }
            d_act = self.conv_backward(b, &cache.block_inputs[bi], &d_conv, &mut grads, bi > 0);
        }
        Ok(grads)
    }

    fn conv_forward(&self, b: &BlockLayout, input: &[f64]) -> Vec<f64> {
        let (h, w) = (b.h, b.w);
        let hw = h * w;
        let mut out = vec![0.0; b.c_out * hw];
        for co in 0..b.c_out {
            let bias = self.params[b.bias_off + co];
            let out_ch = &mut out[co * hw..(co + 1) * hw];
            out_ch.fill(bias);
            for ci in 0..b.c_in {
                let in_ch = &input[ci * hw..(ci + 1) * hw];
                let k_off = b.kernel_off + (co * b.c_in + ci) * KERNEL * KERNEL;
                let k = &self.params[k_off..k_off + KERNEL * KERNEL];
                for dy in 0..KERNEL {
                    for dx in 0..KERNEL {
                        let kv = k[dy * KERNEL + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let oy = dy as isize - 1;
                        let ox = dx as isize - 1;
                        let y0 = (-oy).max(0) as usize;
                        let y1 = (h as isize - oy).min(h as isize) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize) as usize;
                        let xs = (x0 as isize + ox) as usize;
                        let xe = (x1 as isize + ox) as usize;
                        for y in y0..y1 {
                            let iy = (y as isize + oy) as usize;
                            let in_row = &in_ch[iy * w + xs..iy * w + xe];
                            let out_row = &mut out_ch[y * w + x0..y * w + x1];
                            for (o, &i) in out_row.iter_mut().zip(in_row.iter()) {
                                *o += kv * i;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates kernel/bias gradients into `grads`; returns the gradient
    /// wrt the block input (skipped for the first block when `need_input` is
    /// false).
    fn conv_backward(
        &self,
        b: &BlockLayout,
        input: &[f64],
        d_out: &[f64],
        grads: &mut [f64],
        need_input: bool,
    ) -> Vec<f64> {
        let (h, w) = (b.h, b.w);
        let hw = h * w;
        let mut d_in = vec![0.0; if need_input { b.c_in * hw } else { 0 }];
        for co in 0..b.c_out {
            let d_ch = &d_out[co * hw..(co + 1) * hw];
            grads[b.bias_off + co] += d_ch.iter().sum::<f64>();
            for ci in 0..b.c_in {
                let in_ch = &input[ci * hw..(ci + 1) * hw];
                let k_off = b.kernel_off + (co * b.c_in + ci) * KERNEL * KERNEL;
                for dy in 0..KERNEL {
                    for dx in 0..KERNEL {
                        let oy = dy as isize - 1;
                        let ox = dx as isize - 1;
                        let y0 = (-oy).max(0) as usize;
                        let y1 = (h as isize - oy).min(h as isize) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize) as usize;
                        let xs = (x0 as isize + ox) as usize;
                        let xe = (x1 as isize + ox) as usize;
                        let mut kg = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + oy) as usize;
                            let in_row = &in_ch[iy * w + xs..iy * w + xe];
                            let d_row = &d_ch[y * w + x0..y * w + x1];
                            for (&dv, &iv) in d_row.iter().zip(in_row.iter()) {
                                kg += dv * iv;
                            }
                        }
                        grads[k_off + dy * KERNEL + dx] += kg;
                        if need_input {
                            let kv = self.params[k_off + dy * KERNEL + dx];
                            if kv == 0.0 {
                                continue;
                            }
                            let din_ch = &mut d_in[ci * hw..(ci + 1) * hw];
                            for y in y0..y1 {
                                let iy = (y as isize + oy) as usize;
                                let din_row = &mut din_ch[iy * w + xs..iy * w + xe];
                                let d_row = &d_ch[y * w + x0..y * w + x1];
                                for (di, &dv) in din_row.iter_mut().zip(d_row.iter()) {
                                    *di += kv * dv;
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// ReLU followed by 2x2 max-pool (stride 2, floor). Returns the pooled
/// activations and, per pooled cell, the flat index of the winning input.
fn pool_relu_forward(b: &BlockLayout, conv: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let (h, w) = (b.h, b.w);
    let hw = h * w;
    let (ph, pw) = b.pooled();
    let mut out = Vec::with_capacity(b.c_out * ph * pw);
    let mut argmax = Vec::with_capacity(b.c_out * ph * pw);
    for c in 0..b.c_out {
        let ch = &conv[c * hw..(c + 1) * hw];
        for py in 0..ph {
            for px in 0..pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for yy in (2 * py)..(2 * py + 2).min(h) {
                    for xx in (2 * px)..(2 * px + 2).min(w) {
                        let idx = yy * w + xx;
                        if ch[idx] > best {
                            best = ch[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best.max(0.0));
                argmax.push((c * hw + best_idx) as u32);
            }
        }
    }
    (out, argmax)
}

/// L2-normalize a vector. The boolean flags a degenerate (zero-norm) input,
/// which is returned unchanged.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (v.to_vec(), true)
    } else {
        (v.iter().map(|x| x / norm).collect(), false)
    }
}
