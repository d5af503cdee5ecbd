//! Conditional noise-prediction UNet.
//!
//! Input is `[x_t (3), sketch (1), stroke (3)]` concatenated along channels;
//! output is `[eps_hat (3), v (3)]`. Residual blocks carry the timestep
//! embedding; resampling happens inside residual blocks (average pooling down,
//! nearest-neighbour up) and self-attention runs at the configured resolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{DissError, Result};
use crate::scalar::Scalar;

/// Latent (3) + sketch (1) + stroke (4 - 1).
pub const IN_CHANNELS: usize = 7;
/// eps_hat (3) + variance interpolation v (3).
pub const OUT_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Spatial sizes (e.g. 8 for 8x8) that get a self-attention layer.
    pub attention_resolutions: Vec<usize>,
    pub attention_head_channels: usize,
    pub time_embedding_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            res_blocks_per_level: 2,
            attention_resolutions: vec![8],
            attention_head_channels: 32,
            time_embedding_dim: 128,
        }
    }
}

impl UNetConfig {
    /// Narrow variant for single-core training runs and tests.
    pub fn tiny(image_size: usize) -> Self {
        UNetConfig {
            image_size,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            res_blocks_per_level: 1,
            attention_resolutions: vec![image_size / 4],
            attention_head_channels: 16,
            time_embedding_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 {
            return Err(DissError::range("channel_multipliers", "need at least one level"));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(DissError::range("base_channels", "must be positive and even"));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(DissError::range("channel_multipliers", "entries must be positive"));
        }
        let factor = 1usize << (levels - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(DissError::range(
                "image_size",
                format!("{} not divisible by 2^(levels-1) = {factor}", self.image_size),
            ));
        }
        if self.attention_head_channels == 0 || self.time_embedding_dim == 0 {
            return Err(DissError::range("attention/time dims", "must be positive"));
        }
        Ok(())
    }
}

fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    None,
    Down,
    Up,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Affine,
    conv1: Affine,
    emb: Affine,
    norm2: Affine,
    conv2: Affine,
    skip: Option<Affine>,
    resample: Resample,
    groups_in: usize,
    groups_out: usize,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: Affine,
    qkv: Affine,
    proj: Affine,
    heads: usize,
    groups: usize,
}

#[derive(Clone, Debug)]
enum Block {
    Res(ResBlock),
    Attn(AttnBlock),
}

#[derive(Clone, Debug)]
struct Layout {
    time1: Affine,
    time2: Affine,
    conv_in: Affine,
    down: Vec<Vec<Block>>,
    mid: Vec<Block>,
    up: Vec<Vec<Block>>,
    norm_out: Affine,
    conv_out: Affine,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Affine {
        let w = self
            .store
            .add_uniform(format!("{name}.weight"), [cout, cin, k, k], cin * k * k, gain, &mut self.rng);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Affine { w, b }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Affine {
        self.conv(name, fin, fout, 1, 1.0)
    }

    fn norm(&mut self, name: &str, c: usize) -> Affine {
        let w = self.store.add(format!("{name}.weight"), Tensor::filled([c, 1, 1, 1], T::one()));
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros([c, 1, 1, 1]));
        Affine { w, b }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, tdim: usize, resample: Resample) -> Block {
        Block::Res(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1.0),
            emb: self.linear(&format!("{name}.emb"), tdim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 0.5),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0)),
            resample,
            groups_in: norm_groups(cin),
            groups_out: norm_groups(cout),
        })
    }

    fn attn(&mut self, name: &str, c: usize, head_channels: usize) -> Block {
        Block::Attn(AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            qkv: self.conv(&format!("{name}.qkv"), c, 3 * c, 1, 1.0),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, 0.5),
            heads: (c / head_channels.min(c)).max(1),
            groups: norm_groups(c),
        })
    }
}

fn build_layout<T: Scalar>(config: &UNetConfig, store: &mut ParamStore<T>, seed: u64) -> Layout {
    let mut b = Builder {
        store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let bc = config.base_channels;
    let tdim = config.time_embedding_dim;
    let levels = config.channel_multipliers.len();
    let heads_ch = config.attention_head_channels;

    let time1 = b.linear("time.lin1", bc, tdim);
    let time2 = b.linear("time.lin2", tdim, tdim);
    let conv_in = b.conv("conv_in", IN_CHANNELS, bc, 3, 1.0);

    let mut chans = vec![bc];
    let mut ch = bc;
    let mut res = config.image_size;
    let mut down = Vec::new();
    for (level, &mult) in config.channel_multipliers.iter().enumerate() {
        for i in 0..config.res_blocks_per_level {
            let name = format!("down.{level}.{i}");
            let mut blk = vec![b.res(&format!("{name}.res"), ch, mult * bc, tdim, Resample::None)];
            ch = mult * bc;
            if config.attention_resolutions.contains(&res) {
                blk.push(b.attn(&format!("{name}.attn"), ch, heads_ch));
            }
            down.push(blk);
            chans.push(ch);
        }
        if level + 1 < levels {
            down.push(vec![b.res(&format!("down.{level}.downsample"), ch, ch, tdim, Resample::Down)]);
            chans.push(ch);
            res /= 2;
        }
    }

    let mid = vec![
        b.res("mid.res1", ch, ch, tdim, Resample::None),
        b.attn("mid.attn", ch, heads_ch),
        b.res("mid.res2", ch, ch, tdim, Resample::None),
    ];

    let mut up = Vec::new();
    for (level, &mult) in config.channel_multipliers.iter().enumerate().rev() {
        for i in 0..=config.res_blocks_per_level {
            let skip_ch = chans.pop().expect("skip channel bookkeeping");
            let name = format!("up.{level}.{i}");
            let mut blk = vec![b.res(&format!("{name}.res"), ch + skip_ch, mult * bc, tdim, Resample::None)];
            ch = mult * bc;
            if config.attention_resolutions.contains(&res) {
                blk.push(b.attn(&format!("{name}.attn"), ch, heads_ch));
            }
            if level > 0 && i == config.res_blocks_per_level {
                blk.push(b.res(&format!("{name}.upsample"), ch, ch, tdim, Resample::Up));
                res *= 2;
            }
            up.push(blk);
        }
    }
    debug_assert!(chans.is_empty());

    let norm_out = b.norm("norm_out", ch);
    let conv_out = b.conv("conv_out", ch, OUT_CHANNELS, 3, 0.5);
    Layout {
        time1,
        time2,
        conv_in,
        down,
        mid,
        up,
        norm_out,
        conv_out,
    }
}

/// Sinusoidal timestep features `[cos(t·f_i), sin(t·f_i)]`, `dim` wide.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![T::zero(); dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = T::from_f64_lossy(arg.cos());
            row[half + i] = T::from_f64_lossy(arg.sin());
        }
        data.extend(row);
    }
    Tensor::from_vec([ts.len(), dim, 1, 1], data)
}

/// Network definition plus its parameters.
#[derive(Clone, Debug)]
pub struct UNet<T: Scalar> {
    config: UNetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> UNet<T> {
    /// Freshly initialised network; initialisation is a pure function of `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, seed);
        Ok(UNet { config, params, layout })
    }

    /// Attach existing parameters; names and shapes must match the layout.
    pub fn from_params(config: UNetConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(DissError::ConfigMismatch(format!(
                "expected {} tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in fresh.params.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(DissError::ConfigMismatch(format!(
                    "tensor `{got_name}` {:?} does not match `{name}` {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(UNet {
            config: fresh.config,
            params,
            layout: fresh.layout,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Records the forward pass of a `[n, 7, s, s]` input on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, input: Var, ts: &[usize]) -> Var {
        let lay = &self.layout;
        let tfeat = tape.input(timestep_features(ts, self.config.base_channels));
        let e = affine_linear(tape, lay.time1, tfeat);
        let e = tape.silu(e);
        let e = affine_linear(tape, lay.time2, e);
        // every residual block applies SiLU to the embedding first
        let emb = tape.silu(e);

        let mut h = conv(tape, lay.conv_in, input, 1, 1);
        let mut skips = vec![h];
        for blk in &lay.down {
            for b in blk {
                h = apply_block(tape, b, h, emb);
            }
            skips.push(h);
        }
        for b in &lay.mid {
            h = apply_block(tape, b, h, emb);
        }
        for blk in &lay.up {
            let s = skips.pop().expect("skip stack underflow");
            h = tape.concat(h, s);
            for b in blk {
                h = apply_block(tape, b, h, emb);
            }
        }
        let g = norm(tape, lay.norm_out, h, norm_groups(tape.value(h).c()));
        let g = tape.silu(g);
        conv(tape, lay.conv_out, g, 1, 1)
    }

    /// Inference on a batch: `[n, 7, s, s]` in, `[n, 6, s, s]` out.
    pub fn run(&self, input: Tensor<T>, ts: &[usize]) -> Tensor<T> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.input(input);
        let out = self.forward(&mut tape, x, ts);
        tape.value(out).clone()
    }
}

fn conv<T: Scalar>(tape: &mut Tape<'_, T>, a: Affine, x: Var, stride: usize, pad: usize) -> Var {
    let w = tape.param(a.w);
    let b = tape.param(a.b);
    tape.conv2d(x, w, b, stride, pad)
}

fn affine_linear<T: Scalar>(tape: &mut Tape<'_, T>, a: Affine, x: Var) -> Var {
    let w = tape.param(a.w);
    let b = tape.param(a.b);
    tape.linear(x, w, b)
}

fn norm<T: Scalar>(tape: &mut Tape<'_, T>, a: Affine, x: Var, groups: usize) -> Var {
    let g = tape.param(a.w);
    let b = tape.param(a.b);
    tape.group_norm(x, g, b, groups)
}

fn apply_block<T: Scalar>(tape: &mut Tape<'_, T>, block: &Block, x: Var, emb: Var) -> Var {
    match block {
        Block::Res(r) => {
            let h = norm(tape, r.norm1, x, r.groups_in);
            let mut h = tape.silu(h);
            let mut xs = x;
            match r.resample {
                Resample::None => {}
                Resample::Down => {
                    h = tape.avg_pool2(h);
                    xs = tape.avg_pool2(x);
                }
                Resample::Up => {
                    h = tape.upsample2(h);
                    xs = tape.upsample2(x);
                }
            }
            let h = conv(tape, r.conv1, h, 1, 1);
            let e = affine_linear(tape, r.emb, emb);
            let h = tape.add_broadcast(h, e);
            let h = norm(tape, r.norm2, h, r.groups_out);
            let h = tape.silu(h);
            let h = conv(tape, r.conv2, h, 1, 1);
            let skip = match r.skip {
                Some(s) => conv(tape, s, xs, 1, 0),
                None => xs,
            };
            tape.add(skip, h)
        }
        Block::Attn(a) => {
            let h = norm(tape, a.norm, x, a.groups);
            let qkv = conv(tape, a.qkv, h, 1, 0);
            let att = tape.attention(qkv, a.heads);
            let p = conv(tape, a.proj, att, 1, 0);
            tape.add(x, p)
        }
    }
}
