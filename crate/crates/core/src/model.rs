//! Toy camera + lidar fusion detector.
//!
//! Camera: patch embedding, learned positional embedding and pre-norm
//! transformer blocks; the token grid is read as a bird's-eye-view map.
//! Lidar: per-cell rasterisation followed by residual convolutions.
//! Both maps are concatenated, passed through a residual fusion encoder and a
//! 1×1 detection head predicting objectness, class, in-cell offset and size.
//!
//! Parameters are looked up by path on every forward pass, so LoRA and
//! adapter modules injected into the store are picked up automatically.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::kernels::Padding;
use crate::linalg;
use crate::params::{ParamId, ParamKind, ParamSource, ParamStore};
use crate::real::Real;
use crate::scene::{distance, Class, Detection, Label, LidarPoint, MultimodalSample};
use crate::tape::{sigmoid, BatchStats, Tape, Var};
use crate::tensor::{Tensor, BN_EPS};

pub const NUM_CLASSES: usize = 3;
/// Objectness, three class logits, two offset logits, two log-sizes.
pub const HEAD_CHANNELS: usize = 8;
pub const RASTER_CHANNELS: usize = 5;
const LN_EPS: f64 = 1e-5;

/// What the camera branch produces for samples whose camera is absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum AbsentCamera {
    /// The token grid is replaced by zeros.
    ZeroFeatures,
    /// A black image is encoded like any other.
    ZeroImage,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub feat: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub world: f32,
    pub cam_channels: usize,
    pub lidar_channels: usize,
    pub lidar_blocks: usize,
    pub fuse_channels: usize,
    pub fuse_blocks: usize,
    pub pos_embed: bool,
    pub absent_camera: AbsentCamera,
    pub score_threshold: f32,
    pub suppress_radius: f32,
    /// Weight of the in-cell offset term of the detection loss.
    pub offset_weight: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            feat: 64,
            heads: 4,
            head_dim: 16,
            blocks: 2,
            ffn_hidden: 384,
            world: 64.0,
            cam_channels: 16,
            lidar_channels: 16,
            lidar_blocks: 2,
            fuse_channels: 32,
            fuse_blocks: 1,
            pos_embed: true,
            absent_camera: AbsentCamera::ZeroFeatures,
            score_threshold: 0.5,
            suppress_radius: 1.0,
            offset_weight: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(config_err!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.head_dim * self.heads > self.feat {
            return Err(config_err!("heads x head_dim = {} exceeds feature dim {}", self.head_dim * self.heads, self.feat));
        }
        if [self.feat, self.heads, self.head_dim, self.ffn_hidden, self.cam_channels, self.lidar_channels, self.fuse_channels]
            .contains(&0)
        {
            return Err(config_err!("model dimensions must be positive"));
        }
        if !(self.world > 0.0) {
            return Err(config_err!("world size must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn cell(&self) -> f32 {
        self.world / self.grid() as f32
    }

    /// Channels of the fused BEV map (the contrastive representation).
    pub fn bev_numel(&self) -> usize {
        self.fuse_channels * self.tokens()
    }
}

/// Per-cell lidar statistics before normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub grid: usize,
    pub count: Vec<f32>,
    pub mean_intensity: Vec<f32>,
    pub mean_range: Vec<f32>,
    /// Mean position inside the cell relative to its center, in cell units.
    pub mean_dx: Vec<f32>,
    pub mean_dy: Vec<f32>,
    /// Points outside `[0, world)²`, dropped.
    pub clipped: usize,
}

pub fn rasterize(points: &[LidarPoint], grid: usize, world: f32) -> Raster {
    let cells = grid * grid;
    let cell = world / grid as f32;
    let mut r = Raster {
        grid,
        count: vec![0.0; cells],
        mean_intensity: vec![0.0; cells],
        mean_range: vec![0.0; cells],
        mean_dx: vec![0.0; cells],
        mean_dy: vec![0.0; cells],
        clipped: 0,
    };
    for p in points {
        if !(p.x >= 0.0 && p.x < world && p.y >= 0.0 && p.y < world) {
            r.clipped += 1;
            continue;
        }
        let gx = ((p.x / cell) as usize).min(grid - 1);
        let gy = ((p.y / cell) as usize).min(grid - 1);
        let i = gy * grid + gx;
        r.count[i] += 1.0;
        r.mean_intensity[i] += p.intensity;
        r.mean_range[i] += p.range;
        r.mean_dx[i] += p.x / cell - gx as f32 - 0.5;
        r.mean_dy[i] += p.y / cell - gy as f32 - 0.5;
    }
    for i in 0..cells {
        let c = r.count[i];
        if c > 0.0 {
            r.mean_intensity[i] /= c;
            r.mean_range[i] /= c;
            r.mean_dx[i] /= c;
            r.mean_dy[i] /= c;
        }
    }
    r
}

impl Raster {
    /// Network input channels: log-count, intensity, range / world, dx, dy.
    pub fn channels(&self, world: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(RASTER_CHANNELS * self.count.len());
        out.extend(self.count.iter().map(|c| libm::log1pf(*c)));
        out.extend_from_slice(&self.mean_intensity);
        out.extend(self.mean_range.iter().map(|r| r / world));
        out.extend_from_slice(&self.mean_dx);
        out.extend_from_slice(&self.mean_dy);
        out
    }
}

/// Network inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct BatchInput<T = f32> {
    /// `[B, patches, patch²]` pixel patches.
    pub patches: Tensor<T>,
    /// `[B, RASTER_CHANNELS, G, G]`.
    pub raster: Tensor<T>,
    pub camera_present: Vec<bool>,
}

impl<T: Real> BatchInput<T> {
    pub fn len(&self) -> usize {
        self.camera_present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.camera_present.is_empty()
    }
}

/// Regression and classification targets for a batch, one row per cell.
#[derive(Clone, Debug)]
pub struct HeadTargets<T = f32> {
    pub objectness: Vec<T>,
    pub class: Vec<usize>,
    pub positive: Vec<T>,
    pub offset: Vec<T>,
    pub log_size: Vec<T>,
    pub positive_pairs: Vec<T>,
    pub num_positive: usize,
}

/// A train-mode batch-norm layer's statistics, to be folded into its buffers.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

pub struct ForwardOutput<T> {
    /// Fused BEV map `[B, fuse_channels, G, G]`.
    pub bev: Var,
    /// Head output `[B, HEAD_CHANNELS, G, G]`.
    pub head: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Fold train-mode statistics into running buffers (momentum 0.1).
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let momentum = T::of(0.1);
    for u in updates {
        let n = u.stats.count;
        let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
        let mean = store.value_mut(u.mean).data_mut();
        for (m, b) in mean.iter_mut().zip(&u.stats.mean) {
            *m = (T::one() - momentum) * *m + momentum * *b;
        }
        let var = store.value_mut(u.var).data_mut();
        for (v, b) in var.iter_mut().zip(&u.stats.var) {
            *v = (T::one() - momentum) * *v + momentum * *b * unbias;
        }
    }
}

/// Forward-pass context: tape, parameter source and mode.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub src: &'a dyn ParamSource<T>,
    pub training: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, src: &'a dyn ParamSource<T>, training: bool) -> Self {
        Self { tape, src, training, bn_updates: Vec::new() }
    }

    pub fn has(&self, path: &str) -> bool {
        self.src.store().contains(path)
    }

    fn trainable(&self, path: &str) -> bool {
        self.training && self.src.store().get(path).is_some_and(|id| self.src.store().param(id).trainable)
    }

    pub fn p(&mut self, path: &str) -> Result<Var> {
        let id = self.src.store().id(path)?;
        let trainable = self.training && self.src.store().param(id).trainable;
        Ok(self.tape.param(id, self.src.value(id).clone(), trainable))
    }

    /// `x · Wᵀ (+ b)` for `x: [N, in]`, `W: [out, in]`, with any LoRA
    /// pair registered on `W` added as a parallel path.
    pub fn linear(&mut self, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
        let w = self.p(weight)?;
        let mut y = self.tape.matmul_t(x, w, false, true)?;
        let a_path = format!("{weight}.lora_A");
        if self.has(&a_path) {
            let a = self.p(&a_path)?;
            let b = self.p(&format!("{weight}.lora_B"))?;
            let down = self.tape.matmul_t(x, a, false, true)?;
            let up = self.tape.matmul_t(down, b, false, true)?;
            y = self.tape.add(y, up)?;
        }
        if let Some(bias) = bias {
            let b = self.p(bias)?;
            y = self.tape.add_bcast(y, b, 1)?;
        }
        Ok(y)
    }

    pub fn conv(&mut self, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
        let w = self.p(weight)?;
        let k = self.tape.shape(w)[2];
        let pad = if k == 1 { Padding::None } else { Padding::SameReflect };
        let mut y = self.tape.conv2d(x, w, pad)?;
        if let Some(bias) = bias {
            let b = self.p(bias)?;
            y = self.tape.add_bcast(y, b, 1)?;
        }
        Ok(y)
    }

    /// Batch norm with parameters under `prefix`; uses batch statistics when
    /// training with a trainable scale, running statistics otherwise.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gp = format!("{prefix}.gamma");
        let train = self.trainable(&gp);
        let gamma = self.p(&gp)?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let store = self.src.store();
        let mean_id = store.id(&format!("{prefix}.running_mean"))?;
        let var_id = store.id(&format!("{prefix}.running_var"))?;
        if train {
            let (y, stats) = self.tape.batch_norm(x, gamma, beta, None, T::of(BN_EPS))?;
            if let Some(stats) = stats {
                self.bn_updates.push(BnUpdate { mean: mean_id, var: var_id, stats });
            }
            Ok(y)
        } else {
            let rm = self.src.value(mean_id).data();
            let rv = self.src.value(var_id).data();
            let (y, _) = self.tape.batch_norm(x, gamma, beta, Some((rm, rv)), T::of(BN_EPS))?;
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, gamma, beta, T::of(LN_EPS))
    }

    /// Multi-head self-attention over `x: [B·n, f]` viewed as `B` sequences.
    pub fn attention(&mut self, x: Var, prefix: &str, heads: usize, batch: usize) -> Result<Var> {
        let rows = self.tape.shape(x)[0];
        if rows % batch != 0 {
            return Err(shape_err!("{rows} tokens do not split into {batch} sequences"));
        }
        let n = rows / batch;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let hp = format!("{prefix}.head{h}");
            let q = self.linear(x, &format!("{hp}.W_Q"), None)?;
            let k = self.linear(x, &format!("{hp}.W_K"), None)?;
            let v = self.linear(x, &format!("{hp}.W_V"), None)?;
            let d = self.tape.shape(q)[1];
            let q = self.tape.reshape(q, &[batch, n, d])?;
            let k = self.tape.reshape(k, &[batch, n, d])?;
            let v = self.tape.reshape(v, &[batch, n, d])?;
            let logits = self.tape.bmm(q, k, false, true)?;
            let logits = self.tape.scale(logits, T::one() / T::of(libm::sqrt(d as f64)))?;
            let attn = self.tape.softmax(logits, 2)?;
            let o = self.tape.bmm(attn, v, false, false)?;
            outs.push(self.tape.reshape(o, &[rows, d])?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { self.tape.concat(&outs, 1)? };
        self.linear(cat, &format!("{prefix}.W_O"), Some(&format!("{prefix}.b_O")))
    }

    /// conv → BN → ReLU → conv → [adapter] → BN → + skip → ReLU.
    pub fn residual_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.conv(x, &format!("{prefix}.conv1.W"), None)?;
        let h = self.batch_norm(h, &format!("{prefix}.bn1"))?;
        let h = self.tape.relu(h)?;
        let mut h = self.conv(h, &format!("{prefix}.conv2.W"), None)?;
        if self.has(&format!("{prefix}.adapter.down.W")) {
            h = self.adapter(h, &format!("{prefix}.adapter"))?;
        }
        let h = self.batch_norm(h, &format!("{prefix}.bn2"))?;
        let h = self.tape.add(h, x)?;
        self.tape.relu(h)
    }

    fn adapter(&mut self, h: Var, prefix: &str) -> Result<Var> {
        let a = self.conv(h, &format!("{prefix}.down.W"), Some(&format!("{prefix}.down.b")))?;
        let a = self.tape.relu(a)?;
        let a = self.conv(a, &format!("{prefix}.up.W"), Some(&format!("{prefix}.up.b")))?;
        self.tape.add(h, a)
    }
}

fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

pub(crate) fn add_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, running: bool) -> Result<()> {
    store.add(&format!("{prefix}.gamma"), Tensor::ones(&[c]), ParamKind::Norm)?;
    store.add(&format!("{prefix}.beta"), Tensor::zeros(&[c]), ParamKind::Norm)?;
    if running {
        store.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), ParamKind::RunningStat)?;
        store.add(&format!("{prefix}.running_var"), Tensor::ones(&[c]), ParamKind::RunningStat)?;
    }
    Ok(())
}

fn add_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    path: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> Result<ParamId> {
    let std = libm::sqrt(2.0 / (cin * k * k) as f64);
    store.add(path, normal(&[cout, cin, k, k], std, rng), ParamKind::Weight)
}

/// Add the parameters of one attention layer (per-head projections plus
/// output projection) under `prefix`.
pub fn add_attention_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    feat: usize,
    heads: usize,
    head_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let std = libm::sqrt(1.0 / feat as f64);
    for h in 0..heads {
        for name in ["W_Q", "W_K", "W_V"] {
            store.add(&format!("{prefix}.head{h}.{name}"), normal(&[head_dim, feat], std, rng), ParamKind::Weight)?;
        }
    }
    let std_o = libm::sqrt(1.0 / (heads * head_dim) as f64) * 0.5;
    store.add(&format!("{prefix}.W_O"), normal(&[feat, heads * head_dim], std_o, rng), ParamKind::Weight)?;
    store.add(&format!("{prefix}.b_O"), Tensor::zeros(&[feat]), ParamKind::Bias)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub cfg: ModelConfig,
}

impl FusionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Paths of the residual blocks that can host an adapter.
    pub fn residual_blocks(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.cfg.lidar_blocks).map(|i| format!("lidar.block{i}")).collect();
        v.extend((0..self.cfg.fuse_blocks).map(|i| format!("fuse.block{i}")));
        v
    }

    /// Paths of the attention projections named `which` (e.g. `W_Q`).
    pub fn attention_projections(&self, which: &[&str]) -> Vec<String> {
        let mut v = Vec::new();
        for b in 0..self.cfg.blocks {
            for h in 0..self.cfg.heads {
                for w in which {
                    if *w == "W_O" {
                        continue;
                    }
                    v.push(format!("cam.block{b}.attn.head{h}.{w}"));
                }
            }
            if which.contains(&"W_O") {
                v.push(format!("cam.block{b}.attn.W_O"));
            }
        }
        v
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let c = &self.cfg;
        let mut s = ParamStore::new();
        let pp = c.patch * c.patch;
        s.add("cam.patch.W", normal(&[c.feat, pp], libm::sqrt(1.0 / pp as f64), rng), ParamKind::Weight)?;
        s.add("cam.patch.b", Tensor::zeros(&[c.feat]), ParamKind::Bias)?;
        if c.pos_embed {
            s.add("cam.pos", normal(&[c.tokens(), c.feat], 0.1, rng), ParamKind::Embedding)?;
        }
        for b in 0..c.blocks {
            let bp = format!("cam.block{b}");
            add_norm(&mut s, &format!("{bp}.ln1"), c.feat, false)?;
            add_attention_params(&mut s, &format!("{bp}.attn"), c.feat, c.heads, c.head_dim, rng)?;
            add_norm(&mut s, &format!("{bp}.ln2"), c.feat, false)?;
            let w1 = normal(&[c.ffn_hidden, c.feat], libm::sqrt(2.0 / c.feat as f64), rng);
            s.add(&format!("{bp}.ffn.W1"), w1, ParamKind::Weight)?;
            s.add(&format!("{bp}.ffn.b1"), Tensor::zeros(&[c.ffn_hidden]), ParamKind::Bias)?;
            let w2 = normal(&[c.feat, c.ffn_hidden], libm::sqrt(1.0 / c.ffn_hidden as f64) * 0.5, rng);
            s.add(&format!("{bp}.ffn.W2"), w2, ParamKind::Weight)?;
            s.add(&format!("{bp}.ffn.b2"), Tensor::zeros(&[c.feat]), ParamKind::Bias)?;
        }
        add_norm(&mut s, "cam.ln_out", c.feat, false)?;
        add_conv(&mut s, "cam.proj.W", c.cam_channels, c.feat, 1, rng)?;
        add_norm(&mut s, "cam.proj.bn", c.cam_channels, true)?;

        add_conv(&mut s, "lidar.stem.W", c.lidar_channels, RASTER_CHANNELS, 3, rng)?;
        add_norm(&mut s, "lidar.stem.bn", c.lidar_channels, true)?;
        for i in 0..c.lidar_blocks {
            self.add_residual(&mut s, &format!("lidar.block{i}"), c.lidar_channels, rng)?;
        }

        let fc = c.fuse_channels;
        add_conv(&mut s, "fuse.stem.W", fc, c.cam_channels + c.lidar_channels, 3, rng)?;
        add_norm(&mut s, "fuse.stem.bn", fc, true)?;
        for i in 0..c.fuse_blocks {
            self.add_residual(&mut s, &format!("fuse.block{i}"), fc, rng)?;
        }

        s.add("head.W", normal(&[HEAD_CHANNELS, fc, 1, 1], 0.01, rng), ParamKind::Head)?;
        let mut bias = Tensor::zeros(&[HEAD_CHANNELS]);
        bias.data_mut()[0] = T::of(-2.0);
        s.add("head.b", bias, ParamKind::Head)?;
        Ok(s)
    }

    fn add_residual<T: Real, R: Rng + ?Sized>(&self, s: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
        add_conv(s, &format!("{prefix}.conv1.W"), c, c, 3, rng)?;
        add_norm(s, &format!("{prefix}.bn1"), c, true)?;
        add_conv(s, &format!("{prefix}.conv2.W"), c, c, 3, rng)?;
        add_norm(s, &format!("{prefix}.bn2"), c, true)?;
        Ok(())
    }

    /// Build network inputs from samples, honouring each sample's presence
    /// mask (absent lidar rasterises to zeros).
    pub fn prepare<T: Real>(&self, samples: &[&MultimodalSample]) -> Result<BatchInput<T>> {
        let c = &self.cfg;
        if samples.is_empty() {
            return Err(shape_err!("empty batch"));
        }
        let (g, p, size) = (c.grid(), c.patch, c.image_size);
        let mut patches = Vec::with_capacity(samples.len() * size * size);
        let mut raster = Vec::with_capacity(samples.len() * RASTER_CHANNELS * g * g);
        let mut present = Vec::with_capacity(samples.len());
        for s in samples {
            if s.image.shape() != [size, size] {
                return Err(config_err!("image {:?} does not match model size {size}", s.image.shape()));
            }
            let img = s.image.data();
            let blank = !s.present.camera && c.absent_camera == AbsentCamera::ZeroImage;
            for py in 0..g {
                for px in 0..g {
                    for y in 0..p {
                        for x in 0..p {
                            let v = if blank { 0.0 } else { img[(py * p + y) * size + px * p + x] };
                            patches.push(T::of(v as f64));
                        }
                    }
                }
            }
            if s.present.lidar {
                let r = rasterize(&s.points, g, c.world);
                raster.extend(r.channels(c.world).into_iter().map(|v| T::of(v as f64)));
            } else {
                raster.extend(core::iter::repeat_n(T::zero(), RASTER_CHANNELS * g * g));
            }
            present.push(s.present.camera || c.absent_camera == AbsentCamera::ZeroImage);
        }
        let b = samples.len();
        Ok(BatchInput {
            patches: Tensor::new(&[b, g * g, p * p], patches)?,
            raster: Tensor::new(&[b, RASTER_CHANNELS, g, g], raster)?,
            camera_present: present,
        })
    }

    /// Camera token grid `[B, f, G, G]`.
    pub fn encode_camera<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &BatchInput<T>) -> Result<Var> {
        self.camera_tokens(ctx, input, &mut Vec::new())
    }

    /// `taps` receives the input of each attention layer, `[B·n, f]`.
    fn camera_tokens<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &BatchInput<T>, taps: &mut Vec<Var>) -> Result<Var> {
        let c = &self.cfg;
        let (b, n, pp) = (input.len(), c.tokens(), c.patch * c.patch);
        let x = ctx.tape.constant(input.patches.clone());
        let x = ctx.tape.reshape(x, &[b * n, pp])?;
        let mut x = ctx.linear(x, "cam.patch.W", Some("cam.patch.b"))?;
        if ctx.has("cam.pos") {
            let pos = ctx.p("cam.pos")?;
            let xb = ctx.tape.reshape(x, &[b, n, c.feat])?;
            let xb = ctx.tape.add_bcast(xb, pos, 1)?;
            x = ctx.tape.reshape(xb, &[b * n, c.feat])?;
        }
        for blk in 0..c.blocks {
            let bp = format!("cam.block{blk}");
            let h = ctx.layer_norm(x, &format!("{bp}.ln1"))?;
            taps.push(h);
            let h = ctx.attention(h, &format!("{bp}.attn"), c.heads, b)?;
            x = ctx.tape.add(x, h)?;
            let h = ctx.layer_norm(x, &format!("{bp}.ln2"))?;
            let h = ctx.linear(h, &format!("{bp}.ffn.W1"), Some(&format!("{bp}.ffn.b1")))?;
            let h = ctx.tape.relu(h)?;
            let h = ctx.linear(h, &format!("{bp}.ffn.W2"), Some(&format!("{bp}.ffn.b2")))?;
            x = ctx.tape.add(x, h)?;
        }
        let x = ctx.layer_norm(x, "cam.ln_out")?;
        let mut x = ctx.tape.reshape(x, &[b, n, c.feat])?;
        if input.camera_present.iter().any(|p| !p) {
            let mask: Vec<T> = input.camera_present.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
            let m = ctx.tape.constant(Tensor::new(&[b], mask)?);
            x = ctx.tape.mul_bcast(x, m, 0)?;
        }
        let x = ctx.tape.permute(x, &[0, 2, 1])?;
        ctx.tape.reshape(x, &[b, c.feat, c.grid(), c.grid()])
    }

    /// Lidar BEV features `[B, C_lidar, G, G]`.
    pub fn encode_lidar<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &BatchInput<T>) -> Result<Var> {
        let x = ctx.tape.constant(input.raster.clone());
        let x = ctx.conv(x, "lidar.stem.W", None)?;
        let x = ctx.batch_norm(x, "lidar.stem.bn")?;
        let mut x = ctx.tape.relu(x)?;
        for i in 0..self.cfg.lidar_blocks {
            x = ctx.residual_block(x, &format!("lidar.block{i}"))?;
        }
        Ok(x)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &BatchInput<T>) -> Result<(Var, Var)> {
        let cam = self.encode_camera(ctx, input)?;
        let cam = ctx.conv(cam, "cam.proj.W", None)?;
        let cam = ctx.batch_norm(cam, "cam.proj.bn")?;
        let cam = ctx.tape.relu(cam)?;
        let lidar = self.encode_lidar(ctx, input)?;
        if ctx.tape.shape(cam)[2..] != ctx.tape.shape(lidar)[2..] {
            return Err(shape_err!("camera and lidar BEV resolutions differ"));
        }
        let x = ctx.tape.concat(&[cam, lidar], 1)?;
        let x = ctx.conv(x, "fuse.stem.W", None)?;
        let x = ctx.batch_norm(x, "fuse.stem.bn")?;
        let mut bev = ctx.tape.relu(x)?;
        for i in 0..self.cfg.fuse_blocks {
            bev = ctx.residual_block(bev, &format!("fuse.block{i}"))?;
        }
        let head = ctx.conv(bev, "head.W", Some("head.b"))?;
        Ok((bev, head))
    }

    /// Run the network on `samples` and collect batch-norm updates.
    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        src: &dyn ParamSource<T>,
        input: &BatchInput<T>,
        training: bool,
    ) -> Result<ForwardOutput<T>> {
        let mut ctx = Ctx::new(tape, src, training);
        let (bev, head) = self.forward(&mut ctx, input)?;
        Ok(ForwardOutput { bev, head, bn_updates: ctx.bn_updates })
    }

    pub fn targets<T: Real>(&self, labels: &[&[Label]]) -> HeadTargets<T> {
        let g = self.cfg.grid();
        let cells = labels.len() * g * g;
        let cell = self.cfg.cell();
        let mut t = HeadTargets {
            objectness: vec![T::zero(); cells],
            class: vec![0; cells],
            positive: vec![T::zero(); cells],
            offset: vec![T::zero(); cells * 2],
            log_size: vec![T::zero(); cells * 2],
            positive_pairs: vec![T::zero(); cells * 2],
            num_positive: 0,
        };
        for (b, ls) in labels.iter().enumerate() {
            for l in ls.iter() {
                let fx = l.center[0] / cell;
                let fy = l.center[1] / cell;
                if !(fx >= 0.0 && fy >= 0.0) {
                    continue;
                }
                let (gx, gy) = ((fx as usize).min(g - 1), (fy as usize).min(g - 1));
                let i = b * g * g + gy * g + gx;
                if t.positive[i] == T::zero() {
                    t.num_positive += 1;
                }
                t.objectness[i] = T::one();
                t.positive[i] = T::one();
                t.class[i] = l.class.index();
                t.offset[2 * i] = T::of((fx - gx as f32) as f64);
                t.offset[2 * i + 1] = T::of((fy - gy as f32) as f64);
                t.log_size[2 * i] = T::of(libm::logf(l.size[0]) as f64);
                t.log_size[2 * i + 1] = T::of(libm::logf(l.size[1]) as f64);
                t.positive_pairs[2 * i] = T::one();
                t.positive_pairs[2 * i + 1] = T::one();
            }
        }
        t
    }

    /// Objectness BCE + class CE + offset and log-size L1, the last three
    /// masked to cells that hold an object; all normalised by the number of
    /// positive cells.
    pub fn detection_loss<T: Real>(&self, tape: &mut Tape<T>, head: Var, targets: &HeadTargets<T>) -> Result<Var> {
        let shape = tape.shape(head).to_vec();
        let cells = shape[0] * shape[2] * shape[3];
        if targets.objectness.len() != cells {
            return Err(shape_err!("targets cover {} cells, head has {cells}", targets.objectness.len()));
        }
        let norm = T::of(targets.num_positive.max(1) as f64);
        let x = tape.permute(head, &[0, 2, 3, 1])?;
        let x = tape.reshape(x, &[cells, HEAD_CHANNELS])?;
        let obj = tape.slice(x, 1, 0, 1)?;
        let cls = tape.slice(x, 1, 1, NUM_CLASSES)?;
        let off = tape.slice(x, 1, 1 + NUM_CLASSES, 2)?;
        let size = tape.slice(x, 1, 3 + NUM_CLASSES, 2)?;
        let ones = vec![T::one(); cells];
        let l_obj = tape.bce_with_logits(obj, &targets.objectness, &ones, norm)?;
        let l_cls = tape.cross_entropy(cls, &targets.class, &targets.positive, norm)?;
        let off = tape.sigmoid(off)?;
        let l_off = tape.l1(off, &targets.offset, &targets.positive_pairs, norm)?;
        let l_off = tape.scale(l_off, T::of(self.cfg.offset_weight as f64))?;
        let l_size = tape.l1(size, &targets.log_size, &targets.positive_pairs, norm)?;
        let a = tape.add(l_obj, l_cls)?;
        let b = tape.add(l_off, l_size)?;
        tape.add(a, b)
    }

    /// Decode one sample's head output (`[HEAD_CHANNELS, G, G]` slice of a
    /// batch) into detections with score ≥ `threshold`, then suppress.
    pub fn decode<T: Real>(&self, head: &Tensor<T>, index: usize, threshold: f32) -> Vec<Detection> {
        let g = self.cfg.grid();
        let gg = g * g;
        let cell = self.cfg.cell();
        let data = &head.data()[index * HEAD_CHANNELS * gg..(index + 1) * HEAD_CHANNELS * gg];
        let at = |ch: usize, i: usize| data[ch * gg + i].as_f64() as f32;
        let mut dets = Vec::new();
        for i in 0..gg {
            let score = sigmoid(at(0, i));
            if !(score >= threshold) {
                continue;
            }
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if at(1 + k, i) > at(1 + best, i) {
                    best = k;
                }
            }
            let (gy, gx) = (i / g, i % g);
            let ox = sigmoid(at(1 + NUM_CLASSES, i));
            let oy = sigmoid(at(2 + NUM_CLASSES, i));
            dets.push(Detection {
                center: [(gx as f32 + ox) * cell, (gy as f32 + oy) * cell],
                size: [libm::expf(at(3 + NUM_CLASSES, i)), libm::expf(at(4 + NUM_CLASSES, i))],
                class: Class::from_index(best).unwrap(),
                score,
            });
        }
        suppress(dets, self.cfg.suppress_radius)
    }

    /// Inference over `samples` in chunks of `batch`; returns detections
    /// with score ≥ `threshold` per sample.
    pub fn detect(
        &self,
        src: &dyn ParamSource<f32>,
        samples: &[&MultimodalSample],
        batch: usize,
        threshold: f32,
    ) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            let input = self.prepare::<f32>(chunk)?;
            let mut tape = Tape::new();
            let fwd = self.run(&mut tape, src, &input, false)?;
            let head = tape.value(fwd.head);
            for i in 0..chunk.len() {
                out.push(self.decode(head, i, threshold));
            }
        }
        Ok(out)
    }
}

/// Greedy suppression: keep detections in descending score order, dropping
/// any whose center lies within `radius` of an already kept one.
pub fn suppress(mut dets: Vec<Detection>, radius: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| distance(k.center, d.center) > radius) {
            kept.push(d);
        }
    }
    kept
}

impl FusionModel {
    /// Input `X: [f×n]` of every camera attention layer for one sample.
    pub fn attention_inputs(&self, src: &dyn ParamSource<f32>, sample: &MultimodalSample) -> Result<Vec<Tensor<f32>>> {
        let input = self.prepare::<f32>(&[sample])?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, src, false);
        let mut taps = Vec::new();
        self.camera_tokens(&mut ctx, &input, &mut taps)?;
        taps.iter().map(|&v| tape.value(v).transpose()).collect()
    }

    /// Camera attention of `block` as a standalone layer, LoRA pairs included.
    pub fn attention_layer(&self, src: &dyn ParamSource<f32>, block: usize) -> Result<AttentionLayer> {
        if block >= self.cfg.blocks {
            return Err(config_err!("block {block} out of range (model has {})", self.cfg.blocks));
        }
        let prefix = format!("cam.block{block}.attn.");
        let mut params = ParamStore::new();
        for (id, p) in src.store().iter() {
            if let Some(rest) = p.path.strip_prefix(&prefix) {
                params.add(&format!("attn.{rest}"), src.value(id).clone(), p.kind)?;
            }
        }
        Ok(AttentionLayer { params, heads: self.cfg.heads, head_dim: self.cfg.head_dim, feat: self.cfg.feat })
    }
}

/// Standalone attention layer with its own parameter store, for analysis
/// outside the full model. Parameters live under the prefix `attn`.
#[derive(Clone, Debug)]
pub struct AttentionLayer<T: Real = f32> {
    pub params: ParamStore<T>,
    pub heads: usize,
    pub head_dim: usize,
    pub feat: usize,
}

impl<T: Real> AttentionLayer<T> {
    pub fn random<R: Rng + ?Sized>(feat: usize, head_dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if head_dim * heads > feat || head_dim == 0 || heads == 0 {
            return Err(config_err!("invalid attention dims f={feat} d={head_dim} h={heads}"));
        }
        let mut params = ParamStore::new();
        add_attention_params(&mut params, "attn", feat, heads, head_dim, rng)?;
        Ok(Self { params, heads, head_dim, feat })
    }

    /// Effective projection of one head, with any LoRA update folded in,
    /// as a row-major `d×f` matrix in `f64`.
    pub fn projection(&self, head: usize, which: &str) -> Result<Vec<f64>> {
        effective_weight(&self.params, &format!("attn.head{head}.{which}"))
    }
}

/// `W + B·A` for a weight with an optional LoRA pair, in `f64`.
pub fn effective_weight<T: Real>(store: &ParamStore<T>, path: &str) -> Result<Vec<f64>> {
    let w = store.value(store.id(path)?);
    let mut out: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    if let (Some(a), Some(b)) = (store.get(&format!("{path}.lora_A")), store.get(&format!("{path}.lora_B"))) {
        let (a, b) = (store.value(a), store.value(b));
        let (out_dim, k) = (b.shape()[0], b.shape()[1]);
        let in_dim = a.shape()[1];
        for i in 0..out_dim {
            for j in 0..in_dim {
                let mut s = 0.0;
                for r in 0..k {
                    s += b.data()[i * k + r].as_f64() * a.data()[r * in_dim + j].as_f64();
                }
                out[i * in_dim + j] += s;
            }
        }
    }
    Ok(out)
}

/// Self-attention on `x: [f×n]` (one column per token), returning `[f×n]`.
pub fn attention_forward<T: Real>(x: &Tensor<T>, layer: &AttentionLayer<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != layer.feat {
        return Err(shape_err!("attention input {s:?} does not have {} rows", layer.feat));
    }
    let mut tape = Tape::new();
    let xt = tape.constant(x.transpose()?);
    let mut ctx = Ctx::new(&mut tape, &layer.params, false);
    let y = ctx.attention(xt, "attn", layer.heads, 1)?;
    tape.value(y).transpose()
}

/// Spectrum of the attention logits `A_X = (W_Q X)ᵀ (W_K X) / √d` of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenProfile {
    /// Eigenvalue magnitudes, descending.
    pub magnitudes: Vec<f64>,
    /// `cumulative[i]` = share of total magnitude in the `i+1` largest.
    pub cumulative: Vec<f64>,
    /// The general solver failed and the symmetric part was used instead.
    pub symmetrized: bool,
}

impl EigenProfile {
    pub fn from_matrix(a: &[f64], n: usize) -> Result<Self> {
        let (mut magnitudes, symmetrized) = match linalg::eigenvalues(a, n) {
            Ok(e) => (e.into_iter().map(|(re, im)| libm::hypot(re, im)).collect::<Vec<_>>(), false),
            Err(Error::NoConvergence(_)) => {
                let mut sym = a.to_vec();
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
                    }
                }
                (linalg::symmetric_eigenvalues(&sym, n)?, true)
            }
            Err(e) => return Err(e),
        };
        magnitudes.iter_mut().for_each(|m| *m = m.abs());
        magnitudes.sort_by(|a, b| b.total_cmp(a));
        let cumulative = linalg::cumulative_energy(&magnitudes)?;
        Ok(Self { magnitudes, cumulative, symmetrized })
    }

    /// Count of magnitudes above `rel_tol` times the largest.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.magnitudes.first().copied().unwrap_or(0.0);
        self.magnitudes.iter().filter(|&&m| m > rel_tol * top).count()
    }

    /// Smallest number of leading eigenvalues carrying at least `share` of
    /// the total magnitude.
    pub fn count_for_share(&self, share: f64) -> usize {
        self.cumulative.iter().position(|&c| c >= share - 1e-12).map_or(self.cumulative.len(), |i| i + 1)
    }
}

/// The `n×n` attention logit matrix of one head on `x: [f×n]`, in `f64`.
pub fn attention_logits<T: Real>(x: &Tensor<T>, layer: &AttentionLayer<T>, head: usize) -> Result<Vec<f64>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != layer.feat {
        return Err(shape_err!("input {s:?} does not have {} rows", layer.feat));
    }
    let (f, n, d) = (layer.feat, s[1], layer.head_dim);
    let xd: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let proj = |w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d * n];
        crate::kernels::gemm_acc(d, f, n, w, &xd, &mut out);
        out
    };
    let q = proj(&layer.projection(head, "W_Q")?);
    let k = proj(&layer.projection(head, "W_K")?);
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut a = crate::kernels::matmul(&q, &k, n, d, n, true, false);
    a.iter_mut().for_each(|v| *v *= scale);
    Ok(a)
}

/// Cumulative eigenvalue-magnitude curve of `A_X` for one head.
pub fn eigen_energy_profile<T: Real>(x: &Tensor<T>, layer: &AttentionLayer<T>, head: usize) -> Result<EigenProfile> {
    let n = x.shape().get(1).copied().unwrap_or(0);
    if n < 2 {
        return Err(config_err!("eigen profile needs at least 2 tokens, got {n}"));
    }
    let a = attention_logits(x, layer, head)?;
    EigenProfile::from_matrix(&a, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Presence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 4,
            feat: 8,
            heads: 2,
            head_dim: 4,
            blocks: 1,
            ffn_hidden: 8,
            world: 16.0,
            cam_channels: 4,
            lidar_channels: 4,
            lidar_blocks: 1,
            fuse_channels: 4,
            fuse_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn sample(size: usize, seed: u64) -> MultimodalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultimodalSample {
            image: Tensor::from_fn(&[size, size], |_| rng.random::<f32>()),
            points: (0..20)
                .map(|_| {
                    let (x, y) = (rng.random::<f32>() * size as f32, rng.random::<f32>() * size as f32);
                    LidarPoint { x, y, range: x.hypot(y), intensity: rng.random() }
                })
                .collect(),
            labels: vec![Label { center: [5.0, 9.0], size: [3.0, 2.0], class: Class::Cyclist }],
            present: Presence::ALL,
        }
    }

    #[test]
    fn default_config_shapes() {
        let c = ModelConfig::default();
        assert_eq!(c.tokens(), 64);
        assert_eq!(c.grid(), 8);
        assert!(ModelConfig { image_size: 60, ..c.clone() }.validate().is_err());
        assert!(ModelConfig { heads: 5, ..c }.validate().is_err());
    }

    #[test]
    fn raster_examples() {
        assert!(rasterize(&[], 8, 64.0).count.iter().all(|&c| c == 0.0));
        let p = |x, i| LidarPoint { x, y: 4.0, range: 1.0, intensity: i };
        let r = rasterize(&[p(4.0, 1.0)], 8, 64.0);
        assert_eq!(r.count[0], 1.0);
        assert_eq!(r.mean_intensity[0], 1.0);
        assert_eq!(r.mean_dx[0], 0.0);
        let r = rasterize(&[p(1.0, 0.2), p(6.0, 0.8), p(-1.0, 0.5), p(64.0, 0.5)], 8, 64.0);
        assert_eq!(r.count[0], 2.0);
        assert!((r.mean_intensity[0] - 0.5).abs() < 1e-7);
        assert_eq!(r.clipped, 2);
    }

    #[test]
    fn camera_encoding_shape_and_determinism() {
        let m = FusionModel::new(ModelConfig::default()).unwrap();
        let store: ParamStore = m.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = sample(64, 2);
        let input = m.prepare::<f32>(&[&s, &s]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let cam = m.encode_camera(&mut ctx, &input).unwrap();
        assert_eq!(tape.shape(cam), &[2, 64, 8, 8]);
        let d = tape.value(cam).data();
        assert_eq!(&d[..d.len() / 2], &d[d.len() / 2..]);
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn absent_camera_zero_fills_token_grid() {
        let m = FusionModel::new(small_cfg()).unwrap();
        let store: ParamStore = m.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut s = sample(16, 3);
        s.present.camera = false;
        let input = m.prepare::<f32>(&[&s]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let cam = m.encode_camera(&mut ctx, &input).unwrap();
        assert!(tape.value(cam).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forced_score_decodes_single_center_detection() {
        let m = FusionModel::new(ModelConfig::default()).unwrap();
        let mut head = Tensor::<f32>::full(&[1, HEAD_CHANNELS, 8, 8], 0.0);
        for i in 0..64 {
            head.data_mut()[i] = -30.0;
        }
        head.data_mut()[3 * 8 + 5] = 30.0;
        let dets = m.decode(&head, 0, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].center, [5.5 * 8.0, 3.5 * 8.0]);
        assert!(dets[0].score > 0.999);

        let zeros = Tensor::<f32>::zeros(&[1, HEAD_CHANNELS, 8, 8]);
        assert!(m.decode(&zeros, 0, 0.5).len() == 64);
        let mut neg = zeros.clone();
        neg.data_mut()[..64].iter_mut().for_each(|v| *v = -1.0);
        assert!(m.decode(&neg, 0, 0.5).is_empty());
    }

    #[test]
    fn suppression_keeps_highest() {
        let d = |x: f32, s| Detection { center: [x, 0.0], size: [1.0, 1.0], class: Class::Car, score: s };
        let kept = suppress(vec![d(0.0, 0.5), d(0.5, 0.9), d(3.0, 0.7)], 1.0);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn training_forward_and_loss_backprop() {
        let m = FusionModel::new(small_cfg()).unwrap();
        let mut store: ParamStore = m.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, true);
        }
        let (a, b) = (sample(16, 4), sample(16, 5));
        let input = m.prepare::<f32>(&[&a, &b]).unwrap();
        let mut tape = Tape::new();
        let out = m.run(&mut tape, &store, &input, true).unwrap();
        let t = m.targets::<f32>(&[&a.labels, &b.labels]);
        assert_eq!(t.num_positive, 2);
        let loss = m.detection_loss(&mut tape, out.head, &t).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), store.trainable_ids().len());
        assert_eq!(out.bn_updates.len(), 7);
    }

    #[test]
    fn attention_single_token_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = AttentionLayer::<f64>::random(6, 2, 2, &mut rng).unwrap();
        let x = Tensor::from_fn(&[6, 1], |i| i as f64 * 0.3 - 0.5);
        let y = attention_forward(&x, &layer).unwrap();
        // softmax over one token is 1, so each head returns W_V x.
        let mut heads = Vec::new();
        for h in 0..2 {
            let wv = layer.projection(h, "W_V").unwrap();
            for r in 0..2 {
                heads.push((0..6).map(|c| wv[r * 6 + c] * x.data()[c]).sum::<f64>());
            }
        }
        let wo = layer.params.value(layer.params.id("attn.W_O").unwrap());
        for r in 0..6 {
            let want: f64 = (0..4).map(|c| wo.data()[r * 4 + c] * heads[c]).sum();
            assert!((y.data()[r] - want).abs() < 1e-12);
        }
        let z = attention_forward(&Tensor::<f64>::zeros(&[6, 3]), &layer).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eigen_profile_rank_one_and_identity() {
        let n = 5;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (i + 1) as f64 * (j as f64 - 1.5);
            }
        }
        let p = EigenProfile::from_matrix(&a, n).unwrap();
        assert!((p.cumulative[0] - 1.0).abs() < 1e-9);
        let mut eye = vec![0.0; 100 * 100];
        (0..100).for_each(|i| eye[i * 100 + i] = 1.0);
        let p = EigenProfile::from_matrix(&eye, 100).unwrap();
        assert!((p.cumulative[2] - 0.03).abs() < 1e-12);
    }
}
