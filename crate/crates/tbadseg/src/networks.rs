//! Network construction: 3D U-Net and Swin-UnetR segmenters, DenseNet
//! classifiers.
//!
//! Networks own their [`ParamStore`] and emit logits only; softmax happens
//! in the pipelines so the ensemble has a single normalization point.
//! Architectures are parameterized by width/depth so the same code runs at
//! toy scale on phantoms and larger scale via config.

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Graph, Initializer, ParamStore, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegArchitecture {
    Unet3d,
    SwinUnetr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub architecture: SegArchitecture,
    pub in_channels: usize,
    pub out_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub window_size: usize,
    pub seed: u64,
}

impl SegmenterConfig {
    pub fn unet3d(in_channels: usize, out_classes: usize, seed: u64) -> Self {
        SegmenterConfig {
            architecture: SegArchitecture::Unet3d,
            in_channels,
            out_classes,
            base_width: 16,
            depth: 4,
            window_size: 4,
            seed,
        }
    }

    pub fn swin_unetr(in_channels: usize, out_classes: usize, seed: u64) -> Self {
        SegmenterConfig { architecture: SegArchitecture::SwinUnetr, ..Self::unet3d(in_channels, out_classes, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_classes < 2 {
            return Err(Error::Config("segmenter needs at least 2 output classes".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config("segmenter depth must be at least 2".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.window_size == 0 {
            return Err(Error::Config("segmenter channel/window sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsArchitecture {
    DensenetSmall,
    DensenetLarge,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub architecture: ClsArchitecture,
    pub in_channels: usize,
    pub growth_rate: usize,
    pub block_config: Vec<usize>,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn small(in_channels: usize, seed: u64) -> Self {
        ClassifierConfig {
            architecture: ClsArchitecture::DensenetSmall,
            in_channels,
            growth_rate: 8,
            block_config: vec![2, 2, 2],
            seed,
        }
    }

    pub fn large(in_channels: usize, seed: u64) -> Self {
        ClassifierConfig {
            architecture: ClsArchitecture::DensenetLarge,
            in_channels,
            growth_rate: 12,
            block_config: vec![4, 4, 4],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.growth_rate == 0 || self.block_config.is_empty() {
            return Err(Error::Config("classifier channels/growth/blocks must be positive".into()));
        }
        Ok(())
    }
}

/// Registers a conv + instance-norm parameter group.
fn init_conv_block(init: &mut Initializer, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(&format!("{name}.w"), init.he(&[cout, cin, k, k, k], cin * k * k * k));
    store.insert(&format!("{name}.b"), Initializer::zeros(&[cout]));
    store.insert(&format!("{name}.gamma"), Initializer::ones(&[cout]));
    store.insert(&format!("{name}.beta"), Initializer::zeros(&[cout]));
}

/// conv3 -> instance norm -> relu.
fn conv_block(g: &mut Graph, store: &ParamStore, name: &str, x: TensorId) -> TensorId {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let gamma = g.param(store, &format!("{name}.gamma"));
    let beta = g.param(store, &format!("{name}.beta"));
    let y = tensor::conv3d(g, x, w, b);
    let y = tensor::instance_norm(g, y, gamma, beta);
    tensor::relu(g, y)
}

fn init_linear(init: &mut Initializer, store: &mut ParamStore, name: &str, cin: usize, cout: usize) {
    store.insert(&format!("{name}.w"), init.he(&[cin, cout], cin));
    store.insert(&format!("{name}.b"), Initializer::zeros(&[cout]));
}

fn linear_layer(g: &mut Graph, store: &ParamStore, name: &str, x: TensorId) -> TensorId {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    tensor::linear(g, x, w, b)
}

fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(&format!("{name}.gamma"), Initializer::ones(&[dim]));
    store.insert(&format!("{name}.beta"), Initializer::zeros(&[dim]));
}

fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: TensorId) -> TensorId {
    let gamma = g.param(store, &format!("{name}.gamma"));
    let beta = g.param(store, &format!("{name}.beta"));
    tensor::layer_norm(g, x, gamma, beta)
}

/// A trainable segmentation network: input `(in_channels, D, H, W)`,
/// output logits `(out_classes, D, H, W)`.
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    pub params: ParamStore,
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        match cfg.architecture {
            SegArchitecture::Unet3d => init_unet(&cfg, &mut init, &mut params),
            SegArchitecture::SwinUnetr => init_swin(&cfg, &mut init, &mut params),
        }
        Ok(Segmenter { cfg, params })
    }

    /// Required divisor of every spatial dimension.
    pub fn spatial_divisor(&self) -> usize {
        match self.cfg.architecture {
            SegArchitecture::Unet3d => 1 << (self.cfg.depth - 1),
            // /8 token grid must still tile into attention windows
            SegArchitecture::SwinUnetr => 8 * self.cfg.window_size,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[0] != self.cfg.in_channels {
            return Err(Error::Contract(format!(
                "segmenter expects ({}, D, H, W), got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let div = self.spatial_divisor();
        if shape[1..].iter().any(|&d| d % div != 0) {
            return Err(Error::Contract(format!(
                "spatial dims {:?} must be divisible by {div}",
                &shape[1..]
            )));
        }
        Ok(match self.cfg.architecture {
            SegArchitecture::Unet3d => forward_unet(&self.cfg, g, &self.params, x),
            SegArchitecture::SwinUnetr => forward_swin(&self.cfg, g, &self.params, x, &shape),
        })
    }

    /// Inference convenience: logits for one input volume.
    pub fn infer(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone().into_dyn());
        let y = self.forward(&mut g, xi)?;
        Ok(g.value(y).view().into_dimensionality::<ndarray::Ix4>().expect("segmenter output 4D").to_owned())
    }
}

fn unet_width(cfg: &SegmenterConfig, level: usize) -> usize {
    cfg.base_width << level
}

fn init_unet(cfg: &SegmenterConfig, init: &mut Initializer, store: &mut ParamStore) {
    for level in 0..cfg.depth {
        let cin = if level == 0 { cfg.in_channels } else { unet_width(cfg, level - 1) };
        let w = unet_width(cfg, level);
        init_conv_block(init, store, &format!("enc{level}.0"), cin, w, 3);
        init_conv_block(init, store, &format!("enc{level}.1"), w, w, 3);
    }
    for level in (0..cfg.depth - 1).rev() {
        let w = unet_width(cfg, level);
        let concat_in = w + unet_width(cfg, level + 1);
        init_conv_block(init, store, &format!("dec{level}.0"), concat_in, w, 3);
        init_conv_block(init, store, &format!("dec{level}.1"), w, w, 3);
    }
    store.insert("head.w", init.he(&[cfg.out_classes, cfg.base_width, 1, 1, 1], cfg.base_width));
    store.insert("head.b", Initializer::zeros(&[cfg.out_classes]));
}

fn forward_unet(cfg: &SegmenterConfig, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
    let mut skips = Vec::with_capacity(cfg.depth - 1);
    let mut cur = x;
    for level in 0..cfg.depth {
        if level > 0 {
            cur = tensor::maxpool2(g, cur);
        }
        cur = conv_block(g, store, &format!("enc{level}.0"), cur);
        cur = conv_block(g, store, &format!("enc{level}.1"), cur);
        if level < cfg.depth - 1 {
            skips.push(cur);
        }
    }
    for level in (0..cfg.depth - 1).rev() {
        let up = tensor::upsample2(g, cur);
        let merged = tensor::concat(g, &[skips[level], up]);
        cur = conv_block(g, store, &format!("dec{level}.0"), merged);
        cur = conv_block(g, store, &format!("dec{level}.1"), cur);
    }
    let w = g.param(store, "head.w");
    let b = g.param(store, "head.b");
    tensor::conv3d(g, cur, w, b)
}

const SWIN_STAGES: usize = 3;
const SWIN_MLP_RATIO: usize = 2;

fn swin_dim(cfg: &SegmenterConfig, stage: usize) -> usize {
    cfg.base_width << stage
}

fn init_swin(cfg: &SegmenterConfig, init: &mut Initializer, store: &mut ParamStore) {
    init_linear(init, store, "embed", cfg.in_channels * 8, swin_dim(cfg, 0));
    for stage in 0..SWIN_STAGES {
        let dim = swin_dim(cfg, stage);
        for block in 0..2 {
            let p = format!("s{stage}.b{block}");
            init_layer_norm(store, &format!("{p}.ln1"), dim);
            init_linear(init, store, &format!("{p}.q"), dim, dim);
            init_linear(init, store, &format!("{p}.k"), dim, dim);
            init_linear(init, store, &format!("{p}.v"), dim, dim);
            init_linear(init, store, &format!("{p}.proj"), dim, dim);
            init_layer_norm(store, &format!("{p}.ln2"), dim);
            init_linear(init, store, &format!("{p}.mlp1"), dim, SWIN_MLP_RATIO * dim);
            init_linear(init, store, &format!("{p}.mlp2"), SWIN_MLP_RATIO * dim, dim);
        }
        if stage + 1 < SWIN_STAGES {
            init_linear(init, store, &format!("merge{stage}"), dim * 8, swin_dim(cfg, stage + 1));
        }
    }
    // UNETR-style decoder over the /2,/4,/8 token maps plus a full-res stem
    init_conv_block(init, store, "stem", cfg.in_channels, cfg.base_width, 3);
    for stage in (0..SWIN_STAGES - 1).rev() {
        let skip = swin_dim(cfg, stage);
        init_conv_block(init, store, &format!("up{stage}"), skip + swin_dim(cfg, stage + 1), skip, 3);
    }
    init_conv_block(init, store, "fuse", cfg.base_width + swin_dim(cfg, 0), cfg.base_width, 3);
    store.insert("head.w", init.he(&[cfg.out_classes, cfg.base_width, 1, 1, 1], cfg.base_width));
    store.insert("head.b", Initializer::zeros(&[cfg.out_classes]));
}

/// `(d,h,w,E)` map -> 2x downsampled tokens `(d/2*h/2*w/2, 8E)`.
fn space_to_depth_tokens(g: &mut Graph, x: TensorId, d: usize, h: usize, w: usize, e: usize) -> TensorId {
    let r = tensor::reshape(g, x, &[d / 2, 2, h / 2, 2, w / 2, 2, e]);
    let p = tensor::permute(g, r, &[0, 2, 4, 1, 3, 5, 6]);
    tensor::reshape(g, p, &[(d / 2) * (h / 2) * (w / 2), 8 * e])
}

/// Window attention over tokens laid out as `(d,h,w,E)`; `shift` rolls the
/// grid by half a window first (shifted-window block).
fn swin_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: TensorId,
    dims: [usize; 3],
    e: usize,
    win: usize,
    shift: bool,
) -> TensorId {
    let [d, h, w] = dims;
    let t = d * h * w;
    let scale = 1.0 / (e as f32).sqrt();

    let partition = |g: &mut Graph, x2: TensorId| {
        let grid = tensor::reshape(g, x2, &[d, h, w, e]);
        let grid = if shift {
            let s = -((win / 2) as isize);
            let a = tensor::roll(g, grid, 0, s);
            let b = tensor::roll(g, a, 1, s);
            tensor::roll(g, b, 2, s)
        } else {
            grid
        };
        let r = tensor::reshape(g, grid, &[d / win, win, h / win, win, w / win, win, e]);
        let p = tensor::permute(g, r, &[0, 2, 4, 1, 3, 5, 6]);
        tensor::reshape(g, p, &[t / (win * win * win), win * win * win, e])
    };

    let q = linear_layer(g, store, &format!("{prefix}.q"), tokens);
    let k = linear_layer(g, store, &format!("{prefix}.k"), tokens);
    let v = linear_layer(g, store, &format!("{prefix}.v"), tokens);
    let qw = partition(g, q);
    let kw = partition(g, k);
    let vw = partition(g, v);

    let kt = tensor::permute(g, kw, &[0, 2, 1]);
    let scores = tensor::matmul3(g, qw, kt);
    let scores = tensor::scale(g, scores, scale);
    let attn = tensor::softmax_last(g, scores);
    let ctx = tensor::matmul3(g, attn, vw);

    // reverse the partition (and the shift)
    let r = tensor::reshape(g, ctx, &[d / win, h / win, w / win, win, win, win, e]);
    let p = tensor::permute(g, r, &[0, 3, 1, 4, 2, 5, 6]);
    let grid = tensor::reshape(g, p, &[d, h, w, e]);
    let grid = if shift {
        let s = (win / 2) as isize;
        let a = tensor::roll(g, grid, 0, s);
        let b = tensor::roll(g, a, 1, s);
        tensor::roll(g, b, 2, s)
    } else {
        grid
    };
    let flat = tensor::reshape(g, grid, &[t, e]);
    linear_layer(g, store, &format!("{prefix}.proj"), flat)
}

fn swin_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    dims: [usize; 3],
    e: usize,
    win: usize,
    shift: bool,
) -> TensorId {
    let n1 = layer_norm(g, store, &format!("{prefix}.ln1"), x);
    let attn = swin_attention(g, store, prefix, n1, dims, e, win, shift);
    let x = tensor::add(g, x, attn);
    let n2 = layer_norm(g, store, &format!("{prefix}.ln2"), x);
    let m = linear_layer(g, store, &format!("{prefix}.mlp1"), n2);
    let m = tensor::gelu(g, m);
    let m = linear_layer(g, store, &format!("{prefix}.mlp2"), m);
    tensor::add(g, x, m)
}

fn tokens_to_map(g: &mut Graph, x: TensorId, dims: [usize; 3], e: usize) -> TensorId {
    let grid = tensor::reshape(g, x, &[dims[0], dims[1], dims[2], e]);
    tensor::permute(g, grid, &[3, 0, 1, 2])
}

fn forward_swin(
    cfg: &SegmenterConfig,
    g: &mut Graph,
    store: &ParamStore,
    x: TensorId,
    shape: &[usize],
) -> TensorId {
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    let win = cfg.window_size;

    // patch embedding at stride 2
    let full = tensor::permute(g, x, &[1, 2, 3, 0]); // (D,H,W,C)
    let patches = space_to_depth_tokens(g, full, d, h, w, cfg.in_channels);
    let mut tokens = linear_layer(g, store, "embed", patches);
    let mut dims = [d / 2, h / 2, w / 2];

    let mut stage_maps = Vec::with_capacity(SWIN_STAGES);
    for stage in 0..SWIN_STAGES {
        let e = swin_dim(cfg, stage);
        tokens = swin_block(g, store, &format!("s{stage}.b0"), tokens, dims, e, win, false);
        tokens = swin_block(g, store, &format!("s{stage}.b1"), tokens, dims, e, win, true);
        stage_maps.push(tokens_to_map(g, tokens, dims, e));
        if stage + 1 < SWIN_STAGES {
            let grid = tensor::reshape(g, tokens, &[dims[0], dims[1], dims[2], e]);
            let merged = space_to_depth_tokens(g, grid, dims[0], dims[1], dims[2], e);
            tokens = linear_layer(g, store, &format!("merge{stage}"), merged);
            dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        }
    }

    let mut cur = stage_maps[SWIN_STAGES - 1];
    for stage in (0..SWIN_STAGES - 1).rev() {
        let up = tensor::upsample2(g, cur);
        let merged = tensor::concat(g, &[stage_maps[stage], up]);
        cur = conv_block(g, store, &format!("up{stage}"), merged);
    }
    let up = tensor::upsample2(g, cur); // back to full resolution
    let stem = conv_block(g, store, "stem", x);
    let merged = tensor::concat(g, &[stem, up]);
    let fused = conv_block(g, store, "fuse", merged);
    let hw = g.param(store, "head.w");
    let hb = g.param(store, "head.b");
    tensor::conv3d(g, fused, hw, hb)
}

/// A trainable FLT-presence classifier: input `(in_channels, D, H, W)`,
/// output a single logit.
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        let mut ch = cfg.growth_rate * 2;
        init_conv_block(&mut init, &mut params, "stem", cfg.in_channels, ch, 3);
        for (bi, &layers) in cfg.block_config.iter().enumerate() {
            for li in 0..layers {
                init_conv_block(&mut init, &mut params, &format!("block{bi}.layer{li}"), ch, cfg.growth_rate, 3);
                ch += cfg.growth_rate;
            }
            if bi + 1 < cfg.block_config.len() {
                init_conv_block(&mut init, &mut params, &format!("trans{bi}"), ch, ch / 2, 1);
                ch /= 2;
            }
        }
        init_linear(&mut init, &mut params, "head", ch, 1);
        Ok(Classifier { cfg, params })
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << (self.cfg.block_config.len() - 1)
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[0] != self.cfg.in_channels {
            return Err(Error::Contract(format!(
                "classifier expects ({}, D, H, W), got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let div = self.spatial_divisor();
        if shape[1..].iter().any(|&d| d % div != 0) {
            return Err(Error::Contract(format!(
                "spatial dims {:?} must be divisible by {div}",
                &shape[1..]
            )));
        }
        Ok(forward_classifier(&self.cfg, g, &self.params, x))
    }

    /// Scalar FLT-presence logit for one input volume.
    pub fn infer(&self, x: &Array4<f32>) -> Result<f32> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone().into_dyn());
        let y = self.forward(&mut g, xi)?;
        Ok(g.value(y)[[0]])
    }
}

fn forward_classifier(cfg: &ClassifierConfig, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
    let mut cur = conv_block(g, store, "stem", x);
    for (bi, &layers) in cfg.block_config.iter().enumerate() {
        for li in 0..layers {
            let new = conv_block(g, store, &format!("block{bi}.layer{li}"), cur);
            cur = tensor::concat(g, &[cur, new]);
        }
        if bi + 1 < cfg.block_config.len() {
            cur = conv_block(g, store, &format!("trans{bi}"), cur);
            cur = tensor::avgpool2(g, cur);
        }
    }
    let pooled = tensor::global_avg_pool(g, cur);
    let row = tensor::reshape(g, pooled, &[1, g.value(pooled).len()]);
    let logit = linear_layer(g, store, "head", row);
    tensor::reshape(g, logit, &[1])
}

/// Binary cross-entropy with logits, plus its gradient wrt the logit.
/// Numerically stable form: `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logit(logit: f32, target: bool) -> (f64, f32) {
    let z = logit as f64;
    let y = if target { 1.0 } else { 0.0 };
    let p = 1.0 / (1.0 + (-z).exp());
    let loss = z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
    (loss, (p - y) as f32)
}

/// Backward seed helper: wraps a dense gradient as an [`Array1`] for the
/// scalar classifier output.
pub fn scalar_seed(grad: f32) -> ndarray::ArrayD<f32> {
    Array1::from_vec(vec![grad]).into_dyn()
}
