//! Transformer building blocks shared by the encoder, the decoder, and the
//! fine-tuning classifier: patch extraction, multi-head attention, pre-norm
//! blocks, stochastic depth, and fixed 2-D sine-cosine positional tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, GradGraph, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Square image divided into non-overlapping square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
            return Err(Error::invalid(
                "patch_grid",
                format!("patch size {patch_size} must divide image size {image_size}"),
            ));
        }
        if channels == 0 {
            return Err(Error::invalid("patch_grid", "channels must be >= 1".to_string()));
        }
        Ok(PatchGrid { image_size, patch_size, channels })
    }

    /// Patches per side.
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.side() * self.side()
    }

    /// Flattened pixel values per patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Per-block hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub drop_path_rate: f64,
}

impl BlockConfig {
    pub fn new(embed_dim: usize, num_heads: usize, mlp_ratio: f64, drop_path_rate: f64) -> Result<Self> {
        if num_heads == 0 || embed_dim % num_heads != 0 {
            return Err(Error::invalid(
                "block_config",
                format!("num_heads {num_heads} must divide embed_dim {embed_dim}"),
            ));
        }
        if !(0.0..=1.0).contains(&drop_path_rate) {
            return Err(Error::invalid(
                "block_config",
                format!("drop_path_rate {drop_path_rate} outside [0,1]"),
            ));
        }
        Ok(BlockConfig { embed_dim, num_heads, mlp_ratio, drop_path_rate })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Encoder-level configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub grid: PatchGrid,
    pub depth: usize,
    pub block: BlockConfig,
    pub use_classification_token: bool,
}

// ── patch extraction ───────────────────────────────────────────────────

/// Splits a C×H×W image tensor into rows of flattened patches, row-major in
/// patch order. Each output row has `C·p²` values ordered channel-major,
/// then pixel row-major within the patch.
pub fn patchify<E: Element>(image: &Tensor<E>, grid: &PatchGrid) -> Result<Tensor<E>> {
    let expect = [grid.channels, grid.image_size, grid.image_size];
    if image.shape() != expect {
        return Err(Error::shape(
            "patchify",
            format!("image {:?} vs grid {:?}", image.shape(), expect),
        ));
    }
    let (c, s, p) = (grid.channels, grid.image_size, grid.patch_size);
    let side = grid.side();
    let data = image.data();
    let mut out = Vec::with_capacity(grid.num_patches() * grid.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for dy in 0..p {
                    let y = py * p + dy;
                    let base = ch * s * s + y * s + px * p;
                    out.extend_from_slice(&data[base..base + p]);
                }
            }
        }
    }
    drop(data);
    Tensor::new(out, &[grid.num_patches(), grid.patch_dim()], false)
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Element>(patches: &Tensor<E>, grid: &PatchGrid) -> Result<Tensor<E>> {
    let expect = [grid.num_patches(), grid.patch_dim()];
    if patches.shape() != expect {
        return Err(Error::shape(
            "unpatchify",
            format!("patches {:?} vs grid {:?}", patches.shape(), expect),
        ));
    }
    let (c, s, p) = (grid.channels, grid.image_size, grid.patch_size);
    let side = grid.side();
    let data = patches.data();
    let mut out = vec![E::zero(); c * s * s];
    for (idx, row) in data.chunks(grid.patch_dim()).enumerate() {
        let py = idx / side;
        let px = idx % side;
        let mut k = 0;
        for ch in 0..c {
            for dy in 0..p {
                let y = py * p + dy;
                let base = ch * s * s + y * s + px * p;
                out[base..base + p].copy_from_slice(&row[k..k + p]);
                k += p;
            }
        }
    }
    drop(data);
    Tensor::new(out, &[c, s, s], false)
}

// ── positional tables ──────────────────────────────────────────────────

/// 1-D sine-cosine table for positions `pos` with `dim/2` sin and `dim/2`
/// cos entries; frequencies follow `1/10000^(2k/dim)`.
fn sincos_1d<E: Element>(dim: usize, positions: &[f64]) -> Vec<E> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        let mut sines = Vec::with_capacity(half);
        let mut cosines = Vec::with_capacity(half);
        for k in 0..half {
            let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
            sines.push(E::from_f64((pos * omega).sin()));
            cosines.push(E::from_f64((pos * omega).cos()));
        }
        out.extend(sines);
        out.extend(cosines);
    }
    out
}

/// Deterministic 2-D sine-cosine positional table: one row per patch, half
/// the width from the row coordinate and half from the column coordinate.
/// `dim` must be divisible by 4.
pub fn sincos_positional_table<E: Element>(grid: &PatchGrid, dim: usize) -> Result<Tensor<E>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::invalid(
            "sincos_positional_table",
            format!("dim {dim} must be divisible by 4"),
        ));
    }
    let side = grid.side();
    let n = grid.num_patches();
    let half = dim / 2;
    let mut rows_pos = Vec::with_capacity(n);
    let mut cols_pos = Vec::with_capacity(n);
    for r in 0..side {
        for c in 0..side {
            rows_pos.push(r as f64);
            cols_pos.push(c as f64);
        }
    }
    let row_part: Vec<E> = sincos_1d(half, &rows_pos);
    let col_part: Vec<E> = sincos_1d(half, &cols_pos);
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend_from_slice(&row_part[i * half..(i + 1) * half]);
        data.extend_from_slice(&col_part[i * half..(i + 1) * half]);
    }
    Tensor::new(data, &[n, dim], false)
}

/// Positional table with a zero row prepended for the classification token.
pub fn sincos_table_with_cls<E: Element>(grid: &PatchGrid, dim: usize) -> Result<Tensor<E>> {
    let body = sincos_positional_table::<E>(grid, dim)?;
    let mut data = vec![E::zero(); dim];
    data.extend_from_slice(&body.data());
    Tensor::new(data, &[grid.num_patches() + 1, dim], false)
}

// ── stochastic depth ───────────────────────────────────────────────────

/// Stochastic depth over a whole residual branch: in train mode the branch
/// is zeroed with probability `rate` and survivors are scaled by
/// `1/(1-rate)`; in eval mode this is the identity.
pub fn drop_path<E: Element>(
    g: &mut GradGraph<E>,
    branch: &Tensor<E>,
    rate: f64,
    train_mode: bool,
    rng: &mut SeedRng,
) -> Result<Tensor<E>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("drop_path", format!("rate {rate} outside [0,1]")));
    }
    if !train_mode || rate == 0.0 {
        return Ok(branch.clone());
    }
    let factor = if rng.bernoulli(rate) {
        E::zero()
    } else {
        E::from_f64(1.0 / (1.0 - rate))
    };
    Ok(g.scale(branch, factor))
}

// ── parameter registry ─────────────────────────────────────────────────

/// Ordered collection of named parameters. Order is insertion order and is
/// part of the checkpoint contract.
#[derive(Clone, Default)]
pub struct ParamSet<E: Element> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<E>) {
        for (name, t) in &other.entries {
            self.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<E>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn trunc_normal_tensor<E: Element>(shape: &[usize], std: f64, rng: &mut SeedRng) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel).map(|_| E::from_f64(rng.trunc_normal(std))).collect();
    Tensor::from_raw(data, shape.to_vec(), true)
}

// ── layers ─────────────────────────────────────────────────────────────

/// Fully connected layer, `y = x·W + b` with W of shape in×out.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Linear<E> {
    /// Truncated-normal weight (std 0.02), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut SeedRng) -> Self {
        Linear {
            weight: trunc_normal_tensor(&[in_dim, out_dim], INIT_STD, rng),
            bias: Tensor::zeros(&[out_dim], true),
        }
    }

    pub fn forward(&self, g: &mut GradGraph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = g.matmul(x, &self.weight)?;
        g.add_row(&h, &self.bias)
    }

    pub fn register(&self, params: &mut ParamSet<E>, prefix: &str) {
        params.insert(format!("{prefix}.weight"), self.weight.clone());
        params.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}

/// Layer norm with learned gain and bias.
pub struct LayerNorm<E: Element> {
    pub gain: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> LayerNorm<E> {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[dim], E::one(), true),
            bias: Tensor::zeros(&[dim], true),
        }
    }

    pub fn forward(&self, g: &mut GradGraph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        g.layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }

    pub fn register(&self, params: &mut ParamSet<E>, prefix: &str) {
        params.insert(format!("{prefix}.gain"), self.gain.clone());
        params.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}

/// Multi-head self-attention with a fused qkv projection.
pub struct Attention<E: Element> {
    pub cfg: BlockConfig,
    pub qkv: Linear<E>,
    pub proj: Linear<E>,
}

impl<E: Element> Attention<E> {
    pub fn init(cfg: BlockConfig, rng: &mut SeedRng) -> Self {
        Attention {
            cfg,
            qkv: Linear::init(cfg.embed_dim, 3 * cfg.embed_dim, rng),
            proj: Linear::init(cfg.embed_dim, cfg.embed_dim, rng),
        }
    }

    /// Scaled dot-product attention over `tokens` (T×D).
    pub fn forward(&self, g: &mut GradGraph<E>, tokens: &Tensor<E>) -> Result<Tensor<E>> {
        let d = self.cfg.embed_dim;
        if tokens.shape().len() != 2 || tokens.cols() != d {
            return Err(Error::shape(
                "attention",
                format!("tokens {:?} vs embed_dim {d}", tokens.shape()),
            ));
        }
        let dh = self.cfg.head_dim();
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());

        let qkv = self.qkv.forward(g, tokens)?;
        let q = g.slice_cols(&qkv, 0, d)?;
        let k = g.slice_cols(&qkv, d, d)?;
        let v = g.slice_cols(&qkv, 2 * d, d)?;

        let mut head_outputs = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = g.slice_cols(&q, h * dh, dh)?;
            let kh = g.slice_cols(&k, h * dh, dh)?;
            let vh = g.slice_cols(&v, h * dh, dh)?;
            let kt = g.transpose(&kh)?;
            let scores = g.matmul(&qh, &kt)?;
            let scaled = g.scale(&scores, scale);
            let weights = g.softmax(&scaled, 1)?;
            head_outputs.push(g.matmul(&weights, &vh)?);
        }
        let refs: Vec<&Tensor<E>> = head_outputs.iter().collect();
        let merged = g.concat_cols(&refs)?;
        self.proj.forward(g, &merged)
    }

    pub fn register(&self, params: &mut ParamSet<E>, prefix: &str) {
        self.qkv.register(params, &format!("{prefix}.qkv"));
        self.proj.register(params, &format!("{prefix}.proj"));
    }
}

/// Two-layer GELU MLP.
pub struct Mlp<E: Element> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Element> Mlp<E> {
    pub fn init(dim: usize, hidden: usize, rng: &mut SeedRng) -> Self {
        Mlp {
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut GradGraph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.fc1.forward(g, x)?;
        let a = g.gelu(&h);
        self.fc2.forward(g, &a)
    }

    pub fn register(&self, params: &mut ParamSet<E>, prefix: &str) {
        self.fc1.register(params, &format!("{prefix}.fc1"));
        self.fc2.register(params, &format!("{prefix}.fc2"));
    }
}

/// Pre-norm transformer block:
/// `x + DropPath(Attn(LN(x)))`, then `+ DropPath(MLP(LN(x)))`.
pub struct TransformerBlock<E: Element> {
    pub cfg: BlockConfig,
    pub norm1: LayerNorm<E>,
    pub attn: Attention<E>,
    pub norm2: LayerNorm<E>,
    pub mlp: Mlp<E>,
}

impl<E: Element> TransformerBlock<E> {
    pub fn init(cfg: BlockConfig, rng: &mut SeedRng) -> Self {
        TransformerBlock {
            cfg,
            norm1: LayerNorm::init(cfg.embed_dim),
            attn: Attention::init(cfg, rng),
            norm2: LayerNorm::init(cfg.embed_dim),
            mlp: Mlp::init(cfg.embed_dim, cfg.mlp_hidden(), rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph<E>,
        tokens: &Tensor<E>,
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        let normed = self.norm1.forward(g, tokens)?;
        let attended = self.attn.forward(g, &normed)?;
        let attended = drop_path(g, &attended, self.cfg.drop_path_rate, train_mode, rng)?;
        let x = g.add(tokens, &attended)?;

        let normed = self.norm2.forward(g, &x)?;
        let expanded = self.mlp.forward(g, &normed)?;
        let expanded = drop_path(g, &expanded, self.cfg.drop_path_rate, train_mode, rng)?;
        g.add(&x, &expanded)
    }

    pub fn register(&self, params: &mut ParamSet<E>, prefix: &str) {
        self.norm1.register(params, &format!("{prefix}.norm1"));
        self.attn.register(params, &format!("{prefix}.attn"));
        self.norm2.register(params, &format!("{prefix}.norm2"));
        self.mlp.register(params, &format!("{prefix}.mlp"));
    }
}

// ── encoder ────────────────────────────────────────────────────────────

/// ViT-style encoder. A learnable classification token is prepended; the
/// positional table is a fixed sine-cosine function of the patch grid.
pub struct Encoder<E: Element> {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear<E>,
    pub cls_token: Tensor<E>,
    pub pos_table: Tensor<E>,
    pub blocks: Vec<TransformerBlock<E>>,
    pub norm: LayerNorm<E>,
}

impl<E: Element> Encoder<E> {
    pub fn init(cfg: EncoderConfig, rng: &mut SeedRng) -> Result<Self> {
        let dim = cfg.block.embed_dim;
        let pos_table = sincos_table_with_cls::<E>(&cfg.grid, dim)?;
        let patch_embed = Linear::init(cfg.grid.patch_dim(), dim, rng);
        let cls_token = trunc_normal_tensor(&[1, dim], INIT_STD, rng);
        let blocks = (0..cfg.depth).map(|_| TransformerBlock::init(cfg.block, rng)).collect();
        Ok(Encoder {
            cfg,
            patch_embed,
            cls_token,
            pos_table,
            blocks,
            norm: LayerNorm::init(dim),
        })
    }

    /// Embeds the given patch rows (by original patch index), prepends the
    /// classification token, adds positional rows, and runs the blocks.
    /// Output has `indices.len() + 1` rows; row 0 is the classification
    /// token.
    pub fn forward_indices(
        &self,
        g: &mut GradGraph<E>,
        patches: &Tensor<E>,
        indices: &[usize],
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        let n = self.cfg.grid.num_patches();
        if patches.shape() != [n, self.cfg.grid.patch_dim()] {
            return Err(Error::shape(
                "encoder",
                format!(
                    "patches {:?} vs grid ({n} × {})",
                    patches.shape(),
                    self.cfg.grid.patch_dim()
                ),
            ));
        }
        let picked = g.select_rows(patches, indices)?;
        let embedded = self.patch_embed.forward(g, &picked)?;
        // Positional rows are looked up by original patch index (+1 for the
        // classification token row at 0).
        let pos_indices: Vec<usize> = indices.iter().map(|&i| i + 1).collect();
        let pos = g.select_rows(&self.pos_table, &pos_indices)?;
        let placed = g.add(&embedded, &pos)?;

        let cls_pos = g.select_rows(&self.pos_table, &[0])?;
        let cls = g.add(&self.cls_token, &cls_pos)?;
        let mut tokens = g.concat_rows(&[&cls, &placed])?;
        for block in &self.blocks {
            tokens = block.forward(g, &tokens, train_mode, rng)?;
        }
        self.norm.forward(g, &tokens)
    }

    /// Full unmasked token sequence (N+1 rows).
    pub fn forward_full(
        &self,
        g: &mut GradGraph<E>,
        patches: &Tensor<E>,
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        let all: Vec<usize> = (0..self.cfg.grid.num_patches()).collect();
        self.forward_indices(g, patches, &all, train_mode, rng)
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.block.embed_dim
    }

    pub fn register(&self, params: &mut ParamSet<E>, prefix: &str) {
        self.patch_embed.register(params, &format!("{prefix}.patch_embed"));
        params.insert(format!("{prefix}.cls_token"), self.cls_token.clone());
        for (i, block) in self.blocks.iter().enumerate() {
            block.register(params, &format!("{prefix}.blocks.{i}"));
        }
        self.norm.register(params, &format!("{prefix}.norm"));
    }

    /// Rebuilds this encoder with a different drop-path rate (fine-tuning
    /// re-configures pretrained blocks).
    pub fn set_drop_path_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid("set_drop_path_rate", format!("rate {rate} outside [0,1]")));
        }
        self.cfg.block.drop_path_rate = rate;
        for block in &mut self.blocks {
            block.cfg.drop_path_rate = rate;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> SeedRng {
        SeedRng::from_seed(1234)
    }

    #[test]
    fn patch_grid_arithmetic() {
        let g = PatchGrid::new(224, 16, 1).unwrap();
        assert_eq!(g.num_patches(), 196);
        let g = PatchGrid::new(32, 8, 1).unwrap();
        assert_eq!(g.num_patches(), 16);
        assert_eq!(g.patch_dim(), 64);
        assert!(PatchGrid::new(33, 8, 1).is_err());
    }

    #[test]
    fn patchify_roundtrip_random_image() {
        let grid = PatchGrid::new(16, 4, 1).unwrap();
        let mut r = rng();
        let data: Vec<f64> = (0..256).map(|_| r.uniform()).collect();
        let img = Tensor::new(data.clone(), &[1, 16, 16], false).unwrap();
        let patches = patchify(&img, &grid).unwrap();
        assert_eq!(patches.shape(), [16, 16]);
        let back = unpatchify(&patches, &grid).unwrap();
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let grid = PatchGrid::new(16, 4, 1).unwrap();
        let img = Tensor::<f32>::zeros(&[1, 8, 8], false);
        assert!(patchify(&img, &grid).is_err());
    }

    #[test]
    fn sincos_table_is_deterministic_bounded_distinct() {
        let grid = PatchGrid::new(16, 4, 1).unwrap();
        let a = sincos_positional_table::<f32>(&grid, 16).unwrap();
        let b = sincos_positional_table::<f32>(&grid, 16).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // All 16 grid positions produce distinct rows.
        let d = a.data();
        for i in 0..16 {
            for j in (i + 1)..16 {
                assert_ne!(&d[i * 16..(i + 1) * 16], &d[j * 16..(j + 1) * 16], "rows {i},{j}");
            }
        }
        assert!(sincos_positional_table::<f32>(&grid, 18).is_err());
    }

    #[test]
    fn drop_path_edge_cases() {
        let mut g = GradGraph::<f64>::new();
        let mut r = rng();
        let x = Tensor::new(vec![1.0, -2.0], &[1, 2], true).unwrap();
        let y = drop_path(&mut g, &x, 0.0, true, &mut r).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let y = drop_path(&mut g, &x, 0.9, false, &mut r).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(drop_path(&mut g, &x, 1.5, true, &mut r).is_err());
    }

    #[test]
    fn drop_path_survival_statistics() {
        let mut r = SeedRng::from_seed(77);
        let x = Tensor::new(vec![1.0f64], &[1, 1], false).unwrap();
        let n = 10_000;
        let mut survived = 0usize;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut g = GradGraph::inference();
            let y = drop_path(&mut g, &x, 0.5, true, &mut r).unwrap();
            let v = y.data()[0];
            if v != 0.0 {
                survived += 1;
                assert_eq!(v, 2.0, "survivor scale must be exactly 1/(1-rate)");
            }
            sum += v;
        }
        let frac = survived as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "survival fraction {frac}");
        // Expectation preserved within 2%.
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn attention_uniform_when_query_key_zeroed() {
        let cfg = BlockConfig::new(8, 2, 2.0, 0.0).unwrap();
        let mut r = rng();
        let attn = Attention::<f64>::init(cfg, &mut r);
        // Zero q and k columns of the fused qkv weight; keep v as identity-ish.
        {
            let mut w = attn.qkv.weight.data_mut();
            for row in 0..8 {
                for col in 0..16 {
                    w[row * 24 + col] = 0.0;
                }
            }
        }
        let mut g = GradGraph::new();
        let tokens = Tensor::new(
            (0..3 * 8).map(|i| (i as f64 * 0.37).sin()).collect(),
            &[3, 8],
            false,
        )
        .unwrap();
        let out = attn.forward(&mut g, &tokens).unwrap();
        // With uniform weights every output row equals the same mean vector.
        let d = out.data();
        for row in 1..3 {
            for col in 0..8 {
                assert!(
                    (d[col] - d[row * 8 + col]).abs() < 1e-12,
                    "row {row} differs at {col}"
                );
            }
        }
    }

    #[test]
    fn attention_single_token_is_projection_of_value() {
        let cfg = BlockConfig::new(4, 1, 2.0, 0.0).unwrap();
        let mut r = rng();
        let attn = Attention::<f64>::init(cfg, &mut r);
        let tokens = Tensor::new(vec![0.5, -0.25, 1.0, 0.0], &[1, 4], false).unwrap();
        let mut g = GradGraph::new();
        let out = attn.forward(&mut g, &tokens).unwrap();

        // Softmax over a single element is 1, so out = proj(v(token)).
        let x = tokens.data();
        let w = attn.qkv.weight.data();
        let b = attn.qkv.bias.data();
        let mut v = [0.0f64; 4];
        for j in 0..4 {
            let col = 8 + j; // v occupies the last third of qkv
            let mut s = b[col];
            for i in 0..4 {
                s += x[i] * w[i * 12 + col];
            }
            v[j] = s;
        }
        let pw = attn.proj.weight.data();
        let pb = attn.proj.bias.data();
        for j in 0..4 {
            let mut s = pb[j];
            for i in 0..4 {
                s += v[i] * pw[i * 4 + j];
            }
            assert!((out.data()[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_tokens_hand_computed() {
        // One head, D=2, hand-set projections, identity value/output.
        let cfg = BlockConfig::new(2, 1, 2.0, 0.0).unwrap();
        let mut r = rng();
        let attn = Attention::<f64>::init(cfg, &mut r);
        {
            let mut w = attn.qkv.weight.data_mut();
            w.fill(0.0);
            // q = x, k = x, v = x (identity into each third).
            w[0] = 1.0; // x0 -> q0
            w[1 * 6 + 1] = 1.0; // x1 -> q1
            w[2] = 1.0; // x0 -> k0
            w[1 * 6 + 3] = 1.0; // x1 -> k1
            w[4] = 1.0; // x0 -> v0
            w[1 * 6 + 5] = 1.0; // x1 -> v1
        }
        attn.qkv.bias.data_mut().fill(0.0);
        {
            let mut w = attn.proj.weight.data_mut();
            w.fill(0.0);
            w[0] = 1.0;
            w[3] = 1.0;
        }
        attn.proj.bias.data_mut().fill(0.0);

        let tokens = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
        let mut g = GradGraph::new();
        let out = attn.forward(&mut g, &tokens).unwrap();

        // scores/√2: row0 = [1,0]/√2 → softmax; out0 = p*x0 + (1-p)*x1.
        let s = 1.0 / 2.0f64.sqrt();
        let p = s.exp() / (s.exp() + 1.0);
        let expected = [p, 1.0 - p, 1.0 - p, p];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let cfg = BlockConfig::new(8, 2, 2.0, 0.0).unwrap();
        let mut r = rng();
        let attn = Attention::<f64>::init(cfg, &mut r);
        let data: Vec<f64> = (0..4 * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let tokens = Tensor::new(data.clone(), &[4, 8], false).unwrap();
        let mut g = GradGraph::new();
        let out = attn.forward(&mut g, &tokens).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![0.0; 4 * 8];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
        }
        let tokens_p = Tensor::new(permuted, &[4, 8], false).unwrap();
        let out_p = attn.forward(&mut g, &tokens_p).unwrap();

        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = out.data()[src * 8 + c];
                let b = out_p.data()[dst * 8 + c];
                assert!((a - b).abs() < 1e-10, "token {src} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn block_with_zero_weights_is_identity() {
        let cfg = BlockConfig::new(8, 2, 2.0, 0.0).unwrap();
        let mut r = rng();
        let block = TransformerBlock::<f64>::init(cfg, &mut r);
        for t in [
            &block.attn.qkv.weight,
            &block.attn.qkv.bias,
            &block.attn.proj.weight,
            &block.attn.proj.bias,
            &block.mlp.fc1.weight,
            &block.mlp.fc1.bias,
            &block.mlp.fc2.weight,
            &block.mlp.fc2.bias,
        ] {
            t.data_mut().fill(0.0);
        }
        let tokens = Tensor::new((0..24).map(|i| i as f64 * 0.1).collect(), &[3, 8], false).unwrap();
        let mut g = GradGraph::new();
        let out = block.forward(&mut g, &tokens, false, &mut r).unwrap();
        assert_eq!(out.to_vec(), tokens.to_vec());
    }

    #[test]
    fn block_with_full_drop_path_is_identity_in_train_mode() {
        let cfg = BlockConfig::new(8, 2, 2.0, 1.0).unwrap();
        let mut r = rng();
        let block = TransformerBlock::<f64>::init(cfg, &mut r);
        let tokens = Tensor::new((0..24).map(|i| (i as f64).cos()).collect(), &[3, 8], false).unwrap();
        let mut g = GradGraph::new();
        let out = block.forward(&mut g, &tokens, true, &mut r).unwrap();
        assert_eq!(out.to_vec(), tokens.to_vec());
    }

    #[test]
    fn encoder_token_counts_follow_visible_set() {
        let grid = PatchGrid::new(16, 4, 1).unwrap();
        let cfg = EncoderConfig {
            grid,
            depth: 2,
            block: BlockConfig::new(16, 2, 2.0, 0.0).unwrap(),
            use_classification_token: true,
        };
        let mut r = rng();
        let enc = Encoder::<f64>::init(cfg, &mut r).unwrap();
        let patches = Tensor::new((0..16 * 16).map(|i| (i as f64).sin()).collect(), &[16, 16], false).unwrap();
        let mut g = GradGraph::inference();
        let out = enc.forward_indices(&mut g, &patches, &[3, 7, 11, 15], false, &mut r).unwrap();
        assert_eq!(out.shape(), [5, 16]);
        let full = enc.forward_full(&mut g, &patches, false, &mut r).unwrap();
        assert_eq!(full.shape(), [17, 16]);
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let grid = PatchGrid::new(8, 4, 1).unwrap();
        let cfg = EncoderConfig {
            grid,
            depth: 2,
            block: BlockConfig::new(8, 2, 2.0, 0.0).unwrap(),
            use_classification_token: true,
        };
        let mut r = rng();
        let enc = Encoder::<f32>::init(cfg, &mut r).unwrap();
        let mut params = ParamSet::new();
        enc.register(&mut params, "encoder");
        let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        assert!(names.contains(&"encoder.patch_embed.weight"));
        assert!(names.contains(&"encoder.blocks.1.mlp.fc2.bias"));
        assert!(names.contains(&"encoder.norm.gain"));
    }
}
