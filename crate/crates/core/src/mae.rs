//! Masked autoencoding: random patch masking, visible-only encoding,
//! mask-token decoding, and the masked reconstruction loss over normalized
//! pixel targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sincos_table_with_cls, BlockConfig, Encoder, EncoderConfig, LayerNorm, Linear, ParamSet,
    PatchGrid, TransformerBlock, INIT_STD,
};
use crate::optim::AdamW;
use crate::rng::SeedRng;
use crate::tensor::{Element, GradGraph, Tensor};

pub const TARGET_NORM_EPS: f64 = 1e-6;

/// Architecture and masking hyperparameters. This is the config snapshot
/// stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    pub normalize_targets: bool,
}

impl MaeConfig {
    /// Desk-scale default: every structural ratio of the full-scale design
    /// (deep, wide encoder; shallow, narrow decoder; 75% masking) at CPU
    /// size.
    pub fn tiny() -> Self {
        MaeConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            enc_depth: 4,
            enc_dim: 64,
            enc_heads: 4,
            dec_depth: 2,
            dec_dim: 32,
            dec_heads: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            normalize_targets: true,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.patch_size, self.channels)
    }

    pub fn encoder_config(&self, drop_path_rate: f64) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            grid: self.grid()?,
            depth: self.enc_depth,
            block: BlockConfig::new(self.enc_dim, self.enc_heads, self.mlp_ratio, drop_path_rate)?,
            use_classification_token: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.dec_dim > self.enc_dim {
            return Err(Error::invalid(
                "mae_config",
                format!(
                    "decoder dim {} exceeds encoder dim {}; the decoder must be the smaller side",
                    self.dec_dim, self.enc_dim
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(
                "mae_config",
                format!("mask ratio {} outside [0,1)", self.mask_ratio),
            ));
        }
        BlockConfig::new(self.enc_dim, self.enc_heads, self.mlp_ratio, 0.0)?;
        BlockConfig::new(self.dec_dim, self.dec_heads, self.mlp_ratio, 0.0)?;
        Ok(())
    }
}

// ── masking ────────────────────────────────────────────────────────────

/// Partition of patch indices into masked and visible sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub num_patches: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskSet {
    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    /// Checks the partition invariants: disjoint, exhaustive, in range.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_patches];
        for &i in self.masked.iter().chain(&self.visible) {
            if i >= self.num_patches || seen[i] {
                return Err(Error::invalid(
                    "mask_set",
                    format!("index {i} out of range or repeated"),
                ));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::invalid("mask_set", "masked ∪ visible ≠ all patches".to_string()));
        }
        Ok(())
    }
}

/// Uniform random mask over `n` patches via a seeded shuffle;
/// `floor(ratio·n)` indices become masked. `ratio` must be < 1 so at least
/// one patch stays visible.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut SeedRng) -> Result<MaskSet> {
    if n == 0 {
        return Err(Error::invalid("sample_mask", "need at least one patch".to_string()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(
            "sample_mask",
            format!("mask ratio {ratio} must lie in [0,1); ratio 1 would leave nothing visible"),
        ));
    }
    let m = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut masked: Vec<usize> = order[..m].to_vec();
    let mut visible: Vec<usize> = order[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSet { num_patches: n, masked, visible })
}

// ── target normalization ───────────────────────────────────────────────

/// Per-patch standardization of pixel targets: `(x − μ)/√(σ² + eps)` with
/// the biased variance, row by row. Returns a constant (non-gradient)
/// tensor.
pub fn patch_target_normalize<E: Element>(patches: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    if eps <= 0.0 {
        return Err(Error::invalid(
            "patch_target_normalize",
            format!("eps must be > 0, got {eps}"),
        ));
    }
    if patches.shape().len() != 2 {
        return Err(Error::shape(
            "patch_target_normalize",
            format!("need rows of patches, got {:?}", patches.shape()),
        ));
    }
    let (r, c) = (patches.rows(), patches.cols());
    let mut out = Vec::with_capacity(r * c);
    let inv_c = 1.0 / c as f64;
    {
        let data = patches.data();
        for row in data.chunks(c) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_c;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_c;
            let inv_std = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| E::from_f64((v.as_f64() - mean) * inv_std)));
        }
    }
    Tensor::new(out, &[r, c], false)
}

// ── reconstruction loss ────────────────────────────────────────────────

/// Inputs to the masked reconstruction loss. Predictions must cover all N
/// patches; the loss reads only the masked indices.
pub struct ReconstructionBatch<E: Element> {
    pub target_patches: Tensor<E>,
    pub predicted_patches: Tensor<E>,
    pub mask: MaskSet,
    pub normalize_targets: bool,
}

/// Mean squared error over masked patches: the per-patch pixel mean of
/// `(x − x̂)²`, averaged over the masked set — equivalently the mean over
/// all masked pixels. Targets are standardized per patch when
/// `normalize_targets` is set.
pub fn masked_reconstruction_loss<E: Element>(
    g: &mut GradGraph<E>,
    batch: &ReconstructionBatch<E>,
) -> Result<Tensor<E>> {
    let mask = &batch.mask;
    if mask.num_masked() == 0 {
        return Err(Error::invalid(
            "masked_reconstruction_loss",
            "no masked patches; the loss is undefined".to_string(),
        ));
    }
    if batch.predicted_patches.shape() != batch.target_patches.shape()
        || batch.predicted_patches.rows() != mask.num_patches
    {
        return Err(Error::shape(
            "masked_reconstruction_loss",
            format!(
                "predictions {:?} vs targets {:?} vs {} patches",
                batch.predicted_patches.shape(),
                batch.target_patches.shape(),
                mask.num_patches
            ),
        ));
    }
    // Targets are constants; build them outside the recorded graph.
    let mut target_graph = GradGraph::inference();
    let target_rows = target_graph.select_rows(&batch.target_patches, &mask.masked)?;
    let target = if batch.normalize_targets {
        patch_target_normalize(&target_rows, TARGET_NORM_EPS)?
    } else {
        target_rows
    };
    let predicted = g.select_rows(&batch.predicted_patches, &mask.masked)?;
    let diff = g.sub(&predicted, &target)?;
    let squared = g.mul(&diff, &diff)?;
    Ok(g.mean_all(&squared))
}

// ── model ──────────────────────────────────────────────────────────────

/// Asymmetric masked autoencoder: a ViT encoder over visible patches and a
/// lighter decoder that fills masked positions with a shared learnable mask
/// token.
pub struct MaeModel<E: Element> {
    pub cfg: MaeConfig,
    pub encoder: Encoder<E>,
    pub dec_embed: Linear<E>,
    pub mask_token: Tensor<E>,
    pub dec_pos: Tensor<E>,
    pub dec_blocks: Vec<TransformerBlock<E>>,
    pub dec_norm: LayerNorm<E>,
    pub dec_head: Linear<E>,
}

impl<E: Element> MaeModel<E> {
    pub fn init(cfg: MaeConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let encoder = Encoder::init(cfg.encoder_config(0.0)?, rng)?;
        let dec_block_cfg = BlockConfig::new(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio, 0.0)?;
        let dec_embed = Linear::init(cfg.enc_dim, cfg.dec_dim, rng);
        let mask_token = {
            let data: Vec<E> = (0..cfg.dec_dim)
                .map(|_| E::from_f64(rng.trunc_normal(INIT_STD)))
                .collect();
            Tensor::from_raw(data, vec![1, cfg.dec_dim], true)
        };
        let dec_pos = sincos_table_with_cls::<E>(&grid, cfg.dec_dim)?;
        let dec_blocks = (0..cfg.dec_depth)
            .map(|_| TransformerBlock::init(dec_block_cfg, rng))
            .collect();
        let dec_norm = LayerNorm::init(cfg.dec_dim);
        let dec_head = Linear::init(cfg.dec_dim, grid.patch_dim(), rng);
        Ok(MaeModel {
            cfg,
            encoder,
            dec_embed,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            dec_head,
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.encoder.cfg.grid
    }

    /// Encodes only the visible patches (plus the classification token).
    /// Output rows: `[cls, visible...]` in the order given by the mask.
    pub fn encode_visible(
        &self,
        g: &mut GradGraph<E>,
        patches: &Tensor<E>,
        mask: &MaskSet,
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        if mask.num_patches != self.grid().num_patches() {
            return Err(Error::invalid(
                "encode_visible",
                format!(
                    "mask covers {} patches but the grid has {}",
                    mask.num_patches,
                    self.grid().num_patches()
                ),
            ));
        }
        self.encoder.forward_indices(g, patches, &mask.visible, train_mode, rng)
    }

    /// Decodes a visible-token latent back to per-patch pixel predictions
    /// for all N patches. The classification token rides through the decoder
    /// but is excluded from the output.
    pub fn decode_with_mask_tokens(
        &self,
        g: &mut GradGraph<E>,
        latent: &Tensor<E>,
        mask: &MaskSet,
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        let n = self.grid().num_patches();
        if mask.num_patches != n || latent.rows() != mask.num_visible() + 1 {
            return Err(Error::invalid(
                "decode_with_mask_tokens",
                format!(
                    "latent rows {} do not match mask with {} visible of {} patches",
                    latent.rows(),
                    mask.num_visible(),
                    mask.num_patches
                ),
            ));
        }
        let embedded = self.dec_embed.forward(g, latent)?;
        let mask_rows = g.repeat_row(&self.mask_token, mask.num_masked())?;
        // Combined rows: [cls, visible..., masked...]; then gather into
        // canonical order [cls, patch 0, ..., patch N-1].
        let combined = g.concat_rows(&[&embedded, &mask_rows])?;
        let mut source_of = vec![0usize; n + 1];
        for (rank, &p) in mask.visible.iter().enumerate() {
            source_of[p + 1] = 1 + rank;
        }
        for (rank, &p) in mask.masked.iter().enumerate() {
            source_of[p + 1] = 1 + mask.num_visible() + rank;
        }
        let canonical = g.select_rows(&combined, &source_of)?;
        let mut tokens = g.add(&canonical, &self.dec_pos)?;
        for block in &self.dec_blocks {
            tokens = block.forward(g, &tokens, train_mode, rng)?;
        }
        let normed = self.dec_norm.forward(g, &tokens)?;
        let patch_rows: Vec<usize> = (1..=n).collect();
        let without_cls = g.select_rows(&normed, &patch_rows)?;
        self.dec_head.forward(g, &without_cls)
    }

    /// Full forward: encode visible, decode all, score masked patches.
    /// Returns `(loss, predictions)`.
    pub fn forward_loss(
        &self,
        g: &mut GradGraph<E>,
        patches: &Tensor<E>,
        mask: &MaskSet,
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let latent = self.encode_visible(g, patches, mask, train_mode, rng)?;
        let predictions = self.decode_with_mask_tokens(g, &latent, mask, train_mode, rng)?;
        let batch = ReconstructionBatch {
            target_patches: patches.clone(),
            predicted_patches: predictions.clone(),
            mask: mask.clone(),
            normalize_targets: self.cfg.normalize_targets,
        };
        let loss = masked_reconstruction_loss(g, &batch)?;
        Ok((loss, predictions))
    }

    /// All named parameters, encoder first. Insertion order is the
    /// checkpoint order.
    pub fn params(&self) -> ParamSet<E> {
        let mut params = ParamSet::new();
        self.encoder.register(&mut params, "encoder");
        self.dec_embed.register(&mut params, "decoder.embed");
        params.insert("decoder.mask_token", self.mask_token.clone());
        for (i, block) in self.dec_blocks.iter().enumerate() {
            block.register(&mut params, &format!("decoder.blocks.{i}"));
        }
        self.dec_norm.register(&mut params, "decoder.norm");
        self.dec_head.register(&mut params, "decoder.head");
        params
    }
}

/// One optimization step over a batch of patchified images with per-image
/// masks. The batch may be split into `accumulation_steps` equal
/// micro-batches whose gradients are averaged before the single optimizer
/// update. Returns the batch mean loss.
pub fn pretrain_step(
    model: &MaeModel<f32>,
    batch: &[Tensor<f32>],
    masks: &[MaskSet],
    optimizer: &mut AdamW,
    lr: f32,
    accumulation_steps: usize,
) -> Result<f32> {
    if batch.is_empty() || batch.len() != masks.len() {
        return Err(Error::invalid(
            "pretrain_step",
            format!("batch of {} images vs {} masks", batch.len(), masks.len()),
        ));
    }
    if accumulation_steps == 0 || batch.len() % accumulation_steps != 0 {
        return Err(Error::invalid(
            "pretrain_step",
            format!(
                "batch of {} images does not split into {} equal micro-batches",
                batch.len(),
                accumulation_steps
            ),
        ));
    }
    optimizer.zero_grads();
    let inv_total = 1.0f32 / batch.len() as f32;
    let mut loss_sum = 0.0f32;
    let micro_len = batch.len() / accumulation_steps;
    for micro in 0..accumulation_steps {
        let mut g = GradGraph::new();
        let mut no_drop = SeedRng::from_seed(0); // pretraining uses no drop path
        for i in micro * micro_len..(micro + 1) * micro_len {
            let (loss, _) = model.forward_loss(&mut g, &batch[i], &masks[i], true, &mut no_drop)?;
            loss_sum += loss.item();
            // Each image contributes 1/batch to the effective-batch mean, so
            // accumulated micro-batch gradients equal the full-batch
            // gradient exactly.
            let scaled = g.scale(&loss, inv_total);
            g.backward(&scaled)?;
        }
    }
    optimizer.step(lr)?;
    Ok(loss_sum * inv_total)
}
