//! Run drivers behind the CLI: pretraining, fine-tuning over stratified
//! folds, evaluation, preprocessing, and synthetic dataset generation.
//!
//! Every driver is deterministic from (config, seed) in serial mode: data
//! order, masks, augmentations, drop-path draws, and splits all come from
//! named seed streams.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::ckpt::{Checkpoint, CheckpointHeader, NamedTensor};
use crate::classifier::{build_finetune_model, ensure_config_compatible, finetune_step, FinetuneModel};
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic_dataset, load_manifest, sample_label_subset, save_fold_files,
    save_manifest, stratified_kfold, FoldSplit, LabelBudget, SampleManifest, SampleRecord,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, aggregate_folds, ConfusionMatrix, FoldSummary};
use crate::imaging::{
    compute_dataset_stats, estimate_background, eval_transform, load_image, pad_to_square,
    pad_to_square_constant, save_png, train_augment, unstandardize_to_u8, DatasetStats, RawImage,
};
use crate::mae::{pretrain_step, sample_mask, MaeModel, MaskSet};
use crate::nn::{patchify, unpatchify, PatchGrid};
use crate::optim::{
    cosine_warmup_lr, decays_weight, llrd_multipliers, scaled_base_lr, AdamW, Schedule, ADAMW_EPS,
};
use crate::rng::{derive_seed, SeedRng};
use crate::tensor::{GradGraph, Tensor};

// ── shared helpers ─────────────────────────────────────────────────────

fn append_csv_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

fn load_all_images(manifest: &SampleManifest) -> Result<Vec<RawImage>> {
    (0..manifest.len())
        .map(|i| load_image(&manifest.resolved_path(i)))
        .collect()
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    stats: DatasetStats,
    grid: PatchGrid,
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a RunConfig, stats: DatasetStats) -> Result<Self> {
        let grid = cfg.model_config().grid()?;
        Ok(Pipeline { cfg, stats, grid })
    }

    fn augment_patches(&self, img: &RawImage, rng: &mut SeedRng) -> Result<Tensor<f32>> {
        let tensor = train_augment(
            img,
            self.cfg.working_size,
            self.cfg.image_size,
            (self.cfg.crop_scale_min, self.cfg.crop_scale_max),
            &self.stats,
            rng,
        )?;
        patchify(&tensor, &self.grid)
    }

    fn eval_patches(&self, img: &RawImage) -> Result<Tensor<f32>> {
        let tensor = eval_transform(img, self.cfg.working_size, self.cfg.image_size, &self.stats)?;
        patchify(&tensor, &self.grid)
    }
}

fn compute_and_save_stats(
    manifest: &SampleManifest,
    working_size: usize,
    out_dir: &Path,
) -> Result<DatasetStats> {
    let paths: Vec<PathBuf> = (0..manifest.len()).map(|i| manifest.resolved_path(i)).collect();
    let stats = compute_dataset_stats(&paths, working_size)?;
    std::fs::write(
        out_dir.join("stats.json"),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    Ok(stats)
}

fn warn_missing(manifest: &SampleManifest) {
    for path in manifest.missing_files() {
        eprintln!("warning: manifest references missing file {path}");
    }
}

// ── pretraining ────────────────────────────────────────────────────────

pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Mean masked loss per epoch, in epoch order (resumed runs only carry
    /// the epochs they executed).
    pub epoch_losses: Vec<f32>,
    pub stats: DatasetStats,
}

fn pretrain_checkpoint(
    cfg: &RunConfig,
    model: &MaeModel<f32>,
    optimizer: &AdamW,
    epoch: u64,
) -> Checkpoint {
    let mut tensors = Checkpoint::collect_params(&model.params());
    tensors.extend(
        optimizer
            .state_tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor { name, shape, data }),
    );
    Checkpoint {
        header: CheckpointHeader {
            kind: "pretrain".to_string(),
            model: cfg.model_config(),
            num_labels: None,
            head_hidden: None,
            epoch,
            seed: cfg.seed,
            optimizer_step: Some(optimizer.step_count()),
        },
        tensors,
    }
}

/// Masked-autoencoder pretraining over a manifest. Writes per-epoch loss
/// rows to `pretrain_loss.csv`, periodic checkpoints, optional
/// reconstruction triptychs, and `final.ckpt`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate_common()?;
    if cfg.manifest.is_empty() {
        return Err(Error::Config("pretrain requires a manifest".to_string()));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_effective(&out_dir)?;

    let manifest = load_manifest(Path::new(&cfg.manifest))?;
    warn_missing(&manifest);
    let images = load_all_images(&manifest)?;
    let stats = compute_and_save_stats(&manifest, cfg.working_size, &out_dir)?;
    let pipeline = Pipeline::new(cfg, stats)?;

    let model_cfg = cfg.model_config();
    let mut init_rng = SeedRng::for_stream(cfg.seed, "init", &[]);
    let model = MaeModel::<f32>::init(model_cfg.clone(), &mut init_rng)?;
    let params = model.params();
    let mut optimizer = AdamW::new(cfg.beta1, cfg.beta2, ADAMW_EPS);
    optimizer.add_param_set(&params, |name, shape| {
        (1.0, if decays_weight(name, shape) { cfg.weight_decay as f32 } else { 0.0 })
    });

    let mut start_epoch = 0u64;
    if let Some(resume) = &cfg.resume {
        let ckpt = Checkpoint::load(Path::new(resume))?;
        if ckpt.header.kind != "pretrain" {
            return Err(Error::Checkpoint(format!(
                "cannot resume pretraining from a '{}' checkpoint",
                ckpt.header.kind
            )));
        }
        ensure_config_compatible(&ckpt, &model_cfg)?;
        ckpt.load_into(&params)?;
        optimizer.load_state(ckpt.header.optimizer_step.unwrap_or(0), |name| {
            ckpt.get(name).map(|t| t.data.clone())
        })?;
        start_epoch = ckpt.header.epoch;
        println!("resumed from {resume} at epoch {start_epoch}");
    }

    let n = manifest.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let base_lr = scaled_base_lr(cfg.reference_lr, cfg.batch_size);
    let schedule = Schedule::new(
        base_lr,
        cfg.min_lr,
        cfg.pretrain_warmup_epochs(),
        cfg.epochs,
        steps_per_epoch,
    )?;

    let grid_patches = pipeline.grid.num_patches();
    let loss_log = out_dir.join("pretrain_loss.csv");
    let mut epoch_losses = Vec::new();

    for epoch in start_epoch..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        SeedRng::for_stream(cfg.seed, "order", &[epoch]).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut masks: Vec<MaskSet> = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut aug_rng = SeedRng::for_stream(cfg.seed, "augment", &[epoch, idx as u64]);
                batch.push(pipeline.augment_patches(&images[idx], &mut aug_rng)?);
                let mut mask_rng = SeedRng::for_stream(cfg.seed, "mask", &[epoch, idx as u64]);
                masks.push(sample_mask(grid_patches, cfg.mask_ratio, &mut mask_rng)?);
            }
            let accum = if chunk.len() % cfg.accumulation_steps == 0 {
                cfg.accumulation_steps
            } else {
                1
            };
            let lr = cosine_warmup_lr(&schedule, optimizer.step_count() as usize)? as f32;
            let loss = pretrain_step(&model, &batch, &masks, &mut optimizer, lr, accum)?;
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let mean_loss = (loss_sum / n as f64) as f32;
        epoch_losses.push(mean_loss);
        append_csv_line(&loss_log, "epoch,loss", &format!("{},{}", epoch + 1, mean_loss))?;
        println!("epoch {:>4}/{}: masked loss {mean_loss:.5}", epoch + 1, cfg.epochs);

        let completed = epoch + 1;
        if cfg.checkpoint_every > 0 && completed as usize % cfg.checkpoint_every == 0 {
            let ckpt = pretrain_checkpoint(cfg, &model, &optimizer, completed);
            ckpt.save(&out_dir.join(format!("ckpt_epoch{completed}.ckpt")))?;
            if cfg.dump_recon {
                dump_reconstruction(cfg, &pipeline, &model, &images[0], completed, &out_dir)?;
            }
        }
    }

    let final_path = out_dir.join("final.ckpt");
    let ckpt = pretrain_checkpoint(cfg, &model, &optimizer, cfg.epochs as u64);
    ckpt.save(&final_path)?;
    if cfg.dump_recon {
        dump_reconstruction(cfg, &pipeline, &model, &images[0], cfg.epochs as u64, &out_dir)?;
    }
    Ok(PretrainOutcome { final_checkpoint: final_path, epoch_losses, stats: pipeline.stats })
}

/// Writes a masked / reconstructed / original triptych as one grayscale PNG.
fn dump_reconstruction(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    model: &MaeModel<f32>,
    image: &RawImage,
    epoch: u64,
    out_dir: &Path,
) -> Result<()> {
    let patches = pipeline.eval_patches(image)?;
    let mut mask_rng = SeedRng::for_stream(cfg.seed, "recon-mask", &[epoch]);
    let mask = sample_mask(pipeline.grid.num_patches(), cfg.mask_ratio, &mut mask_rng)?;
    let mut g = GradGraph::inference();
    let mut no_drop = SeedRng::from_seed(0);
    let latent = model.encode_visible(&mut g, &patches, &mask, false, &mut no_drop)?;
    let pred = model.decode_with_mask_tokens(&mut g, &latent, &mask, false, &mut no_drop)?;

    let p = pipeline.grid.patch_dim();
    let original = patches.to_vec();
    // Masked view: visible patches kept, masked patches blanked.
    let mut masked_view = original.clone();
    for &m in &mask.masked {
        for v in &mut masked_view[m * p..(m + 1) * p] {
            // Mid-gray in standardized units.
            *v = ((0.5 - pipeline.stats.mean) / pipeline.stats.std) as f32;
        }
    }
    // Reconstruction: original at visible indices, prediction at masked
    // indices; normalized predictions are mapped back with the target
    // patch's own statistics.
    let mut recon = original.clone();
    let pred_data = pred.to_vec();
    for &m in &mask.masked {
        let target = &original[m * p..(m + 1) * p];
        let (mut mu, mut var) = (0.0f64, 0.0f64);
        for &t in target {
            mu += t as f64;
        }
        mu /= p as f64;
        for &t in target {
            var += (t as f64 - mu) * (t as f64 - mu);
        }
        var /= p as f64;
        let sd = (var + crate::mae::TARGET_NORM_EPS).sqrt();
        for (i, slot) in recon[m * p..(m + 1) * p].iter_mut().enumerate() {
            let raw = pred_data[m * p + i] as f64;
            *slot = if cfg.normalize_targets { (raw * sd + mu) as f32 } else { raw as f32 };
        }
    }

    let side = cfg.image_size;
    let sep = 2usize;
    let mut panel_pixels = Vec::with_capacity(3 * side * side);
    let mut panels = Vec::new();
    for values in [&masked_view, &recon, &original] {
        let t = Tensor::new(values.clone(), &[pipeline.grid.num_patches(), p], false)?;
        let img_tensor = unpatchify(&t, &pipeline.grid)?;
        panels.push(unstandardize_to_u8(&img_tensor.to_vec(), &pipeline.stats));
    }
    let width = 3 * side + 2 * sep;
    for y in 0..side {
        for (i, panel) in panels.iter().enumerate() {
            panel_pixels.extend_from_slice(&panel[y * side..(y + 1) * side]);
            if i < 2 {
                panel_pixels.extend_from_slice(&[255; 2][..sep]);
            }
        }
    }
    let img = RawImage::new(width, side, 1, panel_pixels)?;
    save_png(&img, &out_dir.join(format!("recon_epoch{epoch}.png")))
}

// ── fine-tuning ────────────────────────────────────────────────────────

pub struct FoldResult {
    pub fold: usize,
    pub test_accuracy: f64,
    /// Validation accuracy after each epoch (None when the val part is empty).
    pub val_accuracy_by_epoch: Vec<Option<f64>>,
    pub subset: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub checkpoint: PathBuf,
    pub confusion: ConfusionMatrix,
}

pub struct FinetuneOutcome {
    pub fold_results: Vec<FoldResult>,
    pub summary: FoldSummary,
}

fn evaluate_cached(
    model: &FinetuneModel<f32>,
    tensors: &[Tensor<f32>],
    labels: &[usize],
) -> Result<(f64, Vec<usize>)> {
    let predictions: Vec<usize> = tensors
        .iter()
        .map(|t| model.predict_one(t))
        .collect::<Result<_>>()?;
    Ok((accuracy(&predictions, labels)?, predictions))
}

/// Fine-tunes over the selected stratified folds: split → labeled subset →
/// train → evaluate on the fold's test part, then aggregate. Writes
/// per-fold checkpoints, split files, confusion matrices, a training log,
/// and `metrics.csv` with a summary block.
pub fn run_finetune(cfg: &RunConfig) -> Result<FinetuneOutcome> {
    cfg.validate_common()?;
    if cfg.manifest.is_empty() {
        return Err(Error::Config("finetune requires a manifest".to_string()));
    }
    if cfg.checkpoint.is_none() && !cfg.scratch {
        return Err(Error::Config(
            "finetune requires --checkpoint or --scratch".to_string(),
        ));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_effective(&out_dir)?;

    let manifest = load_manifest(Path::new(&cfg.manifest))?;
    warn_missing(&manifest);
    let images = load_all_images(&manifest)?;
    let stats = compute_and_save_stats(&manifest, cfg.working_size, &out_dir)?;
    let pipeline = Pipeline::new(cfg, stats)?;
    let num_labels = manifest.num_labels();
    let model_cfg = cfg.model_config();

    let ckpt = match &cfg.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(Path::new(path))?;
            if ckpt.header.kind != "pretrain" {
                return Err(Error::Checkpoint(format!(
                    "fine-tuning expects a pretraining checkpoint, got '{}'",
                    ckpt.header.kind
                )));
            }
            ensure_config_compatible(&ckpt, &model_cfg)?;
            Some(ckpt)
        }
        None => None,
    };

    let folds = stratified_kfold(&manifest, cfg.folds, cfg.seed)?;
    let fold_list: Vec<usize> = match &cfg.fold_list {
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&f| f >= cfg.folds) {
                return Err(Error::Config(format!("fold {bad} out of range for K={}", cfg.folds)));
            }
            list.clone()
        }
        None => (0..cfg.folds).collect(),
    };

    let log_path = out_dir.join("finetune_log.csv");
    let metrics_path = out_dir.join("metrics.csv");
    let mut fold_results = Vec::new();

    for &fold in &fold_list {
        let split = &folds[fold];
        save_fold_files(&manifest, split, &out_dir)?;
        let result = finetune_one_fold(cfg, &pipeline, &manifest, &images, ckpt.as_ref(), split, num_labels, &out_dir, &log_path)?;
        append_csv_line(
            &metrics_path,
            "fold,fraction,accuracy",
            &format!("{},{},{}", fold, cfg.fraction, result.test_accuracy),
        )?;
        println!(
            "fold {fold}: test accuracy {:.4} ({} train / {} test)",
            result.test_accuracy,
            result.subset.len(),
            result.test_indices.len()
        );
        fold_results.push(result);
    }

    let accuracies: Vec<f64> = fold_results.iter().map(|r| r.test_accuracy).collect();
    let summary = aggregate_folds(&accuracies)?;
    let mut f = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    writeln!(f, "# folds {:?} fraction {}", fold_list, cfg.fraction)?;
    writeln!(f, "# accuracy {}", summary.format_percent())?;
    println!("accuracy over folds: {}", summary.format_percent());
    Ok(FinetuneOutcome { fold_results, summary })
}

#[allow(clippy::too_many_arguments)]
fn finetune_one_fold(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    manifest: &SampleManifest,
    images: &[RawImage],
    ckpt: Option<&Checkpoint>,
    split: &FoldSplit,
    num_labels: usize,
    out_dir: &Path,
    log_path: &Path,
) -> Result<FoldResult> {
    let fold = split.fold;
    let train = split.train_indices();
    let budget = LabelBudget::new(manifest, &train, cfg.fraction)?;
    let subset = sample_label_subset(
        manifest,
        &train,
        &budget,
        derive_seed(cfg.seed, "subset", &[fold as u64]),
    );

    let mut init_rng = SeedRng::for_stream(cfg.seed, "ft-init", &[fold as u64]);
    let model = match ckpt {
        Some(c) => build_finetune_model(
            c,
            num_labels,
            cfg.head_hidden,
            cfg.drop_path_rate,
            cfg.scratch,
            &mut init_rng,
        )?,
        None => FinetuneModel::init(
            &cfg.model_config(),
            num_labels,
            cfg.head_hidden,
            cfg.drop_path_rate,
            &mut init_rng,
        )?,
    };

    let params = model.params();
    let plan = llrd_multipliers(cfg.enc_depth, cfg.llrd_decay)?;
    let mut optimizer = AdamW::new(cfg.beta1, cfg.ft_beta2, ADAMW_EPS);
    optimizer.add_param_set(&params, |name, shape| {
        let mult = plan.multiplier_for(name) as f32;
        let wd = if decays_weight(name, shape) { cfg.ft_weight_decay as f32 } else { 0.0 };
        (mult, wd)
    });

    let steps_per_epoch = subset.len().div_ceil(cfg.ft_batch_size).max(1);
    let warmup = cfg.ft_warmup_epochs.min(cfg.ft_epochs.saturating_sub(1));
    let schedule = Schedule::new(cfg.ft_lr, cfg.min_lr, warmup, cfg.ft_epochs, steps_per_epoch)?;

    // Validation and test tensors are deterministic; build them once.
    let val_indices = split.val_indices();
    let val_tensors: Vec<Tensor<f32>> = val_indices
        .iter()
        .map(|&i| pipeline.eval_patches(&images[i]))
        .collect::<Result<_>>()?;
    let val_labels: Vec<usize> = val_indices.iter().map(|&i| manifest.label_of(i)).collect();
    let test_indices = split.test_indices();
    let test_tensors: Vec<Tensor<f32>> = test_indices
        .iter()
        .map(|&i| pipeline.eval_patches(&images[i]))
        .collect::<Result<_>>()?;
    let test_labels: Vec<usize> = test_indices.iter().map(|&i| manifest.label_of(i)).collect();

    let mut val_accuracy_by_epoch = Vec::with_capacity(cfg.ft_epochs);
    for epoch in 0..cfg.ft_epochs as u64 {
        let mut order = subset.clone();
        SeedRng::for_stream(cfg.seed, "ft-order", &[fold as u64, epoch]).shuffle(&mut order);
        let mut drop_rng = SeedRng::for_stream(cfg.seed, "droppath", &[fold as u64, epoch]);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.ft_batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut aug_rng =
                    SeedRng::for_stream(cfg.seed, "ft-augment", &[fold as u64, epoch, idx as u64]);
                batch.push(pipeline.augment_patches(&images[idx], &mut aug_rng)?);
                labels.push(manifest.label_of(idx));
            }
            let lr = cosine_warmup_lr(&schedule, optimizer.step_count() as usize)? as f32;
            let loss = finetune_step(
                &model,
                &batch,
                &labels,
                cfg.label_smoothing,
                &mut optimizer,
                lr,
                &mut drop_rng,
            )?;
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let train_loss = loss_sum / subset.len().max(1) as f64;

        let val_acc = if val_tensors.is_empty() {
            None
        } else {
            Some(evaluate_cached(&model, &val_tensors, &val_labels)?.0)
        };
        val_accuracy_by_epoch.push(val_acc);
        let val_text = val_acc.map(|a| a.to_string()).unwrap_or_default();
        append_csv_line(
            log_path,
            "fold,epoch,train_loss,val_accuracy",
            &format!("{},{},{},{}", fold, epoch + 1, train_loss, val_text),
        )?;
    }

    let (test_accuracy, predictions) = evaluate_cached(&model, &test_tensors, &test_labels)?;
    let confusion = ConfusionMatrix::new(&predictions, &test_labels, num_labels)?;
    std::fs::write(
        out_dir.join(format!("fold{fold}_confusion.csv")),
        confusion.to_csv(&manifest.labels),
    )?;
    confusion.save_heatmap(&out_dir.join(format!("fold{fold}_confusion.png")), 16)?;

    let ckpt_path = out_dir.join(format!("fold{fold}.ckpt"));
    let finetuned = Checkpoint {
        header: CheckpointHeader {
            kind: "finetune".to_string(),
            model: cfg.model_config(),
            num_labels: Some(num_labels),
            head_hidden: Some(cfg.head_hidden),
            epoch: cfg.ft_epochs as u64,
            seed: cfg.seed,
            optimizer_step: Some(optimizer.step_count()),
        },
        tensors: Checkpoint::collect_params(&params),
    };
    finetuned.save(&ckpt_path)?;

    Ok(FoldResult {
        fold,
        test_accuracy,
        val_accuracy_by_epoch,
        subset,
        test_indices,
        checkpoint: ckpt_path,
        confusion,
    })
}

// ── evaluation ─────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub accuracy: f64,
    pub per_label_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Deterministic evaluation of a fine-tuned checkpoint over a manifest.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    cfg.validate_common()?;
    if cfg.manifest.is_empty() {
        return Err(Error::Config("eval requires a manifest".to_string()));
    }
    let ckpt_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval requires --checkpoint".to_string()))?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_effective(&out_dir)?;

    let ckpt = Checkpoint::load(Path::new(ckpt_path))?;
    if ckpt.header.kind != "finetune" {
        return Err(Error::Checkpoint(format!(
            "eval expects a fine-tuned checkpoint, got '{}'",
            ckpt.header.kind
        )));
    }
    let num_labels = ckpt
        .header
        .num_labels
        .ok_or_else(|| Error::Checkpoint("fine-tune checkpoint lacks num_labels".to_string()))?;
    let hidden = ckpt.header.head_hidden.unwrap_or(cfg.head_hidden);

    let manifest = load_manifest(Path::new(&cfg.manifest))?;
    warn_missing(&manifest);
    if manifest.num_labels() != num_labels {
        return Err(Error::Config(format!(
            "manifest has {} labels but the checkpoint head expects {num_labels}",
            manifest.num_labels()
        )));
    }
    let images = load_all_images(&manifest)?;
    let stats = compute_and_save_stats(&manifest, cfg.working_size, &out_dir)?;
    let pipeline = Pipeline::new(cfg, stats)?;

    let mut rng = SeedRng::from_seed(0); // head init overwritten below
    let model =
        FinetuneModel::<f32>::init(&ckpt.header.model, num_labels, hidden, 0.0, &mut rng)?;
    ckpt.load_into(&model.params())?;

    let tensors: Vec<Tensor<f32>> = (0..manifest.len())
        .map(|i| pipeline.eval_patches(&images[i]))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..manifest.len()).map(|i| manifest.label_of(i)).collect();
    let (acc, predictions) = evaluate_cached(&model, &tensors, &labels)?;
    let confusion = ConfusionMatrix::new(&predictions, &labels, num_labels)?;
    std::fs::write(out_dir.join("confusion.csv"), confusion.to_csv(&manifest.labels))?;
    confusion.save_heatmap(&out_dir.join("confusion.png"), 16)?;

    println!("accuracy: {acc:.4} over {} samples", manifest.len());
    for (label, per) in manifest.labels.iter().zip(confusion.per_label_accuracy()) {
        match per {
            Some(p) => println!("  {label}: {p:.4}"),
            None => println!("  {label}: (no samples)"),
        }
    }
    Ok(EvalOutcome { accuracy: acc, per_label_accuracy: confusion.per_label_accuracy(), confusion })
}

// ── preprocessing ──────────────────────────────────────────────────────

pub struct PreprocessOutcome {
    pub manifest_path: PathBuf,
    pub stats: DatasetStats,
    pub skipped: Vec<String>,
}

fn collect_image_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if matches!(
                path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "pgm" || e == "ppm"
            ) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    Ok(files)
}

/// Pads every image in the input tree to a background-matched square,
/// writes the copies plus a manifest (labels from first-level directory
/// names) and dataset statistics. Unreadable files are skipped with a
/// logged path. Reruns with the same seed are byte-identical.
pub fn run_preprocess(cfg: &RunConfig) -> Result<PreprocessOutcome> {
    let input_dir = cfg
        .input_dir
        .as_ref()
        .ok_or_else(|| Error::Config("preprocess requires --input".to_string()))?;
    let input_root = PathBuf::from(input_dir);
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_effective(&out_dir)?;

    let files = collect_image_files(&input_root)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no images under {input_dir}")));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let rel = path.strip_prefix(&input_root).unwrap_or(path);
        let rel_str = rel.to_string_lossy().replace('\\', "/");
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping unreadable image {}: {e}", path.display());
                skipped.push(rel_str);
                continue;
            }
        };
        let bg = estimate_background(&img);
        let padded = if cfg.pad_constant {
            pad_to_square_constant(&img, &bg)
        } else {
            let mut rng = SeedRng::for_stream(cfg.seed, &rel_str, &[]);
            pad_to_square(&img, &bg, &mut rng)
        };
        let label = rel
            .components()
            .next()
            .filter(|_| rel.components().count() > 1)
            .map(|c| c.as_os_str().to_string_lossy().to_string())
            .unwrap_or_else(|| "unlabeled".to_string());
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let out_rel = format!("images/{label}/{stem}.png");
        let out_path = out_dir.join(&out_rel);
        std::fs::create_dir_all(out_path.parent().expect("file path has a parent"))?;
        save_png(&padded, &out_path)?;
        records.push(SampleRecord {
            path: out_rel,
            label,
            source: input_root
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default(),
        });
    }
    if records.is_empty() {
        return Err(Error::Config("every input image was unreadable".to_string()));
    }
    let manifest = SampleManifest::from_records(records, out_dir.clone())?;
    let manifest_path = out_dir.join("manifest.csv");
    save_manifest(&manifest, &manifest_path)?;
    let stats = compute_and_save_stats(&manifest, cfg.working_size, &out_dir)?;
    println!(
        "preprocessed {} images into {} ({} skipped)",
        manifest.len(),
        out_dir.display(),
        skipped.len()
    );
    Ok(PreprocessOutcome { manifest_path, stats, skipped })
}

// ── synthetic data ─────────────────────────────────────────────────────

/// Generates the synthetic organism dataset into the output directory.
pub fn run_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    cfg.write_effective(&out_dir)?;
    let manifest = generate_synthetic_dataset(
        cfg.synth_labels,
        cfg.synth_per_label,
        cfg.synth_image_size,
        cfg.synth_difficulty,
        cfg.seed,
        &out_dir,
    )?;
    println!(
        "generated {} images over {} labels in {}",
        manifest.len(),
        manifest.num_labels(),
        out_dir.display()
    );
    Ok(out_dir.join("manifest.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.join("synth").to_string_lossy().to_string();
        cfg.synth_labels = 3;
        cfg.synth_per_label = 6;
        cfg.synth_image_size = 40;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn synth_pretrain_finetune_eval_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config(dir.path());
        let manifest_path = run_synth(&cfg).unwrap();

        // Two pretraining epochs on the tiny corpus.
        cfg.manifest = manifest_path.to_string_lossy().to_string();
        cfg.out_dir = dir.path().join("pre").to_string_lossy().to_string();
        cfg.epochs = 2;
        cfg.batch_size = 6;
        let pre = run_pretrain(&cfg).unwrap();
        assert_eq!(pre.epoch_losses.len(), 2);
        assert!(pre.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(pre.final_checkpoint.exists());

        // One-fold fine-tune for two epochs.
        cfg.out_dir = dir.path().join("ft").to_string_lossy().to_string();
        cfg.checkpoint = Some(pre.final_checkpoint.to_string_lossy().to_string());
        cfg.ft_epochs = 2;
        cfg.ft_batch_size = 8;
        cfg.folds = 2;
        cfg.fold_list = Some(vec![0]);
        cfg.head_hidden = 32;
        let ft = run_finetune(&cfg).unwrap();
        assert_eq!(ft.fold_results.len(), 1);
        let fold = &ft.fold_results[0];
        assert!(fold.checkpoint.exists());
        assert!((0.0..=1.0).contains(&fold.test_accuracy));

        // Evaluate the fold checkpoint on the full manifest.
        cfg.out_dir = dir.path().join("eval").to_string_lossy().to_string();
        cfg.checkpoint = Some(fold.checkpoint.to_string_lossy().to_string());
        let eval = run_eval(&cfg).unwrap();
        assert!((0.0..=1.0).contains(&eval.accuracy));
        assert_eq!(eval.confusion.total() as usize, 18);
    }

    #[test]
    fn preprocess_writes_squares_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input");
        for (label, w, h) in [("a", 20usize, 12usize), ("a", 9, 16), ("b", 14, 14)] {
            let sub = input.join(label);
            std::fs::create_dir_all(&sub).unwrap();
            let mut rng = SeedRng::from_seed((w * h) as u64);
            let pixels: Vec<u8> = (0..w * h).map(|_| 150 + rng.range_usize(40) as u8).collect();
            let img = RawImage::new(w, h, 1, pixels).unwrap();
            save_png(&img, &sub.join(format!("{w}x{h}.png"))).unwrap();
        }
        let mut cfg = RunConfig::default();
        cfg.input_dir = Some(input.to_string_lossy().to_string());
        cfg.out_dir = dir.path().join("pp").to_string_lossy().to_string();
        cfg.working_size = 16;
        let out = run_preprocess(&cfg).unwrap();
        assert!(out.skipped.is_empty());
        let manifest = load_manifest(&out.manifest_path).unwrap();
        assert_eq!(manifest.len(), 3);
        for i in 0..manifest.len() {
            let img = load_image(&manifest.resolved_path(i)).unwrap();
            assert!(img.is_square(), "{:?} not square", manifest.records[i].path);
        }

        // Rerun into a second directory: byte-identical outputs.
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir.path().join("pp2").to_string_lossy().to_string();
        let out2 = run_preprocess(&cfg2).unwrap();
        let m2 = load_manifest(&out2.manifest_path).unwrap();
        for (i, j) in (0..manifest.len()).zip(0..m2.len()) {
            let a = std::fs::read(manifest.resolved_path(i)).unwrap();
            let b = std::fs::read(m2.resolved_path(j)).unwrap();
            assert_eq!(a, b);
        }
    }
}
