//! Fine-tuning: pretrained encoder plus a bottleneck classification head,
//! trained with label-smoothed cross-entropy.

use crate::ckpt::{config_diff, Checkpoint};
use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::nn::{Encoder, LayerNorm, Linear, ParamSet};
use crate::optim::AdamW;
use crate::rng::SeedRng;
use crate::tensor::{Element, GradGraph, Tensor};

pub const DEFAULT_HIDDEN: usize = 512;

/// Encoder with the decoder discarded and a bottleneck head on the
/// classification token: LN → hidden → GELU → logits.
pub struct FinetuneModel<E: Element> {
    pub model_cfg: MaeConfig,
    pub encoder: Encoder<E>,
    pub head_norm: LayerNorm<E>,
    pub head_fc1: Linear<E>,
    pub head_fc2: Linear<E>,
    pub num_labels: usize,
    pub hidden: usize,
}

impl<E: Element> FinetuneModel<E> {
    /// Fresh model with a randomly initialized encoder (scratch baseline).
    pub fn init(
        cfg: &MaeConfig,
        num_labels: usize,
        hidden: usize,
        drop_path_rate: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::invalid(
                "finetune_model",
                format!("need at least 2 labels, got {num_labels}"),
            ));
        }
        let encoder = Encoder::init(cfg.encoder_config(drop_path_rate)?, rng)?;
        let dim = cfg.enc_dim;
        Ok(FinetuneModel {
            model_cfg: cfg.clone(),
            encoder,
            head_norm: LayerNorm::init(dim),
            head_fc1: Linear::init(dim, hidden, rng),
            head_fc2: Linear::init(hidden, num_labels, rng),
            num_labels,
            hidden,
        })
    }

    /// Logits for one patchified image: full unmasked token sequence →
    /// classification-token feature → LN → hidden → GELU → logits (1×K).
    pub fn forward_one(
        &self,
        g: &mut GradGraph<E>,
        patches: &Tensor<E>,
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        let tokens = self.encoder.forward_full(g, patches, train_mode, rng)?;
        let cls = g.select_rows(&tokens, &[0])?;
        let normed = self.head_norm.forward(g, &cls)?;
        let hidden = self.head_fc1.forward(g, &normed)?;
        let act = g.gelu(&hidden);
        self.head_fc2.forward(g, &act)
    }

    /// Logits for a batch of patchified images (B×K).
    pub fn forward_batch(
        &self,
        g: &mut GradGraph<E>,
        batch: &[Tensor<E>],
        train_mode: bool,
        rng: &mut SeedRng,
    ) -> Result<Tensor<E>> {
        if batch.is_empty() {
            return Err(Error::invalid("classify_forward", "empty batch".to_string()));
        }
        let rows: Vec<Tensor<E>> = batch
            .iter()
            .map(|p| self.forward_one(g, p, train_mode, rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<E>> = rows.iter().collect();
        g.concat_rows(&refs)
    }

    /// Predicted label of one image under the deterministic eval path.
    pub fn predict_one(&self, patches: &Tensor<E>) -> Result<usize> {
        let mut g = GradGraph::inference();
        let mut rng = SeedRng::from_seed(0); // unused: no drop path at eval
        let logits = self.forward_one(&mut g, patches, false, &mut rng)?;
        let data = logits.data();
        let mut best = 0usize;
        for k in 1..self.num_labels {
            if data[k] > data[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Named parameters: encoder first, then the head.
    pub fn params(&self) -> ParamSet<E> {
        let mut params = ParamSet::new();
        self.encoder.register(&mut params, "encoder");
        self.head_norm.register(&mut params, "head.norm");
        self.head_fc1.register(&mut params, "head.fc1");
        self.head_fc2.register(&mut params, "head.fc2");
        params
    }

    /// Encoder parameters only (the part carried over from pretraining).
    pub fn encoder_params(&self) -> ParamSet<E> {
        let mut params = ParamSet::new();
        self.encoder.register(&mut params, "encoder");
        params
    }
}

/// Builds a fine-tuning model from a pretraining checkpoint: encoder weights
/// are loaded verbatim, the decoder is discarded, and a freshly initialized
/// head is attached. With `scratch` the architecture still comes from the
/// checkpoint but every weight is randomly initialized.
pub fn build_finetune_model(
    ckpt: &Checkpoint,
    num_labels: usize,
    hidden: usize,
    drop_path_rate: f64,
    scratch: bool,
    rng: &mut SeedRng,
) -> Result<FinetuneModel<f32>> {
    let cfg = ckpt.header.model.clone();
    let model = FinetuneModel::init(&cfg, num_labels, hidden, drop_path_rate, rng)?;
    if !scratch {
        ckpt.load_into(&model.encoder_params())?;
    }
    Ok(model)
}

/// Verifies that a checkpoint's architecture matches the one the data
/// pipeline expects; returns the structured diff on mismatch.
pub fn ensure_config_compatible(ckpt: &Checkpoint, expected: &MaeConfig) -> Result<()> {
    let diff = config_diff(&ckpt.header.model, expected);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(diff))
    }
}

/// Label-smoothed cross-entropy over a batch of logits (B×K): the target
/// distribution puts `1−ε+ε/K` on the true label and `ε/K` elsewhere; the
/// loss is the mean over the batch of `−Σ_k q_k · log p_k` with a stable
/// log-softmax.
pub fn label_smoothed_cross_entropy<E: Element>(
    g: &mut GradGraph<E>,
    logits: &Tensor<E>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(
            "label_smoothed_cross_entropy",
            format!("epsilon {epsilon} outside [0,1)"),
        ));
    }
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape(
            "label_smoothed_cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (b, k) = (logits.rows(), logits.cols());
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "label_smoothed_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let off = epsilon / k as f64;
    let on = 1.0 - epsilon + off;
    let mut target = vec![E::from_f64(off); b * k];
    for (i, &l) in labels.iter().enumerate() {
        target[i * k + l] = E::from_f64(on);
    }
    let target = Tensor::new(target, &[b, k], false)?;
    let logp = g.log_softmax(logits, 1)?;
    let weighted = g.mul(&logp, &target)?;
    let total = g.sum_all(&weighted);
    Ok(g.scale(&total, E::from_f64(-1.0 / b as f64)))
}

/// One supervised update over a batch of (patchified image, label) pairs
/// with per-group learning rates already installed in the optimizer.
/// Returns the batch loss.
pub fn finetune_step(
    model: &FinetuneModel<f32>,
    batch: &[Tensor<f32>],
    labels: &[usize],
    epsilon: f64,
    optimizer: &mut AdamW,
    lr: f32,
    rng: &mut SeedRng,
) -> Result<f32> {
    if batch.len() != labels.len() || batch.is_empty() {
        return Err(Error::invalid(
            "finetune_step",
            format!("batch of {} images vs {} labels", batch.len(), labels.len()),
        ));
    }
    optimizer.zero_grads();
    let mut g = GradGraph::new();
    let logits = model.forward_batch(&mut g, batch, true, rng)?;
    let loss = label_smoothed_cross_entropy(&mut g, &logits, labels, epsilon)?;
    g.backward(&loss)?;
    optimizer.step(lr)?;
    Ok(loss.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckpt::CheckpointHeader;
    use crate::mae::MaeModel;
    use crate::optim::{decays_weight, ADAMW_EPS};

    fn rng() -> SeedRng {
        SeedRng::from_seed(31)
    }

    fn tiny_finetune() -> FinetuneModel<f64> {
        let mut r = rng();
        FinetuneModel::init(&MaeConfig::tiny(), 5, 32, 0.0, &mut r).unwrap()
    }

    fn random_patches(r: &mut SeedRng) -> Tensor<f64> {
        Tensor::new((0..16 * 64).map(|_| r.normal()).collect(), &[16, 64], false).unwrap()
    }

    #[test]
    fn logits_shape_is_labels_wide() {
        let model = tiny_finetune();
        let mut r = rng();
        let batch = vec![random_patches(&mut r), random_patches(&mut r)];
        let mut g = GradGraph::inference();
        let logits = model.forward_batch(&mut g, &batch, false, &mut r).unwrap();
        assert_eq!(logits.shape(), [2, 5]);
    }

    #[test]
    fn zeroed_head_emits_bias_everywhere() {
        let model = tiny_finetune();
        model.head_fc2.weight.data_mut().fill(0.0);
        {
            let mut b = model.head_fc2.bias.data_mut();
            for (i, v) in b.iter_mut().enumerate() {
                *v = i as f64 * 0.5;
            }
        }
        let mut r = rng();
        let patches = random_patches(&mut r);
        let mut g = GradGraph::inference();
        let logits = model.forward_one(&mut g, &patches, false, &mut r).unwrap();
        for (i, v) in logits.data().iter().enumerate() {
            assert_eq!(*v, i as f64 * 0.5);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut r = rng();
        let model = FinetuneModel::<f64>::init(&MaeConfig::tiny(), 4, 32, 0.7, &mut r).unwrap();
        let patches = random_patches(&mut r);
        let mut g = GradGraph::inference();
        // Different RNGs on purpose: eval mode must not consume randomness.
        let a = model
            .forward_one(&mut g, &patches, false, &mut SeedRng::from_seed(1))
            .unwrap();
        let b = model
            .forward_one(&mut g, &patches, false, &mut SeedRng::from_seed(999))
            .unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn smoothing_uniform_logits_cost_ln_k() {
        let mut g = GradGraph::<f64>::new();
        for epsilon in [0.0, 0.1, 0.5] {
            let logits = Tensor::new(vec![0.7; 8], &[2, 4], false).unwrap();
            let loss = label_smoothed_cross_entropy(&mut g, &logits, &[0, 3], epsilon).unwrap();
            assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12, "ε={epsilon}");
        }
    }

    #[test]
    fn smoothing_zero_epsilon_and_confident_prediction_is_zero_loss() {
        let mut g = GradGraph::<f64>::new();
        // Extremely peaked logits ≈ probability 1 on the true label.
        let logits = Tensor::new(vec![100.0, 0.0, 0.0, 0.0], &[1, 4], false).unwrap();
        let loss = label_smoothed_cross_entropy(&mut g, &logits, &[0], 0.0).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn smoothing_hand_formula() {
        // K=4, ε=0.1, logits [2,0,0,0], true label 0.
        let mut g = GradGraph::<f64>::new();
        let logits = Tensor::new(vec![2.0, 0.0, 0.0, 0.0], &[1, 4], false).unwrap();
        let loss = label_smoothed_cross_entropy(&mut g, &logits, &[0], 0.1).unwrap();
        let z: f64 = (2.0f64).exp() + 3.0;
        let logp0 = 2.0 - z.ln();
        let logp_other = -z.ln();
        let expected = -(0.925 * logp0 + 0.025 * 3.0 * logp_other);
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothing_is_shift_invariant() {
        let mut g = GradGraph::<f64>::new();
        let logits = Tensor::new(vec![1.2, -0.3, 0.8, 2.2, 0.0, -1.0], &[2, 3], false).unwrap();
        let shifted = Tensor::new(
            logits.to_vec().iter().map(|v| v + 50.0).collect::<Vec<_>>(),
            &[2, 3],
            false,
        )
        .unwrap();
        let a = label_smoothed_cross_entropy(&mut g, &logits, &[2, 0], 0.1).unwrap();
        let b = label_smoothed_cross_entropy(&mut g, &shifted, &[2, 0], 0.1).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-6);
    }

    #[test]
    fn smoothing_epsilon_zero_is_plain_cross_entropy() {
        let mut g = GradGraph::<f64>::new();
        let logits = Tensor::new(vec![0.4, 1.3, -0.9, 0.1, 0.0, 2.0], &[2, 3], false).unwrap();
        let loss = label_smoothed_cross_entropy(&mut g, &logits, &[1, 2], 0.0).unwrap();
        // Hand-computed plain CE.
        let ce = |row: &[f64], label: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            -(row[label] - m - z.ln())
        };
        let expected = (ce(&[0.4, 1.3, -0.9], 1) + ce(&[0.1, 0.0, 2.0], 2)) / 2.0;
        assert!((loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothing_rejects_bad_labels_and_epsilon() {
        let mut g = GradGraph::<f64>::new();
        let logits = Tensor::new(vec![0.0; 4], &[1, 4], false).unwrap();
        assert!(label_smoothed_cross_entropy(&mut g, &logits, &[4], 0.1).is_err());
        assert!(label_smoothed_cross_entropy(&mut g, &logits, &[0], 1.0).is_err());
    }

    #[test]
    fn build_from_checkpoint_roundtrips_encoder_bytes() {
        let mut r = rng();
        let mae = MaeModel::<f32>::init(MaeConfig::tiny(), &mut r).unwrap();
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                kind: "pretrain".to_string(),
                model: MaeConfig::tiny(),
                num_labels: None,
                head_hidden: None,
                epoch: 0,
                seed: 1,
                optimizer_step: None,
            },
            tensors: Checkpoint::collect_params(&mae.params()),
        };
        let mut r2 = SeedRng::from_seed(99);
        let ft = build_finetune_model(&ckpt, 15, 64, 0.2, false, &mut r2).unwrap();
        assert_eq!(ft.head_fc2.bias.numel(), 15);
        // Encoder parameter bytes identical to the checkpoint.
        for (name, tensor) in ft.encoder_params().iter() {
            let stored = ckpt.get(name).unwrap();
            let a: Vec<u32> = tensor.to_vec().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = stored.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name} changed during load");
        }
        // Decoder parameters are gone.
        assert!(ft.params().iter().all(|(n, _)| !n.starts_with("decoder.")));
        // Drop-path rate installed on every block.
        assert!(ft.encoder.blocks.iter().all(|b| b.cfg.drop_path_rate == 0.2));

        // Scratch mode: same architecture, different weights.
        let mut r3 = SeedRng::from_seed(7);
        let scratch = build_finetune_model(&ckpt, 15, 64, 0.2, true, &mut r3).unwrap();
        let any_differs = scratch
            .encoder_params()
            .iter()
            .any(|(name, t)| ckpt.get(name).map(|s| s.data != t.to_vec()).unwrap_or(true));
        assert!(any_differs, "scratch init should not match checkpoint weights");
    }

    #[test]
    fn config_compatibility_reports_diff() {
        let mut r = rng();
        let mae = MaeModel::<f32>::init(MaeConfig::tiny(), &mut r).unwrap();
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                kind: "pretrain".to_string(),
                model: MaeConfig::tiny(),
                num_labels: None,
                head_hidden: None,
                epoch: 0,
                seed: 1,
                optimizer_step: None,
            },
            tensors: Checkpoint::collect_params(&mae.params()),
        };
        assert!(ensure_config_compatible(&ckpt, &MaeConfig::tiny()).is_ok());
        let mut other = MaeConfig::tiny();
        other.patch_size = 4;
        other.image_size = 16;
        let err = ensure_config_compatible(&ckpt, &other).unwrap_err().to_string();
        assert!(err.contains("patch_size"), "{err}");
    }

    #[test]
    fn zero_lr_step_leaves_parameters_unchanged() {
        let mut r = rng();
        let model = FinetuneModel::<f32>::init(&MaeConfig::tiny(), 3, 16, 0.0, &mut r).unwrap();
        let params = model.params();
        let before: Vec<Vec<f32>> = params.tensors().map(|t| t.to_vec()).collect();
        let mut opt = AdamW::new(0.9, 0.999, ADAMW_EPS);
        opt.add_param_set(&params, |name, shape| {
            (1.0, if decays_weight(name, shape) { 0.01 } else { 0.0 })
        });
        let batch: Vec<Tensor<f32>> = (0..2)
            .map(|_| {
                Tensor::new((0..16 * 64).map(|_| r.normal() as f32).collect(), &[16, 64], false)
                    .unwrap()
            })
            .collect();
        finetune_step(&model, &batch, &[0, 2], 0.1, &mut opt, 0.0, &mut r).unwrap();
        let after: Vec<Vec<f32>> = params.tensors().map(|t| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn finetune_step_same_seed_same_parameters() {
        let run = || {
            let mut r = SeedRng::from_seed(5);
            let model = FinetuneModel::<f32>::init(&MaeConfig::tiny(), 3, 16, 0.2, &mut r).unwrap();
            let mut opt = AdamW::new(0.9, 0.999, ADAMW_EPS);
            opt.add_param_set(&model.params(), |_, _| (1.0, 0.0));
            let batch: Vec<Tensor<f32>> = (0..2)
                .map(|_| {
                    Tensor::new(
                        (0..16 * 64).map(|_| r.normal() as f32).collect(),
                        &[16, 64],
                        false,
                    )
                    .unwrap()
                })
                .collect();
            let mut drop_rng = SeedRng::from_seed(11);
            finetune_step(&model, &batch, &[0, 2], 0.1, &mut opt, 1e-3, &mut drop_rng).unwrap();
            model
                .params()
                .tensors()
                .flat_map(|t| t.to_vec())
                .map(|v| v.to_bits())
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }
}
