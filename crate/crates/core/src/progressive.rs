//! Progressive growing: a resolution schedule that doubles per stage, block
//! transfer from one stage's model to the next, and the stage training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aae::{sample_prior, AaeModel, AaeSpec, MbdConfig, OptState, PriorSpec};
use crate::data::{mean_pairwise_distance, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;

/// Hyperparameters shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgressiveHyper {
    pub latent_dim: usize,
    pub channels: usize,
    /// Filters of the first block; each later block doubles it up to `filter_cap`.
    pub filter_base: usize,
    pub filter_cap: usize,
    /// Discriminator hidden width is this times the stage index.
    pub width_per_stage: usize,
    /// Epochs per stage; the last entry repeats for longer plans.
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub batch_bounds: (usize, usize),
    /// Denoising corruption standard deviation.
    pub sigma: f64,
    /// Noise added to discriminator inputs; defaults to `sigma`.
    pub disc_noise: Option<f64>,
    pub mbd: MbdConfig,
    pub bn_momentum: f64,
    pub kernel_size: usize,
    pub conv_stride: usize,
    pub lr_autoencoder: f64,
    pub lr_discriminator: f64,
    pub lr_generator: f64,
    pub leaky_slope: f64,
    /// Images used for per-stage RMSE and transfer measurements.
    pub eval_images: usize,
    pub diversity_samples: usize,
    pub seed: u64,
}

impl Default for ProgressiveHyper {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            channels: 3,
            filter_base: 16,
            filter_cap: 128,
            width_per_stage: 500,
            epochs: vec![10],
            batch_size: 32,
            batch_bounds: (16, 64),
            sigma: 0.1,
            disc_noise: None,
            mbd: MbdConfig::default(),
            bn_momentum: 0.95,
            kernel_size: 3,
            conv_stride: 1,
            lr_autoencoder: 1e-3,
            lr_discriminator: 2e-4,
            lr_generator: 2e-4,
            leaky_slope: 0.2,
            eval_images: 256,
            diversity_samples: 64,
            seed: 0,
        }
    }
}

impl ProgressiveHyper {
    /// Scaled-down settings for 28x28 experiments on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            latent_dim: 16,
            filter_base: 8,
            filter_cap: 16,
            width_per_stage: 32,
            epochs: vec![6, 6, 10],
            ..Self::default()
        }
    }

    pub fn filters_for_level(&self, level: usize) -> usize {
        (self.filter_base << (level - 1).min(16)).min(self.filter_cap)
    }

    pub fn disc_noise(&self) -> f64 {
        self.disc_noise.unwrap_or(self.sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_index: usize,
    pub resolution: usize,
    pub blocks: usize,
    pub filters: Vec<usize>,
    pub disc_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub base_resolution: usize,
    pub target_resolution: usize,
    pub stages: Vec<StageConfig>,
}

/// Doubling schedule from `base_res` to `target_res`.
pub fn stage_plan(base_res: usize, target_res: usize, hyper: &ProgressiveHyper) -> Result<StagePlan> {
    if base_res < 2 || target_res < base_res || !target_res.is_multiple_of(base_res) || !(target_res / base_res).is_power_of_two()
    {
        return Err(Error::Config(format!(
            "target resolution {target_res} is not base {base_res} times a power of two"
        )));
    }
    let (lo, hi) = hyper.batch_bounds;
    if hyper.batch_size < lo || hyper.batch_size > hi {
        return Err(Error::Config(format!("batch size {} outside configured bounds {lo}..={hi}", hyper.batch_size)));
    }
    if hyper.epochs.is_empty() {
        return Err(Error::Config("epoch budget list is empty".into()));
    }
    let count = (target_res / base_res).trailing_zeros() as usize + 1;
    let stages = (1..=count)
        .map(|s| StageConfig {
            stage_index: s,
            resolution: base_res << (s - 1),
            blocks: s,
            filters: (1..=s).map(|l| hyper.filters_for_level(l)).collect(),
            disc_width: hyper.width_per_stage * s,
            epochs: hyper.epochs[(s - 1).min(hyper.epochs.len() - 1)],
            batch_size: hyper.batch_size,
        })
        .collect();
    Ok(StagePlan { base_resolution: base_res, target_resolution: target_res, stages })
}

/// Architecture of one stage's model.
pub fn stage_spec(cfg: &StageConfig, base_res: usize, hyper: &ProgressiveHyper) -> AaeSpec {
    AaeSpec {
        latent_dim: hyper.latent_dim,
        channels: hyper.channels,
        base_resolution: base_res,
        stage_index: cfg.stage_index,
        filters: cfg.filters.clone(),
        disc_width: cfg.disc_width,
        mbd: hyper.mbd,
        bn_momentum: hyper.bn_momentum,
        kernel_size: hyper.kernel_size,
        conv_stride: hyper.conv_stride,
        leaky_slope: hyper.leaky_slope,
        prior: PriorSpec::standard(hyper.latent_dim),
        score_context: cfg.batch_size.saturating_sub(1),
    }
}

/// Parts rebuilt for every stage: the image-facing adapters.
const FRESH_PARTS: [&str; 2] = ["from_rgb", "to_rgb"];

/// Builds stage `cfg` and, when `prev` is given, copies every encoder and
/// decoder part the two stages share. The discriminator and the 1x1
/// image adapters are always freshly initialized.
pub fn build_stage<R: Rng + ?Sized>(
    cfg: &StageConfig,
    base_res: usize,
    hyper: &ProgressiveHyper,
    prev: Option<&AaeModel>,
    rng: &mut R,
) -> Result<AaeModel> {
    match prev {
        None if cfg.stage_index != 1 => {
            return Err(Error::Config(format!("stage {} needs a previous model", cfg.stage_index)))
        }
        Some(p) if p.spec.stage_index + 1 != cfg.stage_index => {
            return Err(Error::Config(format!(
                "cannot grow stage {} into stage {}",
                p.spec.stage_index, cfg.stage_index
            )))
        }
        _ => {}
    }
    let mut model = AaeModel::new(stage_spec(cfg, base_res, hyper), rng)?;
    if let Some(prev) = prev {
        for (chain, old) in [(&mut model.encoder, &prev.encoder), (&mut model.decoder, &prev.decoder)] {
            for (name, part) in old.parts() {
                if FRESH_PARTS.contains(&name.as_str()) {
                    continue;
                }
                let target = chain
                    .part_mut(name)
                    .ok_or_else(|| Error::Config(format!("stage {} lacks part {name}", cfg.stage_index)))?;
                let lookup = |n: &str| part.named_state().into_iter().find(|(k, _)| k == n).map(|(_, t)| t.clone());
                target
                    .load_state(&lookup)
                    .map_err(|e| Error::Config(format!("part {name} cannot be transferred: {e}")))?;
            }
        }
    }
    Ok(model)
}

/// Names of encoder/decoder tensors carried over from `prev` into a model
/// grown from it.
pub fn shared_tensor_names(prev: &AaeModel) -> Vec<String> {
    let mut out = Vec::new();
    for (prefix, chain) in [("encoder", &prev.encoder), ("decoder", &prev.decoder)] {
        for (name, _) in chain.named_state() {
            let part = name.split('.').next().unwrap_or_default();
            if !FRESH_PARTS.contains(&part) {
                out.push(format!("{prefix}.{name}"));
            }
        }
    }
    out
}

/// Mean pairwise RMS distance among decodes of `count` prior draws.
pub fn diversity_metric<R: Rng + ?Sized>(m: &AaeModel, count: usize, rng: &mut R) -> Result<f64> {
    if count < 2 {
        return Err(Error::Invalid("diversity needs at least two samples".into()));
    }
    let codes = sample_prior(&m.spec.prior, count, rng);
    Ok(mean_pairwise_distance(&m.decode_batch(&codes)?))
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: usize,
    pub step: usize,
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage_index: usize,
    pub resolution: usize,
    pub param_count: usize,
    /// Reconstruction error of the freshly grown model, with outputs
    /// downsampled to the previous stage's resolution.
    pub transfer_rmse: Option<f64>,
    pub final_rmse: f64,
    pub recon_losses: Vec<f64>,
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
    pub diversity: f64,
    pub disc_accuracy: f64,
    pub seconds: f64,
}

/// Checkpoint file name for a stage.
pub fn stage_file_name(stage_index: usize, resolution: usize) -> String {
    format!("aae_s{stage_index}_r{resolution}.safetensors")
}

/// Trains every stage in `plan` in order. Per-stage checkpoints go to
/// `checkpoint_dir` when given; on divergence the last completed stage is
/// already persisted there and the error is returned.
pub fn train_progressive(
    dataset: &Dataset,
    plan: &StagePlan,
    hyper: &ProgressiveHyper,
    checkpoint_dir: Option<&Path>,
    on_metric: &mut dyn FnMut(&MetricRecord),
) -> Result<(AaeModel, Vec<StageMetrics>)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut prev: Option<AaeModel> = None;
    let mut prev_eval: Option<Vec<Image>> = None;
    let mut metrics = Vec::new();
    let eval_count = hyper.eval_images.min(dataset.len()).max(1);

    for cfg in &plan.stages {
        let started = std::time::Instant::now();
        let images: Vec<Image> = dataset.images.iter().map(|i| i.downscale(cfg.resolution, cfg.resolution)).collect();
        let eval = &images[..eval_count];
        let mut model = build_stage(cfg, plan.base_resolution, hyper, prev.as_ref(), &mut rng)?;
        let mut sm = StageMetrics {
            stage_index: cfg.stage_index,
            resolution: cfg.resolution,
            param_count: model.param_count(),
            ..StageMetrics::default()
        };
        if let Some(prev_imgs) = &prev_eval {
            let recon = model.reconstruct_batch(eval)?;
            let small: Vec<Image> =
                recon.iter().map(|r| r.downscale(prev_imgs[0].height(), prev_imgs[0].width())).collect();
            let v = crate::aae::rmse_between(prev_imgs, &small);
            sm.transfer_rmse = Some(v);
            on_metric(&MetricRecord { stage: cfg.stage_index, step: 0, name: "transfer_rmse".into(), value: v });
        }

        let mut opt = OptState::new(hyper.lr_autoencoder, hyper.lr_discriminator, hyper.lr_generator);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut step = 0;
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut rl, mut dl, mut gl, mut n) = (0.0, 0.0, 0.0, 0usize);
            for idx in order.chunks(cfg.batch_size) {
                // A batch of one gives degenerate batch-norm statistics.
                if idx.len() < 2 {
                    continue;
                }
                let batch: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
                let outcome = model.reconstruction_step(&batch, hyper.sigma, &mut opt, &mut rng).and_then(|r| {
                    let (d, g) = model.regularization_step(
                        &batch,
                        &model.spec.prior.clone(),
                        hyper.disc_noise(),
                        &mut opt,
                        &mut rng,
                    )?;
                    Ok((r, d, g))
                });
                let (r, d, g) = match outcome {
                    Ok(v) => v,
                    Err(e) => {
                        if let (Some(dir), Some(p)) = (checkpoint_dir, prev.as_ref()) {
                            p.to_checkpoint()?.save(&dir.join(stage_file_name(p.spec.stage_index, p.resolution())))?;
                        }
                        return Err(e);
                    }
                };
                step += 1;
                rl += r;
                dl += d;
                gl += g;
                n += 1;
                for (name, value) in [("recon_loss", r), ("d_loss", d), ("g_loss", g)] {
                    on_metric(&MetricRecord { stage: cfg.stage_index, step, name: name.into(), value });
                }
            }
            let n = n.max(1) as f64;
            sm.recon_losses.push(rl / n);
            sm.d_losses.push(dl / n);
            sm.g_losses.push(gl / n);
            log::info!(
                "stage {} ({}px) epoch {}: recon {:.4} d {:.4} g {:.4}",
                cfg.stage_index,
                cfg.resolution,
                sm.recon_losses.len(),
                rl / n,
                dl / n,
                gl / n
            );
        }

        sm.final_rmse = model.rmse(eval)?;
        sm.diversity = diversity_metric(&model, hyper.diversity_samples.max(2), &mut rng)?;
        let held_prior = sample_prior(&model.spec.prior, eval.len().min(64), &mut rng);
        let encoded = model.encode_batch(&eval[..eval.len().min(64)])?;
        sm.disc_accuracy = model.discriminator_accuracy(&held_prior, &encoded)?;
        sm.seconds = started.elapsed().as_secs_f64();
        for (name, value) in [("rmse", sm.final_rmse), ("diversity", sm.diversity), ("disc_accuracy", sm.disc_accuracy)]
        {
            on_metric(&MetricRecord { stage: cfg.stage_index, step, name: name.into(), value });
        }
        if let Some(dir) = checkpoint_dir {
            model.to_checkpoint()?.save(&dir.join(stage_file_name(cfg.stage_index, cfg.resolution)))?;
        }
        prev_eval = Some(eval.to_vec());
        metrics.push(sm);
        prev = Some(model);
    }
    let model = prev.ok_or_else(|| Error::Config("stage plan is empty".into()))?;
    Ok((model, metrics))
}

/// Paths of the per-stage checkpoints a plan produces under `dir`.
pub fn stage_paths(plan: &StagePlan, dir: &Path) -> Vec<PathBuf> {
    plan.stages.iter().map(|s| dir.join(stage_file_name(s.stage_index, s.resolution))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_plan() {
        let plan = stage_plan(7, 224, &ProgressiveHyper::default()).unwrap();
        let res: Vec<usize> = plan.stages.iter().map(|s| s.resolution).collect();
        let widths: Vec<usize> = plan.stages.iter().map(|s| s.disc_width).collect();
        assert_eq!(res, vec![7, 14, 28, 56, 112, 224]);
        assert_eq!(widths, vec![500, 1000, 1500, 2000, 2500, 3000]);
        assert_eq!(plan.stages[5].filters, vec![16, 32, 64, 128, 128, 128]);
    }

    #[test]
    fn plan_edge_cases() {
        let h = ProgressiveHyper::default();
        assert_eq!(stage_plan(7, 7, &h).unwrap().stages.len(), 1);
        let res: Vec<usize> = stage_plan(7, 28, &h).unwrap().stages.iter().map(|s| s.resolution).collect();
        assert_eq!(res, vec![7, 14, 28]);
        assert!(matches!(stage_plan(7, 21, &h), Err(Error::Config(_))));
        assert!(matches!(stage_plan(7, 42, &h), Err(Error::Config(_))));
        let bad = ProgressiveHyper { batch_size: 128, ..h };
        assert!(matches!(stage_plan(7, 28, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn build_stage_checks_lineage() {
        let h = ProgressiveHyper {
            latent_dim: 4,
            filter_base: 2,
            filter_cap: 4,
            width_per_stage: 4,
            ..ProgressiveHyper::default()
        };
        let plan = stage_plan(4, 16, &h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_stage(&plan.stages[1], 4, &h, None, &mut rng).is_err());
        let s1 = build_stage(&plan.stages[0], 4, &h, None, &mut rng).unwrap();
        assert!(build_stage(&plan.stages[2], 4, &h, Some(&s1), &mut rng).is_err());
        let s2 = build_stage(&plan.stages[1], 4, &h, Some(&s1), &mut rng).unwrap();
        assert!(s2.autoencoder_param_count() > s1.autoencoder_param_count());
    }
}
