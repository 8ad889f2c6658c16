//! The training loop: per-mode forward, combined loss, gradient
//! accumulation, AdamW with per-group warmup + poly decay, EMA weights for
//! evaluation, and deterministic JSONL metrics.

use std::path::Path;

use serde::Serialize;

use super::config::{Mode, PolicyObjective, RunConfig};
use super::optim::{AdamW, Ema, LrSchedule};
use super::HarnessError;
use crate::data::{augment, normalize, Dataset, Sample, Split};
use crate::model::{Model, ModelMode};
use crate::pruning::{
    informed_policy_loss, make_target, pruned_forward_train, ratio_loss, PruneSchedule,
    TrainFwdOpts,
};
use crate::rng::Rng;
use crate::routing::{sample_route, RouteMode};
use crate::seg::{evaluate, head_forward, seg_loss, EvalReport, SegLogits};
use crate::tensor::Tensor;
use crate::tome::tome_block_forward;
use crate::vit::block_core;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_ap: f64,
    pub lr_head: f32,
    pub lr_backbone: f32,
}

pub struct TrainOutcome {
    /// Raw trained weights.
    pub model: Model,
    /// EMA weights used for evaluation, in parameter order.
    pub ema_weights: Vec<Vec<f32>>,
    pub metrics: Vec<MetricsRecord>,
}

impl TrainOutcome {
    /// Model with the EMA weights swapped in.
    pub fn ema_model(&self, cfg: &RunConfig) -> Result<Model, HarnessError> {
        let mut rng = Rng::new(0, 0);
        let mut m = Model::init(
            cfg.backbone_config(),
            &Model::default_aux_blocks(cfg.depth),
            &mut rng,
        )?;
        m.set_param_data(&self.ema_weights);
        Ok(m)
    }
}

/// Inference mode matching a run config (route modes prune at inference;
/// routing itself is train-only).
pub fn infer_mode(cfg: &RunConfig) -> Result<ModelMode, HarnessError> {
    Ok(match cfg.mode {
        Mode::Dense => ModelMode::Dense,
        Mode::Prune | Mode::PruneFixedRoute | Mode::PruneRandomRoute => {
            ModelMode::Prune(cfg.schedule()?)
        }
        Mode::TomeMhsa | Mode::TomeMhsaMlp => ModelMode::ToMe {
            scope: cfg.mode.tome_scope().expect("tome mode"),
            fraction: cfg.merge_fraction,
        },
    })
}

/// Dense training forward (no policy) with tap collection.
fn dense_train_forward(
    model: &Model,
    image: &Tensor,
    taps: &[usize],
) -> crate::tensor::Result<(Tensor, Vec<(usize, Tensor)>)> {
    let mut x = crate::vit::patch_embed(image, &model.backbone.patch, &model.backbone.cfg)?;
    let mut taps_out = Vec::new();
    for (b, block) in model.backbone.blocks.iter().enumerate() {
        x = block_core(&x, None, None, block, model.backbone.cfg.heads)?;
        if taps.contains(&b) {
            taps_out.push((b, x.clone()));
        }
    }
    Ok((x, taps_out))
}

/// ToMe training forward with tap collection.
fn tome_train_forward(
    model: &Model,
    image: &Tensor,
    merge_fraction: f32,
    scope: crate::tome::ToMeScope,
    taps: &[usize],
) -> crate::tensor::Result<(Tensor, Vec<(usize, Tensor)>)> {
    let n = model.backbone.cfg.n_tokens();
    let r = crate::tome::merge_count(n, merge_fraction);
    let mut x = crate::vit::patch_embed(image, &model.backbone.patch, &model.backbone.cfg)?;
    let mut taps_out = Vec::new();
    for (b, block) in model.backbone.blocks.iter().enumerate() {
        x = tome_block_forward(&x, r, scope, block, model.backbone.cfg.heads)?;
        if taps.contains(&b) {
            taps_out.push((b, x.clone()));
        }
    }
    Ok((x, taps_out))
}

struct ImageLoss {
    loss: Tensor,
}

/// Forward + loss for one training image.
fn image_loss(
    cfg: &RunConfig,
    model: &Model,
    schedule: Option<&PruneSchedule>,
    sample: &Sample,
    rng: &mut Rng,
) -> Result<ImageLoss, HarnessError> {
    let x = normalize(&sample.image);
    let grid = model.backbone.cfg.grid();
    let hw = model.backbone.cfg.image_hw;
    let aux_blocks = model.aux_blocks();

    let (final_tokens, taps, policies) = match cfg.mode {
        Mode::Dense => {
            let (f, t) = dense_train_forward(model, &x, &aux_blocks)?;
            (f, t, Vec::new())
        }
        Mode::TomeMhsa | Mode::TomeMhsaMlp => {
            let scope = cfg.mode.tome_scope().expect("tome mode");
            let (f, t) = tome_train_forward(model, &x, cfg.merge_fraction, scope, &aux_blocks)?;
            (f, t, Vec::new())
        }
        Mode::Prune | Mode::PruneFixedRoute | Mode::PruneRandomRoute => {
            let schedule = schedule.expect("prune modes carry a schedule");
            let route = match cfg.mode {
                Mode::PruneFixedRoute => Some(sample_route(
                    cfg.depth,
                    model.backbone.cfg.n_tokens(),
                    cfg.route_fraction,
                    RouteMode::Fixed,
                    rng,
                )?),
                Mode::PruneRandomRoute => Some(sample_route(
                    cfg.depth,
                    model.backbone.cfg.n_tokens(),
                    cfg.route_fraction,
                    RouteMode::Random,
                    rng,
                )?),
                _ => None,
            };
            let opts = TrainFwdOpts {
                temperature: cfg.gumbel_temperature,
                mask_in_route_span: cfg.mask_in_route_span,
                taps: &aux_blocks,
            };
            let out = pruned_forward_train(
                &model.backbone,
                &model.predictor,
                schedule,
                &x,
                rng,
                route.as_ref(),
                &opts,
            )?;
            (out.final_tokens, out.taps, out.policies)
        }
    };

    // Main head + equally weighted auxiliary heads.
    let logits = head_forward(&final_tokens, &model.head, grid, hw)?;
    let mut total = seg_loss(&logits, &sample.mask)?;
    for (b, tokens) in &taps {
        if let Some(head) = model.aux_head(*b) {
            let aux_logits: SegLogits = head_forward(tokens, head, grid, hw)?;
            total = total.add(&seg_loss(&aux_logits, &sample.mask)?)?;
        }
    }

    // Policy objective (prune modes): ratio or informed, per config.
    if cfg.mode.is_prune() && !policies.is_empty() {
        let schedule = schedule.expect("prune modes carry a schedule");
        let policy_term = match cfg.policy {
            PolicyObjective::Ratio => ratio_loss(&[policies], schedule)?,
            PolicyObjective::Informed => {
                let target = make_target(&sample.mask, grid)?;
                let stage_logits: Vec<Tensor> =
                    policies.iter().map(|p| p.logits.clone()).collect();
                informed_policy_loss(&[stage_logits], &[target], cfg.lambda_pol)?
            }
        };
        total = total.add(&policy_term)?;
    }

    Ok(ImageLoss { loss: total })
}

/// Train a model on the dataset's train split. When `out_dir` is given,
/// writes `metrics.jsonl`, `config.cfg`, and `ckpt/` + `ckpt_ema/`
/// checkpoint directories.
pub fn train_loop(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    train_loop_from(cfg, dataset, None, out_dir)
}

/// [`train_loop`] with an optional warm start: `init_weights` (a parameter
/// snapshot in traversal order) replaces the random init, so every
/// token-reduction mode can fine-tune from one shared dense checkpoint.
pub fn train_loop_from(
    cfg: &RunConfig,
    dataset: &Dataset,
    init_weights: Option<&[Vec<f32>]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    let train: Vec<Sample> = dataset.split(Split::Train);
    let val: Vec<Sample> = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(HarnessError::Train("empty train split".into()));
    }

    let mut init_rng = Rng::new(cfg.seed, 1);
    let mut model = Model::init(
        cfg.backbone_config(),
        &Model::default_aux_blocks(cfg.depth),
        &mut init_rng,
    )?;
    if let Some(snapshot) = init_weights {
        model.set_param_data(snapshot);
    }
    let schedule = if cfg.mode.is_prune() {
        Some(cfg.schedule()?)
    } else {
        None
    };

    let micro = cfg.batch_size;
    let step_images = micro * cfg.grad_accum;
    let steps_per_epoch = train.len().div_ceil(step_images);
    let total_steps = steps_per_epoch * cfg.epochs;
    let head_sched = LrSchedule {
        base_lr: cfg.lr,
        warmup: cfg.warmup_head,
        total_steps,
        power: cfg.poly_power,
    };
    let backbone_sched = LrSchedule {
        base_lr: cfg.lr,
        warmup: cfg.warmup_backbone,
        total_steps,
        power: cfg.poly_power,
    };
    let mut opt = AdamW::new(&mut model, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.llrd);
    let mut ema = Ema::new(&mut model, cfg.ema_decay);

    let mut shuffle_rng = Rng::new(cfg.seed, 2);
    let mut aug_rng = Rng::new(cfg.seed, 3);
    let mut fwd_rng = Rng::new(cfg.seed, 4);

    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for chunk in order.chunks(step_images) {
            let scale = 1.0 / chunk.len() as f32;
            for &si in chunk {
                let sample = if cfg.augment {
                    augment(&train[si], &mut aug_rng)
                } else {
                    train[si].clone()
                };
                let il = image_loss(cfg, &model, schedule.as_ref(), &sample, &mut fwd_rng)
                    .map_err(|e| HarnessError::Train(format!("step {step}: {e}")))?;
                let v = il.loss.item() as f64;
                if !v.is_finite() {
                    return Err(HarnessError::Train(format!("step {step}: non-finite loss")));
                }
                loss_sum += v;
                loss_count += 1;
                il.loss
                    .scale(scale)
                    .and_then(|l| l.backward())
                    .map_err(|e| HarnessError::Train(format!("step {step}: {e}")))?;
            }
            let lr_h = head_sched.at(step);
            let lr_b = backbone_sched.at(step);
            opt.step(&mut model, lr_h, lr_b);
            ema.update(&mut model);
            model.visit_params(&mut |_, t| t.zero_grad());
            step += 1;
        }

        // Validation with EMA weights.
        let (val_dice, val_ap) = if val.is_empty() {
            (0.0, 0.0)
        } else {
            let mut eval_model = Model::init(
                cfg.backbone_config(),
                &Model::default_aux_blocks(cfg.depth),
                &mut Rng::new(0, 0),
            )?;
            eval_model.set_param_data(ema.weights());
            let normalized: Vec<Sample> = val
                .iter()
                .map(|s| Sample {
                    image: normalize(&s.image),
                    ..s.clone()
                })
                .collect();
            let report = evaluate(&eval_model, &infer_mode(cfg)?, &normalized)?;
            (report.dice, report.ap)
        };
        metrics.push(MetricsRecord {
            epoch,
            step,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_dice,
            val_ap,
            lr_head: head_sched.at(step),
            lr_backbone: backbone_sched.at(step),
        });
    }

    let outcome = TrainOutcome {
        model,
        ema_weights: ema.weights().to_vec(),
        metrics,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.cfg"), cfg.dump())?;
        let mut jsonl = String::new();
        for m in &outcome.metrics {
            jsonl.push_str(&serde_json::to_string(m)?);
            jsonl.push('\n');
        }
        std::fs::write(dir.join("metrics.jsonl"), jsonl)?;
        let mut model = outcome.model;
        model.save_checkpoint(&dir.join("ckpt"))?;
        let mut ema_model = Model::init(
            cfg.backbone_config(),
            &Model::default_aux_blocks(cfg.depth),
            &mut Rng::new(0, 0),
        )?;
        ema_model.set_param_data(&outcome.ema_weights);
        ema_model.save_checkpoint(&dir.join("ckpt_ema"))?;
        return Ok(TrainOutcome {
            model,
            ema_weights: outcome.ema_weights,
            metrics: outcome.metrics,
        });
    }
    Ok(outcome)
}

/// Evaluate a model (usually EMA weights) on a dataset split with
/// ImageNet-normalized inputs.
pub fn eval_split(
    model: &Model,
    mode: &ModelMode,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalReport, HarnessError> {
    let samples: Vec<Sample> = dataset
        .split(split)
        .iter()
        .map(|s| Sample {
            image: normalize(&s.image),
            ..s.clone()
        })
        .collect();
    Ok(evaluate(model, mode, &samples)?)
}
