//! AdamW with decoupled weight decay, layer-wise learning-rate decay,
//! two-stage warmup + polynomial decay schedules, and an exponential
//! moving average of the weights.
//!
//! Parameters split into two groups by name: `backbone.*` versus everything
//! else (heads and predictor), each with its own warmup length. LLRD
//! multiplies a backbone block's learning rate by `llrd^(L-1-block)`; the
//! patch embedding sits below block 0 with `llrd^L`.

use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Head,
    Backbone,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("backbone.") {
        ParamGroup::Backbone
    } else {
        ParamGroup::Head
    }
}

/// Per-parameter learning-rate multiplier from layer-wise decay.
pub fn llrd_multiplier(name: &str, depth: usize, llrd: f32) -> f32 {
    if let Some(rest) = name.strip_prefix("backbone.blocks.") {
        if let Some(block) = rest.split('.').next().and_then(|b| b.parse::<usize>().ok()) {
            return llrd.powi((depth - 1 - block) as i32);
        }
    }
    if name.starts_with("backbone.patch.") {
        return llrd.powi(depth as i32);
    }
    1.0
}

/// Linear warmup to the base rate, then polynomial decay to zero at
/// `total_steps`. The rate is 0 at step 0 and 0 at the end.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup: usize,
    pub total_steps: usize,
    pub power: f32,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f32 {
        if self.total_steps == 0 {
            return 0.0;
        }
        if self.warmup > 0 && step < self.warmup {
            return self.base_lr * step as f32 / self.warmup as f32;
        }
        let total = self.total_steps.max(self.warmup + 1);
        let remaining = (total - step.min(total)) as f32 / (total - self.warmup) as f32;
        self.base_lr * remaining.powf(self.power)
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    group: ParamGroup,
    lr_mult: f32,
    decay: bool,
}

pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: usize,
    slots: Vec<Slot>,
}

/// Biases, norm gains/offsets and layer scales are excluded from weight
/// decay.
fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !matches!(leaf, "bias" | "gamma" | "beta" | "ls" | "ls1" | "ls2" | "rms_gamma")
        && !leaf.starts_with("b_")
}

impl AdamW {
    pub fn new(model: &mut Model, beta1: f32, beta2: f32, weight_decay: f32, llrd: f32) -> AdamW {
        let depth = model.backbone.cfg.depth;
        let mut slots = Vec::new();
        model.visit_params(&mut |name, t| {
            slots.push(Slot {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                group: group_of(&name),
                lr_mult: llrd_multiplier(&name, depth, llrd),
                decay: decays(&name),
            });
        });
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            slots,
        }
    }

    /// One update with the given per-group learning rates. Missing
    /// gradients count as zero. Gradients are cleared afterwards.
    pub fn step(&mut self, model: &mut Model, lr_head: f32, lr_backbone: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        model.visit_params(&mut |_, param| {
            let slot = &mut self.slots[i];
            i += 1;
            let lr = match slot.group {
                ParamGroup::Head => lr_head,
                ParamGroup::Backbone => lr_backbone,
            } * slot.lr_mult;
            let grad = param.grad();
            let g = grad.as_deref().unwrap_or(&[]);
            let mut data = param.data().to_vec();
            for (j, w) in data.iter_mut().enumerate() {
                let gj = g.get(j).copied().unwrap_or(0.0);
                slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * gj;
                slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * gj * gj;
                let mhat = slot.m[j] / bc1;
                let vhat = slot.v[j] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if slot.decay {
                    upd += wd * *w;
                }
                *w -= lr * upd;
            }
            let shape = param.shape().to_vec();
            *param = crate::tensor::Tensor::param(data, shape);
        });
        debug_assert_eq!(i, self.slots.len());
    }
}

/// Exponential moving average of all parameters, seeded from the initial
/// weights: after one step the shadow is d·w0 + (1-d)·w1.
pub struct Ema {
    pub decay: f32,
    shadow: Vec<Vec<f32>>,
}

impl Ema {
    pub fn new(model: &mut Model, decay: f32) -> Ema {
        Ema {
            decay,
            shadow: model.param_data(),
        }
    }

    pub fn update(&mut self, model: &mut Model) {
        let d = self.decay;
        let mut i = 0;
        model.visit_params(&mut |_, t| {
            let s = &mut self.shadow[i];
            i += 1;
            for (sv, &wv) in s.iter_mut().zip(t.data()) {
                *sv = d * *sv + (1.0 - d) * wv;
            }
        });
    }

    pub fn weights(&self) -> &[Vec<f32>] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::vit::BackboneConfig;

    fn tiny_model() -> Model {
        let mut rng = Rng::new(0, 0);
        let cfg = BackboneConfig {
            image_hw: (8, 8),
            patch_hw: (4, 4),
            depth: 6,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            layer_scale_init: 0.05,
        };
        Model::init(cfg, &[4, 5], &mut rng).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_warmup() {
        let s = LrSchedule {
            base_lr: 1.0,
            warmup: 10,
            total_steps: 100,
            power: 1.0,
        };
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(5) - 0.5).abs() < 1e-6);
        assert!((s.at(10) - 1.0).abs() < 1e-6);
        assert!(s.at(50) < 1.0);
        assert_eq!(s.at(100), 0.0);
        // Power 2 decays faster mid-schedule.
        let s2 = LrSchedule {
            power: 2.0,
            ..s.clone()
        };
        assert!(s2.at(50) < s.at(50));
    }

    #[test]
    fn llrd_multipliers() {
        assert_eq!(llrd_multiplier("head.weight", 12, 0.8), 1.0);
        assert_eq!(llrd_multiplier("predictor.w1", 12, 0.8), 1.0);
        assert!((llrd_multiplier("backbone.blocks.11.attn.w_qkv", 12, 0.8) - 1.0).abs() < 1e-7);
        let b0 = llrd_multiplier("backbone.blocks.0.attn.w_qkv", 12, 0.8);
        assert!((b0 - 0.8f32.powi(11)).abs() < 1e-7);
        let patch = llrd_multiplier("backbone.patch.weight", 12, 0.8);
        assert!((patch - 0.8f32.powi(12)).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_skips_norms_and_biases() {
        assert!(decays("backbone.blocks.0.attn.w_qkv"));
        assert!(decays("head.weight"));
        assert!(!decays("head.bias"));
        assert!(!decays("backbone.blocks.0.ln1.gamma"));
        assert!(!decays("backbone.blocks.0.ls1"));
        assert!(!decays("predictor.rms_gamma"));
        assert!(!decays("backbone.blocks.0.attn.b_qkv"));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut m = tiny_model();
        let before = m.param_data();
        // Give head.weight a positive gradient.
        m.visit_params(&mut |name, t| {
            if name == "head.weight" {
                t.with_grad_buf(|g| g.fill(1.0));
            }
        });
        let mut opt = AdamW::new(&mut m, 0.9, 0.999, 0.0, 0.8);
        opt.step(&mut m, 0.01, 0.01);
        let after = m.param_data();
        let mut idx = 0;
        let mut head_idx = None;
        let mut m2 = tiny_model();
        m2.visit_params(&mut |name, _| {
            if name == "head.weight" {
                head_idx = Some(idx);
            }
            idx += 1;
        });
        let hi = head_idx.unwrap();
        for (a, b) in after[hi].iter().zip(&before[hi]) {
            assert!(a < b, "positive grad should decrease weight");
        }
    }

    /// EMA with decay d after one step equals d·w0 + (1-d)·w1.
    #[test]
    fn ema_tracks_model_params() {
        let mut m = tiny_model();
        let mut ema = Ema::new(&mut m, 0.5);
        let w0 = m.param_data();
        // Shift every parameter by +1 and update once.
        let shifted: Vec<Vec<f32>> = w0.iter().map(|p| p.iter().map(|v| v + 1.0).collect()).collect();
        m.set_param_data(&shifted);
        ema.update(&mut m);
        for (s, w) in ema.weights().iter().zip(&w0) {
            for (sv, wv) in s.iter().zip(w) {
                assert!((sv - (0.5 * wv + 0.5 * (wv + 1.0))).abs() < 1e-6);
            }
        }
    }
}
