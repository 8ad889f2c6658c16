//! Run configuration: plain-text key=value files plus flag overrides.
//!
//! Every knob is a config key; command-line overrides use the same names
//! (`--lr 1e-3` sets `lr=1e-3`). Unknown keys are errors that name the key.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::HarnessError;
use crate::pruning::PruneSchedule;
use crate::tome::ToMeScope;
use crate::vit::BackboneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dense,
    Prune,
    PruneFixedRoute,
    PruneRandomRoute,
    TomeMhsa,
    TomeMhsaMlp,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Dense => "none",
            Mode::Prune => "prune",
            Mode::PruneFixedRoute => "prune+fixed_route",
            Mode::PruneRandomRoute => "prune+random_route",
            Mode::TomeMhsa => "tome_mhsa",
            Mode::TomeMhsaMlp => "tome_mhsa_mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Mode, HarnessError> {
        Ok(match s {
            "none" => Mode::Dense,
            "prune" => Mode::Prune,
            "prune+fixed_route" => Mode::PruneFixedRoute,
            "prune+random_route" => Mode::PruneRandomRoute,
            "tome_mhsa" => Mode::TomeMhsa,
            "tome_mhsa_mlp" => Mode::TomeMhsaMlp,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown mode {other:?} (expected none|prune|prune+fixed_route|prune+random_route|tome_mhsa|tome_mhsa_mlp)"
                )))
            }
        })
    }

    pub fn is_prune(&self) -> bool {
        matches!(self, Mode::Prune | Mode::PruneFixedRoute | Mode::PruneRandomRoute)
    }

    pub fn is_route(&self) -> bool {
        matches!(self, Mode::PruneFixedRoute | Mode::PruneRandomRoute)
    }

    pub fn is_tome(&self) -> bool {
        matches!(self, Mode::TomeMhsa | Mode::TomeMhsaMlp)
    }

    pub fn tome_scope(&self) -> Option<ToMeScope> {
        match self {
            Mode::TomeMhsa => Some(ToMeScope::Mhsa),
            Mode::TomeMhsaMlp => Some(ToMeScope::MhsaMlp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyObjective {
    Ratio,
    Informed,
}

impl PolicyObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyObjective::Ratio => "ratio",
            PolicyObjective::Informed => "informed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Backbone (square images/patches).
    pub image_hw: usize,
    pub patch_hw: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub layer_scale_init: f32,
    // Mode and schedule.
    pub mode: Mode,
    pub keep_ratio: f64,
    pub first_block: usize,
    pub stage_len: usize,
    pub policy: PolicyObjective,
    pub lambda_pol: f32,
    pub gumbel_temperature: f32,
    pub route_fraction: f32,
    pub mask_in_route_span: bool,
    pub merge_fraction: f32,
    // Optimizer.
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub llrd: f32,
    pub ema_decay: f32,
    pub warmup_head: usize,
    pub warmup_backbone: usize,
    pub poly_power: f32,
    // Run.
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_hw: 64,
            patch_hw: 8,
            depth: 12,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            layer_scale_init: 1e-5,
            mode: Mode::Prune,
            keep_ratio: 0.7,
            first_block: 3,
            stage_len: 3,
            policy: PolicyObjective::Ratio,
            lambda_pol: 8.0,
            gumbel_temperature: 1.0,
            route_fraction: 0.5,
            mask_in_route_span: true,
            merge_fraction: 0.5,
            lr: 2e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            llrd: 0.8,
            ema_decay: 0.9999,
            warmup_head: 20,
            warmup_backbone: 40,
            poly_power: 1.0,
            epochs: 12,
            batch_size: 2,
            grad_accum: 4,
            augment: true,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("invalid value {v:?} for key {key:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("invalid bool {v:?} for key {key:?}"))),
    }
}

impl RunConfig {
    /// Apply one key=value assignment. Returns an error naming the key when
    /// it is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "image_hw" => self.image_hw = parse_num(key, value)?,
            "patch_hw" => self.patch_hw = parse_num(key, value)?,
            "depth" => self.depth = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, value)?,
            "layer_scale_init" => self.layer_scale_init = parse_num(key, value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "keep_ratio" => self.keep_ratio = parse_num(key, value)?,
            "first_block" => self.first_block = parse_num(key, value)?,
            "stage_len" => self.stage_len = parse_num(key, value)?,
            "policy" => {
                self.policy = match value {
                    "ratio" => PolicyObjective::Ratio,
                    "informed" => PolicyObjective::Informed,
                    _ => {
                        return Err(HarnessError::Config(format!(
                            "unknown policy {value:?} (expected ratio|informed)"
                        )))
                    }
                }
            }
            "lambda_pol" => self.lambda_pol = parse_num(key, value)?,
            "gumbel_temperature" => self.gumbel_temperature = parse_num(key, value)?,
            "route_fraction" => self.route_fraction = parse_num(key, value)?,
            "mask_in_route_span" => self.mask_in_route_span = parse_bool(key, value)?,
            "merge_fraction" => self.merge_fraction = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "llrd" => self.llrd = parse_num(key, value)?,
            "ema_decay" => self.ema_decay = parse_num(key, value)?,
            "warmup_head" => self.warmup_head = parse_num(key, value)?,
            "warmup_backbone" => self.warmup_backbone = parse_num(key, value)?,
            "poly_power" => self.poly_power = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "grad_accum" => self.grad_accum = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => {
                return Err(HarnessError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse a config file body: one key=value per line, `#` comments.
    /// Returns the config and the set of keys that were explicitly set.
    pub fn parse(text: &str) -> Result<(RunConfig, BTreeSet<String>), HarnessError> {
        let mut cfg = RunConfig::default();
        let mut set_keys = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)?;
            set_keys.insert(key.to_string());
        }
        Ok((cfg, set_keys))
    }

    /// Serialize the effective config; `parse(dump())` reproduces it.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("image_hw", self.image_hw.to_string());
        kv("patch_hw", self.patch_hw.to_string());
        kv("depth", self.depth.to_string());
        kv("dim", self.dim.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("layer_scale_init", self.layer_scale_init.to_string());
        kv("mode", self.mode.as_str().to_string());
        kv("keep_ratio", self.keep_ratio.to_string());
        kv("first_block", self.first_block.to_string());
        kv("stage_len", self.stage_len.to_string());
        kv("policy", self.policy.as_str().to_string());
        kv("lambda_pol", self.lambda_pol.to_string());
        kv("gumbel_temperature", self.gumbel_temperature.to_string());
        kv("route_fraction", self.route_fraction.to_string());
        kv("mask_in_route_span", self.mask_in_route_span.to_string());
        kv("merge_fraction", self.merge_fraction.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("llrd", self.llrd.to_string());
        kv("ema_decay", self.ema_decay.to_string());
        kv("warmup_head", self.warmup_head.to_string());
        kv("warmup_backbone", self.warmup_backbone.to_string());
        kv("poly_power", self.poly_power.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("grad_accum", self.grad_accum.to_string());
        kv("augment", self.augment.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Mode-aware validation. A key is rejected only when it was explicitly
    /// assigned AND deviates from its default, so re-parsing a dumped
    /// config (which spells out every key) stays valid.
    pub fn validate(&self, set_keys: &BTreeSet<String>) -> Result<(), HarnessError> {
        let defaults = RunConfig::default();
        let reject = |key: &str, deviates: bool, why: &str| -> Result<(), HarnessError> {
            if set_keys.contains(key) && deviates {
                return Err(HarnessError::Config(format!(
                    "key {key:?} is not valid for mode {}: {why}",
                    self.mode.as_str()
                )));
            }
            Ok(())
        };
        if !self.mode.is_route() {
            reject(
                "route_fraction",
                self.route_fraction != defaults.route_fraction,
                "routing is only active in route modes",
            )?;
            reject(
                "mask_in_route_span",
                self.mask_in_route_span != defaults.mask_in_route_span,
                "routing is only active in route modes",
            )?;
        }
        if !self.mode.is_tome() {
            reject(
                "merge_fraction",
                self.merge_fraction != defaults.merge_fraction,
                "merging is only active in tome modes",
            )?;
        }
        if !self.mode.is_prune() {
            reject(
                "policy",
                self.policy != defaults.policy,
                "policy losses require a prune mode",
            )?;
            reject(
                "lambda_pol",
                self.lambda_pol != defaults.lambda_pol,
                "policy losses require a prune mode",
            )?;
            reject(
                "gumbel_temperature",
                self.gumbel_temperature != defaults.gumbel_temperature,
                "policies require a prune mode",
            )?;
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return Err(HarnessError::Config(
                "epochs, batch_size and grad_accum must be positive".into(),
            ));
        }
        self.backbone_config().validate().map_err(|e| {
            HarnessError::Config(format!("invalid backbone geometry: {e}"))
        })?;
        if self.mode.is_prune() {
            self.schedule()?;
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            image_hw: (self.image_hw, self.image_hw),
            patch_hw: (self.patch_hw, self.patch_hw),
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            layer_scale_init: self.layer_scale_init,
        }
    }

    pub fn schedule(&self) -> Result<PruneSchedule, HarnessError> {
        PruneSchedule::new(self.first_block, self.stage_len, self.keep_ratio, self.depth)
            .map_err(|e| HarnessError::Config(format!("invalid schedule: {e}")))
    }

    /// Short stable hash of the effective config, for tagging results.
    pub fn hash(&self) -> String {
        let dump = self.dump();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in dump.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
