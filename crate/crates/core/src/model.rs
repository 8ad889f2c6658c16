//! The full segmentation model: backbone + policy predictor + main head +
//! per-block auxiliary heads, with named-parameter traversal and RTEN
//! checkpointing.

use std::path::Path;

use crate::pruning::{pruned_forward_infer, Predictor, PruneSchedule};
use crate::rng::Rng;
use crate::seg::SegHead;
use crate::tensor::{read_rten, write_rten, Result, Tensor, TensorError};
use crate::tome::{tome_forward, ToMeScope};
use crate::vit::{dense_forward, Backbone, BackboneConfig};

/// Inference-time behavior of the token pipeline.
#[derive(Debug, Clone)]
pub enum ModelMode {
    Dense,
    Prune(PruneSchedule),
    ToMe { scope: ToMeScope, fraction: f32 },
}

pub struct Model {
    pub backbone: Backbone,
    pub predictor: Predictor,
    pub head: SegHead,
    /// (block index, head) pairs for intermediate supervision/analysis.
    pub aux_heads: Vec<(usize, SegHead)>,
}

/// Uniform inference output across modes.
pub struct InferOut {
    pub final_tokens: Tensor,
    /// Full token matrix after every block.
    pub snapshots: Vec<Tensor>,
    pub per_block_active: Vec<usize>,
    /// Pruning only: (stage-start block, selected indices).
    pub stage_selections: Vec<(usize, Vec<usize>)>,
}

impl Model {
    /// Fresh model with auxiliary heads at the given blocks.
    pub fn init(cfg: BackboneConfig, aux_blocks: &[usize], rng: &mut Rng) -> Result<Model> {
        let dim = cfg.dim;
        let ls = cfg.layer_scale_init;
        let backbone = Backbone::init(cfg, rng)?;
        let predictor = Predictor::init(dim, ls, rng);
        let head = SegHead::init(dim, rng);
        let aux_heads = aux_blocks
            .iter()
            .map(|&b| (b, SegHead::init(dim, rng)))
            .collect();
        Ok(Model {
            backbone,
            predictor,
            head,
            aux_heads,
        })
    }

    /// Aux heads at the last four blocks, the default depth-wise taps.
    pub fn default_aux_blocks(depth: usize) -> Vec<usize> {
        (depth.saturating_sub(4)..depth).collect()
    }

    pub fn aux_head(&self, block: usize) -> Option<&SegHead> {
        self.aux_heads.iter().find(|(b, _)| *b == block).map(|(_, h)| h)
    }

    pub fn aux_blocks(&self) -> Vec<usize> {
        self.aux_heads.iter().map(|(b, _)| *b).collect()
    }

    /// Deterministic named traversal of every learnable parameter.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_params(&mut |name, t| f(format!("backbone.{name}"), t));
        self.predictor.visit_params(f);
        self.head.visit_params("head", f);
        for (b, h) in &mut self.aux_heads {
            h.visit_params(&format!("aux_heads.{b}"), f);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn forward_infer(&self, image: &Tensor, mode: &ModelMode) -> Result<InferOut> {
        match mode {
            ModelMode::Dense => crate::tensor::no_grad(|| {
                let (state, snapshots) = dense_forward(&self.backbone, image)?;
                let n = self.backbone.cfg.n_tokens();
                Ok(InferOut {
                    final_tokens: state.tokens,
                    per_block_active: vec![n; snapshots.len()],
                    snapshots,
                    stage_selections: Vec::new(),
                })
            }),
            ModelMode::Prune(schedule) => {
                let out = pruned_forward_infer(&self.backbone, &self.predictor, schedule, image)?;
                Ok(InferOut {
                    final_tokens: out.state.tokens,
                    snapshots: out.snapshots,
                    per_block_active: out.per_block_active,
                    stage_selections: out.stage_selections,
                })
            }
            ModelMode::ToMe { scope, fraction } => crate::tensor::no_grad(|| {
                let (tokens, snapshots) = tome_forward(&self.backbone, image, *fraction, *scope)?;
                let n = self.backbone.cfg.n_tokens();
                let r = crate::tome::merge_count(n, *fraction);
                Ok(InferOut {
                    final_tokens: tokens,
                    per_block_active: vec![n - r; snapshots.len()],
                    snapshots,
                    stage_selections: Vec::new(),
                })
            }),
        }
    }

    /// Write all parameters as RTEN files plus a `manifest.txt` mapping
    /// parameter names to file names.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let mut err = None;
        self.visit_params(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let file = format!("{name}.rten");
            if let Err(e) = write_rten(&dir.join(&file), t) {
                err = Some(e);
                return;
            }
            manifest.push_str(&format!("{name}\t{file}\n"));
        });
        if let Some(e) = err {
            return Err(e);
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Load parameters from a checkpoint directory, validating names and
    /// shapes against this model.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut by_name = std::collections::HashMap::new();
        for line in manifest.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, file) = line.split_once('\t').ok_or_else(|| TensorError::Rten {
                detail: format!("bad manifest line {line:?}"),
            })?;
            by_name.insert(name.to_string(), file.to_string());
        }
        let mut err: Option<TensorError> = None;
        self.visit_params(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let Some(file) = by_name.remove(&name) else {
                err = Some(TensorError::Rten {
                    detail: format!("checkpoint missing parameter {name}"),
                });
                return;
            };
            match read_rten(&dir.join(&file)) {
                Ok(loaded) => {
                    if loaded.shape() != t.shape() {
                        err = Some(TensorError::Rten {
                            detail: format!(
                                "shape mismatch for {name}: {:?} vs {:?}",
                                loaded.shape(),
                                t.shape()
                            ),
                        });
                        return;
                    }
                    *t = Tensor::param(loaded.data().to_vec(), loaded.shape().to_vec());
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(TensorError::Rten {
                detail: format!("checkpoint has unknown parameter {extra}"),
            });
        }
        Ok(())
    }

    /// Snapshot of all parameter buffers, in traversal order.
    pub fn param_data(&mut self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.push(t.data().to_vec()));
        out
    }

    /// Replace all parameter buffers from a snapshot in traversal order.
    pub fn set_param_data(&mut self, data: &[Vec<f32>]) {
        let mut i = 0;
        self.visit_params(&mut |_, t| {
            *t = Tensor::param(data[i].clone(), t.shape().to_vec());
            i += 1;
        });
        assert_eq!(i, data.len(), "parameter snapshot length mismatch");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        let mut rng = Rng::new(0, 0);
        let cfg = BackboneConfig {
            image_hw: (16, 16),
            patch_hw: (4, 4),
            depth: 6,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            layer_scale_init: 0.05,
        };
        Model::init(cfg.clone(), &Model::default_aux_blocks(cfg.depth), &mut rng).unwrap()
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let mut m = tiny_model();
        let mut names = Vec::new();
        m.visit_params(&mut |n, _| names.push(n));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        assert!(names[0].starts_with("backbone."));
        assert!(names.iter().any(|n| n == "predictor.w1"));
        assert!(names.iter().any(|n| n == "head.weight"));
        assert!(names.iter().any(|n| n.starts_with("aux_heads.2.")));
        // Same model, same traversal order.
        let mut m2 = tiny_model();
        let mut names2 = Vec::new();
        m2.visit_params(&mut |n, _| names2.push(n));
        assert_eq!(names, names2);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join(format!("vitlab-ckpt-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let mut m = tiny_model();
        let want = m.param_data();
        m.save_checkpoint(&dir).unwrap();

        let mut rng = Rng::new(1, 0);
        let cfg = m.backbone.cfg.clone();
        let mut other = Model::init(cfg, &[2, 3, 4, 5], &mut rng).unwrap();
        other.load_checkpoint(&dir).unwrap();
        assert_eq!(other.param_data(), want);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn infer_modes_report_active_counts() {
        let m = tiny_model();
        let mut rng = Rng::new(2, 0);
        let img = Tensor::new((0..3 * 16 * 16).map(|_| rng.next_f32()).collect(), vec![3, 16, 16]);
        let dense = m.forward_infer(&img, &ModelMode::Dense).unwrap();
        assert_eq!(dense.per_block_active, vec![16; 6]);
        let schedule = PruneSchedule::new(2, 2, 0.5, 6).unwrap();
        let pruned = m.forward_infer(&img, &ModelMode::Prune(schedule)).unwrap();
        assert_eq!(pruned.per_block_active, vec![16, 16, 8, 8, 4, 4]);
        let tome = m
            .forward_infer(
                &img,
                &ModelMode::ToMe {
                    scope: ToMeScope::Mhsa,
                    fraction: 0.5,
                },
            )
            .unwrap();
        assert_eq!(tome.per_block_active, vec![8; 6]);
    }
}
