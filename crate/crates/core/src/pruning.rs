//! Learnable token pruning.
//!
//! A lightweight per-token predictor emits keep logits. During training the
//! logits pass through a two-class straight-through Gumbel-Softmax and the
//! resulting binary policy masks attention in exp-space (all tokens stay
//! resident). At inference the policy is a top-k over the logits; selected
//! rows are gathered, computed, and scattered back, and previously pruned
//! tokens can be reselected later carrying their stale values.
//!
//! Keep ratios follow the hierarchical stage schedule ρ, ρ², ρ³, ...
//! updated every `stage_len` blocks from `first_block` on.

use crate::rng::Rng;
use crate::routing::{routed_span_forward, RouteSpec};
use crate::tensor::{top_k_indices, Result, Tensor, TensorError};
use crate::vit::{block_core, block_forward, patch_embed, Backbone, TokenState};

const RMS_EPS: f32 = 1e-6;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Stage boundaries and per-stage keep ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSchedule {
    pub first_block: usize,
    pub stage_len: usize,
    pub base_ratio: f64,
    pub depth: usize,
    /// Keep ratio of every block in [first_block, depth).
    pub per_block_ratio: Vec<f64>,
}

fn sched_err(detail: String) -> TensorError {
    TensorError::Shape {
        op: "prune_schedule",
        detail,
    }
}

impl PruneSchedule {
    pub fn new(first_block: usize, stage_len: usize, base_ratio: f64, depth: usize) -> Result<Self> {
        if !(base_ratio > 0.0 && base_ratio <= 1.0) {
            return Err(sched_err(format!("base ratio {base_ratio} outside (0, 1]")));
        }
        if stage_len == 0 || first_block >= depth {
            return Err(sched_err(format!(
                "first_block {first_block} / stage_len {stage_len} invalid for depth {depth}"
            )));
        }
        let per_block_ratio = (first_block..depth)
            .map(|b| base_ratio.powi(1 + ((b - first_block) / stage_len) as i32))
            .collect();
        Ok(PruneSchedule {
            first_block,
            stage_len,
            base_ratio,
            depth,
            per_block_ratio,
        })
    }

    pub fn n_stages(&self) -> usize {
        (self.depth - self.first_block).div_ceil(self.stage_len)
    }

    /// Scheduled keep ratio of stage s (zero-indexed): ρ^(s+1).
    pub fn stage_ratio(&self, stage: usize) -> f64 {
        self.base_ratio.powi(stage as i32 + 1)
    }

    /// Blocks at which a new policy is predicted.
    pub fn stage_starts(&self) -> Vec<usize> {
        (0..self.n_stages())
            .map(|s| self.first_block + s * self.stage_len)
            .collect()
    }

    pub fn is_stage_start(&self, block: usize) -> bool {
        block >= self.first_block
            && block < self.depth
            && (block - self.first_block).is_multiple_of(self.stage_len)
    }

    /// Stage that block b belongs to, when pruned.
    pub fn stage_of_block(&self, block: usize) -> Option<usize> {
        if block < self.first_block || block >= self.depth {
            return None;
        }
        Some((block - self.first_block) / self.stage_len)
    }

    pub fn ratio_for_block(&self, block: usize) -> Option<f64> {
        self.stage_of_block(block)
            .map(|_| self.per_block_ratio[block - self.first_block])
    }

    /// Top-k count for a keep ratio: round-half-away-from-zero, clamped to
    /// at least one token (with a warning when clamping fires).
    pub fn keep_count(n_tokens: usize, ratio: f64) -> usize {
        let k = (ratio * n_tokens as f64).round() as usize;
        if k == 0 {
            eprintln!("warning: keep ratio {ratio} rounds to 0 of {n_tokens} tokens; clamping to 1");
            return 1;
        }
        k.min(n_tokens)
    }

    pub fn stage_keep_counts(&self, n_tokens: usize) -> Vec<usize> {
        (0..self.n_stages())
            .map(|s| Self::keep_count(n_tokens, self.stage_ratio(s)))
            .collect()
    }
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule::new(3, 3, 0.7, 12).expect("default schedule is valid")
    }
}

// ---------------------------------------------------------------------------
// Predictor
// ---------------------------------------------------------------------------

/// Two-layer per-token policy network:
/// rms_norm → linear(D → D/2) → GELU → linear(D/2 → 1), output scaled by a
/// learned scalar.
pub struct Predictor {
    pub rms_gamma: Tensor, // [D]
    pub w1: Tensor,        // [D, D/2]
    pub b1: Tensor,        // [D/2]
    pub w2: Tensor,        // [D/2, 1]
    pub b2: Tensor,        // [1]
    pub ls: Tensor,        // [1]
}

impl Predictor {
    pub fn init(dim: usize, layer_scale_init: f32, rng: &mut Rng) -> Predictor {
        let hidden = (dim / 2).max(1);
        let mat = |r: usize, c: usize, rng: &mut Rng| {
            Tensor::param((0..r * c).map(|_| rng.trunc_normal_f32(0.02)).collect(), vec![r, c])
        };
        Predictor {
            rms_gamma: Tensor::param(vec![1.0; dim], vec![dim]),
            w1: mat(dim, hidden, rng),
            b1: Tensor::param(vec![0.0; hidden], vec![hidden]),
            w2: mat(hidden, 1, rng),
            b2: Tensor::param(vec![0.0; 1], vec![1]),
            ls: Tensor::param(vec![layer_scale_init], vec![1]),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("predictor.rms_gamma".into(), &mut self.rms_gamma);
        f("predictor.w1".into(), &mut self.w1);
        f("predictor.b1".into(), &mut self.b1);
        f("predictor.w2".into(), &mut self.w2);
        f("predictor.b2".into(), &mut self.b2);
        f("predictor.ls".into(), &mut self.ls);
    }
}

/// Per-token keep logits over the full (possibly stale-mixed) token matrix.
pub fn predict_policy(tokens: &Tensor, p: &Predictor) -> Result<Tensor> {
    let (n, _) = tokens.dims2("predict_policy")?;
    let h = tokens
        .rms_norm(&p.rms_gamma, RMS_EPS)?
        .matmul(&p.w1)?
        .add_row_vec(&p.b1)?
        .gelu()?;
    let logits = h.matmul(&p.w2)?.add_row_vec(&p.b2)?.mul_row_vec(&p.ls)?;
    logits.reshape(vec![n])
}

// ---------------------------------------------------------------------------
// Gumbel straight-through policy
// ---------------------------------------------------------------------------

/// One sampled stage policy. `hard` carries the discrete decision forward
/// and the soft sample's gradient backward (straight-through).
pub struct PolicyOutput {
    pub logits: Tensor, // [N]
    pub soft: Tensor,   // [N], keep probability in (0, 1)
    pub hard: Tensor,   // [N], values in {0, 1}
    pub stage: usize,
}

/// Two-class Gumbel-Softmax over (keep = logit, drop = 0) with explicit
/// noise, one Gumbel sample per class per token.
pub fn gumbel_st_with_noise(
    logits: &Tensor,
    temperature: f32,
    g_keep: &[f32],
    g_drop: &[f32],
) -> Result<PolicyOutput> {
    if temperature <= 0.0 {
        return Err(TensorError::Shape {
            op: "gumbel_st",
            detail: format!("temperature {temperature} must be positive"),
        });
    }
    let n = logits.numel();
    if g_keep.len() != n || g_drop.len() != n {
        return Err(TensorError::Shape {
            op: "gumbel_st",
            detail: "noise length mismatch".into(),
        });
    }
    // softmax over two classes reduces to a sigmoid of the logit gap.
    let gap: Vec<f32> = g_keep.iter().zip(g_drop).map(|(k, d)| k - d).collect();
    let soft = logits
        .add(&Tensor::new(gap, vec![n]))?
        .scale(1.0 / temperature)?
        .sigmoid()?;
    // Ties (soft == 0.5) resolve to keep.
    let hard_vals: Vec<f32> = soft.data().iter().map(|&s| if s >= 0.5 { 1.0 } else { 0.0 }).collect();
    let delta: Vec<f32> = hard_vals.iter().zip(soft.data()).map(|(h, s)| h - s).collect();
    let hard = soft.add(&Tensor::new(delta, vec![n]))?;
    Ok(PolicyOutput {
        logits: logits.clone(),
        soft,
        hard,
        stage: 0,
    })
}

/// Straight-through Gumbel-Softmax sample of a keep/drop policy.
/// Noise draw order: (keep, drop) per token, in token order.
pub fn gumbel_st(logits: &Tensor, temperature: f32, rng: &mut Rng) -> Result<PolicyOutput> {
    let n = logits.numel();
    let mut g_keep = Vec::with_capacity(n);
    let mut g_drop = Vec::with_capacity(n);
    for _ in 0..n {
        g_keep.push(rng.gumbel_f32());
        g_drop.push(rng.gumbel_f32());
    }
    gumbel_st_with_noise(logits, temperature, &g_keep, &g_drop)
}

/// Attention mask from a binary policy (adds the diagonal self-loop).
pub fn policy_to_mask(policy: &Tensor) -> Result<Tensor> {
    if policy.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(TensorError::Shape {
            op: "policy_to_mask",
            detail: "policy values must be binary".into(),
        });
    }
    policy.mask_with_self_loops()
}

// ---------------------------------------------------------------------------
// Policy losses
// ---------------------------------------------------------------------------

/// Per-image ratio loss: (1/(B·S)) Σ_b Σ_s (ρ_s − mean(P^{b,s}))².
pub fn ratio_loss(policies: &[Vec<PolicyOutput>], schedule: &PruneSchedule) -> Result<Tensor> {
    if policies.is_empty() || policies.iter().any(|s| s.is_empty()) {
        return Err(TensorError::Shape {
            op: "ratio_loss",
            detail: "empty stage list".into(),
        });
    }
    let b = policies.len();
    let s = policies[0].len();
    let mut acc = Tensor::zeros(vec![1]);
    for per_image in policies {
        if per_image.len() != s {
            return Err(TensorError::Shape {
                op: "ratio_loss",
                detail: "ragged stage lists across batch".into(),
            });
        }
        for pol in per_image {
            let rho = schedule.stage_ratio(pol.stage) as f32;
            // (ρ_s - mean P)²
            let diff = pol.hard.mean_all()?.affine(-1.0, rho)?;
            acc = acc.add(&diff.mul(&diff)?)?;
        }
    }
    acc.scale(1.0 / (b * s) as f32)
}

/// Informed policy loss: λ · (1/B) Σ_b Σ_s BCE(σ(p^{b,s}), T^b), with the
/// BCE averaged over tokens within each stage.
pub fn informed_policy_loss(
    stage_logits: &[Vec<Tensor>],
    targets: &[Tensor],
    lambda: f32,
) -> Result<Tensor> {
    if stage_logits.is_empty() || stage_logits.iter().any(|s| s.is_empty()) {
        return Err(TensorError::Shape {
            op: "informed_policy_loss",
            detail: "empty stage list".into(),
        });
    }
    if stage_logits.len() != targets.len() {
        return Err(TensorError::Shape {
            op: "informed_policy_loss",
            detail: "batch size mismatch between logits and targets".into(),
        });
    }
    for t in targets {
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::Shape {
                op: "informed_policy_loss",
                detail: "target values outside [0, 1]".into(),
            });
        }
    }
    let b = stage_logits.len();
    let mut acc = Tensor::zeros(vec![1]);
    for (stages, target) in stage_logits.iter().zip(targets) {
        for logits in stages {
            acc = acc.add(&logits.bce_with_logits(target)?.mean_all()?)?;
        }
    }
    acc.scale(lambda / b as f32)
}

/// Policy supervision target: ground-truth mask bilinearly downsampled to
/// the patch grid, flattened in raster order.
pub fn make_target(gt_mask: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (gh, gw) = grid;
    gt_mask.bilinear_resize(gh, gw)?.reshape(vec![gh * gw])
}

/// Top-k token selection for a stage at inference: k = round(ρ_s · N).
pub fn select_inference_policy(logits: &Tensor, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TensorError::Shape {
            op: "select_inference_policy",
            detail: format!("ratio {ratio} outside (0, 1]"),
        });
    }
    let k = PruneSchedule::keep_count(logits.numel(), ratio);
    top_k_indices(logits, k)
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Inference forward under pruning with reactivation.
pub struct InferForward {
    pub state: TokenState,
    /// Full N×D token matrix after every block.
    pub snapshots: Vec<Tensor>,
    /// (stage-start block, selected indices) per stage.
    pub stage_selections: Vec<(usize, Vec<usize>)>,
    /// Active-row count per block.
    pub per_block_active: Vec<usize>,
}

/// Run the model in inference mode: dense until `first_block`, then at each
/// stage boundary re-select top-k tokens from the policy logits (possibly
/// reactivating stale tokens), gather them, run the stage's blocks, and
/// scatter back.
pub fn pruned_forward_infer(
    backbone: &Backbone,
    predictor: &Predictor,
    schedule: &PruneSchedule,
    image: &Tensor,
) -> Result<InferForward> {
    crate::tensor::no_grad(|| {
        let heads = backbone.cfg.heads;
        let tokens = patch_embed(image, &backbone.patch, &backbone.cfg)?;
        let mut state = TokenState::fresh(tokens);
        let mut snapshots = Vec::with_capacity(backbone.cfg.depth);
        let mut stage_selections = Vec::new();
        let mut per_block_active = Vec::with_capacity(backbone.cfg.depth);
        for (b, block) in backbone.blocks.iter().enumerate() {
            if schedule.is_stage_start(b) {
                let ratio = schedule.ratio_for_block(b).expect("stage start has a ratio");
                let logits = predict_policy(&state.tokens, predictor)?;
                let idx = select_inference_policy(&logits, ratio)?;
                stage_selections.push((b, idx.clone()));
                state.active_idx = idx;
            }
            state = block_forward(&state, None, block, heads, b)?;
            per_block_active.push(state.active_idx.len());
            snapshots.push(state.tokens.clone());
        }
        Ok(InferForward {
            state,
            snapshots,
            stage_selections,
            per_block_active,
        })
    })
}

/// Training forward with attention masking (and optionally a routed span).
pub struct TrainForward {
    pub final_tokens: Tensor,
    pub policies: Vec<PolicyOutput>,
    /// (block, full representation after that block) for the requested taps.
    pub taps: Vec<(usize, Tensor)>,
}

/// Knobs for the training forward pass.
pub struct TrainFwdOpts<'a> {
    pub temperature: f32,
    /// Apply the stage policy mask (restricted to kept tokens) inside a
    /// routed span. When false the span runs unmasked.
    pub mask_in_route_span: bool,
    /// Blocks whose post-block full representation should be returned.
    pub taps: &'a [usize],
}

impl Default for TrainFwdOpts<'_> {
    fn default() -> Self {
        TrainFwdOpts {
            temperature: 1.0,
            mask_in_route_span: true,
            taps: &[],
        }
    }
}

/// All N tokens flow through every non-routed block; stage policies are
/// sampled with the straight-through Gumbel estimator and applied as
/// exp-space attention masks. When a route is active, policies are
/// predicted on the scattered full representation (fresh kept rows + stale
/// routed rows) and masks are restricted to the kept subset.
pub fn pruned_forward_train(
    backbone: &Backbone,
    predictor: &Predictor,
    schedule: &PruneSchedule,
    image: &Tensor,
    rng: &mut Rng,
    route: Option<&RouteSpec>,
    opts: &TrainFwdOpts,
) -> Result<TrainForward> {
    let heads = backbone.cfg.heads;
    let depth = backbone.cfg.depth;
    if let Some(r) = route {
        if r.n >= depth {
            return Err(TensorError::Index {
                op: "pruned_forward_train",
                detail: format!("route end {} outside depth {depth}", r.n),
            });
        }
    }
    let mut full = patch_embed(image, &backbone.patch, &backbone.cfg)?;
    let mut policies: Vec<PolicyOutput> = Vec::new();
    let mut taps_out: Vec<(usize, Tensor)> = Vec::new();
    let starts = schedule.stage_starts();

    let mut b = 0;
    while b < depth {
        if let Some(r) = route.filter(|r| r.l == b) {
            // A stage already in flight at block l keeps masking inside the
            // span, restricted to the kept rows.
            let initial_mask = if opts.mask_in_route_span {
                match policies.last() {
                    Some(p) if schedule.stage_of_block(b).is_some() => {
                        Some(policy_to_mask(&p.hard.gather_rows(&r.kept_idx)?)?)
                    }
                    _ => None,
                }
            } else {
                None
            };
            let boundaries: Vec<usize> =
                starts.iter().copied().filter(|s| r.l <= *s && *s <= r.n).collect();
            let span_taps: Vec<usize> =
                opts.taps.iter().copied().filter(|t| r.l <= *t && *t <= r.n).collect();
            let mut hook = |blk: usize, scattered: &Tensor| -> Result<Option<Tensor>> {
                let stage = schedule.stage_of_block(blk).expect("boundary inside schedule");
                let logits = predict_policy(scattered, predictor)?;
                let mut pol = gumbel_st(&logits, opts.temperature, rng)?;
                pol.stage = stage;
                let mask = if opts.mask_in_route_span {
                    Some(policy_to_mask(&pol.hard.gather_rows(&r.kept_idx)?)?)
                } else {
                    None
                };
                policies.push(pol);
                Ok(mask)
            };
            let span = routed_span_forward(
                &full,
                r,
                &backbone.blocks,
                heads,
                initial_mask,
                &boundaries,
                &span_taps,
                &mut hook,
            )?;
            full = span.full;
            taps_out.extend(span.taps);
            b = r.n + 1;
            continue;
        }

        if schedule.is_stage_start(b) {
            let stage = schedule.stage_of_block(b).expect("stage start in schedule");
            let logits = predict_policy(&full, predictor)?;
            let mut pol = gumbel_st(&logits, opts.temperature, rng)?;
            pol.stage = stage;
            policies.push(pol);
        }
        let mask = if schedule.stage_of_block(b).is_some() {
            match policies.last() {
                Some(p) => Some(policy_to_mask(&p.hard)?),
                None => None,
            }
        } else {
            None
        };
        full = block_core(&full, mask.as_ref(), None, &backbone.blocks[b], heads)?;
        if opts.taps.contains(&b) {
            taps_out.push((b, full.clone()));
        }
        b += 1;
    }

    Ok(TrainForward {
        final_tokens: full,
        policies,
        taps: taps_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{dense_forward, BackboneConfig};

    #[test]
    fn schedule_matches_hierarchical_ratios() {
        let s = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        assert_eq!(s.n_stages(), 3);
        assert_eq!(s.stage_starts(), vec![3, 6, 9]);
        let want = [0.7, 0.7, 0.7, 0.49, 0.49, 0.49, 0.343, 0.343, 0.343];
        assert_eq!(s.per_block_ratio.len(), want.len());
        for (got, want) in s.per_block_ratio.iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(s.ratio_for_block(2).is_none());
        assert_eq!(s.ratio_for_block(3), Some(s.stage_ratio(0)));
        assert_eq!(s.stage_of_block(11), Some(2));
    }

    #[test]
    fn keep_counts_match_rounding_rule() {
        // round-half-away-from-zero; 0.343·4096 = 1404.928 -> 1405 (floor
        // would give 1404).
        let s = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        assert_eq!(s.stage_keep_counts(4096), vec![2867, 2007, 1405]);
        assert_eq!(s.stage_keep_counts(64), vec![45, 31, 22]);
        assert_eq!(PruneSchedule::keep_count(64, 0.7), 45); // round(44.8)
        assert_eq!(PruneSchedule::keep_count(10, 0.001), 1); // clamped
        assert_eq!(PruneSchedule::keep_count(10, 1.0), 10);
    }

    #[test]
    fn schedule_rejects_bad_params() {
        assert!(PruneSchedule::new(3, 3, 0.0, 12).is_err());
        assert!(PruneSchedule::new(3, 3, 1.5, 12).is_err());
        assert!(PruneSchedule::new(12, 3, 0.7, 12).is_err());
        assert!(PruneSchedule::new(3, 0, 0.7, 12).is_err());
    }

    #[test]
    fn predictor_zero_weights_gives_zero_logits() {
        let mut rng = Rng::new(0, 0);
        let mut p = Predictor::init(8, 1e-5, &mut rng);
        p.w1 = Tensor::param(vec![0.0; 8 * 4], vec![8, 4]);
        p.w2 = Tensor::param(vec![0.0; 4], vec![4, 1]);
        let tokens = Tensor::new((0..32).map(|v| v as f32).collect(), vec![4, 8]);
        let logits = predict_policy(&tokens, &p).unwrap();
        assert_eq!(logits.shape(), &[4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_is_per_token() {
        let mut rng = Rng::new(1, 0);
        let p = Predictor::init(8, 0.5, &mut rng);
        let row: Vec<f32> = (0..8).map(|_| rng.normal_f32()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let logits = predict_policy(&Tensor::new(data, vec![2, 8]), &p).unwrap();
        assert_eq!(logits.data()[0], logits.data()[1]);
    }

    #[test]
    fn gumbel_saturates_at_large_logits() {
        let mut rng = Rng::new(2, 0);
        let logits = Tensor::full(vec![16], 20.0);
        for _ in 0..50 {
            let pol = gumbel_st(&logits, 1.0, &mut rng).unwrap();
            assert!(pol.hard.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn gumbel_tie_resolves_to_keep() {
        let logits = Tensor::zeros(vec![3]);
        let noise = vec![0.7; 3];
        let pol = gumbel_st_with_noise(&logits, 1.0, &noise, &noise).unwrap();
        for &s in pol.soft.data() {
            assert_eq!(s, 0.5);
        }
        assert!(pol.hard.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn straight_through_gradients_match() {
        let logits = Tensor::param(vec![0.4, -1.0, 0.2, 1.5], vec![4]);
        let noise_k = vec![0.3, 1.2, -0.4, 0.0];
        let noise_d = vec![0.5, 0.1, 0.2, 0.9];
        let w = Tensor::new(vec![1.0, -2.0, 0.5, 3.0], vec![4]);

        let pol = gumbel_st_with_noise(&logits, 1.0, &noise_k, &noise_d).unwrap();
        pol.hard.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g_hard = logits.grad().unwrap();
        logits.zero_grad();

        let pol = gumbel_st_with_noise(&logits, 1.0, &noise_k, &noise_d).unwrap();
        pol.soft.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g_soft = logits.grad().unwrap();
        assert_eq!(g_hard, g_soft);
    }

    #[test]
    fn policy_to_mask_requires_binary() {
        let p = Tensor::new(vec![1.0, 0.5], vec![2]);
        assert!(policy_to_mask(&p).is_err());
        let p = Tensor::new(vec![1.0, 0.0], vec![2]);
        assert!(policy_to_mask(&p).is_ok());
    }

    fn pol_with_mean(n: usize, ones: usize, stage: usize) -> PolicyOutput {
        let mut data = vec![0.0f32; n];
        for v in data.iter_mut().take(ones) {
            *v = 1.0;
        }
        PolicyOutput {
            logits: Tensor::zeros(vec![n]),
            soft: Tensor::full(vec![n], 0.5),
            hard: Tensor::new(data, vec![n]),
            stage,
        }
    }

    #[test]
    fn ratio_loss_zero_at_exact_budget() {
        let s = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        // Stage means exactly 0.7 and 0.49 over 100 tokens.
        let policies = vec![vec![pol_with_mean(100, 70, 0), pol_with_mean(100, 49, 1)]];
        let loss = ratio_loss(&policies, &s).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn ratio_loss_closed_form() {
        let s = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        // Stage means 1.0 against budgets 0.7, 0.49:
        // ((0.3)² + (0.51)²) / 2 = 0.17505
        let policies = vec![vec![pol_with_mean(50, 50, 0), pol_with_mean(50, 50, 1)]];
        let loss = ratio_loss(&policies, &s).unwrap();
        assert!((loss.item() - 0.17505).abs() < 1e-7, "{}", loss.item());
    }

    #[test]
    fn ratio_loss_batch_is_mean_of_per_image() {
        let s = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let l1 = ratio_loss(&[vec![pol_with_mean(64, 40, 0), pol_with_mean(64, 20, 1)]], &s)
            .unwrap()
            .item();
        let l2 = ratio_loss(&[vec![pol_with_mean(64, 64, 0), pol_with_mean(64, 10, 1)]], &s)
            .unwrap()
            .item();
        let both = ratio_loss(
            &[
                vec![pol_with_mean(64, 40, 0), pol_with_mean(64, 20, 1)],
                vec![pol_with_mean(64, 64, 0), pol_with_mean(64, 10, 1)],
            ],
            &s,
        )
        .unwrap()
        .item();
        assert!((both - 0.5 * (l1 + l2)).abs() < 1e-7);
    }

    #[test]
    fn ratio_loss_rejects_empty() {
        let s = PruneSchedule::default();
        assert!(ratio_loss(&[], &s).is_err());
        assert!(ratio_loss(&[vec![]], &s).is_err());
    }

    #[test]
    fn informed_loss_closed_form_and_linearity() {
        // p ≡ 0, T ≡ 0.5, one stage, λ = 8: loss = 8·ln 2.
        let logits = vec![vec![Tensor::zeros(vec![16])]];
        let target = vec![Tensor::full(vec![16], 0.5)];
        let loss = informed_policy_loss(&logits, &target, 8.0).unwrap();
        assert!((loss.item() - 8.0 * std::f32::consts::LN_2).abs() < 1e-5);
        let logits = vec![vec![Tensor::zeros(vec![16])]];
        let doubled = informed_policy_loss(&logits, &target, 16.0).unwrap();
        assert!((doubled.item() - 2.0 * loss.item()).abs() < 1e-6);
    }

    #[test]
    fn informed_loss_rejects_out_of_range_target() {
        let logits = vec![vec![Tensor::zeros(vec![4])]];
        let target = vec![Tensor::full(vec![4], 1.5)];
        assert!(informed_policy_loss(&logits, &target, 8.0).is_err());
    }

    #[test]
    fn informed_loss_saturated_correct_prediction_vanishes() {
        let t: Vec<f32> = vec![1.0, 0.0, 1.0, 0.0];
        let p: Vec<f32> = t.iter().map(|&v| if v > 0.5 { 30.0 } else { -30.0 }).collect();
        let loss = informed_policy_loss(
            &[vec![Tensor::new(p, vec![4])]],
            &[Tensor::new(t, vec![4])],
            8.0,
        )
        .unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn make_target_basics() {
        let ones = Tensor::ones(vec![8, 8]);
        let t = make_target(&ones, (2, 2)).unwrap();
        assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let zeros = Tensor::zeros(vec![8, 8]);
        let t = make_target(&zeros, (2, 2)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        let checker = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let t = make_target(&checker, (1, 1)).unwrap();
        assert!((t.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn select_inference_policy_counts() {
        let logits = Tensor::new((0..4096).map(|i| (i as f32 * 0.37).sin()).collect(), vec![4096]);
        assert_eq!(select_inference_policy(&logits, 0.49).unwrap().len(), 2007);
        assert_eq!(select_inference_policy(&logits, 0.343).unwrap().len(), 1405);
        let logits = Tensor::new((0..64).map(|i| i as f32).collect(), vec![64]);
        assert_eq!(select_inference_policy(&logits, 0.7).unwrap().len(), 45);
        let all = select_inference_policy(&logits, 1.0).unwrap();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(select_inference_policy(&logits, 0.0).is_err());
    }

    fn desk_backbone(rng: &mut Rng) -> Backbone {
        Backbone::init(
            BackboneConfig {
                image_hw: (32, 32),
                patch_hw: (4, 4),
                depth: 12,
                dim: 16,
                heads: 2,
                mlp_ratio: 2.0,
                layer_scale_init: 0.05,
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn infer_with_full_ratio_is_bitwise_dense() {
        let mut rng = Rng::new(10, 0);
        let bb = desk_backbone(&mut rng);
        let pred = Predictor::init(16, 1e-5, &mut rng);
        let schedule = PruneSchedule::new(3, 3, 1.0, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let pruned = pruned_forward_infer(&bb, &pred, &schedule, &img).unwrap();
        let (dense, _) = dense_forward(&bb, &img).unwrap();
        assert_eq!(pruned.state.tokens.data(), dense.tokens.data());
        assert!(pruned.per_block_active.iter().all(|&n| n == 64));
    }

    #[test]
    fn infer_active_counts_follow_schedule() {
        let mut rng = Rng::new(11, 0);
        let bb = desk_backbone(&mut rng);
        let pred = Predictor::init(16, 0.5, &mut rng);
        let schedule = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let out = pruned_forward_infer(&bb, &pred, &schedule, &img).unwrap();
        assert_eq!(
            out.per_block_active,
            vec![64, 64, 64, 45, 45, 45, 31, 31, 31, 22, 22, 22]
        );
        assert_eq!(out.snapshots.len(), 12);
    }

    #[test]
    fn never_reselected_token_keeps_stale_since_3() {
        let mut rng = Rng::new(12, 0);
        let bb = desk_backbone(&mut rng);
        // Constant logits: ties break to the lowest indices, so the top
        // tokens never include index 63 after block 3.
        let mut pred = Predictor::init(16, 1e-5, &mut rng);
        pred.w1 = Tensor::param(vec![0.0; 16 * 8], vec![16, 8]);
        pred.w2 = Tensor::param(vec![0.0; 8], vec![8, 1]);
        let schedule = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let out = pruned_forward_infer(&bb, &pred, &schedule, &img).unwrap();
        for (_, sel) in &out.stage_selections {
            assert!(!sel.contains(&63));
        }
        assert_eq!(out.state.stale_since[63], 3);
        assert_eq!(out.state.stale_since[0], 12);
    }

    #[test]
    fn train_forward_with_forced_keep_all_matches_dense() {
        let mut rng = Rng::new(13, 0);
        let bb = desk_backbone(&mut rng);
        // Large positive bias with unit output scale saturates keep.
        let mut pred = Predictor::init(16, 1e-5, &mut rng);
        pred.b2 = Tensor::param(vec![60.0], vec![1]);
        pred.ls = Tensor::param(vec![1.0], vec![1]);
        let schedule = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let mut fwd_rng = Rng::new(99, 0);
        let out = pruned_forward_train(
            &bb,
            &pred,
            &schedule,
            &img,
            &mut fwd_rng,
            None,
            &TrainFwdOpts::default(),
        )
        .unwrap();
        assert!(out
            .policies
            .iter()
            .all(|p| p.hard.data().iter().all(|&v| v == 1.0)));
        let (dense, _) = dense_forward(&bb, &img).unwrap();
        for (a, b) in out.final_tokens.data().iter().zip(dense.tokens.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn train_forward_policies_and_taps() {
        let mut rng = Rng::new(14, 0);
        let bb = desk_backbone(&mut rng);
        let pred = Predictor::init(16, 0.5, &mut rng);
        let schedule = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let mut fwd_rng = Rng::new(7, 0);
        let taps = [8, 9, 10, 11];
        let out = pruned_forward_train(
            &bb,
            &pred,
            &schedule,
            &img,
            &mut fwd_rng,
            None,
            &TrainFwdOpts {
                taps: &taps,
                ..TrainFwdOpts::default()
            },
        )
        .unwrap();
        assert_eq!(out.policies.len(), 3);
        assert_eq!(out.policies.iter().map(|p| p.stage).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(out.taps.len(), 4);
        assert_eq!(out.taps.last().unwrap().0, 11);
        assert_eq!(out.taps.last().unwrap().1.data(), out.final_tokens.data());
    }

    #[test]
    fn train_forward_gradients_reach_predictor() {
        let mut rng = Rng::new(15, 0);
        let bb = desk_backbone(&mut rng);
        let pred = Predictor::init(16, 0.5, &mut rng);
        let schedule = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let mut fwd_rng = Rng::new(5, 0);
        let out = pruned_forward_train(
            &bb,
            &pred,
            &schedule,
            &img,
            &mut fwd_rng,
            None,
            &TrainFwdOpts::default(),
        )
        .unwrap();
        let policies = vec![out.policies];
        let loss = ratio_loss(&policies, &schedule).unwrap();
        let total = loss.add(&out.final_tokens.mean_all().unwrap()).unwrap();
        total.backward().unwrap();
        let g = pred.w1.grad().expect("predictor got gradient");
        let norm: f32 = g.iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn train_forward_with_route_mixes_stale_rows() {
        let mut rng = Rng::new(16, 0);
        let bb = desk_backbone(&mut rng);
        let pred = Predictor::init(16, 0.5, &mut rng);
        let schedule = PruneSchedule::new(3, 3, 0.7, 12).unwrap();
        let img = Tensor::new((0..3 * 32 * 32).map(|_| rng.next_f32()).collect(), vec![3, 32, 32]);
        let route = RouteSpec {
            l: 4,
            n: 8,
            kept_idx: (0..32).collect(),
            routed_idx: (32..64).collect(),
        };
        let mut fwd_rng = Rng::new(3, 0);
        let out = pruned_forward_train(
            &bb,
            &pred,
            &schedule,
            &img,
            &mut fwd_rng,
            Some(&route),
            &TrainFwdOpts::default(),
        )
        .unwrap();
        // Policies still cover all three stages over the full token count.
        assert_eq!(out.policies.len(), 3);
        assert!(out.policies.iter().all(|p| p.hard.numel() == 64));
        out.final_tokens.mean_all().unwrap().backward().unwrap();
        assert!(bb.patch.weight.grad().is_some());
        let mut bb = bb;
        bb.visit_params(&mut |_, t| t.zero_grad());
    }
}
