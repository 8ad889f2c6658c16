//! Dense binary-segmentation head, training loss, and evaluation metrics.
//!
//! The head is a per-token linear probe: D → 1 logits reshaped onto the
//! patch grid and bilinearly upsampled to image resolution. Training uses
//! BCE plus soft Dice. Evaluation reports the Dice coefficient of the
//! thresholded mask and exact average precision over all pixel thresholds;
//! auxiliary per-block heads support the depth-wise analysis.

use serde::Serialize;

use crate::model::{Model, ModelMode};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

pub struct SegHead {
    pub weight: Tensor, // [D, 1]
    pub bias: Tensor,   // [1]
}

impl SegHead {
    pub fn init(dim: usize, rng: &mut Rng) -> SegHead {
        SegHead {
            weight: Tensor::param(
                (0..dim).map(|_| rng.trunc_normal_f32(0.02)).collect(),
                vec![dim, 1],
            ),
            bias: Tensor::param(vec![0.0], vec![1]),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-token logits plus their upsampled dense map.
pub struct SegLogits {
    pub token_logits: Tensor, // [N]
    pub grid: (usize, usize),
    pub full: Tensor, // [H, W]
}

/// Linear head over token features, reshaped to the patch grid and
/// bilinearly upsampled to the target resolution.
pub fn head_forward(
    tokens: &Tensor,
    head: &SegHead,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> Result<SegLogits> {
    let (n, _) = tokens.dims2("head_forward")?;
    let (gh, gw) = grid;
    if gh * gw != n {
        return Err(TensorError::Shape {
            op: "head_forward",
            detail: format!("grid {gh}x{gw} vs {n} tokens"),
        });
    }
    let lin = tokens.matmul(&head.weight)?.add_row_vec(&head.bias)?;
    let token_logits = lin.reshape(vec![n])?;
    let full = token_logits
        .reshape(vec![gh, gw])?
        .bilinear_resize(out_hw.0, out_hw.1)?;
    Ok(SegLogits {
        token_logits,
        grid,
        full,
    })
}

const DICE_EPS: f32 = 1.0;

/// BCE with logits plus soft-Dice complement:
/// BCE(σ(z), gt) + (1 − (2Σpg + ε)/(Σp + Σg + ε)), ε = 1.
pub fn seg_loss(logits: &SegLogits, gt: &Tensor) -> Result<Tensor> {
    if logits.full.shape() != gt.shape() {
        return Err(TensorError::Shape {
            op: "seg_loss",
            detail: format!("logits {:?} vs gt {:?}", logits.full.shape(), gt.shape()),
        });
    }
    let bce = logits.full.bce_with_logits(gt)?.mean_all()?;
    let p = logits.full.sigmoid()?;
    let inter = p.mul(gt)?.sum_all()?;
    let num = inter.affine(2.0, DICE_EPS)?;
    let den = p.sum_all()?.add(&gt.sum_all()?)?.affine(1.0, DICE_EPS)?;
    let soft_dice = num.div(&den)?;
    bce.add(&soft_dice.affine(-1.0, 1.0)?)
}

/// Dice coefficient of two binary masks: 2|P∩G| / (|P| + |G|).
/// Defined as 1.0 when both masks are empty.
pub fn dice(pred: &[f32], gt: &[f32]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice: length mismatch");
    let mut inter = 0u64;
    let mut p_count = 0u64;
    let mut g_count = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let pb = p > 0.5;
        let gb = g > 0.5;
        p_count += pb as u64;
        g_count += gb as u64;
        inter += (pb && gb) as u64;
    }
    if p_count + g_count == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p_count + g_count) as f64
}

/// Exact average precision over all score thresholds:
/// AP = Σ_k (R_k − R_{k−1}) · P_k in descending score order, with equal
/// scores grouped into one threshold. Returns 0 when there are no
/// positives.
pub fn average_precision(scores: &[f32], gt: &[f32]) -> f64 {
    assert_eq!(scores.len(), gt.len(), "average_precision: length mismatch");
    let pos_total: u64 = gt.iter().filter(|&&g| g > 0.5).count() as u64;
    if pos_total == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut ap = 0.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group at this score.
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if gt[order[j]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / pos_total as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    ap
}

/// Kahan-compensated accumulator so metric means are order-independent in
/// practice.
#[derive(Default)]
pub struct Compensated {
    sum: f64,
    c: f64,
    n: usize,
}

impl Compensated {
    pub fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
        self.n += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Evaluation tap: an intermediate block's auxiliary head or the main head
/// on the final scattered output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Block(usize),
    Final,
}

impl Tap {
    pub fn label(&self) -> String {
        match self {
            Tap::Block(b) => format!("block{b}"),
            Tap::Final => "final".into(),
        }
    }
}

/// One evaluation summary: Dice and AP at the final output plus AP per
/// requested tap.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dice: f64,
    pub ap: f64,
    pub per_block: Vec<(String, f64)>,
}

/// Mean Dice/AP of the main head over a set of samples.
pub fn evaluate(model: &Model, mode: &ModelMode, samples: &[crate::data::Sample]) -> Result<EvalReport> {
    let mut dice_acc = Compensated::default();
    let mut ap_acc = Compensated::default();
    for s in samples {
        let fwd = model.forward_infer(&s.image, mode)?;
        let logits = crate::tensor::no_grad(|| {
            head_forward(
                &fwd.final_tokens,
                &model.head,
                model.backbone.cfg.grid(),
                model.backbone.cfg.image_hw,
            )
        })?;
        let pred: Vec<f32> = logits
            .full
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        dice_acc.add(dice(&pred, s.mask.data()));
        ap_acc.add(average_precision(logits.full.data(), s.mask.data()));
    }
    Ok(EvalReport {
        dice: dice_acc.mean(),
        ap: ap_acc.mean(),
        per_block: Vec::new(),
    })
}

/// AP per tap under the model's inference policy. Intermediate taps use the
/// per-block auxiliary heads; `Tap::Final` uses the main head.
pub fn depthwise_eval(
    model: &Model,
    mode: &ModelMode,
    samples: &[crate::data::Sample],
    taps: &[Tap],
) -> Result<Vec<(Tap, f64)>> {
    let mut accs: Vec<Compensated> = taps.iter().map(|_| Compensated::default()).collect();
    for s in samples {
        let fwd = model.forward_infer(&s.image, mode)?;
        for (tap, acc) in taps.iter().zip(&mut accs) {
            let (tokens, head) = match tap {
                Tap::Final => (&fwd.final_tokens, &model.head),
                Tap::Block(b) => {
                    let tokens = fwd.snapshots.get(*b).ok_or_else(|| TensorError::Index {
                        op: "depthwise_eval",
                        detail: format!("no snapshot for block {b}"),
                    })?;
                    let head = model.aux_head(*b).ok_or_else(|| TensorError::Index {
                        op: "depthwise_eval",
                        detail: format!("no auxiliary head at block {b}"),
                    })?;
                    (tokens, head)
                }
            };
            let logits = crate::tensor::no_grad(|| {
                head_forward(tokens, head, model.backbone.cfg.grid(), model.backbone.cfg.image_hw)
            })?;
            acc.add(average_precision(logits.full.data(), s.mask.data()));
        }
    }
    Ok(taps.iter().copied().zip(accs.iter().map(|a| a.mean())).collect())
}
