//! Post-hoc analyses: inter-block representation similarity and per-token
//! policy selection frequency.

use super::HarnessError;
use crate::model::{Model, ModelMode};
use crate::pruning::PruneSchedule;
use crate::tensor::Tensor;

/// Mean-over-tokens cosine similarity between the full token matrices after
/// every pair of blocks. Returns an L×L symmetric matrix with unit
/// diagonal.
pub fn simcheck(model: &Model, mode: &ModelMode, image: &Tensor) -> Result<Vec<Vec<f64>>, HarnessError> {
    let out = model.forward_infer(image, mode)?;
    let snaps = &out.snapshots;
    let l = snaps.len();
    let mut sim = vec![vec![0.0f64; l]; l];
    for i in 0..l {
        for j in i..l {
            let s = mean_token_cosine(&snaps[i], &snaps[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

/// Mean over rows of the cosine similarity between corresponding rows.
pub fn mean_token_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.shape()[1];
    let n = a.shape()[0];
    let mut acc = 0.0f64;
    for r in 0..n {
        let ra = &a.data()[r * d..(r + 1) * d];
        let rb = &b.data()[r * d..(r + 1) * d];
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = ra.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        acc += dot / (na * nb).max(1e-12);
    }
    acc / n as f64
}

/// Mean similarity of consecutive block outputs over blocks
/// [from_block, L).
pub fn mean_consecutive_similarity(sim: &[Vec<f64>], from_block: usize) -> f64 {
    let l = sim.len();
    let mut acc = 0.0;
    let mut count = 0;
    for i in from_block..l.saturating_sub(1) {
        acc += sim[i][i + 1];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Per-token selection frequency across the pruned blocks of one inference
/// pass: counts how often each token is active in blocks
/// [first_block, depth), normalized by the pruned block count.
pub fn policy_frequency(
    model: &Model,
    schedule: &PruneSchedule,
    image: &Tensor,
) -> Result<Vec<f64>, HarnessError> {
    let out = model.forward_infer(image, &ModelMode::Prune(schedule.clone()))?;
    let n = model.backbone.cfg.n_tokens();
    let mut counts = vec![0usize; n];
    let pruned_blocks = schedule.depth - schedule.first_block;
    for b in schedule.first_block..schedule.depth {
        // Selection in force at block b = the latest stage start <= b.
        let sel = out
            .stage_selections
            .iter()
            .rev()
            .find(|(start, _)| *start <= b)
            .map(|(_, sel)| sel);
        if let Some(sel) = sel {
            for &i in sel {
                counts[i] += 1;
            }
        }
    }
    Ok(counts
        .iter()
        .map(|&c| c as f64 / pruned_blocks as f64)
        .collect())
}
