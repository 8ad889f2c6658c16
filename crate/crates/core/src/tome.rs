//! Token merging baseline: per-block merge → compute → unmerge.
//!
//! Tokens alternate into source/destination sets by index parity; each
//! source is matched to its most cosine-similar destination (attention keys
//! as features) and the r highest-similarity sources are averaged into
//! their destinations before the block's computation. Proportional
//! attention adds ln(multiplicity) to merged keys' logits. Merging is
//! undone after the MHSA (scope `Mhsa`) or after the MLP (scope `MhsaMlp`),
//! so every block starts from the full token count — no token ever carries
//! a stale representation.

use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{block_core, mhsa, Backbone, Block, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToMeScope {
    /// Merge around the attention only; the MLP sees all tokens.
    Mhsa,
    /// Merge before attention, unmerge after the MLP.
    MhsaMlp,
}

/// Result of bipartite soft matching over the active tokens.
#[derive(Debug, Clone)]
pub struct MergeMap {
    /// (source, destination) merges, highest similarity first.
    pub pairs: Vec<(usize, usize)>,
    /// Output row -> constituent input rows (original indices). Unmerged
    /// rows are singleton groups; order follows the surviving tokens'
    /// original order.
    pub groups: Vec<Vec<usize>>,
    /// Multiplicity of each output row.
    pub sizes: Vec<usize>,
}

impl MergeMap {
    pub fn n_out(&self) -> usize {
        self.groups.len()
    }
}

/// Alternate tokens into src (even index) / dst (odd index), match each src
/// to its most similar dst by cosine over `keys`, and merge the r most
/// similar sources. Ties break toward lower indices.
pub fn bipartite_soft_match(tokens: &Tensor, keys: &Tensor, r: usize) -> Result<MergeMap> {
    let (n, _) = tokens.dims2("bipartite_soft_match")?;
    let (nk, dk) = keys.dims2("bipartite_soft_match")?;
    if nk != n {
        return Err(TensorError::Shape {
            op: "bipartite_soft_match",
            detail: format!("{n} tokens vs {nk} key rows"),
        });
    }
    if r > n / 2 {
        return Err(TensorError::Shape {
            op: "bipartite_soft_match",
            detail: format!("r={r} exceeds floor({n}/2)"),
        });
    }
    let src: Vec<usize> = (0..n).step_by(2).collect();
    let dst: Vec<usize> = (1..n).step_by(2).collect();

    // Row-normalized keys for cosine similarity.
    let kd = keys.data();
    let norm = |i: usize| -> f32 {
        kd[i * dk..(i + 1) * dk].iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12)
    };
    let mut best: Vec<(f32, usize)> = Vec::with_capacity(src.len()); // (sim, dst) per src
    for &s in &src {
        let ns = norm(s);
        let mut best_sim = f32::NEG_INFINITY;
        let mut best_d = usize::MAX;
        for &d in &dst {
            let dot: f32 = kd[s * dk..(s + 1) * dk]
                .iter()
                .zip(&kd[d * dk..(d + 1) * dk])
                .map(|(a, b)| a * b)
                .sum();
            let sim = dot / (ns * norm(d));
            if sim > best_sim {
                best_sim = sim;
                best_d = d;
            }
        }
        best.push((best_sim, best_d));
    }
    // Rank sources by similarity, highest first; stable on ties.
    let mut order: Vec<usize> = (0..src.len()).collect();
    order.sort_by(|&a, &b| best[b].0.partial_cmp(&best[a].0).expect("finite similarity"));
    let mut merged_src = vec![false; n];
    let mut pairs = Vec::with_capacity(r);
    for &si in order.iter().take(r) {
        pairs.push((src[si], best[si].1));
        merged_src[src[si]] = true;
    }

    let mut into: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in &pairs {
        into[d].push(s);
    }
    let mut groups = Vec::with_capacity(n - r);
    let mut sizes = Vec::with_capacity(n - r);
    for i in 0..n {
        if merged_src[i] {
            continue;
        }
        let mut g = vec![i];
        g.extend(into[i].iter().copied());
        sizes.push(g.len());
        groups.push(g);
    }
    Ok(MergeMap {
        pairs,
        groups,
        sizes,
    })
}

/// Average merged tokens into their destinations; unmerged rows copy through.
pub fn merge(tokens: &Tensor, map: &MergeMap) -> Result<Tensor> {
    tokens.group_mean_rows(&map.groups)
}

/// Give every constituent of a merged row a copy of that row.
pub fn unmerge(merged: &Tensor, map: &MergeMap) -> Result<Tensor> {
    let n: usize = map.groups.iter().map(|g| g.len()).sum();
    merged.expand_rows(&map.groups, n)
}

fn size_bias(map: &MergeMap) -> Option<Tensor> {
    if map.sizes.iter().all(|&s| s == 1) {
        return None;
    }
    let bias: Vec<f32> = map.sizes.iter().map(|&s| (s as f32).ln()).collect();
    Some(Tensor::new(bias, vec![map.n_out()]))
}

/// One transformer block under token merging.
pub fn tome_block_forward(
    x: &Tensor,
    r: usize,
    scope: ToMeScope,
    block: &Block,
    heads: usize,
) -> Result<Tensor> {
    if r == 0 {
        return block_core(x, None, None, block, heads);
    }
    let (_, d) = x.dims2("tome_block_forward")?;
    let normed = x.layer_norm(&block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
    // Match on mean-over-heads attention keys; the matching is discrete, so
    // keys are computed off the tape.
    let keys = crate::tensor::no_grad(|| -> Result<Tensor> {
        let k = normed
            .detach()
            .matmul(&block.w_qkv.detach())?
            .add_row_vec(&block.b_qkv.detach())?
            .col_slice(d, 2 * d)?;
        let dk = d / heads;
        let mut acc = k.col_slice(0, dk)?;
        for h in 1..heads {
            acc = acc.add(&k.col_slice(h * dk, (h + 1) * dk)?)?;
        }
        acc.scale(1.0 / heads as f32)
    })?;
    let map = bipartite_soft_match(x, &keys, r)?;
    let bias = size_bias(&map);

    match scope {
        ToMeScope::Mhsa => {
            let merged = merge(&normed, &map)?;
            let attn = mhsa(&merged, None, bias.as_ref(), block, heads)?;
            let h = x.add(&unmerge(&attn, &map)?.mul_row_vec(&block.ls1)?)?;
            let normed2 = h.layer_norm(&block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
            let mlp = normed2
                .matmul(&block.w_fc1)?
                .add_row_vec(&block.b_fc1)?
                .gelu()?
                .matmul(&block.w_fc2)?
                .add_row_vec(&block.b_fc2)?;
            h.add(&mlp.mul_row_vec(&block.ls2)?)
        }
        ToMeScope::MhsaMlp => {
            let merged_x = merge(x, &map)?;
            let out = block_core_with_bias(&merged_x, bias.as_ref(), block, heads)?;
            unmerge(&out, &map)
        }
    }
}

fn block_core_with_bias(
    x: &Tensor,
    key_bias: Option<&Tensor>,
    block: &Block,
    heads: usize,
) -> Result<Tensor> {
    block_core(x, None, key_bias, block, heads)
}

/// Per-block merge count for a merge fraction of the current tokens,
/// clamped to the bipartite maximum of half.
pub fn merge_count(n_active: usize, fraction: f32) -> usize {
    ((fraction as f64 * n_active as f64).floor() as usize).min(n_active / 2)
}

/// Full forward pass with merging applied at every block.
pub fn tome_forward(
    backbone: &Backbone,
    image: &Tensor,
    merge_fraction: f32,
    scope: ToMeScope,
) -> Result<(Tensor, Vec<Tensor>)> {
    let n = backbone.cfg.n_tokens();
    let r = merge_count(n, merge_fraction);
    let mut x = crate::vit::patch_embed(image, &backbone.patch, &backbone.cfg)?;
    let mut snapshots = Vec::with_capacity(backbone.cfg.depth);
    for block in &backbone.blocks {
        x = tome_block_forward(&x, r, scope, block, backbone.cfg.heads)?;
        snapshots.push(x.clone());
    }
    Ok((x, snapshots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::vit::{dense_forward, Backbone, BackboneConfig};

    fn rand_mat(r: usize, c: usize, rng: &mut Rng) -> Tensor {
        Tensor::new((0..r * c).map(|_| rng.normal_f32()).collect(), vec![r, c])
    }

    #[test]
    fn r_zero_is_identity_map() {
        let mut rng = Rng::new(0, 0);
        let x = rand_mat(6, 4, &mut rng);
        let keys = rand_mat(6, 2, &mut rng);
        let map = bipartite_soft_match(&x, &keys, 0).unwrap();
        assert!(map.pairs.is_empty());
        assert_eq!(map.n_out(), 6);
        let merged = merge(&x, &map).unwrap();
        assert_eq!(merged.data(), x.data());
        let back = unmerge(&merged, &map).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn merge_count_and_shapes() {
        let mut rng = Rng::new(1, 0);
        let x = rand_mat(16, 4, &mut rng);
        let keys = rand_mat(16, 2, &mut rng);
        let map = bipartite_soft_match(&x, &keys, 8).unwrap();
        assert_eq!(map.pairs.len(), 8);
        let merged = merge(&x, &map).unwrap();
        assert_eq!(merged.shape(), &[8, 4]);
        assert!(bipartite_soft_match(&x, &keys, 9).is_err());
        assert_eq!(merge_count(16, 0.5), 8);
        assert_eq!(merge_count(16, 0.9), 8); // clamped to n/2
        assert_eq!(merge_count(10, 0.3), 3);
    }

    #[test]
    fn duplicates_merge_first() {
        let mut rng = Rng::new(2, 0);
        let mut keys_data: Vec<f32> = (0..8 * 3).map(|_| rng.normal_f32()).collect();
        // Token 4 (src) duplicates token 7 (dst): cosine similarity 1.
        let dup: Vec<f32> = keys_data[7 * 3..8 * 3].to_vec();
        keys_data[4 * 3..5 * 3].copy_from_slice(&dup);
        let keys = Tensor::new(keys_data, vec![8, 3]);
        let x = rand_mat(8, 4, &mut rng);
        let map = bipartite_soft_match(&x, &keys, 1).unwrap();
        assert_eq!(map.pairs, vec![(4, 7)]);
    }

    #[test]
    fn merging_averages_and_unmerge_copies() {
        let x = Tensor::new(
            vec![
                1.0, 2.0, // 0 src
                3.0, 6.0, // 1 dst
                10.0, 20.0, // 2 src
                -1.0, -2.0, // 3 dst
            ],
            vec![4, 2],
        );
        let map = MergeMap {
            pairs: vec![(0, 1)],
            groups: vec![vec![1, 0], vec![2], vec![3]],
            sizes: vec![2, 1, 1],
        };
        let merged = merge(&x, &map).unwrap();
        assert_eq!(merged.data(), &[2.0, 4.0, 10.0, 20.0, -1.0, -2.0]);
        let back = unmerge(&merged, &map).unwrap();
        assert_eq!(back.data(), &[2.0, 4.0, 2.0, 4.0, 10.0, 20.0, -1.0, -2.0]);
        // Unmerged rows are value-preserved through the roundtrip.
        assert_eq!(&back.data()[4..], &x.data()[4..]);
    }

    #[test]
    fn merging_identical_rows_leaves_values() {
        let x = Tensor::new(vec![5.0, -1.0, 5.0, -1.0], vec![2, 2]);
        let map = MergeMap {
            pairs: vec![(0, 1)],
            groups: vec![vec![1, 0]],
            sizes: vec![2],
        };
        let merged = merge(&x, &map).unwrap();
        assert_eq!(merged.data(), &[5.0, -1.0]);
    }

    fn small_backbone(rng: &mut Rng) -> Backbone {
        Backbone::init(
            BackboneConfig {
                image_hw: (16, 16),
                patch_hw: (4, 4),
                depth: 3,
                dim: 8,
                heads: 2,
                mlp_ratio: 2.0,
                layer_scale_init: 0.1,
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn r_zero_forward_matches_dense() {
        let mut rng = Rng::new(3, 0);
        let bb = small_backbone(&mut rng);
        let img = Tensor::new((0..3 * 16 * 16).map(|_| rng.next_f32()).collect(), vec![3, 16, 16]);
        for scope in [ToMeScope::Mhsa, ToMeScope::MhsaMlp] {
            let (out, snaps) = tome_forward(&bb, &img, 0.0, scope).unwrap();
            let (dense, _) = dense_forward(&bb, &img).unwrap();
            assert_eq!(snaps.len(), 3);
            for (a, b) in out.data().iter().zip(dense.tokens.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    /// With two bitwise-identical tokens, merging them under proportional
    /// attention reproduces the dense block exactly (up to fp noise): the
    /// ln(2) key bias doubles the merged key's exp-weight, which is what the
    /// two separate identical keys contributed densely.
    #[test]
    fn merging_duplicates_preserves_block_output() {
        let mut rng = Rng::new(4, 0);
        let bb = small_backbone(&mut rng);
        let block = &bb.blocks[0];
        let mut data: Vec<f32> = (0..16 * 8).map(|_| rng.normal_f32()).collect();
        // Token 6 (src position) duplicates token 9 (dst position).
        let dup: Vec<f32> = data[9 * 8..10 * 8].to_vec();
        data[6 * 8..7 * 8].copy_from_slice(&dup);
        let x = Tensor::new(data, vec![16, 8]);

        for scope in [ToMeScope::Mhsa, ToMeScope::MhsaMlp] {
            let merged_out = tome_block_forward(&x, 1, scope, block, 2).unwrap();
            let dense_out = block_core(&x, None, None, block, 2).unwrap();
            for (i, (a, b)) in merged_out.data().iter().zip(dense_out.data()).enumerate() {
                assert!(
                    (a - b).abs() < 1e-5,
                    "scope {scope:?} elem {i}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn tome_blocks_are_differentiable() {
        let mut rng = Rng::new(5, 0);
        let bb = small_backbone(&mut rng);
        let x = Tensor::param((0..16 * 8).map(|_| rng.normal_f32()).collect(), vec![16, 8]);
        let out = tome_block_forward(&x, 4, ToMeScope::MhsaMlp, &bb.blocks[0], 2).unwrap();
        out.mean_all().unwrap().backward().unwrap();
        assert!(x.grad().unwrap().iter().any(|&v| v != 0.0));
        assert!(bb.blocks[0].w_qkv.grad().is_some());
        bb.blocks[0].w_qkv.zero_grad();
    }
}
