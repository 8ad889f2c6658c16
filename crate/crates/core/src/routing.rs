//! Train-time token routing.
//!
//! A route r_{l→n} gathers a kept subset of tokens at block l, runs blocks
//! l..=n on the gathered submatrix only, and scatters the result back over
//! the stale full representation after block n. The routed complement keeps
//! its block-l values ("stale") and re-enters computation at block n+1.
//! Random-bounds routing resamples (l, n) and the routed subset every
//! forward pass; fixed-bounds routing pins l = 2, n = L-2.
//!
//! Routing is a training-only construct: inference paths take no
//! [`RouteSpec`] and cannot build one.

use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};
use crate::vit::{block_core, Block};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    Random,
    Fixed,
}

/// One sampled route: block bounds plus the kept/routed index partition.
#[derive(Debug, Clone)]
pub struct RouteSpec {
    pub l: usize,
    pub n: usize,
    pub kept_idx: Vec<usize>,
    pub routed_idx: Vec<usize>,
}

fn route_err(detail: String) -> TensorError {
    TensorError::Shape {
        op: "sample_route",
        detail,
    }
}

/// Draw a route. Random mode: l ~ Unif{2..⌊L/2⌋}, n ~ Unif{l..L-2}, both
/// inclusive; fixed mode pins (2, L-2). The routed subset has
/// ⌊route_fraction·N⌋ tokens drawn uniformly without replacement.
/// Draw order is l, then n, then the subset.
pub fn sample_route(
    depth: usize,
    n_tokens: usize,
    route_fraction: f32,
    mode: RouteMode,
    rng: &mut Rng,
) -> Result<RouteSpec> {
    if depth < 5 {
        return Err(route_err(format!("depth {depth} < 5 leaves no valid bounds")));
    }
    if !(0.0..=1.0).contains(&route_fraction) {
        return Err(route_err(format!("route_fraction {route_fraction} outside [0, 1]")));
    }
    let (l, n) = match mode {
        RouteMode::Random => {
            let l = rng.range_inclusive(2, depth / 2);
            let n = rng.range_inclusive(l, depth - 2);
            (l, n)
        }
        RouteMode::Fixed => (2, depth - 2),
    };
    let n_routed = (route_fraction as f64 * n_tokens as f64).floor() as usize;
    if n_routed >= n_tokens {
        return Err(route_err(format!(
            "route_fraction {route_fraction} leaves no kept tokens"
        )));
    }
    let mut routed_idx = rng.subset(n_tokens, n_routed);
    routed_idx.sort_unstable();
    let routed_set: Vec<bool> = {
        let mut s = vec![false; n_tokens];
        for &i in &routed_idx {
            s[i] = true;
        }
        s
    };
    let kept_idx: Vec<usize> = (0..n_tokens).filter(|&i| !routed_set[i]).collect();
    Ok(RouteSpec {
        l,
        n,
        kept_idx,
        routed_idx,
    })
}

/// Output of a routed span: the scattered full representation after block n,
/// plus scattered snapshots at the requested tap blocks.
pub struct SpanOutput {
    pub full: Tensor,
    pub taps: Vec<(usize, Tensor)>,
}

/// Run blocks l..=n on the kept subset only.
///
/// `policy_hook` fires at each block listed in `boundary_blocks` with the
/// scattered full representation (fresh kept rows + stale routed rows) and
/// returns the attention mask to use over the kept submatrix from that block
/// on (None = unmasked). `initial_mask` covers blocks before the first
/// boundary when a pruning stage is already in flight at block l.
#[allow(clippy::too_many_arguments)]
pub fn routed_span_forward(
    entry_full: &Tensor,
    route: &RouteSpec,
    blocks: &[Block],
    heads: usize,
    initial_mask: Option<Tensor>,
    boundary_blocks: &[usize],
    taps: &[usize],
    policy_hook: &mut dyn FnMut(usize, &Tensor) -> Result<Option<Tensor>>,
) -> Result<SpanOutput> {
    if route.l > route.n || route.n >= blocks.len() {
        return Err(TensorError::Index {
            op: "routed_span_forward",
            detail: format!("route {}..{} outside 0..{}", route.l, route.n, blocks.len()),
        });
    }
    let kept = &route.kept_idx;
    let mut cur = entry_full.gather_rows(kept)?;
    let mut mask = initial_mask;
    let mut taps_out = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for b in route.l..=route.n {
        if boundary_blocks.contains(&b) {
            let scattered = cur.scatter_rows(kept, entry_full)?;
            mask = policy_hook(b, &scattered)?;
        }
        cur = block_core(&cur, mask.as_ref(), None, &blocks[b], heads)?;
        if taps.contains(&b) {
            taps_out.push((b, cur.scatter_rows(kept, entry_full)?));
        }
    }
    let full = cur.scatter_rows(kept, entry_full)?;
    Ok(SpanOutput {
        full,
        taps: taps_out,
    })
}
