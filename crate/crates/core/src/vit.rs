//! Patch embedding and transformer blocks with pruning-aware masked
//! attention.
//!
//! Blocks are pre-norm residual with per-channel layer scale on both
//! branches. Attention accepts an optional exp-space policy mask (applied
//! identically to every head) and an optional per-key logit bias (used by
//! the token-merging baseline for proportional attention).
//!
//! [`block_forward`] only computes the rows listed in the token state's
//! active set: it gathers them, runs the block, and scatters the results
//! back, leaving inactive rows bitwise untouched. Training-time attention
//! masking and inference-time gathering are therefore the same code path
//! with different active sets.

use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_hw: (usize, usize),
    pub patch_hw: (usize, usize),
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub layer_scale_init: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Desk-scale: 64x64 image, 8x8 patches -> 64 tokens, trains on CPU
        // in minutes.
        BackboneConfig {
            image_hw: (64, 64),
            patch_hw: (8, 8),
            depth: 12,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            layer_scale_init: 1e-5,
        }
    }
}

fn cfg_err(detail: String) -> TensorError {
    TensorError::Shape {
        op: "backbone_config",
        detail,
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        let (ph, pw) = self.patch_hw;
        if ph == 0 || pw == 0 || !h.is_multiple_of(ph) || !w.is_multiple_of(pw) {
            return Err(cfg_err(format!(
                "image {h}x{w} not divisible by patch {ph}x{pw}"
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(cfg_err(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(cfg_err("depth must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch_hw.0, self.image_hw.1 / self.patch_hw.1)
    }

    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_hw.0 * self.patch_hw.1
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f32 * self.mlp_ratio).round() as usize
    }
}

/// Full token matrix plus bookkeeping of which rows are currently computed.
///
/// `stale_since[i] = l` means row i currently holds its value as of the
/// input to block l (i.e. it was last written by block l-1).
#[derive(Debug, Clone)]
pub struct TokenState {
    pub tokens: Tensor,
    pub active_idx: Vec<usize>,
    pub stale_since: Vec<usize>,
}

impl TokenState {
    /// All tokens fresh at the embedding output.
    pub fn fresh(tokens: Tensor) -> TokenState {
        let n = tokens.shape()[0];
        TokenState {
            tokens,
            active_idx: (0..n).collect(),
            stale_since: vec![0; n],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.stale_since.len()
    }

    pub fn is_fully_active(&self) -> bool {
        self.active_idx.len() == self.n_tokens()
            && self.active_idx.iter().enumerate().all(|(i, &v)| i == v)
    }
}

pub struct PatchEmbed {
    pub weight: Tensor, // [patch_dim, D]
    pub bias: Tensor,   // [D]
    pub pos: Tensor,    // [N, D]
}

pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_qkv: Tensor, // [D, 3D]
    pub b_qkv: Tensor, // [3D]
    pub w_proj: Tensor, // [D, D]
    pub b_proj: Tensor, // [D]
    pub ls1: Tensor,    // [D]
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc1: Tensor, // [D, hidden]
    pub b_fc1: Tensor, // [hidden]
    pub w_fc2: Tensor, // [hidden, D]
    pub b_fc2: Tensor, // [D]
    pub ls2: Tensor,   // [D]
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch: PatchEmbed,
    pub blocks: Vec<Block>,
}

pub const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.trunc_normal_f32(INIT_STD)).collect();
    Tensor::param(data, vec![rows, cols])
}

fn init_vec(n: usize, value: f32) -> Tensor {
    Tensor::param(vec![value; n], vec![n])
}

impl Block {
    fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Block {
        let d = cfg.dim;
        let hidden = cfg.mlp_hidden();
        Block {
            ln1_gamma: init_vec(d, 1.0),
            ln1_beta: init_vec(d, 0.0),
            w_qkv: init_matrix(d, 3 * d, rng),
            b_qkv: init_vec(3 * d, 0.0),
            w_proj: init_matrix(d, d, rng),
            b_proj: init_vec(d, 0.0),
            ls1: init_vec(d, cfg.layer_scale_init),
            ln2_gamma: init_vec(d, 1.0),
            ln2_beta: init_vec(d, 0.0),
            w_fc1: init_matrix(d, hidden, rng),
            b_fc1: init_vec(hidden, 0.0),
            w_fc2: init_matrix(hidden, d, rng),
            b_fc2: init_vec(d, 0.0),
            ls2: init_vec(d, cfg.layer_scale_init),
        }
    }
}

impl Backbone {
    pub fn init(cfg: BackboneConfig, rng: &mut Rng) -> Result<Backbone> {
        cfg.validate()?;
        let n = cfg.n_tokens();
        let pos_data: Vec<f32> = (0..n * cfg.dim).map(|_| rng.trunc_normal_f32(INIT_STD)).collect();
        let patch = PatchEmbed {
            weight: init_matrix(cfg.patch_dim(), cfg.dim, rng),
            bias: init_vec(cfg.dim, 0.0),
            pos: Tensor::param(pos_data, vec![n, cfg.dim]),
        };
        let blocks = (0..cfg.depth).map(|_| Block::init(&cfg, rng)).collect();
        Ok(Backbone { cfg, patch, blocks })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("patch.weight".into(), &mut self.patch.weight);
        f("patch.bias".into(), &mut self.patch.bias);
        f("patch.pos".into(), &mut self.patch.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut v = |name: &str, t: &mut Tensor| f(format!("blocks.{i}.{name}"), t);
            v("ln1.gamma", &mut b.ln1_gamma);
            v("ln1.beta", &mut b.ln1_beta);
            v("attn.w_qkv", &mut b.w_qkv);
            v("attn.b_qkv", &mut b.b_qkv);
            v("attn.w_proj", &mut b.w_proj);
            v("attn.b_proj", &mut b.b_proj);
            v("ls1", &mut b.ls1);
            v("ln2.gamma", &mut b.ln2_gamma);
            v("ln2.beta", &mut b.ln2_beta);
            v("mlp.w_fc1", &mut b.w_fc1);
            v("mlp.b_fc1", &mut b.b_fc1);
            v("mlp.w_fc2", &mut b.w_fc2);
            v("mlp.b_fc2", &mut b.b_fc2);
            v("ls2", &mut b.ls2);
        }
    }
}

/// Flatten the image into per-patch rows (raster order over the patch
/// grid, channel-major within a patch).
fn patch_matrix(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let (h, w) = cfg.image_hw;
    if image.shape() != [3, h, w] {
        return Err(TensorError::Shape {
            op: "patch_embed",
            detail: format!("image {:?}, expected [3, {h}, {w}]", image.shape()),
        });
    }
    let (ph, pw) = cfg.patch_hw;
    let (gh, gw) = cfg.grid();
    let d_in = cfg.patch_dim();
    let img = image.data();
    let mut out = Vec::with_capacity(gh * gw * d_in);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for py in 0..ph {
                    let y = gy * ph + py;
                    let base = c * h * w + y * w + gx * pw;
                    out.extend_from_slice(&img[base..base + pw]);
                }
            }
        }
    }
    Ok(Tensor::new(out, vec![gh * gw, d_in]))
}

/// Linear projection of flattened patches plus the learned positional
/// embedding. Token row order is the raster order of patches.
pub fn patch_embed(image: &Tensor, pe: &PatchEmbed, cfg: &BackboneConfig) -> Result<Tensor> {
    let patches = patch_matrix(image, cfg)?;
    patches
        .matmul(&pe.weight)?
        .add_row_vec(&pe.bias)?
        .add(&pe.pos)
}

/// Multi-head self-attention over the given rows.
///
/// `mask`, when present, is applied in exp-space inside the softmax,
/// identically for every head. `key_bias`, when present, is added to the
/// attention logits of every query against key j (proportional attention).
pub fn mhsa(
    x: &Tensor,
    mask: Option<&Tensor>,
    key_bias: Option<&Tensor>,
    block: &Block,
    heads: usize,
) -> Result<Tensor> {
    let (n_a, d) = x.dims2("mhsa")?;
    let dk = d / heads;
    if let Some(m) = mask {
        if m.shape() != [n_a, n_a] {
            return Err(TensorError::Shape {
                op: "mhsa",
                detail: format!("mask {:?} vs {n_a} active tokens", m.shape()),
            });
        }
    }
    let qkv = x.matmul(&block.w_qkv)?.add_row_vec(&block.b_qkv)?;
    // Scaling Q up front avoids materializing a second N_a×N_a logit
    // matrix per head.
    let q = qkv.col_slice(0, d)?.scale(1.0 / (dk as f32).sqrt())?;
    let k = qkv.col_slice(d, 2 * d)?;
    let v = qkv.col_slice(2 * d, 3 * d)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qh = q.col_slice(a, b)?;
        let kh = k.col_slice(a, b)?;
        let vh = v.col_slice(a, b)?;
        let mut logits = qh.matmul(&kh.transpose()?)?;
        if let Some(bias) = key_bias {
            logits = logits.add_row_vec(bias)?;
        }
        let attn = match mask {
            Some(m) => logits.masked_softmax(m)?,
            None => logits.softmax_rows()?,
        };
        head_outs.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let cat = if heads == 1 {
        head_outs[0].clone()
    } else {
        Tensor::concat_cols(&refs)?
    };
    cat.matmul(&block.w_proj)?.add_row_vec(&block.b_proj)
}

/// Pre-norm transformer block body on a gathered submatrix.
pub fn block_core(
    x: &Tensor,
    mask: Option<&Tensor>,
    key_bias: Option<&Tensor>,
    block: &Block,
    heads: usize,
) -> Result<Tensor> {
    let normed = x.layer_norm(&block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
    let attn = mhsa(&normed, mask, key_bias, block, heads)?;
    let h = x.add(&attn.mul_row_vec(&block.ls1)?)?;
    let normed2 = h.layer_norm(&block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
    let mlp = normed2
        .matmul(&block.w_fc1)?
        .add_row_vec(&block.b_fc1)?
        .gelu()?
        .matmul(&block.w_fc2)?
        .add_row_vec(&block.b_fc2)?;
    h.add(&mlp.mul_row_vec(&block.ls2)?)
}

/// Apply one block to the active rows of `state`. Inactive rows pass
/// through bitwise unchanged; `stale_since` is refreshed for active rows.
pub fn block_forward(
    state: &TokenState,
    mask: Option<&Tensor>,
    block: &Block,
    heads: usize,
    block_idx: usize,
) -> Result<TokenState> {
    let n_a = state.active_idx.len();
    if let Some(m) = mask {
        if m.shape() != [n_a, n_a] {
            return Err(TensorError::Shape {
                op: "block_forward",
                detail: format!("mask {:?} vs {n_a} active tokens", m.shape()),
            });
        }
    }
    let tokens = if state.is_fully_active() {
        block_core(&state.tokens, mask, None, block, heads)?
    } else {
        let gathered = state.tokens.gather_rows(&state.active_idx)?;
        let out = block_core(&gathered, mask, None, block, heads)?;
        out.scatter_rows(&state.active_idx, &state.tokens)?
    };
    let mut stale_since = state.stale_since.clone();
    for &i in &state.active_idx {
        stale_since[i] = block_idx + 1;
    }
    Ok(TokenState {
        tokens,
        active_idx: state.active_idx.clone(),
        stale_since,
    })
}

/// Unpruned forward pass; returns the final state and the full token matrix
/// after every block.
pub fn dense_forward(backbone: &Backbone, image: &Tensor) -> Result<(TokenState, Vec<Tensor>)> {
    let tokens = patch_embed(image, &backbone.patch, &backbone.cfg)?;
    let mut state = TokenState::fresh(tokens);
    let mut snapshots = Vec::with_capacity(backbone.cfg.depth);
    for (b, block) in backbone.blocks.iter().enumerate() {
        state = block_forward(&state, None, block, backbone.cfg.heads, b)?;
        snapshots.push(state.tokens.clone());
    }
    Ok((state, snapshots))
}
