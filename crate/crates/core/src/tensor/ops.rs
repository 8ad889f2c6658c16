//! Tape-recorded tensor operations.
//!
//! Each op computes its forward value eagerly, then registers a backward
//! closure that accumulates into the parents' gradient buffers. Shape errors
//! are reported against the op name.

use super::kernels;
use super::{BackwardArgs, FiniteCheck, Result, Tensor, TensorError};

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Validates gather/scatter indices: unique, in range.
fn check_indices(op: &'static str, idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(TensorError::Index {
                op,
                detail: format!("index {i} out of range for {n} rows"),
            });
        }
        if seen[i] {
            return Err(TensorError::Index {
                op,
                detail: format!("duplicate index {i}"),
            });
        }
        seen[i] = true;
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let mut out = vec![0.0; self.numel()];
        kernels::add_slices(self.data(), other.data(), &mut out);
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                for p in args.parents {
                    if p.requires_grad() {
                        p.with_grad_buf(|g| kernels::axpy(args.grad_out, 1.0, g));
                    }
                }
            },
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let mut out = vec![0.0; self.numel()];
        kernels::sub_slices(self.data(), other.data(), &mut out);
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                if args.parents[0].requires_grad() {
                    args.parents[0].with_grad_buf(|g| kernels::axpy(args.grad_out, 1.0, g));
                }
                if args.parents[1].requires_grad() {
                    args.parents[1].with_grad_buf(|g| kernels::axpy(args.grad_out, -1.0, g));
                }
            },
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let mut out = vec![0.0; self.numel()];
        kernels::mul_slices(self.data(), other.data(), &mut out);
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                let (a, b) = (&args.parents[0], &args.parents[1]);
                if a.requires_grad() {
                    a.with_grad_buf(|g| {
                        for ((gi, go), bv) in g.iter_mut().zip(args.grad_out).zip(b.data()) {
                            *gi += go * bv;
                        }
                    });
                }
                if b.requires_grad() {
                    b.with_grad_buf(|g| {
                        for ((gi, go), av) in g.iter_mut().zip(args.grad_out).zip(a.data()) {
                            *gi += go * av;
                        }
                    });
                }
            },
        )
    }

    /// Elementwise division; denominators must keep the output finite.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Tensor::from_op(
            "div",
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                let (a, b) = (&args.parents[0], &args.parents[1]);
                if a.requires_grad() {
                    a.with_grad_buf(|g| {
                        for ((gi, go), bv) in g.iter_mut().zip(args.grad_out).zip(b.data()) {
                            *gi += go / bv;
                        }
                    });
                }
                if b.requires_grad() {
                    b.with_grad_buf(|g| {
                        for (((gi, go), ov), bv) in g
                            .iter_mut()
                            .zip(args.grad_out)
                            .zip(args.out_data)
                            .zip(b.data())
                        {
                            *gi -= go * ov / bv;
                        }
                    });
                }
            },
        )
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        self.affine(c, 0.0)
    }

    /// a*x + b elementwise.
    pub fn affine(&self, a: f32, b: f32) -> Result<Tensor> {
        let mut out = vec![0.0; self.numel()];
        kernels::affine_slice(self.data(), a, b, &mut out);
        Tensor::from_op(
            "affine",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| kernels::axpy(args.grad_out, a, g));
            },
        )
    }

    /// Add a length-C vector to every row of an R×C matrix.
    pub fn add_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row_vec")?;
        if v.shape() != [c] {
            return Err(shape_err(
                "add_row_vec",
                format!("vector {:?} vs row width {c}", v.shape()),
            ));
        }
        let mut out = vec![0.0; self.numel()];
        for (orow, xrow) in out.chunks_mut(c).zip(self.data().chunks(c)) {
            kernels::add_slices(xrow, v.data(), orow);
        }
        Tensor::from_op(
            "add_row_vec",
            vec![r, c],
            out,
            vec![self.clone(), v.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                if args.parents[0].requires_grad() {
                    args.parents[0].with_grad_buf(|g| kernels::axpy(args.grad_out, 1.0, g));
                }
                if args.parents[1].requires_grad() {
                    args.parents[1].with_grad_buf(|g| {
                        for grow in args.grad_out.chunks(c) {
                            kernels::axpy(grow, 1.0, g);
                        }
                    });
                }
            },
        )
    }

    /// Multiply every row of an R×C matrix by a length-C vector.
    pub fn mul_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("mul_row_vec")?;
        if v.shape() != [c] {
            return Err(shape_err(
                "mul_row_vec",
                format!("vector {:?} vs row width {c}", v.shape()),
            ));
        }
        let mut out = vec![0.0; self.numel()];
        for (orow, xrow) in out.chunks_mut(c).zip(self.data().chunks(c)) {
            kernels::mul_slices(xrow, v.data(), orow);
        }
        Tensor::from_op(
            "mul_row_vec",
            vec![r, c],
            out,
            vec![self.clone(), v.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                let (x, v) = (&args.parents[0], &args.parents[1]);
                if x.requires_grad() {
                    x.with_grad_buf(|g| {
                        for (grow, gorow) in g.chunks_mut(c).zip(args.grad_out.chunks(c)) {
                            for ((gi, go), vv) in grow.iter_mut().zip(gorow).zip(v.data()) {
                                *gi += go * vv;
                            }
                        }
                    });
                }
                if v.requires_grad() {
                    v.with_grad_buf(|g| {
                        for (gorow, xrow) in args.grad_out.chunks(c).zip(x.data().chunks(c)) {
                            for ((gi, go), xv) in g.iter_mut().zip(gorow).zip(xrow) {
                                *gi += go * xv;
                            }
                        }
                    });
                }
            },
        )
    }

    /// C[M×P] = self[M×K] · other[K×P].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims {k} vs {k2} ({:?} x {:?})", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul_nn(self.data(), other.data(), &mut out, m, k, p);
        Tensor::from_op(
            "matmul",
            vec![m, p],
            out,
            vec![self.clone(), other.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                let (a, b) = (&args.parents[0], &args.parents[1]);
                if a.requires_grad() {
                    // dA = dC · B^T
                    let mut bt = vec![0.0; k * p];
                    kernels::transpose_slice(b.data(), &mut bt, k, p);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nn(args.grad_out, &bt, &mut da, m, p, k);
                    a.with_grad_buf(|g| kernels::axpy(&da, 1.0, g));
                }
                if b.requires_grad() {
                    // dB = A^T · dC
                    let mut at = vec![0.0; m * k];
                    kernels::transpose_slice(a.data(), &mut at, m, k);
                    let mut db = vec![0.0; k * p];
                    kernels::matmul_nn(&at, args.grad_out, &mut db, k, m, p);
                    b.with_grad_buf(|g| kernels::axpy(&db, 1.0, g));
                }
            },
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose_slice(self.data(), &mut out, r, c);
        Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                let mut gt = vec![0.0; r * c];
                kernels::transpose_slice(args.grad_out, &mut gt, c, r);
                args.parents[0].with_grad_buf(|g| kernels::axpy(&gt, 1.0, g));
            },
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(
            "reshape",
            shape,
            self.data().to_vec(),
            vec![self.clone()],
            FiniteCheck::Skip,
            |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| kernels::axpy(args.grad_out, 1.0, g));
            },
        )
    }

    /// Columns [from, to) of an R×C matrix.
    pub fn col_slice(&self, from: usize, to: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("col_slice")?;
        if from >= to || to > c {
            return Err(shape_err(
                "col_slice",
                format!("range {from}..{to} out of {c} columns"),
            ));
        }
        let w = to - from;
        let mut out = Vec::with_capacity(r * w);
        for row in self.data().chunks(c) {
            out.extend_from_slice(&row[from..to]);
        }
        Tensor::from_op(
            "col_slice",
            vec![r, w],
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for (grow, gorow) in g.chunks_mut(c).zip(args.grad_out.chunks(w)) {
                        for (gi, go) in grow[from..to].iter_mut().zip(gorow) {
                            *gi += go;
                        }
                    }
                });
            },
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (r, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for t in parts {
            let (ri, ci) = t.dims2("concat_cols")?;
            if ri != r {
                return Err(shape_err(
                    "concat_cols",
                    format!("row mismatch {ri} vs {r}"),
                ));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (t, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[row * w..(row + 1) * w]);
            }
        }
        let widths_bwd = widths.clone();
        Tensor::from_op(
            "concat_cols",
            vec![r, total],
            out,
            parts.iter().map(|t| (*t).clone()).collect(),
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                let mut off = 0;
                for (p, &w) in args.parents.iter().zip(&widths_bwd) {
                    if p.requires_grad() {
                        p.with_grad_buf(|g| {
                            for (grow, gorow) in
                                g.chunks_mut(w).zip(args.grad_out.chunks(total))
                            {
                                for (gi, go) in grow.iter_mut().zip(&gorow[off..off + w]) {
                                    *gi += go;
                                }
                            }
                        });
                    }
                    off += w;
                }
            },
        )
    }

    /// Rows `idx` of a tensor whose first dimension indexes rows, in `idx`
    /// order. Indices must be unique and in range.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = *self.shape().first().ok_or_else(|| {
            shape_err("gather_rows", "scalar input".into())
        })?;
        check_indices("gather_rows", idx, n)?;
        let row = self.numel() / n.max(1);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let idx_bwd = idx.to_vec();
        Tensor::from_op(
            "gather_rows",
            shape,
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for (j, &i) in idx_bwd.iter().enumerate() {
                        let src = &args.grad_out[j * row..(j + 1) * row];
                        for (gi, go) in g[i * row..(i + 1) * row].iter_mut().zip(src) {
                            *gi += go;
                        }
                    }
                });
            },
        )
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `self`.
    /// Untouched rows keep base values and base gradients.
    pub fn scatter_rows(&self, idx: &[usize], base: &Tensor) -> Result<Tensor> {
        let n = *base.shape().first().ok_or_else(|| {
            shape_err("scatter_rows", "scalar base".into())
        })?;
        check_indices("scatter_rows", idx, n)?;
        let row = base.numel() / n.max(1);
        let src_rows = *self.shape().first().unwrap_or(&0);
        if src_rows != idx.len() || self.numel() != idx.len() * row {
            return Err(shape_err(
                "scatter_rows",
                format!(
                    "src {:?} does not match {} rows of width {row}",
                    self.shape(),
                    idx.len()
                ),
            ));
        }
        let mut out = base.data().to_vec();
        for (j, &i) in idx.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&self.data()[j * row..(j + 1) * row]);
        }
        let idx_bwd = idx.to_vec();
        Tensor::from_op(
            "scatter_rows",
            base.shape().to_vec(),
            out,
            vec![self.clone(), base.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                let (src, base) = (&args.parents[0], &args.parents[1]);
                if src.requires_grad() {
                    src.with_grad_buf(|g| {
                        for (j, &i) in idx_bwd.iter().enumerate() {
                            let go = &args.grad_out[i * row..(i + 1) * row];
                            for (gi, gv) in g[j * row..(j + 1) * row].iter_mut().zip(go) {
                                *gi += gv;
                            }
                        }
                    });
                }
                if base.requires_grad() {
                    base.with_grad_buf(|g| {
                        let mut replaced = vec![false; g.len() / row.max(1)];
                        for &i in &idx_bwd {
                            replaced[i] = true;
                        }
                        for (i, grow) in g.chunks_mut(row).enumerate() {
                            if !replaced[i] {
                                for (gi, go) in
                                    grow.iter_mut().zip(&args.grad_out[i * row..(i + 1) * row])
                                {
                                    *gi += go;
                                }
                            }
                        }
                    });
                }
            },
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(self.data(), &mut out, r, c);
        Tensor::from_op(
            "softmax_rows",
            vec![r, c],
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    softmax_backward_rows(args.grad_out, args.out_data, g, r, c);
                });
            },
        )
    }

    /// Exp-space masked softmax: row i is exp(x_ij)·m_ij / Σ_k exp(x_ik)·m_ik,
    /// stabilized by the row max over unmasked entries. Masked entries are
    /// exactly 0. Differentiable in both the logits and the mask.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("masked_softmax")?;
        same_shape("masked_softmax", self, mask)?;
        let track = super::grad_enabled()
            && (self.requires_grad() || mask.requires_grad());
        let mut out = vec![0.0; r * c];
        let mut q = if track { vec![0.0; r * c] } else { Vec::new() };
        let qref = if track { Some(&mut q[..]) } else { None };
        kernels::masked_softmax_rows(self.data(), mask.data(), &mut out, qref, r, c)
            .map_err(|row| TensorError::DegenerateMaskRow { row })?;
        Tensor::from_op(
            "masked_softmax",
            vec![r, c],
            out,
            vec![self.clone(), mask.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                // With u = exp(x - c), q = u/S, out = q·m:
                //   dx = out ⊙ (g - rowdot(g, out))
                //   dm = q   ⊙ (g - rowdot(g, out))
                let (x, m) = (&args.parents[0], &args.parents[1]);
                let mut rowdots = vec![0.0f32; r];
                for (i, (gorow, outrow)) in args
                    .grad_out
                    .chunks(c)
                    .zip(args.out_data.chunks(c))
                    .enumerate()
                {
                    rowdots[i] = gorow.iter().zip(outrow).map(|(a, b)| a * b).sum();
                }
                if x.requires_grad() {
                    x.with_grad_buf(|g| {
                        for i in 0..r {
                            let rd = rowdots[i];
                            for j in 0..c {
                                let o = args.out_data[i * c + j];
                                g[i * c + j] += o * (args.grad_out[i * c + j] - rd);
                            }
                        }
                    });
                }
                if m.requires_grad() {
                    m.with_grad_buf(|g| {
                        for i in 0..r {
                            let rd = rowdots[i];
                            for j in 0..c {
                                g[i * c + j] += q[i * c + j] * (args.grad_out[i * c + j] - rd);
                            }
                        }
                    });
                }
            },
        )
    }

    /// Per-row LayerNorm of an N×D tensor with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs width {c}", gamma.shape(), beta.shape()),
            ));
        }
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        kernels::layer_norm_rows(self.data(), gamma.data(), beta.data(), eps, &mut out, &mut stats, r, c);
        Tensor::from_op(
            "layer_norm",
            vec![r, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                let (x, gamma, beta) = (&args.parents[0], &args.parents[1], &args.parents[2]);
                let xd = x.data();
                let gd = gamma.data();
                if x.requires_grad() {
                    x.with_grad_buf(|g| {
                        for i in 0..r {
                            let (mean, inv_std) = stats[i];
                            let go = &args.grad_out[i * c..(i + 1) * c];
                            let xrow = &xd[i * c..(i + 1) * c];
                            let mut sum_dxh = 0.0f32;
                            let mut sum_dxh_xh = 0.0f32;
                            for j in 0..c {
                                let xh = (xrow[j] - mean) * inv_std;
                                let dxh = go[j] * gd[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                            let n = c as f32;
                            for j in 0..c {
                                let xh = (xrow[j] - mean) * inv_std;
                                let dxh = go[j] * gd[j];
                                g[i * c + j] +=
                                    inv_std * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                            }
                        }
                    });
                }
                if gamma.requires_grad() {
                    gamma.with_grad_buf(|g| {
                        for i in 0..r {
                            let (mean, inv_std) = stats[i];
                            for j in 0..c {
                                let xh = (xd[i * c + j] - mean) * inv_std;
                                g[j] += args.grad_out[i * c + j] * xh;
                            }
                        }
                    });
                }
                if beta.requires_grad() {
                    beta.with_grad_buf(|g| {
                        for gorow in args.grad_out.chunks(c) {
                            kernels::axpy(gorow, 1.0, g);
                        }
                    });
                }
            },
        )
    }

    /// Per-row RMSNorm with a learnable gain.
    pub fn rms_norm(&self, gamma: &Tensor, eps: f32) -> Result<Tensor> {
        let (r, c) = self.dims2("rms_norm")?;
        if gamma.shape() != [c] {
            return Err(shape_err(
                "rms_norm",
                format!("gamma {:?} vs width {c}", gamma.shape()),
            ));
        }
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        kernels::rms_norm_rows(self.data(), gamma.data(), eps, &mut out, &mut inv_rms, r, c);
        Tensor::from_op(
            "rms_norm",
            vec![r, c],
            out,
            vec![self.clone(), gamma.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                let (x, gamma) = (&args.parents[0], &args.parents[1]);
                let xd = x.data();
                let gd = gamma.data();
                if x.requires_grad() {
                    x.with_grad_buf(|g| {
                        for i in 0..r {
                            let ir = inv_rms[i];
                            let go = &args.grad_out[i * c..(i + 1) * c];
                            let xrow = &xd[i * c..(i + 1) * c];
                            let mut s = 0.0f32;
                            for j in 0..c {
                                s += gd[j] * go[j] * xrow[j];
                            }
                            let n = c as f32;
                            for j in 0..c {
                                g[i * c + j] +=
                                    ir * gd[j] * go[j] - xrow[j] * ir * ir * ir * s / n;
                            }
                        }
                    });
                }
                if gamma.requires_grad() {
                    gamma.with_grad_buf(|g| {
                        for i in 0..r {
                            let ir = inv_rms[i];
                            for j in 0..c {
                                g[j] += args.grad_out[i * c + j] * xd[i * c + j] * ir;
                            }
                        }
                    });
                }
            },
        )
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let mut out = vec![0.0; self.numel()];
        kernels::gelu_slice(self.data(), &mut out);
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                let x = &args.parents[0];
                x.with_grad_buf(|g| kernels::gelu_grad_slice(x.data(), args.grad_out, g));
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let mut out = vec![0.0; self.numel()];
        kernels::sigmoid_slice(self.data(), &mut out);
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for ((gi, go), &y) in g.iter_mut().zip(args.grad_out).zip(args.out_data) {
                        *gi += go * y * (1.0 - y);
                    }
                });
            },
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                let go = args.grad_out[0];
                args.parents[0].with_grad_buf(|g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            },
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f32;
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(
            "mean_all",
            vec![1],
            vec![s / n],
            vec![self.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                let go = args.grad_out[0] / n;
                args.parents[0].with_grad_buf(|g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            },
        )
    }

    /// Numerically stable elementwise binary cross-entropy on logits:
    /// max(p,0) - p·t + ln(1 + exp(-|p|)).
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        same_shape("bce_with_logits", self, targets)?;
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| p.max(0.0) - p * t + (1.0 + kernels::fexp(-p.abs())).ln())
            .collect();
        Tensor::from_op(
            "bce_with_logits",
            self.shape().to_vec(),
            out,
            vec![self.clone(), targets.clone()],
            FiniteCheck::Check,
            |args: &BackwardArgs| {
                let (p, t) = (&args.parents[0], &args.parents[1]);
                if p.requires_grad() {
                    p.with_grad_buf(|g| {
                        for (((gi, go), &pv), &tv) in
                            g.iter_mut().zip(args.grad_out).zip(p.data()).zip(t.data())
                        {
                            *gi += go * (kernels::fsigmoid(pv) - tv);
                        }
                    });
                }
                if t.requires_grad() {
                    t.with_grad_buf(|g| {
                        for ((gi, go), &pv) in g.iter_mut().zip(args.grad_out).zip(p.data()) {
                            *gi -= go * pv;
                        }
                    });
                }
            },
        )
    }

    /// Bilinear resample of a 2-D tensor to (out_h, out_w), pixel-center
    /// aligned (the half-pixel convention).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (h, w) = self.dims2("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("bilinear_resize", "zero output size".into()));
        }
        let ymap = axis_map(h, out_h);
        let xmap = axis_map(w, out_w);
        let mut out = vec![0.0; out_h * out_w];
        for (oy, &(y0, y1, wy)) in ymap.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xmap.iter().enumerate() {
                let d = self.data();
                let v00 = d[y0 * w + x0];
                let v01 = d[y0 * w + x1];
                let v10 = d[y1 * w + x0];
                let v11 = d[y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[oy * out_w + ox] = top + (bot - top) * wy;
            }
        }
        Tensor::from_op(
            "bilinear_resize",
            vec![out_h, out_w],
            out,
            vec![self.clone()],
            FiniteCheck::Check,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for (oy, &(y0, y1, wy)) in ymap.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xmap.iter().enumerate() {
                            let go = args.grad_out[oy * out_w + ox];
                            g[y0 * w + x0] += go * (1.0 - wy) * (1.0 - wx);
                            g[y0 * w + x1] += go * (1.0 - wy) * wx;
                            g[y1 * w + x0] += go * wy * (1.0 - wx);
                            g[y1 * w + x1] += go * wy * wx;
                        }
                    }
                });
            },
        )
    }

    /// N×N mask from a per-row gate vector: M_ij = 1 if i == j else p_j.
    /// Every row keeps at least its diagonal entry.
    pub fn mask_with_self_loops(&self) -> Result<Tensor> {
        let n = match *self.shape() {
            [n] => n,
            _ => {
                return Err(shape_err(
                    "mask_with_self_loops",
                    format!("expected 1-D, got {:?}", self.shape()),
                ))
            }
        };
        let p = self.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = if i == j { 1.0 } else { p[j] };
            }
        }
        Tensor::from_op(
            "mask_with_self_loops",
            vec![n, n],
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for (j, gj) in g.iter_mut().enumerate() {
                        let mut s = 0.0f32;
                        for (i, gorow) in args.grad_out.chunks(n).enumerate() {
                            if i != j {
                                s += gorow[j];
                            }
                        }
                        *gj += s;
                    }
                });
            },
        )
    }

    /// Rows grouped and averaged: output row g is the mean of input rows
    /// `groups[g]`. Every input row must appear in exactly one group.
    pub fn group_mean_rows(&self, groups: &[Vec<usize>]) -> Result<Tensor> {
        let n = *self.shape().first().ok_or_else(|| {
            shape_err("group_mean_rows", "scalar input".into())
        })?;
        let row = self.numel() / n.max(1);
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        check_indices("group_mean_rows", &flat, n)?;
        if flat.len() != n || groups.iter().any(|g| g.is_empty()) {
            return Err(TensorError::Index {
                op: "group_mean_rows",
                detail: "groups must partition all rows".into(),
            });
        }
        let mut out = vec![0.0; groups.len() * row];
        for (g, members) in groups.iter().enumerate() {
            let orow = &mut out[g * row..(g + 1) * row];
            for &i in members {
                for (o, v) in orow.iter_mut().zip(&self.data()[i * row..(i + 1) * row]) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f32;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = groups.len();
        let groups_bwd = groups.to_vec();
        Tensor::from_op(
            "group_mean_rows",
            shape,
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for (gi, members) in groups_bwd.iter().enumerate() {
                        let go = &args.grad_out[gi * row..(gi + 1) * row];
                        let inv = 1.0 / members.len() as f32;
                        for &i in members {
                            for (gv, gov) in g[i * row..(i + 1) * row].iter_mut().zip(go) {
                                *gv += gov * inv;
                            }
                        }
                    }
                });
            },
        )
    }

    /// Inverse layout of [`Tensor::group_mean_rows`]: every member of group g
    /// receives a copy of row g. `n_rows` is the total output row count.
    pub fn expand_rows(&self, groups: &[Vec<usize>], n_rows: usize) -> Result<Tensor> {
        let gcount = *self.shape().first().ok_or_else(|| {
            shape_err("expand_rows", "scalar input".into())
        })?;
        if gcount != groups.len() {
            return Err(shape_err(
                "expand_rows",
                format!("{} groups vs {} rows", groups.len(), gcount),
            ));
        }
        let row = self.numel() / gcount.max(1);
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        check_indices("expand_rows", &flat, n_rows)?;
        if flat.len() != n_rows {
            return Err(TensorError::Index {
                op: "expand_rows",
                detail: "groups must cover all output rows".into(),
            });
        }
        let mut out = vec![0.0; n_rows * row];
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                out[i * row..(i + 1) * row].copy_from_slice(&self.data()[g * row..(g + 1) * row]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = n_rows;
        let groups_bwd = groups.to_vec();
        Tensor::from_op(
            "expand_rows",
            shape,
            out,
            vec![self.clone()],
            FiniteCheck::Skip,
            move |args: &BackwardArgs| {
                args.parents[0].with_grad_buf(|g| {
                    for (gi, members) in groups_bwd.iter().enumerate() {
                        for &i in members {
                            let go = &args.grad_out[i * row..(i + 1) * row];
                            for (gv, gov) in g[gi * row..(gi + 1) * row].iter_mut().zip(go) {
                                *gv += gov;
                            }
                        }
                    }
                });
            },
        )
    }
}

fn softmax_backward_rows(gout: &[f32], out: &[f32], gin: &mut [f32], rows: usize, cols: usize) {
    for i in 0..rows {
        let go = &gout[i * cols..(i + 1) * cols];
        let o = &out[i * cols..(i + 1) * cols];
        let rd: f32 = go.iter().zip(o).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            gin[i * cols + j] += o[j] * (go[j] - rd);
        }
    }
}

fn axis_map(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f32);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

/// Indices of the k largest entries of a 1-D score vector. Ties break toward
/// the lower index; the result is sorted ascending.
pub fn top_k_indices(scores: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = scores.numel();
    if k == 0 || k > n {
        return Err(TensorError::TopKRange { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // Sort by score descending, index ascending. sort_by is stable, so equal
    // scores keep their ascending-index order.
    idx.sort_by(|&a, &b| {
        scores.data()[b]
            .partial_cmp(&scores.data()[a])
            .expect("finite scores")
    });
    let mut top: Vec<usize> = idx[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let c = i2.matmul(&a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_dot() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[1.0, 2.0, 3.0], &[3, 1]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn masked_softmax_uniform_over_unmasked() {
        let logits = t(&[0.0, 0.0, 0.0], &[1, 3]);
        let mask = t(&[1.0, 0.0, 1.0], &[1, 3]);
        let out = logits.masked_softmax(&mask).unwrap();
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[0] - 0.5).abs() < 1e-7);
        assert!((out.data()[2] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn masked_softmax_all_ones_equals_softmax() {
        let logits = t(&[0.3, -1.2, 2.0, 0.0, 1.0, -0.5], &[2, 3]);
        let mask = Tensor::ones(vec![2, 3]);
        let a = logits.masked_softmax(&mask).unwrap();
        let b = logits.softmax_rows().unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_degenerate_row_errors() {
        let logits = t(&[0.0, 0.0], &[1, 2]);
        let mask = t(&[0.0, 0.0], &[1, 2]);
        assert!(matches!(
            logits.masked_softmax(&mask),
            Err(TensorError::DegenerateMaskRow { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zeros() {
        let x = t(&[5.0, 5.0, 5.0, 5.0], &[1, 4]);
        let gamma = Tensor::ones(vec![4]);
        let beta = Tensor::zeros(vec![4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // Row [1, 3]: mean 2, var 1 -> roughly [-1, 1] shrunk by eps.
        let x = t(&[1.0, 3.0], &[1, 2]);
        let gamma = Tensor::ones(vec![2]);
        let beta = Tensor::zeros(vec![2]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
        assert!(y.data()[1] <= 1.0);
    }

    #[test]
    fn gather_identity_and_order() {
        let x = t(&(0..8).map(|v| v as f32).collect::<Vec<_>>(), &[4, 2]);
        let all = x.gather_rows(&[0, 1, 2, 3]).unwrap();
        assert_eq!(all.data(), x.data());
        let g = x.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let x = Tensor::zeros(vec![3, 2]);
        assert!(matches!(x.gather_rows(&[0, 3]), Err(TensorError::Index { .. })));
        assert!(matches!(x.gather_rows(&[1, 1]), Err(TensorError::Index { .. })));
    }

    #[test]
    fn scatter_into_zeros() {
        let src = t(&[7.0, 8.0], &[1, 2]);
        let base = Tensor::zeros(vec![3, 2]);
        let out = src.scatter_rows(&[1], &base).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 7.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let x = t(&(0..12).map(|v| v as f32 * 0.5).collect::<Vec<_>>(), &[4, 3]);
        let idx = [3, 1];
        let g = x.gather_rows(&idx).unwrap();
        let back = g.scatter_rows(&idx, &x).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn top_k_basics() {
        let s = t(&[0.1, 0.9, 0.5], &[3]);
        assert_eq!(top_k_indices(&s, 2).unwrap(), vec![1, 2]);
        let e = t(&[0.5, 0.5, 0.5], &[3]);
        assert_eq!(top_k_indices(&e, 2).unwrap(), vec![0, 1]);
        assert!(matches!(top_k_indices(&s, 0), Err(TensorError::TopKRange { .. })));
        assert!(matches!(top_k_indices(&s, 4), Err(TensorError::TopKRange { .. })));
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = crate::rng::Rng::new(77, 0);
        for _ in 0..20 {
            let scores: Vec<f32> = (0..100).map(|_| rng.normal_f32()).collect();
            let s = t(&scores, &[100]);
            let k = 1 + rng.below(99);
            let got = top_k_indices(&s, k).unwrap();
            let mut pairs: Vec<(usize, f32)> = scores.iter().copied().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut want: Vec<usize> = pairs[..k].iter().map(|p| p.0).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn self_loop_mask_matches_definition() {
        let p = t(&[1.0, 0.0, 1.0], &[3]);
        let m = p.mask_with_self_loops().unwrap();
        #[rustfmt::skip]
        let want = [1.0, 0.0, 1.0,
                    1.0, 1.0, 1.0,
                    1.0, 0.0, 1.0];
        assert_eq!(m.data(), &want);
        let ones = Tensor::ones(vec![3]);
        assert!(ones.mask_with_self_loops().unwrap().data().iter().all(|&v| v == 1.0));
        let zeros = Tensor::zeros(vec![3]);
        let eye = zeros.mask_with_self_loops().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(eye.data()[i * 3 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn bilinear_checkerboard_average() {
        let x = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let y = x.bilinear_resize(1, 1).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let x = Tensor::ones(vec![4, 4]);
        let y = x.bilinear_resize(3, 5).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn group_mean_and_expand_roundtrip_values() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let groups = vec![vec![0, 2], vec![1]];
        let m = x.group_mean_rows(&groups).unwrap();
        assert_eq!(m.data(), &[3.0, 4.0, 3.0, 4.0]);
        let e = m.expand_rows(&groups, 3).unwrap();
        assert_eq!(e.data(), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn bce_with_logits_ln2_at_even_odds() {
        let p = Tensor::zeros(vec![4]);
        let t_ = Tensor::full(vec![4], 0.5);
        let loss = p.bce_with_logits(&t_).unwrap().mean_all().unwrap();
        assert!((loss.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn straight_through_composition_is_exact() {
        // hard = soft + const(hard - soft): forward equals hard, gradient
        // equals the soft path's, elementwise.
        let logits = Tensor::param(vec![0.3, -0.8, 2.0], vec![3]);
        let soft = logits.sigmoid().unwrap();
        let hard_vals: Vec<f32> = soft.data().iter().map(|&s| if s >= 0.5 { 1.0 } else { 0.0 }).collect();
        let delta: Vec<f32> = hard_vals.iter().zip(soft.data()).map(|(h, s)| h - s).collect();
        let hard = soft.add(&Tensor::new(delta, vec![3])).unwrap();
        assert_eq!(hard.data(), &hard_vals[..]);
        let w = Tensor::new(vec![0.2, -1.0, 0.7], vec![3]);
        hard.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g_hard = logits.grad().unwrap();
        logits.zero_grad();
        let soft2 = logits.sigmoid().unwrap();
        soft2.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g_soft = logits.grad().unwrap();
        assert_eq!(g_hard, g_soft);
    }
}
