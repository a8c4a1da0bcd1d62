//! 2-D convolution as an im2col + GEMM custom op with its own backward pass.
//!
//! The whole batch is unrolled into one `(C·k·k) × (N·Ho·Wo)` column matrix so
//! a single GEMM covers the batch, which matters for the small channel counts
//! and spatial sizes of the desk-scale networks.

use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[n, c, h, w], &[o, ci, k, k2]) = (x, wt) else {
            candle_core::bail!("conv expects rank-4 input and weight, got {x:?} and {wt:?}")
        };
        if ci != c || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv shapes do not fit: input {x:?}, weight {wt:?}, pad {pad}");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { n, c, h, w, o, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(column-matrix offset, input offset, len)` for every run of
    /// in-bounds taps; within a run both offsets advance (input by `stride`).
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (hw, howo) = (self.h * self.w, self.ho * self.wo);
        let cols = self.cols();
        let (s, p) = (self.stride, self.pad);
        for ci in 0..self.c {
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = (ci * self.k + i) * self.k + j;
                    // output columns whose tap lands inside the input: 0 <= ox*s + j - p < w
                    let ox_lo = p.saturating_sub(j).div_ceil(s);
                    let ox_hi = ((self.w + p).saturating_sub(j)).div_ceil(s).min(self.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for b in 0..self.n {
                        let base = (b * self.c + ci) * hw;
                        for oy in 0..self.ho {
                            let y = (oy * s + i) as isize - p as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let col0 = row * cols + b * howo + oy * self.wo;
                            let x0 = ox_lo * s + j - p;
                            f(col0 + ox_lo, base + y as usize * self.w + x0, ox_hi - ox_lo);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let mut col = vec![0f32; self.rows() * self.cols()];
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            if s == 1 {
                col[dst..dst + len].copy_from_slice(&x[src..src + len]);
            } else {
                for (t, d) in col[dst..dst + len].iter_mut().enumerate() {
                    *d = x[src + t * s];
                }
            }
        });
        col
    }

    fn col2im(&self, col: &[f32]) -> Vec<f32> {
        let mut x = vec![0f32; self.n * self.c * self.h * self.w];
        let s = self.stride;
        self.for_each_run(|src, dst, len| {
            for (t, &v) in col[src..src + len].iter().enumerate() {
                x[dst + t * s] += v;
            }
        });
        x
    }

    /// `(N, O, Ho·Wo)` ↔ `(O, N·Ho·Wo)`.
    fn to_channel_major(&self, y: &[f32]) -> Vec<f32> {
        let howo = self.ho * self.wo;
        let mut out = vec![0f32; y.len()];
        for b in 0..self.n {
            for oc in 0..self.o {
                let src = (b * self.o + oc) * howo;
                let dst = oc * self.cols() + b * howo;
                out[dst..dst + howo].copy_from_slice(&y[src..src + howo]);
            }
        }
        out
    }

    fn to_batch_major(&self, y: &[f32]) -> Vec<f32> {
        let howo = self.ho * self.wo;
        let mut out = vec![0f32; y.len()];
        for b in 0..self.n {
            for oc in 0..self.o {
                let dst = (b * self.o + oc) * howo;
                let src = oc * self.cols() + b * howo;
                out[dst..dst + howo].copy_from_slice(&y[src..src + howo]);
            }
        }
        out
    }
}

/// Row-major matrix operand: pointer plus row and column strides.
struct Mat {
    ptr: *const f32,
    rs: isize,
    cs: isize,
}

fn row_major(data: &[f32], cols: usize) -> Mat {
    Mat { ptr: data.as_ptr(), rs: cols as isize, cs: 1 }
}

fn transposed(data: &[f32], cols: usize) -> Mat {
    Mat { ptr: data.as_ptr(), rs: 1, cs: cols as isize }
}

/// `lhs (m×k) · rhs (k×n)` into a fresh row-major `m×n` buffer.
fn matmul(m: usize, n: usize, k: usize, lhs: Mat, rhs: Mat) -> Vec<f32> {
    let mut dst = vec![0f32; m * n];
    // SAFETY: every operand is a live slice whose extent matches the given shape and strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            false,
            lhs.ptr,
            lhs.cs,
            lhs.rs,
            rhs.ptr,
            rhs.cs,
            rhs.rs,
            0.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
    dst
}

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let CpuStorage::F32(data) = s else { candle_core::bail!("conv supports f32 tensors only") };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv needs contiguous operands"),
    }
}

struct Conv {
    stride: usize,
    pad: usize,
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let (x, w, bias) = (slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
        if bias.len() != g.o {
            candle_core::bail!("conv bias has {} entries for {} outputs", bias.len(), g.o);
        }
        let col = g.im2col(x);
        let mut y = matmul(g.o, g.cols(), g.rows(), row_major(w, g.rows()), row_major(&col, g.cols()));
        for (oc, row) in y.chunks_mut(g.cols()).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[oc]);
        }
        Ok((CpuStorage::F32(g.to_batch_major(&y)), Shape::from((g.n, g.o, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let op = ConvGrads { stride: self.stride, pad: self.pad };
        let dx = grad.apply_op2_no_bwd(w, &GradInput { op: &op, input_dims: x.dims4()? })?;
        let dw = x.apply_op2_no_bwd(&grad, &GradWeight { op: &op, k: w.dim(2)?, o: w.dim(0)? })?;
        let db = grad.sum_keepdim(3)?.sum_keepdim(2)?.sum_keepdim(0)?.flatten_all()?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

struct ConvGrads {
    stride: usize,
    pad: usize,
}

struct GradInput<'a> {
    op: &'a ConvGrads,
    input_dims: (usize, usize, usize, usize),
}

impl candle_core::CustomOp2 for GradInput<'_> {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, wd) = self.input_dims;
        let g = Geometry::new(&[n, c, h, wd], l2.dims(), self.op.stride, self.op.pad)?;
        let (dy, w) = (slice(s1, l1)?, slice(s2, l2)?);
        let dy = g.to_channel_major(dy);
        let dcol = matmul(g.rows(), g.cols(), g.o, transposed(w, g.rows()), row_major(&dy, g.cols()));
        Ok((CpuStorage::F32(g.col2im(&dcol)), Shape::from((n, c, h, wd))))
    }
}

struct GradWeight<'a> {
    op: &'a ConvGrads,
    k: usize,
    o: usize,
}

impl candle_core::CustomOp2 for GradWeight<'_> {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = l1.dims()[1];
        let g = Geometry::new(l1.dims(), &[self.o, c, self.k, self.k], self.op.stride, self.op.pad)?;
        let (x, dy) = (slice(s1, l1)?, slice(s2, l2)?);
        let col = g.im2col(x);
        let dy = g.to_channel_major(dy);
        let dw = matmul(g.o, g.rows(), g.cols(), row_major(&dy, g.cols()), transposed(&col, g.cols()));
        Ok((CpuStorage::F32(dw), Shape::from((g.o, c, g.k, g.k))))
    }
}

/// `conv2d(x, w) + b` with square kernels; all tensors f32.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, Conv { stride, pad })
}
