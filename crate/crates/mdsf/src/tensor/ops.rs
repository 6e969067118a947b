//! Forward constructors. Each method computes its output eagerly and records
//! the node; adjoints live in `graph.rs`.

use std::rc::Rc;

use super::graph::{axis_decompose, Graph, Op, ResizeAxis, Tensor, LN_EPS};
use super::scalar_math;
use crate::error::{dim_err, Error, Result};

impl Tensor {
    fn binary(&self, other: &Tensor, name: &'static str) -> (Graph, usize, usize) {
        assert!(
            self.graph.same_graph(&other.graph),
            "{name}: operands recorded on different graphs"
        );
        assert_eq!(
            self.shape, other.shape,
            "{name}: shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        (self.graph.clone(), self.id, other.id)
    }

    fn requires_with(&self, other: &Tensor) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn map_binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Tensor {
        let (graph, a, b) = self.binary(other, name);
        let inner = graph.borrow();
        let data: Vec<f64> = inner.nodes[a]
            .data
            .iter()
            .zip(&inner.nodes[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        drop(inner);
        graph.record(op(a, b), self.shape.clone(), data, self.requires_with(other))
    }

    fn map_unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data: Vec<f64> = self
            .graph
            .borrow()
            .nodes[self.id]
            .data
            .iter()
            .map(|&x| f(x))
            .collect();
        self.graph
            .record(op, self.shape.clone(), data, self.requires_grad())
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.map_binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.map_binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.map_binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.map_binary(other, "div", |a, b| a / b, Op::Div)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min_elem(&self, other: &Tensor) -> Tensor {
        self.map_binary(other, "min_elem", f64::min, Op::MinElem)
    }

    pub fn max_elem(&self, other: &Tensor) -> Tensor {
        self.map_binary(other, "max_elem", f64::max, Op::MaxElem)
    }

    pub fn neg(&self) -> Tensor {
        self.map_unary(|x| -x, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(f64::exp, Op::Exp(self.id))
    }

    pub fn sqrt(&self) -> Tensor {
        self.map_unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn abs(&self) -> Tensor {
        self.map_unary(f64::abs, Op::Abs(self.id))
    }

    pub fn arctan(&self) -> Tensor {
        self.map_unary(f64::atan, Op::Atan(self.id))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(scalar_math::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Tensor {
        self.map_unary(scalar_math::softplus, Op::Softplus(self.id))
    }

    pub fn silu(&self) -> Tensor {
        self.map_unary(scalar_math::silu, Op::Silu(self.id))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    /// x^p for constant p ≥ 1 on non-negative inputs.
    pub fn pow_const(&self, p: f64) -> Tensor {
        self.map_unary(|x| x.powf(p), Op::PowConst(self.id, p))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map_unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.map_unary(|x| x + c, Op::AddConst(self.id, c))
    }

    /// max(x, c); gradient is zero on the clamped side.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        self.map_unary(|x| x.max(c), Op::ClampMin(self.id, c))
    }

    /// Multiply `[C, ...]` by per-channel weights `[C]`.
    pub fn mul_channel(&self, w: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&w.graph));
        assert_eq!(w.rank(), 1, "mul_channel weights must be rank 1");
        assert_eq!(self.shape[0], w.shape[0], "channel count mismatch");
        let block = self.numel() / self.shape[0];
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let wv = &inner.nodes[w.id].data;
        let mut data = vec![0.0; xv.len()];
        for c in 0..self.shape[0] {
            for i in 0..block {
                data[c * block + i] = xv[c * block + i] * wv[c];
            }
        }
        drop(inner);
        self.graph.record(
            Op::MulChannel { x: self.id, w: w.id },
            self.shape.clone(),
            data,
            self.requires_with(w),
        )
    }

    /// Add per-channel bias `[C]` to `[C, ...]`.
    pub fn add_channel(&self, b: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&b.graph));
        assert_eq!(self.shape[0], b.shape[0], "channel count mismatch");
        let block = self.numel() / self.shape[0];
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let bv = &inner.nodes[b.id].data;
        let mut data = vec![0.0; xv.len()];
        for c in 0..self.shape[0] {
            for i in 0..block {
                data[c * block + i] = xv[c * block + i] + bv[c];
            }
        }
        drop(inner);
        self.graph.record(
            Op::AddChannel { x: self.id, b: b.id },
            self.shape.clone(),
            data,
            self.requires_with(b),
        )
    }

    /// Multiply `[C,H,W]` by a spatial map `[H,W]` broadcast over channels.
    pub fn mul_spatial(&self, m: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&m.graph));
        assert_eq!(&self.shape[1..], m.shape(), "spatial shape mismatch");
        let sp = m.numel();
        let ch = self.shape[0];
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mv = &inner.nodes[m.id].data;
        let mut data = vec![0.0; xv.len()];
        for c in 0..ch {
            for p in 0..sp {
                data[c * sp + p] = xv[c * sp + p] * mv[p];
            }
        }
        drop(inner);
        self.graph.record(
            Op::MulSpatial { x: self.id, m: m.id },
            self.shape.clone(),
            data,
            self.requires_with(m),
        )
    }

    /// Multiply by a single-element tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&s.graph));
        assert_eq!(s.numel(), 1, "mul_scalar takes a one-element tensor");
        let sv = s.item();
        let data: Vec<f64> = self
            .graph
            .borrow()
            .nodes[self.id]
            .data
            .iter()
            .map(|&x| x * sv)
            .collect();
        self.graph.record(
            Op::MulScalar { x: self.id, s: s.id },
            self.shape.clone(),
            data,
            self.requires_with(s),
        )
    }

    pub fn add_scalar(&self, s: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&s.graph));
        assert_eq!(s.numel(), 1, "add_scalar takes a one-element tensor");
        let sv = s.item();
        let data: Vec<f64> = self
            .graph
            .borrow()
            .nodes[self.id]
            .data
            .iter()
            .map(|&x| x + sv)
            .collect();
        self.graph.record(
            Op::AddScalar { x: self.id, s: s.id },
            self.shape.clone(),
            data,
            self.requires_with(s),
        )
    }

    /// Add a row bias `[N]` to every row of `[M,N]`.
    pub fn add_row(&self, b: &Tensor) -> Tensor {
        assert!(self.graph.same_graph(&b.graph));
        assert_eq!(self.rank(), 2);
        assert_eq!(self.shape[1], b.numel(), "row bias length mismatch");
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let bv = &inner.nodes[b.id].data;
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xv[r * cols + c] + bv[c];
            }
        }
        drop(inner);
        self.graph.record(
            Op::AddRow { x: self.id, b: b.id },
            self.shape.clone(),
            data,
            self.requires_with(b),
        )
    }

    /// Sum of all entries → rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.graph.borrow().nodes[self.id].data.iter().sum();
        self.graph
            .record(Op::SumAll(self.id), vec![], vec![s], self.requires_grad())
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// `[C,H,W]` → `[H,W]` by summing over channels.
    pub fn sum_channels(&self) -> Tensor {
        assert_eq!(self.rank(), 3, "sum_channels expects [C,H,W]");
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let sp = h * w;
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; sp];
        for c in 0..ch {
            for p in 0..sp {
                data[p] += xv[c * sp + p];
            }
        }
        drop(inner);
        self.graph.record(
            Op::SumChannels(self.id),
            vec![h, w],
            data,
            self.requires_grad(),
        )
    }

    /// Global average pool: `[C,H,W]` → `[C]`.
    pub fn mean_spatial(&self) -> Tensor {
        assert_eq!(self.rank(), 3, "mean_spatial expects [C,H,W]");
        let ch = self.shape[0];
        let sp = self.shape[1] * self.shape[2];
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; ch];
        for c in 0..ch {
            data[c] = xv[c * sp..(c + 1) * sp].iter().sum::<f64>() / sp as f64;
        }
        drop(inner);
        self.graph.record(
            Op::MeanSpatial(self.id),
            vec![ch],
            data,
            self.requires_grad(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Config(format!(
                "reshape from {:?} to {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(self.graph.record(
            Op::Reshape(self.id),
            shape.to_vec(),
            self.value(),
            self.requires_grad(),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose expects rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; xv.len()];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        drop(inner);
        self.graph.record(
            Op::Transpose2(self.id),
            vec![n, m],
            data,
            self.requires_grad(),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        assert!(self.graph.same_graph(&other.graph));
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(dim_err("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let inner = self.graph.borrow();
        let av = &inner.nodes[self.id].data;
        let bv = &inner.nodes[other.id].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = av[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a_ip * bv[p * n + j];
                }
            }
        }
        drop(inner);
        Ok(self.graph.record(
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            vec![m, n],
            data,
            self.requires_with(other),
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let (outer, n, inner_stride) = axis_decompose(&self.shape, axis);
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner_stride {
                let at = |j: usize| (o * n + j) * inner_stride + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(xv[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - mx).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..n {
                    data[at(j)] /= denom;
                }
            }
        }
        drop(inner);
        Ok(self.graph.record(
            Op::Softmax {
                x: self.id,
                axis,
            },
            self.shape.clone(),
            data,
            self.requires_grad(),
        ))
    }

    /// Zero-mean unit-variance normalization along `axis` (no affine).
    pub fn layer_norm(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Config(format!(
                "layer_norm axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.shape[axis] < 2 {
            return Err(Error::Config(format!(
                "layer_norm axis length must be >= 2, got {}",
                self.shape[axis]
            )));
        }
        let (outer, n, inner_stride) = axis_decompose(&self.shape, axis);
        let nf = n as f64;
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner_stride {
                let at = |j: usize| (o * n + j) * inner_stride + i;
                let mean = (0..n).map(|j| xv[at(j)]).sum::<f64>() / nf;
                let var = (0..n).map(|j| (xv[at(j)] - mean).powi(2)).sum::<f64>() / nf;
                let inv_std = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..n {
                    data[at(j)] = (xv[at(j)] - mean) * inv_std;
                }
            }
        }
        drop(inner);
        Ok(self.graph.record(
            Op::LayerNorm {
                x: self.id,
                axis,
            },
            self.shape.clone(),
            data,
            self.requires_grad(),
        ))
    }

    /// Per-channel 2-D convolution with odd kernel, zero padding and given
    /// dilation; stride 1 preserves spatial size.
    pub fn depthwise_conv2d(&self, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
        self.depthwise_conv2d_strided(kernel, dilation, 1)
    }

    pub fn depthwise_conv2d_strided(
        &self,
        kernel: &Tensor,
        dilation: usize,
        stride: usize,
    ) -> Result<Tensor> {
        assert!(self.graph.same_graph(&kernel.graph));
        if self.rank() != 3 || kernel.rank() != 3 {
            return Err(dim_err("depthwise_conv2d", &self.shape, &kernel.shape));
        }
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let ksz = kernel.shape[1];
        if kernel.shape[0] != ch || kernel.shape[2] != ksz {
            return Err(dim_err("depthwise_conv2d", &self.shape, &kernel.shape));
        }
        if ksz % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise_conv2d kernel size must be odd, got {ksz}"
            )));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::Config(
                "depthwise_conv2d dilation and stride must be >= 1".into(),
            ));
        }
        let pad = dilation * (ksz - 1) / 2;
        let span = dilation * (ksz - 1) + 1;
        let oh = (h + 2 * pad - span) / stride + 1;
        let ow = (w + 2 * pad - span) / stride + 1;
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let kv = &inner.nodes[kernel.id].data;
        let mut data = vec![0.0; ch * oh * ow];
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    for ky in 0..ksz {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..ksz {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            sum += xv[(c * h + iy as usize) * w + ix as usize]
                                * kv[(c * ksz + ky) * ksz + kx];
                        }
                    }
                    data[(c * oh + oy) * ow + ox] = sum;
                }
            }
        }
        drop(inner);
        Ok(self.graph.record(
            Op::DwConv {
                x: self.id,
                k: kernel.id,
                dilation,
                stride,
            },
            vec![ch, oh, ow],
            data,
            self.requires_with(kernel),
        ))
    }

    /// out(p) = x(p + (dy,dx)), zero outside bounds.
    pub fn shift2d(&self, dy: isize, dx: isize) -> Tensor {
        assert_eq!(self.rank(), 3, "shift2d expects [C,H,W]");
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; xv.len()];
        for c in 0..ch {
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx = x + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    data[(c as usize * h + y as usize) * w + x as usize] =
                        xv[(c as usize * h + sy as usize) * w + sx as usize];
                }
            }
        }
        drop(inner);
        self.graph.record(
            Op::Shift2d {
                x: self.id,
                dy,
                dx,
            },
            self.shape.clone(),
            data,
            self.requires_grad(),
        )
    }

    /// Gather the 9 positions {p + d·(δy,δx) : δ ∈ {-1,0,1}²} per position,
    /// zero outside bounds. Output `[9, C, H, W]`, offsets in row-major δ order.
    pub fn unfold_neighborhood(&self, d: usize) -> Result<Tensor> {
        if d < 1 {
            return Err(Error::Config("unfold_neighborhood requires d >= 1".into()));
        }
        assert_eq!(self.rank(), 3, "unfold_neighborhood expects [C,H,W]");
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut slots = Vec::with_capacity(9);
        for dy in [-1isize, 0, 1] {
            for dx in [-1isize, 0, 1] {
                let shifted = self.shift2d(dy * d as isize, dx * d as isize);
                slots.push(shifted.reshape(&[1, ch * h * w])?);
            }
        }
        let refs: Vec<&Tensor> = slots.iter().collect();
        Tensor::concat(&refs, 0)?.reshape(&[9, ch, h, w])
    }

    /// Corner-aligned bilinear resize of `[C,H,W]` to `[C,oh,ow]`.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Tensor {
        assert_eq!(self.rank(), 3, "bilinear_resize expects [C,H,W]");
        assert!(oh >= 1 && ow >= 1);
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let rows = Rc::new(ResizeAxis::corner_aligned(h, oh));
        let cols = Rc::new(ResizeAxis::corner_aligned(w, ow));
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; ch * oh * ow];
        for c in 0..ch {
            let base = c * h * w;
            for oy in 0..oh {
                let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                for ox in 0..ow {
                    let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                    let v = (1.0 - fy) * (1.0 - fx) * xv[base + y0 * w + x0]
                        + (1.0 - fy) * fx * xv[base + y0 * w + x1]
                        + fy * (1.0 - fx) * xv[base + y1 * w + x0]
                        + fy * fx * xv[base + y1 * w + x1];
                    data[(c * oh + oy) * ow + ox] = v;
                }
            }
        }
        drop(inner);
        self.graph.record(
            Op::BilinearResize {
                x: self.id,
                rows,
                cols,
            },
            vec![ch, oh, ow],
            data,
            self.requires_grad(),
        )
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0];
        if axis >= first.rank() {
            return Err(Error::Config(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape
            )));
        }
        let mut out_shape = first.shape.clone();
        let mut total = 0usize;
        for p in parts {
            assert!(first.graph.same_graph(&p.graph));
            if p.rank() != first.rank() {
                return Err(dim_err("concat", &first.shape, &p.shape));
            }
            for (ax, (&a, &b)) in first.shape.iter().zip(p.shape.iter()).enumerate() {
                if ax != axis && a != b {
                    return Err(dim_err("concat", &first.shape, &p.shape));
                }
            }
            total += p.shape[axis];
        }
        out_shape[axis] = total;
        let (outer, n_out, inner_stride) = axis_decompose(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let inner = first.graph.borrow();
        let mut data = vec![0.0; numel];
        let mut offset = 0usize;
        for p in parts {
            let n_p = p.shape[axis];
            let pv = &inner.nodes[p.id].data;
            for o in 0..outer {
                for j in 0..n_p {
                    let dst = (o * n_out + offset + j) * inner_stride;
                    let src = (o * n_p + j) * inner_stride;
                    data[dst..dst + inner_stride].copy_from_slice(&pv[src..src + inner_stride]);
                }
            }
            offset += n_p;
        }
        drop(inner);
        let requires = parts.iter().any(|p| p.requires_grad());
        Ok(first.graph.record(
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            out_shape,
            data,
            requires,
        ))
    }

    /// Split along `axis` into chunks of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() {
            return Err(Error::Config(format!(
                "split axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::Config(format!(
                "split sizes {:?} do not cover axis length {}",
                sizes, self.shape[axis]
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &len in sizes {
            out.push(self.slice(axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::Config(format!(
                "slice [{start}, {start}+{len}) on axis {axis} exceeds shape {:?}",
                self.shape
            )));
        }
        let (outer, n_src, inner_stride) = axis_decompose(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; outer * len * inner_stride];
        for o in 0..outer {
            for j in 0..len {
                let src = (o * n_src + start + j) * inner_stride;
                let dst = (o * len + j) * inner_stride;
                data[dst..dst + inner_stride].copy_from_slice(&xv[src..src + inner_stride]);
            }
        }
        drop(inner);
        Ok(self.graph.record(
            Op::Slice {
                src: self.id,
                axis,
                start,
                len,
            },
            out_shape,
            data,
            self.requires_grad(),
        ))
    }

    /// Select rows of a rank-2 tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 2, "gather_rows expects rank 2");
        let cols = self.shape[1];
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; rows.len() * cols];
        for (r_out, &r_in) in rows.iter().enumerate() {
            assert!(r_in < self.shape[0], "gather_rows index out of range");
            data[r_out * cols..(r_out + 1) * cols]
                .copy_from_slice(&xv[r_in * cols..(r_in + 1) * cols]);
        }
        drop(inner);
        self.graph.record(
            Op::GatherRows {
                src: self.id,
                rows: Rc::new(rows.to_vec()),
            },
            vec![rows.len(), cols],
            data,
            self.requires_grad(),
        )
    }

    /// Flatten `[C,H,W]` to a `[L,C]` sequence; token t is position perm[t].
    pub fn to_seq(&self, perm: &Rc<Vec<usize>>) -> Tensor {
        assert_eq!(self.rank(), 3, "to_seq expects [C,H,W]");
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let sp = h * w;
        assert_eq!(perm.len(), sp, "permutation length mismatch");
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; sp * ch];
        for (t, &p) in perm.iter().enumerate() {
            for c in 0..ch {
                data[t * ch + c] = xv[c * sp + p];
            }
        }
        drop(inner);
        self.graph.record(
            Op::ToSeq {
                src: self.id,
                perm: perm.clone(),
            },
            vec![sp, ch],
            data,
            self.requires_grad(),
        )
    }

    /// Inverse of [`Tensor::to_seq`] for the same permutation.
    pub fn from_seq(&self, perm: &Rc<Vec<usize>>, h: usize, w: usize) -> Tensor {
        assert_eq!(self.rank(), 2, "from_seq expects [L,C]");
        let (l, ch) = (self.shape[0], self.shape[1]);
        assert_eq!(l, h * w);
        assert_eq!(perm.len(), l);
        let inner = self.graph.borrow();
        let xv = &inner.nodes[self.id].data;
        let mut data = vec![0.0; ch * h * w];
        for (t, &p) in perm.iter().enumerate() {
            for c in 0..ch {
                data[c * h * w + p] = xv[t * ch + c];
            }
        }
        drop(inner);
        self.graph.record(
            Op::FromSeq {
                src: self.id,
                perm: perm.clone(),
            },
            vec![ch, h, w],
            data,
            self.requires_grad(),
        )
    }
}
