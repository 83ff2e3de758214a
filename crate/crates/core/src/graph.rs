//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass; calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that was
//! created with [`Graph::param`] (or depends on one).
//!
//! All kernels are single-threaded and visit elements in a fixed order, so a
//! forward/backward pass is bit-reproducible for identical inputs.
//!
//! Image tensors use the `[batch, channels, height, width]` layout.

use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            pad_h: kernel / 2,
            pad_w: kernel / 2,
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: 1,
            pad_h: 0,
            pad_w: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == 1
            && self.spec.pad_h == 0
            && self.spec.pad_w == 0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    /// Input and its cached sigmoid.
    Silu(Var, Vec<F>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<F>>,
    },
    Upsample2x(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    StraightThrough(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ToRows(Var),
    FromRows {
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    MatMulNT(Var, Var),
    Transpose(Var),
    NormalizeRows(Var, F),
    LogSoftmaxRows(Var),
    Diag(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Values held fixed by stop-gradient and straight-through nodes, in
/// creation order.
///
/// Replaying a graph with these values turns it into the surrogate function
/// whose exact derivative [`Graph::backward`] computes, which is what finite
/// difference checks need.
#[derive(Debug, Clone, Default)]
pub struct Frozen<F> {
    values: Vec<Tensor<F>>,
}

/// Tape of operations for one forward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    recorded: Vec<Tensor<F>>,
    replay: Option<Vec<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recorded: Vec::new(),
            replay: None,
        }
    }

    /// A graph whose stop-gradient outputs and straight-through offsets are
    /// taken from `frozen` instead of being computed.
    pub fn replaying(frozen: Frozen<F>) -> Self {
        Self {
            replay: Some(frozen.values),
            ..Self::new()
        }
    }

    /// Values recorded at stop-gradient and straight-through nodes so far.
    pub fn frozen(&self) -> Frozen<F> {
        Frozen {
            values: self.recorded.clone(),
        }
    }

    fn replayed(&self) -> Option<Tensor<F>> {
        let k = self.recorded.len();
        self.replay.as_ref().map(|r| {
            r.get(k)
                .cloned()
                .expect("replayed graph has more frozen nodes than the recording")
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no gradient to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self
            .replayed()
            .unwrap_or_else(|| self.nodes[v.0].value.clone());
        assert_eq!(t.shape(), self.shape(v));
        self.recorded.push(t.clone());
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// Square root; the gradient is taken as zero where the input is zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.sqrt());
        let rg = self.rg(a);
        self.push(t, Op::Sqrt(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig: Vec<F> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let out = x.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let t = Tensor::from_vec(x.shape(), out).expect("silu");
        let rg = self.rg(a);
        let sig = if rg { sig } else { Vec::new() };
        self.push(t, Op::Silu(a, sig), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = F::from_f64(v.numel() as f64);
        let s: F = v.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// 2-D convolution (cross-correlation). `x: [B, Cin, H, W]`,
    /// `w: [Cout, Cin, kh, kw]`, optional `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D, got {:?}", xs);
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D, got {:?}", ws);
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {:?} vs {:?}", xs, ws);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(xs[2] + 2 * spec.pad_h >= kh && xs[3] + 2 * spec.pad_w >= kw);
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh,
            kw,
            ho: (xs[2] + 2 * spec.pad_h - kh) / spec.stride + 1,
            wo: (xs[3] + 2 * spec.pad_w - kw) / spec.stride + 1,
            spec,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let cols = if geom.is_pointwise() {
            None
        } else {
            let mut cols = vec![F::ZERO; geom.batch * rows * ncols];
            for bi in 0..geom.batch {
                im2col(
                    &xv[bi * geom.cin * geom.h * geom.w..(bi + 1) * geom.cin * geom.h * geom.w],
                    &geom,
                    &mut cols[bi * rows * ncols..(bi + 1) * rows * ncols],
                );
            }
            Some(cols)
        };
        let mut out = vec![F::ZERO; geom.batch * geom.cout * ncols];
        for bi in 0..geom.batch {
            let src = match &cols {
                Some(c) => &c[bi * rows * ncols..],
                None => &xv[bi * rows * ncols..],
            };
            let dst = &mut out[bi * geom.cout * ncols..(bi + 1) * geom.cout * ncols];
            // SAFETY: dimensions match the slice lengths computed above.
            unsafe {
                F::gemm(
                    geom.cout,
                    rows,
                    ncols,
                    F::ONE,
                    wv.as_ptr(),
                    rows as isize,
                    1,
                    src.as_ptr(),
                    ncols as isize,
                    1,
                    F::ZERO,
                    dst.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), geom.cout);
            for (i, chunk) in out.chunks_mut(ncols).enumerate() {
                let bias = bv[i % geom.cout];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        let t = Tensor::from_vec(&[geom.batch, geom.cout, geom.ho, geom.wo], out).expect("conv");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // Cached columns are only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { None };
        self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![F::ZERO; bc * 4 * h * w];
        for p in 0..bc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out).expect("upsample");
        let rg = self.rg(x);
        self.push(t, Op::Upsample2x(x), rg)
    }

    /// `x: [B, in]`, `w: [out, in]` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear shape mismatch {:?} vs {:?}", xs, ws);
        let (bsz, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::ZERO; bsz * fout];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        // SAFETY: x is [bsz, fin], w is read transposed as [fin, fout].
        unsafe {
            F::gemm(
                bsz,
                fin,
                fout,
                F::ONE,
                xv.as_ptr(),
                fin as isize,
                1,
                wv.as_ptr(),
                1,
                fin as isize,
                F::ZERO,
                out.as_mut_ptr(),
                fout as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::from_vec(&[bsz, fout], out).expect("linear");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    /// Feature-wise modulation `x * (1 + scale) + shift` with per-sample,
    /// per-channel `scale, shift: [B, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (bsz, c) = (s[0], s[1]);
        let hw = s[2] * s[3];
        assert_eq!(self.shape(scale), &[bsz, c]);
        assert_eq!(self.shape(shift), &[bsz, c]);
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let tv = self.value(shift).data();
        let mut out = vec![F::ZERO; xv.len()];
        for p in 0..bsz * c {
            let (m, a) = (F::ONE + sv[p], tv[p]);
            for k in p * hw..(p + 1) * hw {
                out[k] = xv[k] * m + a;
            }
        }
        let t = Tensor::from_vec(&s, out).expect("modulate");
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(t, Op::Modulate { x, scale, shift }, rg)
    }

    /// Forward value `value`, gradient passed unchanged to `through`.
    pub fn straight_through(&mut self, through: Var, value: Tensor<F>) -> Var {
        assert_eq!(self.shape(through), value.shape());
        let value = match self.replayed() {
            Some(offset) => {
                let out = zip_map(self.value(through), &offset, |x, o| x + o);
                self.recorded.push(offset);
                out
            }
            None => {
                let offset = zip_map(&value, self.value(through), |v, x| v - x);
                self.recorded.push(offset);
                value
            }
        };
        let rg = self.rg(through);
        self.push(value, Op::StraightThrough(through), rg)
    }

    /// Rows `idx` of a 2-D tensor.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_vec(&[idx.len(), d], out).expect("gather");
        let rg = self.rg(table);
        self.push(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// `[B, C, H, W]` → `[B*H*W, C]`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let t = nchw_to_rows(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let t = Tensor::from_vec(&[s[0] * s[2] * s[3], s[1]], t).expect("rows");
        let rg = self.rg(x);
        self.push(t, Op::ToRows(x), rg)
    }

    /// `[B*H*W, C]` → `[B, C, H, W]`.
    pub fn from_rows(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[0], batch * h * w);
        let t = rows_to_nchw(self.value(x).data(), batch, s[1], h, w);
        let t = Tensor::from_vec(&[batch, s[1], h, w], t).expect("from rows");
        let rg = self.rg(x);
        self.push(t, Op::FromRows { x, batch, h, w }, rg)
    }

    /// Concatenate along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::from_vec(&shape, data).expect("concat");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::Concat(parts.to_vec()), rg)
    }

    /// Entries `start..start+len` of the leading dimension.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0]);
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let t = Tensor::from_vec(&shape, data).expect("slice");
        let rg = self.rg(x);
        self.push(t, Op::Slice { x, start }, rg)
    }

    /// `a: [m, k]`, `b: [n, k]` → `a bᵀ: [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[1], sb[1]);
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::ZERO; m * n];
        // SAFETY: a is [m, k], b read transposed as [k, n].
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::ONE,
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                1,
                k as isize,
                F::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let t = Tensor::from_vec(&[m, n], out).expect("matmul");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let t = transpose2d(self.value(a).data(), s[0], s[1]);
        let t = Tensor::from_vec(&[s[1], s[0]], t).expect("transpose");
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Each row divided by `sqrt(|row|² + eps)`. With `eps = 0` all-zero rows
    /// stay zero.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let eps = F::from_f64(eps);
        let s = self.shape(a).to_vec();
        let d = s[1];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            if eps > F::ZERO {
                let n: F = row.iter().map(|&v| v * v).sum();
                let r = (n + eps).sqrt();
                row.iter_mut().for_each(|v| *v = *v / r);
            } else {
                // Divide by the largest magnitude first: the result is then
                // bit-identical for any exactly representable rescaling.
                let m = row.iter().fold(F::ZERO, |m, &v| m.max(v.abs()));
                if m == F::ZERO {
                    continue;
                }
                row.iter_mut().for_each(|v| *v = *v / m);
                let r = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                row.iter_mut().for_each(|v| *v = *v / r);
            }
        }
        let t = Tensor::from_vec(&s, out).expect("normalize");
        let rg = self.rg(a);
        self.push(t, Op::NormalizeRows(a, eps), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let d = s[1];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for v in row {
                *v -= lse;
            }
        }
        let t = Tensor::from_vec(&s, out).expect("log softmax");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxRows(a), rg)
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s[0], s[1]);
        let v = self.value(a).data();
        let out = (0..s[0]).map(|i| v[i * s[1] + i]).collect();
        let t = Tensor::from_vec(&[s[0]], out).expect("diag");
        let rg = self.rg(a);
        self.push(t, Op::Diag(a), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::ONE));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        macro_rules! send {
            ($v:expr, $t:expr) => {
                if self.rg($v) {
                    add_into(&mut grads[$v.0], $t);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send!(*a, g.clone());
                send!(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send!(*a, g.clone());
                send!(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send!(*a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    send!(*b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    send!(*a, zip_map(g, bv, |x, y| x / y));
                }
                if self.rg(*b) {
                    let t = zip_map(g, out, |x, q| x * q);
                    send!(*b, zip_map(&t, bv, |x, y| -x / y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                send!(*a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => send!(*a, g.clone()),
            Op::Square(a) => {
                let two = F::from_f64(2.0);
                send!(*a, zip_map(g, self.value(*a), |x, y| two * x * y));
            }
            Op::Abs(a) => send!(
                *a,
                zip_map(g, self.value(*a), |x, y| if y > F::ZERO {
                    x
                } else if y < F::ZERO {
                    -x
                } else {
                    F::ZERO
                })
            ),
            Op::Sqrt(a) => {
                let half = F::from_f64(0.5);
                send!(
                    *a,
                    zip_map(g, out, |x, r| if r > F::ZERO { half * x / r } else { F::ZERO })
                );
            }
            Op::Exp(a) => send!(*a, zip_map(g, out, |x, y| x * y)),
            Op::Log(a) => send!(*a, zip_map(g, self.value(*a), |x, y| x / y)),
            Op::Silu(a, sig) => {
                let xv = self.value(*a).data();
                let data = gd
                    .iter()
                    .zip(xv)
                    .zip(sig)
                    .map(|((&gv, &x), &s)| gv * s * (F::ONE + x * (F::ONE - s)))
                    .collect();
                send!(*a, Tensor::from_vec(g.shape(), data).expect("silu grad"));
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                send!(*a, Tensor::full(s, gd[0]));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                let n = F::from_f64(v.numel() as f64);
                send!(*a, Tensor::full(v.shape(), gd[0] / n));
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                send!(*a, g.clone().reshape(&s).expect("reshape back"));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols.as_deref(), g, grads),
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut gx = vec![F::ZERO; bc * h * w];
                for p in 0..bc {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                send!(*x, Tensor::from_vec(&s, gx).expect("upsample grad"));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (bsz, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut gx = vec![F::ZERO; bsz * fin];
                    // SAFETY: g is [bsz, fout], w is [fout, fin].
                    unsafe {
                        F::gemm(
                            bsz,
                            fout,
                            fin,
                            F::ONE,
                            gd.as_ptr(),
                            fout as isize,
                            1,
                            self.value(*w).data().as_ptr(),
                            fin as isize,
                            1,
                            F::ZERO,
                            gx.as_mut_ptr(),
                            fin as isize,
                            1,
                        );
                    }
                    send!(*x, Tensor::from_vec(&xs, gx).expect("linear gx"));
                }
                if self.rg(*w) {
                    let mut gw = vec![F::ZERO; fout * fin];
                    // SAFETY: gᵀ is [fout, bsz], x is [bsz, fin].
                    unsafe {
                        F::gemm(
                            fout,
                            bsz,
                            fin,
                            F::ONE,
                            gd.as_ptr(),
                            1,
                            fout as isize,
                            self.value(*x).data().as_ptr(),
                            fin as isize,
                            1,
                            F::ZERO,
                            gw.as_mut_ptr(),
                            fin as isize,
                            1,
                        );
                    }
                    send!(*w, Tensor::from_vec(&[fout, fin], gw).expect("linear gw"));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![F::ZERO; fout];
                        for row in gd.chunks(fout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        send!(*b, Tensor::from_vec(&[fout], gb).expect("linear gb"));
                    }
                }
            }
            Op::Modulate { x, scale, shift } => {
                let s = self.shape(*x).to_vec();
                let (bc, hw) = (s[0] * s[1], s[2] * s[3]);
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                if self.rg(*x) {
                    let mut gx = vec![F::ZERO; xv.len()];
                    for (p, &sp) in sv.iter().enumerate().take(bc) {
                        let m = F::ONE + sp;
                        for k in p * hw..(p + 1) * hw {
                            gx[k] = gd[k] * m;
                        }
                    }
                    send!(*x, Tensor::from_vec(&s, gx).expect("mod gx"));
                }
                if self.rg(*scale) || self.rg(*shift) {
                    let mut gs = vec![F::ZERO; bc];
                    let mut gt = vec![F::ZERO; bc];
                    for p in 0..bc {
                        let (mut a, mut b) = (F::ZERO, F::ZERO);
                        for k in p * hw..(p + 1) * hw {
                            a += gd[k] * xv[k];
                            b += gd[k];
                        }
                        gs[p] = a;
                        gt[p] = b;
                    }
                    send!(*scale, Tensor::from_vec(&[s[0], s[1]], gs).expect("mod gs"));
                    send!(*shift, Tensor::from_vec(&[s[0], s[1]], gt).expect("mod gt"));
                }
            }
            Op::StraightThrough(a) => send!(*a, g.clone()),
            Op::GatherRows { table, idx } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut gt = vec![F::ZERO; s[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..d {
                        gt[i * d + k] += gd[r * d + k];
                    }
                }
                send!(*table, Tensor::from_vec(&s, gt).expect("gather grad"));
            }
            Op::ToRows(x) => {
                let s = self.shape(*x).to_vec();
                let t = rows_to_nchw(gd, s[0], s[1], s[2], s[3]);
                send!(*x, Tensor::from_vec(&s, t).expect("to rows grad"));
            }
            Op::FromRows { x, batch, h, w } => {
                let s = self.shape(*x).to_vec();
                let t = nchw_to_rows(gd, *batch, s[1], *h, *w);
                send!(*x, Tensor::from_vec(&s, t).expect("from rows grad"));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        let t = Tensor::from_vec(self.shape(p), gd[off..off + n].to_vec())
                            .expect("concat grad");
                        send!(p, t);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x).to_vec();
                let inner: usize = s[1..].iter().product();
                let mut gx = vec![F::ZERO; s.iter().product()];
                gx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                send!(*x, Tensor::from_vec(&s, gx).expect("slice grad"));
            }
            Op::MatMulNT(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.rg(*a) {
                    let mut ga = vec![F::ZERO; m * k];
                    // SAFETY: g is [m, n], b is [n, k].
                    unsafe {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::ONE,
                            gd.as_ptr(),
                            n as isize,
                            1,
                            self.value(*b).data().as_ptr(),
                            k as isize,
                            1,
                            F::ZERO,
                            ga.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    send!(*a, Tensor::from_vec(&sa, ga).expect("mm ga"));
                }
                if self.rg(*b) {
                    let mut gb = vec![F::ZERO; n * k];
                    // SAFETY: gᵀ is [n, m], a is [m, k].
                    unsafe {
                        F::gemm(
                            n,
                            m,
                            k,
                            F::ONE,
                            gd.as_ptr(),
                            1,
                            n as isize,
                            self.value(*a).data().as_ptr(),
                            k as isize,
                            1,
                            F::ZERO,
                            gb.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    send!(*b, Tensor::from_vec(&sb, gb).expect("mm gb"));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a).to_vec();
                let t = transpose2d(gd, s[1], s[0]);
                send!(*a, Tensor::from_vec(&s, t).expect("transpose grad"));
            }
            Op::NormalizeRows(a, eps) => {
                let s = self.shape(*a).to_vec();
                let d = s[1];
                let xv = self.value(*a).data();
                let yv = out.data();
                let mut gx = vec![F::ZERO; xv.len()];
                for r in 0..s[0] {
                    let row = r * d..(r + 1) * d;
                    let n: F = xv[row.clone()].iter().map(|&v| v * v).sum();
                    let norm = (n + *eps).sqrt();
                    if norm == F::ZERO {
                        continue;
                    }
                    let dot: F = gd[row.clone()]
                        .iter()
                        .zip(&yv[row.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for k in row {
                        gx[k] = (gd[k] - yv[k] * dot) / norm;
                    }
                }
                send!(*a, Tensor::from_vec(&s, gx).expect("normalize grad"));
            }
            Op::LogSoftmaxRows(a) => {
                let s = self.shape(*a).to_vec();
                let d = s[1];
                let yv = out.data();
                let mut gx = vec![F::ZERO; yv.len()];
                for r in 0..s[0] {
                    let row = r * d..(r + 1) * d;
                    let gs: F = gd[row.clone()].iter().copied().sum();
                    for k in row {
                        gx[k] = gd[k] - yv[k].exp() * gs;
                    }
                }
                send!(*a, Tensor::from_vec(&s, gx).expect("lsm grad"));
            }
            Op::Diag(a) => {
                let s = self.shape(*a).to_vec();
                let mut gx = vec![F::ZERO; s[0] * s[1]];
                for i in 0..s[0] {
                    gx[i * s[1] + i] = gd[i];
                }
                send!(*a, Tensor::from_vec(&s, gx).expect("diag grad"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: Option<&[F]>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let gd = g.data();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let out_stride = geom.cout * ncols;
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![F::ZERO; geom.cout];
                for (i, chunk) in gd.chunks(ncols).enumerate() {
                    gb[i % geom.cout] += chunk.iter().copied().sum::<F>();
                }
                add_into(
                    &mut grads[b.0],
                    Tensor::from_vec(&[geom.cout], gb).expect("conv gb"),
                );
            }
        }
        if self.rg(w) {
            let xv = self.value(x).data();
            let mut gw = vec![F::ZERO; geom.cout * rows];
            for bi in 0..geom.batch {
                let src = match cols {
                    Some(c) => &c[bi * rows * ncols..(bi + 1) * rows * ncols],
                    None => &xv[bi * rows * ncols..(bi + 1) * rows * ncols],
                };
                // SAFETY: gout_b is [cout, ncols], colsᵀ is [ncols, rows].
                unsafe {
                    F::gemm(
                        geom.cout,
                        ncols,
                        rows,
                        F::ONE,
                        gd[bi * out_stride..].as_ptr(),
                        ncols as isize,
                        1,
                        src.as_ptr(),
                        1,
                        ncols as isize,
                        F::ONE,
                        gw.as_mut_ptr(),
                        rows as isize,
                        1,
                    );
                }
            }
            let ws = self.shape(w).to_vec();
            add_into(
                &mut grads[w.0],
                Tensor::from_vec(&ws, gw).expect("conv gw"),
            );
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            let in_stride = geom.cin * geom.h * geom.w;
            let mut gx = vec![F::ZERO; geom.batch * in_stride];
            let mut gcols = vec![F::ZERO; rows * ncols];
            for bi in 0..geom.batch {
                let dst: &mut [F] = if geom.is_pointwise() {
                    &mut gx[bi * in_stride..(bi + 1) * in_stride]
                } else {
                    &mut gcols
                };
                // SAFETY: wᵀ is [rows, cout], gout_b is [cout, ncols].
                unsafe {
                    F::gemm(
                        rows,
                        geom.cout,
                        ncols,
                        F::ONE,
                        wv.as_ptr(),
                        1,
                        rows as isize,
                        gd[bi * out_stride..].as_ptr(),
                        ncols as isize,
                        1,
                        F::ZERO,
                        dst.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
                if !geom.is_pointwise() {
                    col2im(&gcols, geom, &mut gx[bi * in_stride..(bi + 1) * in_stride]);
                }
            }
            let xs = self.shape(x).to_vec();
            add_into(
                &mut grads[x.0],
                Tensor::from_vec(&xs, gx).expect("conv gx"),
            );
        }
    }
}

/// Output indices `o` in `0..n_out` whose input coordinate
/// `o * stride + k - pad` lies in `0..n_in`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // Largest o with o * stride + k - pad <= n_in - 1.
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let ncols = g.ho * g.wo;
    let s = g.spec.stride;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oi_lo, oi_hi) = valid_range(g.h, g.ho, s, ki, g.spec.pad_h);
            for kj in 0..g.kw {
                let (oj_lo, oj_hi) = valid_range(g.w, g.wo, s, kj, g.spec.pad_w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst[..oi_lo * g.wo].fill(F::ZERO);
                dst[oi_hi * g.wo..].fill(F::ZERO);
                for oi in oi_lo..oi_hi {
                    let ii = oi * s + ki - g.spec.pad_h;
                    let src = &plane[ii * g.w..(ii + 1) * g.w];
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    drow[..oj_lo].fill(F::ZERO);
                    drow[oj_hi..].fill(F::ZERO);
                    let j0 = oj_lo * s + kj - g.spec.pad_w;
                    if s == 1 {
                        drow[oj_lo..oj_hi].copy_from_slice(&src[j0..j0 + (oj_hi - oj_lo)]);
                    } else {
                        for (d, v) in drow[oj_lo..oj_hi].iter_mut().zip(src[j0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    let ncols = g.ho * g.wo;
    let s = g.spec.stride;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oi_lo, oi_hi) = valid_range(g.h, g.ho, s, ki, g.spec.pad_h);
            for kj in 0..g.kw {
                let (oj_lo, oj_hi) = valid_range(g.w, g.wo, s, kj, g.spec.pad_w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in oi_lo..oi_hi {
                    let ii = oi * s + ki - g.spec.pad_h;
                    let drow = &mut plane[ii * g.w..(ii + 1) * g.w];
                    let srow = &src[oi * g.wo + oj_lo..oi * g.wo + oj_hi];
                    let j0 = oj_lo * s + kj - g.spec.pad_w;
                    if s == 1 {
                        for (d, v) in drow[j0..j0 + srow.len()].iter_mut().zip(srow) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in drow[j0..].iter_mut().step_by(s).zip(srow) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn nchw_to_rows<F: Scalar>(x: &[F], b: usize, c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut out = vec![F::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = x[(bi * c + ci) * hw + p];
            }
        }
    }
    out
}

pub(crate) fn rows_to_nchw<F: Scalar>(x: &[F], b: usize, c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut out = vec![F::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * c + ci) * hw + p] = x[(bi * hw + p) * c + ci];
            }
        }
    }
    out
}

fn transpose2d<F: Scalar>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
