//! Tape-based reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Tape`] is an append-only list of nodes; every forward op pushes one
//! node recording its parents, so reverse insertion order is already a
//! topological order for backprop. Convolution and linear layers lower to
//! GEMM; every other op is a hand-written kernel with an explicit adjoint.
//!
//! Layouts: images are `[N, C, H, W]`, feature matrices `[N, D]`, scalars
//! `[1]`. All data is row-major.

use crate::error::{Error, Result};

/// Element type of the substrate: f32 for training, f64 for gradient checks.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Send + Sync + 'static {
    /// C += alpha * A(m x k) * B(k x n) with arbitrary strides, beta scaling C.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_double(v: f64) -> Self {
        num_traits::cast(v).expect("f64 -> scalar")
    }

    fn to_double(self) -> f64 {
        num_traits::cast(self).expect("scalar -> f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    Conv2d { input: usize, weight: usize, dims: ConvDims },
    BiasAdd { input: usize, bias: usize },
    ChannelEmbed { input: usize, emb: usize },
    Silu { input: usize },
    Sigmoid { input: usize },
    Softplus { input: usize },
    Upsample2 { input: usize },
    ConcatChannels { a: usize, b: usize },
    ConcatCols { a: usize, b: usize },
    NarrowCols { input: usize, start: usize, len: usize },
    Linear { input: usize, weight: usize },
    GlobalAvgPool { input: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    Abs { input: usize },
    Square { input: usize },
    Sqrt { input: usize },
    SumRows { input: usize },
    MeanAll { input: usize },
}

struct Node<F: Scalar> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    op: Op,
}

/// Wengert list holding one forward evaluation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<F>, shape: &[usize]) -> Var {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "leaf shape");
        self.push(data, shape.to_vec(), Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ---- forward ops -----------------------------------------------------

    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    /// input `[N,Cin,H,W]`, weight `[Cout,Cin,3,3]` -> `[N,Cout,H',W']`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 4 || wshape.len() != 4 || wshape[2] != 3 || wshape[3] != 3 {
            return Err(self.mismatch("conv2d", input, weight));
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let cout = wshape[0];
        if wshape[1] != cin {
            return Err(self.mismatch("conv2d", input, weight));
        }
        let h_out = (h - 1) / stride + 1;
        let w_out = (w - 1) / stride + 1;
        let dims = ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            stride,
            h_out,
            w_out,
        };

        let l = h_out * w_out;
        let mut out = vec![F::zero(); n * cout * l];
        conv_forward(
            &self.nodes[input.0].data,
            &self.nodes[weight.0].data,
            dims,
            &mut out,
        );
        Ok(self.push(
            out,
            vec![n, cout, h_out, w_out],
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                dims,
            },
        ))
    }

    /// Per-channel bias over `[N,C,H,W]` (or `[N,C]` with H=W=1 semantics).
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let c = ishape.get(1).copied().unwrap_or(0);
        if self.shape(bias) != [c] {
            return Err(self.mismatch("bias_add", input, bias));
        }
        let plane: usize = ishape[2..].iter().product();
        let mut data = self.nodes[input.0].data.clone();
        for chunk in data.chunks_exact_mut(c * plane.max(1)) {
            for (ci, cchunk) in chunk.chunks_exact_mut(plane.max(1)).enumerate() {
                let b = self.nodes[bias.0].data[ci];
                for v in cchunk {
                    *v = *v + b;
                }
            }
        }
        Ok(self.push(
            data,
            ishape,
            Op::BiasAdd {
                input: input.0,
                bias: bias.0,
            },
        ))
    }

    /// Add a per-sample, per-channel embedding `[N,C]` to `[N,C,H,W]`.
    pub fn channel_embed(&mut self, input: Var, emb: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (n, c) = (ishape[0], ishape[1]);
        if self.shape(emb) != [n, c] {
            return Err(self.mismatch("channel_embed", input, emb));
        }
        let plane: usize = ishape[2..].iter().product();
        let mut data = self.nodes[input.0].data.clone();
        for s in 0..n {
            for ci in 0..c {
                let e = self.nodes[emb.0].data[s * c + ci];
                let base = (s * c + ci) * plane;
                for v in &mut data[base..base + plane] {
                    *v = *v + e;
                }
            }
        }
        Ok(self.push(
            data,
            ishape,
            Op::ChannelEmbed {
                input: input.0,
                emb: emb.0,
            },
        ))
    }

    pub fn silu(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.nodes[input.0]
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        self.push(data, shape, Op::Silu { input: input.0 })
    }

    pub fn sigmoid_op(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.nodes[input.0].data.iter().map(|&x| sigmoid(x)).collect();
        self.push(data, shape, Op::Sigmoid { input: input.0 })
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.nodes[input.0]
            .data
            .iter()
            .map(|&x| softplus_stable(x))
            .collect();
        self.push(data, shape, Op::Softplus { input: input.0 })
    }

    /// Nearest-neighbor 2x upsample of `[N,C,H,W]`.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let ishape = self.shape(input).to_vec();
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let mut data = vec![F::zero(); n * c * 4 * h * w];
        let src = &self.nodes[input.0].data;
        for nc in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let v = src[(nc * h + y) * w + x];
                    let oy = 2 * y;
                    let ox = 2 * x;
                    let ow = 2 * w;
                    let base = nc * (2 * h) * ow;
                    data[base + oy * ow + ox] = v;
                    data[base + oy * ow + ox + 1] = v;
                    data[base + (oy + 1) * ow + ox] = v;
                    data[base + (oy + 1) * ow + ox + 1] = v;
                }
            }
        }
        self.push(data, vec![n, c, 2 * h, 2 * w], Op::Upsample2 { input: input.0 })
    }

    /// Concatenate along the channel axis of `[N,C,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(self.mismatch("concat_channels", a, b));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let plane = sa[2] * sa[3];
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&self.nodes[b.0].data[s * cb * plane..(s + 1) * cb * plane]);
        }
        Ok(self.push(
            data,
            vec![n, ca + cb, sa[2], sa[3]],
            Op::ConcatChannels { a: a.0, b: b.0 },
        ))
    }

    /// Concatenate two `[N,D]` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (da + db));
        for s in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[s * da..(s + 1) * da]);
            data.extend_from_slice(&self.nodes[b.0].data[s * db..(s + 1) * db]);
        }
        Ok(self.push(data, vec![n, da + db], Op::ConcatCols { a: a.0, b: b.0 }))
    }

    /// Columns `[start, start+len)` of a `[N,D]` matrix.
    pub fn narrow_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 2 || start + len > ishape[1] {
            return Err(Error::ShapeMismatch {
                op: "narrow_cols",
                lhs: ishape,
                rhs: vec![start, len],
            });
        }
        let (n, d) = (ishape[0], ishape[1]);
        let mut data = Vec::with_capacity(n * len);
        for s in 0..n {
            data.extend_from_slice(&self.nodes[input.0].data[s * d + start..s * d + start + len]);
        }
        Ok(self.push(
            data,
            vec![n, len],
            Op::NarrowCols {
                input: input.0,
                start,
                len,
            },
        ))
    }

    /// Affine map without bias: `[N,Din] x [Dout,Din]^T -> [N,Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] {
            return Err(self.mismatch("linear", input, weight));
        }
        let (n, din, dout) = (ishape[0], ishape[1], wshape[0]);
        let mut out = vec![F::zero(); n * dout];
        unsafe {
            F::gemm(
                n,
                din,
                dout,
                F::one(),
                self.nodes[input.0].data.as_ptr(),
                din as isize,
                1,
                self.nodes[weight.0].data.as_ptr(),
                1,
                din as isize,
                F::zero(),
                out.as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        Ok(self.push(
            out,
            vec![n, dout],
            Op::Linear {
                input: input.0,
                weight: weight.0,
            },
        ))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let ishape = self.shape(input).to_vec();
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let plane = h * w;
        let inv = F::from_double(1.0 / plane as f64);
        let src = &self.nodes[input.0].data;
        let data = (0..n * c)
            .map(|nc| {
                let mut acc = F::zero();
                for v in &src[nc * plane..(nc + 1) * plane] {
                    acc = acc + *v;
                }
                acc * inv
            })
            .collect();
        self.push(data, vec![n, c], Op::GlobalAvgPool { input: input.0 })
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(data, shape, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let shape = self.shape(input).to_vec();
        let c = F::from_double(factor);
        let data = self.nodes[input.0].data.iter().map(|&x| x * c).collect();
        self.push(data, shape, Op::Scale { input: input.0, factor })
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.nodes[input.0].data.iter().map(|&x| x.abs()).collect();
        self.push(data, shape, Op::Abs { input: input.0 })
    }

    pub fn square(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.nodes[input.0].data.iter().map(|&x| x * x).collect();
        self.push(data, shape, Op::Square { input: input.0 })
    }

    /// Elementwise square root; backward is guarded near zero.
    pub fn sqrt_op(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.nodes[input.0].data.iter().map(|&x| x.sqrt()).collect();
        self.push(data, shape, Op::Sqrt { input: input.0 })
    }

    /// `[N,D] -> [N]` row sums.
    pub fn sum_rows(&mut self, input: Var) -> Var {
        let ishape = self.shape(input).to_vec();
        let (n, d) = (ishape[0], ishape[1]);
        let src = &self.nodes[input.0].data;
        let data = (0..n)
            .map(|s| {
                let mut acc = F::zero();
                for v in &src[s * d..(s + 1) * d] {
                    acc = acc + *v;
                }
                acc
            })
            .collect();
        self.push(data, vec![n], Op::SumRows { input: input.0 })
    }

    /// Mean over every element -> scalar `[1]`.
    pub fn mean_all(&mut self, input: Var) -> Var {
        let count = self.nodes[input.0].data.len();
        let inv = F::from_double(1.0 / count as f64);
        let mut acc = F::zero();
        for v in &self.nodes[input.0].data {
            acc = acc + *v;
        }
        self.push(vec![acc * inv], vec![1], Op::MeanAll { input: input.0 })
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Fails on non-scalar losses and
    /// on tapes whose gradients were already computed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "stale graph: backward already ran on this tape".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &gout)?;
            self.nodes[id].grad = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: usize) -> &mut [F] {
        if self.nodes[id].grad.is_none() {
            self.nodes[id].grad = Some(vec![F::zero(); self.nodes[id].data.len()]);
        }
        self.nodes[id].grad.as_deref_mut().unwrap()
    }

    fn propagate(&mut self, id: usize, gout: &[F]) -> Result<()> {
        // Ops are dispatched by value to satisfy the borrow checker; node data
        // is read through raw indices only after the op copy.
        match self.node_op(id) {
            OpRef::Leaf => {}
            OpRef::Conv2d {
                input,
                weight,
                dims,
            } => self.conv2d_backward(input, weight, dims, gout),
            OpRef::BiasAdd { input, bias } => {
                let c = self.nodes[id].shape[1];
                let plane: usize = self.nodes[id].shape[2..].iter().product::<usize>().max(1);
                {
                    let gi = self.grad_buf(input);
                    for (g, v) in gi.iter_mut().zip(gout) {
                        *g = *g + *v;
                    }
                }
                let gb = self.grad_buf(bias);
                for (i, v) in gout.iter().enumerate() {
                    let ci = (i / plane) % c;
                    gb[ci] = gb[ci] + *v;
                }
            }
            OpRef::ChannelEmbed { input, emb } => {
                let (n, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let plane: usize = self.nodes[id].shape[2..].iter().product::<usize>().max(1);
                {
                    let gi = self.grad_buf(input);
                    for (g, v) in gi.iter_mut().zip(gout) {
                        *g = *g + *v;
                    }
                }
                let ge = self.grad_buf(emb);
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * plane;
                        let mut acc = F::zero();
                        for v in &gout[base..base + plane] {
                            acc = acc + *v;
                        }
                        ge[s * c + ci] = ge[s * c + ci] + acc;
                    }
                }
            }
            OpRef::Silu { input } => {
                let derivs: Vec<F> = self.nodes[input]
                    .data
                    .iter()
                    .map(|&x| {
                        let s = sigmoid(x);
                        s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                let gi = self.grad_buf(input);
                for ((g, d), v) in gi.iter_mut().zip(derivs).zip(gout) {
                    *g = *g + d * *v;
                }
            }
            OpRef::Sigmoid { input } => {
                let ys: Vec<F> = self.nodes[id].data.clone();
                let gi = self.grad_buf(input);
                for ((g, y), v) in gi.iter_mut().zip(ys).zip(gout) {
                    *g = *g + y * (F::one() - y) * *v;
                }
            }
            OpRef::Softplus { input } => {
                let derivs: Vec<F> = self.nodes[input].data.iter().map(|&x| sigmoid(x)).collect();
                let gi = self.grad_buf(input);
                for ((g, d), v) in gi.iter_mut().zip(derivs).zip(gout) {
                    *g = *g + d * *v;
                }
            }
            OpRef::Upsample2 { input } => {
                let ishape = self.nodes[input].shape.clone();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let gi = self.grad_buf(input);
                let ow = 2 * w;
                for nc in 0..n * c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = nc * (2 * h) * ow;
                            let acc = gout[base + 2 * y * ow + 2 * x]
                                + gout[base + 2 * y * ow + 2 * x + 1]
                                + gout[base + (2 * y + 1) * ow + 2 * x]
                                + gout[base + (2 * y + 1) * ow + 2 * x + 1];
                            let idx = (nc * h + y) * w + x;
                            gi[idx] = gi[idx] + acc;
                        }
                    }
                }
            }
            OpRef::ConcatChannels { a, b } => {
                let (n, ca) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let cb = self.nodes[b].shape[1];
                let plane = self.nodes[a].shape[2] * self.nodes[a].shape[3];
                {
                    let ga = self.grad_buf(a);
                    for s in 0..n {
                        let src = s * (ca + cb) * plane;
                        for i in 0..ca * plane {
                            ga[s * ca * plane + i] = ga[s * ca * plane + i] + gout[src + i];
                        }
                    }
                }
                let gb = self.grad_buf(b);
                for s in 0..n {
                    let src = s * (ca + cb) * plane + ca * plane;
                    for i in 0..cb * plane {
                        gb[s * cb * plane + i] = gb[s * cb * plane + i] + gout[src + i];
                    }
                }
            }
            OpRef::ConcatCols { a, b } => {
                let (n, da) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let db = self.nodes[b].shape[1];
                {
                    let ga = self.grad_buf(a);
                    for s in 0..n {
                        for i in 0..da {
                            ga[s * da + i] = ga[s * da + i] + gout[s * (da + db) + i];
                        }
                    }
                }
                let gb = self.grad_buf(b);
                for s in 0..n {
                    for i in 0..db {
                        gb[s * db + i] = gb[s * db + i] + gout[s * (da + db) + da + i];
                    }
                }
            }
            OpRef::NarrowCols { input, start, len } => {
                let (n, d) = (self.nodes[input].shape[0], self.nodes[input].shape[1]);
                let gi = self.grad_buf(input);
                for s in 0..n {
                    for i in 0..len {
                        gi[s * d + start + i] = gi[s * d + start + i] + gout[s * len + i];
                    }
                }
            }
            OpRef::Linear { input, weight } => {
                let (n, din) = (self.nodes[input].shape[0], self.nodes[input].shape[1]);
                let dout = self.nodes[weight].shape[0];
                // d_input = gout [N,Dout] x W [Dout,Din]
                let mut gi_acc = vec![F::zero(); n * din];
                unsafe {
                    F::gemm(
                        n,
                        dout,
                        din,
                        F::one(),
                        gout.as_ptr(),
                        dout as isize,
                        1,
                        self.nodes[weight].data.as_ptr(),
                        din as isize,
                        1,
                        F::zero(),
                        gi_acc.as_mut_ptr(),
                        din as isize,
                        1,
                    );
                }
                // d_weight = gout^T [Dout,N] x input [N,Din]
                let mut gw_acc = vec![F::zero(); dout * din];
                unsafe {
                    F::gemm(
                        dout,
                        n,
                        din,
                        F::one(),
                        gout.as_ptr(),
                        1,
                        dout as isize,
                        self.nodes[input].data.as_ptr(),
                        din as isize,
                        1,
                        F::zero(),
                        gw_acc.as_mut_ptr(),
                        din as isize,
                        1,
                    );
                }
                {
                    let gi = self.grad_buf(input);
                    for (g, v) in gi.iter_mut().zip(gi_acc) {
                        *g = *g + v;
                    }
                }
                let gw = self.grad_buf(weight);
                for (g, v) in gw.iter_mut().zip(gw_acc) {
                    *g = *g + v;
                }
            }
            OpRef::GlobalAvgPool { input } => {
                let ishape = self.nodes[input].shape.clone();
                let plane = ishape[2] * ishape[3];
                let inv = F::from_double(1.0 / plane as f64);
                let gi = self.grad_buf(input);
                for (nc, v) in gout.iter().enumerate() {
                    let scaled = *v * inv;
                    for g in &mut gi[nc * plane..(nc + 1) * plane] {
                        *g = *g + scaled;
                    }
                }
            }
            OpRef::Add { a, b } => {
                {
                    let ga = self.grad_buf(a);
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g = *g + *v;
                    }
                }
                let gb = self.grad_buf(b);
                for (g, v) in gb.iter_mut().zip(gout) {
                    *g = *g + *v;
                }
            }
            OpRef::Sub { a, b } => {
                {
                    let ga = self.grad_buf(a);
                    for (g, v) in ga.iter_mut().zip(gout) {
                        *g = *g + *v;
                    }
                }
                let gb = self.grad_buf(b);
                for (g, v) in gb.iter_mut().zip(gout) {
                    *g = *g - *v;
                }
            }
            OpRef::Mul { a, b } => {
                let bv: Vec<F> = self.nodes[b].data.clone();
                let av: Vec<F> = self.nodes[a].data.clone();
                {
                    let ga = self.grad_buf(a);
                    for ((g, y), v) in ga.iter_mut().zip(&bv).zip(gout) {
                        *g = *g + *y * *v;
                    }
                }
                let gb = self.grad_buf(b);
                for ((g, x), v) in gb.iter_mut().zip(&av).zip(gout) {
                    *g = *g + *x * *v;
                }
            }
            OpRef::Scale { input, factor } => {
                let c = F::from_double(factor);
                let gi = self.grad_buf(input);
                for (g, v) in gi.iter_mut().zip(gout) {
                    *g = *g + c * *v;
                }
            }
            OpRef::Abs { input } => {
                let signs: Vec<F> = self.nodes[input]
                    .data
                    .iter()
                    .map(|&x| {
                        if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let gi = self.grad_buf(input);
                for ((g, s), v) in gi.iter_mut().zip(signs).zip(gout) {
                    *g = *g + s * *v;
                }
            }
            OpRef::Square { input } => {
                let xs: Vec<F> = self.nodes[input].data.clone();
                let two = F::from_double(2.0);
                let gi = self.grad_buf(input);
                for ((g, x), v) in gi.iter_mut().zip(xs).zip(gout) {
                    *g = *g + two * x * *v;
                }
            }
            OpRef::Sqrt { input } => {
                let ys: Vec<F> = self.nodes[id].data.clone();
                let tiny = F::from_double(1e-12);
                let gi = self.grad_buf(input);
                for ((g, y), v) in gi.iter_mut().zip(ys).zip(gout) {
                    let denom = (y + y).max(tiny);
                    *g = *g + *v / denom;
                }
            }
            OpRef::SumRows { input } => {
                let (n, d) = (self.nodes[input].shape[0], self.nodes[input].shape[1]);
                let gi = self.grad_buf(input);
                for s in 0..n {
                    for i in 0..d {
                        gi[s * d + i] = gi[s * d + i] + gout[s];
                    }
                }
            }
            OpRef::MeanAll { input } => {
                let count = self.nodes[input].data.len();
                let scaled = gout[0] * F::from_double(1.0 / count as f64);
                let gi = self.grad_buf(input);
                for g in gi.iter_mut() {
                    *g = *g + scaled;
                }
            }
        }
        Ok(())
    }

    fn node_op(&self, id: usize) -> OpRef {
        match &self.nodes[id].op {
            Op::Leaf => OpRef::Leaf,
            Op::Conv2d {
                input,
                weight,
                dims,
            } => OpRef::Conv2d {
                input: *input,
                weight: *weight,
                dims: *dims,
            },
            Op::BiasAdd { input, bias } => OpRef::BiasAdd {
                input: *input,
                bias: *bias,
            },
            Op::ChannelEmbed { input, emb } => OpRef::ChannelEmbed {
                input: *input,
                emb: *emb,
            },
            Op::Silu { input } => OpRef::Silu { input: *input },
            Op::Sigmoid { input } => OpRef::Sigmoid { input: *input },
            Op::Softplus { input } => OpRef::Softplus { input: *input },
            Op::Upsample2 { input } => OpRef::Upsample2 { input: *input },
            Op::ConcatChannels { a, b } => OpRef::ConcatChannels { a: *a, b: *b },
            Op::ConcatCols { a, b } => OpRef::ConcatCols { a: *a, b: *b },
            Op::NarrowCols { input, start, len } => OpRef::NarrowCols {
                input: *input,
                start: *start,
                len: *len,
            },
            Op::Linear { input, weight } => OpRef::Linear {
                input: *input,
                weight: *weight,
            },
            Op::GlobalAvgPool { input } => OpRef::GlobalAvgPool { input: *input },
            Op::Add { a, b } => OpRef::Add { a: *a, b: *b },
            Op::Sub { a, b } => OpRef::Sub { a: *a, b: *b },
            Op::Mul { a, b } => OpRef::Mul { a: *a, b: *b },
            Op::Scale { input, factor } => OpRef::Scale {
                input: *input,
                factor: *factor,
            },
            Op::Abs { input } => OpRef::Abs { input: *input },
            Op::Square { input } => OpRef::Square { input: *input },
            Op::Sqrt { input } => OpRef::Sqrt { input: *input },
            Op::SumRows { input } => OpRef::SumRows { input: *input },
            Op::MeanAll { input } => OpRef::MeanAll { input: *input },
        }
    }

    fn conv2d_backward(&mut self, input: usize, weight: usize, dims: ConvDims, gout: &[F]) {
        let ConvDims { n, cin, h, w, cout, .. } = dims;
        let k = cin * 9;
        let mut gw_acc = vec![F::zero(); cout * k];
        let mut gi_acc = vec![F::zero(); n * cin * h * w];
        conv_backward(
            &self.nodes[input].data,
            &self.nodes[weight].data,
            gout,
            dims,
            &mut gi_acc,
            &mut gw_acc,
        );
        {
            let gi = self.grad_buf(input);
            for (g, v) in gi.iter_mut().zip(gi_acc) {
                *g = *g + v;
            }
        }
        let gw = self.grad_buf(weight);
        for (g, v) in gw.iter_mut().zip(gw_acc) {
            *g = *g + v;
        }
    }
}

/// Forward convolution over the batch: per-sample im2col + GEMM.
fn conv_forward<F: Scalar>(input: &[F], weight: &[F], dims: ConvDims, out: &mut [F]) {
    let ConvDims { cin, h, w, cout, .. } = dims;
    let k = cin * 9;
    let l = dims.h_out * dims.w_out;
    let sample_in = cin * h * w;
    let sample_out = cout * l;
    let mut col = vec![F::zero(); k * l];
    for (s, o) in out.chunks_mut(sample_out).enumerate() {
        im2col(&input[s * sample_in..], &dims, &mut col);
        unsafe {
            F::gemm(
                cout,
                k,
                l,
                F::one(),
                weight.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                l as isize,
                1,
                F::zero(),
                o.as_mut_ptr(),
                l as isize,
                1,
            );
        }
    }
}

/// Convolution backward: weight gradient via `gout x col^T`, input gradient
/// via `W^T x gout` scattered back through col2im.
fn conv_backward<F: Scalar>(
    input: &[F],
    weight: &[F],
    gout: &[F],
    dims: ConvDims,
    gi_acc: &mut [F],
    gw_acc: &mut [F],
) {
    let ConvDims { cin, h, w, cout, .. } = dims;
    let k = cin * 9;
    let l = dims.h_out * dims.w_out;
    let sample_in = cin * h * w;
    let sample_out = cout * l;
    let mut col = vec![F::zero(); k * l];
    let mut dcol = vec![F::zero(); k * l];
    for (s, gi_s) in gi_acc.chunks_mut(sample_in).enumerate() {
        im2col(&input[s * sample_in..], &dims, &mut col);
        let gslice = &gout[s * sample_out..(s + 1) * sample_out];
        unsafe {
            // dW += gout [Cout,L] x col^T [L,K]
            F::gemm(
                cout,
                l,
                k,
                F::one(),
                gslice.as_ptr(),
                l as isize,
                1,
                col.as_ptr(),
                1,
                l as isize,
                F::one(),
                gw_acc.as_mut_ptr(),
                k as isize,
                1,
            );
            // dcol = W^T [K,Cout] x gout [Cout,L]
            F::gemm(
                k,
                cout,
                l,
                F::one(),
                weight.as_ptr(),
                1,
                k as isize,
                gslice.as_ptr(),
                l as isize,
                1,
                F::zero(),
                dcol.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        col2im_accumulate(&dcol, &dims, gi_s);
    }
}

// Borrow-checker-friendly owned copy of an op's fields.
enum OpRef {
    Leaf,
    Conv2d { input: usize, weight: usize, dims: ConvDims },
    BiasAdd { input: usize, bias: usize },
    ChannelEmbed { input: usize, emb: usize },
    Silu { input: usize },
    Sigmoid { input: usize },
    Softplus { input: usize },
    Upsample2 { input: usize },
    ConcatChannels { a: usize, b: usize },
    ConcatCols { a: usize, b: usize },
    NarrowCols { input: usize, start: usize, len: usize },
    Linear { input: usize, weight: usize },
    GlobalAvgPool { input: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    Abs { input: usize },
    Square { input: usize },
    Sqrt { input: usize },
    SumRows { input: usize },
    MeanAll { input: usize },
}

fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn softplus_stable<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

/// Unpack one sample's 3x3 patches into a `[Cin*9, H_out*W_out]` matrix.
fn im2col<F: Scalar>(input: &[F], dims: &ConvDims, col: &mut [F]) {
    let ConvDims {
        cin,
        h,
        w,
        stride,
        h_out,
        w_out,
        ..
    } = *dims;
    let l = h_out * w_out;
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let krow = ((ci * 3 + ky) * 3 + kx) * l;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - 1;
                    let out_base = krow + oy * w_out;
                    if iy < 0 || iy >= h as isize {
                        col[out_base..out_base + w_out].fill(F::zero());
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - 1;
                        col[out_base + ox] = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            input[in_base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to image layout.
fn col2im_accumulate<F: Scalar>(dcol: &[F], dims: &ConvDims, dinput: &mut [F]) {
    let ConvDims {
        cin,
        h,
        w,
        stride,
        h_out,
        w_out,
        ..
    } = *dims;
    let l = h_out * w_out;
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let krow = ((ci * 3 + ky) * 3 + kx) * l;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dinput[in_base + ix as usize] =
                            dinput[in_base + ix as usize] + dcol[krow + oy * w_out + ox];
                    }
                }
            }
        }
    }
}
