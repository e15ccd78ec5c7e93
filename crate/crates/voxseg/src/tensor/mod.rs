//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass as an
//! append-only arena of nodes; node indices are handed out as [`NodeId`].
//! Because an operation can only consume already-existing nodes, the arena is
//! topologically ordered by construction and `backward` is a single reverse
//! sweep. Gradients accumulate into per-node buffers; calling `backward`
//! twice without [`Tape::zero_grads`] accumulates, matching the usual
//! mini-batch idiom.
//!
//! Tensors are immutable once produced; a tape is confined to one thread
//! (single writer). Independent tapes can run in parallel threads.

pub mod conv;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use conv::{conv_out_extent, deconv_out_extent, ConvGeom};

/// Plain tensor value: shape plus flat row-major data (last axis fastest).
///
/// This is the carrier for parameters and results outside any tape. The
/// `grad` field is populated by copying out of a tape after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, data has {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision change (used to run f32 checkpoints through f64 checks).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Batch-norm execution mode.
pub enum BnMode<'a, T> {
    Train,
    /// Uses the provided running statistics (per-channel mean / variance).
    Eval { running_mean: &'a [T], running_var: &'a [T] },
}

/// Batch statistics returned by a train-mode batch norm so the caller can
/// fold them into running averages.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv3d { input: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeom },
    ConvTranspose3d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    /// `eval` distinguishes running-stat normalization (affine in x) from
    /// batch-stat normalization (mean/var depend on x).
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T>, eval: bool },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: T },
    AddConst { input: NodeId },
    /// input * s where s is a [1]-shaped node (broadcast; gradient flows to both).
    ScaleByScalar { input: NodeId, scalar: NodeId },
    /// input [C, ...] * factors [C], broadcast over the trailing axes.
    ScaleChannels { input: NodeId, factors: NodeId },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose2d { input: NodeId, rows: usize, cols: usize },
    Softmax { input: NodeId, axis: usize },
    GlobalAvgPool { input: NodeId },
    Reshape { input: NodeId },
    ConcatChannels { inputs: Vec<NodeId> },
    ChannelSlice { input: NodeId, channel: usize },
    FullyConnected { input: NodeId, weight: NodeId, bias: NodeId },
    SumAll { input: NodeId },
    PowConst { input: NodeId, exponent: T },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph plus value arena.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a leaf tensor. Data is copied onto the tape.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> NodeId {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad, Op::Leaf)
    }

    /// Leaf from raw parts, marked as requiring gradient.
    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    /// Leaf from raw parts with no gradient tracking.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Copy a node's value out as a standalone tensor.
    pub fn detach(&self, id: NodeId) -> Tensor<T> {
        Tensor {
            shape: self.shape(id).to_vec(),
            data: self.value(id).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    // ───────────────────────── convolution ─────────────────────────

    /// Strided zero-padded correlation.
    ///
    /// input [C_in, D, H, W], kernel [C_out, C_in, k, k, k], bias [C_out];
    /// output [C_out, D', H', W'] with D' = (D + 2p - k)/s + 1.
    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 {
            return Err(Error::shape("conv3d", format!("input must be [C,D,H,W], got {ishape:?}")));
        }
        if kshape.len() != 5 || kshape[2] != kshape[3] || kshape[3] != kshape[4] {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be [C_out,C_in,k,k,k], got {kshape:?}"),
            ));
        }
        if kshape[1] != ishape[0] {
            return Err(Error::shape(
                "conv3d",
                format!("kernel expects {} input channels, input has {}", kshape[1], ishape[0]),
            ));
        }
        if bshape != [kshape[0]] {
            return Err(Error::shape(
                "conv3d",
                format!("bias must be [{}], got {bshape:?}", kshape[0]),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid("conv3d", format!("stride must be 1 or 2, got {stride}")));
        }
        let k = kshape[2];
        if k < 1 {
            return Err(Error::invalid("conv3d", "kernel extent must be >= 1"));
        }
        let mut b_dims = [0usize; 3];
        for (i, bd) in b_dims.iter_mut().enumerate() {
            *bd = conv_out_extent(ishape[1 + i], k, stride, pad).ok_or_else(|| {
                Error::invalid(
                    "conv3d",
                    format!("kernel {k} does not fit input extent {} with pad {pad}", ishape[1 + i]),
                )
            })?;
        }
        let geom = ConvGeom {
            a_channels: ishape[0],
            b_channels: kshape[0],
            k,
            stride,
            pad,
            a_dims: [ishape[1], ishape[2], ishape[3]],
            b_dims,
        };
        let mut out = vec![T::zero(); geom.b_len()];
        conv::gather(self.value(input), self.value(kernel), &mut out, &geom);
        let spatial: usize = b_dims.iter().product();
        let bias_data = self.value(bias);
        for c in 0..geom.b_channels {
            let bv = bias_data[c];
            for v in &mut out[c * spatial..(c + 1) * spatial] {
                *v += bv;
            }
        }
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        let shape = vec![geom.b_channels, b_dims[0], b_dims[1], b_dims[2]];
        Ok(self.push(shape, out, rg, Op::Conv3d { input, kernel, bias, geom }))
    }

    /// Transposed convolution: the exact adjoint of [`Tape::conv3d`] with the
    /// same geometry.
    ///
    /// input [C_in, D, H, W], kernel [C_in, C_out, k, k, k];
    /// output [C_out, D', H', W'] with D' = (D - 1)*s - 2p + k.
    pub fn conv_transpose3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 4 {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("input must be [C,D,H,W], got {ishape:?}"),
            ));
        }
        if kshape.len() != 5 || kshape[2] != kshape[3] || kshape[3] != kshape[4] {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("kernel must be [C_in,C_out,k,k,k], got {kshape:?}"),
            ));
        }
        if kshape[0] != ishape[0] {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("kernel expects {} input channels, input has {}", kshape[0], ishape[0]),
            ));
        }
        if !(stride == 1 || stride == 2 || stride == 4) {
            return Err(Error::invalid(
                "conv_transpose3d",
                format!("stride must be 1, 2 or 4, got {stride}"),
            ));
        }
        let k = kshape[2];
        let mut a_dims = [0usize; 3];
        for (i, ad) in a_dims.iter_mut().enumerate() {
            *ad = deconv_out_extent(ishape[1 + i], k, stride, pad).ok_or_else(|| {
                Error::invalid(
                    "conv_transpose3d",
                    format!("output extent collapses for input extent {}", ishape[1 + i]),
                )
            })?;
        }
        // Input plays the gathered role, output the scattered one.
        let geom = ConvGeom {
            a_channels: kshape[1],
            b_channels: ishape[0],
            k,
            stride,
            pad,
            a_dims,
            b_dims: [ishape[1], ishape[2], ishape[3]],
        };
        let mut out = vec![T::zero(); geom.a_len()];
        conv::scatter(self.value(input), self.value(kernel), &mut out, &geom);
        let rg = self.needs(input) || self.needs(kernel);
        let shape = vec![geom.a_channels, a_dims[0], a_dims[1], a_dims[2]];
        Ok(self.push(shape, out, rg, Op::ConvTranspose3d { input, kernel, geom }))
    }

    // ───────────────────────── normalization ─────────────────────────

    /// Per-channel batch normalization over all spatial positions.
    ///
    /// Train mode returns the batch statistics so the caller can update its
    /// running averages; eval mode normalizes with the provided running
    /// statistics. Statistics accumulate in f64 regardless of `T`.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(NodeId, Option<BnStats<T>>)> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input must be [C,D,H,W], got {ishape:?}")));
        }
        let c = ishape[0];
        let spatial: usize = ishape[1..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must be [{c}], got {:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }

        let (mean, inv_std, stats, eval) = match mode {
            BnMode::Train => {
                let x = self.value(input);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mut inv_std = vec![T::zero(); c];
                for ch in 0..c {
                    let xs = &x[ch * spatial..(ch + 1) * spatial];
                    let m = xs.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64;
                    let v = xs.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / spatial as f64;
                    mean[ch] = T::of_f64(m);
                    var[ch] = T::of_f64(v);
                    inv_std[ch] = T::of_f64(1.0 / (v + eps.as_f64()).sqrt());
                }
                let stats = BnStats { mean: mean.clone(), var };
                (mean, inv_std, Some(stats), false)
            }
            BnMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats must have {c} channels"),
                    ));
                }
                let inv_std: Vec<T> = running_var
                    .iter()
                    .map(|v| T::of_f64(1.0 / (v.as_f64() + eps.as_f64()).sqrt()))
                    .collect();
                (running_mean.to_vec(), inv_std, None, true)
            }
        };

        let x = self.value(input);
        let gamma_v = self.value(gamma).to_vec();
        let beta_v = self.value(beta).to_vec();
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma_v[ch], beta_v[ch]);
            let xs = &x[ch * spatial..(ch + 1) * spatial];
            let os = &mut out[ch * spatial..(ch + 1) * spatial];
            for i in 0..spatial {
                os[i] = (xs[i] - m) * is * g + b;
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(ishape, out, rg, Op::BatchNorm { input, gamma, beta, mean, inv_std, eval });
        Ok((id, stats))
    }

    // ───────────────────────── elementwise ─────────────────────────

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data: Vec<T> = self.value(input).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), data, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let data: Vec<T> =
            self.value(input).iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), data, rg, Op::Sigmoid { input })
    }

    fn binary_shape_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("add", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("sub", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("mul", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("div", a, b)?;
        let data: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x / y).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Div { a, b }))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let data: Vec<T> = self.value(input).iter().map(|&v| v * factor).collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), data, rg, Op::Scale { input, factor })
    }

    pub fn add_const(&mut self, input: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.value(input).iter().map(|&v| v + c).collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), data, rg, Op::AddConst { input })
    }

    /// Broadcast-multiply by a `[1]`-shaped node; gradient reaches the scalar.
    pub fn scale_by_scalar(&mut self, input: NodeId, scalar: NodeId) -> Result<NodeId> {
        if self.shape(scalar) != [1] {
            return Err(Error::shape(
                "scale_by_scalar",
                format!("scalar operand must be [1], got {:?}", self.shape(scalar)),
            ));
        }
        let s = self.value(scalar)[0];
        let data: Vec<T> = self.value(input).iter().map(|&v| v * s).collect();
        let rg = self.needs(input) || self.needs(scalar);
        Ok(self.push(self.shape(input).to_vec(), data, rg, Op::ScaleByScalar { input, scalar }))
    }

    /// Per-channel broadcast multiply: out[c, ...] = input[c, ...] * factors[c].
    pub fn scale_channels(&mut self, input: NodeId, factors: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() < 2 {
            return Err(Error::shape(
                "scale_channels",
                format!("input must be [C,...], got {ishape:?}"),
            ));
        }
        if self.shape(factors) != [ishape[0]] {
            return Err(Error::shape(
                "scale_channels",
                format!("factors must be [{}], got {:?}", ishape[0], self.shape(factors)),
            ));
        }
        let plane: usize = ishape[1..].iter().product();
        let x = self.value(input);
        let f = self.value(factors).to_vec();
        let mut out = vec![T::zero(); x.len()];
        for (c, &fc) in f.iter().enumerate() {
            let xs = &x[c * plane..(c + 1) * plane];
            let os = &mut out[c * plane..(c + 1) * plane];
            for i in 0..plane {
                os[i] = xs[i] * fc;
            }
        }
        let rg = self.needs(input) || self.needs(factors);
        Ok(self.push(ishape, out, rg, Op::ScaleChannels { input, factors }))
    }

    pub fn pow_const(&mut self, input: NodeId, exponent: T) -> NodeId {
        let data: Vec<T> = self.value(input).iter().map(|&v| v.powf(exponent)).collect();
        let rg = self.needs(input);
        self.push(self.shape(input).to_vec(), data, rg, Op::PowConst { input, exponent })
    }

    // ───────────────────────── linear algebra ─────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("operands must be 2-D, got {sa:?} and {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {:?} vs {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b, m, k, n }))
    }

    pub fn transpose2d(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("operand must be 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(input);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let rg = self.needs(input);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose2d { input, rows, cols }))
    }

    /// x [K], weight [O, K], bias [O] -> [O].
    pub fn fully_connected(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 1 || sw.len() != 2 || sw[1] != si[0] || sb != [sw[0]] {
            return Err(Error::shape(
                "fully_connected",
                format!("expected x [K], weight [O,K], bias [O]; got {si:?}, {sw:?}, {sb:?}"),
            ));
        }
        let (o, k) = (sw[0], sw[1]);
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![T::zero(); o];
        for (i, ov) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            let row = &w[i * k..(i + 1) * k];
            for j in 0..k {
                acc += row[j] * x[j];
            }
            *ov = acc + b[i];
        }
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(vec![o], out, rg, Op::FullyConnected { input, weight, bias }))
    }

    // ───────────────────────── shape & reductions ─────────────────────────

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let lanes = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..lanes {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut sum = 0.0f64;
                for l in 0..lanes {
                    let e = (x[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e.as_f64();
                }
                let inv = T::of_f64(1.0 / sum);
                for l in 0..lanes {
                    out[base + l * inner] *= inv;
                }
            }
        }
        let rg = self.needs(input);
        Ok(self.push(shape, out, rg, Op::Softmax { input, axis }))
    }

    /// [C, D, H, W] -> [C], mean over spatial positions.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input must be [C,D,H,W], got {s:?}")));
        }
        let c = s[0];
        let spatial: usize = s[1..].iter().product();
        let x = self.value(input);
        let mut out = vec![T::zero(); c];
        for ch in 0..c {
            let sum: f64 =
                x[ch * spatial..(ch + 1) * spatial].iter().map(|v| v.as_f64()).sum();
            out[ch] = T::of_f64(sum / spatial as f64);
        }
        let rg = self.needs(input);
        Ok(self.push(vec![c], out, rg, Op::GlobalAvgPool { input }))
    }

    pub fn reshape(&mut self, input: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let n: usize = new_shape.iter().product();
        if n != self.value(input).len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} elements) to {new_shape:?} ({n} elements)",
                    self.shape(input),
                    self.value(input).len()
                ),
            ));
        }
        let data = self.value(input).to_vec();
        let rg = self.needs(input);
        Ok(self.push(new_shape.to_vec(), data, rg, Op::Reshape { input }))
    }

    /// Concatenate [C_i, D, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat_channels", "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::shape(
                "concat_channels",
                format!("inputs must be [C,D,H,W], got {first:?}"),
            ));
        }
        let mut channels = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 4 || s[1..] != first[1..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial dims differ: {:?} vs {:?}", first, s),
                ));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * first[1..].iter().product::<usize>());
        for &id in inputs {
            data.extend_from_slice(self.value(id));
        }
        let rg = inputs.iter().any(|&id| self.needs(id));
        let shape = vec![channels, first[1], first[2], first[3]];
        Ok(self.push(shape, data, rg, Op::ConcatChannels { inputs: inputs.to_vec() }))
    }

    /// Extract channel `c` of a [C, ...] tensor; output shape is the remainder.
    pub fn channel_slice(&mut self, input: NodeId, channel: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("channel_slice", format!("input must be [C,...], got {s:?}")));
        }
        if channel >= s[0] {
            return Err(Error::invalid(
                "channel_slice",
                format!("channel {channel} out of range for {} channels", s[0]),
            ));
        }
        let plane: usize = s[1..].iter().product();
        let data = self.value(input)[channel * plane..(channel + 1) * plane].to_vec();
        let rg = self.needs(input);
        Ok(self.push(s[1..].to_vec(), data, rg, Op::ChannelSlice { input, channel }))
    }

    /// Full reduction to a [1] scalar. Accumulates in f64.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let sum: f64 = self.value(input).iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(input);
        self.push(vec![1], vec![T::of_f64(sum)], rg, Op::SumAll { input })
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and
    /// accumulates into every `requires_grad` node reachable backward.
    ///
    /// Leaf gradients persist across calls (a second sweep accumulates on
    /// top); intermediate gradients are consumed by the sweep.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.accum(loss, &[T::one()]);
        for idx in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || self.nodes[idx].grad.is_none() {
                continue;
            }
            let g = self.nodes[idx].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(&op, &g, idx);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, contribution: &[T]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contribution) {
                    *gv += *cv;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op<T>, g: &[T], out_idx: usize) {
        match *op {
            Op::Leaf => {}

            Op::Conv3d { input, kernel, bias, ref geom } => {
                if self.needs(input) {
                    let kernel_data = self.nodes[kernel.0].data.clone();
                    let mut dx = vec![T::zero(); geom.a_len()];
                    conv::scatter(g, &kernel_data, &mut dx, geom);
                    self.accum(input, &dx);
                }
                if self.needs(kernel) {
                    let x = &self.nodes[input.0].data;
                    let mut dk = vec![T::zero(); geom.kernel_len()];
                    conv::kernel_grad(x, g, &mut dk, geom);
                    self.accum(kernel, &dk);
                }
                if self.needs(bias) {
                    let spatial: usize = geom.b_dims.iter().product();
                    let mut db = vec![T::zero(); geom.b_channels];
                    for (c, dbv) in db.iter_mut().enumerate() {
                        let s: f64 =
                            g[c * spatial..(c + 1) * spatial].iter().map(|v| v.as_f64()).sum();
                        *dbv = T::of_f64(s);
                    }
                    self.accum(bias, &db);
                }
            }

            Op::ConvTranspose3d { input, kernel, ref geom } => {
                if self.needs(input) {
                    let kernel_data = self.nodes[kernel.0].data.clone();
                    let mut dx = vec![T::zero(); geom.b_len()];
                    conv::gather(g, &kernel_data, &mut dx, geom);
                    self.accum(input, &dx);
                }
                if self.needs(kernel) {
                    let x = &self.nodes[input.0].data;
                    let mut dk = vec![T::zero(); geom.kernel_len()];
                    conv::kernel_grad(g, x, &mut dk, geom);
                    self.accum(kernel, &dk);
                }
            }

            Op::BatchNorm { input, gamma, beta, ref mean, ref inv_std, eval } => {
                let c = mean.len();
                let spatial = g.len() / c;
                let x = &self.nodes[input.0].data;
                let gamma_v = self.nodes[gamma.0].data.clone();
                let n_f = spatial as f64;
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let xs = &x[ch * spatial..(ch + 1) * spatial];
                    let gs = &g[ch * spatial..(ch + 1) * spatial];
                    let mut sum_g = 0.0f64;
                    let mut sum_gx = 0.0f64;
                    for i in 0..spatial {
                        let xhat = ((xs[i] - m) * is).as_f64();
                        sum_g += gs[i].as_f64();
                        sum_gx += gs[i].as_f64() * xhat;
                    }
                    dgamma[ch] = T::of_f64(sum_gx);
                    dbeta[ch] = T::of_f64(sum_g);
                    let gam = gamma_v[ch];
                    let ds = &mut dx[ch * spatial..(ch + 1) * spatial];
                    if eval {
                        for i in 0..spatial {
                            ds[i] = gs[i] * gam * is;
                        }
                    } else {
                        let mean_g = T::of_f64(sum_g / n_f);
                        let mean_gx = T::of_f64(sum_gx / n_f);
                        for i in 0..spatial {
                            let xhat = (xs[i] - m) * is;
                            ds[i] = gam * is * (gs[i] - mean_g - xhat * mean_gx);
                        }
                    }
                }
                if self.needs(input) {
                    self.accum(input, &dx);
                }
                if self.needs(gamma) {
                    self.accum(gamma, &dgamma);
                }
                if self.needs(beta) {
                    self.accum(beta, &dbeta);
                }
            }

            Op::Relu { input } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].data;
                    let dx: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accum(input, &dx);
                }
            }

            Op::Sigmoid { input } => {
                if self.needs(input) {
                    let y = &self.nodes[out_idx].data;
                    let dx: Vec<T> =
                        g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                    self.accum(input, &dx);
                }
            }

            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accum(a, g);
                }
                if self.needs(b) {
                    self.accum(b, g);
                }
            }

            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.accum(a, g);
                }
                if self.needs(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accum(b, &neg);
                }
            }

            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0].data;
                    let da: Vec<T> = g.iter().zip(bv).map(|(&gv, &x)| gv * x).collect();
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].data;
                    let db: Vec<T> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accum(b, &db);
                }
            }

            Op::Div { a, b } => {
                let bv = self.nodes[b.0].data.clone();
                if self.needs(a) {
                    let da: Vec<T> = g.iter().zip(&bv).map(|(&gv, &x)| gv / x).collect();
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].data;
                    let db: Vec<T> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                        .collect();
                    self.accum(b, &db);
                }
            }

            Op::Scale { input, factor } => {
                if self.needs(input) {
                    let dx: Vec<T> = g.iter().map(|&v| v * factor).collect();
                    self.accum(input, &dx);
                }
            }

            Op::AddConst { input } => {
                if self.needs(input) {
                    self.accum(input, g);
                }
            }

            Op::ScaleByScalar { input, scalar } => {
                let s = self.nodes[scalar.0].data[0];
                if self.needs(input) {
                    let dx: Vec<T> = g.iter().map(|&v| v * s).collect();
                    self.accum(input, &dx);
                }
                if self.needs(scalar) {
                    let x = &self.nodes[input.0].data;
                    let ds: f64 = g.iter().zip(x).map(|(&gv, &xv)| (gv * xv).as_f64()).sum();
                    self.accum(scalar, &[T::of_f64(ds)]);
                }
            }

            Op::ScaleChannels { input, factors } => {
                let f = self.nodes[factors.0].data.clone();
                let plane = g.len() / f.len();
                if self.needs(input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (c, &fc) in f.iter().enumerate() {
                        let gs = &g[c * plane..(c + 1) * plane];
                        let ds = &mut dx[c * plane..(c + 1) * plane];
                        for i in 0..plane {
                            ds[i] = gs[i] * fc;
                        }
                    }
                    self.accum(input, &dx);
                }
                if self.needs(factors) {
                    let x = &self.nodes[input.0].data;
                    let mut df = vec![T::zero(); f.len()];
                    for (c, dfv) in df.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i in 0..plane {
                            acc += (g[c * plane + i] * x[c * plane + i]).as_f64();
                        }
                        *dfv = T::of_f64(acc);
                    }
                    self.accum(factors, &df);
                }
            }

            Op::Matmul { a, b, m, k, n } => {
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    let mut da = vec![T::zero(); m * k];
                    mm_nt(g, &bv, &mut da, m, n, k);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    let mut db = vec![T::zero(); k * n];
                    mm_tn(&av, g, &mut db, k, m, n);
                    self.accum(b, &db);
                }
            }

            Op::Transpose2d { input, rows, cols } => {
                if self.needs(input) {
                    // g has shape [cols, rows]; transpose it back.
                    let mut dx = vec![T::zero(); rows * cols];
                    for c in 0..cols {
                        for r in 0..rows {
                            dx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    self.accum(input, &dx);
                }
            }

            Op::Softmax { input, axis } => {
                if self.needs(input) {
                    let shape = self.nodes[out_idx].shape.clone();
                    let y = &self.nodes[out_idx].data;
                    let outer: usize = shape[..axis].iter().product();
                    let lanes = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lanes * inner + i;
                            let mut dot = 0.0f64;
                            for l in 0..lanes {
                                let idx = base + l * inner;
                                dot += (g[idx] * y[idx]).as_f64();
                            }
                            let dot = T::of_f64(dot);
                            for l in 0..lanes {
                                let idx = base + l * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    self.accum(input, &dx);
                }
            }

            Op::GlobalAvgPool { input } => {
                if self.needs(input) {
                    let ishape = self.nodes[input.0].shape.clone();
                    let spatial: usize = ishape[1..].iter().product();
                    let inv = T::of_f64(1.0 / spatial as f64);
                    let mut dx = vec![T::zero(); self.nodes[input.0].data.len()];
                    for (c, &gv) in g.iter().enumerate() {
                        let v = gv * inv;
                        for d in &mut dx[c * spatial..(c + 1) * spatial] {
                            *d = v;
                        }
                    }
                    self.accum(input, &dx);
                }
            }

            Op::Reshape { input } => {
                if self.needs(input) {
                    self.accum(input, g);
                }
            }

            Op::ConcatChannels { ref inputs } => {
                let mut offset = 0usize;
                for &id in inputs {
                    let len = self.nodes[id.0].data.len();
                    if self.needs(id) {
                        let piece = g[offset..offset + len].to_vec();
                        self.accum(id, &piece);
                    }
                    offset += len;
                }
            }

            Op::ChannelSlice { input, channel } => {
                if self.needs(input) {
                    let plane = g.len();
                    let dx_len = self.nodes[input.0].data.len();
                    let mut dx = vec![T::zero(); dx_len];
                    dx[channel * plane..(channel + 1) * plane].copy_from_slice(g);
                    self.accum(input, &dx);
                }
            }

            Op::FullyConnected { input, weight, bias } => {
                let w = self.nodes[weight.0].data.clone();
                let o = g.len();
                let k = self.nodes[input.0].data.len();
                if self.needs(input) {
                    let mut dx = vec![T::zero(); k];
                    for (i, &gv) in g.iter().enumerate() {
                        let row = &w[i * k..(i + 1) * k];
                        for j in 0..k {
                            dx[j] += gv * row[j];
                        }
                    }
                    self.accum(input, &dx);
                }
                if self.needs(weight) {
                    let x = &self.nodes[input.0].data;
                    let mut dw = vec![T::zero(); o * k];
                    for (i, &gv) in g.iter().enumerate() {
                        for j in 0..k {
                            dw[i * k + j] = gv * x[j];
                        }
                    }
                    self.accum(weight, &dw);
                }
                if self.needs(bias) {
                    self.accum(bias, g);
                }
            }

            Op::SumAll { input } => {
                if self.needs(input) {
                    let gv = g[0];
                    let n = self.nodes[input.0].data.len();
                    let dx = vec![gv; n];
                    self.accum(input, &dx);
                }
            }

            Op::PowConst { input, exponent } => {
                if self.needs(input) {
                    let x = &self.nodes[input.0].data;
                    let e1 = exponent - T::one();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * exponent * xv.powf(e1))
                        .collect();
                    self.accum(input, &dx);
                }
            }
        }
    }
}

use conv::{mm_nn, mm_nt, mm_tn};

#[cfg(test)]
mod tests;
