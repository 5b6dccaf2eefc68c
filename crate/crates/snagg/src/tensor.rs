//! Dense tensor values and the reverse-mode differentiation tape.
//!
//! Everything differentiable in the crate is expressed through the ops here,
//! so one `backward` covers the whole model surface and the finite-difference
//! harness can audit any composition. All arithmetic is f64; forward ops
//! reject non-finite outputs instead of letting them propagate.

use crate::error::{Error, Result};
use rand::Rng;

/// A plain tensor value: row-major data plus shape. Parameters additionally
/// carry a gradient buffer that `Tape::accumulate_grads_into` fills.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded operation: kind, input ids and the saved forward values its
/// backward pass needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// y = W x for a matrix W and vector x.
    MatVec { w: Var, x: Var },
    /// y = W x + b.
    Affine { w: Var, x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Scale { x: Var, c: f64 },
    SumAll { x: Var },
    Reshape { x: Var },
    /// Concatenation of 1-D vectors.
    Concat { xs: Vec<Var> },
    /// Elementwise max over same-shape tensors; ties go to the earliest input.
    MaxMany { xs: Vec<Var>, argmax: Vec<usize> },
    /// Max over the leading axis of one tensor; ties go to the lowest index.
    MaxAxis0 { x: Var, argmax: Vec<usize> },
    /// x: C*H*W plus a per-channel bias.
    BiasChannels { x: Var, b: Var },
    /// Mean over the spatial extent of each channel: C x H x W -> C.
    GlobalAvgPool { x: Var },
    Conv2d { input: Var, kernels: Var, stride: usize, padding: usize },
    /// 3-D convolution over (time, height, width); spatial stride is 1.
    Conv3d {
        input: Var,
        kernels: Var,
        t_starts: Vec<usize>,
        padding: usize,
    },
    SpatialMaxPool {
        x: Var,
        k: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    /// Saved mask holds the applied factor per element: 0 or 1/keep_prob.
    Dropout { x: Var, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::Affine { .. } => "affine",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Scale { .. } => "scale",
            Op::SumAll { .. } => "sum_all",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::MaxMany { .. } => "max_many",
            Op::MaxAxis0 { .. } => "max_axis0",
            Op::BiasChannels { .. } => "bias_channels",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
            Op::SpatialMaxPool { .. } => "spatial_max_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    name: Option<String>,
}

/// Reverse-mode tape. Node ids are topologically ordered by construction:
/// every input id is smaller than its consumer's id.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated at `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: None,
            requires_grad: false,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input value. Set `requires_grad` on the tensor to have
    /// `backward` retain its gradient (used by the finite-difference checks).
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone())?;
        self.nodes[v.0].requires_grad = t.requires_grad;
        Ok(v)
    }

    /// Register a named parameter leaf. The name keys the gradient when it is
    /// written back into a parameter set after `backward`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        let v = self.leaf(t)?;
        self.nodes[v.0].name = Some(name.to_string());
        Ok(v)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t)
    }

    // ---- differentiable operations -------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(Op::Matmul { a, b }, vec![m, n], out)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Dimension(format!(
                "matvec: incompatible shapes {sw:?} x {sx:?}"
            )));
        }
        let out = matvec_raw(self.value(w), self.value(x), sw[0], sw[1]);
        self.push(Op::MatVec { w, x }, vec![sw[0]], out)
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (sw, sx, sb) = (
            self.shape(w).to_vec(),
            self.shape(x).to_vec(),
            self.shape(b).to_vec(),
        );
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(Error::Dimension(format!(
                "affine: incompatible shapes W {sw:?}, x {sx:?}, b {sb:?}"
            )));
        }
        let mut out = matvec_raw(self.value(w), self.value(x), sw[0], sw[1]);
        for (o, bi) in out.iter_mut().zip(self.value(b)) {
            *o += bi;
        }
        self.push(Op::Affine { w, x, b }, vec![sw[0]], out)
    }

    fn binary_shapes(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add { a, b }, shape, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul { a, b }, shape, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu { x }, shape, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(Op::Sigmoid { x }, shape, out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh { x }, shape, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|&v| c * v).collect();
        self.push(Op::Scale { x, c }, shape, out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::SumAll { x }, vec![1], vec![s])
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let n: usize = new_shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} has {} values, target {new_shape:?} wants {n}",
                self.shape(x),
                self.value(x).len()
            )));
        }
        let out = self.value(x).to_vec();
        self.push(Op::Reshape { x }, new_shape, out)
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Parameter("concat: empty input list".into()));
        }
        let mut out = Vec::new();
        for &v in xs {
            if self.shape(v).len() != 1 {
                return Err(Error::Dimension(format!(
                    "concat: inputs must be vectors, got {:?}",
                    self.shape(v)
                )));
            }
            out.extend_from_slice(self.value(v));
        }
        let n = out.len();
        self.push(Op::Concat { xs: xs.to_vec() }, vec![n], out)
    }

    /// Elementwise max over same-shape tensors. The backward pass routes each
    /// element's gradient to the earliest input attaining the max.
    pub fn max_many(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Parameter("max_many: empty input list".into()));
        }
        let shape = self.shape(xs[0]).to_vec();
        for &v in &xs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "max_many: shapes differ: {:?} vs {shape:?}",
                    self.shape(v)
                )));
            }
        }
        let n: usize = shape.iter().product();
        let mut out = self.value(xs[0]).to_vec();
        let mut argmax = vec![0usize; n];
        for (i, &v) in xs.iter().enumerate().skip(1) {
            let vals = &self.nodes[v.0].value;
            for e in 0..n {
                if vals[e] > out[e] {
                    out[e] = vals[e];
                    argmax[e] = i;
                }
            }
        }
        self.push(
            Op::MaxMany {
                xs: xs.to_vec(),
                argmax,
            },
            shape,
            out,
        )
    }

    /// Max over the leading axis: [P, rest..] -> [rest..].
    pub fn max_axis0(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "max_axis0: need at least 2 axes, got {shape:?}"
            )));
        }
        let p = shape[0];
        let rest: Vec<usize> = shape[1..].to_vec();
        let n: usize = rest.iter().product();
        let vals = self.value(x);
        let mut out = vals[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for i in 1..p {
            for e in 0..n {
                let v = vals[i * n + e];
                if v > out[e] {
                    out[e] = v;
                    argmax[e] = i;
                }
            }
        }
        self.push(Op::MaxAxis0 { x, argmax }, rest, out)
    }

    /// Adds bias `b[c]` to every spatial location of channel c.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(Error::Dimension(format!(
                "bias_channels: input {sx:?} with bias {sb:?}"
            )));
        }
        let hw = sx[1] * sx[2];
        let mut out = self.value(x).to_vec();
        let bias = self.value(b).to_vec();
        for c in 0..sx[0] {
            for e in &mut out[c * hw..(c + 1) * hw] {
                *e += bias[c];
            }
        }
        self.push(Op::BiasChannels { x, b }, sx, out)
    }

    /// Spatial mean per channel: C x H x W -> C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "global_avg_pool: expected C x H x W input, got {s:?}"
            )));
        }
        let hw = s[1] * s[2];
        let vals = self.value(x);
        let out: Vec<f64> = (0..s[0])
            .map(|c| vals[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Op::GlobalAvgPool { x }, vec![s[0]], out)
    }

    /// Cross-correlation (no kernel flip) of a C_in x H x W input with
    /// C_out x C_in x kh x kw kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d: stride must be positive".into()));
        }
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(Error::Dimension(format!(
                "conv2d: input {si:?} with kernels {sk:?}"
            )));
        }
        let (h, w) = (si[1], si[2]);
        let (kh, kw) = (sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let out = conv2d_raw(
            self.value(input),
            si[0],
            h,
            w,
            self.value(kernels),
            sk[0],
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        );
        self.push(
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
            vec![sk[0], h_out, w_out],
            out,
        )
    }

    /// 3-D convolution over (time, height, width) of a T x C x H x W stack
    /// with OC x C x KT x KH x KW kernels. Temporal start positions are laid
    /// out at `t_stride` with a tail position anchored at T - KT when the
    /// stride does not divide evenly, so trailing frames stay covered.
    /// Spatial stride is 1. Output is P x OC x H' x W'.
    pub fn conv3d(&mut self, input: Var, kernels: Var, t_stride: usize, padding: usize) -> Result<Var> {
        if t_stride == 0 {
            return Err(Error::Parameter("conv3d: stride must be positive".into()));
        }
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 4 || sk.len() != 5 || sk[1] != si[1] {
            return Err(Error::Dimension(format!(
                "conv3d: input {si:?} with kernels {sk:?}"
            )));
        }
        let (t, h, w) = (si[0], si[2], si[3]);
        let (kt, kh, kw) = (sk[2], sk[3], sk[4]);
        if kt > t {
            return Err(Error::Dimension(format!(
                "conv3d: temporal extent {kt} exceeds {t} frames"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv3d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let t_starts = window_starts(t, kt, t_stride);
        let h_out = h + 2 * padding - kh + 1;
        let w_out = w + 2 * padding - kw + 1;
        let out = conv3d_raw(
            self.value(input),
            &si,
            self.value(kernels),
            &sk,
            &t_starts,
            padding,
            h_out,
            w_out,
        );
        let p = t_starts.len();
        self.push(
            Op::Conv3d {
                input,
                kernels,
                t_starts,
                padding,
            },
            vec![p, sk[0], h_out, w_out],
            out,
        )
    }

    /// Per-window spatial maximum; gradient goes to the first element of each
    /// window attaining the max (row-major order).
    pub fn spatial_max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::Parameter(format!(
                "spatial_max_pool: k and stride must be positive, got k={k} stride={stride}"
            )));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "spatial_max_pool: expected C x H x W input, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if k > h || k > w {
            return Err(Error::Dimension(format!(
                "spatial_max_pool: window {k} does not fit in {h}x{w}"
            )));
        }
        let h_out = (h - k) / stride + 1;
        let w_out = (w - k) / stride + 1;
        let vals = self.value(x);
        let mut out = vec![0.0; c * h_out * w_out];
        let mut argmax = vec![0usize; c * h_out * w_out];
        for ci in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                            if vals[idx] > best {
                                best = vals[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * h_out + oy) * w_out + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.push(
            Op::SpatialMaxPool { x, k, stride, argmax },
            vec![c, h_out, w_out],
            out,
        )
    }

    /// Stabilized -log softmax(logits)[label]; scalar output.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: logits must be a vector, got {s:?}"
            )));
        }
        let k = s[0];
        if label >= k {
            return Err(Error::Parameter(format!(
                "softmax_cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let (loss, probs) = softmax_ce_raw(self.value(logits), label);
        self.push(
            Op::SoftmaxCrossEntropy { logits, label, probs },
            vec![1],
            vec![loss],
        )
    }

    /// Inverted dropout: in training mode each element is kept with
    /// probability `keep_prob` and scaled by 1/keep_prob; in inference mode
    /// (or with keep_prob == 1) the input var is returned unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        keep_prob: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Parameter(format!(
                "dropout: keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        if !training || keep_prob == 1.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let out = zip_map(self.value(x), &mask, |v, m| v * m);
        self.push(Op::Dropout { x, mask }, shape, out)
    }

    // ---- backward and replay -------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Erroring on a second call
    /// keeps accumulation across backward passes explicit (build a new tape
    /// per pass).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward: already called on this tape".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(&op, i, &out_grad);
        }
        // Gradient of zero for reachable-from-nowhere leaves that asked for one.
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn backprop_node(&mut self, op: &Op, node_idx: usize, out_grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                // dA = dOut B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = out_grad[i * n + j];
                        for t in 0..k {
                            da[i * k + t] += g * bv[t * n + j];
                        }
                    }
                }
                self.add_grad(*a, &da);
                // dB = A^T dOut
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for t in 0..k {
                        let atv = av[i * k + t];
                        for j in 0..n {
                            db[t * n + j] += atv * out_grad[i * n + j];
                        }
                    }
                }
                self.add_grad(*b, &db);
            }
            Op::MatVec { w, x } => self.backprop_matvec(*w, *x, out_grad),
            Op::Affine { w, x, b } => {
                self.backprop_matvec(*w, *x, out_grad);
                self.add_grad(*b, out_grad);
            }
            Op::Add { a, b } => {
                self.add_grad(*a, out_grad);
                self.add_grad(*b, out_grad);
            }
            Op::Mul { a, b } => {
                let da = zip_map(out_grad, &self.nodes[b.0].value, |g, v| g * v);
                let db = zip_map(out_grad, &self.nodes[a.0].value, |g, v| g * v);
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Relu { x } => {
                let dx = zip_map(out_grad, &self.nodes[x.0].value, |g, v| {
                    if v > 0.0 {
                        g
                    } else {
                        0.0
                    }
                });
                self.add_grad(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx = zip_map(out_grad, &self.nodes[node_idx].value, |g, y| {
                    g * y * (1.0 - y)
                });
                self.add_grad(*x, &dx);
            }
            Op::Tanh { x } => {
                let dx = zip_map(out_grad, &self.nodes[node_idx].value, |g, y| {
                    g * (1.0 - y * y)
                });
                self.add_grad(*x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = out_grad.iter().map(|g| g * c).collect();
                self.add_grad(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![out_grad[0]; self.nodes[x.0].value.len()];
                self.add_grad(*x, &dx);
            }
            Op::Reshape { x } => self.add_grad(*x, out_grad),
            Op::Concat { xs } => {
                let mut off = 0;
                for &v in xs {
                    let n = self.nodes[v.0].value.len();
                    let dg = out_grad[off..off + n].to_vec();
                    self.add_grad(v, &dg);
                    off += n;
                }
            }
            Op::MaxMany { xs, argmax } => {
                let n = out_grad.len();
                for (i, &v) in xs.iter().enumerate() {
                    let mut dv = vec![0.0; n];
                    let mut any = false;
                    for e in 0..n {
                        if argmax[e] == i {
                            dv[e] = out_grad[e];
                            any = true;
                        }
                    }
                    if any {
                        self.add_grad(v, &dv);
                    }
                }
            }
            Op::MaxAxis0 { x, argmax } => {
                let n = out_grad.len();
                let total = self.nodes[x.0].value.len();
                let mut dx = vec![0.0; total];
                for e in 0..n {
                    dx[argmax[e] * n + e] = out_grad[e];
                }
                self.add_grad(*x, &dx);
            }
            Op::BiasChannels { x, b } => {
                self.add_grad(*x, out_grad);
                let sb = self.nodes[b.0].value.len();
                let hw = out_grad.len() / sb;
                let mut db = vec![0.0; sb];
                for c in 0..sb {
                    db[c] = out_grad[c * hw..(c + 1) * hw].iter().sum();
                }
                self.add_grad(*b, &db);
            }
            Op::GlobalAvgPool { x } => {
                let sx = self.nodes[x.0].shape.clone();
                let hw = sx[1] * sx[2];
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for c in 0..sx[0] {
                    let g = out_grad[c] / hw as f64;
                    for e in &mut dx[c * hw..(c + 1) * hw] {
                        *e = g;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => {
                let si = self.nodes[input.0].shape.clone();
                let sk = self.nodes[kernels.0].shape.clone();
                let so = self.nodes[node_idx].shape.clone();
                let (di, dk) = conv2d_backward_raw(
                    &self.nodes[input.0].value,
                    &si,
                    &self.nodes[kernels.0].value,
                    &sk,
                    out_grad,
                    &so,
                    *stride,
                    *padding,
                );
                self.add_grad(*input, &di);
                self.add_grad(*kernels, &dk);
            }
            Op::Conv3d {
                input,
                kernels,
                t_starts,
                padding,
            } => {
                let si = self.nodes[input.0].shape.clone();
                let sk = self.nodes[kernels.0].shape.clone();
                let so = self.nodes[node_idx].shape.clone();
                let (di, dk) = conv3d_backward_raw(
                    &self.nodes[input.0].value,
                    &si,
                    &self.nodes[kernels.0].value,
                    &sk,
                    out_grad,
                    &so,
                    t_starts,
                    *padding,
                );
                self.add_grad(*input, &di);
                self.add_grad(*kernels, &dk);
            }
            Op::SpatialMaxPool { x, argmax, .. } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (o, &idx) in argmax.iter().enumerate() {
                    dx[idx] += out_grad[o];
                }
                self.add_grad(*x, &dx);
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                let g = out_grad[0];
                let mut dl: Vec<f64> = probs.iter().map(|&p| g * p).collect();
                dl[*label] -= g;
                self.add_grad(*logits, &dl);
            }
            Op::Dropout { x, mask } => {
                let dx = zip_map(out_grad, mask, |g, m| g * m);
                self.add_grad(*x, &dx);
            }
        }
    }

    fn backprop_matvec(&mut self, w: Var, x: Var, out_grad: &[f64]) {
        let (m, n) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let mut dw = vec![0.0; m * n];
        for i in 0..m {
            let g = out_grad[i];
            for j in 0..n {
                dw[i * n + j] = g * xv[j];
            }
        }
        self.add_grad(w, &dw);
        let mut dx = vec![0.0; n];
        for i in 0..m {
            let g = out_grad[i];
            for j in 0..n {
                dx[j] += g * wv[i * n + j];
            }
        }
        self.add_grad(x, &dx);
    }

    /// Accumulate this tape's parameter-leaf gradients into matching tensors
    /// of `params` (keyed by leaf name). Call after `backward`.
    pub fn accumulate_grads_into(&self, params: &mut crate::params::ParamSet) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Contract(
                "accumulate_grads_into: backward has not run".into(),
            ));
        }
        for node in &self.nodes {
            if let (Some(name), Some(grad)) = (&node.name, &node.grad) {
                if let Some(t) = params.get_mut(name) {
                    if t.requires_grad() {
                        t.accumulate_grad(grad);
                    }
                }
            }
        }
        Ok(())
    }

    /// Recompute every non-leaf node from the recorded leaves and verify the
    /// stored forward values are reproduced bit-identically. Saved backward
    /// state (masks, argmax indices, probabilities) is left untouched.
    pub fn replay_forward(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed: Option<Vec<f64>> = match &node.op {
                Op::Leaf => None,
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    Some(matmul_raw(
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        m,
                        k,
                        n,
                    ))
                }
                Op::MatVec { w, x } => Some(matvec_raw(
                    &self.nodes[w.0].value,
                    &self.nodes[x.0].value,
                    self.nodes[w.0].shape[0],
                    self.nodes[w.0].shape[1],
                )),
                Op::Affine { w, x, b } => {
                    let mut out = matvec_raw(
                        &self.nodes[w.0].value,
                        &self.nodes[x.0].value,
                        self.nodes[w.0].shape[0],
                        self.nodes[w.0].shape[1],
                    );
                    for (o, bi) in out.iter_mut().zip(&self.nodes[b.0].value) {
                        *o += bi;
                    }
                    Some(out)
                }
                Op::Add { a, b } => Some(zip_map(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    |x, y| x + y,
                )),
                Op::Mul { a, b } => Some(zip_map(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    |x, y| x * y,
                )),
                Op::Relu { x } => {
                    Some(self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect())
                }
                Op::Sigmoid { x } => Some(
                    self.nodes[x.0]
                        .value
                        .iter()
                        .map(|&v| stable_sigmoid(v))
                        .collect(),
                ),
                Op::Tanh { x } => Some(self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect()),
                Op::Scale { x, c } => {
                    Some(self.nodes[x.0].value.iter().map(|&v| c * v).collect())
                }
                Op::SumAll { x } => Some(vec![self.nodes[x.0].value.iter().sum()]),
                Op::Reshape { x } => Some(self.nodes[x.0].value.clone()),
                Op::Concat { xs } => {
                    let mut out = Vec::new();
                    for &v in xs {
                        out.extend_from_slice(&self.nodes[v.0].value);
                    }
                    Some(out)
                }
                Op::MaxMany { xs, .. } => {
                    let n = node.value.len();
                    let mut out = self.nodes[xs[0].0].value.clone();
                    for &v in &xs[1..] {
                        for e in 0..n {
                            out[e] = out[e].max(self.nodes[v.0].value[e]);
                        }
                    }
                    Some(out)
                }
                Op::MaxAxis0 { x, .. } => {
                    let n = node.value.len();
                    let vals = &self.nodes[x.0].value;
                    let p = self.nodes[x.0].shape[0];
                    let mut out = vals[..n].to_vec();
                    for i in 1..p {
                        for e in 0..n {
                            out[e] = out[e].max(vals[i * n + e]);
                        }
                    }
                    Some(out)
                }
                Op::BiasChannels { x, b } => {
                    let sx = &self.nodes[x.0].shape;
                    let hw = sx[1] * sx[2];
                    let mut out = self.nodes[x.0].value.clone();
                    for c in 0..sx[0] {
                        let bias = self.nodes[b.0].value[c];
                        for e in &mut out[c * hw..(c + 1) * hw] {
                            *e += bias;
                        }
                    }
                    Some(out)
                }
                Op::GlobalAvgPool { x } => {
                    let sx = &self.nodes[x.0].shape;
                    let hw = sx[1] * sx[2];
                    let vals = &self.nodes[x.0].value;
                    Some(
                        (0..sx[0])
                            .map(|c| vals[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
                            .collect(),
                    )
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let si = &self.nodes[input.0].shape;
                    let sk = &self.nodes[kernels.0].shape;
                    Some(conv2d_raw(
                        &self.nodes[input.0].value,
                        si[0],
                        si[1],
                        si[2],
                        &self.nodes[kernels.0].value,
                        sk[0],
                        sk[2],
                        sk[3],
                        *stride,
                        *padding,
                        node.shape[1],
                        node.shape[2],
                    ))
                }
                Op::Conv3d {
                    input,
                    kernels,
                    t_starts,
                    padding,
                } => Some(conv3d_raw(
                    &self.nodes[input.0].value,
                    &self.nodes[input.0].shape,
                    &self.nodes[kernels.0].value,
                    &self.nodes[kernels.0].shape,
                    t_starts,
                    *padding,
                    node.shape[2],
                    node.shape[3],
                )),
                Op::SpatialMaxPool { x, k, stride, .. } => {
                    let s = &self.nodes[x.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (h_out, w_out) = (node.shape[1], node.shape[2]);
                    let vals = &self.nodes[x.0].value;
                    let mut out = vec![0.0; c * h_out * w_out];
                    for ci in 0..c {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let mut best = f64::NEG_INFINITY;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        let idx =
                                            (ci * h + oy * stride + ky) * w + ox * stride + kx;
                                        best = best.max(vals[idx]);
                                    }
                                }
                                out[(ci * h_out + oy) * w_out + ox] = best;
                            }
                        }
                    }
                    Some(out)
                }
                Op::SoftmaxCrossEntropy { logits, label, .. } => {
                    let (loss, _) = softmax_ce_raw(&self.nodes[logits.0].value, *label);
                    Some(vec![loss])
                }
                Op::Dropout { x, mask } => {
                    Some(zip_map(&self.nodes[x.0].value, mask, |v, m| v * m))
                }
            };
            if let Some(fresh) = recomputed {
                if fresh != node.value {
                    return Err(Error::Contract(format!(
                        "replay_forward: node {i} ({}) did not reproduce its recorded value",
                        node.op.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Window start offsets used by the temporally windowed stages: stride steps,
/// plus a tail window anchored at len - window when the stride does not land
/// there, so trailing frames are never dropped.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    debug_assert!(window <= len && stride > 0);
    let mut starts: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *starts.last().unwrap() != len - window {
        starts.push(len - window);
    }
    starts
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            for j in 0..n {
                out[i * n + j] += av * b[t * n + j];
            }
        }
    }
    out
}

fn matvec_raw(w: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h_out * w_out];
    let pad = padding as isize;
    for oc in 0..c_out {
        for ic in 0..c_in {
            let plane = &input[ic * h * w..(ic + 1) * h * w];
            let kplane = &kernels[(oc * c_in + ic) * kh * kw..(oc * c_in + ic + 1) * kh * kw];
            for oy in 0..h_out {
                let base_y = (oy * stride) as isize - pad;
                for ox in 0..w_out {
                    let base_x = (ox * stride) as isize - pad;
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let krow = &kplane[ky * kw..(ky + 1) * kw];
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += row[ix as usize] * krow[kx];
                        }
                    }
                    out[(oc * h_out + oy) * w_out + ox] += acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_raw(
    input: &[f64],
    si: &[usize],
    kernels: &[f64],
    sk: &[usize],
    out_grad: &[f64],
    so: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (c_in, h, w) = (si[0], si[1], si[2]);
    let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
    let (h_out, w_out) = (so[1], so[2]);
    let mut d_input = vec![0.0; input.len()];
    let mut d_kernels = vec![0.0; kernels.len()];
    let pad = padding as isize;
    for oc in 0..c_out {
        for ic in 0..c_in {
            let plane = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * c_in + ic) * kh * kw;
            for oy in 0..h_out {
                let base_y = (oy * stride) as isize - pad;
                for ox in 0..w_out {
                    let g = out_grad[(oc * h_out + oy) * w_out + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let base_x = (ox * stride) as isize - pad;
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_idx = iy as usize * w + ix as usize;
                            d_input[ic * h * w + in_idx] += g * kernels[kbase + ky * kw + kx];
                            d_kernels[kbase + ky * kw + kx] += g * plane[in_idx];
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernels)
}

#[allow(clippy::too_many_arguments)]
fn conv3d_raw(
    input: &[f64],
    si: &[usize],
    kernels: &[f64],
    sk: &[usize],
    t_starts: &[usize],
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let (c, h, w) = (si[1], si[2], si[3]);
    let (oc_n, kt, kh, kw) = (sk[0], sk[2], sk[3], sk[4]);
    let mut out = vec![0.0; t_starts.len() * oc_n * h_out * w_out];
    let pad = padding as isize;
    for (pi, &t0) in t_starts.iter().enumerate() {
        for oc in 0..oc_n {
            for dt in 0..kt {
                let frame = &input[(t0 + dt) * c * h * w..(t0 + dt + 1) * c * h * w];
                for ic in 0..c {
                    let plane = &frame[ic * h * w..(ic + 1) * h * w];
                    let kbase = ((oc * c + ic) * kt + dt) * kh * kw;
                    for oy in 0..h_out {
                        let base_y = oy as isize - pad;
                        for ox in 0..w_out {
                            let base_x = ox as isize - pad;
                            let mut acc = 0.0;
                            for ky in 0..kh {
                                let iy = base_y + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                                let krow = &kernels[kbase + ky * kw..kbase + (ky + 1) * kw];
                                for kx in 0..kw {
                                    let ix = base_x + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += row[ix as usize] * krow[kx];
                                }
                            }
                            out[((pi * oc_n + oc) * h_out + oy) * w_out + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward_raw(
    input: &[f64],
    si: &[usize],
    kernels: &[f64],
    sk: &[usize],
    out_grad: &[f64],
    so: &[usize],
    t_starts: &[usize],
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (si[1], si[2], si[3]);
    let (oc_n, kt, kh, kw) = (sk[0], sk[2], sk[3], sk[4]);
    let (h_out, w_out) = (so[2], so[3]);
    let mut d_input = vec![0.0; input.len()];
    let mut d_kernels = vec![0.0; kernels.len()];
    let pad = padding as isize;
    for (pi, &t0) in t_starts.iter().enumerate() {
        for oc in 0..oc_n {
            for dt in 0..kt {
                let fbase = (t0 + dt) * c * h * w;
                for ic in 0..c {
                    let kbase = ((oc * c + ic) * kt + dt) * kh * kw;
                    for oy in 0..h_out {
                        let base_y = oy as isize - pad;
                        for ox in 0..w_out {
                            let g = out_grad[((pi * oc_n + oc) * h_out + oy) * w_out + ox];
                            if g == 0.0 {
                                continue;
                            }
                            let base_x = ox as isize - pad;
                            for ky in 0..kh {
                                let iy = base_y + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = base_x + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let in_idx = fbase + ic * h * w + iy as usize * w + ix as usize;
                                    d_input[in_idx] += g * kernels[kbase + ky * kw + kx];
                                    d_kernels[kbase + ky * kw + kx] += g * input[in_idx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernels)
}

fn softmax_ce_raw(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    let loss = z.ln() - (logits[label] - m);
    (loss, probs)
}
