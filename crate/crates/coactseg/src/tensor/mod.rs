//! Dense N-D tensors with reverse-mode automatic differentiation.
//!
//! The [`Tape`] is a define-by-run graph rebuilt on every forward pass.
//! Operations append nodes in topological order; [`Tape::backward`] walks the
//! nodes once in reverse, accumulating gradients additively so a tensor
//! consumed by several downstream ops receives the sum of branch gradients.

mod conv;

use crate::error::{Error, Result};

pub use conv::{Conv3dDims, ConvTranspose3dDims};

/// Host-side tensor value, used for parameters and data outside the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Index of a node on a [`Tape`].
pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    ScalarMul(TensorId, f64),
    ScalarAdd(TensorId),
    PRelu { x: TensorId, slope: TensorId },
    Sigmoid(TensorId),
    Square(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { input: TensorId, start: Vec<usize> },
    Pad { input: TensorId, before: Vec<usize> },
    Conv3d { input: TensorId, weight: TensorId, bias: TensorId, dims: Conv3dDims },
    ConvTranspose3d { input: TensorId, weight: TensorId, dims: ConvTranspose3dDims },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
}

/// Recorded computation graph. Nodes are stored in insertion order, which is
/// a topological order by construction: an op can only reference ids that
/// already exist.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].values
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`.
    /// Panics if `backward` has not run.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.grads[id]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "leaf shape {:?} does not match {} values",
                shape,
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let v: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "sub")?;
        let v: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "div")?;
        let v: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), v, Op::Div(a, b)))
    }

    pub fn scalar_mul(&mut self, a: TensorId, s: f64) -> TensorId {
        let v: Vec<f64> = self.nodes[a].values.iter().map(|x| x * s).collect();
        self.push(self.nodes[a].shape.clone(), v, Op::ScalarMul(a, s))
    }

    pub fn scalar_add(&mut self, a: TensorId, s: f64) -> TensorId {
        let v: Vec<f64> = self.nodes[a].values.iter().map(|x| x + s).collect();
        self.push(self.nodes[a].shape.clone(), v, Op::ScalarAdd(a))
    }

    /// PReLU with a learnable scalar slope: `x` if `x >= 0`, `slope * x` otherwise.
    pub fn prelu(&mut self, x: TensorId, slope: TensorId) -> Result<TensorId> {
        if self.nodes[slope].values.len() != 1 {
            return Err(Error::Shape("prelu slope must be a scalar tensor".into()));
        }
        let s = self.nodes[slope].values[0];
        let v: Vec<f64> = self.nodes[x]
            .values
            .iter()
            .map(|&x| if x >= 0.0 { x } else { s * x })
            .collect();
        Ok(self.push(self.nodes[x].shape.clone(), v, Op::PRelu { x, slope }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(self.nodes[a].shape.clone(), v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let v: Vec<f64> = self.nodes[a].values.iter().map(|x| x * x).collect();
        self.push(self.nodes[a].shape.clone(), v, Op::Square(a))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].values.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a].values.len() as f64;
        let s: f64 = self.nodes[a].values.iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean(a))
    }

    /// Concatenate tensors along `axis`. All other extents must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let rank = self.nodes[*first].shape.len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = self.nodes[*first].shape.clone();
        out_shape[axis] = 0;
        for &id in inputs {
            let s = &self.nodes[id].shape;
            if s.len() != rank {
                return Err(Error::Shape("concat rank mismatch".into()));
            }
            for (ax, (&a, &b)) in s.iter().zip(&out_shape).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::Shape(format!(
                        "concat extent mismatch on axis {ax}: {:?} vs {:?}",
                        s, out_shape
                    )));
                }
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut v = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let ext = self.nodes[id].shape[axis];
                let chunk = ext * inner;
                v.extend_from_slice(&self.nodes[id].values[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(out_shape, v, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Rectangular slice: `start[i] .. start[i] + len[i]` per axis.
    pub fn slice(&mut self, input: TensorId, start: &[usize], len: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[input].shape.clone();
        if start.len() != shape.len() || len.len() != shape.len() {
            return Err(Error::Shape("slice rank mismatch".into()));
        }
        for ax in 0..shape.len() {
            if len[ax] == 0 || start[ax] + len[ax] > shape[ax] {
                return Err(Error::Shape(format!(
                    "slice {start:?}+{len:?} out of bounds for {shape:?}"
                )));
            }
        }
        let src = &self.nodes[input].values;
        let mut v = Vec::with_capacity(len.iter().product());
        copy_region(src, &shape, start, len, &mut |x| v.push(x));
        Ok(self.push(len.to_vec(), v, Op::Slice { input, start: start.to_vec() }))
    }

    /// Zero-pad by `before[i]` / `after[i]` elements per axis.
    pub fn pad(&mut self, input: TensorId, before: &[usize], after: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[input].shape.clone();
        if before.len() != shape.len() || after.len() != shape.len() {
            return Err(Error::Shape("pad rank mismatch".into()));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(before.iter().zip(after))
            .map(|(&d, (&b, &a))| d + b + a)
            .collect();
        let mut v = vec![0.0; out_shape.iter().product()];
        let src = self.nodes[input].values.clone();
        scatter_region(&mut v, &out_shape, before, &shape, &mut src.iter().copied());
        Ok(self.push(out_shape, v, Op::Pad { input, before: before.to_vec() }))
    }

    /// 3D cross-correlation. `input` is `[N,C,D,H,W]`, `weight` `[K,C,kd,kh,kw]`,
    /// `bias` `[K]`.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        let dims = Conv3dDims::check(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let v = conv::conv3d_forward(
            self.values(input),
            self.values(weight),
            self.values(bias),
            &dims,
        );
        Ok(self.push(dims.out_shape(), v, Op::Conv3d { input, weight, bias, dims }))
    }

    /// Transposed 3D convolution. `input` is `[N,C,D,H,W]`, `weight` `[C,K,kd,kh,kw]`.
    pub fn conv3d_transposed(
        &mut self,
        input: TensorId,
        weight: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        let dims =
            ConvTranspose3dDims::check(self.shape(input), self.shape(weight), stride, padding)?;
        let v = conv::conv3d_transposed_forward(self.values(input), self.values(weight), &dims);
        Ok(self.push(dims.out_shape(), v, Op::ConvTranspose3d { input, weight, dims }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively;
    /// after this call `grad(id)` holds dLoss/dNode for every node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[loss][0] = 1.0;
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            match node.op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut grads[id]);
                    axpy(&mut grads[a], &g, 1.0);
                    axpy(&mut grads[b], &g, 1.0);
                    grads[id] = g;
                }
                Op::Sub(a, b) => {
                    let g = std::mem::take(&mut grads[id]);
                    axpy(&mut grads[a], &g, 1.0);
                    axpy(&mut grads[b], &g, -1.0);
                    grads[id] = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut grads[id]);
                    let (av, bv) = (&self.nodes[a].values, &self.nodes[b].values);
                    for (i, &gi) in g.iter().enumerate() {
                        grads[a][i] += gi * bv[i];
                    }
                    for (i, &gi) in g.iter().enumerate() {
                        grads[b][i] += gi * av[i];
                    }
                    grads[id] = g;
                }
                Op::Div(a, b) => {
                    let g = std::mem::take(&mut grads[id]);
                    let (av, bv) = (&self.nodes[a].values, &self.nodes[b].values);
                    for (i, &gi) in g.iter().enumerate() {
                        grads[a][i] += gi / bv[i];
                    }
                    for (i, &gi) in g.iter().enumerate() {
                        grads[b][i] -= gi * av[i] / (bv[i] * bv[i]);
                    }
                    grads[id] = g;
                }
                Op::ScalarMul(a, s) => {
                    let g = std::mem::take(&mut grads[id]);
                    axpy(&mut grads[a], &g, s);
                    grads[id] = g;
                }
                Op::ScalarAdd(a) => {
                    let g = std::mem::take(&mut grads[id]);
                    axpy(&mut grads[a], &g, 1.0);
                    grads[id] = g;
                }
                Op::PRelu { x, slope } => {
                    let g = std::mem::take(&mut grads[id]);
                    let s = self.nodes[slope].values[0];
                    let xv = &self.nodes[x].values;
                    let mut gs = 0.0;
                    for (i, &gi) in g.iter().enumerate() {
                        if xv[i] >= 0.0 {
                            grads[x][i] += gi;
                        } else {
                            grads[x][i] += gi * s;
                            gs += gi * xv[i];
                        }
                    }
                    grads[slope][0] += gs;
                    grads[id] = g;
                }
                Op::Sigmoid(a) => {
                    let g = std::mem::take(&mut grads[id]);
                    let yv = &node.values;
                    for (i, &gi) in g.iter().enumerate() {
                        grads[a][i] += gi * yv[i] * (1.0 - yv[i]);
                    }
                    grads[id] = g;
                }
                Op::Square(a) => {
                    let g = std::mem::take(&mut grads[id]);
                    let xv = &self.nodes[a].values;
                    for (i, &gi) in g.iter().enumerate() {
                        grads[a][i] += 2.0 * xv[i] * gi;
                    }
                    grads[id] = g;
                }
                Op::Sum(a) => {
                    let g = grads[id][0];
                    for x in grads[a].iter_mut() {
                        *x += g;
                    }
                }
                Op::Mean(a) => {
                    let g = grads[id][0] / self.nodes[a].values.len() as f64;
                    for x in grads[a].iter_mut() {
                        *x += g;
                    }
                }
                Op::Concat { inputs, axis } => {
                    let g = std::mem::take(&mut grads[id]);
                    let out_shape = &node.shape;
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let mut offset = 0;
                    let row = out_shape[axis] * inner;
                    for &src in &inputs {
                        let ext = self.nodes[src].shape[axis];
                        let chunk = ext * inner;
                        for o in 0..outer {
                            let from = o * row + offset;
                            let to = o * chunk;
                            for i in 0..chunk {
                                grads[src][to + i] += g[from + i];
                            }
                        }
                        offset += chunk;
                    }
                    grads[id] = g;
                }
                Op::Slice { input, start } => {
                    let g = std::mem::take(&mut grads[id]);
                    let in_shape = self.nodes[input].shape.clone();
                    scatter_add_region(&mut grads[input], &in_shape, &start, &node.shape, &g);
                    grads[id] = g;
                }
                Op::Pad { input, before } => {
                    let g = std::mem::take(&mut grads[id]);
                    let in_shape = self.nodes[input].shape.clone();
                    let mut idx = 0;
                    copy_region(&g, &node.shape, &before, &in_shape, &mut |x| {
                        grads[input][idx] += x;
                        idx += 1;
                    });
                    grads[id] = g;
                }
                Op::Conv3d { input, weight, bias, dims } => {
                    let g = std::mem::take(&mut grads[id]);
                    let (xv, wv) = (&self.nodes[input].values, &self.nodes[weight].values);
                    let [gi, gw, gb] = split3_mut(&mut grads, input, weight, bias);
                    conv::conv3d_backward(xv, wv, &g, &dims, gi, gw, gb);
                    grads[id] = g;
                }
                Op::ConvTranspose3d { input, weight, dims } => {
                    let g = std::mem::take(&mut grads[id]);
                    let (xv, wv) = (&self.nodes[input].values, &self.nodes[weight].values);
                    let [gi, gw] = split2_mut(&mut grads, input, weight);
                    conv::conv3d_transposed_backward(xv, wv, &g, &dims, gi, gw);
                    grads[id] = g;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn split2_mut(grads: &mut [Vec<f64>], a: usize, b: usize) -> [&mut Vec<f64>; 2] {
    assert!(a != b);
    let ptr = grads.as_mut_ptr();
    // Distinct indices, so the two borrows never alias.
    unsafe { [&mut *ptr.add(a), &mut *ptr.add(b)] }
}

fn split3_mut(grads: &mut [Vec<f64>], a: usize, b: usize, c: usize) -> [&mut Vec<f64>; 3] {
    assert!(a != b && b != c && a != c);
    let ptr = grads.as_mut_ptr();
    unsafe { [&mut *ptr.add(a), &mut *ptr.add(b), &mut *ptr.add(c)] }
}

/// Walk the rectangular region `start..start+len` of a row-major array in
/// order, feeding each element to `f`.
fn copy_region(
    src: &[f64],
    shape: &[usize],
    start: &[usize],
    len: &[usize],
    f: &mut impl FnMut(f64),
) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..rank).map(|ax| (start[ax] + idx[ax]) * strides[ax]).sum();
        f(src[base]);
        // odometer increment
        let mut ax = rank;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < len[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn scatter_region(
    dst: &mut [f64],
    dst_shape: &[usize],
    start: &[usize],
    len: &[usize],
    src: &mut impl Iterator<Item = f64>,
) {
    let rank = dst_shape.len();
    let mut strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * dst_shape[ax + 1];
    }
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..rank).map(|ax| (start[ax] + idx[ax]) * strides[ax]).sum();
        dst[base] = src.next().expect("source exhausted");
        let mut ax = rank;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < len[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn scatter_add_region(
    dst: &mut [f64],
    dst_shape: &[usize],
    start: &[usize],
    len: &[usize],
    src: &[f64],
) {
    let mut it = src.iter().copied();
    let rank = dst_shape.len();
    let mut strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * dst_shape[ax + 1];
    }
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..rank).map(|ax| (start[ax] + idx[ax]) * strides[ax]).sum();
        dst[base] += it.next().expect("source exhausted");
        let mut ax = rank;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < len[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Max relative error between analytic gradients of `f` at `x` and central
/// finite differences with step `eps`, over the coordinates in `coords`
/// (all coordinates when empty).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.shape.clone(), x.values.clone())?;
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xid).to_vec();

    let eval = |values: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(x.shape.clone(), values.to_vec())?;
        let l = f(&mut t, id)?;
        Ok(t.values(l)[0])
    };

    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..x.values.len()).collect();
        &all
    } else {
        coords
    };

    let mut max_rel = 0.0f64;
    let mut v = x.values.clone();
    for &i in coords {
        let orig = v[i];
        v[i] = orig + eps;
        let fp = eval(&v)?;
        v[i] = orig - eps;
        let fm = eval(&v)?;
        v[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
