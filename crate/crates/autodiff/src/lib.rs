//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is deliberately small: matrix multiply, elementwise arithmetic
//! and activations, cumulative sums, reductions, slicing, concatenation and
//! index gathers. That is enough to express a coordinate MLP and a volume
//! rendering quadrature end to end. There is no broadcasting beyond row-bias
//! addition and no implicit type promotion; shape mismatches panic with both
//! shapes in the message.
//!
//! Values are computed eagerly. An operation is recorded on the tape only
//! when at least one input requires gradients. `backward` must be called on
//! a scalar and accumulates into leaf gradients; intermediate gradients are
//! reset at the start of each call so repeated backward passes sum cleanly.

mod gemm;

pub mod checkpoint;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, TensorRecord};

/// Element type of tensors: `f32` for training speed, `f64` for gradient
/// verification. The gemm hooks let `f32` dispatch to SIMD kernels.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Copy
    + Send
    + Sync
    + 'static
{
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);
    fn gemm_abt(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]);
    fn gemm_atb(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn of_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm::gemm_f32(m, k, n, a, b, c)
    }
    fn gemm_abt(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm::gemm_abt_f32(m, n, k, a, b, c)
    }
    fn gemm_atb(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm::gemm_atb_f32(m, k, n, a, b, c)
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm::gemm_generic(m, k, n, a, b, c)
    }
    fn gemm_abt(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm::gemm_abt_generic(m, n, k, a, b, c)
    }
    fn gemm_atb(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm::gemm_atb_generic(m, k, n, a, b, c)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Sin { a: usize },
    Cos { a: usize },
    Exp { a: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, s: f64 },
    ClampMax { a: usize, cap: f64 },
    AddRow { a: usize, bias: usize },
    ConcatCols { a: usize, b: usize, cols_a: usize },
    Cumsum { a: usize, axis: usize },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Reshape { a: usize },
    Narrow { a: usize, axis: usize, start: usize },
    GatherRows { a: usize, index: Rc<Vec<usize>> },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    records: Vec<(usize, Op)>,
}

/// Recording tape. Cheap to clone (shared interior); single-threaded by
/// construction — graph building and backward have one writer.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value stored on a tape.
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                records: Vec::new(),
            })),
        }
    }

    /// Number of nodes currently stored.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Tensor<T> {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                data,
                shape: shape.to_vec(),
                requires_grad,
                is_leaf: true,
                grad: None,
            });
            inner.nodes.len() - 1
        };
        Tensor {
            tape: self.clone(),
            id,
            shape: shape.to_vec(),
        }
    }

    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.leaf(vec![v], &[1], false)
    }

    /// Reset every gradient buffer on the tape.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in &mut inner.nodes {
            node.grad = None;
        }
    }

    fn push(&self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor<T> {
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node {
                data,
                shape: shape.clone(),
                requires_grad,
                is_leaf: op.is_none(),
                grad: None,
            });
            let id = inner.nodes.len() - 1;
            if requires_grad {
                if let Some(op) = op {
                    inner.records.push((id, op));
                }
            }
            id
        };
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Detached copy of the values.
    pub fn data(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> T {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(node.data.len(), 1, "value: tensor has {} elements", node.data.len());
        node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Tensor<T>) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "tensors belong to different tapes"
        );
    }

    fn rg2(&self, other: &Tensor<T>) -> bool {
        let inner = self.tape.inner.borrow();
        inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad
    }

    fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].data)
    }

    fn elementwise_binary(&self, other: &Tensor<T>, name: &str, op: Op, f: impl Fn(T, T) -> T) -> Tensor<T> {
        self.same_tape(other);
        assert_eq!(
            self.shape, other.shape,
            "{name}: shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        self.tape.push(data, self.shape.clone(), self.rg2(other), Some(op))
    }

    fn elementwise_unary(&self, op: Op, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.with_data(|a| a.iter().map(|&x| f(x)).collect());
        let rg = self.requires_grad();
        self.tape.push(data, self.shape.clone(), rg, Some(op))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.same_tape(other);
        assert!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            "matmul: shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![T::zero(); m * n];
        {
            let inner = self.tape.inner.borrow();
            T::gemm(m, k, n, &inner.nodes[self.id].data, &inner.nodes[other.id].data, &mut out);
        }
        self.tape.push(
            out,
            vec![m, n],
            self.rg2(other),
            Some(Op::Matmul { a: self.id, b: other.id }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.elementwise_binary(other, "add", Op::Add { a: self.id, b: other.id }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.elementwise_binary(other, "sub", Op::Sub { a: self.id, b: other.id }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.elementwise_binary(other, "mul", Op::Mul { a: self.id, b: other.id }, |x, y| x * y)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.elementwise_unary(Op::Neg { a: self.id }, |x| -x)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.elementwise_unary(Op::Relu { a: self.id }, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.elementwise_unary(Op::Sigmoid { a: self.id }, sigmoid_stable)
    }

    pub fn sin(&self) -> Tensor<T> {
        self.elementwise_unary(Op::Sin { a: self.id }, |x| x.sin())
    }

    pub fn cos(&self) -> Tensor<T> {
        self.elementwise_unary(Op::Cos { a: self.id }, |x| x.cos())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.elementwise_unary(Op::Exp { a: self.id }, |x| x.exp())
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.elementwise_unary(Op::AddScalar { a: self.id }, |x| x + s)
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.elementwise_unary(Op::MulScalar { a: self.id, s: s.as_f64() }, |x| x * s)
    }

    /// Elementwise `min(x, cap)`; gradient passes where the input was below
    /// the cap.
    pub fn clamp_max(&self, cap: T) -> Tensor<T> {
        self.elementwise_unary(Op::ClampMax { a: self.id, cap: cap.as_f64() }, |x| {
            if x > cap {
                cap
            } else {
                x
            }
        })
    }

    /// Add a length-n bias row to every row of an [m, n] tensor.
    pub fn add_row(&self, bias: &Tensor<T>) -> Tensor<T> {
        self.same_tape(bias);
        assert!(
            self.shape.len() == 2 && bias.shape.len() == 1 && bias.shape[0] == self.shape[1],
            "add_row: shape mismatch {:?} vs {:?}",
            self.shape,
            bias.shape
        );
        let n = self.shape[1];
        let data = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[bias.id].data;
            a.iter().enumerate().map(|(i, &x)| x + b[i % n]).collect()
        };
        self.tape.push(
            data,
            self.shape.clone(),
            self.rg2(bias),
            Some(Op::AddRow { a: self.id, bias: bias.id }),
        )
    }

    /// Concatenate two [m, ·] tensors along columns.
    pub fn concat_cols(&self, other: &Tensor<T>) -> Tensor<T> {
        self.same_tape(other);
        assert!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[0] == other.shape[0],
            "concat_cols: shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        let (m, na, nb) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = Vec::with_capacity(m * (na + nb));
        {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            for i in 0..m {
                data.extend_from_slice(&a[i * na..(i + 1) * na]);
                data.extend_from_slice(&b[i * nb..(i + 1) * nb]);
            }
        }
        self.tape.push(
            data,
            vec![m, na + nb],
            self.rg2(other),
            Some(Op::ConcatCols { a: self.id, b: other.id, cols_a: na }),
        )
    }

    /// Inclusive cumulative sum along `axis` of a rank-2 tensor.
    pub fn cumsum(&self, axis: usize) -> Tensor<T> {
        assert!(
            self.shape.len() == 2 && axis < 2,
            "cumsum: axis {axis} invalid for shape {:?}",
            self.shape
        );
        let (m, n) = (self.shape[0], self.shape[1]);
        let data = self.with_data(|a| {
            let mut out = a.to_vec();
            match axis {
                1 => {
                    for i in 0..m {
                        for j in 1..n {
                            out[i * n + j] = out[i * n + j] + out[i * n + j - 1];
                        }
                    }
                }
                _ => {
                    for i in 1..m {
                        for j in 0..n {
                            out[i * n + j] = out[i * n + j] + out[(i - 1) * n + j];
                        }
                    }
                }
            }
            out
        });
        let rg = self.requires_grad();
        self.tape.push(data, self.shape.clone(), rg, Some(Op::Cumsum { a: self.id, axis }))
    }

    /// Reduce a rank-2 tensor along `axis`; axis 1 yields [m, 1], axis 0
    /// yields [1, n].
    pub fn sum_axis(&self, axis: usize) -> Tensor<T> {
        assert!(
            self.shape.len() == 2 && axis < 2,
            "sum_axis: axis {axis} invalid for shape {:?}",
            self.shape
        );
        let (m, n) = (self.shape[0], self.shape[1]);
        let (data, shape) = self.with_data(|a| match axis {
            1 => {
                let mut out = vec![T::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        out[i] = out[i] + a[i * n + j];
                    }
                }
                (out, vec![m, 1])
            }
            _ => {
                let mut out = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] = out[j] + a[i * n + j];
                    }
                }
                (out, vec![1, n])
            }
        });
        let rg = self.requires_grad();
        self.tape.push(data, shape, rg, Some(Op::SumAxis { a: self.id, axis }))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.with_data(|a| a.iter().fold(T::zero(), |acc, &x| acc + x));
        let rg = self.requires_grad();
        self.tape.push(vec![total], vec![1], rg, Some(Op::SumAll { a: self.id }))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let count = T::from_usize(self.numel()).expect("numel fits scalar");
        let total = self.with_data(|a| a.iter().fold(T::zero(), |acc, &x| acc + x)) / count;
        let rg = self.requires_grad();
        self.tape.push(vec![total], vec![1], rg, Some(Op::MeanAll { a: self.id }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            self.numel(),
            numel(shape),
            "reshape: cannot view {:?} as {:?}",
            self.shape,
            shape
        );
        let data = self.data();
        let rg = self.requires_grad();
        self.tape.push(data, shape.to_vec(), rg, Some(Op::Reshape { a: self.id }))
    }

    /// Contiguous slice of `len` indices starting at `start` along `axis` of
    /// a rank-2 tensor.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        assert!(
            self.shape.len() == 2 && axis < 2 && start + len <= self.shape[axis],
            "narrow: range {start}..{} invalid for axis {axis} of {:?}",
            start + len,
            self.shape
        );
        let (m, n) = (self.shape[0], self.shape[1]);
        let (data, shape) = self.with_data(|a| match axis {
            0 => (a[start * n..(start + len) * n].to_vec(), vec![len, n]),
            _ => {
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&a[i * n + start..i * n + start + len]);
                }
                (out, vec![m, len])
            }
        });
        let rg = self.requires_grad();
        self.tape.push(data, shape, rg, Some(Op::Narrow { a: self.id, axis, start }))
    }

    /// Gather rows of an [m, n] tensor by a precomputed index (for example a
    /// sort permutation). Backward scatter-adds gradients to the source rows.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor<T> {
        assert_eq!(self.shape.len(), 2, "gather_rows: rank-2 input required, got {:?}", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        for &i in index {
            assert!(i < m, "gather_rows: index {i} out of range for {m} rows");
        }
        let data = self.with_data(|a| {
            let mut out = Vec::with_capacity(index.len() * n);
            for &i in index {
                out.extend_from_slice(&a[i * n..(i + 1) * n]);
            }
            out
        });
        let rg = self.requires_grad();
        self.tape.push(
            data,
            vec![index.len(), n],
            rg,
            Some(Op::GatherRows { a: self.id, index: Rc::new(index.to_vec()) }),
        )
    }

    /// Backpropagate from a scalar root, accumulating into leaf gradients.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: root must be scalar, got shape {:?}",
            self.shape
        );
        self.tape.inner.borrow_mut().backward(self.id);
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> TapeInner<T> {
    fn grad_buf(&mut self, id: usize) -> &mut Vec<T> {
        let len = self.nodes[id].data.len();
        self.nodes[id].grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    fn take_grad(&mut self, id: usize) -> Vec<T> {
        let len = self.nodes[id].data.len();
        self.nodes[id].grad.take().unwrap_or_else(|| vec![T::zero(); len])
    }

    fn backward(&mut self, root: usize) {
        // Intermediate grads are scratch state of a single pass; leaves keep
        // accumulating across passes.
        for node in &mut self.nodes {
            if !node.is_leaf {
                node.grad = None;
            }
        }
        {
            let buf = self.grad_buf(root);
            buf[0] = buf[0] + T::one();
        }
        let records = std::mem::take(&mut self.records);
        for (out, op) in records.iter().rev() {
            let gout = match &self.nodes[*out].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(*out, op, &gout);
        }
        self.records = records;
    }

    fn propagate(&mut self, out: usize, op: &Op, gout: &[T]) {
        match op {
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    let mut ga = self.take_grad(*a);
                    T::gemm_abt(m, n, k, gout, &self.nodes[*b].data, &mut ga);
                    self.nodes[*a].grad = Some(ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = self.take_grad(*b);
                    T::gemm_atb(m, k, n, &self.nodes[*a].data, gout, &mut gb);
                    self.nodes[*b].grad = Some(gb);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, gout, |g, _| g);
                self.accumulate(*b, gout, |g, _| g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, gout, |g, _| g);
                self.accumulate(*b, gout, |g, _| -g);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bd = self.nodes[*b].data.clone();
                    self.accumulate_indexed(*a, gout, |g, i| g * bd[i]);
                }
                if self.nodes[*b].requires_grad {
                    let ad = self.nodes[*a].data.clone();
                    self.accumulate_indexed(*b, gout, |g, i| g * ad[i]);
                }
            }
            Op::Neg { a } => self.accumulate(*a, gout, |g, _| -g),
            Op::Relu { a } => {
                if self.nodes[*a].requires_grad {
                    let ad = self.nodes[*a].data.clone();
                    self.accumulate_indexed(*a, gout, |g, i| {
                        if ad[i] > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[*a].requires_grad {
                    let yd = self.nodes[out].data.clone();
                    self.accumulate_indexed(*a, gout, |g, i| g * yd[i] * (T::one() - yd[i]));
                }
            }
            Op::Sin { a } => {
                if self.nodes[*a].requires_grad {
                    let ad = self.nodes[*a].data.clone();
                    self.accumulate_indexed(*a, gout, |g, i| g * ad[i].cos());
                }
            }
            Op::Cos { a } => {
                if self.nodes[*a].requires_grad {
                    let ad = self.nodes[*a].data.clone();
                    self.accumulate_indexed(*a, gout, |g, i| -g * ad[i].sin());
                }
            }
            Op::Exp { a } => {
                if self.nodes[*a].requires_grad {
                    let yd = self.nodes[out].data.clone();
                    self.accumulate_indexed(*a, gout, |g, i| g * yd[i]);
                }
            }
            Op::AddScalar { a } => self.accumulate(*a, gout, |g, _| g),
            Op::MulScalar { a, s } => {
                let s = T::of_f64(*s);
                self.accumulate(*a, gout, move |g, _| g * s);
            }
            Op::ClampMax { a, cap } => {
                if self.nodes[*a].requires_grad {
                    let cap = T::of_f64(*cap);
                    let ad = self.nodes[*a].data.clone();
                    self.accumulate_indexed(*a, gout, move |g, i| {
                        if ad[i] > cap {
                            T::zero()
                        } else {
                            g
                        }
                    });
                }
            }
            Op::AddRow { a, bias } => {
                self.accumulate(*a, gout, |g, _| g);
                if self.nodes[*bias].requires_grad {
                    let n = self.nodes[*bias].data.len();
                    let mut gb = self.take_grad(*bias);
                    for (i, &g) in gout.iter().enumerate() {
                        gb[i % n] = gb[i % n] + g;
                    }
                    self.nodes[*bias].grad = Some(gb);
                }
            }
            Op::ConcatCols { a, b, cols_a } => {
                let na = *cols_a;
                let nb = self.nodes[*b].shape[1];
                let n = na + nb;
                if self.nodes[*a].requires_grad {
                    let mut ga = self.take_grad(*a);
                    for i in 0..self.nodes[*a].shape[0] {
                        for j in 0..na {
                            ga[i * na + j] = ga[i * na + j] + gout[i * n + j];
                        }
                    }
                    self.nodes[*a].grad = Some(ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = self.take_grad(*b);
                    for i in 0..self.nodes[*b].shape[0] {
                        for j in 0..nb {
                            gb[i * nb + j] = gb[i * nb + j] + gout[i * n + na + j];
                        }
                    }
                    self.nodes[*b].grad = Some(gb);
                }
            }
            Op::Cumsum { a, axis } => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut suffix = gout.to_vec();
                    match axis {
                        1 => {
                            for i in 0..m {
                                for j in (0..n.saturating_sub(1)).rev() {
                                    suffix[i * n + j] = suffix[i * n + j] + suffix[i * n + j + 1];
                                }
                            }
                        }
                        _ => {
                            for i in (0..m.saturating_sub(1)).rev() {
                                for j in 0..n {
                                    suffix[i * n + j] = suffix[i * n + j] + suffix[(i + 1) * n + j];
                                }
                            }
                        }
                    }
                    let mut ga = self.take_grad(*a);
                    for (g, s) in ga.iter_mut().zip(&suffix) {
                        *g = *g + *s;
                    }
                    self.nodes[*a].grad = Some(ga);
                }
            }
            Op::SumAxis { a, axis } => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut ga = self.take_grad(*a);
                    match axis {
                        1 => {
                            for i in 0..m {
                                for j in 0..n {
                                    ga[i * n + j] = ga[i * n + j] + gout[i];
                                }
                            }
                        }
                        _ => {
                            for i in 0..m {
                                for j in 0..n {
                                    ga[i * n + j] = ga[i * n + j] + gout[j];
                                }
                            }
                        }
                    }
                    self.nodes[*a].grad = Some(ga);
                }
            }
            Op::SumAll { a } => self.accumulate(*a, &[gout[0]], |_, _| gout[0]),
            Op::MeanAll { a } => {
                let count = T::from_usize(self.nodes[*a].data.len()).expect("numel fits scalar");
                let g = gout[0] / count;
                self.accumulate(*a, &[g], move |_, _| g);
            }
            Op::Reshape { a } => {
                if self.nodes[*a].requires_grad {
                    let mut ga = self.take_grad(*a);
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g = *g + go;
                    }
                    self.nodes[*a].grad = Some(ga);
                }
            }
            Op::Narrow { a, axis, start } => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut ga = self.take_grad(*a);
                    match axis {
                        0 => {
                            let rows = gout.len() / n;
                            for i in 0..rows {
                                for j in 0..n {
                                    ga[(start + i) * n + j] = ga[(start + i) * n + j] + gout[i * n + j];
                                }
                            }
                        }
                        _ => {
                            let len = gout.len() / m;
                            for i in 0..m {
                                for j in 0..len {
                                    ga[i * n + start + j] = ga[i * n + start + j] + gout[i * len + j];
                                }
                            }
                        }
                    }
                    self.nodes[*a].grad = Some(ga);
                }
            }
            Op::GatherRows { a, index } => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].shape[1];
                    let mut ga = self.take_grad(*a);
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            ga[src * n + j] = ga[src * n + j] + gout[r * n + j];
                        }
                    }
                    self.nodes[*a].grad = Some(ga);
                }
            }
        }
    }

    /// Elementwise accumulation `grad[a][i] += f(gout[i], i)` for ops whose
    /// input and output have identical layout.
    fn accumulate(&mut self, a: usize, gout: &[T], f: impl Fn(T, usize) -> T) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let mut ga = self.take_grad(a);
        if gout.len() == ga.len() {
            for (i, g) in ga.iter_mut().enumerate() {
                *g = *g + f(gout[i], i);
            }
        } else {
            // scalar-broadcast case (SumAll / MeanAll)
            for (i, g) in ga.iter_mut().enumerate() {
                *g = *g + f(gout[0], i);
            }
        }
        self.nodes[a].grad = Some(ga);
    }

    fn accumulate_indexed(&mut self, a: usize, gout: &[T], f: impl Fn(T, usize) -> T) {
        self.accumulate(a, gout, f)
    }
}

/// Central-difference gradient oracle used by the verification suites.
///
/// Evaluates `f` twice per probed coordinate and never touches the backward
/// pass, so it stays independent of the tape's analytic gradients.
pub mod gradcheck {
    /// d/dx_i of `f` at `x` by central differences with step `h`.
    pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += h;
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    }

    /// Relative error with a floor that keeps near-zero gradients comparable.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let t = tape();
        let x = t.constant(vec![-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().data(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let t = tape();
        let x = t.constant(vec![0.0], &[1]);
        assert_eq!(x.sigmoid().value(), 0.5);
    }

    #[test]
    fn cumsum_matches_definition() {
        let t = tape();
        let x = t.constant(vec![1.0, 2.0, 3.0], &[1, 3]);
        assert_eq!(x.cumsum(1).data(), vec![1.0, 3.0, 6.0]);
        let y = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(y.cumsum(0).data(), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn square_gradient() {
        let t = tape();
        let x = t.leaf(vec![3.0], &[1], true);
        let y = x.mul(&x);
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let t = tape();
        let x = t.leaf(vec![0.0], &[1], true);
        let y = x.sigmoid();
        y.backward();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let t = tape();
        let x = t.leaf(vec![3.0], &[1], true);
        let y = x.mul(&x);
        y.backward();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        t.zero_grads();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let t = tape();
        let x = t.leaf(vec![0.7, -1.3], &[2], true);
        let l1 = x.mul(&x).sum_all();
        let l2 = x.sin().sum_all();

        l1.backward();
        l2.backward();
        let combined = x.grad().unwrap();

        t.zero_grads();
        l1.add(&l2).backward();
        let joint = x.grad().unwrap();
        for (a, b) in combined.iter().zip(&joint) {
            assert!((a - b).abs() < 1e-12, "sum-of-losses gradient mismatch {a} vs {b}");
        }
    }

    #[test]
    #[should_panic(expected = "root must be scalar")]
    fn backward_rejects_non_scalar_root() {
        let t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[2], true);
        x.relu().backward();
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_rejects_shape_mismatch() {
        let t = tape();
        let a = t.constant(vec![1.0, 2.0], &[2]);
        let b = t.constant(vec![1.0, 2.0, 3.0], &[3]);
        let _ = a.add(&b);
    }

    #[test]
    fn gather_routes_gradients_to_presort_positions() {
        let t = tape();
        let x = t.leaf(vec![3.0, 1.0, 2.0], &[3, 1], true);
        // Sort permutation computed outside the tape; only the gather is
        // differentiable.
        let mut perm: Vec<usize> = (0..3).collect();
        let vals = x.data();
        perm.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
        assert_eq!(perm, vec![1, 2, 0]);
        let sorted = x.gather_rows(&perm);
        assert_eq!(sorted.data(), vec![1.0, 2.0, 3.0]);
        // Loss weights position 0 of the *sorted* order only; the gradient
        // must land on source row 1.
        let w = t.constant(vec![1.0, 0.0, 0.0], &[3, 1]);
        sorted.mul(&w).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    /// Every primitive op against central finite differences on random
    /// inputs in [-2, 2], 64-bit, relative error < 1e-4.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: Vec<(&str, Box<dyn Fn(&Tape<f64>, &Tensor<f64>) -> Tensor<f64>>)> = vec![
            ("neg", Box::new(|_, x| x.neg())),
            ("relu", Box::new(|_, x| x.relu())),
            ("sigmoid", Box::new(|_, x| x.sigmoid())),
            ("sin", Box::new(|_, x| x.sin())),
            ("cos", Box::new(|_, x| x.cos())),
            ("exp", Box::new(|_, x| x.exp())),
            ("add_scalar", Box::new(|_, x| x.add_scalar(0.37))),
            ("mul_scalar", Box::new(|_, x| x.mul_scalar(-1.21))),
            ("clamp_max", Box::new(|_, x| x.clamp_max(0.5))),
            ("cumsum1", Box::new(|_, x| x.cumsum(1))),
            ("cumsum0", Box::new(|_, x| x.cumsum(0))),
            ("sum_axis1", Box::new(|_, x| x.sum_axis(1))),
            ("sum_axis0", Box::new(|_, x| x.sum_axis(0))),
            ("mean", Box::new(|_, x| x.mean_all())),
            ("reshape", Box::new(|_, x| x.reshape(&[6, 2]))),
            ("narrow_rows", Box::new(|_, x| x.narrow(0, 1, 2))),
            ("narrow_cols", Box::new(|_, x| x.narrow(1, 1, 2))),
            ("gather", Box::new(|_, x| x.gather_rows(&[2, 0, 0, 1]))),
            (
                "mul_pair",
                Box::new(|t, x| {
                    let w = t.constant((1..=12).map(|v| 0.1 * v as f64).collect(), &[3, 4]);
                    x.mul(&w)
                }),
            ),
            (
                "matmul",
                Box::new(|t, x| {
                    let w = t.constant((1..=8).map(|v| 0.3 * v as f64 - 1.0).collect(), &[4, 2]);
                    x.matmul(&w)
                }),
            ),
            (
                "add_row",
                Box::new(|t, x| {
                    let b = t.constant(vec![0.3, -0.2, 0.9, 0.1], &[4]);
                    x.add_row(&b)
                }),
            ),
            (
                "concat",
                Box::new(|t, x| {
                    let o = t.constant(vec![0.5; 6], &[3, 2]);
                    x.concat_cols(&o)
                }),
            ),
        ];

        for (name, build) in &cases {
            for _ in 0..4 {
                let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
                // keep relu/clamp kinks away from the probe points
                let x0: Vec<f64> = x0
                    .into_iter()
                    .map(|v| if v.abs() < 0.05 || (v - 0.5).abs() < 0.05 { v + 0.1 } else { v })
                    .collect();

                let mut eval = |vals: &[f64]| -> f64 {
                    let t = tape();
                    let x = t.leaf(vals.to_vec(), &[3, 4], true);
                    build(&t, &x).sum_all().value()
                };

                let t = tape();
                let x = t.leaf(x0.clone(), &[3, 4], true);
                build(&t, &x).sum_all().backward();
                let analytic = x.grad().unwrap();

                for i in 0..x0.len() {
                    let fd = gradcheck::central_difference(&mut eval, &x0, i, 1e-5);
                    let err = gradcheck::relative_error(analytic[i], fd);
                    assert!(
                        err < 1e-4,
                        "{name}: grad mismatch at {i}: analytic {} vs fd {fd} (rel {err})",
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_values() {
        let t = tape();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).data(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn constant_ops_record_nothing() {
        let t = tape();
        let a = t.constant(vec![1.0; 4], &[2, 2]);
        let _ = a.relu().sigmoid().sum_all();
        assert!(t.inner.borrow().records.is_empty());
    }

    #[test]
    fn f32_pipeline_is_finite() {
        let t: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t.leaf((0..256).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[16, 16], true);
        let w = t.leaf((0..256).map(|_| rng.gen_range(-0.3..0.3)).collect(), &[16, 16], true);
        let loss = x.matmul(&w).relu().sum_all();
        loss.backward();
        assert!(loss.value().is_finite());
        assert!(w.grad().unwrap().iter().all(|g| g.is_finite()));
    }
}
