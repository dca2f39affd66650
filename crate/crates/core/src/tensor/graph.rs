use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{col2im_add, conv2d_from_col, im2col, ConvDims};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of parameters. The order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill_zero());
    }

    /// Zeroed buffers shaped like every parameter, for [`Tape::backward`].
    pub fn grad_buffer(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }

    /// Adds externally computed gradients to the accumulators.
    pub fn accumulate(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        self.check_buffer(grads)?;
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub(crate) fn check_buffer(&self, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.params.len()
            || self
                .params
                .iter()
                .zip(grads)
                .any(|(p, g)| p.value.shape() != g.shape())
        {
            return Err(Error::Shape(
                "gradient buffer does not match the parameter store".into(),
            ));
        }
        Ok(())
    }

    /// All values flattened in store order.
    pub fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrites all values from a flat slice in store order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::SizeMismatch {
                expected: self.num_scalars(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        dims: ConvDims,
        // unfolded input; `None` for 1×1 kernels, where it is the input itself
        col: Option<Vec<T>>,
    },
    Relu(usize),
    Add(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Dot(usize, Tensor<T>),
    MeanAbsError(usize, Tensor<T>),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Records a forward computation so that [`Tape::backward`] can run the
/// reverse-mode gradient rules over it.
///
/// Parameters are borrowed from a [`ParamStore`]; their gradients are
/// written to a separate buffer so that several tapes may share one store.
pub struct Tape<'s, T: Element = f32> {
    id: u64,
    params: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<'static, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params: None,
            nodes: Vec::new(),
        }
    }
}

impl<T: Element> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Element> Tape<'s, T> {
    pub fn with_params(params: &'s ParamStore<T>) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Graph(
                "variable was not recorded on this tape".into(),
            ));
        }
        Ok(v.idx)
    }

    fn node_value(&self, idx: usize) -> &Tensor<T> {
        let node = &self.nodes[idx];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(p), None) => {
                &self.params.expect("param node without store").params[*p].value
            }
            _ => unreachable!("node without value"),
        }
    }

    /// Value recorded for `v`.
    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(self.node_value(self.resolve(v)?))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t), false)
    }

    /// Input whose gradient is reported by [`Grads::get`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t), true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Graph("tape has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Graph(format!("unknown parameter {}", id.0)));
        }
        Ok(self.push(Op::Param(id.0), None, true))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xi, ki, bi) = (self.resolve(x)?, self.resolve(kernel)?, self.resolve(bias)?);
        let (input, k, b) = (self.node_value(xi), self.node_value(ki), self.node_value(bi));
        let dims = ConvDims::check(input, k, b)?;
        let (out, col) = if dims.is_pointwise() {
            (conv2d_from_col(input.data(), k.data(), b.data(), &dims), None)
        } else {
            let col = im2col(input.data(), &dims);
            (conv2d_from_col(&col, k.data(), b.data(), &dims), Some(col))
        };
        let needs = self.nodes[xi].needs_grad || self.nodes[ki].needs_grad || self.nodes[bi].needs_grad;
        let value = Tensor::from_parts(vec![dims.h, dims.w, dims.cout], out);
        Ok(self.push(
            Op::Conv2d {
                x: xi,
                k: ki,
                b: bi,
                dims,
                col,
            },
            Some(value),
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let value = super::ops::relu(self.node_value(xi));
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(Op::Relu(xi), Some(value), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let value = super::ops::add(self.node_value(ai), self.node_value(bi))?;
        let needs = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(Op::Add(ai, bi), Some(value), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xi = self.resolve(x)?;
        let value = super::ops::scale(self.node_value(xi), s);
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(Op::Scale(xi, s), Some(value), needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let value = Tensor::scalar(self.node_value(xi).sum());
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(Op::Sum(xi), Some(value), needs))
    }

    /// Inner product with a constant tensor of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xi = self.resolve(x)?;
        let xv = self.node_value(xi);
        if xv.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "dot: {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let needs = self.nodes[xi].needs_grad;
        Ok(self.push(Op::Dot(xi, weights), Some(Tensor::scalar(s)), needs))
    }

    /// Mean absolute error against a constant target.
    pub fn mean_abs_error(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let pi = self.resolve(pred)?;
        let (loss, _) = crate::trainer::mae_loss(self.node_value(pi), &target)?;
        let needs = self.nodes[pi].needs_grad;
        Ok(self.push(
            Op::MeanAbsError(pi, target),
            Some(Tensor::scalar(T::from_f64(loss))),
            needs,
        ))
    }

    /// Runs the reverse pass from the scalar `out`.
    ///
    /// Parameter gradients are added to `param_grads` (one tensor per store
    /// entry, see [`ParamStore::grad_buffer`]), so repeated calls accumulate.
    /// Gradients of [`Tape::leaf`] inputs are returned.
    pub fn backward(self, out: Var, param_grads: &mut [Tensor<T>]) -> Result<Grads<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward called before any forward op".into()));
        }
        let oi = self.resolve(out)?;
        if self.node_value(oi).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                self.node_value(oi).shape()
            )));
        }
        if let Some(store) = self.params {
            store.check_buffer(param_grads)?;
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[oi] = Some(Tensor::scalar(T::one()));

        for i in (0..=oi).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Conv2d { x, k, b, dims, col } => {
                    let xv = self.node_value(*x);
                    let col = col.as_deref().unwrap_or(xv.data());
                    if self.nodes[*k].needs_grad {
                        let mut dk = vec![T::zero(); dims.patch_len() * dims.cout];
                        T::gemm(
                            dims.patch_len(),
                            dims.pixels(),
                            dims.cout,
                            col,
                            true,
                            g.data(),
                            false,
                            T::zero(),
                            &mut dk,
                        );
                        accumulate(&mut grads[*k], Tensor::from_parts(vec![dims.kh, dims.kw, dims.cin, dims.cout], dk));
                    }
                    if self.nodes[*b].needs_grad {
                        let mut db = vec![T::zero(); dims.cout];
                        for px in g.data().chunks_exact(dims.cout) {
                            for (acc, &v) in db.iter_mut().zip(px) {
                                *acc = *acc + v;
                            }
                        }
                        accumulate(&mut grads[*b], Tensor::from_parts(vec![dims.cout], db));
                    }
                    if self.nodes[*x].needs_grad {
                        let kv = self.node_value(*k);
                        let mut dcol = vec![T::zero(); dims.pixels() * dims.patch_len()];
                        T::gemm(
                            dims.pixels(),
                            dims.cout,
                            dims.patch_len(),
                            g.data(),
                            false,
                            kv.data(),
                            true,
                            T::zero(),
                            &mut dcol,
                        );
                        let dx = if dims.is_pointwise() {
                            dcol
                        } else {
                            let mut dx = vec![T::zero(); dims.pixels() * dims.cin];
                            col2im_add(&dcol, dims, &mut dx);
                            dx
                        };
                        accumulate(&mut grads[*x], Tensor::from_parts(vec![dims.h, dims.w, dims.cin], dx));
                    }
                }
                Op::Relu(x) => {
                    let xv = self.node_value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[*x], Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads[*x], g.map(|v| v * s));
                }
                Op::Sum(x) => {
                    let shape = self.node_value(*x).shape().to_vec();
                    accumulate(&mut grads[*x], Tensor::full(&shape, g.data()[0]));
                }
                Op::Dot(x, w) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads[*x], w.map(|v| v * gs));
                }
                Op::MeanAbsError(p, target) => {
                    let (_, dpred) = crate::trainer::mae_loss(self.node_value(*p), target)?;
                    let gs = g.data()[0];
                    accumulate(&mut grads[*p], dpred.map(|v| v * gs));
                }
            }
        }

        Ok(Grads {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients of tracked leaf inputs after [`Tape::backward`].
pub struct Grads<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    /// Gradient for a [`Tape::leaf`] input, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_sum_gradient_is_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = tape.scale(x, 3.0).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &mut []).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 3.0));
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, -0.2, 0.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &mut []).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn add_routes_gradient_to_both_operands() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[2], 1.0));
        let y = tape.add(a, a).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &mut []).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut other = Tape::<f64>::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(foreign, &mut []), Err(Error::Graph(_))));

        let mut tape = Tape::<f64>::new();
        tape.input(Tensor::scalar(2.0));
        assert!(matches!(tape.backward(foreign, &mut []), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x, &mut []).is_err());
    }

    #[test]
    fn param_gradients_accumulate_across_calls() {
        let mut store = ParamStore::<f64>::new();
        let w = store.push("w", Tensor::full(&[3], 2.0));
        let mut buf = store.grad_buffer();
        for _ in 0..2 {
            let mut tape = Tape::with_params(&store);
            let wv = tape.param(w).unwrap();
            let y = tape.scale(wv, 5.0).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s, &mut buf).unwrap();
        }
        store.accumulate(&buf).unwrap();
        assert_eq!(store.get(w).grad.data(), &[10.0, 10.0, 10.0]);
        store.zero_grad();
        assert_eq!(store.get(w).grad.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn flat_round_trip() {
        let mut store = ParamStore::<f32>::new();
        store.push("a", Tensor::zeros(&[2, 2]));
        store.push("b", Tensor::zeros(&[3]));
        let flat: Vec<f32> = (0..7).map(|i| i as f32).collect();
        store.load_flat(&flat).unwrap();
        assert_eq!(store.flat_values(), flat);
        assert!(store.load_flat(&flat[..6]).is_err());
    }
}
