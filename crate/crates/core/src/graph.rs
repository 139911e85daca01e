//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] records every operation of one forward pass. Operations
//! validate shapes up front, reject non-finite results, and append a node;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node, keyed by name for trainable parameters.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::ops;
pub use crate::ops::SquashForm;
use crate::tensor::{num, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Element> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Ln(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    L2Norm(Var, T),
    Squash(Var, SquashForm, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, bias: Option<Var>, stride: (usize, usize) },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, eps: T, mean: Tensor<T>, var: Tensor<T> },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, eps: T, mean: Tensor<T>, var: Tensor<T> },
    MulConst(Var, Tensor<T>),
    CapsulePredict { w: Var, u: Var },
    CouplingSum { alpha: Var, uhat: Var },
    Agreement { v: Var, uhat: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Differentiable graph: operations recorded during a forward pass plus the
/// named tensors flagged as trainable.
#[derive(Default)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(CoreError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", Op::Leaf, value)
    }

    /// Records a trainable parameter; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(CoreError::invalid(
                "param",
                alloc::format!("parameter {name:?} registered twice"),
            ));
        }
        let v = self.push("param", Op::Param, value)?;
        self.params.insert(String::from(name), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = ops::zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = ops::zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = ops::zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = ops::zip(self.value(a), self.value(b), |x, y| x / y);
        self.push("div", Op::Div(a, b), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", Op::AddScalar(a), v)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("mul_scalar", Op::MulScalar(a, c), v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        self.push("ln", Op::Ln(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", Op::Sigmoid(a), v)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).rank() {
            return Err(CoreError::invalid(
                "softmax",
                alloc::format!("axis {axis} out of range for rank {}", self.value(a).rank()),
            ));
        }
        let v = ops::softmax_fwd(self.value(a), axis);
        self.push("softmax", Op::Softmax(a, axis), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(num::<T>(self.value(a).sum_f64()));
        self.push("sum", Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let len = self.value(a).len() as f64;
        let v = Tensor::scalar(num::<T>(self.value(a).sum_f64() / len));
        self.push("mean", Op::MeanAll(a), v)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).rank() {
            return Err(CoreError::invalid(
                "sum_axis",
                alloc::format!("axis {axis} out of range for rank {}", self.value(a).rank()),
            ));
        }
        let v = ops::sum_axis_fwd(self.value(a), axis);
        self.push("sum_axis", Op::SumAxis(a, axis), v)
    }

    /// Euclidean norm over the last axis with an epsilon under the square
    /// root, so the gradient at the zero vector stays finite.
    pub fn l2_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        if self.value(a).rank() == 0 {
            return Err(CoreError::invalid("l2_norm", "input must have rank >= 1"));
        }
        let v = ops::l2_norm_fwd(self.value(a), eps);
        self.push("l2_norm", Op::L2Norm(a, eps), v)
    }

    /// Norm-limiting capsule nonlinearity over the last axis.
    pub fn squash(&mut self, a: Var, form: SquashForm, eps: T) -> Result<Var> {
        if self.value(a).rank() == 0 {
            return Err(CoreError::invalid("squash", "input must have rank >= 1"));
        }
        let v = ops::squash_fwd(self.value(a), form, eps);
        self.push("squash", Op::Squash(a, form, eps), v)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        self.push("reshape", Op::Reshape(a), v)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = alloc::vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || core::mem::replace(&mut seen[ax], true)) {
            return Err(CoreError::invalid(
                "permute",
                alloc::format!("axes {axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let v = ops::permute_fwd(self.value(a), axes);
        self.push("permute", Op::Permute(a, axes.to_vec()), v)
    }

    /// `y = x·Wᵀ + b` with `W: [units, in]`, applied to the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = ws.len() == 2
            && bs.len() == 1
            && bs[0] == ws[0]
            && !xs.is_empty()
            && *xs.last().unwrap() == ws[1];
        if !ok {
            return Err(CoreError::ShapeMismatch {
                op: "affine",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let v = ops::affine_fwd(self.value(x), self.value(w), self.value(b));
        self.push("affine", Op::Affine { x, w, b }, v)
    }

    /// Same-padded cross-correlation. `x` is `[B,C,H,W]` (or `[C,H,W]` for a
    /// single example), `k` is `[O,C,kh,kw]` with odd `kh`, `kw`; the output
    /// spatial size is `ceil(in/stride)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let single = self.value(x).rank() == 3;
        let x4 = if single {
            let mut sh = alloc::vec![1usize];
            sh.extend_from_slice(self.shape(x));
            self.reshape(x, sh)?
        } else {
            x
        };
        let (xs, ks) = (self.shape(x4).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(CoreError::invalid(
                "conv2d",
                alloc::format!("kernel {}x{} must be odd for same padding", ks[2], ks[3]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(CoreError::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(b).to_vec(),
                    rhs: alloc::vec![ks[0]],
                });
            }
        }
        let v = ops::conv2d_fwd(
            self.value(x4),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
        );
        let out = self.push("conv2d", Op::Conv2d { x: x4, k, bias, stride }, v)?;
        if single {
            let sh = self.shape(out)[1..].to_vec();
            self.reshape(out, sh)
        } else {
            Ok(out)
        }
    }

    /// Max pooling with ceil-mode boundary (missing cells behave as -inf);
    /// the gradient routes to the first maximal element of each window.
    pub fn max_pool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let single = self.value(x).rank() == 3;
        let x4 = if single {
            let mut sh = alloc::vec![1usize];
            sh.extend_from_slice(self.shape(x));
            self.reshape(x, sh)?
        } else {
            x
        };
        if self.value(x4).rank() != 4 || window.0 == 0 || window.1 == 0 {
            return Err(CoreError::invalid(
                "max_pool2d",
                "input must be [B,C,H,W] with a positive window",
            ));
        }
        let (v, argmax) = ops::maxpool2d_fwd(self.value(x4), window);
        let out = self.push("max_pool2d", Op::MaxPool { x: x4, argmax }, v)?;
        if single {
            let sh = self.shape(out)[1..].to_vec();
            self.reshape(out, sh)
        } else {
            Ok(out)
        }
    }

    /// Training-mode batch normalization over `(batch, spatial)` per channel.
    /// Returns the output plus this batch's mean and variance for the running
    /// statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        self.check_bn_shapes(x, gamma, beta)?;
        let fwd = ops::batchnorm_train_fwd(self.value(x), self.value(gamma), self.value(beta), eps);
        let (mean, var) = (fwd.mean.clone(), fwd.var.clone());
        let out = self.push(
            "batch_norm",
            Op::BatchNormTrain { x, gamma, beta, eps, mean: fwd.mean, var: fwd.var },
            fwd.y,
        )?;
        Ok((out, mean, var))
    }

    /// Inference-mode batch normalization using running statistics only.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        self.check_bn_shapes(x, gamma, beta)?;
        let v = ops::batchnorm_infer_fwd(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        );
        self.push(
            "batch_norm",
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                eps,
                mean: running_mean.clone(),
                var: running_var.clone(),
            },
            v,
        )
    }

    fn check_bn_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let xs = self.shape(x);
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(CoreError::ShapeMismatch {
                op: "batch_norm",
                lhs: xs.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor<T>) -> Result<Var> {
        if self.shape(a) != mask.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let v = ops::zip(self.value(a), &mask, |x, m| x * m);
        self.push("mul_const", Op::MulConst(a, mask), v)
    }

    /// Prediction vectors `û[s,m,n,·] = W[n,m]·u[s,m,·]` for `W: [N,M,U_out,U_in]`
    /// and `u: [S,M,U_in]`.
    pub fn capsule_predict(&mut self, w: Var, u: Var) -> Result<Var> {
        let (ws, us) = (self.shape(w), self.shape(u));
        if ws.len() != 4 || us.len() != 3 || us[1] != ws[1] || us[2] != ws[3] {
            return Err(CoreError::ShapeMismatch {
                op: "capsule_predict",
                lhs: ws.to_vec(),
                rhs: us.to_vec(),
            });
        }
        let v = ops::capsule_predict_fwd(self.value(w), self.value(u));
        self.push("capsule_predict", Op::CapsulePredict { w, u }, v)
    }

    /// `s[s,n,·] = Σ_m α[s,m,n]·û[s,m,n,·]` for `α: [S,M,N]`, `û: [S,M,N,U]`.
    pub fn coupling_sum(&mut self, alpha: Var, uhat: Var) -> Result<Var> {
        let (als, us) = (self.shape(alpha), self.shape(uhat));
        if als.len() != 3 || us.len() != 4 || als != &us[..3] {
            return Err(CoreError::ShapeMismatch {
                op: "coupling_sum",
                lhs: als.to_vec(),
                rhs: us.to_vec(),
            });
        }
        let v = ops::coupling_sum_fwd(self.value(alpha), self.value(uhat));
        self.push("coupling_sum", Op::CouplingSum { alpha, uhat }, v)
    }

    /// Agreement `a[s,m,n] = v[s,n,·]·û[s,m,n,·]` for `v: [S,N,U]`, `û: [S,M,N,U]`.
    pub fn agreement(&mut self, v: Var, uhat: Var) -> Result<Var> {
        let (vs, us) = (self.shape(v), self.shape(uhat));
        if vs.len() != 3 || us.len() != 4 || vs[0] != us[0] || vs[1] != us[2] || vs[2] != us[3] {
            return Err(CoreError::ShapeMismatch {
                op: "agreement",
                lhs: vs.to_vec(),
                rhs: us.to_vec(),
            });
        }
        let out = ops::agreement_fwd(self.value(v), self.value(uhat));
        self.push("agreement", Op::Agreement { v, uhat }, out)
    }

    /// Reverse pass from a scalar loss. Every registered parameter receives a
    /// gradient of its own shape; parameters the loss does not depend on get
    /// zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::invalid(
                "backward",
                alloc::format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for id in (0..self.nodes.len()).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, ops::zip(&g, self.value(*b), |x, y| x * y));
                    acc(&mut grads, *b, ops::zip(&g, self.value(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let da = ops::zip(&g, self.value(*b), |x, y| x / y);
                    let gy = ops::zip(&g, &node.value, |x, y| x * y);
                    let db = ops::zip(&gy, self.value(*b), |x, y| -(x / y));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MulScalar(a, c) => acc(&mut grads, *a, g.map(|x| x * *c)),
                Op::Ln(a) => acc(&mut grads, *a, ops::zip(&g, self.value(*a), |x, y| x / y)),
                Op::Relu(a) => acc(
                    &mut grads,
                    *a,
                    ops::zip(&g, self.value(*a), |x, y| {
                        if y > T::zero() {
                            x
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Sigmoid(a) => acc(
                    &mut grads,
                    *a,
                    ops::zip(&g, &node.value, |x, y| x * y * (T::one() - y)),
                ),
                Op::Softmax(a, axis) => {
                    acc(&mut grads, *a, ops::softmax_bwd(&node.value, &g, *axis));
                }
                Op::SumAll(a) => {
                    let v = Tensor::full(self.shape(*a).to_vec(), g.item());
                    acc(&mut grads, *a, v);
                }
                Op::MeanAll(a) => {
                    let n = num::<T>(self.value(*a).len() as f64);
                    let v = Tensor::full(self.shape(*a).to_vec(), g.item() / n);
                    acc(&mut grads, *a, v);
                }
                Op::SumAxis(a, axis) => {
                    acc(&mut grads, *a, ops::sum_axis_bwd(&g, self.shape(*a), *axis));
                }
                Op::L2Norm(a, _) => {
                    acc(&mut grads, *a, ops::l2_norm_bwd(self.value(*a), &node.value, &g));
                }
                Op::Squash(a, form, eps) => {
                    acc(&mut grads, *a, ops::squash_bwd(self.value(*a), &g, *form, *eps));
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, g.reshaped(self.shape(*a).to_vec())?);
                }
                Op::Permute(a, axes) => {
                    acc(&mut grads, *a, ops::permute_fwd(&g, &ops::inverse_axes(axes)));
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = ops::affine_bwd(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Conv2d { x, k, bias, stride } => {
                    let (dx, dk, db) =
                        ops::conv2d_bwd(self.value(*x), self.value(*k), bias.is_some(), *stride, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *k, dk);
                    if let (Some(b), Some(db)) = (bias, db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    acc(&mut grads, *x, ops::maxpool2d_bwd(self.shape(*x), argmax, &g));
                }
                Op::BatchNormTrain { x, gamma, beta, eps, mean, var } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_train_bwd(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &g,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::BatchNormInfer { x, gamma, beta, eps, mean, var } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_infer_bwd(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &g,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::MulConst(a, mask) => {
                    acc(&mut grads, *a, ops::zip(&g, mask, |x, m| x * m));
                }
                Op::CapsulePredict { w, u } => {
                    let (dw, du) = ops::capsule_predict_bwd(self.value(*w), self.value(*u), &g);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *u, du);
                }
                Op::CouplingSum { alpha, uhat } => {
                    let (da, du) = ops::coupling_sum_bwd(self.value(*alpha), self.value(*uhat), &g);
                    acc(&mut grads, *alpha, da);
                    acc(&mut grads, *uhat, du);
                }
                Op::Agreement { v, uhat } => {
                    let (dv, du) = ops::agreement_bwd(self.value(*v), self.value(*uhat), &g);
                    acc(&mut grads, *v, dv);
                    acc(&mut grads, *uhat, du);
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, var) in &self.params {
            let g = grads[var.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*var).to_vec()));
            if !g.is_finite() {
                return Err(CoreError::NonFinite { op: "backward" });
            }
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { grads, by_name })
    }
}

fn acc<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (dst, src) in t.data_mut().iter_mut().zip(delta.data()) {
                *dst = *dst + *src;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients from one reverse pass.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to an arbitrary recorded node, if it received
    /// any flow.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a named parameter (zeros when unused by the loss).
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<T: Element>(shape: &[usize], data: &[f64]) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data.iter().map(|&x| num(x)).collect()).unwrap()
    }

    #[test]
    fn affine_identity_case() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.affine(u, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_evaluated() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let w = g.constant(t(&[1, 2], &[2.0, 3.0])).unwrap();
        let b = g.constant(t(&[1], &[1.0])).unwrap();
        let y = g.affine(u, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_zero_input_returns_bias() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let w = g.constant(Tensor::from_fn([2, 3], |i| i as f64)).unwrap();
        let b = g.constant(t(&[2], &[0.5, -1.5])).unwrap();
        let y = g.affine(u, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5]);
    }

    #[test]
    fn affine_shape_mismatch_names_operands() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[3], &[0.0; 3])).unwrap();
        let w = g.constant(Tensor::zeros([2, 2])).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let err = g.affine(u, w, b).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { op: "affine", .. }));
    }

    #[test]
    fn softmax_symmetry_and_sigmoid_midpoint() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(z).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn l2_norm_hand_evaluated() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let n = g.l2_norm(x, 1e-12).unwrap();
        assert!((g.value(n).item() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn strided_conv_shape_contract() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 4, 8])).unwrap();
        let k = g.constant(Tensor::zeros([1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, k, None, (1, 2)).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
    }

    #[test]
    fn conv_bruteforce_example() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = g.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, k, None, (1, 1)).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn maxpool_single_window_and_constant_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.max_pool2d(x, (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.constant(Tensor::full([1, 4, 4], 2.5)).unwrap();
        let p = g.max_pool2d(c, (2, 2)).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pooling_thrice_reaches_paper_geometry() {
        let mut g = Graph::<f64>::new();
        let mut x = g.constant(Tensor::zeros([1, 240, 64])).unwrap();
        for _ in 0..3 {
            x = g.max_pool2d(x, (2, 2)).unwrap();
        }
        assert_eq!(g.shape(x), &[1, 30, 8]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(w).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.param("w").unwrap().item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let _unused = g.param("p", Tensor::zeros([3, 2])).unwrap();
        let x = g.param("x", Tensor::scalar(1.5)).unwrap();
        let y = g.mul_scalar(x, 2.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("p").unwrap().data(), &[0.0; 6]);
        assert_eq!(grads.param("x").unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sum_of_affine_has_outer_product_gradient() {
        // d(sum(W·u))/dW[i][j] = u[j]
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let w = g.param("w", Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2])).unwrap();
        let y = g.affine(u, w, b).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let dw = grads.param("w").unwrap();
        assert_eq!(dw.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let err = g.ln(x).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { op: "ln" }));
    }

    #[test]
    fn identical_inputs_are_bit_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g
                .constant(Tensor::from_fn([2, 3, 4, 4], |i| (i as f32 * 0.3).sin()))
                .unwrap();
            let k = g
                .constant(Tensor::from_fn([2, 3, 3, 3], |i| (i as f32 * 0.17).cos()))
                .unwrap();
            let y = g.conv2d(x, k, None, (1, 1)).unwrap();
            let s = g.softmax(y, 1).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
