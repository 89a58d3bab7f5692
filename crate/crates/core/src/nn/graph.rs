//! Tape-based reverse-mode differentiation over the closed layer set.

use std::sync::atomic::{AtomicU32, Ordering};

use super::arcface::{arcface_backward, arcface_value, MarginConfig};
use super::ops;
use super::tensor::Tensor;
use crate::codec::{self, HighDimRep, MappingSpec, Planes};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// A named trainable tensor together with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    pub(crate) velocity: Option<Vec<f32>>,
    pub(crate) second_moment: Option<Vec<f32>>,
}

/// Ordered parameter collection of one model.
#[derive(Debug)]
pub struct ParamStore {
    id: u32,
    params: Vec<Param>,
    trainable: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            trainable: self.trainable,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            trainable: true,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            velocity: None,
            second_moment: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.zero_grad();
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        !self.params.is_empty() && self.params.iter().all(|p| p.grad.is_some())
    }

    /// Add the gradients recorded for this store's parameters in `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        if !graph.backward_done {
            return Err(Error::state("backward has not been run on this graph"));
        }
        for (node, grad) in graph.nodes.iter().zip(&graph.grads) {
            if let Op::Param { store, index } = node.op {
                if store != self.id {
                    continue;
                }
                if let Some(g) = grad {
                    let slot = &mut self.params[index].grad;
                    match slot {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u32, index: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Upsample2x(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Decode { x: Var, spec: MappingSpec },
    Sum(Var),
    WeightedSum { x: Var, weights: Tensor },
    L1 { a: Var, b: Var },
    Margin { emb: Var, w: Var, labels: Vec<usize>, cfg: MarginConfig },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let value = store.params[index].value.clone();
        self.push(
            value,
            Op::Param {
                store: store.id,
                index,
            },
            store.trainable,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::invalid(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        Tensor::new(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a * s).collect())
            .expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x_forward(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::avgpool2_forward(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPool2(x), ng))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avgpool_forward(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Batched codec decode `(B, C, H, W) → (B, 3, H, W)`.
    pub fn decode(&mut self, x: Var, spec: MappingSpec) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let n = c * h * w;
        let mut data = Vec::with_capacity(b * 3 * h * w);
        for i in 0..b {
            let rep = HighDimRep::new(c, h, w, v.data()[i * n..(i + 1) * n].to_vec())?;
            data.extend_from_slice(codec::decode(&rep, &spec)?.data());
        }
        let out = Tensor::new(&[b, 3, h, w], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Decode { x, spec }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    /// `Σ x ⊙ weights` (scalar); projects tensor outputs for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != weights.shape() {
            return Err(Error::invalid(format!(
                "weights {:?} do not match {:?}",
                weights.shape(),
                v.shape()
            )));
        }
        let s: f64 = v.data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum { x, weights }, ng))
    }

    /// Mean absolute difference (scalar).
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::l1_forward(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(v), Op::L1 { a, b }, ng))
    }

    /// Margin softmax cross-entropy of `emb: (B, d)` against class weights `w: (n, d)`.
    pub fn margin_loss(&mut self, emb: Var, w: Var, labels: &[usize], cfg: MarginConfig) -> Result<Var> {
        let v = arcface_value(self.value(emb), self.value(w), labels, &cfg)?;
        let ng = self.needs(emb) || self.needs(w);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Margin {
                emb,
                w,
                labels: labels.to_vec(),
                cfg,
            },
            ng,
        ))
    }

    /// Populate gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::state("backward called without a recorded forward pass"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: Vec<f32>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
                slot => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, stride } => {
                let gt = Tensor::new(nodes[i].value.shape(), g.to_vec())?;
                let (dx, dw, db) = ops::conv2d_backward(
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    &gt,
                    *stride,
                    nodes[x.0].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Upsample2x(x) => acc(*x, ops::upsample2x_backward(nodes[x.0].value.shape(), g)),
            Op::AvgPool2(x) => acc(*x, ops::avgpool2_backward(nodes[x.0].value.shape(), g)),
            Op::GlobalAvgPool(x) => {
                acc(*x, ops::global_avgpool_backward(nodes[x.0].value.shape(), g))
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(&nodes[x.0].value, &nodes[w.0].value, g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Decode { x, spec } => {
                let [b, c, h, w] = nodes[x.0].value.dims4()?;
                let n = 3 * h * w;
                let mut dx = Vec::with_capacity(b * c * h * w);
                for s in 0..b {
                    let gimg = Planes::new(3, h, w, g[s * n..(s + 1) * n].to_vec())?;
                    dx.extend_from_slice(codec::decode_adjoint(&gimg, spec)?.data());
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.0].value.len()]),
            Op::WeightedSum { x, weights } => acc(*x, weights.data().iter().map(|w| w * g[0]).collect()),
            Op::L1 { a, b } => {
                let da = ops::l1_backward(&nodes[a.0].value, &nodes[b.0].value, g[0]);
                let db = da.iter().map(|v| -v).collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::Margin {
                emb,
                w,
                labels,
                cfg,
            } => {
                let (de, dw) =
                    arcface_backward(&nodes[emb.0].value, &nodes[w.0].value, labels, cfg, g[0])?;
                acc(*emb, de);
                acc(*w, dw);
            }
        }
        Ok(())
    }
}
