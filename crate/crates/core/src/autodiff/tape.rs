use std::sync::atomic::{AtomicU64, Ordering};

use super::{cosine_kernel, mean_kernel, normalize_kernel, sigmoid, softmax_ce_kernel, Graph};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Contract {
        a: usize,
        b: usize,
        axes: Vec<(usize, usize)>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Reshape(usize),
    Tanh(usize),
    Sigmoid(usize),
    Mean(usize),
    Normalize {
        a: usize,
        norms: Vec<f64>,
    },
    Cosine {
        a: usize,
        b: usize,
        raw: Vec<f64>,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    // true when some trainable leaf is upstream of this node
    needs_grad: bool,
}

/// Append-only record of tensor operations, in creation order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is not a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: &Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedNode);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Propagates `d loss / d node` from `loss` back to every trainable leaf.
    ///
    /// Nodes are visited in exact reverse creation order and contributions
    /// from multiple consumers are summed, so the result is deterministic.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(&loss)?;
        let loss_value = &self.nodes[root].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(loss_value.dims(), 1.0)?);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.vjp(node, &g)?;
            for (parent, pg) in contributions {
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
            if node.trainable {
                grads[i] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Contract { a, b, axes } => {
                let (ga, gb) = contract_vjp(val(*a), val(*b), axes, g, self.wants(*a), self.wants(*b))?;
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                }
                if self.wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.scale(*f))),
            Op::Reshape(a) => out.push((*a, g.reshape(val(*a).dims())?)),
            Op::Tanh(a) => out.push((*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?)),
            Op::Sigmoid(a) => out.push((*a, g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))?)),
            Op::Mean(a) => {
                let src = val(*a);
                let each = g.data()[0] / src.len() as f64;
                out.push((*a, Tensor::full(src.dims(), each)?));
            }
            Op::Normalize { a, norms } => {
                let y = &node.value;
                let width = y.dims()[y.rank() - 1];
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), n) in y.data().chunks(width).zip(g.data().chunks(width)).zip(norms) {
                    let proj = tensor::dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * proj) / n));
                }
                out.push((*a, Tensor::from_vec(y.dims(), d)?));
            }
            Op::Cosine {
                a,
                b,
                raw,
                norms_a,
                norms_b,
            } => {
                let (ua, ub) = (val(*a), val(*b));
                let width = ua.dims()[ua.rank() - 1];
                let rows = ua.data().chunks(width).zip(ub.data().chunks(width));
                let mut da = Vec::with_capacity(ua.len());
                let mut db = Vec::with_capacity(ub.len());
                for (k, (ra, rb)) in rows.enumerate() {
                    let (na, nb, c, gk) = (norms_a[k], norms_b[k], raw[k], g.data()[k]);
                    for (x, y) in ra.iter().zip(rb) {
                        da.push(gk * (y / (na * nb) - c * x / (na * na)));
                        db.push(gk * (x / (na * nb) - c * y / (nb * nb)));
                    }
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::from_vec(ua.dims(), da)?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::from_vec(ub.dims(), db)?));
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let classes = probs.dims()[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * classes + y] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= scale);
                out.push((*logits, Tensor::from_vec(probs.dims(), d)?));
            }
        }
        Ok(out)
    }
}

// Position of each element of `wanted` inside `list`.
fn positions(list: &[usize], rank: usize) -> Vec<usize> {
    (0..rank)
        .map(|axis| list.iter().position(|&x| x == axis).expect("axis present"))
        .collect()
}

fn contract_vjp(
    a: &Tensor,
    b: &Tensor,
    axes: &[(usize, usize)],
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (ra, rb) = (a.rank(), b.rank());
    let free_a: Vec<usize> = (0..ra).filter(|i| !axes.iter().any(|p| p.0 == *i)).collect();
    let free_b: Vec<usize> = (0..rb).filter(|i| !axes.iter().any(|p| p.1 == *i)).collect();
    let nfa = free_a.len();

    let ga = if want_a {
        // g (free_a, free_b) · b over free_b -> (free_a, contracted axes of b ascending)
        let pairs: Vec<(usize, usize)> = free_b.iter().enumerate().map(|(k, &fb)| (nfa + k, fb)).collect();
        let raw = tensor::contract(g, b, &pairs)?;
        let mut cb: Vec<(usize, usize)> = axes.iter().map(|&(x, y)| (y, x)).collect();
        cb.sort_unstable();
        let layout: Vec<usize> = free_a.iter().copied().chain(cb.iter().map(|p| p.1)).collect();
        Some(raw.permute(&positions(&layout, ra))?)
    } else {
        None
    };
    let gb = if want_b {
        // a · g over free_a -> (contracted axes of a ascending, free_b)
        let pairs: Vec<(usize, usize)> = free_a.iter().enumerate().map(|(k, &fa)| (fa, k)).collect();
        let raw = tensor::contract(a, g, &pairs)?;
        let mut ca: Vec<(usize, usize)> = axes.to_vec();
        ca.sort_unstable();
        let layout: Vec<usize> = ca.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
        Some(raw.permute(&positions(&layout, rb))?)
    } else {
        None
    };
    Ok((ga, gb))
}

impl Graph for Tape {
    type Value = Var;

    fn leaf(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    fn contract(&mut self, a: &Var, b: &Var, axes: &[(usize, usize)]) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::contract(&self.nodes[ia].value, &self.nodes[ib].value, axes)?;
        Ok(self.push(
            v,
            Op::Contract {
                a: ia,
                b: ib,
                axes: axes.to_vec(),
            },
            &[ia, ib],
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Add(ia, ib), &[ia, ib]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ia, ib), &[ia, ib]))
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.scale(factor);
        Ok(self.push(v, Op::Scale(ia, factor), &[ia]))
    }

    fn reshape(&mut self, a: &Var, dims: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.reshape(dims)?;
        Ok(self.push(v, Op::Reshape(ia), &[ia]))
    }

    fn tanh(&mut self, a: &Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(v, Op::Tanh(ia), &[ia]))
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(ia), &[ia]))
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = mean_kernel(&self.nodes[ia].value);
        Ok(self.push(v, Op::Mean(ia), &[ia]))
    }

    fn l2_normalize(&mut self, a: &Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (v, norms) = normalize_kernel(&self.nodes[ia].value)?;
        Ok(self.push(v, Op::Normalize { a: ia, norms }, &[ia]))
    }

    fn cosine_similarity(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let parts = cosine_kernel(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(
            parts.out,
            Op::Cosine {
                a: ia,
                b: ib,
                raw: parts.raw,
                norms_a: parts.norms_a,
                norms_b: parts.norms_b,
            },
            &[ia, ib],
        ))
    }

    fn softmax_cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (loss, probs) = softmax_ce_kernel(&self.nodes[il].value, labels)?;
        Ok(self.push(
            loss,
            Op::SoftmaxCe {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            &[il],
        ))
    }
}
