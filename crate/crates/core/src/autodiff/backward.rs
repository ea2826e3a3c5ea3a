use crate::autodiff::{sigmoid, Gradients, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{conv, Grid};

fn acc_grid(slot: &mut Option<Grid>, g: Grid) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g)?,
    });
    Ok(())
}

impl Tape {
    /// Nodes up to `loss` whose value depends on at least one var in `wrt`.
    fn relevant(&self, loss: Var, wrt: &[Var]) -> Vec<bool> {
        let mut rel = vec![false; loss.id + 1];
        for &w in wrt {
            self.check(w);
            if w.id <= loss.id {
                rel[w.id] = true;
            }
        }
        for id in 0..=loss.id {
            if !rel[id] {
                rel[id] = self.nodes[id].op.inputs().iter().any(|i| rel[i.id]);
            }
        }
        rel
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        self.check(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        Ok(())
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`, as grids.
    ///
    /// Each call starts from fresh accumulation slots, so repeated calls on
    /// the same tape return identical results. A `wrt` var the loss does not
    /// depend on gets a zero gradient and is listed in `unreachable`.
    pub fn gradients(&self, loss: Var, wrt: &[Var]) -> Result<Gradients<Grid>> {
        self.check_loss(loss)?;
        let rel = self.relevant(loss, wrt);
        let mut wanted = vec![false; loss.id + 1];
        for w in wrt {
            if w.id <= loss.id {
                wanted[w.id] = true;
            }
        }
        let mut grads: Vec<Option<Grid>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Grid::ones(self.shape(loss)));
        let mut kept: Vec<Option<Grid>> = vec![None; loss.id + 1];

        for id in (0..=loss.id).rev() {
            if !rel[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if wanted[id] {
                kept[id] = Some(g.clone());
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let inputs = node.op.inputs();
            let need: Vec<bool> = inputs.iter().map(|i| rel[i.id]).collect();
            let contrib = self.vjp(id, &g, &need)?;
            for (inp, c) in inputs.iter().zip(contrib) {
                if let Some(c) = c {
                    acc_grid(&mut grads[inp.id], c)?;
                }
            }
        }

        let mut values = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for (pos, w) in wrt.iter().enumerate() {
            match kept.get(w.id).and_then(|k| k.clone()) {
                Some(g) => values.push(g),
                None => {
                    values.push(Grid::zeros(self.shape(*w)));
                    unreachable.push(pos);
                }
            }
        }
        if !unreachable.is_empty() {
            log::warn!("{} gradient target(s) unreachable from loss", unreachable.len());
        }
        Ok(Gradients { values, unreachable })
    }

    /// Gradients recorded on the tape, so they can be differentiated again.
    pub fn gradients_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Gradients<Var>> {
        self.check_loss(loss)?;
        let rel = self.relevant(loss, wrt);
        let mut wanted = vec![false; loss.id + 1];
        for w in wrt {
            if w.id <= loss.id {
                wanted[w.id] = true;
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; loss.id + 1];
        let seed = Grid::ones(self.shape(loss));
        grads[loss.id] = Some(self.constant(seed));
        let mut kept: Vec<Option<Var>> = vec![None; loss.id + 1];

        for id in (0..=loss.id).rev() {
            if !rel[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if wanted[id] {
                kept[id] = Some(g);
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let inputs = op.inputs();
            let need: Vec<bool> = inputs.iter().map(|i| rel[i.id]).collect();
            let out = Var { tape: self.id, id };
            let contrib = self.vjp_graph(&op, out, g, &need)?;
            for (inp, c) in inputs.iter().zip(contrib) {
                if let Some(c) = c {
                    grads[inp.id] = Some(match grads[inp.id] {
                        None => c,
                        Some(prev) => self.add(prev, c)?,
                    });
                }
            }
        }

        let mut values = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for (pos, w) in wrt.iter().enumerate() {
            match kept.get(w.id).copied().flatten() {
                Some(g) => values.push(g),
                None => {
                    let z = Grid::zeros(self.shape(*w));
                    values.push(self.constant(z));
                    unreachable.push(pos);
                }
            }
        }
        if !unreachable.is_empty() {
            log::warn!("{} gradient target(s) unreachable from loss", unreachable.len());
        }
        Ok(Gradients { values, unreachable })
    }

    /// Vector-Jacobian product of node `id` on plain grids.
    fn vjp(&self, id: usize, g: &Grid, need: &[bool]) -> Result<Vec<Option<Grid>>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.id].value;
        let y = &node.value;
        let one = |f: &dyn Fn() -> Result<Grid>| -> Result<Vec<Option<Grid>>> {
            Ok(vec![if need[0] { Some(f()?) } else { None }])
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(..) => vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())],
            Op::Sub(..) => vec![need[0].then(|| g.clone()), need[1].then(|| g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                if need[0] { Some(g.mul(val(*b))?) } else { None },
                if need[1] { Some(g.mul(val(*a))?) } else { None },
            ],
            Op::Div(_, b) => {
                let bv = val(*b);
                vec![
                    if need[0] { Some(g.zip_map(bv, |gi, bi| gi / bi)?) } else { None },
                    if need[1] {
                        let t = g.zip_map(y, |gi, yi| -gi * yi)?;
                        Some(t.zip_map(bv, |ti, bi| ti / bi)?)
                    } else {
                        None
                    },
                ]
            }
            Op::Neg(_) => one(&|| Ok(g.scale(-1.0)))?,
            Op::AddScalar(_) => one(&|| Ok(g.clone()))?,
            Op::MulScalar(_, c) => one(&|| Ok(g.scale(*c)))?,
            Op::PowScalar(a, p) => {
                let p = *p;
                one(&|| g.zip_map(val(*a), |gi, ai| if p == 0.0 { 0.0 } else { gi * p * ai.powf(p - 1.0) }))?
            }
            Op::Scale(a, s) => vec![
                if need[0] { Some(g.scale(val(*s).item())) } else { None },
                if need[1] { Some(Grid::scalar(g.dot(val(*a))?)) } else { None },
            ],
            Op::Exp(_) => one(&|| g.mul(y))?,
            Op::Ln(a) => one(&|| g.zip_map(val(*a), |gi, ai| gi / ai))?,
            Op::Sigmoid(_) => one(&|| g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)))?,
            Op::Softplus(a) => one(&|| g.zip_map(val(*a), |gi, ai| gi * sigmoid(ai)))?,
            Op::Relu(a) => one(&|| g.zip_map(val(*a), |gi, ai| if ai > 0.0 { gi } else { 0.0 }))?,
            Op::Sum(a) => one(&|| Ok(Grid::full(val(*a).shape(), g.item())))?,
            Op::Expand(_) => one(&|| Ok(Grid::scalar(g.sum())))?,
            Op::SumRows(a) => one(&|| Ok(g.broadcast_rows(&val(*a).shape()[1..])))?,
            Op::BroadcastRows(_) => one(&|| Ok(g.sum_rows()))?,
            Op::SumAxis0(a) => one(&|| g.broadcast_axis0(val(*a).shape()[0]).reshape(val(*a).shape()))?,
            Op::BroadcastAxis0(a) => one(&|| g.sum_axis0().reshape(val(*a).shape()))?,
            Op::MatMul(a, b) => vec![
                if need[0] { Some(g.matmul(&val(*b).transpose()?)?) } else { None },
                if need[1] { Some(val(*a).transpose()?.matmul(g)?) } else { None },
            ],
            Op::Transpose(_) => one(&|| g.transpose())?,
            Op::Softmax0(_) => one(&|| Ok(softmax0_vjp(y, g)))?,
            Op::Concat0(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for (p, &n) in parts.iter().zip(need) {
                    let len = val(*p).shape()[0];
                    out.push(if n { Some(g.slice0(start, len)?) } else { None });
                    start += len;
                }
                out
            }
            Op::Slice0(a, start) => one(&|| {
                let src = val(*a);
                let inner = src.len() / src.shape()[0];
                let mut data = vec![0.0; src.len()];
                data[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                Ok(Grid::from_parts(src.shape().to_vec(), data))
            })?,
            Op::Pad0(a, start) => one(&|| g.slice0(*start, val(*a).shape()[0]))?,
            Op::Reshape(a) => one(&|| g.reshape(val(*a).shape()))?,
            Op::Conv2d(x, k) => {
                let kv = val(*k);
                vec![
                    if need[0] { Some(conv::conv2d_input_grad(g, kv)?) } else { None },
                    if need[1] {
                        let s = kv.shape();
                        Some(conv::conv2d_kernel_grad(g, val(*x), s[2], s[3])?)
                    } else {
                        None
                    },
                ]
            }
            Op::MaxPool2(x, idx) => one(&|| Ok(conv::maxpool2_backward(g, idx, val(*x).shape())))?,
            Op::Upsample2(_) => one(&|| conv::upsample2_backward(g))?,
        })
    }

    /// Vector-Jacobian product recorded as tape operations.
    fn vjp_graph(&mut self, op: &Op, y: Var, g: Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
        let n0 = need.first().copied().unwrap_or(false);
        let n1 = need.get(1).copied().unwrap_or(false);
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(..) => vec![n0.then_some(g), n1.then_some(g)],
            Op::Sub(..) => vec![n0.then_some(g), if n1 { Some(self.neg(g)) } else { None }],
            Op::Mul(a, b) => vec![
                if n0 { Some(self.mul(g, *b)?) } else { None },
                if n1 { Some(self.mul(g, *a)?) } else { None },
            ],
            Op::Div(_, b) => vec![
                if n0 { Some(self.div(g, *b)?) } else { None },
                if n1 {
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, *b)?;
                    Some(self.neg(q))
                } else {
                    None
                },
            ],
            Op::Neg(_) => vec![Some(self.neg(g))],
            Op::AddScalar(_) => vec![Some(g)],
            Op::MulScalar(_, c) => vec![Some(self.mul_scalar(g, *c))],
            Op::PowScalar(a, p) => {
                if *p == 0.0 {
                    let z = Grid::zeros(self.shape(*a));
                    vec![Some(self.constant(z))]
                } else {
                    let d = self.powf(*a, p - 1.0);
                    let d = self.mul_scalar(d, *p);
                    vec![Some(self.mul(g, d)?)]
                }
            }
            Op::Scale(a, s) => vec![
                if n0 { Some(self.scale(g, *s)?) } else { None },
                if n1 {
                    let ga = self.mul(g, *a)?;
                    Some(self.sum(ga))
                } else {
                    None
                },
            ],
            Op::Exp(_) => vec![Some(self.mul(g, y)?)],
            Op::Ln(a) => vec![Some(self.div(g, *a)?)],
            Op::Sigmoid(_) => {
                let ny = self.neg(y);
                let one_minus = self.add_scalar(ny, 1.0);
                let d = self.mul(y, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(*a);
                vec![Some(self.mul(g, s)?)]
            }
            Op::Relu(a) => {
                let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                vec![Some(self.mul(g, m)?)]
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                vec![Some(self.expand(g, &shape)?)]
            }
            Op::Expand(_) => vec![Some(self.sum(g))],
            Op::SumRows(a) => {
                let trailing = self.shape(*a)[1..].to_vec();
                vec![Some(self.broadcast_rows(g, &trailing)?)]
            }
            Op::BroadcastRows(_) => vec![Some(self.sum_rows(g))],
            Op::SumAxis0(a) => {
                let shape = self.shape(*a).to_vec();
                let b = self.broadcast_axis0(g, shape[0]);
                vec![Some(self.reshape(b, &shape)?)]
            }
            Op::BroadcastAxis0(a) => {
                let shape = self.shape(*a).to_vec();
                let s = self.sum_axis0(g);
                vec![Some(self.reshape(s, &shape)?)]
            }
            Op::MatMul(a, b) => vec![
                if n0 {
                    let bt = self.transpose(*b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                },
                if n1 {
                    let at = self.transpose(*a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                },
            ],
            Op::Transpose(_) => vec![Some(self.transpose(g)?)],
            Op::Softmax0(_) => {
                let lead = self.shape(y)[0];
                let shape = self.shape(y).to_vec();
                let t = self.mul(y, g)?;
                let s = self.sum_axis0(t);
                let bs = self.broadcast_axis0(s, lead);
                let bs = self.reshape(bs, &shape)?;
                let ys = self.mul(y, bs)?;
                vec![Some(self.sub(t, ys)?)]
            }
            Op::Concat0(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for (p, &n) in parts.iter().zip(need) {
                    let len = self.shape(*p)[0];
                    out.push(if n { Some(self.slice0(g, start, len)?) } else { None });
                    start += len;
                }
                out
            }
            Op::Slice0(a, start) => {
                let total = self.shape(*a)[0];
                vec![Some(self.pad0(g, *start, total)?)]
            }
            Op::Pad0(a, start) => {
                let len = self.shape(*a)[0];
                vec![Some(self.slice0(g, *start, len)?)]
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Op::Conv2d(..) | Op::MaxPool2(..) | Op::Upsample2(..) => {
                return Err(Error::Autodiff(format!(
                    "{} has no second-order support; use the finite-difference path",
                    op.name()
                )))
            }
        })
    }
}

fn softmax0_vjp(y: &Grid, g: &Grid) -> Grid {
    let lead = y.shape()[0];
    let inner = y.len() / lead;
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; y.len()];
    for i in 0..inner {
        let mut s = 0.0;
        for c in 0..lead {
            s += yd[c * inner + i] * gd[c * inner + i];
        }
        for c in 0..lead {
            let j = c * inner + i;
            out[j] = yd[j] * (gd[j] - s);
        }
    }
    Grid::from_parts(y.shape().to_vec(), out)
}
