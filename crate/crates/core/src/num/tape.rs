use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::tensor::{NodeId, Tensor};
use super::LEAKY_SLOPE;
use crate::fmath;
use crate::{Error, Result};

/// Clamp applied to probabilities inside the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-12;

type BackwardOp = Box<dyn FnOnce(&mut GradBufs)>;

/// Reverse-mode gradient tape.
///
/// Operations record a backward closure only when at least one input is
/// watched, so the same forward code serves both training and plain
/// evaluation (evaluation simply never calls [`GradTape::watch`]). The tape
/// is single-threaded; use one tape per training step. Backward replays the
/// recorded closures in reverse, which is reverse topological order because
/// recording order is creation order.
pub struct GradTape {
    next_node: usize,
    ops: Vec<BackwardOp>,
}

pub(crate) struct GradBufs {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBufs {
    fn accumulate(&mut self, id: NodeId, src: &[f64]) {
        match &mut self.slots[id.0] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), src.len());
                for (b, s) in buf.iter_mut().zip(src) {
                    *b += s;
                }
            }
            None => self.slots[id.0] = Some(src.to_vec()),
        }
    }

    fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.slots[id.0].take()
    }
}

/// Gradients left in place after [`GradTape::backward`].
pub struct GradStore {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    /// Gradient of the loss with respect to a watched tensor.
    ///
    /// Tensors the loss never depended on get an exact zero gradient.
    pub fn grad(&self, watched: &Tensor) -> Result<Tensor> {
        let id = watched
            .node()
            .ok_or_else(|| Error::config("grad requested for a tensor that was never watched"))?;
        match &self.slots[id.0] {
            Some(buf) => Ok(Tensor::from_parts(watched.shape().to_vec(), buf.clone())),
            None => Ok(Tensor::zeros(watched.shape())),
        }
    }
}

#[inline]
fn debug_finite(_op: &'static str, _t: &Tensor) {
    #[cfg(debug_assertions)]
    debug_assert!(_t.all_finite(), "non-finite values produced by {}", _op);
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { next_node: 0, ops: Vec::new() }
    }

    fn fresh(&mut self) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        id
    }

    /// Register a tensor as a differentiable leaf and return the handle to
    /// use in subsequent operations.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let mut out = t.detach();
        out.node = Some(self.fresh());
        out
    }

    /// Run the backward pass from a scalar loss and return the gradients.
    pub fn backward(mut self, loss: &Tensor) -> Result<GradStore> {
        let id = loss
            .node()
            .ok_or_else(|| Error::config("backward requires a loss computed from watched inputs"))?;
        if loss.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", loss.shape())));
        }
        let mut bufs = GradBufs { slots: vec![None; self.next_node] };
        bufs.slots[id.0] = Some(vec![1.0]);
        for op in self.ops.drain(..).rev() {
            op(&mut bufs);
        }
        Ok(GradStore { slots: bufs.slots })
    }

    // ----- linear algebra -------------------------------------------------

    /// `a (m x k) . b (k x n)`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} . {k2}x{n}")));
        }
        let mut out = Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        debug_finite("matmul", &out);
        if a.node().is_some() || b.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (an, bn) = (a.node(), b.node());
            let (ad, bd) = (a.data_arc(), b.data_arc());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(an) = an {
                    g.accumulate(an, &kernels::matmul_bt(&gout, &bd, m, n, k));
                }
                if let Some(bn) = bn {
                    g.accumulate(bn, &kernels::matmul_tn(&ad, &gout, m, k, n));
                }
            }));
        }
        Ok(out)
    }

    /// `a (m x k) . b^T` with `b` stored `n x k`.
    pub fn matmul_bt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("{m}x{k} . ({n}x{k2})^T")));
        }
        let mut out = Tensor::from_parts(vec![m, n], kernels::matmul_bt(a.data(), b.data(), m, k, n));
        debug_finite("matmul_bt", &out);
        if a.node().is_some() || b.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (an, bn) = (a.node(), b.node());
            let (ad, bd) = (a.data_arc(), b.data_arc());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(an) = an {
                    // da = g . b
                    g.accumulate(an, &kernels::matmul(&gout, &bd, m, n, k));
                }
                if let Some(bn) = bn {
                    // db = g^T . a
                    g.accumulate(bn, &kernels::matmul_tn(&gout, &ad, m, n, k));
                }
            }));
        }
        Ok(out)
    }

    /// Row-restricted product: `out[i, :] = x[i, :] . w` for `i` in `idx`,
    /// zero rows elsewhere.
    pub fn matmul_masked_rows(&mut self, x: &Tensor, w: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, k) = x.dims2()?;
        let (k2, n) = w.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_masked_rows", format!("{r}x{k} . {k2}x{n}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("matmul_masked_rows", format!("row {bad} out of {r}")));
        }
        let xd = x.data();
        let wd = w.data();
        let mut data = vec![0.0; r * n];
        for &i in idx {
            let xrow = &xd[i * k..(i + 1) * k];
            let orow = &mut data[i * n..(i + 1) * n];
            for (kk, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(&wd[kk * n..(kk + 1) * n]) {
                    *o += xv * wv;
                }
            }
        }
        let mut out = Tensor::from_parts(vec![r, n], data);
        debug_finite("matmul_masked_rows", &out);
        if x.node().is_some() || w.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (xn, wn) = (x.node(), w.node());
            let (xd, wd) = (x.data_arc(), w.data_arc());
            let idx: Vec<usize> = idx.to_vec();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(xn) = xn {
                    let mut dx = vec![0.0; r * k];
                    for &i in &idx {
                        let grow = &gout[i * n..(i + 1) * n];
                        let drow = &mut dx[i * k..(i + 1) * k];
                        for (kk, dv) in drow.iter_mut().enumerate() {
                            *dv = grow.iter().zip(&wd[kk * n..(kk + 1) * n]).map(|(a, b)| a * b).sum();
                        }
                    }
                    g.accumulate(xn, &dx);
                }
                if let Some(wn) = wn {
                    let mut dw = vec![0.0; k * n];
                    for &i in &idx {
                        let xrow = &xd[i * k..(i + 1) * k];
                        let grow = &gout[i * n..(i + 1) * n];
                        for (kk, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &gv) in dw[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    g.accumulate(wn, &dw);
                }
            }));
        }
        Ok(out)
    }

    /// `out = a[:, idx] . x[idx, :]` for a constant square matrix `a`.
    ///
    /// This is the memory-optimized neighborhood aggregation primitive: it
    /// evaluates `a . (mask * x)` where `idx` lists the set rows of the
    /// mask, touching only `d x s` buffers. No gradient flows to `a`.
    pub fn graph_aggregate(&mut self, a: &Tensor, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (d, d2) = a.dims2()?;
        let (r, s) = x.dims2()?;
        if d != d2 || r != d {
            return Err(Error::shape("graph_aggregate", format!("a {d}x{d2}, x {r}x{s}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(Error::shape("graph_aggregate", format!("row {bad} out of {d}")));
        }
        debug_assert!(a.node().is_none(), "graph_aggregate treats `a` as constant");
        let mut out = Tensor::from_parts(
            vec![d, s],
            kernels::col_select_matmul(a.data(), x.data(), d, s, idx),
        );
        debug_finite("graph_aggregate", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let ad = a.data_arc();
            let idx: Vec<usize> = idx.to_vec();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                g.accumulate(xn, &kernels::col_select_matmul_grad(&ad, &gout, d, s, &idx));
            }));
        }
        Ok(out)
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let mut out = Tensor::from_parts(a.shape().to_vec(), data);
        debug_finite("add", &out);
        if a.node().is_some() || b.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (an, bn) = (a.node(), b.node());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(an) = an {
                    g.accumulate(an, &gout);
                }
                if let Some(bn) = bn {
                    g.accumulate(bn, &gout);
                }
            }));
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let mut out = Tensor::from_parts(a.shape().to_vec(), data);
        debug_finite("sub", &out);
        if a.node().is_some() || b.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (an, bn) = (a.node(), b.node());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(an) = an {
                    g.accumulate(an, &gout);
                }
                if let Some(bn) = bn {
                    let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                    g.accumulate(bn, &neg);
                }
            }));
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let mut out = Tensor::from_parts(a.shape().to_vec(), data);
        debug_finite("mul", &out);
        if a.node().is_some() || b.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (an, bn) = (a.node(), b.node());
            let (ad, bd) = (a.data_arc(), b.data_arc());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(an) = an {
                    let da: Vec<f64> = gout.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                    g.accumulate(an, &da);
                }
                if let Some(bn) = bn {
                    let db: Vec<f64> = gout.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                    g.accumulate(bn, &db);
                }
            }));
        }
        Ok(out)
    }

    /// Row selection by a 0/1 mask: rows where `mask` is false become zero.
    ///
    /// For a 2-D `x` the mask has one entry per row (broadcast across
    /// columns); a 1-D `x` is masked entrywise.
    pub fn mask_rows(&mut self, x: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let (rows, cols) = match x.shape()[..] {
            [n] => (n, 1),
            [r, c] => (r, c),
            _ => return Err(Error::shape("mask_rows", format!("{:?}", x.shape()))),
        };
        if mask.len() != rows {
            return Err(Error::shape("mask_rows", format!("mask {} vs rows {rows}", mask.len())));
        }
        let xd = x.data();
        let mut data = vec![0.0; rows * cols];
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                data[i * cols..(i + 1) * cols].copy_from_slice(&xd[i * cols..(i + 1) * cols]);
            }
        }
        let mut out = Tensor::from_parts(x.shape().to_vec(), data);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let mask: Vec<bool> = mask.to_vec();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let mut dx = vec![0.0; rows * cols];
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        dx[i * cols..(i + 1) * cols].copy_from_slice(&gout[i * cols..(i + 1) * cols]);
                    }
                }
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Broadcast a bias row over every row of `x`.
    pub fn add_row(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let n = bias.dim1()?;
        if n != c {
            return Err(Error::shape("add_row", format!("bias {n} vs cols {c}")));
        }
        let bd = bias.data();
        let mut data = Vec::with_capacity(r * c);
        for row in x.data().chunks_exact(c) {
            data.extend(row.iter().zip(bd).map(|(x, b)| x + b));
        }
        let mut out = Tensor::from_parts(vec![r, c], data);
        debug_finite("add_row", &out);
        if x.node().is_some() || bias.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (xn, bn) = (x.node(), bias.node());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(xn) = xn {
                    g.accumulate(xn, &gout);
                }
                if let Some(bn) = bn {
                    let mut db = vec![0.0; c];
                    for row in gout.chunks_exact(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    g.accumulate(bn, &db);
                }
            }));
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v * factor).collect();
        let mut out = Tensor::from_parts(x.shape().to_vec(), data);
        debug_finite("scale", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let dx: Vec<f64> = gout.iter().map(|v| v * factor).collect();
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    // ----- activations ----------------------------------------------------

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::from_parts(x.shape().to_vec(), kernels::sigmoid(x.data()));
        debug_finite("sigmoid", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let yd = out.data_arc();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let dx: Vec<f64> = gout.iter().zip(yd.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::from_parts(x.shape().to_vec(), kernels::tanh(x.data()));
        debug_finite("tanh", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let yd = out.data_arc();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let dx: Vec<f64> = gout.iter().zip(yd.iter()).map(|(g, y)| g * (1.0 - y * y)).collect();
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Leaky rectifier with negative slope [`LEAKY_SLOPE`].
    pub fn leaky_relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::from_parts(x.shape().to_vec(), kernels::leaky_relu(x.data(), LEAKY_SLOPE));
        debug_finite("leaky_relu", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let yd = out.data_arc();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(yd.iter())
                    .map(|(g, y)| if *y >= 0.0 { *g } else { g * LEAKY_SLOPE })
                    .collect();
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Softmax over each row of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        if c == 0 {
            return Err(Error::shape("softmax_rows", "zero columns"));
        }
        let mut data = x.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, r, c);
        let mut out = Tensor::from_parts(vec![r, c], data);
        debug_finite("softmax_rows", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let yd = out.data_arc();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &yd[row * c..(row + 1) * c];
                    let gs = &gout[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax_vec(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim1()?;
        if n == 0 {
            return Err(Error::shape("softmax_vec", "empty vector"));
        }
        let mut data = x.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, 1, n);
        let mut out = Tensor::from_parts(vec![n], data);
        debug_finite("softmax_vec", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let yd = out.data_arc();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let dot: f64 = yd.iter().zip(gout.iter()).map(|(y, g)| y * g).sum();
                let dx: Vec<f64> = yd.iter().zip(gout.iter()).map(|(y, g)| y * (g - dot)).collect();
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    // ----- row moves ------------------------------------------------------

    /// Copy the listed rows of `x` into a compact `idx.len() x c` tensor.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {r}")));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let mut out = Tensor::from_parts(vec![idx.len(), c], data);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let idx: Vec<usize> = idx.to_vec();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let mut dx = vec![0.0; r * c];
                for (pos, &i) in idx.iter().enumerate() {
                    for (d, &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&gout[pos * c..(pos + 1) * c]) {
                        *d += gv;
                    }
                }
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Spread the rows of a compact tensor back into `rows` positions:
    /// `out[idx[p], :] += x[p, :]`, zero elsewhere.
    pub fn scatter_rows(&mut self, x: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
        let (k, c) = x.dims2()?;
        if k != idx.len() {
            return Err(Error::shape("scatter_rows", format!("{k} rows vs {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_rows", format!("row {bad} out of {rows}")));
        }
        let xd = x.data();
        let mut data = vec![0.0; rows * c];
        for (pos, &i) in idx.iter().enumerate() {
            for (d, &xv) in data[i * c..(i + 1) * c].iter_mut().zip(&xd[pos * c..(pos + 1) * c]) {
                *d += xv;
            }
        }
        let mut out = Tensor::from_parts(vec![rows, c], data);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            let idx: Vec<usize> = idx.to_vec();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let mut dx = vec![0.0; k * c];
                for (pos, &i) in idx.iter().enumerate() {
                    dx[pos * c..(pos + 1) * c].copy_from_slice(&gout[i * c..(i + 1) * c]);
                }
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Columnwise maximum over all rows; gradient routes to the first
    /// maximal row of each column.
    pub fn max_pool_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        if r == 0 {
            return Err(Error::EmptyMask { op: "max_pool_rows" });
        }
        let xd = x.data();
        let mut values = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = xd[i * c + j];
                if v > values[j] {
                    values[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let mut out = Tensor::from_parts(vec![c], values);
        debug_finite("max_pool_rows", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let mut dx = vec![0.0; r * c];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * c + j] += gout[j];
                }
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    /// Stack 1-D tensors of equal length into a `len(vs) x c` matrix.
    pub fn stack_rows(&mut self, vs: &[Tensor]) -> Result<Tensor> {
        if vs.is_empty() {
            return Err(Error::shape("stack_rows", "no rows"));
        }
        let c = vs[0].dim1()?;
        let mut data = Vec::with_capacity(vs.len() * c);
        for v in vs {
            if v.dim1()? != c {
                return Err(Error::shape("stack_rows", "row lengths differ"));
            }
            data.extend_from_slice(v.data());
        }
        let mut out = Tensor::from_parts(vec![vs.len(), c], data);
        if vs.iter().any(|v| v.node().is_some()) {
            let id = self.fresh();
            out.node = Some(id);
            let nodes: Vec<Option<NodeId>> = vs.iter().map(|v| v.node()).collect();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                for (t, node) in nodes.iter().enumerate() {
                    if let Some(node) = node {
                        g.accumulate(*node, &gout[t * c..(t + 1) * c]);
                    }
                }
            }));
        }
        Ok(out)
    }

    // ----- matrix-vector --------------------------------------------------

    /// `a (r x c) . v (c)` giving a length-`r` vector.
    pub fn mat_vec(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let n = v.dim1()?;
        if n != c {
            return Err(Error::shape("mat_vec", format!("{r}x{c} . {n}")));
        }
        let ad = a.data();
        let vd = v.data();
        let data: Vec<f64> = (0..r)
            .map(|i| ad[i * c..(i + 1) * c].iter().zip(vd).map(|(a, v)| a * v).sum())
            .collect();
        let mut out = Tensor::from_parts(vec![r], data);
        debug_finite("mat_vec", &out);
        if a.node().is_some() || v.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (an, vn) = (a.node(), v.node());
            let (ad, vd) = (a.data_arc(), v.data_arc());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(an) = an {
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = gout[i] * vd[j];
                        }
                    }
                    g.accumulate(an, &da);
                }
                if let Some(vn) = vn {
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        for (d, &av) in dv.iter_mut().zip(&ad[i * c..(i + 1) * c]) {
                            *d += gout[i] * av;
                        }
                    }
                    g.accumulate(vn, &dv);
                }
            }));
        }
        Ok(out)
    }

    /// `v (k) . a (k x n)` giving a length-`n` vector.
    pub fn vec_mat(&mut self, v: &Tensor, a: &Tensor) -> Result<Tensor> {
        let k = v.dim1()?;
        let (k2, n) = a.dims2()?;
        if k != k2 {
            return Err(Error::shape("vec_mat", format!("{k} . {k2}x{n}")));
        }
        let ad = a.data();
        let vd = v.data();
        let mut data = vec![0.0; n];
        for (kk, &vv) in vd.iter().enumerate() {
            if vv == 0.0 {
                continue;
            }
            for (d, &av) in data.iter_mut().zip(&ad[kk * n..(kk + 1) * n]) {
                *d += vv * av;
            }
        }
        let mut out = Tensor::from_parts(vec![n], data);
        debug_finite("vec_mat", &out);
        if v.node().is_some() || a.node().is_some() {
            let id = self.fresh();
            out.node = Some(id);
            let (vn, an) = (v.node(), a.node());
            let (vd, ad) = (v.data_arc(), a.data_arc());
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                if let Some(vn) = vn {
                    let dv: Vec<f64> = (0..k)
                        .map(|kk| ad[kk * n..(kk + 1) * n].iter().zip(&gout).map(|(a, g)| a * g).sum())
                        .collect();
                    g.accumulate(vn, &dv);
                }
                if let Some(an) = an {
                    let mut da = vec![0.0; k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            da[kk * n + j] = vd[kk] * gout[j];
                        }
                    }
                    g.accumulate(an, &da);
                }
            }));
        }
        Ok(out)
    }

    /// Columnwise sum over all rows, giving a length-`c` vector.
    pub fn sum_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let xd = x.data();
        let mut data = vec![0.0; c];
        for row in xd.chunks_exact(c) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let mut out = Tensor::from_parts(vec![c], data);
        debug_finite("sum_rows", &out);
        if let Some(xn) = x.node() {
            let id = self.fresh();
            out.node = Some(id);
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let mut dx = vec![0.0; r * c];
                for row in dx.chunks_exact_mut(c) {
                    row.copy_from_slice(&gout);
                }
                g.accumulate(xn, &dx);
            }));
        }
        Ok(out)
    }

    // ----- loss -----------------------------------------------------------

    /// Mean binary cross-entropy between probabilities and 0/1 labels.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
    /// logs; the clamp has zero slope outside that range.
    pub fn bce_loss(&mut self, probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
        check_same_shape("bce_loss", probs, labels)?;
        let n = probs.numel();
        if n == 0 {
            return Err(Error::shape("bce_loss", "empty input"));
        }
        let clamp = |p: f64| p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let mut total = 0.0;
        for (&p, &y) in probs.data().iter().zip(labels.data()) {
            let pc = clamp(p);
            total -= y * fmath::ln(pc) + (1.0 - y) * fmath::ln(1.0 - pc);
        }
        let mut out = Tensor::vector(vec![total / n as f64]);
        debug_finite("bce_loss", &out);
        if let Some(pn) = probs.node() {
            let id = self.fresh();
            out.node = Some(id);
            let pd = probs.data_arc();
            let yd = labels.data_arc();
            self.ops.push(Box::new(move |g| {
                let Some(gout) = g.take(id) else { return };
                let gs = gout[0] / n as f64;
                let dx: Vec<f64> = pd
                    .iter()
                    .zip(yd.iter())
                    .map(|(&p, &y)| {
                        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            gs * (p - y) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                g.accumulate(pn, &dx);
            }));
        }
        Ok(out)
    }
}
