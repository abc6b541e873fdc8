//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every tensor of one forward pass. Operations return
//! [`Var`] handles and record a backward closure; [`Tape::backward`] replays
//! the closures in reverse order and accumulates gradients into the tensors'
//! `grad` buffers. Repeated backward calls without zeroing keep accumulating.

use rand::Rng;

use super::ops;
use super::{AttnMask, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient scratch buffers used while a backward pass runs.
pub struct Grads<S> {
    bufs: Vec<Option<Vec<S>>>,
    active: Vec<bool>,
    sizes: Vec<usize>,
}

impl<S: Scalar> Grads<S> {
    fn add(&mut self, idx: usize, contribution: &[S]) {
        if !self.active[idx] {
            return;
        }
        let buf = self.bufs[idx].get_or_insert_with(|| vec![S::zero(); self.sizes[idx]]);
        debug_assert_eq!(buf.len(), contribution.len());
        for (b, c) in buf.iter_mut().zip(contribution) {
            *b += *c;
        }
    }

    fn add_at(&mut self, idx: usize, flat: usize, contribution: S) {
        if !self.active[idx] {
            return;
        }
        let buf = self.bufs[idx].get_or_insert_with(|| vec![S::zero(); self.sizes[idx]]);
        buf[flat] += contribution;
    }
}

type BackFn<S> = Box<dyn Fn(&[S], &[Tensor<S>], &mut Grads<S>)>;

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    backs: Vec<Option<BackFn<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backs: Vec::new(),
        }
    }

    fn push(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(t);
        self.backs.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, v: Var, f: BackFn<S>) {
        self.backs[v.0] = Some(f);
    }

    /// Introduces a tensor; its `requires_grad` flag is respected.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t)
    }

    /// Introduces a tensor that will never need a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.with_grad(false))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[S] {
        self.nodes[v.0].data()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad()
    }

    pub fn zero_grad(&mut self, v: Var) {
        self.nodes[v.0].zero_grad();
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.nodes[a.0].dims2()?;
        let (kb, n) = self.nodes[b.0].dims2()?;
        if ka != kb {
            return Err(TensorError::MatmulMismatch {
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        let k = ka;
        let data = ops::matmul(self.nodes[a.0].data(), self.nodes[b.0].data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Tensor::new(vec![m, n], data)?.with_grad(rg));
        if rg {
            let (ai, bi) = (a.0, b.0);
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    grads.add(ai, &ops::matmul_nt(g, nodes[bi].data(), m, n, k));
                    grads.add(bi, &ops::matmul_tn(nodes[ai].data(), g, m, k, n));
                }),
            );
        }
        Ok(out)
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.nodes[a.0].dims2()?;
        let (n, kb) = self.nodes[b.0].dims2()?;
        if ka != kb {
            return Err(TensorError::MatmulMismatch {
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        let k = ka;
        let data = ops::matmul_nt(self.nodes[a.0].data(), self.nodes[b.0].data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Tensor::new(vec![m, n], data)?.with_grad(rg));
        if rg {
            let (ai, bi) = (a.0, b.0);
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    grads.add(ai, &ops::matmul(g, nodes[bi].data(), m, n, k));
                    grads.add(bi, &ops::matmul_tn(g, nodes[ai].data(), m, n, k));
                }),
            );
        }
        Ok(out)
    }

    /// Element-wise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(TensorError::ShapeMismatch {
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        let data: Vec<S> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Tensor::new(shape, data)?.with_grad(rg));
        if rg {
            let (ai, bi) = (a.0, b.0);
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    grads.add(ai, g);
                    grads.add(bi, g);
                }),
            );
        }
        Ok(out)
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.nodes[x.0].dims2()?;
        let bn = self.nodes[bias.0].dims1()?;
        if bn != n {
            return Err(TensorError::ShapeMismatch {
                lhs: self.nodes[x.0].shape().to_vec(),
                rhs: self.nodes[bias.0].shape().to_vec(),
            });
        }
        let mut data = self.nodes[x.0].data().to_vec();
        let b = self.nodes[bias.0].data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b[j];
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        let out = self.push(Tensor::new(vec![m, n], data)?.with_grad(rg));
        if rg {
            let (xi, bi) = (x.0, bias.0);
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    grads.add(xi, g);
                    let mut db = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    grads.add(bi, &db);
                }),
            );
        }
        Ok(out)
    }

    /// Element-wise product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(TensorError::ShapeMismatch {
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        let data: Vec<S> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.nodes[a.0].shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        let out = self.push(Tensor::new(shape, data)?.with_grad(rg));
        if rg {
            let (ai, bi) = (a.0, b.0);
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    let da: Vec<S> = g
                        .iter()
                        .zip(nodes[bi].data())
                        .map(|(gv, bv)| *gv * *bv)
                        .collect();
                    grads.add(ai, &da);
                    let db: Vec<S> = g
                        .iter()
                        .zip(nodes[ai].data())
                        .map(|(gv, av)| *gv * *av)
                        .collect();
                    grads.add(bi, &db);
                }),
            );
        }
        Ok(out)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::of_f64(c);
        let data: Vec<S> = self.nodes[x.0].data().iter().map(|v| *v * cs).collect();
        let shape = self.nodes[x.0].shape().to_vec();
        let rg = self.requires(x);
        let out = self.push(Tensor::new(shape, data).expect("scale shape").with_grad(rg));
        if rg {
            let xi = x.0;
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    let dx: Vec<S> = g.iter().map(|gv| *gv * cs).collect();
                    grads.add(xi, &dx);
                }),
            );
        }
        out
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].data().iter().copied().sum();
        let n = self.nodes[x.0].numel();
        let rg = self.requires(x);
        let out = self.push(Tensor::scalar(total).with_grad(rg));
        if rg {
            let xi = x.0;
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    grads.add(xi, &vec![g[0]; n]);
                }),
            );
        }
        out
    }

    /// Sum of several tensors of identical shape.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().expect("add_n needs at least one input");
        let mut acc = first;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Exact-form GELU, element-wise.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<S> = self.nodes[x.0].data().iter().map(|v| ops::gelu(*v)).collect();
        let shape = self.nodes[x.0].shape().to_vec();
        let rg = self.requires(x);
        let out = self.push(Tensor::new(shape, data).expect("gelu shape").with_grad(rg));
        if rg {
            let xi = x.0;
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(nodes[xi].data())
                        .map(|(gv, xv)| *gv * ops::gelu_derivative(*xv))
                        .collect();
                    grads.add(xi, &dx);
                }),
            );
        }
        out
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape().to_vec();
        let last = *shape.last().ok_or(TensorError::Rank {
            expected: 1,
            shape: shape.clone(),
        })?;
        if self.nodes[gain.0].dims1()? != last || self.nodes[bias.0].dims1()? != last {
            return Err(TensorError::ShapeMismatch {
                lhs: shape,
                rhs: self.nodes[gain.0].shape().to_vec(),
            });
        }
        let rows = self.nodes[x.0].numel() / last;
        let eps_s = S::of_f64(eps);
        let mut data = vec![S::zero(); rows * last];
        {
            let xd = self.nodes[x.0].data();
            let gd = self.nodes[gain.0].data();
            let bd = self.nodes[bias.0].data();
            for i in 0..rows {
                ops::layer_norm_row(
                    &xd[i * last..(i + 1) * last],
                    gd,
                    bd,
                    eps_s,
                    &mut data[i * last..(i + 1) * last],
                );
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        let out = self.push(Tensor::new(shape, data)?.with_grad(rg));
        if rg {
            let (xi, gi, bi) = (x.0, gain.0, bias.0);
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    let xd = nodes[xi].data();
                    let gd = nodes[gi].data();
                    let inv_n = S::one() / S::of_f64(last as f64);
                    let mut dgain = vec![S::zero(); last];
                    let mut dbias = vec![S::zero(); last];
                    let mut dx = vec![S::zero(); rows * last];
                    for i in 0..rows {
                        let xs = &xd[i * last..(i + 1) * last];
                        let gr = &g[i * last..(i + 1) * last];
                        let (mean, inv_std) = ops::layer_norm_stats(xs, eps_s);
                        let mut sum_gy = S::zero();
                        let mut sum_gyx = S::zero();
                        for j in 0..last {
                            let xhat = (xs[j] - mean) * inv_std;
                            let gy = gr[j] * gd[j];
                            sum_gy += gy;
                            sum_gyx += gy * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        let mean_gy = sum_gy * inv_n;
                        let mean_gyx = sum_gyx * inv_n;
                        for j in 0..last {
                            let xhat = (xs[j] - mean) * inv_std;
                            let gy = gr[j] * gd[j];
                            dx[i * last + j] = (gy - mean_gy - xhat * mean_gyx) * inv_std;
                        }
                    }
                    grads.add(xi, &dx);
                    grads.add(gi, &dgain);
                    grads.add(bi, &dbias);
                }),
            );
        }
        Ok(out)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let len = shape[axis];
        let mut data = vec![S::zero(); self.nodes[x.0].numel()];
        {
            let xd = self.nodes[x.0].data();
            let mut lane = vec![S::zero(); len];
            let mut soft = vec![S::zero(); len];
            ops::for_each_lane(&shape, axis, |idx| {
                for (t, &flat) in idx.iter().enumerate() {
                    lane[t] = xd[flat];
                }
                ops::softmax_row(&lane, &mut soft);
                for (t, &flat) in idx.iter().enumerate() {
                    data[flat] = soft[t];
                }
            });
        }
        let rg = self.requires(x);
        let out = self.push(Tensor::new(shape.clone(), data)?.with_grad(rg));
        if rg {
            let (xi, oi) = (x.0, out.0);
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    let yd = nodes[oi].data();
                    let mut dx = vec![S::zero(); yd.len()];
                    ops::for_each_lane(&shape, axis, |idx| {
                        let mut dot = S::zero();
                        for &flat in idx {
                            dot += g[flat] * yd[flat];
                        }
                        for &flat in idx {
                            dx[flat] = yd[flat] * (g[flat] - dot);
                        }
                    });
                    grads.add(xi, &dx);
                }),
            );
        }
        Ok(out)
    }

    /// Row-wise softmax of an `m x n` score matrix under an attention mask.
    /// Blocked entries come out exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &AttnMask) -> Result<Var, TensorError> {
        let (m, n) = self.nodes[x.0].dims2()?;
        if mask.q_len() != m || mask.k_len() != n {
            return Err(TensorError::MaskMismatch {
                mask: vec![mask.q_len(), mask.k_len()],
                scores: vec![m, n],
            });
        }
        let mut data = vec![S::zero(); m * n];
        {
            let xd = self.nodes[x.0].data();
            for i in 0..m {
                ops::softmax_row_masked(
                    &xd[i * n..(i + 1) * n],
                    Some(mask.row(i)),
                    &mut data[i * n..(i + 1) * n],
                );
            }
        }
        let rg = self.requires(x);
        let out = self.push(Tensor::new(vec![m, n], data)?.with_grad(rg));
        if rg {
            let (xi, oi) = (x.0, out.0);
            self.record(
                out,
                Box::new(move |g, nodes, grads| {
                    // Blocked entries have y = 0, so they drop out on their own.
                    let yd = nodes[oi].data();
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        let ys = &yd[i * n..(i + 1) * n];
                        let gs = &g[i * n..(i + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += gs[j] * ys[j];
                        }
                        for j in 0..n {
                            dx[i * n + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    grads.add(xi, &dx);
                }),
            );
        }
        Ok(out)
    }

    /// Inverted dropout. In evaluation mode (or at `p = 0`) this is the
    /// identity and returns the input variable unchanged.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::of_f64(1.0 / (1.0 - p));
        let multiplier: Vec<S> = (0..self.nodes[x.0].numel())
            .map(|_| {
                if rng.gen::<f64>() >= p {
                    keep_scale
                } else {
                    S::zero()
                }
            })
            .collect();
        let data: Vec<S> = self.nodes[x.0]
            .data()
            .iter()
            .zip(&multiplier)
            .map(|(v, m)| *v * *m)
            .collect();
        let shape = self.nodes[x.0].shape().to_vec();
        let rg = self.requires(x);
        let out = self.push(Tensor::new(shape, data)?.with_grad(rg));
        if rg {
            let xi = x.0;
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(&multiplier)
                        .map(|(gv, m)| *gv * *m)
                        .collect();
                    grads.add(xi, &dx);
                }),
            );
        }
        Ok(out)
    }

    /// Gathers rows of an embedding table: `table: v x h`, output `ids.len() x h`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, h) = self.nodes[table.0].dims2()?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, bound: v });
            }
        }
        let mut data = vec![S::zero(); ids.len() * h];
        {
            let td = self.nodes[table.0].data();
            for (i, &id) in ids.iter().enumerate() {
                data[i * h..(i + 1) * h].copy_from_slice(&td[id * h..(id + 1) * h]);
            }
        }
        let rg = self.requires(table);
        let out = self.push(Tensor::new(vec![ids.len(), h], data)?.with_grad(rg));
        if rg {
            let ti = table.0;
            let ids = ids.to_vec();
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            grads.add_at(ti, id * h + j, g[i * h + j]);
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Column slice `[from, to)` of an `m x n` tensor.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var, TensorError> {
        let (m, n) = self.nodes[x.0].dims2()?;
        if from >= to || to > n {
            return Err(TensorError::BadColumnRange { from, to, width: n });
        }
        let w = to - from;
        let mut data = vec![S::zero(); m * w];
        {
            let xd = self.nodes[x.0].data();
            for i in 0..m {
                data[i * w..(i + 1) * w].copy_from_slice(&xd[i * n + from..i * n + to]);
            }
        }
        let rg = self.requires(x);
        let out = self.push(Tensor::new(vec![m, w], data)?.with_grad(rg));
        if rg {
            let xi = x.0;
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        dx[i * n + from..i * n + to].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    grads.add(xi, &dx);
                }),
            );
        }
        Ok(out)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().expect("concat_cols needs at least one input");
        let (m, _) = self.nodes[first.0].dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0usize;
        for &x in xs {
            let (mx, nx) = self.nodes[x.0].dims2()?;
            if mx != m {
                return Err(TensorError::ShapeMismatch {
                    lhs: self.nodes[first.0].shape().to_vec(),
                    rhs: self.nodes[x.0].shape().to_vec(),
                });
            }
            widths.push(nx);
            total += nx;
        }
        let mut data = vec![S::zero(); m * total];
        let mut offset = 0usize;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xd = self.nodes[x.0].data();
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&xd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        let out = self.push(Tensor::new(vec![m, total], data)?.with_grad(rg));
        if rg {
            let idxs: Vec<usize> = xs.iter().map(|x| x.0).collect();
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    let mut offset = 0usize;
                    for (&xi, &w) in idxs.iter().zip(&widths) {
                        let mut dx = vec![S::zero(); m * w];
                        for i in 0..m {
                            dx[i * w..(i + 1) * w].copy_from_slice(
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                        grads.add(xi, &dx);
                        offset += w;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Label-smoothed cross entropy, averaged over non-padding positions.
    ///
    /// The smoothed target puts `1 - epsilon` on the gold class and
    /// `epsilon / (v - 1)` on every other class. Positions whose target is
    /// `pad_id` are excluded; if every position is padding this is an error.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<Var, TensorError> {
        let (sum, count) = self.cross_entropy_label_smoothed_sum(logits, targets, epsilon, pad_id)?;
        Ok(self.scale(sum, 1.0 / count as f64))
    }

    /// Sum form of the smoothed cross entropy, plus the non-padding count.
    /// Batches with mixed example lengths combine these before dividing, so
    /// the overall loss is still a mean over non-padding positions.
    pub fn cross_entropy_label_smoothed_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<(Var, usize), TensorError> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(TensorError::InvalidEpsilon(epsilon));
        }
        let (rows, v) = self.nodes[logits.0].dims2()?;
        if targets.len() != rows {
            return Err(TensorError::TargetCount {
                count: targets.len(),
                rows,
            });
        }
        for &t in targets {
            if t >= v {
                return Err(TensorError::IndexOutOfRange { index: t, bound: v });
            }
        }
        let non_pad: Vec<usize> = (0..rows).filter(|&i| targets[i] != pad_id).collect();
        if non_pad.is_empty() {
            return Err(TensorError::AllPadding);
        }
        let eps = S::of_f64(epsilon);
        let on_gold = S::one() - eps;
        let off_gold = eps / S::of_f64((v - 1) as f64);
        let mut total = S::zero();
        let mut probs = vec![S::zero(); rows * v];
        {
            let xd = self.nodes[logits.0].data();
            let mut lp = vec![S::zero(); v];
            for &i in &non_pad {
                let row = &xd[i * v..(i + 1) * v];
                ops::log_softmax_row(row, &mut lp);
                ops::softmax_row(row, &mut probs[i * v..(i + 1) * v]);
                let gold = targets[i];
                let mut loss = S::zero();
                for (j, &l) in lp.iter().enumerate() {
                    let q = if j == gold { on_gold } else { off_gold };
                    loss -= q * l;
                }
                total += loss;
            }
        }
        let count = non_pad.len();
        let rg = self.requires(logits);
        let out = self.push(Tensor::scalar(total).with_grad(rg));
        if rg {
            let li = logits.0;
            let targets = targets.to_vec();
            self.record(
                out,
                Box::new(move |g, _nodes, grads| {
                    let mut dl = vec![S::zero(); rows * v];
                    for &i in &non_pad {
                        let gold = targets[i];
                        for j in 0..v {
                            let q = if j == gold { on_gold } else { off_gold };
                            dl[i * v + j] = g[0] * (probs[i * v + j] - q);
                        }
                    }
                    grads.add(li, &dl);
                }),
            );
        }
        Ok((out, count))
    }

    /// Backpropagates from a scalar loss, accumulating into each reachable
    /// tensor's `grad` buffer.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads = Grads {
            bufs: vec![None; n],
            active: self.nodes.iter().map(|t| t.requires_grad()).collect(),
            sizes: self.nodes.iter().map(|t| t.numel()).collect(),
        };
        grads.bufs[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads.bufs[i].take() else {
                continue;
            };
            if let Some(back) = &self.backs[i] {
                back(&g, &self.nodes, &mut grads);
            }
            grads.bufs[i] = Some(g);
        }
        for (i, buf) in grads.bufs.into_iter().enumerate() {
            if let Some(g) = buf {
                if self.nodes[i].requires_grad() {
                    self.nodes[i].accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}
