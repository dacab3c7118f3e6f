//! Elementwise, reduction and linear-algebra ops on the tape.
//!
//! Binary ops follow numpy-style right-aligned broadcasting; their backward
//! rules sum gradients over the broadcast axes. Softmax variants subtract the
//! row maximum before exponentiating.

use std::sync::Arc;

use super::scalar::{lit, Scalar};
use super::tape::{Tape, TensorId};
use crate::{Error, Result};

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[d] = da.max(db);
        } else {
            return Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", a, b)));
        }
    }
    Ok(out)
}

/// Row-major strides of `shape` right-aligned into `out_shape`, with stride 0
/// on broadcast axes.
fn bcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for d in (0..shape.len()).rev() {
        let od = d + rank - shape.len();
        if shape[d] != 1 {
            strides[od] = s;
        }
        s *= shape[d];
    }
    strides
}

/// Visits every element of `out_shape`, yielding the linear offsets into two
/// broadcast operands.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
}

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $bwd_a:expr, $bwd_b:expr) => {
        pub fn $name(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
            let (sa, sb) = (self.shape_of(a), self.shape_of(b));
            let (va, vb) = (self.data(a), self.data(b));
            let out_shape = broadcast_shape($opname, &sa, &sb)?;
            let (sta, stb) = (bcast_strides(&out_shape, &sa), bcast_strides(&out_shape, &sb));
            let fwd: fn(T, T) -> T = $fwd;
            let mut out = vec![T::zero(); out_shape.iter().product()];
            if sa == sb {
                for ((o, &x), &y) in out.iter_mut().zip(va.iter()).zip(vb.iter()) {
                    *o = fwd(x, y);
                }
            } else {
                for_each_bcast(&out_shape, &sta, &stb, |i, oa, ob| {
                    out[i] = fwd(va[oa], vb[ob]);
                });
            }
            let (ca, cb) = (Arc::clone(&va), Arc::clone(&vb));
            let oshape = out_shape.clone();
            Ok(self.push(
                out_shape,
                out,
                vec![a, b],
                Box::new(move |g, bufs| {
                    let ga: fn(T, T, T) -> T = $bwd_a;
                    let gb: fn(T, T, T) -> T = $bwd_b;
                    for_each_bcast(&oshape, &sta, &stb, |i, oa, ob| {
                        let (x, y) = (ca[oa], cb[ob]);
                        bufs[0][oa] += ga(g[i], x, y);
                        bufs[1][ob] += gb(g[i], x, y);
                    });
                }),
            ))
        }
    };
}

impl<T: Scalar> Tape<T> {
    binary_op!(add, "add", |x, y| x + y, |g, _x, _y| g, |g, _x, _y| g);
    binary_op!(sub, "sub", |x, y| x - y, |g, _x, _y| g, |g, _x, _y| -g);
    binary_op!(mul, "mul", |x, y| x * y, |g, _x, y| g * y, |g, x, _y| g * x);
    binary_op!(div, "div", |x, y| x / y, |g, _x, y| g / y, |g, x, y| -g * x / (y * y));

    fn unary(
        &self,
        x: TensorId,
        fwd: impl Fn(T) -> T,
        bwd: impl Fn(T, T) -> T + 'static,
    ) -> TensorId {
        let shape = self.shape_of(x);
        let vx = self.data(x);
        let out: Vec<T> = vx.iter().map(|&v| fwd(v)).collect();
        let saved_in = Arc::clone(&vx);
        let saved_out = Arc::new(out.clone());
        self.push(
            shape,
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    // bwd sees (input, output) so rules can reuse either.
                    bufs[0][i] += g[i] * bwd(saved_in[i], saved_out[i]);
                }
            }),
        )
    }

    pub fn neg(&self, x: TensorId) -> TensorId {
        self.unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn exp(&self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.exp(), |_, o| o)
    }

    pub fn sqrt(&self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.sqrt(), |_, o| lit::<T>(0.5) / o)
    }

    pub fn relu(&self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: TensorId) -> TensorId {
        self.unary(x, stable_sigmoid, |v, o| {
            let _ = v;
            o * (T::one() - o)
        })
    }

    /// `ln(sigmoid(x))` computed without underflow.
    pub fn log_sigmoid(&self, x: TensorId) -> TensorId {
        self.unary(x, |v| -softplus(-v), |v, _| stable_sigmoid(-v))
    }

    /// Elementwise `x^p` for constant `p`. `p = 0` yields the constant 1 with
    /// zero gradient; fractional `p` assumes non-negative inputs.
    pub fn pow_scalar(&self, x: TensorId, p: f64) -> TensorId {
        let pt = lit::<T>(p);
        if p == 0.0 {
            return self.unary(x, |_| T::one(), |_, _| T::zero());
        }
        self.unary(
            x,
            move |v| v.powf(pt),
            move |v, _| {
                if v == T::zero() && p > 1.0 {
                    T::zero()
                } else {
                    pt * v.powf(pt - T::one())
                }
            },
        )
    }

    /// Huber penalty: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn huber(&self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| {
                if v.abs() < T::one() {
                    lit::<T>(0.5) * v * v
                } else {
                    v.abs() - lit::<T>(0.5)
                }
            },
            |v, _| num_traits::clamp(v, -T::one(), T::one()),
        )
    }

    pub fn scale(&self, x: TensorId, c: f64) -> TensorId {
        let ct = lit::<T>(c);
        self.unary(x, move |v| v * ct, move |_, _| ct)
    }

    pub fn add_scalar(&self, x: TensorId, c: f64) -> TensorId {
        let ct = lit::<T>(c);
        self.unary(x, move |v| v + ct, |_, _| T::one())
    }

    pub fn sum(&self, x: TensorId) -> TensorId {
        let vx = self.data(x);
        let mut acc = T::zero();
        for &v in vx.iter() {
            acc += v;
        }
        let n = vx.len();
        self.push(
            vec![],
            vec![acc],
            vec![x],
            Box::new(move |g, bufs| {
                for slot in bufs[0].iter_mut().take(n) {
                    *slot += g[0];
                }
            }),
        )
    }

    pub fn mean(&self, x: TensorId) -> TensorId {
        let n = self.numel(x);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the leading `k` axes; output keeps the remaining suffix shape.
    pub fn mean_prefix(&self, x: TensorId, k: usize) -> Result<TensorId> {
        let shape = self.shape_of(x);
        if k > shape.len() {
            return Err(Error::shape(
                "mean_prefix",
                format!("cannot reduce {} axes of rank-{} tensor", k, shape.len()),
            ));
        }
        let lead: usize = shape[..k].iter().product();
        let rest: usize = shape[k..].iter().product();
        let vx = self.data(x);
        let inv = lit::<T>(1.0 / lead as f64);
        let mut out = vec![T::zero(); rest];
        for l in 0..lead {
            for (o, r) in out.iter_mut().zip(0..rest) {
                *o += vx[l * rest + r];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        Ok(self.push(
            shape[k..].to_vec(),
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for l in 0..lead {
                    for r in 0..rest {
                        bufs[0][l * rest + r] += g[r] * inv;
                    }
                }
            }),
        ))
    }

    /// Softmax along `axis` with max-subtraction for stability.
    pub fn softmax(&self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (shape, k, outer, inner) = self.axis_split("softmax", x, axis)?;
        let vx = self.data(x);
        let mut out = vec![T::zero(); vx.len()];
        for_each_lane(outer, k, inner, |base, stride| {
            let mut m = vx[base];
            for t in 1..k {
                m = m.max(vx[base + t * stride]);
            }
            let mut z = T::zero();
            for t in 0..k {
                let e = (vx[base + t * stride] - m).exp();
                out[base + t * stride] = e;
                z += e;
            }
            for t in 0..k {
                out[base + t * stride] /= z;
            }
        });
        let saved = Arc::new(out.clone());
        Ok(self.push(
            shape,
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for_each_lane(outer, k, inner, |base, stride| {
                    let mut dot = T::zero();
                    for t in 0..k {
                        let i = base + t * stride;
                        dot += g[i] * saved[i];
                    }
                    for t in 0..k {
                        let i = base + t * stride;
                        bufs[0][i] += saved[i] * (g[i] - dot);
                    }
                });
            }),
        ))
    }

    /// Log-softmax along `axis`; safe for large-magnitude logits.
    pub fn log_softmax(&self, x: TensorId, axis: usize) -> Result<TensorId> {
        let (shape, k, outer, inner) = self.axis_split("log_softmax", x, axis)?;
        let vx = self.data(x);
        let mut out = vec![T::zero(); vx.len()];
        for_each_lane(outer, k, inner, |base, stride| {
            let mut m = vx[base];
            for t in 1..k {
                m = m.max(vx[base + t * stride]);
            }
            let mut z = T::zero();
            for t in 0..k {
                z += (vx[base + t * stride] - m).exp();
            }
            let lz = m + z.ln();
            for t in 0..k {
                let i = base + t * stride;
                out[i] = vx[i] - lz;
            }
        });
        let saved = Arc::new(out.clone());
        Ok(self.push(
            shape,
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for_each_lane(outer, k, inner, |base, stride| {
                    let mut gsum = T::zero();
                    for t in 0..k {
                        gsum += g[base + t * stride];
                    }
                    for t in 0..k {
                        let i = base + t * stride;
                        bufs[0][i] += g[i] - saved[i].exp() * gsum;
                    }
                });
            }),
        ))
    }

    fn axis_split(
        &self,
        op: &'static str,
        x: TensorId,
        axis: usize,
    ) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape_of(x);
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {} out of range for {:?}", axis, shape)));
        }
        let k = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((shape, k, outer, inner))
    }

    /// Matrix product of `a: M x K` and `b: K x N`.
    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let row = &vb[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(row.iter()) {
                    *o += aip * bv;
                }
            }
        }
        let (ca, cb) = (Arc::clone(&va), Arc::clone(&vb));
        Ok(self.push(
            vec![m, n],
            out,
            vec![a, b],
            Box::new(move |g, bufs| {
                // dA = G B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &cb[p * n..(p + 1) * n];
                        for (gv, bv) in grow.iter().zip(brow.iter()) {
                            acc += *gv * *bv;
                        }
                        bufs[0][i * k + p] += acc;
                    }
                }
                // dB = A^T G
                for p in 0..k {
                    for i in 0..m {
                        let aip = ca[i * k + p];
                        if aip == T::zero() {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &mut bufs[1][p * n..(p + 1) * n];
                        for (bslot, gv) in brow.iter_mut().zip(grow.iter()) {
                            *bslot += aip * *gv;
                        }
                    }
                }
            }),
        ))
    }

    pub fn transpose2d(&self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape_of(x);
        if shape.len() != 2 {
            return Err(Error::shape("transpose2d", format!("{:?}", shape)));
        }
        let (m, n) = (shape[0], shape[1]);
        let vx = self.data(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = vx[i * n + j];
            }
        }
        Ok(self.push(
            vec![n, m],
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for i in 0..m {
                    for j in 0..n {
                        bufs[0][i * n + j] += g[j * m + i];
                    }
                }
            }),
        ))
    }

    /// Zero-cost view under a new shape.
    pub fn reshape(&self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape_of(x), shape),
            ));
        }
        let data = self.data(x).as_ref().clone();
        Ok(self.push(
            shape,
            data,
            vec![x],
            Box::new(|g, bufs| {
                for (slot, gv) in bufs[0].iter_mut().zip(g.iter()) {
                    *slot += *gv;
                }
            }),
        ))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(Error::shape("concat_last", format!("{:?} || {:?}", sa, sb)));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (va, vb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(
            shape,
            out,
            vec![a, b],
            Box::new(move |g, bufs| {
                for r in 0..rows {
                    let base = r * (ca + cb);
                    for c in 0..ca {
                        bufs[0][r * ca + c] += g[base + c];
                    }
                    for c in 0..cb {
                        bufs[1][r * cb + c] += g[base + ca + c];
                    }
                }
            }),
        ))
    }

    /// Concatenation along the first axis; trailing axes must agree.
    pub fn concat_rows(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_rows", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (va, vb) = (self.data(a), self.data(b));
        let na = va.len();
        let mut out = Vec::with_capacity(va.len() + vb.len());
        out.extend_from_slice(&va);
        out.extend_from_slice(&vb);
        let mut shape = sa.clone();
        shape[0] += sb[0];
        Ok(self.push(
            shape,
            out,
            vec![a, b],
            Box::new(move |g, bufs| {
                for (slot, gv) in bufs[0].iter_mut().zip(g[..na].iter()) {
                    *slot += *gv;
                }
                for (slot, gv) in bufs[1].iter_mut().zip(g[na..].iter()) {
                    *slot += *gv;
                }
            }),
        ))
    }

    /// Slice `[from, to)` of the last axis.
    pub fn slice_last(&self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let shape = self.shape_of(x);
        let c = *shape.last().ok_or_else(|| Error::shape("slice_last", "rank-0 input".to_string()))?;
        if from >= to || to > c {
            return Err(Error::shape("slice_last", format!("[{from}, {to}) of {c} channels")));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let width = to - from;
        let vx = self.data(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&vx[r * c + from..r * c + to]);
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = width;
        Ok(self.push(
            oshape,
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for r in 0..rows {
                    for k in 0..width {
                        bufs[0][r * c + from + k] += g[r * width + k];
                    }
                }
            }),
        ))
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn for_each_lane(outer: usize, k: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            f(o * k * inner + i, inner);
        }
    }
}
