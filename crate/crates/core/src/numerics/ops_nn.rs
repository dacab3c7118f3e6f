//! Structured ops: convolution, bilinear sampling, gather/scatter.
//!
//! Feature maps are `H x W x C` row-major throughout. Sample coordinates are
//! `(x, y)` pairs where `x` runs along the width axis and `y` along the
//! height axis, so cell `(row i, col j)` sits at coordinate `(x = j, y = i)`.

use std::sync::Arc;

use super::scalar::Scalar;
use super::tape::{Tape, TensorId};
use crate::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation plus bias.
    ///
    /// `input: H x W x Cin`, `kernel: kh x kw x Cin x Cout`, `bias: Cout`;
    /// output `H' x W' x Cout` with `H' = (H + 2 pad - kh)/stride + 1`.
    /// Implemented as im2col + matmul; the nested-loop oracle lives in tests.
    pub fn conv2d(
        &self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let ishape = self.shape_of(input);
        let kshape = self.shape_of(kernel);
        let bshape = self.shape_of(bias);
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", ishape, kshape),
            ));
        }
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let (kh, kw, kcin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", cin, kcin),
            ));
        }
        if bshape != vec![cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", bshape, cout),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let patch = kh * kw * cin;

        let vx = self.data(input);
        let vk = self.data(kernel);
        let vb = self.data(bias);

        // im2col: one row of kh*kw*cin values per output position.
        let mut cols = vec![T::zero(); oh * ow * patch];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((iy as usize * w) + ix as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&vx[src..src + cin]);
                    }
                }
            }
        }

        // out2d[(oy,ox), co] = cols . kernel(+bias); kernel is already
        // (kh*kw*cin) x cout in row-major order.
        let mut out = vec![T::zero(); oh * ow * cout];
        for r in 0..oh * ow {
            let orow = &mut out[r * cout..(r + 1) * cout];
            orow.copy_from_slice(&vb);
            let crow = &cols[r * patch..(r + 1) * patch];
            for (p, &cv) in crow.iter().enumerate() {
                if cv == T::zero() {
                    continue;
                }
                let krow = &vk[p * cout..(p + 1) * cout];
                for (o, &kv) in orow.iter_mut().zip(krow.iter()) {
                    *o += cv * kv;
                }
            }
        }

        let cols = Arc::new(cols);
        let ck = Arc::clone(&vk);
        Ok(self.push(
            vec![oh, ow, cout],
            out,
            vec![input, kernel, bias],
            Box::new(move |g, bufs| {
                // d_bias
                for r in 0..oh * ow {
                    for co in 0..cout {
                        bufs[2][co] += g[r * cout + co];
                    }
                }
                // d_kernel = cols^T . g
                for r in 0..oh * ow {
                    let crow = &cols[r * patch..(r + 1) * patch];
                    let grow = &g[r * cout..(r + 1) * cout];
                    for (p, &cv) in crow.iter().enumerate() {
                        if cv == T::zero() {
                            continue;
                        }
                        let krow = &mut bufs[1][p * cout..(p + 1) * cout];
                        for (kslot, &gv) in krow.iter_mut().zip(grow.iter()) {
                            *kslot += cv * gv;
                        }
                    }
                }
                // d_input: dcols = g . kernel^T, scattered back (col2im).
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let p0 = (ky * kw + kx) * cin;
                                let dst = ((iy as usize * w) + ix as usize) * cin;
                                for ci in 0..cin {
                                    let krow = &ck[(p0 + ci) * cout..(p0 + ci + 1) * cout];
                                    let mut acc = T::zero();
                                    for (&gv, &kv) in grow.iter().zip(krow.iter()) {
                                        acc += gv * kv;
                                    }
                                    bufs[0][dst + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Affine map `x . w + b` for `x: N x Cin`, `w: Cin x Cout`, `b: Cout`.
    pub fn linear(&self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Bilinear interpolation of `map: H x W x C` at `points: N x 2`,
    /// differentiable in both the map values and the coordinates.
    /// Out-of-bounds neighbours read zero.
    pub fn bilinear_sample(&self, map: TensorId, points: TensorId) -> Result<TensorId> {
        let mshape = self.shape_of(map);
        let pshape = self.shape_of(points);
        if mshape.len() != 3 {
            return Err(Error::shape("bilinear_sample", format!("map {:?}", mshape)));
        }
        if pshape.len() != 2 || pshape[1] != 2 {
            return Err(Error::shape("bilinear_sample", format!("points {:?}", pshape)));
        }
        let (h, w, c) = (mshape[0], mshape[1], mshape[2]);
        let n = pshape[0];
        let vm = self.data(map);
        let vp = self.data(points);

        let read = |iy: isize, ix: isize, ch: usize, vm: &[T]| -> T {
            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                T::zero()
            } else {
                vm[((iy as usize) * w + ix as usize) * c + ch]
            }
        };

        let mut out = vec![T::zero(); n * c];
        for p in 0..n {
            let x = vp[p * 2];
            let y = vp[p * 2 + 1];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let (x0, y0) = (x0.as_f64() as isize, y0.as_f64() as isize);
            for ch in 0..c {
                let v00 = read(y0, x0, ch, &vm);
                let v10 = read(y0, x0 + 1, ch, &vm);
                let v01 = read(y0 + 1, x0, ch, &vm);
                let v11 = read(y0 + 1, x0 + 1, ch, &vm);
                let top = v00 + fx * (v10 - v00);
                let bot = v01 + fx * (v11 - v01);
                out[p * c + ch] = top + fy * (bot - top);
            }
        }

        let cm = Arc::clone(&vm);
        let cp = Arc::clone(&vp);
        Ok(self.push(
            vec![n, c],
            out,
            vec![map, points],
            Box::new(move |g, bufs| {
                let inb = |iy: isize, ix: isize| iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                for p in 0..n {
                    let x = cp[p * 2];
                    let y = cp[p * 2 + 1];
                    let x0f = x.floor();
                    let y0f = y.floor();
                    let fx = x - x0f;
                    let fy = y - y0f;
                    let (x0, y0) = (x0f.as_f64() as isize, y0f.as_f64() as isize);
                    let one = T::one();
                    let weights = [
                        (y0, x0, (one - fx) * (one - fy)),
                        (y0, x0 + 1, fx * (one - fy)),
                        (y0 + 1, x0, (one - fx) * fy),
                        (y0 + 1, x0 + 1, fx * fy),
                    ];
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let gv = g[p * c + ch];
                        if gv == T::zero() {
                            continue;
                        }
                        let mut vals = [T::zero(); 4];
                        for (k, (iy, ix, wt)) in weights.iter().enumerate() {
                            if inb(*iy, *ix) {
                                let off = ((*iy as usize) * w + *ix as usize) * c + ch;
                                vals[k] = cm[off];
                                bufs[0][off] += gv * *wt;
                            }
                        }
                        let [v00, v10, v01, v11] = vals;
                        dx += gv * ((v10 - v00) * (one - fy) + (v11 - v01) * fy);
                        dy += gv * ((v01 - v00) * (one - fx) + (v11 - v10) * fx);
                    }
                    bufs[1][p * 2] += dx;
                    bufs[1][p * 2 + 1] += dy;
                }
            }),
        ))
    }

    /// Row lookup: `table: R x C`, `idx` one entry per output row; `None`
    /// yields a zero row and receives no gradient.
    pub fn gather_rows(&self, table: TensorId, idx: &[Option<usize>]) -> Result<TensorId> {
        let shape = self.shape_of(table);
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        for i in idx.iter().flatten() {
            if *i >= r {
                return Err(Error::invalid("gather_rows", format!("row {} out of {}", i, r)));
            }
        }
        let vt = self.data(table);
        let n = idx.len();
        let mut out = vec![T::zero(); n * c];
        for (k, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out[k * c..(k + 1) * c].copy_from_slice(&vt[i * c..(i + 1) * c]);
            }
        }
        let idx = idx.to_vec();
        Ok(self.push(
            vec![n, c],
            out,
            vec![table],
            Box::new(move |g, bufs| {
                for (k, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for ch in 0..c {
                            bufs[0][i * c + ch] += g[k * c + ch];
                        }
                    }
                }
            }),
        ))
    }

    /// Scatter-max pooling of per-point rows into a dense grid.
    ///
    /// `x: P x C` rows, `cell[p]` a linear `H*W` cell index per row; output
    /// `h x w x C` holds the per-channel max over each cell's rows, zero for
    /// empty cells. Gradient flows to the first maximal row (ties by index).
    pub fn scatter_max_rows(
        &self,
        x: TensorId,
        cell: &[usize],
        h: usize,
        w: usize,
    ) -> Result<TensorId> {
        let shape = self.shape_of(x);
        if shape.len() != 2 || shape[0] != cell.len() {
            return Err(Error::shape(
                "scatter_max_rows",
                format!("rows {:?} vs {} cell indices", shape, cell.len()),
            ));
        }
        let c = shape[1];
        for &cl in cell {
            if cl >= h * w {
                return Err(Error::invalid("scatter_max_rows", format!("cell {} out of {}", cl, h * w)));
            }
        }
        let vx = self.data(x);
        let mut out = vec![T::zero(); h * w * c];
        let mut argmax: Vec<Option<usize>> = vec![None; h * w * c];
        for (p, &cl) in cell.iter().enumerate() {
            for ch in 0..c {
                let o = cl * c + ch;
                let v = vx[p * c + ch];
                match argmax[o] {
                    None => {
                        out[o] = v;
                        argmax[o] = Some(p);
                    }
                    Some(_) if v > out[o] => {
                        out[o] = v;
                        argmax[o] = Some(p);
                    }
                    _ => {}
                }
            }
        }
        Ok(self.push(
            vec![h, w, c],
            out,
            vec![x],
            Box::new(move |g, bufs| {
                for (o, p) in argmax.iter().enumerate() {
                    if let Some(p) = p {
                        bufs[0][p * c + o % c] += g[o];
                    }
                }
            }),
        ))
    }
}
