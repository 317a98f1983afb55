//! Raw numeric kernels used by the tape. Everything here works on plain
//! row-major slices.

use crate::error::{Error, Result};

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every coordinate of `shape` in row-major order and yields the
/// offset obtained from `strides` (which may contain zeros).
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            off += strides[d];
            if coord[d] < shape[d] {
                break;
            }
            off -= strides[d] * coord[d];
            coord[d] = 0;
        }
    }
    out
}

/// Numpy-style broadcasting between two operands.
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    lhs: Option<Vec<usize>>,
    rhs: Option<Vec<usize>>,
    lhs_len: usize,
    rhs_len: usize,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return Err(Error::shape(op, a, b));
            }
        }
        let map = |p: &[usize], orig: &[usize]| -> Option<Vec<usize>> {
            if orig == out_shape.as_slice() {
                return None;
            }
            let strides = row_major_strides(p);
            let eff: Vec<usize> = p
                .iter()
                .zip(&strides)
                .zip(&out_shape)
                .map(|((&d, &s), &o)| if d == 1 && o != 1 { 0 } else { s })
                .collect();
            Some(strided_offsets(&out_shape, &eff))
        };
        Ok(Broadcast {
            lhs: map(&pa, a),
            rhs: map(&pb, b),
            lhs_len: a.iter().product(),
            rhs_len: b.iter().product(),
            out_shape,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    #[inline]
    fn li(&self, o: usize) -> usize {
        self.lhs.as_ref().map_or(o, |m| m[o])
    }

    #[inline]
    fn ri(&self, o: usize) -> usize {
        self.rhs.as_ref().map_or(o, |m| m[o])
    }

    pub fn apply(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.numel())
            .map(|o| f(a[self.li(o)], b[self.ri(o)]))
            .collect()
    }

    /// Evaluates `f(g[o], a[lhs(o)], b[rhs(o)])` over the output shape.
    pub fn map_grad(
        &self,
        g: &[f64],
        a: &[f64],
        b: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Vec<f64> {
        (0..self.numel())
            .map(|o| f(g[o], a[self.li(o)], b[self.ri(o)]))
            .collect()
    }

    pub fn reduce_lhs(&self, g: &[f64]) -> Vec<f64> {
        match &self.lhs {
            None => g.to_vec(),
            Some(m) => {
                let mut out = vec![0.0; self.lhs_len];
                m.iter().zip(g).for_each(|(&i, &v)| out[i] += v);
                out
            }
        }
    }

    pub fn reduce_rhs(&self, g: &[f64]) -> Vec<f64> {
        match &self.rhs {
            None => g.to_vec(),
            Some(m) => {
                let mut out = vec![0.0; self.rhs_len];
                m.iter().zip(g).for_each(|(&i, &v)| out[i] += v);
                out
            }
        }
    }
}

/// Maps each element of a tensor to the group obtained by collapsing a set
/// of reduced axes.
pub(crate) struct Grouping {
    pub out_shape: Vec<usize>,
    pub groups: usize,
    map: GroupMap,
}

enum GroupMap {
    /// Reduced axes form a suffix: group = flat / inner.
    Suffix(usize),
    Table(Vec<usize>),
}

impl Grouping {
    pub fn new(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank || reduced[ax] {
                return Err(Error::InvalidShape {
                    op,
                    shape: shape.to_vec(),
                    reason: format!("invalid or repeated axis {ax} in {axes:?}"),
                });
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).collect();
        let groups: usize = kept.iter().map(|&d| shape[d]).product();
        let out_shape = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&d| shape[d]).collect()
        };
        let first_reduced = (0..rank).find(|&d| reduced[d]).unwrap_or(rank);
        let suffix = (first_reduced..rank).all(|d| reduced[d]);
        let map = if suffix {
            GroupMap::Suffix(shape[first_reduced..].iter().product())
        } else {
            let out_strides = row_major_strides(&kept.iter().map(|&d| shape[d]).collect::<Vec<_>>());
            let mut eff = vec![0usize; rank];
            for (i, &d) in kept.iter().enumerate() {
                eff[d] = out_strides[i];
            }
            GroupMap::Table(strided_offsets(shape, &eff))
        };
        Ok(Grouping {
            out_shape,
            groups,
            map,
        })
    }

    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match &self.map {
            GroupMap::Suffix(inner) => {
                for grp in 0..self.groups {
                    for flat in grp * inner..(grp + 1) * inner {
                        f(flat, grp);
                    }
                }
            }
            GroupMap::Table(t) => t.iter().enumerate().for_each(|(flat, &grp)| f(flat, grp)),
        }
    }
}

pub(crate) fn softmax(g: &Grouping, x: &[f64], log: bool) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; g.groups];
    g.for_each(|flat, grp| max[grp] = max[grp].max(x[flat]));
    let mut sum = vec![0.0; g.groups];
    g.for_each(|flat, grp| sum[grp] += (x[flat] - max[grp]).exp());
    let mut out = vec![0.0; x.len()];
    if log {
        let lse: Vec<f64> = sum.iter().zip(&max).map(|(s, m)| m + s.ln()).collect();
        g.for_each(|flat, grp| out[flat] = x[flat] - lse[grp]);
    } else {
        g.for_each(|flat, grp| out[flat] = (x[flat] - max[grp]).exp() / sum[grp]);
    }
    out
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    let ok = perm.len() == shape.len()
        && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidShape {
            op: "permute",
            shape: shape.to_vec(),
            reason: format!("invalid permutation {perm:?}"),
        })
    }
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn permute(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let offsets = strided_offsets(&out_shape, &eff);
    let out = offsets.into_iter().map(|o| data[o]).collect();
    (out_shape, out)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |r: usize, cdim: usize, rs: usize, cs: usize| (r - 1) * rs + (cdim - 1) * cs + 1;
    assert!(k == 0 || a.len() >= reach(m, k, rsa, csa), "gemm: lhs too short");
    assert!(k == 0 || b.len() >= reach(k, n, rsb, csb), "gemm: rhs too short");
    assert!(c.len() >= reach(m, n, rsc, csc), "gemm: output too short");
    // SAFETY: the assertions above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain 2-D matrix product `a (m×k) · b (k×n)`.
pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut out, (n, 1), 0.0);
    out
}

pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    batched: bool,
    trans_a: bool,
    trans_b: bool,
}

impl MatDims {
    pub fn new(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<Self> {
        let (batch, ar, br, batched) = match (a.len(), b.len()) {
            (2, 2) => (1, &a[..], &b[..], false),
            (3, 3) if a[0] == b[0] => (a[0], &a[1..], &b[1..], true),
            _ => return Err(Error::shape("matmul", a, b)),
        };
        let (m, k) = if trans_a { (ar[1], ar[0]) } else { (ar[0], ar[1]) };
        let (k2, n) = if trans_b { (br[1], br[0]) } else { (br[0], br[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            batched,
            trans_a,
            trans_b,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }

    fn a_strides(&self) -> (usize, usize) {
        if self.trans_a {
            (1, self.m)
        } else {
            (self.k, 1)
        }
    }

    fn b_strides(&self) -> (usize, usize) {
        if self.trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (sa, sb, so) = (self.m * self.k, self.k * self.n, self.m * self.n);
        for i in 0..self.batch {
            gemm(
                self.m,
                self.k,
                self.n,
                &a[i * sa..(i + 1) * sa],
                self.a_strides(),
                &b[i * sb..(i + 1) * sb],
                self.b_strides(),
                &mut out[i * so..(i + 1) * so],
                (self.n, 1),
                0.0,
            );
        }
    }

    /// d op(A) = G · op(B)^T, written in A's storage layout.
    pub fn grad_lhs(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (sa, sb, so) = (self.m * self.k, self.k * self.n, self.m * self.n);
        let (rsb, csb) = self.b_strides();
        for i in 0..self.batch {
            gemm(
                self.m,
                self.n,
                self.k,
                &g[i * so..(i + 1) * so],
                (self.n, 1),
                &b[i * sb..(i + 1) * sb],
                (csb, rsb),
                &mut ga[i * sa..(i + 1) * sa],
                self.a_strides(),
                0.0,
            );
        }
    }

    /// d op(B) = op(A)^T · G, written in B's storage layout.
    pub fn grad_rhs(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (sa, sb, so) = (self.m * self.k, self.k * self.n, self.m * self.n);
        let (rsa, csa) = self.a_strides();
        for i in 0..self.batch {
            gemm(
                self.k,
                self.m,
                self.n,
                &a[i * sa..(i + 1) * sa],
                (csa, rsa),
                &g[i * so..(i + 1) * so],
                (self.n, 1),
                &mut gb[i * sb..(i + 1) * sb],
                self.b_strides(),
                0.0,
            );
        }
    }
}

pub(crate) struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    pub c_out: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || stride == 0 {
            return Err(Error::shape("conv2d", x, w));
        }
        let ksize = w[2];
        if x[2] + 2 * pad < ksize || x[3] + 2 * pad < ksize {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(ConvGeometry {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            ksize,
            stride,
            pad,
            ho: (x[2] + 2 * pad - ksize) / stride + 1,
            wo: (x[3] + 2 * pad - ksize) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.ksize {
                for kj in 0..self.ksize {
                    let row = (c * self.ksize + ki) * self.ksize + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.ksize {
                for kj in 0..self.ksize {
                    let row = (c * self.ksize + ki) * self.ksize + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (k, p) = (self.patch(), self.positions());
        let in_sz = self.c_in * self.h * self.w;
        let out_sz = self.c_out * p;
        let mut out = vec![0.0; self.batch * out_sz];
        let mut cols = vec![0.0; k * p];
        for b in 0..self.batch {
            self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
            let ob = &mut out[b * out_sz..(b + 1) * out_sz];
            gemm(self.c_out, k, p, w, (k, 1), &cols, (p, 1), ob, (p, 1), 0.0);
            if let Some(bias) = bias {
                for (c, &bv) in bias.iter().enumerate() {
                    ob[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        want_x: bool,
        want_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (k, p) = (self.patch(), self.positions());
        let in_sz = self.c_in * self.h * self.w;
        let out_sz = self.c_out * p;
        let mut gx = want_x.then(|| vec![0.0; self.batch * in_sz]);
        let mut gw = want_w.then(|| vec![0.0; self.c_out * k]);
        let mut cols = vec![0.0; k * p];
        for b in 0..self.batch {
            let gb = &g[b * out_sz..(b + 1) * out_sz];
            if let Some(gw) = gw.as_mut() {
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
                gemm(self.c_out, p, k, gb, (p, 1), &cols, (1, p), gw, (k, 1), 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(k, self.c_out, p, w, (1, k), gb, (p, 1), &mut cols, (p, 1), 0.0);
                self.col2im(&cols, &mut gx[b * in_sz..(b + 1) * in_sz]);
            }
        }
        (gx, gw)
    }

    pub fn bias_grad(&self, g: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut out = vec![0.0; self.c_out];
        for b in 0..self.batch {
            for (c, o) in out.iter_mut().enumerate() {
                let start = (b * self.c_out + c) * p;
                *o += g[start..start + p].iter().sum::<f64>();
            }
        }
        out
    }
}

pub(crate) fn max_pool2(shape: &[usize], x: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (vec![n, c, ho, wo], out, argmax)
}

/// Index arithmetic for per-channel statistics over NC or NCHW tensors.
pub(crate) struct ChannelLayout {
    batch: usize,
    pub channels: usize,
    spatial: usize,
}

impl ChannelLayout {
    pub fn new(shape: &[usize]) -> Result<Self> {
        match shape.len() {
            2 => Ok(ChannelLayout {
                batch: shape[0],
                channels: shape[1],
                spatial: 1,
            }),
            4 => Ok(ChannelLayout {
                batch: shape[0],
                channels: shape[1],
                spatial: shape[2] * shape[3],
            }),
            _ => Err(Error::InvalidShape {
                op: "channel_norm",
                shape: shape.to_vec(),
                reason: "expects NC or NCHW".into(),
            }),
        }
    }

    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }

    fn for_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.batch {
            let start = (b * self.channels + c) * self.spatial;
            for i in start..start + self.spatial {
                f(i);
            }
        }
    }

    /// Mean and biased variance per channel.
    pub fn moments(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.count() as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for c in 0..self.channels {
            let mut s = 0.0;
            self.for_channel(c, |i| s += x[i]);
            let m = s / n;
            let mut v = 0.0;
            self.for_channel(c, |i| v += (x[i] - m) * (x[i] - m));
            mean[c] = m;
            var[c] = v / n;
        }
        (mean, var)
    }

    pub fn normalize(
        &self,
        x: &[f64],
        mean: &[f64],
        inv_std: &[f64],
        gamma: &[f64],
        beta: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        for c in 0..self.channels {
            self.for_channel(c, |i| {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            });
        }
        (y, xhat)
    }

    pub fn norm_backward(
        &self,
        g: &[f64],
        xhat: &[f64],
        inv_std: &[f64],
        gamma: &[f64],
        batch_stats: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.count() as f64;
        let mut gx = vec![0.0; g.len()];
        let mut ggamma = vec![0.0; self.channels];
        let mut gbeta = vec![0.0; self.channels];
        for c in 0..self.channels {
            let (mut sg, mut sgx) = (0.0, 0.0);
            self.for_channel(c, |i| {
                sg += g[i];
                sgx += g[i] * xhat[i];
            });
            ggamma[c] = sgx;
            gbeta[c] = sg;
            let scale = gamma[c] * inv_std[c];
            if batch_stats {
                self.for_channel(c, |i| {
                    gx[i] = scale * (g[i] - sg / n - xhat[i] * sgx / n);
                });
            } else {
                self.for_channel(c, |i| gx[i] = scale * g[i]);
            }
        }
        (gx, ggamma, gbeta)
    }
}
