use crate::Real;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn with_row_stride(mut self, rs: usize) -> Self {
        self.rs = rs;
        self
    }

    pub fn t(self) -> Self {
        Layout {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c = a * b + beta * c` on strided views.
pub(crate) fn gemm<T: Real>(a: &[T], la: Layout, b: &[T], lb: Layout, c: &mut [T], lc: Layout, beta: T) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension mismatch");
    assert_eq!(la.rows, lc.rows, "gemm output rows mismatch");
    assert_eq!(lb.cols, lc.cols, "gemm output cols mismatch");
    assert!(la.end() <= a.len(), "gemm lhs out of bounds");
    assert!(lb.end() <= b.len(), "gemm rhs out of bounds");
    assert!(lc.end() <= c.len(), "gemm output out of bounds");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    // SAFETY: every index reachable through the layouts was bounds-checked above.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [B,H,W,C], got {x:?}");
        assert_eq!(wshape.len(), 4, "conv2d weight must be [KH,KW,Cin,Cout]");
        assert_eq!(x[3], wshape[2], "conv2d channel mismatch {x:?} vs {wshape:?}");
        let (kh, kw) = (wshape[0], wshape[1]);
        assert!(x[1] + 2 * pad >= kh && x[2] + 2 * pad >= kw, "conv2d kernel larger than input");
        ConvGeom {
            batch: x[0],
            h: x[1],
            w: x[2],
            cin: x[3],
            kh,
            kw,
            stride,
            pad,
            ho: (x[1] + 2 * pad - kh) / stride + 1,
            wo: (x[2] + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits every (column-row, patch-slot, input-pixel) triple that lies
    /// inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let pixel = (b * self.h + iy as usize) * self.w + ix as usize;
                            f(row, ky * self.kw + kx, pixel);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut col = vec![T::zero(); g.rows() * patch];
    g.for_each_tap(|row, slot, pixel| {
        let dst = row * patch + slot * g.cin;
        let src = pixel * g.cin;
        col[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
    });
    col
}

pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    g.for_each_tap(|row, slot, pixel| {
        let src = row * patch + slot * g.cin;
        let dst = pixel * g.cin;
        for (d, s) in dx[dst..dst + g.cin].iter_mut().zip(&col[src..src + g.cin]) {
            *d += *s;
        }
    });
}

/// Normalization statistics over `[outer, inner, channels]` data where each of
/// the `groups` contiguous channel groups is normalized over `inner x group`.
pub(crate) struct NormGeom {
    pub outer: usize,
    pub inner: usize,
    pub channels: usize,
    pub groups: usize,
}

impl NormGeom {
    fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    fn count(&self) -> usize {
        self.inner * self.group_width()
    }

    fn for_group(&self, o: usize, g: usize, mut f: impl FnMut(usize)) {
        let gw = self.group_width();
        for p in 0..self.inner {
            let base = (o * self.inner + p) * self.channels + g * gw;
            for i in base..base + gw {
                f(i);
            }
        }
    }
}

/// Returns `(xhat, rstd)` with `rstd` indexed by `outer * groups + group`.
pub(crate) fn norm_stats<T: Real>(x: &[T], ng: &NormGeom, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); ng.outer * ng.groups];
    let n = T::lit(ng.count() as f64);
    for o in 0..ng.outer {
        for g in 0..ng.groups {
            let mut sum = T::zero();
            ng.for_group(o, g, |i| sum += x[i]);
            let mean = sum / n;
            let mut var = T::zero();
            ng.for_group(o, g, |i| {
                let d = x[i] - mean;
                var += d * d;
            });
            let r = T::one() / (var / n + eps).sqrt();
            ng.for_group(o, g, |i| xhat[i] = (x[i] - mean) * r);
            rstd[o * ng.groups + g] = r;
        }
    }
    (xhat, rstd)
}

/// Gradient of the normalized values back to the raw input.
pub(crate) fn norm_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: &[T], ng: &NormGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let n = T::lit(ng.count() as f64);
    for o in 0..ng.outer {
        for g in 0..ng.groups {
            let (mut s1, mut s2) = (T::zero(), T::zero());
            ng.for_group(o, g, |i| {
                s1 += dxhat[i];
                s2 += dxhat[i] * xhat[i];
            });
            let (m1, m2) = (s1 / n, s2 / n);
            let r = rstd[o * ng.groups + g];
            ng.for_group(o, g, |i| dx[i] = r * (dxhat[i] - m1 - xhat[i] * m2));
        }
    }
    dx
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        softmax_into(src, dst);
    }
    out
}

pub(crate) fn softmax_into<T: Real>(src: &[T], dst: &mut [T]) {
    let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// `dx = y * (dy - sum(dy * y))` row by row.
pub(crate) fn softmax_backward_rows<T: Real>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}
