//! Slice-level compute kernels shared by forward and backward passes.

/// Row-major GEMM: `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. `a_t` means `a` is stored as `k×m`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: bounds checked above; strides describe dense row-major storage.
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
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let span_h = self.dilation * (self.kh - 1) + 1;
        let span_w = self.dilation * (self.kw - 1) + 1;
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if ph < span_h || pw < span_w || self.stride == 0 {
            return None;
        }
        Some((
            (ph - span_h) / self.stride + 1,
            (pw - span_w) / self.stride + 1,
        ))
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one `[C, H, W]` image into `[C·kh·kw, Ho·Wo]` columns.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw().expect("valid geometry");
    let hw_out = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let di = (ki * g.dilation) as isize - pad;
                let dj = (kj * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + di;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dj;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = g.out_hw().expect("valid geometry");
    let hw_out = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let di = (ki * g.dilation) as isize - pad;
                let dj = (kj * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + di;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + dj;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Linear interpolation taps for one axis, half-pixel-centre convention
/// (`align_corners = false`).
#[derive(Clone, Debug)]
pub struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

impl Taps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut t = Taps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            w_lo: Vec::with_capacity(output),
            w_hi: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            t.lo.push(lo);
            t.hi.push(hi);
            t.w_lo.push(1.0 - frac);
            t.w_hi.push(frac);
        }
        t
    }
}

/// Bilinear resize of `planes` stacked `[h, w]` planes to `[oh, ow]`.
pub fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, ty: &Taps, tx: &Taps) -> Vec<f64> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
            let r1 = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
            let (a, b) = (ty.w_lo[oy], ty.w_hi[oy]);
            for ox in 0..ow {
                let (l, r) = (tx.lo[ox], tx.hi[ox]);
                let (c, d) = (tx.w_lo[ox], tx.w_hi[ox]);
                dst[oy * ow + ox] = a * (c * r0[l] + d * r0[r]) + b * (c * r1[l] + d * r1[r]);
            }
        }
    }
    out
}

pub fn resize_backward(
    gy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ty: &Taps,
    tx: &Taps,
) -> Vec<f64> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (a, b) = (ty.w_lo[oy], ty.w_hi[oy]);
            let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
            for ox in 0..ow {
                let g = src[oy * ow + ox];
                let (l, r) = (tx.lo[ox], tx.hi[ox]);
                let (c, d) = (tx.w_lo[ox], tx.w_hi[ox]);
                dst[y0 * w + l] += a * c * g;
                dst[y0 * w + r] += a * d * g;
                dst[y1 * w + l] += b * c * g;
                dst[y1 * w + r] += b * d * g;
            }
        }
    }
    gx
}

/// Strides of a dense row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return (x.to_vec(), out_shape);
    }
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        // advance the outer counter
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
