//! Raw compute kernels, generic over [`Scalar`]. Every kernel is a fixed-order
//! loop (or a single-threaded gemm call), so re-running one on the same input
//! is bit-identical — the replay guarantee of a record rests on this.
//!
//! Layout conventions:
//! - image batches are channels-last `[B, H, W, C]`
//! - conv weights are `[kh, kw, Cin, Cout]`, i.e. already laid out as the
//!   `[kh*kw*Cin, Cout]` matrix the im2col gemm wants
//! - "channel" ops treat the *last* axis as the channel axis, which makes
//!   them equally usable for conv maps and `[B, features]` matrices.

use super::storage::Scalar;

// ── dense matmul ──

/// C[m,n] = op(A)·op(B); transposition is expressed through strides, no copy.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    // Physical layouts: plain A is [m,k], transposed A is stored [k,m]; the
    // transpose is expressed by swapping strides, never by copying.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

// ── conv2d via im2col ──

/// Output spatial size for stride-1 convolution.
pub fn conv_out_dim(in_dim: usize, kernel: usize, pad: usize) -> usize {
    in_dim + 2 * pad + 1 - kernel
}

/// col[b*oh*ow, kh*kw*c] patch matrix. Interior rows copy `kw*c` contiguous
/// elements per kernel row; only padding edges fall back to per-tap copies.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, pad);
    let ow = conv_out_dim(w, kw, pad);
    let patch = kh * kw * c;
    let mut col = vec![T::zero(); batch * oh * ow * patch];

    for b in 0..batch {
        let xb = &x[b * h * w * c..][..h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut col[((b * oh + oy) * ow + ox) * patch..][..patch];
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    let seg = &mut row[ky * kw * c..][..kw * c];
                    if iy < 0 || iy as usize >= h {
                        continue; // stays zero
                    }
                    let iy = iy as usize;
                    let ix0 = ox as isize - pad as isize;
                    if ix0 >= 0 && ix0 as usize + kw <= w {
                        let src = &xb[(iy * w + ix0 as usize) * c..][..kw * c];
                        seg.copy_from_slice(src);
                    } else {
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && (ix as usize) < w {
                                let src = &xb[(iy * w + ix as usize) * c..][..c];
                                seg[kx * c..][..c].copy_from_slice(src);
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatter-add patch rows back onto the image grid.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_dim(h, kh, pad);
    let ow = conv_out_dim(w, kw, pad);
    let patch = kh * kw * c;

    for b in 0..batch {
        let xb = &mut out[b * h * w * c..][..h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &col[((b * oh + oy) * ow + ox) * patch..][..patch];
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let dst = &mut xb[(iy * w + ix as usize) * c..][..c];
                        let src = &row[(ky * kw + kx) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    }
}

/// y[B,OH,OW,O] = x ⊛ w, one gemm over the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    h: usize,
    wd: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, pad);
    let ow = conv_out_dim(wd, kw, pad);
    let col = im2col(x, batch, h, wd, cin, kh, kw, pad);
    matmul(&col, w, batch * oh * ow, kh * kw * cin, cout, false, false)
}

/// dx: cotangent of the conv input. dcol = dy·wᵀ, then scatter back.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Scalar>(
    dy: &[T],
    w: &[T],
    batch: usize,
    h: usize,
    wd: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, pad);
    let ow = conv_out_dim(wd, kw, pad);
    let dcol = matmul(dy, w, batch * oh * ow, cout, kh * kw * cin, false, true);
    let mut dx = vec![T::zero(); batch * h * wd * cin];
    col2im_add(&dcol, batch, h, wd, cin, kh, kw, pad, &mut dx);
    dx
}

/// dw[kh,kw,Cin,O] = colᵀ·dy, accumulated over the whole batch in one gemm.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    h: usize,
    wd: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, pad);
    let ow = conv_out_dim(wd, kw, pad);
    let col = im2col(x, batch, h, wd, cin, kh, kw, pad);
    matmul(&col, dy, kh * kw * cin, batch * oh * ow, cout, true, false)
}

// ── 2x2 max pooling ──

/// Floor semantics on odd extents (trailing row/column dropped). Ties pick
/// the first candidate in scan order so the saved index is deterministic.
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut y = vec![T::zero(); batch * oh * ow * c];
    let mut idx = vec![0u32; batch * oh * ow * c];

    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let iy = oy * 2 + dy;
                            let ix = ox * 2 + dx;
                            let at = ((b * h + iy) * w + ix) * c + ch;
                            let v = x[at];
                            if v > best {
                                best = v;
                                best_at = at as u32;
                            }
                        }
                    }
                    y[out_base + ch] = best;
                    idx[out_base + ch] = best_at;
                }
            }
        }
    }
    (y, idx)
}

/// Scatter pooled cotangents back to the winning positions.
pub fn unpool<T: Scalar>(dy: &[T], idx: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (g, &at) in dy.iter().zip(idx) {
        let slot = &mut dx[at as usize];
        *slot = *slot + *g;
    }
    dx
}

/// Adjoint of [`unpool`]: read the winning positions back out.
pub fn gather_idx<T: Scalar>(x: &[T], idx: &[u32]) -> Vec<T> {
    idx.iter().map(|&at| x[at as usize]).collect()
}

// ── channel (last-axis) ops ──

pub fn channel_sum<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a = *a + *v;
        }
    }
    acc
}

pub fn channel_dot<T: Scalar>(a: &[T], b: &[T], c: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for (ra, rb) in a.chunks_exact(c).zip(b.chunks_exact(c)) {
        for ((s, va), vb) in acc.iter_mut().zip(ra).zip(rb) {
            *s = *s + *va * *vb;
        }
    }
    acc
}

pub fn channel_scale<T: Scalar>(x: &[T], s: &[T]) -> Vec<T> {
    let c = s.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for (v, sc) in row.iter().zip(s) {
            y.push(*v * *sc);
        }
    }
    y
}

pub fn channel_add<T: Scalar>(x: &[T], v: &[T]) -> Vec<T> {
    let c = v.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for (a, b) in row.iter().zip(v) {
            y.push(*a + *b);
        }
    }
    y
}

pub fn channel_broadcast<T: Scalar>(v: &[T], rows: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * v.len());
    for _ in 0..rows {
        y.extend_from_slice(v);
    }
    y
}

// ── row ([B, n] last-axis reductions along n, kept per-row) ──

pub fn row_max<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    x.chunks_exact(n)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect()
}

pub fn row_sum<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    x.chunks_exact(n)
        .map(|row| row.iter().copied().fold(T::zero(), |a, v| a + v))
        .collect()
}

pub fn row_broadcast<T: Scalar>(v: &[T], n: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(v.len() * n);
    for &x in v {
        for _ in 0..n {
            y.push(x);
        }
    }
    y
}

// ── label gather/scatter for cross-entropy ──

pub fn gather_labels<T: Scalar>(x: &[T], n: usize, labels: &[u32]) -> Vec<T> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| x[i * n + l as usize])
        .collect()
}

pub fn scatter_labels<T: Scalar>(v: &[T], n: usize, labels: &[u32]) -> Vec<T> {
    let mut y = vec![T::zero(); v.len() * n];
    for (i, (&g, &l)) in v.iter().zip(labels).enumerate() {
        y[i * n + l as usize] = g;
    }
    y
}

// ── elementwise ──

pub fn map2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn map1<T: Scalar>(a: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    a.iter().map(|&x| f(x)).collect()
}

pub fn leaky_relu<T: Scalar>(x: &[T], slope: T) -> Vec<T> {
    map1(x, |v| if v > T::zero() { v } else { slope * v })
}

/// g where the sign reference is positive, slope·g elsewhere — the cotangent
/// rule of [`leaky_relu`], kept as a primitive so it is differentiable again.
pub fn masked_by_sign<T: Scalar>(g: &[T], sign_ref: &[T], slope: T) -> Vec<T> {
    map2(g, sign_ref, |gv, xv| if xv > T::zero() { gv } else { slope * gv })
}

pub fn sum_all<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().fold(T::zero(), |a, v| a + v)
}
