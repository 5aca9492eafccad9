//! Raw compute loops shared by forward and backward passes.
//!
//! Every reduction accumulates left-to-right in a fixed loop order; nothing
//! here may reorder sums based on runtime conditions.

use super::Scalar;

/// C\[m,n\] += A\[m,k\] * B\[k,n\]
pub fn matmul_accum<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// dA\[m,k\] += dC\[m,n\] * B^T, i.e. dA\[i,p\] += sum_j dC\[i,j\] B\[p,j\]
pub fn matmul_grad_lhs<S: Scalar>(dc: &[S], b: &[S], da: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (dv, bv) in dcrow.iter().zip(brow) {
                acc = acc + *dv * *bv;
            }
            darow[p] = darow[p] + acc;
        }
    }
}

/// dB\[k,n\] += A^T * dC, i.e. dB\[p,j\] += sum_i A\[i,p\] dC\[i,j\]
pub fn matmul_grad_rhs<S: Scalar>(dc: &[S], a: &[S], db: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &dv) in dbrow.iter_mut().zip(dcrow) {
                *dbv = *dbv + av * dv;
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
/// input \[N,Cin,H,W\], weight \[Cout,Cin,3,3\], out \[N,Cout,H,W\] (zeroed by caller).
pub fn conv2d_3x3<S: Scalar>(
    input: &[S],
    weight: &[S],
    out: &mut [S],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for img in 0..n {
        for co in 0..cout {
            let obase = (img * cout + co) * plane;
            for ci in 0..cin {
                let ibase = (img * cin + ci) * plane;
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = weight[wbase + ky * 3 + kx];
                        // out[y][x] += wv * in[y + ky - 1][x + kx - 1]
                        let (y0, y1) = row_range(ky, h);
                        let (x0, x1) = row_range(kx, w);
                        for y in y0..y1 {
                            let orow = obase + y * w;
                            let irow = ibase + (y + ky - 1) * w;
                            for x in x0..x1 {
                                out[orow + x] = out[orow + x] + wv * input[irow + (x + kx) - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_3x3` with respect to the input (accumulating).
pub fn conv2d_3x3_grad_input<S: Scalar>(
    dout: &[S],
    weight: &[S],
    dinput: &mut [S],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for img in 0..n {
        for ci in 0..cin {
            let ibase = (img * cin + ci) * plane;
            for co in 0..cout {
                let obase = (img * cout + co) * plane;
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = weight[wbase + ky * 3 + kx];
                        let (y0, y1) = row_range(ky, h);
                        let (x0, x1) = row_range(kx, w);
                        for y in y0..y1 {
                            let orow = obase + y * w;
                            let irow = ibase + (y + ky - 1) * w;
                            for x in x0..x1 {
                                let ii = irow + (x + kx) - 1;
                                dinput[ii] = dinput[ii] + wv * dout[orow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_3x3` with respect to the weight (accumulating).
pub fn conv2d_3x3_grad_weight<S: Scalar>(
    dout: &[S],
    input: &[S],
    dweight: &mut [S],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for img in 0..n {
        for co in 0..cout {
            let obase = (img * cout + co) * plane;
            for ci in 0..cin {
                let ibase = (img * cin + ci) * plane;
                let wbase = (co * cin + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let (y0, y1) = row_range(ky, h);
                        let (x0, x1) = row_range(kx, w);
                        let mut acc = S::zero();
                        for y in y0..y1 {
                            let orow = obase + y * w;
                            let irow = ibase + (y + ky - 1) * w;
                            for x in x0..x1 {
                                acc = acc + dout[orow + x] * input[irow + (x + kx) - 1];
                            }
                        }
                        let wi = wbase + ky * 3 + kx;
                        dweight[wi] = dweight[wi] + acc;
                    }
                }
            }
        }
    }
}

/// Valid output range along one axis for kernel offset `k` (0..3, pad 1):
/// requires 0 <= pos + k - 1 < len.
#[inline]
fn row_range(k: usize, len: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(k);
    let hi = (len + 1 - k).min(len);
    (lo, hi)
}

/// Right-aligned broadcast: pads `shape` with leading 1s to `ndim` entries.
pub fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let pa = pad_shape(a, ndim);
    let pb = pad_shape(b, ndim);
    let mut out = Vec::with_capacity(ndim);
    for (&da, &db) in pa.iter().zip(&pb) {
        if da == db || da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            return None;
        }
    }
    Some(out)
}

/// Walks the broadcast output in row-major order, invoking
/// `f(out_idx, a_idx, b_idx)` with the flat operand indices. Operand strides
/// are zero along broadcast dimensions, so the odometer advance is cheap.
pub fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let ndim = out_shape.len();
    let pa = pad_shape(a_shape, ndim);
    let pb = pad_shape(b_shape, ndim);

    let strides = |p: &[usize]| -> Vec<usize> {
        let mut s = vec![0usize; ndim];
        let mut acc = 1usize;
        for d in (0..ndim).rev() {
            s[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        s
    };
    let sa = strides(&pa);
    let sb = strides(&pb);

    let total: usize = out_shape.iter().product();
    let mut coords = vec![0usize; ndim];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for out_idx in 0..total {
        f(out_idx, ai, bi);
        // odometer increment from the innermost dimension
        for d in (0..ndim).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2x2] * [2x2]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_accum(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(
            broadcast_shape(&[4, 2, 5, 5], &[2, 1, 1]),
            Some(vec![4, 2, 5, 5])
        );
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn broadcast_walk_row_bias() {
        // [2,3] + [3]: b index cycles 0,1,2
        let mut seen = Vec::new();
        for_each_broadcast(&[2, 3], &[2, 3], &[3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![
                (0, 0, 0),
                (1, 1, 1),
                (2, 2, 2),
                (3, 3, 0),
                (4, 4, 1),
                (5, 5, 2)
            ]
        );
    }
}
