//! Plain-loop numeric kernels shared by the tape ops.

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler keep the loop vectorized.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }

    /// Output rows `y` whose source row `y + i - ph` is in bounds, and likewise for columns.
    fn valid(&self, i: usize, j: usize) -> ((usize, usize), (usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let y0 = self.ph.saturating_sub(i);
        let y1 = oh.min((self.h + self.ph).saturating_sub(i));
        let x0 = self.pw.saturating_sub(j);
        let x1 = ow.min((self.w + self.pw).saturating_sub(j));
        ((y0, y1.max(y0)), (x0, x1.max(x0)))
    }
}

/// Stride-1 zero-padded cross-correlation, NCHW layout, weights `[out, in, kh, kw]`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let out_map = &mut out[(b * g.out_ch + o) * oh * ow..(b * g.out_ch + o + 1) * oh * ow];
            if let Some(bias) = bias {
                out_map.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..g.in_ch {
                let in_map = &x[(b * g.in_ch + c) * g.h * g.w..(b * g.in_ch + c + 1) * g.h * g.w];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + i) * g.kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let ((y0, y1), (x0, x1)) = g.valid(i, j);
                        for y in y0..y1 {
                            let sy = y + i - g.ph;
                            let src = &in_map[sy * g.w + x0 + j - g.pw..sy * g.w + x1 + j - g.pw];
                            let dst = &mut out_map[y * ow + x0..y * ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let dy_map = &dy[(b * g.out_ch + o) * oh * ow..(b * g.out_ch + o + 1) * oh * ow];
            if let Some(db) = db.as_deref_mut() {
                db[o] += dy_map.iter().sum::<f64>();
            }
            for c in 0..g.in_ch {
                let base = (b * g.in_ch + c) * g.h * g.w;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let widx = ((o * g.in_ch + c) * g.kh + i) * g.kw + j;
                        let ((y0, y1), (x0, x1)) = g.valid(i, j);
                        if let Some(dw) = dw.as_deref_mut() {
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = y + i - g.ph;
                                let src = &x[base + sy * g.w + x0 + j - g.pw..base + sy * g.w + x1 + j - g.pw];
                                acc += dot(&dy_map[y * ow + x0..y * ow + x1], src);
                            }
                            dw[widx] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[widx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in y0..y1 {
                                let sy = y + i - g.ph;
                                let dst = &mut dx[base + sy * g.w + x0 + j - g.pw..base + sy * g.w + x1 + j - g.pw];
                                for (d, s) in dst.iter_mut().zip(&dy_map[y * ow + x0..y * ow + x1]) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `(out_shape, data)` where `out.shape[i] = shape[axes[i]]`.
pub fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // stride in the source for each output axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3 = b^T
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 = a^T
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let axes = [2, 0, 1];
        let (s, p) = permute(&data, &shape, &axes);
        assert_eq!(s, vec![4, 2, 3]);
        // p[k, i, j] = data[i, j, k]
        assert_eq!(p[(1 * 2 + 1) * 3 + 2], data[(1 * 3 + 2) * 4 + 1]);
        let (s2, back) = permute(&p, &s, &inverse_axes(&axes));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom { batch: 1, in_ch: 1, out_ch: 1, h: 2, w: 3, kh: 3, kw: 3, ph: 1, pw: 1 };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(conv2d_forward(&g, &x, &w, None), x.to_vec());
        // shift kernel: picks the left neighbour
        let mut w = vec![0.0; 9];
        w[3] = 1.0;
        assert_eq!(conv2d_forward(&g, &x, &w, Some(&[0.5])), vec![0.5, 1.5, 2.5, 0.5, 4.5, 5.5]);
    }
}
