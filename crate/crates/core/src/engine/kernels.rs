//! Raw numeric kernels behind the differentiable ops.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, x: &[f64], group: usize, col: &mut [f64]) {
    let n = g.ho * g.wo;
    let c0 = group * g.cin_g();
    for ci in 0..g.cin_g() {
        let plane = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], group: usize, dx: &mut [f64]) {
    let n = g.ho * g.wo;
    let c0 = group * g.cin_g();
    for ci in 0..g.cin_g() {
        let plane = &mut dx[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch() * n] };
    for group in 0..g.groups {
        let kg = &k[group * g.cout_g() * g.patch()..(group + 1) * g.cout_g() * g.patch()];
        let xin: &[f64] = if g.is_pointwise() {
            &x[group * g.cin_g() * n..(group + 1) * g.cin_g() * n]
        } else {
            im2col(g, x, group, &mut col);
            &col
        };
        let og = &mut out[group * g.cout_g() * n..(group + 1) * g.cout_g() * n];
        gemm(g.cout_g(), g.patch(), n, kg, false, xin, false, og, 0.0);
    }
    if let Some(b) = bias {
        for (co, plane) in out.chunks_mut(n).enumerate() {
            for v in plane {
                *v += b[co];
            }
        }
    }
    out
}

/// Returns `(dx, dk, dbias)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dk: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = g.ho * g.wo;
    let mut dx = want_dx.then(|| vec![0.0; g.cin * g.h * g.w]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let db = want_db.then(|| dout.chunks(n).map(|p| p.iter().sum()).collect());
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; g.patch() * n] };
    let psz = g.cout_g() * g.patch();
    for group in 0..g.groups {
        let dog = &dout[group * g.cout_g() * n..(group + 1) * g.cout_g() * n];
        if let Some(dk) = dk.as_mut() {
            let xin: &[f64] = if pointwise {
                &x[group * g.cin_g() * n..(group + 1) * g.cin_g() * n]
            } else {
                im2col(g, x, group, &mut col);
                &col
            };
            gemm(
                g.cout_g(),
                n,
                g.patch(),
                dog,
                false,
                xin,
                true,
                &mut dk[group * psz..(group + 1) * psz],
                0.0,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let kg = &k[group * psz..(group + 1) * psz];
            if pointwise {
                let dxg = &mut dx[group * g.cin_g() * n..(group + 1) * g.cin_g() * n];
                gemm(g.patch(), g.cout_g(), n, kg, true, dog, false, dxg, 1.0);
            } else {
                gemm(g.patch(), g.cout_g(), n, kg, true, dog, false, &mut col, 0.0);
                col2im(g, &col, group, dx);
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation reference for the im2col path.
    fn conv_naive(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.ho * g.wo];
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        for co in 0..g.cout {
            let grp = co / cout_g;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xc = grp * cin_g + ci;
                                s += x[(xc * g.h + iy as usize) * g.w + ix as usize]
                                    * k[((co * cin_g + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[(co * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_summation() {
        for &(cin, cout, k, stride, pad, groups) in
            &[(2, 4, 3, 1, 1, 1), (4, 4, 3, 2, 1, 4), (3, 2, 1, 1, 0, 1), (4, 6, 3, 2, 1, 2)]
        {
            let (h, w) = (6, 5);
            let g = ConvGeom {
                cin,
                h,
                w,
                cout,
                kh: k,
                kw: k,
                stride,
                pad,
                groups,
                ho: (h + 2 * pad - k) / stride + 1,
                wo: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let kk: Vec<f64> = (0..cout * cin / groups * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let fast = conv2d_forward(&g, &x, &kk, None);
            let slow = conv_naive(&g, &x, &kk);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
