//! Dense kernels shared by the forward and backward passes.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a 1-D convolution over `[batch, channels, time]` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_in: usize,
    pub t_out: usize,
}

/// Range of output steps `t` for which `t*stride + k - pad` lands inside `[0, t_in)`.
fn valid_range(k: usize, g: &Conv1dGeom, t_len: usize, src_len: usize) -> (usize, usize) {
    // index = t*stride + k - pad must satisfy 0 <= index < src_len
    let lo = if k >= g.pad {
        0
    } else {
        (g.pad - k).div_ceil(g.stride)
    };
    let hi_excl = if src_len + g.pad > k {
        ((src_len + g.pad - k - 1) / g.stride + 1).min(t_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// Weight layout `[c_out, c_in, kernel]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.c_out * g.t_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let yrow = &mut y[(b * g.c_out + o) * g.t_out..(b * g.c_out + o + 1) * g.t_out];
            yrow.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.c_in {
                let xrow = &x[(b * g.c_in + c) * g.t_in..(b * g.c_in + c + 1) * g.t_in];
                for k in 0..g.kernel {
                    let wv = w[(o * g.c_in + c) * g.kernel + k];
                    let (lo, hi) = valid_range(k, g, g.t_out, g.t_in);
                    for t in lo..hi {
                        yrow[t] += wv * xrow[t * g.stride + k - g.pad];
                    }
                }
            }
        }
    }
    y
}

pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &Conv1dGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for b in 0..g.batch {
            for o in 0..g.c_out {
                let row = &dy[(b * g.c_out + o) * g.t_out..(b * g.c_out + o + 1) * g.t_out];
                db[o] += row.iter().sum::<f64>();
            }
        }
    }
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let dyrow = &dy[(b * g.c_out + o) * g.t_out..(b * g.c_out + o + 1) * g.t_out];
            for c in 0..g.c_in {
                let base = (b * g.c_in + c) * g.t_in;
                for k in 0..g.kernel {
                    let widx = (o * g.c_in + c) * g.kernel + k;
                    let (lo, hi) = valid_range(k, g, g.t_out, g.t_in);
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += dyrow[t] * x[base + t * g.stride + k - g.pad];
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        for t in lo..hi {
                            dx[base + t * g.stride + k - g.pad] += wv * dyrow[t];
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution; weight layout `[c_in, c_out, kernel]`.
pub fn conv_transpose1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.c_out * g.t_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let yrow = &mut y[(b * g.c_out + o) * g.t_out..(b * g.c_out + o + 1) * g.t_out];
            yrow.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.c_in {
                let xrow = &x[(b * g.c_in + c) * g.t_in..(b * g.c_in + c + 1) * g.t_in];
                for k in 0..g.kernel {
                    let wv = w[(c * g.c_out + o) * g.kernel + k];
                    // output index = t*stride + k - pad over input steps t
                    let (lo, hi) = valid_range(k, g, g.t_in, g.t_out);
                    for t in lo..hi {
                        yrow[t * g.stride + k - g.pad] += wv * xrow[t];
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &Conv1dGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for b in 0..g.batch {
            for o in 0..g.c_out {
                let row = &dy[(b * g.c_out + o) * g.t_out..(b * g.c_out + o + 1) * g.t_out];
                db[o] += row.iter().sum::<f64>();
            }
        }
    }
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let dyrow = &dy[(b * g.c_out + o) * g.t_out..(b * g.c_out + o + 1) * g.t_out];
            for c in 0..g.c_in {
                let base = (b * g.c_in + c) * g.t_in;
                for k in 0..g.kernel {
                    let widx = (c * g.c_out + o) * g.kernel + k;
                    let (lo, hi) = valid_range(k, g, g.t_in, g.t_out);
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += x[base + t] * dyrow[t * g.stride + k - g.pad];
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        for t in lo..hi {
                            dx[base + t] += wv * dyrow[t * g.stride + k - g.pad];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], g: &Conv1dGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.batch * g.c_out * g.t_out];
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for t in 0..g.t_out {
                    let mut acc = bias[o];
                    for c in 0..g.c_in {
                        for k in 0..g.kernel {
                            let idx = (t * g.stride + k) as isize - g.pad as isize;
                            if idx >= 0 && (idx as usize) < g.t_in {
                                acc += w[(o * g.c_in + c) * g.kernel + k]
                                    * x[(b * g.c_in + c) * g.t_in + idx as usize];
                            }
                        }
                    }
                    y[(b * g.c_out + o) * g.t_out + t] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loop() {
        let g = Conv1dGeom {
            batch: 2,
            c_in: 3,
            c_out: 2,
            kernel: 4,
            stride: 2,
            pad: 1,
            t_in: 10,
            t_out: 5,
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..24).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let bias = [0.5, -0.25];
        assert_eq!(
            conv1d_forward(&x, &w, &bias, &g),
            naive_conv(&x, &w, &bias, &g)
        );
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
        let g = Conv1dGeom {
            batch: 1,
            c_in: 2,
            c_out: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
            t_in: 8,
            t_out: 4,
        };
        let gt = Conv1dGeom {
            c_in: 3,
            c_out: 2,
            t_in: 4,
            t_out: 8,
            ..g
        };
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).cos()).collect();
        let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.13).sin()).collect();
        let cx = conv1d_forward(&x, &w, &[0.0; 3], &g);
        let ty = conv_transpose1d_forward(&y, &w, &[0.0; 2], &gt);
        let lhs = dot(&cx, &y);
        let rhs = dot(&x, &ty);
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        // b transposed to 4x3
        let bt: Vec<f64> = (0..4)
            .flat_map(|j| (0..3).map(move |p| (p * 4 + j) as f64 * 0.5))
            .collect();
        let mut c2 = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        let at: Vec<f64> = (0..3)
            .flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64))
            .collect();
        let mut c3 = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
    }
}
