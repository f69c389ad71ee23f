//! Raw numeric kernels behind the graph ops. All layouts are row-major,
//! images are NCHW.

use rayon::prelude::*;

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically
/// `[m, k]` and `b` logically `[k, n]`. A `*_t` flag means the slice holds
/// the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the `m*k`, `k*n` and `m*n`
    // elements of the given slices, whose lengths are checked above.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_hw()
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            line[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_len()];
    let rows = g.cols_rows();
    let ohw = g.out_hw();
    out.par_chunks_mut(g.out_len().max(1))
        .zip(x.par_chunks(g.in_len().max(1)))
        .for_each(|(o, xs)| {
            let mut cols = vec![0.0; rows * ohw];
            im2col(g, xs, &mut cols);
            gemm(g.out_c, rows, ohw, w, false, &cols, false, o, false);
            if let Some(b) = bias {
                for (oc, chunk) in o.chunks_mut(ohw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[oc]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let rows = g.cols_rows();
    let ohw = g.out_hw();
    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let d = &dout[n * g.out_len()..(n + 1) * g.out_len()];
            let dw = need_dw.then(|| {
                let mut cols = vec![0.0; rows * ohw];
                im2col(g, xs, &mut cols);
                let mut dw = vec![0.0; g.out_c * rows];
                gemm(g.out_c, ohw, rows, d, false, &cols, true, &mut dw, false);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcols = vec![0.0; rows * ohw];
                gemm(rows, g.out_c, ohw, w, true, d, false, &mut dcols, false);
                let mut dx = vec![0.0; g.in_len()];
                col2im(g, &dcols, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        per_sample
            .iter()
            .flat_map(|(dx, _)| dx.as_ref().unwrap().iter().copied())
            .collect()
    });
    // Summed in sample order so the result does not depend on scheduling.
    let dw = need_dw.then(|| {
        let mut acc = vec![0.0; g.out_c * rows];
        for (_, dw) in &per_sample {
            for (a, v) in acc.iter_mut().zip(dw.as_ref().unwrap()) {
                *a += v;
            }
        }
        acc
    });
    let db = need_db.then(|| {
        let mut acc = vec![0.0; g.out_c];
        for n in 0..g.batch {
            let d = &dout[n * g.out_len()..(n + 1) * g.out_len()];
            for (oc, chunk) in d.chunks(ohw).enumerate() {
                acc[oc] += chunk.iter().sum::<f64>();
            }
        }
        acc
    });
    ConvGrads { dx, dw, db }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns pooled values and, per output, the flat input index of the
/// maximum (first occurrence wins on ties).
pub(crate) fn max_pool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n_out = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ki in 0..g.kernel {
                    for kj in 0..g.kernel {
                        let i = base + (oh * g.stride + ki) * g.in_w + ow * g.stride + kj;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn mean_pool_forward(g: &PoolGeom, x: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut s = 0.0;
                for ki in 0..g.kernel {
                    let row = base + (oh * g.stride + ki) * g.in_w + ow * g.stride;
                    s += x[row..row + g.kernel].iter().sum::<f64>();
                }
                out.push(s * norm);
            }
        }
    }
    out
}

pub(crate) fn mean_pool_backward(g: &PoolGeom, dout: &[f64], dx: &mut [f64]) {
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let d = dout[(p * g.out_h + oh) * g.out_w + ow] * norm;
                for ki in 0..g.kernel {
                    let row = base + (oh * g.stride + ki) * g.in_w + ow * g.stride;
                    dx[row..row + g.kernel].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
}

/// Maps every flat index of `out_shape` to the flat index of the
/// broadcast source with shape `in_shape` (numpy rules, right-aligned).
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - in_shape.len();
    let mut in_strides = vec![0usize; out_shape.len()];
    let mut stride = 1;
    for d in (0..in_shape.len()).rev() {
        in_strides[d + offset] = if in_shape[d] == 1 { 0 } else { stride };
        stride *= in_shape[d];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let at = [1.0, 3.0, 2.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let bt = [5.0, 7.0, 6.0, 8.0];
        let want = [19.0, 22.0, 43.0, 50.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0; 4];
                gemm(2, 2, 2, aa, ta, bb, tb, &mut c, false);
                assert_eq!(c, want);
            }
        }
    }

    #[test]
    fn broadcast_map_row_vector() {
        assert_eq!(broadcast_index_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }
}
