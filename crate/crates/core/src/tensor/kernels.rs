//! Raw loops shared by the forward and backward passes.

/// `c = a · b + beta · c` for an `m×k` by `k×n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every index matrixmultiply touches.
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

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading an input of `shape` while iterating over `out`
/// (zero along broadcast axes).
pub(crate) fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = super::strides_for(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`
/// in row-major order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0usize;
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..last {
            f(o, ia, ib);
            o += 1;
            ia += la;
            ib += lb;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (x[at(a)] - max).exp();
                y[at(a)] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for a in 0..len {
                    y[at(a)] = x[at(a)] - max - lse;
                }
            } else {
                for a in 0..len {
                    y[at(a)] /= total;
                }
            }
        }
    }
    y
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub t_in: usize,
    pub d_in: usize,
    pub t_out: usize,
    pub kernel: usize,
    pub h_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    /// Input row read by output step `t` through kernel tap `i`, if inside the signal.
    fn source(&self, t: usize, i: usize) -> Option<usize> {
        let pos = t * self.stride + i;
        if pos < self.padding || pos - self.padding >= self.t_in {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

/// Cross-correlation: `out[b,t,h] = sum_{i,d} x[b, t*stride + i - padding, d] * w[i,d,h]`.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], dims: &ConvDims) -> Vec<f64> {
    let ConvDims {
        batch,
        t_in,
        d_in,
        t_out,
        kernel,
        h_out,
        ..
    } = *dims;
    let mut out = vec![0.0; batch * t_out * h_out];
    for b in 0..batch {
        for t in 0..t_out {
            let o = &mut out[(b * t_out + t) * h_out..(b * t_out + t + 1) * h_out];
            for i in 0..kernel {
                let Some(src) = dims.source(t, i) else { continue };
                let row = &x[(b * t_in + src) * d_in..(b * t_in + src + 1) * d_in];
                for (d, &xv) in row.iter().enumerate() {
                    let wrow = &w[(i * d_in + d) * h_out..(i * d_in + d + 1) * h_out];
                    for (acc, &wv) in o.iter_mut().zip(wrow) {
                        *acc += xv * wv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dims: &ConvDims,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let ConvDims {
        batch,
        t_in,
        d_in,
        t_out,
        kernel,
        h_out,
        ..
    } = *dims;
    for b in 0..batch {
        for t in 0..t_out {
            let grow = &g[(b * t_out + t) * h_out..(b * t_out + t + 1) * h_out];
            for i in 0..kernel {
                let Some(src) = dims.source(t, i) else { continue };
                for d in 0..d_in {
                    let widx = (i * d_in + d) * h_out;
                    let xidx = (b * t_in + src) * d_in + d;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wrow = &w[widx..widx + h_out];
                        dx[xidx] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let xv = x[xidx];
                        for (acc, &gv) in dw[widx..widx + h_out].iter_mut().zip(grow) {
                            *acc += xv * gv;
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

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn broadcast_iteration_visits_bias_offsets() {
        let out = [2, 3];
        let sa = aligned_strides(&[2, 3], &out);
        let sb = aligned_strides(&[3], &out);
        let mut seen = Vec::new();
        for_each_broadcast(&out, &sa, &sb, |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen[4], (4, 4, 1));
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn gemm_matches_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 2];
        gemm(2, 2, 1, &a, (2, 1), &b, (1, 1), 0.0, &mut c, (1, 1));
        assert_eq!(c, [3.0, 7.0]);
    }
}
