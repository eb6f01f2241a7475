//! Matrix products on top of `matrixmultiply`.
//!
//! Every output element is accumulated in the same k-order regardless of the
//! m/n extents, so a single row computed on its own matches the same row of a
//! larger product bit for bit. Incremental decoding relies on this.

use crate::tensor::Tensor;

/// `c (+)= op(a) * op(b)` for row-major buffers; `ta`/`tb` read the operand
/// transposed. `a` is m×k after op, `b` is k×n after op.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every access made through these strides.
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

impl Tensor {
    /// Batched product `[..., m, k] x [..., k, n]`. A 2-D right operand is
    /// shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        matmul_impl(self, rhs, false)
    }

    /// `self x rhsᵀ` with `rhs` shaped `[..., n, k]`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        matmul_impl(self, rhs, true)
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, b_t: bool) -> Tensor {
    assert!(a.rank() >= 2, "matmul lhs must be at least 2-D, got {:?}", a.shape());
    assert!(b.rank() >= 2, "matmul rhs must be at least 2-D, got {:?}", b.shape());
    let ar = a.rank();
    let br = b.rank();
    let (m, k) = (a.dim(ar - 2), a.dim(ar - 1));
    let (kb, n) = if b_t {
        (b.dim(br - 1), b.dim(br - 2))
    } else {
        (b.dim(br - 2), b.dim(br - 1))
    };
    assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let shared_rhs = br == 2;
    let batch: usize = a.shape()[..ar - 2].iter().product();
    if !shared_rhs {
        assert_eq!(
            &a.shape()[..ar - 2],
            &b.shape()[..br - 2],
            "matmul batch dims {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    }
    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    if shared_rhs {
        gemm(batch * m, k, n, ad, false, bd, b_t, &mut out, false);
    } else {
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                b_t,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    let (av, bv) = (a.data_arc(), b.data_arc());
    Tensor::from_op(out_shape, out, vec![a.clone(), b.clone()], move |g, needs| {
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; av.len()];
            if shared_rhs {
                // dA = G · op(B)ᵀ
                gemm(batch * m, n, k, g, false, &bv, !b_t, &mut ga, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &bv[i * k * n..],
                        !b_t,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
            }
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; bv.len()];
            if shared_rhs {
                if b_t {
                    // dB (n×k) = Gᵀ · A
                    gemm(n, batch * m, k, g, true, &av, false, &mut gb, false);
                } else {
                    gemm(k, batch * m, n, &av, true, g, false, &mut gb, false);
                }
            } else {
                for i in 0..batch {
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if b_t {
                        gemm(n, m, k, &g[i * m * n..], true, &av[i * m * k..], false, dst, false);
                    } else {
                        gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, dst, false);
                    }
                }
            }
            gb
        });
        vec![ga, gb]
    })
}
