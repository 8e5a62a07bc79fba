//! Fused forward/backward kernels for the sequence layers.

use crate::error::{DiffError, Result};
use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use crate::real::Real;
use crate::tensor::Tensor;

/// Checks `x: n×c_in`, `w: ks×c_in×c_out` (odd `ks`), `b: 1×c_out`.
pub(crate) fn conv1d_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    if !x.is_matrix() || x.rows() == 0 {
        return Err(DiffError::invalid(
            "conv1d",
            "input must be a non-empty n×c matrix",
        ));
    }
    if w.shape().len() != 3 {
        return Err(DiffError::invalid("conv1d", "kernel must be ks×c_in×c_out"));
    }
    let (ks, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if ks % 2 == 0 {
        return Err(DiffError::invalid(
            "conv1d",
            format!("kernel size {ks} unsupported, must be odd"),
        ));
    }
    if cin != x.cols() {
        return Err(DiffError::shape("conv1d", x.shape(), w.shape()));
    }
    if b.shape() != [1, cout] {
        return Err(DiffError::shape("conv1d", b.shape(), &[1, cout]));
    }
    Ok((x.rows(), ks, cin, cout))
}

/// Rows `t` of the output that see input row `t + off` for kernel tap `k`.
fn tap_range(n: usize, k: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let off = k as isize - pad as isize;
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).min(n as isize);
    if hi <= lo as isize {
        return None;
    }
    let hi = hi as usize;
    Some((lo, hi - lo, (lo as isize + off) as usize))
}

/// Same-length cross-correlation with zero padding of `ks / 2` on each side.
pub(crate) fn conv1d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ks, cin, cout) = conv1d_dims(x, w, b)?;
    let pad = ks / 2;
    let mut out = Vec::with_capacity(n * cout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    let xd = x.data();
    let wd = w.data();
    for k in 0..ks {
        if let Some((lo, rows, src)) = tap_range(n, k, pad) {
            gemm_nn(
                &xd[src * cin..(src + rows) * cin],
                &wd[k * cin * cout..(k + 1) * cin * cout],
                &mut out[lo * cout..(lo + rows) * cout],
                rows,
                cin,
                cout,
            );
        }
    }
    Tensor::matrix(n, cout, out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let (ks, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let n = x.rows();
    let pad = ks / 2;
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let gd = g.data();
    for k in 0..ks {
        if let Some((lo, rows, src)) = tap_range(n, k, pad) {
            let gs = &gd[lo * cout..(lo + rows) * cout];
            gemm_tn(
                &x.data()[src * cin..(src + rows) * cin],
                gs,
                &mut dw.data_mut()[k * cin * cout..(k + 1) * cin * cout],
                rows,
                cin,
                cout,
            );
            if let Some(dx) = dx.as_mut() {
                gemm_nt(
                    gs,
                    &w.data()[k * cin * cout..(k + 1) * cin * cout],
                    &mut dx.data_mut()[src * cin..(src + rows) * cin],
                    rows,
                    cout,
                    cin,
                );
            }
        }
    }
    ConvGrads {
        dx,
        dw,
        db: col_sums(g),
    }
}

pub(crate) fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(&[1, g.cols()]);
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Checks `x: n×f`, `w: f×3d`, `u: d×3d`, `b: 1×3d`, `h0: 1×d`. Returns `d`.
pub(crate) fn gru_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
    b: &Tensor<T>,
    h0: Option<&Tensor<T>>,
) -> Result<usize> {
    if !x.is_matrix() || x.rows() == 0 {
        return Err(DiffError::invalid("gru", "input sequence must be non-empty"));
    }
    if !u.is_matrix() || u.cols() != 3 * u.rows() {
        return Err(DiffError::invalid(
            "gru",
            format!("recurrent weight {:?} is not d×3d", u.shape()),
        ));
    }
    let d = u.rows();
    if !w.is_matrix() || w.rows() != x.cols() || w.cols() != 3 * d {
        return Err(DiffError::shape("gru", x.shape(), w.shape()));
    }
    if b.shape() != [1, 3 * d] {
        return Err(DiffError::shape("gru", b.shape(), &[1, 3 * d]));
    }
    if let Some(h) = h0 {
        if h.shape() != [1, d] {
            return Err(DiffError::shape("gru", h.shape(), &[1, d]));
        }
    }
    Ok(d)
}

/// Runs the GRU over the whole sequence.
///
/// Gate columns are ordered `[z | r | n]`:
/// `z = σ(x·W_z + h·U_z + b_z)`, `r = σ(x·W_r + h·U_r + b_r)`,
/// `n = tanh(x·W_n + (r⊙h)·U_n + b_n)`, `h' = (1 − z)⊙h + z⊙n`.
///
/// Returns the `n×d` state sequence and the cached post-activation gates.
pub(crate) fn gru_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
    b: &Tensor<T>,
    h0: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = gru_dims(x, w, u, b, h0)?;
    let n = x.rows();
    let f = x.cols();
    let d3 = 3 * d;
    let mut gates = Vec::with_capacity(n * d3);
    for _ in 0..n {
        gates.extend_from_slice(b.data());
    }
    gemm_nn(x.data(), w.data(), &mut gates, n, f, d3);

    let ud = u.data();
    let zero_h = vec![T::zero(); d];
    let mut hs = vec![T::zero(); n * d];
    let mut rh = vec![T::zero(); d];
    for t in 0..n {
        let (done, rest) = hs.split_at_mut(t * d);
        let hp: &[T] = if t == 0 {
            h0.map_or(&zero_h[..], |h| h.data())
        } else {
            &done[(t - 1) * d..]
        };
        let a = &mut gates[t * d3..(t + 1) * d3];
        let (azr, an) = a.split_at_mut(2 * d);
        for i in 0..d {
            if hp[i] != T::zero() {
                axpy(hp[i], &ud[i * d3..i * d3 + 2 * d], azr);
            }
        }
        for v in azr.iter_mut() {
            *v = sigmoid(*v);
        }
        for i in 0..d {
            rh[i] = azr[d + i] * hp[i];
        }
        for i in 0..d {
            if rh[i] != T::zero() {
                axpy(rh[i], &ud[i * d3 + 2 * d..(i + 1) * d3], an);
            }
        }
        let h = &mut rest[..d];
        for j in 0..d {
            an[j] = an[j].tanh();
            let z = azr[j];
            h[j] = (T::one() - z) * hp[j] + z * an[j];
        }
    }
    Ok((Tensor::matrix(n, d, hs)?, gates))
}

pub(crate) struct GruGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub du: Tensor<T>,
    pub db: Tensor<T>,
    pub dh0: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
    h0: Option<&Tensor<T>>,
    hs: &Tensor<T>,
    gates: &[T],
    dh_out: &Tensor<T>,
    need_dx: bool,
) -> GruGrads<T> {
    let n = x.rows();
    let f = x.cols();
    let d = u.rows();
    let d3 = 3 * d;
    let ud = u.data();
    let one = T::one();
    let zero_h = vec![T::zero(); d];

    let mut dgx = vec![T::zero(); n * d3];
    let mut du = vec![T::zero(); d * d3];
    let mut carry = vec![T::zero(); d];
    let mut dh = vec![T::zero(); d];
    let mut dh_prev = vec![T::zero(); d];
    let mut rh = vec![T::zero(); d];

    for t in (0..n).rev() {
        let hp: &[T] = if t == 0 {
            h0.map_or(&zero_h[..], |h| h.data())
        } else {
            hs.row(t - 1)
        };
        let gt = &gates[t * d3..(t + 1) * d3];
        let (gz, gr, gn) = (&gt[..d], &gt[d..2 * d], &gt[2 * d..]);
        let dg = &mut dgx[t * d3..(t + 1) * d3];
        let dout = dh_out.row(t);
        for j in 0..d {
            dh[j] = dout[j] + carry[j];
            let dz = dh[j] * (gn[j] - hp[j]);
            let dn = dh[j] * gz[j];
            dg[j] = dz * gz[j] * (one - gz[j]);
            dg[2 * d + j] = dn * (one - gn[j] * gn[j]);
            dh_prev[j] = dh[j] * (one - gz[j]);
            rh[j] = gr[j] * hp[j];
        }
        let (dzr, dan) = dg.split_at_mut(2 * d);
        for i in 0..d {
            let urow = &ud[i * d3 + 2 * d..(i + 1) * d3];
            let drh = dot(urow, dan);
            axpy(rh[i], dan, &mut du[i * d3 + 2 * d..(i + 1) * d3]);
            dzr[d + i] = drh * hp[i] * gr[i] * (one - gr[i]);
            dh_prev[i] += drh * gr[i];
        }
        for i in 0..d {
            dh_prev[i] += dot(&ud[i * d3..i * d3 + 2 * d], dzr);
            if hp[i] != T::zero() {
                axpy(hp[i], dzr, &mut du[i * d3..i * d3 + 2 * d]);
            }
        }
        std::mem::swap(&mut carry, &mut dh_prev);
    }

    let dgx = Tensor::matrix(n, d3, dgx).expect("gate gradient shape");
    let mut dw = Tensor::zeros(w.shape());
    gemm_tn(x.data(), dgx.data(), dw.data_mut(), n, f, d3);
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm_nt(dgx.data(), w.data(), dx.data_mut(), n, d3, f);
        dx
    });
    GruGrads {
        dx,
        dw,
        du: Tensor::matrix(d, d3, du).expect("recurrent gradient shape"),
        db: col_sums(&dgx),
        dh0: Tensor::matrix(1, d, carry).expect("state gradient shape"),
    }
}
