//! Hot numeric kernels: 3x3/stride-1/pad-1 convolution and matmul.
//!
//! Each kernel has a sequential and (behind the `parallel` feature) a
//! rayon-parallel variant. Parallelism is over disjoint output regions with a
//! fixed inner summation order, so results are bitwise identical across thread
//! counts and to the sequential path.
//!
//! In [`Precision::F32`] the kernels convert operands to `f32` and accumulate
//! in single precision, matching real f32 training arithmetic; outputs are
//! stored back as exactly-representable f64 values.

use crate::tensor::Precision;

/// Work threshold below which the parallel variants fall back to sequential.
const PAR_MIN_MACS: usize = 1 << 15;

trait Elem:
    Copy + Default + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
fn to_elems<T: Elem>(src: &[f64]) -> Vec<T> {
    src.iter().map(|&v| T::from_f64(v)).collect()
}

#[inline]
fn store<T: Elem>(src: &[T], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.to_f64();
    }
}

#[inline]
fn add_store<T: Elem>(src: &[T], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s.to_f64();
    }
}

/// Geometry of a conv2d call: kernel fixed at 3x3, stride 1, pad 1.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
    #[inline]
    fn macs(&self) -> usize {
        self.batch * self.c_out * self.c_in * self.hw() * 9
    }
}

// Convolution is lowered to im2col plus a matmul whose inner loops run over
// the full H*W extent, which keeps the hot loops long enough to vectorize.
// The column matrix is laid out [Cin*9][H*W] so tap k of the kernel lines up
// with one contiguous row.

/// Fill cols[k][pos] with the input value under kernel tap k at output
/// position pos (zero outside the padded frame). Row segments are copied
/// contiguously.
fn im2col<T: Elem>(inp: &[T], cols: &mut [T], d: &ConvDims) {
    let (h, w) = (d.h, d.w);
    let hw = d.hw();
    for ic in 0..d.c_in {
        let in_c = &inp[ic * hw..(ic + 1) * hw];
        for ky in 0..3usize {
            let y0 = 1usize.saturating_sub(ky);
            let y1 = (h + 1 - ky).min(h);
            for kx in 0..3usize {
                let k = (ic * 3 + ky) * 3 + kx;
                let col = &mut cols[k * hw..(k + 1) * hw];
                col.fill(T::default());
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + ky - 1;
                    col[y * w + x0..y * w + x1]
                        .copy_from_slice(&in_c[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1]);
                }
            }
        }
    }
}

/// Scatter-add the column-layout gradients back into the input layout; the
/// adjoint of [`im2col`].
fn col2im_add<T: Elem>(cols: &[T], d_in: &mut [T], d: &ConvDims) {
    let (h, w) = (d.h, d.w);
    let hw = d.hw();
    for ic in 0..d.c_in {
        let gi_c = &mut d_in[ic * hw..(ic + 1) * hw];
        for ky in 0..3usize {
            let y0 = 1usize.saturating_sub(ky);
            let y1 = (h + 1 - ky).min(h);
            for kx in 0..3usize {
                let k = (ic * 3 + ky) * 3 + kx;
                let col = &cols[k * hw..(k + 1) * hw];
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + ky - 1;
                    let dst = &mut gi_c[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                    let src = &col[y * w + x0..y * w + x1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// One sample's forward conv: out[oc][pos] = sum_k w[oc][k] * cols[k][pos].
fn conv_fwd_sample<T: Elem>(inp: &[T], wgt: &[T], out: &mut [T], cols: &mut [T], d: &ConvDims) {
    let hw = d.hw();
    let taps = d.c_in * 9;
    im2col(inp, cols, d);
    for oc in 0..d.c_out {
        let out_c = &mut out[oc * hw..(oc + 1) * hw];
        out_c.fill(T::default());
        let wrow = &wgt[oc * taps..(oc + 1) * taps];
        for (k, &wv) in wrow.iter().enumerate() {
            let col = &cols[k * hw..(k + 1) * hw];
            for (o, c) in out_c.iter_mut().zip(col) {
                *o += wv * *c;
            }
        }
    }
}

/// One sample's input gradient via the transposed tap matrix and col2im.
fn conv_bwd_input_sample<T: Elem>(
    d_out: &[T],
    wgt: &[T],
    d_in: &mut [T],
    d_cols: &mut [T],
    d: &ConvDims,
) {
    let hw = d.hw();
    let taps = d.c_in * 9;
    d_cols.fill(T::default());
    for oc in 0..d.c_out {
        let go_c = &d_out[oc * hw..(oc + 1) * hw];
        let wrow = &wgt[oc * taps..(oc + 1) * taps];
        for (k, &wv) in wrow.iter().enumerate() {
            let dcol = &mut d_cols[k * hw..(k + 1) * hw];
            for (dc, go) in dcol.iter_mut().zip(go_c) {
                *dc += wv * *go;
            }
        }
    }
    col2im_add(d_cols, d_in, d);
}

/// One sample's weight-gradient contribution: d_w[oc][k] += <d_out[oc], cols[k]>.
fn conv_bwd_weight_sample<T: Elem>(d_out: &[T], cols: &[T], d_w: &mut [T], d: &ConvDims) {
    let hw = d.hw();
    let taps = d.c_in * 9;
    for oc in 0..d.c_out {
        let go_c = &d_out[oc * hw..(oc + 1) * hw];
        let dw_row = &mut d_w[oc * taps..(oc + 1) * taps];
        for (k, dw) in dw_row.iter_mut().enumerate() {
            let col = &cols[k * hw..(k + 1) * hw];
            let mut acc = T::default();
            for (go, c) in go_c.iter().zip(col) {
                acc += *go * *c;
            }
            *dw += acc;
        }
    }
}

fn matmul_impl<T: Elem>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

// d_a[i,kk] = sum_j d_c[i,j] * b[kk,j]
fn matmul_bwd_a_impl<T: Elem>(d_c: &[T], b: &[T], d_a: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gc = &d_c[i * n..(i + 1) * n];
        let ga = &mut d_a[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::default();
            for (g, bv) in gc.iter().zip(brow) {
                acc += *g * *bv;
            }
            ga[kk] += acc;
        }
    }
}

// d_b[kk,j] = sum_i a[i,kk] * d_c[i,j]
fn matmul_bwd_b_impl<T: Elem>(a: &[T], d_c: &[T], d_b: &mut [T], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let gb = &mut d_b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[i * k + kk];
            let gc = &d_c[i * n..(i + 1) * n];
            for (g, gcv) in gb.iter_mut().zip(gc) {
                *g += av * *gcv;
            }
        }
    }
}

macro_rules! with_elems {
    ($precision:expr, $ty:ident, $body:block) => {
        match $precision {
            Precision::F32 => {
                type $ty = f32;
                $body
            }
            Precision::F64 => {
                type $ty = f64;
                $body
            }
        }
    };
}

/// Sequential kernel variants.
pub mod seq {
    use super::*;

    pub fn conv2d_forward(inp: &[f64], wgt: &[f64], out: &mut [f64], d: &ConvDims, p: Precision) {
        with_elems!(p, T, {
            let inp_t: Vec<T> = to_elems(inp);
            let wgt_t: Vec<T> = to_elems(wgt);
            let mut out_t: Vec<T> = vec![T::default(); out.len()];
            let mut cols: Vec<T> = vec![T::default(); d.c_in * 9 * d.hw()];
            let per_in = d.c_in * d.hw();
            let per_out = d.c_out * d.hw();
            for b in 0..d.batch {
                conv_fwd_sample(
                    &inp_t[b * per_in..(b + 1) * per_in],
                    &wgt_t,
                    &mut out_t[b * per_out..(b + 1) * per_out],
                    &mut cols,
                    d,
                );
            }
            store(&out_t, out);
        });
    }

    pub fn conv2d_backward_input(
        d_out: &[f64],
        wgt: &[f64],
        d_in: &mut [f64],
        d: &ConvDims,
        p: Precision,
    ) {
        with_elems!(p, T, {
            let go_t: Vec<T> = to_elems(d_out);
            let wgt_t: Vec<T> = to_elems(wgt);
            let mut gi_t: Vec<T> = vec![T::default(); d_in.len()];
            let mut d_cols: Vec<T> = vec![T::default(); d.c_in * 9 * d.hw()];
            let per_in = d.c_in * d.hw();
            let per_out = d.c_out * d.hw();
            for b in 0..d.batch {
                conv_bwd_input_sample(
                    &go_t[b * per_out..(b + 1) * per_out],
                    &wgt_t,
                    &mut gi_t[b * per_in..(b + 1) * per_in],
                    &mut d_cols,
                    d,
                );
            }
            add_store(&gi_t, d_in);
        });
    }

    pub fn conv2d_backward_weight(
        inp: &[f64],
        d_out: &[f64],
        d_w: &mut [f64],
        d: &ConvDims,
        p: Precision,
    ) {
        with_elems!(p, T, {
            let inp_t: Vec<T> = to_elems(inp);
            let go_t: Vec<T> = to_elems(d_out);
            let mut gw_t: Vec<T> = vec![T::default(); d_w.len()];
            let mut cols: Vec<T> = vec![T::default(); d.c_in * 9 * d.hw()];
            let per_in = d.c_in * d.hw();
            let per_out = d.c_out * d.hw();
            for b in 0..d.batch {
                im2col(&inp_t[b * per_in..(b + 1) * per_in], &mut cols, d);
                conv_bwd_weight_sample(&go_t[b * per_out..(b + 1) * per_out], &cols, &mut gw_t, d);
            }
            add_store(&gw_t, d_w);
        });
    }

    pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, p: Precision) {
        with_elems!(p, T, {
            let a_t: Vec<T> = to_elems(a);
            let b_t: Vec<T> = to_elems(b);
            let mut c_t: Vec<T> = vec![T::default(); c.len()];
            matmul_impl(&a_t, &b_t, &mut c_t, m, k, n);
            store(&c_t, c);
        });
    }

    pub fn matmul_backward(
        a: &[f64],
        b: &[f64],
        d_c: &[f64],
        d_a: Option<&mut [f64]>,
        d_b: Option<&mut [f64]>,
        m: usize,
        k: usize,
        n: usize,
        p: Precision,
    ) {
        with_elems!(p, T, {
            let dc_t: Vec<T> = to_elems(d_c);
            if let Some(da) = d_a {
                let b_t: Vec<T> = to_elems(b);
                let mut t: Vec<T> = vec![T::default(); da.len()];
                matmul_bwd_a_impl(&dc_t, &b_t, &mut t, m, k, n);
                add_store(&t, da);
            }
            if let Some(db) = d_b {
                let a_t: Vec<T> = to_elems(a);
                let mut t: Vec<T> = vec![T::default(); db.len()];
                matmul_bwd_b_impl(&a_t, &dc_t, &mut t, m, k, n);
                add_store(&t, db);
            }
        });
    }
}

/// Rayon-parallel kernel variants. Bitwise identical to [`seq`].
#[cfg(feature = "parallel")]
pub mod par {
    use super::*;
    use rayon::prelude::*;

    pub fn conv2d_forward(inp: &[f64], wgt: &[f64], out: &mut [f64], d: &ConvDims, p: Precision) {
        with_elems!(p, T, {
            let inp_t: Vec<T> = to_elems(inp);
            let wgt_t: Vec<T> = to_elems(wgt);
            let mut out_t: Vec<T> = vec![T::default(); out.len()];
            let per_in = d.c_in * d.hw();
            let per_out = d.c_out * d.hw();
            out_t
                .par_chunks_mut(per_out)
                .zip(inp_t.par_chunks(per_in))
                .for_each(|(o, i)| {
                    let mut cols: Vec<T> = vec![T::default(); d.c_in * 9 * d.hw()];
                    conv_fwd_sample(i, &wgt_t, o, &mut cols, d)
                });
            store(&out_t, out);
        });
    }

    pub fn conv2d_backward_input(
        d_out: &[f64],
        wgt: &[f64],
        d_in: &mut [f64],
        d: &ConvDims,
        p: Precision,
    ) {
        with_elems!(p, T, {
            let go_t: Vec<T> = to_elems(d_out);
            let wgt_t: Vec<T> = to_elems(wgt);
            let mut gi_t: Vec<T> = vec![T::default(); d_in.len()];
            let per_in = d.c_in * d.hw();
            let per_out = d.c_out * d.hw();
            gi_t.par_chunks_mut(per_in)
                .zip(go_t.par_chunks(per_out))
                .for_each(|(gi, go)| {
                    let mut d_cols: Vec<T> = vec![T::default(); d.c_in * 9 * d.hw()];
                    conv_bwd_input_sample(go, &wgt_t, gi, &mut d_cols, d)
                });
            add_store(&gi_t, d_in);
        });
    }

    pub fn conv2d_backward_weight(
        inp: &[f64],
        d_out: &[f64],
        d_w: &mut [f64],
        d: &ConvDims,
        p: Precision,
    ) {
        with_elems!(p, T, {
            let inp_t: Vec<T> = to_elems(inp);
            let go_t: Vec<T> = to_elems(d_out);
            let per_in = d.c_in * d.hw();
            let per_out = d.c_out * d.hw();
            // Per-sample partials reduced in sample order, identical to the
            // sequential accumulation.
            let partials: Vec<Vec<T>> = (0..d.batch)
                .into_par_iter()
                .map(|b| {
                    let mut cols: Vec<T> = vec![T::default(); d.c_in * 9 * d.hw()];
                    let mut gw: Vec<T> = vec![T::default(); d_w.len()];
                    im2col(&inp_t[b * per_in..(b + 1) * per_in], &mut cols, d);
                    conv_bwd_weight_sample(&go_t[b * per_out..(b + 1) * per_out], &cols, &mut gw, d);
                    gw
                })
                .collect();
            let mut gw_t: Vec<T> = vec![T::default(); d_w.len()];
            for gw in &partials {
                for (acc, v) in gw_t.iter_mut().zip(gw) {
                    *acc += *v;
                }
            }
            add_store(&gw_t, d_w);
        });
    }

    pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], _m: usize, k: usize, n: usize, p: Precision) {
        with_elems!(p, T, {
            let a_t: Vec<T> = to_elems(a);
            let b_t: Vec<T> = to_elems(b);
            let mut c_t: Vec<T> = vec![T::default(); c.len()];
            c_t.par_chunks_mut(n)
                .zip(a_t.par_chunks(k))
                .for_each(|(crow, arow)| matmul_impl(arow, &b_t, crow, 1, k, n));
            store(&c_t, c);
        });
    }
}

// Dispatch wrappers: parallel when the feature is on and the op is big enough.

pub fn conv2d_forward(inp: &[f64], wgt: &[f64], out: &mut [f64], d: &ConvDims, p: Precision) {
    #[cfg(feature = "parallel")]
    if d.macs() >= PAR_MIN_MACS {
        return par::conv2d_forward(inp, wgt, out, d, p);
    }
    seq::conv2d_forward(inp, wgt, out, d, p);
}

pub fn conv2d_backward_input(d_out: &[f64], wgt: &[f64], d_in: &mut [f64], d: &ConvDims, p: Precision) {
    #[cfg(feature = "parallel")]
    if d.macs() >= PAR_MIN_MACS {
        return par::conv2d_backward_input(d_out, wgt, d_in, d, p);
    }
    seq::conv2d_backward_input(d_out, wgt, d_in, d, p);
}

pub fn conv2d_backward_weight(inp: &[f64], d_out: &[f64], d_w: &mut [f64], d: &ConvDims, p: Precision) {
    #[cfg(feature = "parallel")]
    if d.macs() >= PAR_MIN_MACS {
        return par::conv2d_backward_weight(inp, d_out, d_w, d, p);
    }
    seq::conv2d_backward_weight(inp, d_out, d_w, d, p);
}

pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, p: Precision) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MACS {
        return par::matmul(a, b, c, m, k, n, p);
    }
    seq::matmul(a, b, c, m, k, n, p);
}

pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    d_c: &[f64],
    d_a: Option<&mut [f64]>,
    d_b: Option<&mut [f64]>,
    m: usize,
    k: usize,
    n: usize,
    p: Precision,
) {
    seq::matmul_backward(a, b, d_c, d_a, d_b, m, k, n, p);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(batch: usize, c_in: usize, c_out: usize, h: usize, w: usize) -> ConvDims {
        ConvDims { batch, c_in, c_out, h, w }
    }

    /// Brute-force direct convolution used as the reference.
    fn conv_ref(inp: &[f64], wgt: &[f64], d: &ConvDims) -> Vec<f64> {
        let hw = d.hw();
        let mut out = vec![0.0; d.batch * d.c_out * hw];
        for b in 0..d.batch {
            for oc in 0..d.c_out {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let mut acc = 0.0;
                        for ic in 0..d.c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = x as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += inp[(b * d.c_in + ic) * hw + iy as usize * d.w + ix as usize]
                                        * wgt[((oc * d.c_in + ic) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[(b * d.c_out + oc) * hw + y * d.w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_bruteforce() {
        let mut rng = crate::rng::StreamRng::new(11);
        for &(b, ci, co, h, w) in &[(1, 1, 1, 3, 3), (2, 3, 4, 8, 8), (3, 2, 5, 5, 7)] {
            let d = dims(b, ci, co, h, w);
            let inp: Vec<f64> = (0..b * ci * h * w).map(|_| rng.normal()).collect();
            let wgt: Vec<f64> = (0..co * ci * 9).map(|_| rng.normal()).collect();
            let mut out = vec![0.0; b * co * h * w];
            seq::conv2d_forward(&inp, &wgt, &mut out, &d, Precision::F64);
            let expect = conv_ref(&inp, &wgt, &d);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn identity_center_kernel_preserves_input() {
        // all-ones 1x1x3x3 input, kernel with 1 at the center.
        let d = dims(1, 1, 1, 3, 3);
        let inp = vec![1.0; 9];
        let mut wgt = vec![0.0; 9];
        wgt[4] = 1.0;
        let mut out = vec![0.0; 9];
        seq::conv2d_forward(&inp, &wgt, &mut out, &d, Precision::F64);
        assert_eq!(out, inp);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut rng = crate::rng::StreamRng::new(5);
        let d = dims(4, 3, 8, 8, 8);
        let inp: Vec<f64> = (0..4 * 3 * 64).map(|_| rng.normal()).collect();
        let wgt: Vec<f64> = (0..8 * 3 * 9).map(|_| rng.normal()).collect();
        for p in [Precision::F32, Precision::F64] {
            let mut a = vec![0.0; 4 * 8 * 64];
            let mut b = vec![0.0; 4 * 8 * 64];
            seq::conv2d_forward(&inp, &wgt, &mut a, &d, p);
            par::conv2d_forward(&inp, &wgt, &mut b, &d, p);
            assert_eq!(a, b);

            let mut gia = vec![0.0; inp.len()];
            let mut gib = vec![0.0; inp.len()];
            seq::conv2d_backward_input(&a, &wgt, &mut gia, &d, p);
            par::conv2d_backward_input(&a, &wgt, &mut gib, &d, p);
            assert_eq!(gia, gib);

            let mut gwa = vec![0.0; wgt.len()];
            let mut gwb = vec![0.0; wgt.len()];
            seq::conv2d_backward_weight(&inp, &a, &mut gwa, &d, p);
            par::conv2d_backward_weight(&inp, &a, &mut gwb, &d, p);
            assert_eq!(gwa, gwb);
        }
    }

    #[test]
    fn matmul_small_case() {
        // [2x3] * [3x2]
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = vec![0.0; 4];
        seq::matmul(&a, &b, &mut c, 2, 3, 2, Precision::F64);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn f32_mode_outputs_lie_on_f32_grid() {
        let mut rng = crate::rng::StreamRng::new(7);
        let d = dims(2, 2, 2, 4, 4);
        let inp: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.normal()).collect();
        let wgt: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.normal()).collect();
        let mut out = vec![0.0; 2 * 2 * 16];
        seq::conv2d_forward(&inp, &wgt, &mut out, &d, Precision::F32);
        for v in &out {
            assert_eq!(*v, *v as f32 as f64);
        }
    }
}
