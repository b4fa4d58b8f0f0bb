//! 2D convolution lowered to im2col + GEMM.

use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayD, ArrayView4, Axis, Ix4};

use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    /// Zero padding applied on every side.
    pub padding: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dOptions { stride, padding }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
    /// Input index along one spatial axis for output position `o` and tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// Column matrix `[C*K*K, N*Ho*Wo]`.
fn im2col<T: Real>(x: &ArrayView4<T>, g: &Geometry) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((g.rows(), g.cols()));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ncols = g.cols();
    let cs = cols.as_slice_mut().expect("fresh array");
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cs[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src_plane = &xs[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let dst = &mut dst_row[n * out_plane..(n + 1) * out_plane];
                    for oh in 0..g.ho {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        let src_row = &src_plane[ih * g.w..(ih + 1) * g.w];
                        let dst_line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                        if g.stride == 1 {
                            // contiguous run of valid columns
                            let lo = g.pad.saturating_sub(kj);
                            let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo);
                            if lo < hi {
                                let start = lo + kj - g.pad;
                                dst_line[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                            }
                        } else {
                            for (ow, d) in dst_line.iter_mut().enumerate() {
                                if let Some(iw) = g.src(ow, kj, g.w) {
                                    *d = src_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back to an input-shaped gradient.
fn col2im<T: Real>(cols: &Array2<T>, g: &Geometry) -> Array4<T> {
    let mut dx = Array4::<T>::zeros((g.n, g.c, g.h, g.w));
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ncols = g.cols();
    let cs = cols.as_slice().expect("standard layout");
    let ds = dx.as_slice_mut().expect("fresh array");
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cs[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst_plane = &mut ds[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let src = &src_row[n * out_plane..(n + 1) * out_plane];
                    for oh in 0..g.ho {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        let dst_line = &mut dst_plane[ih * g.w..(ih + 1) * g.w];
                        let src_line = &src[oh * g.wo..(oh + 1) * g.wo];
                        for (ow, &v) in src_line.iter().enumerate() {
                            if let Some(iw) = g.src(ow, kj, g.w) {
                                dst_line[iw] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[N,O,Ho,Wo]` <-> `[O, N*Ho*Wo]`.
fn nchw_to_matrix<T: Real>(y: &ArrayD<T>, o: usize, n: usize, hw: usize) -> Array2<T> {
    y.view()
        .into_shape_with_order((n, o, hw))
        .expect("contiguous NCHW")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, n * hw))
        .expect("standard layout")
}

fn matrix_to_nchw<T: Real>(m: Array2<T>, n: usize, ho: usize, wo: usize) -> Array4<T> {
    let o = m.nrows();
    m.into_shape_with_order((o, n, ho * wo))
        .expect("row-major")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, o, ho, wo))
        .expect("standard layout")
}

impl<T: Real> Var<T> {
    /// Square-kernel 2D convolution. `weight` is `[O, C, K, K]`, `bias` is `[O]`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, opts: Conv2dOptions) -> Result<Var<T>> {
        let x = self.value();
        let w = weight.value();
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| shape_err("conv2d", format!("input must be NCHW, got {:?}", x.shape())))?;
        let w4 = w
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| shape_err("conv2d", format!("weight must be OCKK, got {:?}", w.shape())))?;
        let (n, c, h, wd) = x4.dim();
        let (o, wc, kh, kw) = w4.dim();
        if wc != c || kh != kw {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
            ));
        }
        let (Some(ho), Some(wo)) = (opts.output_size(h, kh), opts.output_size(wd, kw)) else {
            return Err(shape_err(
                "conv2d",
                format!("{h}x{wd} input too small for kernel {kh} with padding {}", opts.padding),
            ));
        };
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(shape_err("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
            }
        }
        let geo = Geometry {
            n,
            c,
            h,
            w: wd,
            k: kh,
            stride: opts.stride,
            pad: opts.padding,
            ho,
            wo,
        };
        let w_mat = w
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, geo.rows()))
            .expect("weight reshape");
        let chunk = sample_chunk(n, ho * wo);
        let mut out = Array4::<T>::zeros((n, o, ho, wo));
        for n0 in (0..n).step_by(chunk) {
            let nb = chunk.min(n - n0);
            let sub = Geometry { n: nb, ..geo };
            let cols = im2col(&x4.slice_axis(Axis(0), (n0..n0 + nb).into()), &sub);
            let mut y = Array2::<T>::zeros((o, sub.cols()));
            general_mat_mul(T::one(), &w_mat, &cols, T::zero(), &mut y);
            out.slice_axis_mut(Axis(0), (n0..n0 + nb).into())
                .assign(&matrix_to_nchw(y, nb, ho, wo));
        }
        if let Some(b) = bias {
            let bv = b.value();
            for mut plane in out.axis_iter_mut(Axis(0)) {
                for (mut ch, &bias) in plane.outer_iter_mut().zip(bv.iter()) {
                    ch.mapv_inplace(|v| v + bias);
                }
            }
        }

        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let w_shape = w.shape().to_vec();
        Ok(self.tape.record(out.into_dyn(), &parents, move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let x4 = x.view().into_dimensionality::<Ix4>().expect("rank");
                let g4 = g.view().into_dimensionality::<Ix4>().expect("rank");
                let mut gx = needs[0].then(|| Array4::<T>::zeros((n, c, h, wd)));
                let mut gw = needs[1].then(|| Array2::<T>::zeros((o, geo.rows())));
                let mut gb = (needs.len() == 3 && needs[2]).then(|| ndarray::Array1::<T>::zeros(o));
                for n0 in (0..n).step_by(chunk) {
                    let nb = chunk.min(n - n0);
                    let sub = Geometry { n: nb, ..geo };
                    let g_chunk = g4.slice_axis(Axis(0), (n0..n0 + nb).into()).to_owned().into_dyn();
                    let g_mat = nchw_to_matrix(&g_chunk, o, nb, ho * wo);
                    if let Some(gx) = gx.as_mut() {
                        let mut dcols = Array2::<T>::zeros((sub.rows(), sub.cols()));
                        general_mat_mul(T::one(), &w_mat.t(), &g_mat, T::zero(), &mut dcols);
                        gx.slice_axis_mut(Axis(0), (n0..n0 + nb).into())
                            .assign(&col2im(&dcols, &sub));
                    }
                    if let Some(gw) = gw.as_mut() {
                        let cols = im2col(&x4.slice_axis(Axis(0), (n0..n0 + nb).into()), &sub);
                        general_mat_mul(T::one(), &g_mat, &cols.t(), T::one(), gw);
                    }
                    if let Some(gb) = gb.as_mut() {
                        *gb += &g_mat.sum_axis(Axis(1));
                    }
                }
                let mut grads = vec![
                    gx.map(|a| a.into_dyn()),
                    gw.map(|a| a.into_shape_with_order(ndarray::IxDyn(&w_shape)).expect("weight shape")),
                ];
                if needs.len() == 3 {
                    grads.push(gb.map(|a| a.into_dyn()));
                }
                grads
            })
        }))
    }
}

/// Samples per GEMM: large planes go one at a time, small planes are batched
/// so the product stays wide enough to run efficiently.
fn sample_chunk(n: usize, plane: usize) -> usize {
    const TARGET_COLS: usize = 4096;
    TARGET_COLS.div_ceil(plane.max(1)).clamp(1, n.max(1))
}
