//! Differentiable operations on [`Var`].

use ndarray::{linalg::general_mat_mul, s, Array3, ArrayD, Axis, Ix3, Ix4, IxDyn, Zip};

use crate::error::{shape_err, Result};
use crate::tape::{BackwardFn, Var};
use crate::{real, Real};

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to_shape<T: Real>(grad: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let lead = grad.ndim() - shape.len();
    let mut g = grad.clone();
    for _ in 0..lead {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn check_broadcast<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    broadcast_shape(&sa, &sb)
        .map(|_| ())
        .ok_or_else(|| shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}")))
}

fn unary<T: Real>(
    x: &Var<T>,
    value: ArrayD<T>,
    make: impl FnOnce() -> BackwardFn<T>,
) -> Var<T> {
    x.tape.record(value, &[x], |_| make())
}

impl<T: Real> Var<T> {
    // ---- broadcasting binary arithmetic ---------------------------------

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        check_broadcast("add", self, other)?;
        let (a, b) = (self.value(), other.value());
        let out = &*a + &*b;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.record(out, &[self, other], move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, &sa)),
                    needs[1].then(|| reduce_to_shape(g, &sb)),
                ]
            })
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        check_broadcast("sub", self, other)?;
        let (a, b) = (self.value(), other.value());
        let out = &*a - &*b;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.record(out, &[self, other], move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, &sa)),
                    needs[1].then(|| reduce_to_shape(&g.mapv(|v| -v), &sb)),
                ]
            })
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        check_broadcast("mul", self, other)?;
        let (a, b) = (self.value(), other.value());
        let out = &*a * &*b;
        Ok(self.tape.record(out, &[self, other], move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                vec![
                    needs[0].then(|| reduce_to_shape(&(g * &*b), a.shape())),
                    needs[1].then(|| reduce_to_shape(&(g * &*a), b.shape())),
                ]
            })
        }))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        check_broadcast("div", self, other)?;
        let (a, b) = (self.value(), other.value());
        let out = &*a / &*b;
        Ok(self.tape.record(out, &[self, other], move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let ga = needs[0].then(|| reduce_to_shape(&(g / &*b), a.shape()));
                let gb = needs[1].then(|| {
                    let num = g * &*a;
                    let full = num / &b.mapv(|v| v * v);
                    reduce_to_shape(&full.mapv(|v| -v), b.shape())
                });
                vec![ga, gb]
            })
        }))
    }

    // ---- scalar arithmetic ----------------------------------------------

    pub fn scale(&self, c: T) -> Var<T> {
        let out = self.value().mapv(|v| v * c);
        unary(self, out, move || Box::new(move |g| vec![Some(g.mapv(|v| v * c))]))
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let out = self.value().mapv(|v| v + c);
        unary(self, out, || Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    // ---- elementwise nonlinearities ------------------------------------

    pub fn square(&self) -> Var<T> {
        let x = self.value();
        let out = x.mapv(|v| v * v);
        unary(self, out, move || {
            Box::new(move |g| {
                let two = real::<T>(2.0);
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&*x).for_each(|gv, &xv| *gv = *gv * two * xv);
                vec![Some(gx)]
            })
        })
    }

    pub fn abs(&self) -> Var<T> {
        let x = self.value();
        let out = x.mapv(|v| v.abs());
        unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&*x).for_each(|gv, &xv| {
                    *gv = if xv > T::zero() {
                        *gv
                    } else if xv < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    }
                });
                vec![Some(gx)]
            })
        })
    }

    /// Square root with a zero subgradient at 0.
    pub fn sqrt(&self) -> Var<T> {
        let out = self.value().mapv(|v| v.max(T::zero()).sqrt());
        let y = out.clone();
        unary(self, out, move || {
            Box::new(move |g| {
                let half = real::<T>(0.5);
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&y).for_each(|gv, &yv| {
                    *gv = if yv > T::zero() { *gv * half / yv } else { T::zero() }
                });
                vec![Some(gx)]
            })
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let x = self.value();
        let out = x.mapv(|v| if v > T::zero() { v } else { v * slope });
        unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&*x).for_each(|gv, &xv| {
                    if xv <= T::zero() {
                        *gv = *gv * slope
                    }
                });
                vec![Some(gx)]
            })
        })
    }

    pub fn tanh(&self) -> Var<T> {
        let out = self.value().mapv(|v| v.tanh());
        let y = out.clone();
        unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(&y)
                    .for_each(|gv, &yv| *gv = *gv * (T::one() - yv * yv));
                vec![Some(gx)]
            })
        })
    }

    /// Clamp to `[lo, hi]`; the gradient passes where the input is inside.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let x = self.value();
        let out = x.mapv(|v| v.max(lo).min(hi));
        unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&*x).for_each(|gv, &xv| {
                    if xv < lo || xv > hi {
                        *gv = T::zero()
                    }
                });
                vec![Some(gx)]
            })
        })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self) -> Var<T> {
        let x = self.value();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        let dim = x.raw_dim();
        unary(self, out, move || {
            Box::new(move |g| vec![Some(ArrayD::from_elem(dim.clone(), g.sum()))])
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / real::<T>(n as f64))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Result<Var<T>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(shape_err("sum_axis_keep", format!("axis {axis} for shape {:?}", x.shape())));
        }
        let out = x.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let dim = x.raw_dim();
        Ok(unary(self, out, move || {
            Box::new(move |g| vec![Some(g.broadcast(dim.clone()).expect("keepdim broadcast").to_owned())])
        }))
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Result<Var<T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis_keep(axis)?.scale(T::one() / real::<T>(n as f64)))
    }

    /// Frobenius norm of the whole tensor, with a zero subgradient at 0.
    pub fn frobenius_norm(&self) -> Var<T> {
        self.square().sum().sqrt()
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let out = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked element count");
        let orig = x.shape().to_vec();
        Ok(unary(self, out, move || {
            Box::new(move |g| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape back"),
                )]
            })
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let x = self.value();
        if axes.len() != x.ndim() {
            return Err(shape_err("permute", format!("{axes:?} for shape {:?}", x.shape())));
        }
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(unary(self, out, move || {
            Box::new(move |g| {
                vec![Some(
                    g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned(),
                )]
            })
        }))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| shape_err("concat", e.to_string()))?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape.record(out, parts, move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(&needs)
                    .map(|(&len, &need)| {
                        let piece = need.then(|| {
                            g.slice_axis(Axis(axis), (start..start + len).into()).to_owned()
                        });
                        start += len;
                        piece
                    })
                    .collect()
            })
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let x = self.value();
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(shape_err("narrow", format!("{axis}:{start}+{len} of {:?}", x.shape())));
        }
        let out = x.slice_axis(Axis(axis), (start..start + len).into()).to_owned();
        let dim = x.raw_dim();
        Ok(unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(dim.clone());
                gx.slice_axis_mut(Axis(axis), (start..start + len).into()).assign(g);
                vec![Some(gx)]
            })
        }))
    }

    // ---- linear algebra -----------------------------------------------

    /// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), other.value());
        let (a3, b3) = match (
            a.view().into_dimensionality::<Ix3>(),
            b.view().into_dimensionality::<Ix3>(),
        ) {
            (Ok(a3), Ok(b3)) if a3.dim().0 == b3.dim().0 && a3.dim().2 == b3.dim().1 => (a3, b3),
            _ => {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ))
            }
        };
        let (batch, m, _) = a3.dim();
        let n = b3.dim().2;
        let mut out = Array3::<T>::zeros((batch, m, n));
        for i in 0..batch {
            general_mat_mul(
                T::one(),
                &a3.index_axis(Axis(0), i),
                &b3.index_axis(Axis(0), i),
                T::zero(),
                &mut out.index_axis_mut(Axis(0), i),
            );
        }
        Ok(self.tape.record(out.into_dyn(), &[self, other], move |needs| {
            let needs = needs.to_vec();
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("matmul grad rank");
                let a3 = a.view().into_dimensionality::<Ix3>().expect("rank");
                let b3 = b.view().into_dimensionality::<Ix3>().expect("rank");
                let ga = needs[0].then(|| {
                    let mut ga = Array3::<T>::zeros(a3.raw_dim());
                    for i in 0..a3.dim().0 {
                        general_mat_mul(
                            T::one(),
                            &g3.index_axis(Axis(0), i),
                            &b3.index_axis(Axis(0), i).t(),
                            T::zero(),
                            &mut ga.index_axis_mut(Axis(0), i),
                        );
                    }
                    ga.into_dyn()
                });
                let gb = needs[1].then(|| {
                    let mut gb = Array3::<T>::zeros(b3.raw_dim());
                    for i in 0..b3.dim().0 {
                        general_mat_mul(
                            T::one(),
                            &a3.index_axis(Axis(0), i).t(),
                            &g3.index_axis(Axis(0), i),
                            T::zero(),
                            &mut gb.index_axis_mut(Axis(0), i),
                        );
                    }
                    gb.into_dyn()
                });
                vec![ga, gb]
            })
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<T> {
        let x = self.value();
        let last = x.ndim() - 1;
        let mut out = x.as_standard_layout().into_owned();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.fold(T::neg_infinity(), |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let total = lane.sum();
            lane.mapv_inplace(|v| v / total);
        }
        let y = out.clone();
        unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = g.as_standard_layout().into_owned();
                for (mut gl, yl) in gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot = gl.iter().zip(yl.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    Zip::from(&mut gl).and(&yl).for_each(|gv, &yv| *gv = yv * (*gv - dot));
                }
                vec![Some(gx)]
            })
        })
    }

    // ---- image ops (NCHW) ----------------------------------------------

    /// Per-sample, per-channel normalization over the spatial extent
    /// without learned affine terms.
    pub fn instance_norm(&self, eps: T) -> Result<Var<T>> {
        let x = self.value();
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| shape_err("instance_norm", format!("expected NCHW, got {:?}", x.shape())))?;
        let (n, c, h, w) = x4.dim();
        let hw = real::<T>((h * w) as f64);
        let mut out = x4
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * c, h * w))
            .expect("standard layout");
        let mut inv_std = Vec::with_capacity(n * c);
        for mut plane in out.rows_mut() {
            let mean = plane.sum() / hw;
            let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / hw;
            let inv = T::one() / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let xhat = out.clone();
        let out = out.into_shape_with_order(IxDyn(&[n, c, h, w])).expect("reshape back");
        Ok(unary(self, out, move || {
            Box::new(move |g| {
                let mut gx = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n * c, h * w))
                    .expect("standard layout");
                for ((mut gp, xp), &inv) in gx.rows_mut().into_iter().zip(xhat.rows()).zip(&inv_std) {
                    let mean_g = gp.sum() / hw;
                    let mean_gx = gp.iter().zip(xp.iter()).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv) / hw;
                    Zip::from(&mut gp)
                        .and(&xp)
                        .for_each(|gv, &xv| *gv = inv * (*gv - mean_g - xv * mean_gx));
                }
                vec![Some(gx.into_shape_with_order(IxDyn(&[n, c, h, w])).expect("reshape back"))]
            })
        }))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample_nearest2x(&self) -> Result<Var<T>> {
        let x = self.value();
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| shape_err("upsample", format!("expected NCHW, got {:?}", x.shape())))?;
        let (n, c, h, w) = x4.dim();
        let mut out = ndarray::Array4::<T>::zeros((n, c, 2 * h, 2 * w));
        for dy in 0..2 {
            for dx in 0..2 {
                out.slice_mut(s![.., .., dy..;2, dx..;2]).assign(&x4);
            }
        }
        Ok(unary(self, out.into_dyn(), move || {
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("rank");
                let mut gx = ndarray::Array4::<T>::zeros((n, c, h, w));
                for dy in 0..2 {
                    for dx in 0..2 {
                        gx += &g4.slice(s![.., .., dy..;2, dx..;2]);
                    }
                }
                vec![Some(gx.into_dyn())]
            })
        }))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2x2(&self) -> Result<Var<T>> {
        let x = self.value();
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| shape_err("max_pool2x2", format!("expected NCHW, got {:?}", x.shape())))?;
        let (n, c, h, w) = x4.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = ndarray::Array4::<T>::zeros((n, c, ho, wo));
        let mut arg = vec![0u8; n * c * ho * wo];
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = x4[[b, ch, 2 * i, 2 * j]];
                        let mut which = 0u8;
                        for (q, (di, dj)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let v = x4[[b, ch, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                which = q as u8 + 1;
                            }
                        }
                        out[[b, ch, i, j]] = best;
                        arg[k] = which;
                        k += 1;
                    }
                }
            }
        }
        Ok(unary(self, out.into_dyn(), move || {
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("rank");
                let mut gx = ndarray::Array4::<T>::zeros((n, c, h, w));
                let mut k = 0;
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let (di, dj) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[k] as usize];
                                gx[[b, ch, 2 * i + di, 2 * j + dj]] += g4[[b, ch, i, j]];
                                k += 1;
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            })
        }))
    }
}
