use muralfill_autograd::{Real, Var};
use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};
use crate::raster::{check_dims, ImageTensor, Mask};

/// `mask ⊙ generated + (1 − mask) ⊙ original`, evaluated as a per-pixel
/// select so known pixels are copied bit for bit.
pub fn composite(generated: &ImageTensor, original: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
    check_dims("composite", generated.dims(), original.dims())?;
    check_dims("composite mask", original.dims(), mask.dims())?;
    let mut out = original.0.clone();
    for (mut o, g) in out.outer_iter_mut().zip(generated.0.outer_iter()) {
        Zip::from(&mut o).and(&g).and(&mask.hole).for_each(|o, &g, &m| {
            if m >= 0.5 {
                *o = g;
            }
        });
    }
    Ok(ImageTensor(out))
}

/// The same rule on 8-bit `[H, W, 3]` rasters with a boolean hole map.
pub fn composite_u8(generated: &Array3<u8>, original: &Array3<u8>, hole: &Array2<bool>) -> Result<Array3<u8>> {
    if generated.dim() != original.dim() || (original.dim().0, original.dim().1) != hole.dim() {
        return Err(Error::Shape(format!(
            "composite: generated {:?}, original {:?}, mask {:?}",
            generated.dim(),
            original.dim(),
            hole.dim()
        )));
    }
    let mut out = original.clone();
    for ((y, x, c), v) in out.indexed_iter_mut() {
        if hole[[y, x]] {
            *v = generated[[y, x, c]];
        }
    }
    Ok(out)
}

/// Differentiable composite on `[N,3,H,W]` images with a `[N,1,H,W]` binary mask.
pub fn composite_var<T: Real>(generated: &Var<T>, original: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
    let keep = mask.neg().add_scalar(T::one());
    Ok(mask.mul(generated)?.add(&keep.mul(original)?)?)
}
