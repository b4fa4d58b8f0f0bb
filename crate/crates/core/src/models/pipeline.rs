use muralfill_autograd::Tape;

use super::bundle::ModelBundle;
use super::composite::{composite, composite_u8};
use crate::error::Result;
use ndarray::{s, Array3};

use crate::raster::{
    check_dims, mirror_pad2, mirror_pad3, padded_len, stack_images, stack_planes, unstack_images, ImageTensor, LineDrawing, Mask,
};

/// Intermediate and final images of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintOutput {
    pub coarse: ImageTensor,
    pub refined: ImageTensor,
    pub composite: ImageTensor,
}

impl ModelBundle {
    /// masked image + line → G1 → G2 → composite with the original.
    pub fn inpaint(&self, image: &ImageTensor, line: &LineDrawing, mask: &Mask) -> Result<InpaintOutput> {
        Ok(self.inpaint_batch(&[image], &[line], &[mask])?.remove(0))
    }

    pub fn inpaint_batch(&self, images: &[&ImageTensor], lines: &[&LineDrawing], masks: &[&Mask]) -> Result<Vec<InpaintOutput>> {
        for ((img, line), mask) in images.iter().zip(lines).zip(masks) {
            check_dims("inpaint line", img.dims(), line.dims())?;
            check_dims("inpaint mask", img.dims(), mask.dims())?;
        }
        let masked: Vec<ImageTensor> = images
            .iter()
            .zip(masks)
            .map(|(img, m)| img.masked(m))
            .collect::<Result<_>>()?;
        let tape = Tape::<f32>::inference();
        let x = tape.constant(stack_images(&masked.iter().collect::<Vec<_>>())?);
        let l = tape.constant(stack_planes(&lines.iter().map(|l| &l.strokes).collect::<Vec<_>>())?);
        let m = tape.constant(stack_planes(&masks.iter().map(|m| &m.hole).collect::<Vec<_>>())?);
        let coarse = self.g1.srn_forward(&tape, false, &x, &l, &m)?.image;
        let refined = self.g2.ccn_forward(&tape, false, &coarse, &m)?.image;
        let coarse = unstack_images(&coarse.value())?;
        let refined = unstack_images(&refined.value())?;
        coarse
            .into_iter()
            .zip(refined)
            .zip(images.iter().zip(masks))
            .map(|((coarse, refined), (img, mask))| {
                let composite = composite(&refined, img, mask)?;
                Ok(InpaintOutput {
                    coarse,
                    refined,
                    composite,
                })
            })
            .collect()
    }

    /// Inpaints an 8-bit `[H, W, 3]` raster of any size: the inputs are
    /// mirror-padded up to the size multiple, the network output is cropped
    /// back, and the composite copies every known byte from `pixels`.
    pub fn inpaint_pixels(&self, pixels: &Array3<u8>, line: &LineDrawing, mask: &Mask) -> Result<Array3<u8>> {
        let (h, w, _) = pixels.dim();
        check_dims("inpaint line", (h, w), line.dims())?;
        check_dims("inpaint mask", (h, w), mask.dims())?;
        let m = self.config.size_multiple();
        let (ph, pw) = (padded_len(h, m), padded_len(w, m));
        let image = ImageTensor::from_u8(&mirror_pad3(pixels, ph, pw));
        let line = LineDrawing::new(mirror_pad2(&line.strokes, ph, pw), line.provenance);
        let padded_mask = Mask::new(mirror_pad2(&mask.hole, ph, pw));
        let out = self.inpaint(&image, &line, &padded_mask)?;
        let refined = out.refined.to_u8().slice(s![..h, ..w, ..]).to_owned();
        composite_u8(&refined, pixels, &mask.hole.mapv(|v| v >= 0.5))
    }
}
