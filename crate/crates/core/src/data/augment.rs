//! Upscale-then-crop augmentation for `C×H×W` images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Output height and width fed to the network.
    pub out_height: usize,
    pub out_width: usize,
    /// Upscale factor as a ratio `num/den` applied before cropping.
    pub upscale_num: usize,
    pub upscale_den: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            out_height: 32,
            out_width: 16,
            upscale_num: 9,
            upscale_den: 8,
            flip: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_height == 0 || self.out_width == 0 {
            return Err(Error::Config("augment output size must be positive".into()));
        }
        if self.upscale_den == 0 || self.upscale_num < self.upscale_den {
            return Err(Error::Config("upscale ratio must be >= 1".into()));
        }
        Ok(())
    }

    fn upscaled(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.upscale_num / self.upscale_den, w * self.upscale_num / self.upscale_den)
    }
}

/// Nearest-neighbour resize of a `C×H×W` image.
pub fn resize_nearest<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for x in 0..out_w {
                let sx = x * w / out_w;
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// The `out_h×out_w` window with top-left corner `(top, left)`.
pub fn crop<T: Real>(image: &Tensor<T>, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(image)?;
    if top + out_h > h || left + out_w > w {
        return Err(Error::Config(format!(
            "crop {out_h}×{out_w} at ({top},{left}) exceeds {h}×{w} image"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in top..top + out_h {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row + left..row + left + out_w]);
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn flip_horizontal<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, w) = dims3(image)?;
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape().to_vec(), data)
}

fn dims3<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!("expected a C×H×W image, got {:?}", image.shape()))),
    }
}

/// Train mode upscales and takes a uniformly random crop. Eval mode resizes
/// directly to the output size and never touches `rng`.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<Tensor<T>> {
    config.validate()?;
    let (_, h, w) = dims3(image)?;
    let (oh, ow) = (config.out_height, config.out_width);
    if mode == Mode::Eval {
        return resize_nearest(image, oh, ow);
    }
    let (uh, uw) = config.upscaled(h, w);
    if oh > uh || ow > uw {
        return Err(Error::Config(format!("crop {oh}×{ow} is larger than upscaled {uh}×{uw} image")));
    }
    let big = resize_nearest(image, uh, uw)?;
    let top = rng.random_range(0..=uh - oh);
    let left = rng.random_range(0..=uw - ow);
    let out = crop(&big, top, left, oh, ow)?;
    if config.flip && rng.random_bool(0.5) {
        flip_horizontal(&out)
    } else {
        Ok(out)
    }
}
