//! Heatmaps of the most strongly pooled last-stage channels.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::resize_nearest;
use crate::error::{Error, Result};
use crate::model::MmfaModel;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub channel: usize,
    pub pooled: f64,
    pub height: usize,
    pub width: usize,
    /// Row-major grey levels.
    pub pixels: Vec<u8>,
}

fn normalize(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; map.len()];
    }
    map.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn upsample(src: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(src[sy * w + x * w / out_w]);
        }
    }
    out
}

/// The `top_k` channels with the largest pooled value, strongest first
/// (ties by channel index), each normalised to `0..=255` and upsampled to
/// the network input size.
pub fn attention_maps<T: Real>(model: &MmfaModel<T>, image: &Tensor<T>, top_k: usize) -> Result<Vec<AttentionMap>> {
    let input = model.config().extractor.input;
    let image = resize_nearest(image, input.height, input.width)?;
    let (maps, pooled) = model.feature_maps(&image)?;
    let (c, h, w) = match *maps.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("feature maps are not C×H×W")),
    };
    if top_k == 0 || top_k > c {
        return Err(Error::Parameter(format!("top_k = {top_k}, last stage has {c} channels")));
    }
    let pooled = pooled.to_f64_vec();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| pooled[b].partial_cmp(&pooled[a]).unwrap_or(std::cmp::Ordering::Equal));
    let all = maps.to_f64_vec();
    Ok(order[..top_k]
        .iter()
        .map(|&ch| {
            let grey = normalize(&all[ch * h * w..(ch + 1) * h * w]);
            AttentionMap {
                channel: ch,
                pooled: pooled[ch],
                height: input.height,
                width: input.width,
                pixels: upsample(&grey, h, w, input.height, input.width),
            }
        })
        .collect())
}

/// Binary greyscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `channel_{index}.pgm` for each selected channel into `out`.
pub fn export_attention<T: Real>(
    model: &MmfaModel<T>,
    image: &Tensor<T>,
    top_k: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = attention_maps(model, image, top_k)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    maps.iter()
        .map(|m| {
            let p = out.join(format!("channel_{}.pgm", m.channel));
            write_pgm(&p, m.width, m.height, &m.pixels)?;
            Ok(p)
        })
        .collect()
}
