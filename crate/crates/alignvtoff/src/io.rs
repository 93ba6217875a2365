//! PNG, checkpoint and key=value file IO.

use std::fs;
use std::path::Path;

use alignvtoff_core::checkpoint::Checkpoint;
use alignvtoff_core::kv::KvMap;
use alignvtoff_core::{Error as CoreError, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{core, PipelineError, Result};

/// `[3, H, W]` tensor in `[-1, 1]` from 8-bit RGB.
pub fn tensor_from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized to the image")
}

/// 8-bit RGB from a `[3, H, W]` (or `[1, 3, H, W]`) tensor in `[-1, 1]`;
/// values outside the range are clamped.
pub fn rgb_from_tensor(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(core(CoreError::Dimension, format!("expected an RGB image tensor, got {s:?}"))),
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Reads a PNG as `[3, S, S]` in `[-1, 1]`. Other sizes are resized with a
/// warning; undecodable files are image errors.
pub fn read_png(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|source| PipelineError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        log::warn!("{}: {}x{} resized to {size}x{size}", path.display(), img.width(), img.height());
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(tensor_from_rgb(&img))
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    rgb_from_tensor(t)?.save(path).map_err(|source| PipelineError::Image { path: path.to_path_buf(), source })
}

/// A missing file is a state error (nothing has been trained yet); damaged
/// contents are format errors.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(core(CoreError::State, format!("checkpoint {} does not exist", path.display())));
        }
        Err(e) => return Err(PipelineError::io(path, e)),
    };
    Checkpoint::decode(&bytes).map_err(|e| match e {
        CoreError::Format(m) => core(CoreError::Format, format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &ck.encode())
}

pub fn read_kv(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    KvMap::parse(&text).map_err(|e| match e {
        CoreError::Format(m) => core(CoreError::Format, format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

pub fn write_kv(path: &Path, kv: &KvMap) -> Result<()> {
    write_atomic(path, kv.to_text().as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}
