//! Fixed patchify codec standing in for a learned video autoencoder.
//!
//! A frame becomes a `[tokens × 3·p²]` matrix: tokens in row-major patch
//! order, channels ordered `(dy, dx, rgb)`. Pixel bytes map to `b/127.5 − 1`.

use crate::tensor::Tensor;
use crate::world::{Frame, CHUNK_FRAMES};
use crate::{Error, Result};

fn check_dims(width: u32, height: u32, patch: usize) -> Result<(usize, usize)> {
    let (w, h) = (width as usize, height as usize);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::Shape(format!("{w}×{h} frame is not divisible by patch {patch}")));
    }
    Ok((w / patch, h / patch))
}

/// Rearrange interleaved `[h × w × 3]` values into patch tokens.
pub fn patchify_values<V: Copy>(values: &[V], width: u32, height: u32, patch: usize) -> Result<Vec<V>> {
    let (tw, th) = check_dims(width, height, patch)?;
    let w = width as usize;
    if values.len() != w * height as usize * 3 {
        return Err(Error::Shape(format!("{} values for a {w}×{height} frame", values.len())));
    }
    let mut out = Vec::with_capacity(values.len());
    for ty in 0..th {
        for tx in 0..tw {
            for dy in 0..patch {
                let row = (ty * patch + dy) * w + tx * patch;
                out.extend_from_slice(&values[row * 3..(row + patch) * 3]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify_values<V: Copy + Default>(tokens: &[V], width: u32, height: u32, patch: usize) -> Result<Vec<V>> {
    let (tw, th) = check_dims(width, height, patch)?;
    let w = width as usize;
    if tokens.len() != w * height as usize * 3 {
        return Err(Error::Shape(format!("{} values for a {w}×{height} frame", tokens.len())));
    }
    let mut out = vec![V::default(); tokens.len()];
    let mut src = tokens.chunks_exact(patch * 3);
    for ty in 0..th {
        for tx in 0..tw {
            for dy in 0..patch {
                let row = (ty * patch + dy) * w + tx * patch;
                out[row * 3..(row + patch) * 3].copy_from_slice(src.next().unwrap());
            }
        }
    }
    Ok(out)
}

pub fn byte_to_latent(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn latent_to_byte(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `[tokens × 3·p²]` latent of one frame.
pub fn patchify(frame: &Frame, patch: usize) -> Result<Tensor<f32>> {
    let tokens = patchify_values(&frame.rgb, frame.width, frame.height, patch)?;
    let c = 3 * patch * patch;
    let n = tokens.len() / c;
    Tensor::new(vec![n, c], tokens.into_iter().map(byte_to_latent).collect())
}

pub fn unpatchify(latent: &Tensor<f32>, width: u32, height: u32, patch: usize) -> Result<Frame> {
    let bytes: Vec<u8> = latent.data().iter().map(|&x| latent_to_byte(x)).collect();
    let rgb = unpatchify_values(&bytes, width, height, patch)?;
    Ok(Frame { width, height, rgb })
}

/// Frames stacked frame-major into one chunk latent.
pub fn chunk_latent(frames: &[Frame], patch: usize) -> Result<Tensor<f32>> {
    if frames.len() != CHUNK_FRAMES {
        return Err(Error::Shape(format!("chunk of {} frames", frames.len())));
    }
    let parts = frames.iter().map(|f| patchify(f, patch)).collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Split a chunk latent back into its frames, in order.
pub fn chunk_frames(latent: &Tensor<f32>, width: u32, height: u32, patch: usize) -> Result<Vec<Frame>> {
    let (n, _) = latent.dims2()?;
    if n % CHUNK_FRAMES != 0 {
        return Err(Error::Shape(format!("{n} tokens do not split into {CHUNK_FRAMES} frames")));
    }
    let per = n / CHUNK_FRAMES;
    (0..CHUNK_FRAMES).map(|f| unpatchify(&latent.slice_rows(f * per, per)?, width, height, patch)).collect()
}
