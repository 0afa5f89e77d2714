//! Random crop, horizontal flip and per-channel normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2023, 0.1994, 0.2010];
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Zero padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
    pub hflip_prob: f64,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl AugmentConfig {
    pub fn cifar() -> Self {
        AugmentConfig {
            crop_pad: 4,
            hflip_prob: 0.5,
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }
    }

    /// MNIST: normalization only.
    pub fn mnist() -> Self {
        AugmentConfig {
            crop_pad: 0,
            hflip_prob: 0.0,
            mean: vec![MNIST_MEAN],
            std: vec![MNIST_STD],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization has {} means / {} stds for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip probability {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

fn dims(batch: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match *batch.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape("augment", batch.shape(), &[0, 0, 0, 0])),
    }
}

/// Crops each image from its zero-padded version at `offsets[b] = (dy, dx)`
/// in padded coordinates; `(pad, pad)` returns the image unchanged.
pub fn crop_with_offsets(batch: &Tensor<f32>, pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor<f32>> {
    let (n, c, h, w) = dims(batch)?;
    if offsets.len() != n || offsets.iter().any(|&(dy, dx)| dy > 2 * pad || dx > 2 * pad) {
        return Err(Error::Config(format!("need {n} crop offsets within [0, {}]", 2 * pad)));
    }
    let src = batch.data();
    let mut out = vec![0.0f32; src.len()];
    for (b, &(dy, dx)) in offsets.iter().enumerate() {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                // source row in unpadded coordinates
                let sy = y + dy;
                if sy < pad || sy - pad >= h {
                    continue;
                }
                for x in 0..w {
                    let sx = x + dx;
                    if sx < pad || sx - pad >= w {
                        continue;
                    }
                    out[base + y * w + x] = src[base + (sy - pad) * w + (sx - pad)];
                }
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// Mirrors the images whose `flags` entry is set.
pub fn hflip(batch: &Tensor<f32>, flags: &[bool]) -> Result<Tensor<f32>> {
    let (n, _, _, w) = dims(batch)?;
    if flags.len() != n {
        return Err(Error::Config(format!("need {n} flip flags, got {}", flags.len())));
    }
    let per = batch.numel() / n.max(1);
    let mut out = batch.clone();
    for (img, &f) in out.data_mut().chunks_mut(per.max(1)).zip(flags) {
        if f {
            img.chunks_mut(w).for_each(|row| row.reverse());
        }
    }
    Ok(out)
}

pub fn normalize(batch: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Result<Tensor<f32>> {
    per_channel(batch, mean, std, |v, m, s| (v - m) / s)
}

pub fn denormalize(batch: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Result<Tensor<f32>> {
    per_channel(batch, mean, std, |v, m, s| v * s + m)
}

fn per_channel(batch: &Tensor<f32>, mean: &[f32], std: &[f32], f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor<f32>> {
    let (_, c, h, w) = dims(batch)?;
    if mean.len() != c || std.len() != c {
        return Err(Error::Config(format!("normalization needs {c} channel constants")));
    }
    let mut out = batch.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let ch = i % c;
        plane.iter_mut().for_each(|v| *v = f(*v, mean[ch], std[ch]));
    }
    Ok(out)
}

/// Training: random pad-crop and flip, then normalization. Evaluation:
/// normalization only, with no randomness consumed.
pub fn augment_and_normalize(
    batch: &Tensor<f32>,
    cfg: &AugmentConfig,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let (n, c, _, _) = dims(batch)?;
    cfg.validate(c)?;
    let mut x = batch.clone();
    if train {
        if cfg.crop_pad > 0 {
            let offsets: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.random_range(0..=2 * cfg.crop_pad), rng.random_range(0..=2 * cfg.crop_pad)))
                .collect();
            x = crop_with_offsets(&x, cfg.crop_pad, &offsets)?;
        }
        if cfg.hflip_prob > 0.0 {
            let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(cfg.hflip_prob)).collect();
            x = hflip(&x, &flags)?;
        }
    }
    normalize(&x, &cfg.mean, &cfg.std)
}
