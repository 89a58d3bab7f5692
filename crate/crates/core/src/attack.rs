//! Recovery attacks against protective images and their evaluation.

use std::fmt::Write as _;

use crate::codec::{self, HighDimRep, MappingSpec, Planes, SpatialImage};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Model, Tensor};
use crate::perturb::ShuffleSeed;
use crate::train::{attack_seed, Prepared, Protection, SeedMode};

const BATCH: usize = 64;

/// Run the recovery model on one protective image; the output is clamped to
/// `[0, 1]`.
pub fn recover(f_inv: &Model, x_p: &SpatialImage) -> Result<SpatialImage> {
    Ok(recover_batch(f_inv, std::slice::from_ref(x_p))?.remove(0))
}

pub fn recover_batch(f_inv: &Model, inputs: &[SpatialImage]) -> Result<Vec<SpatialImage>> {
    if f_inv.spec().in_channels() != SpatialImage::CHANNELS {
        return Err(Error::invalid(format!(
            "recovery model takes {} channels, images have 3",
            f_inv.spec().in_channels()
        )));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(BATCH) {
        let planes: Vec<&Planes> = chunk.iter().map(|i| &**i).collect();
        let y = f_inv.infer(&Tensor::stack(&planes)?)?;
        for p in y.unstack()? {
            out.push(SpatialImage::from_planes(p)?.clamped());
        }
    }
    Ok(out)
}

/// The attacker's naive inversion: re-encode the protective image, `r' = e(X_p)`.
pub fn reencode_inversion(x_p: &SpatialImage, spec: &MappingSpec) -> HighDimRep {
    codec::encode(x_p, spec)
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_l2(a: &Planes, b: &Planes) -> Result<f64> {
    let diff = a.sub(b)?.l2_norm();
    let base = b.l2_norm();
    if base == 0.0 {
        return Err(Error::invalid("relative distance to an all-zero reference"));
    }
    Ok(diff / base)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore {
    pub ssim: f64,
    pub psnr: f64,
}

/// Aggregated similarity of recovered images to their originals.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    pub count: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub per_image: Vec<ImageScore>,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RecoveryReport {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("no images to report on"));
        }
        let (ssim_mean, ssim_std) = mean_std(per_image.iter().map(|s| s.ssim));
        let (psnr_mean, psnr_std) = mean_std(per_image.iter().map(|s| s.psnr));
        Ok(Self {
            count: per_image.len(),
            ssim_mean,
            ssim_std,
            psnr_mean,
            psnr_std,
            per_image,
        })
    }

    /// `key=value` lines, each key prefixed with `prefix`.
    pub fn key_values(&self, prefix: &str) -> String {
        format!(
            "{prefix}count={}\n{prefix}ssim_mean={:.6}\n{prefix}ssim_std={:.6}\n{prefix}psnr_mean={:.4}\n{prefix}psnr_std={:.4}\n",
            self.count, self.ssim_mean, self.ssim_std, self.psnr_mean, self.psnr_std
        )
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("index,ssim,psnr\n");
        for (i, p) in self.per_image.iter().enumerate() {
            let _ = writeln!(s, "{i},{:.6},{:.4}", p.ssim, p.psnr);
        }
        s
    }
}

/// SSIM and PSNR of each recovered image against its original.
pub fn evaluate_recovery(recovered: &[SpatialImage], originals: &[SpatialImage]) -> Result<RecoveryReport> {
    if recovered.len() != originals.len() {
        return Err(Error::invalid(format!(
            "unpaired sets: {} recovered, {} originals",
            recovered.len(),
            originals.len()
        )));
    }
    let scores = recovered
        .iter()
        .zip(originals)
        .map(|(r, o)| {
            Ok(ImageScore {
                ssim: metrics::ssim(r, o)?,
                psnr: metrics::psnr(r, o)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RecoveryReport::from_scores(scores)
}

/// Pixel-wise mean of a set of images.
pub fn mean_image(images: &[SpatialImage]) -> Result<SpatialImage> {
    let first = images.first().ok_or_else(|| Error::invalid("mean of no images"))?;
    let mut acc = vec![0.0f64; first.len()];
    for img in images {
        first.same_shape(img)?;
        acc.iter_mut().zip(img.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let n = images.len() as f64;
    SpatialImage::new(
        first.height(),
        first.width(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Scores of the trivial attack that answers every query with the mean image.
pub fn constant_mean_floor(originals: &[SpatialImage]) -> Result<RecoveryReport> {
    let m = mean_image(originals)?;
    let guesses = vec![m; originals.len()];
    evaluate_recovery(&guesses, originals)
}

/// Protect each test image under the seed chosen by `mode`, recover it and
/// score the result.
pub fn attack_eval(f_inv: &Model, prepared: &Prepared, mode: SeedMode, seed: u64) -> Result<RecoveryReport> {
    let inputs = (0..prepared.len())
        .map(|i| prepared.protected(i, attack_seed(mode, seed, 0, i)))
        .collect::<Result<Vec<_>>>()?;
    let recovered = recover_batch(f_inv, &inputs)?;
    let originals: Vec<SpatialImage> = (0..prepared.len()).map(|i| prepared.original(i).clone()).collect();
    evaluate_recovery(&recovered, &originals)
}

#[derive(Clone, Debug)]
pub struct FixedSeedReport {
    pub theta: ShuffleSeed,
    pub same: RecoveryReport,
    pub different: Vec<(ShuffleSeed, RecoveryReport)>,
}

impl FixedSeedReport {
    /// Mean SSIM over all different-seed runs.
    pub fn different_ssim(&self) -> f64 {
        self.different.iter().map(|(_, r)| r.ssim_mean).sum::<f64>() / self.different.len() as f64
    }

    /// Largest deviation of a single different-seed run from their mean.
    pub fn different_spread(&self) -> f64 {
        let m = self.different_ssim();
        self.different
            .iter()
            .map(|(_, r)| (r.ssim_mean - m).abs())
            .fold(0.0, f64::max)
    }

    pub fn gap(&self) -> f64 {
        self.same.ssim_mean - self.different_ssim()
    }

    pub fn key_values(&self) -> String {
        let mut s = format!("theta={}\n", self.theta.0);
        s += &self.same.key_values("same.");
        for (t, r) in &self.different {
            s += &r.key_values(&format!("theta_prime.{}.", t.0));
        }
        let _ = writeln!(s, "different.ssim_mean={:.6}", self.different_ssim());
        let _ = writeln!(s, "different.ssim_spread={:.6}", self.different_spread());
        let _ = writeln!(s, "gap={:.6}", self.gap());
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("theta,index,ssim,psnr\n");
        let runs = std::iter::once((self.theta, &self.same)).chain(self.different.iter().map(|(t, r)| (*t, r)));
        for (t, r) in runs {
            for (i, p) in r.per_image.iter().enumerate() {
                let _ = writeln!(s, "{},{i},{:.6},{:.4}", t.0, p.ssim, p.psnr);
            }
        }
        s
    }
}

/// Evaluate a recovery model trained on a single seed `theta` on test images
/// protected with `theta` and with each of `theta_primes`.
pub fn fixed_seed_experiment(
    f_inv: &Model,
    protection: &Protection,
    test: &[SpatialImage],
    theta: ShuffleSeed,
    theta_primes: &[ShuffleSeed],
) -> Result<FixedSeedReport> {
    if theta_primes.is_empty() {
        return Err(Error::invalid("at least one alternative seed is required"));
    }
    if theta_primes.contains(&theta) {
        return Err(Error::invalid(format!(
            "alternative seed equals the training seed {}",
            theta.0
        )));
    }
    let prepared = protection.prepare(test)?;
    let same = attack_eval(f_inv, &prepared, SeedMode::Fixed(theta), 0)?;
    let different = theta_primes
        .iter()
        .map(|&t| Ok((t, attack_eval(f_inv, &prepared, SeedMode::Fixed(t), 0)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedSeedReport {
        theta,
        same,
        different,
    })
}
