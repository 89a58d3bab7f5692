//! Image-quality and verification metrics.

use crate::codec::SpatialImage;
use crate::data::Pair;
use crate::error::{Error, Result};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn check_pair(a: &SpatialImage, b: &SpatialImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), unit dynamic
/// range, valid-region filtering, averaged over positions and channels.
/// Images smaller than the window are compared with one global window.
pub fn ssim(a: &SpatialImage, b: &SpatialImage) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.shape();
    if h < WINDOW || w < WINDOW {
        return Ok((0..c).map(|k| global_ssim(a.plane(k), b.plane(k))).sum::<f64>() / c as f64);
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

fn global_ssim(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

pub fn mse(a: &SpatialImage, b: &SpatialImage) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log10(1 / MSE)` for unit dynamic range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &SpatialImage, b: &SpatialImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    /// Pairs scoring strictly above this are declared "same".
    pub threshold: f64,
}

/// Cosine-score every pair and pick the accuracy-maximising threshold.
pub fn verify_pairs(a: &[&[f32]], b: &[&[f32]], same: &[bool]) -> Result<Verification> {
    if a.len() != b.len() || a.len() != same.len() {
        return Err(Error::invalid(format!(
            "unpaired inputs: {} / {} embeddings, {} labels",
            a.len(),
            b.len(),
            same.len()
        )));
    }
    let scores: Vec<f64> = a.iter().zip(b).map(|(x, y)| cosine_similarity(x, y)).collect();
    best_threshold(&scores, same)
}

/// Cosine score of each index pair into `emb`.
pub fn pair_scores(emb: &[Vec<f32>], pairs: &[Pair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| match (emb.get(p.a), emb.get(p.b)) {
            (Some(a), Some(b)) => Ok(cosine_similarity(a, b)),
            _ => Err(Error::invalid(format!(
                "pair ({}, {}) out of range for {} embeddings",
                p.a,
                p.b,
                emb.len()
            ))),
        })
        .collect()
}

pub fn verify_indexed(emb: &[Vec<f32>], pairs: &[Pair]) -> Result<Verification> {
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    best_threshold(&pair_scores(emb, pairs)?, &same)
}

/// Exhaustive sweep over midpoints of sorted scores (and both extremes).
pub fn best_threshold(scores: &[f64], same: &[bool]) -> Result<Verification> {
    if scores.is_empty() {
        return Err(Error::invalid("verification needs at least one pair"));
    }
    if scores.len() != same.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let n = scores.len();
    let total_pos = same.iter().filter(|&&s| s).count();
    // threshold below everything: all predicted "same"
    let mut correct = total_pos;
    let mut best = Verification {
        accuracy: correct as f64 / n as f64,
        threshold: scores[idx[0]] - 1.0,
    };
    for k in 0..n {
        let i = idx[k];
        // moving sample i to the "different" side
        if same[i] {
            correct -= 1;
        } else {
            correct += 1;
        }
        if k + 1 < n && scores[idx[k + 1]] == scores[i] {
            continue;
        }
        let t = if k + 1 < n {
            0.5 * (scores[i] + scores[idx[k + 1]])
        } else {
            scores[i] + 1.0
        };
        let acc = correct as f64 / n as f64;
        if acc > best.accuracy {
            best = Verification {
                accuracy: acc,
                threshold: t,
            };
        }
    }
    Ok(best)
}

/// Accuracy of a fixed threshold (`score > threshold` means "same").
pub fn accuracy_at(scores: &[f64], same: &[bool], threshold: f64) -> f64 {
    let ok = scores
        .iter()
        .zip(same)
        .filter(|(&s, &y)| (s > threshold) == y)
        .count();
    ok as f64 / scores.len().max(1) as f64
}

/// True-positive rate at the smallest threshold `t` (predicting `score ≥ t`)
/// whose false-positive rate does not exceed `target_fpr`.
pub fn tpr_at_fpr(scores: &[f64], same: &[bool], target_fpr: f64) -> Result<f64> {
    if scores.len() != same.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::invalid(format!("target FPR {target_fpr} outside (0, 1)")));
    }
    let negatives = same.iter().filter(|&&s| !s).count();
    if negatives == 0 {
        return Err(Error::invalid("TPR@FPR needs at least one negative pair"));
    }
    let positives = scores.len() - negatives;
    let mut neg: Vec<f64> = scores.iter().zip(same).filter(|(_, &y)| !y).map(|(&s, _)| s).collect();
    neg.sort_by(|a, b| b.total_cmp(a));
    // Largest number of negatives that may be accepted.
    let allowed = (target_fpr * negatives as f64 + 1e-9).floor() as usize;
    // Accepting `score ≥ t` admits every negative ≥ t; the smallest valid t is
    // just above the (allowed+1)-th highest negative.
    let tpr = |t: f64| -> f64 {
        if positives == 0 {
            return 0.0;
        }
        scores.iter().zip(same).filter(|(&s, &y)| y && s >= t).count() as f64 / positives as f64
    };
    if allowed >= negatives {
        return Ok(tpr(f64::NEG_INFINITY));
    }
    let cutoff = neg[allowed];
    // smallest score strictly above the cutoff
    let t = scores
        .iter()
        .copied()
        .filter(|&s| s > cutoff)
        .fold(f64::INFINITY, f64::min);
    Ok(tpr(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::SplitMix64;

    fn rand_image(h: usize, w: usize, seed: u64) -> SpatialImage {
        let mut r = SplitMix64::new(seed);
        SpatialImage::new(h, w, (0..3 * h * w).map(|_| r.unit() as f32).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = rand_image(32, 32, 1);
        let b = rand_image(32, 32, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ssim(&a, &rand_image(16, 16, 1)).is_err());
    }

    #[test]
    fn ssim_of_inverted_binary_is_negative() {
        let mut r = SplitMix64::new(4);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| (r.below(2)) as f32).collect();
        let a = SpatialImage::new(32, 32, data).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &SpatialImage::from_planes(b).unwrap()).unwrap() < 0.0);
    }

    #[test]
    fn psnr_formula() {
        let a = SpatialImage::zeros(4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = SpatialImage::from_planes(a.map(|_| 0.1)).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = SpatialImage::from_planes(a.map(|_| 0.01)).unwrap();
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-4);
        assert!(psnr_from_mse(0.02) < psnr_from_mse(0.01));
    }

    #[test]
    fn verification_sweeps() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let same = [false, false, true, true];
        let v = best_threshold(&scores, &same).unwrap();
        assert_eq!(v.accuracy, 1.0);
        assert!((v.threshold - 0.5).abs() < 1e-12);
        assert_eq!(best_threshold(&[0.3], &[true]).unwrap().accuracy, 1.0);
        assert_eq!(best_threshold(&[0.3], &[false]).unwrap().accuracy, 1.0);
        assert!(best_threshold(&[], &[]).is_err());
        let monotone: Vec<f64> = scores.iter().map(|s: &f64| s.powi(3) * 7.0 - 2.0).collect();
        assert_eq!(best_threshold(&monotone, &same).unwrap().accuracy, v.accuracy);
    }

    #[test]
    fn tpr_cases() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let same = [false, false, true, true];
        assert_eq!(tpr_at_fpr(&scores, &same, 0.01).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&[0.5; 4], &same, 0.5).unwrap(), 0.0);
        assert!(tpr_at_fpr(&scores, &[true; 4], 0.1).is_err());
    }
}
