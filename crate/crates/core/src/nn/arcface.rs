//! Angular-margin softmax cross-entropy.
//!
//! Embeddings and class weights are L2-normalised, giving cosine logits
//! `cos θ_ij ∈ [-1, 1]`. The target logit is replaced by `cos(θ_y + m)`
//! (additive angular margin) or `cos θ_y − m` (additive cosine margin) and
//! every logit is multiplied by the scale `s` before a log-sum-exp
//! cross-entropy.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginKind {
    /// `cos(θ + m)`
    Angular,
    /// `cos θ − m`
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub scale: f32,
    pub margin: f32,
    pub kind: MarginKind,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 16.0,
            margin: 0.3,
            kind: MarginKind::Angular,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::invalid(format!("margin scale {} must be > 0", self.scale)));
        }
        if !(0.0..std::f32::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        Ok(())
    }

    /// Cross-entropy of one row of cosines with target `y`, and its gradient
    /// with respect to each cosine.
    pub fn row_loss(&self, cos: &[f64], y: usize) -> (f64, Vec<f64>) {
        let s = self.scale as f64;
        let (phi, dphi) = self.target(cos[y]);
        let z: Vec<f64> = cos
            .iter()
            .enumerate()
            .map(|(j, &c)| s * if j == y { phi } else { c })
            .collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        let grad = z
            .iter()
            .enumerate()
            .map(|(j, &zj)| {
                let p = (zj - lse).exp();
                if j == y {
                    s * (p - 1.0) * dphi
                } else {
                    s * p
                }
            })
            .collect();
        (lse - z[y], grad)
    }

    /// Margin-adjusted target cosine and its derivative with respect to `c`.
    fn target(&self, c: f64) -> (f64, f64) {
        let m = self.margin as f64;
        match self.kind {
            MarginKind::Cosine => (c - m, 1.0),
            MarginKind::Angular => {
                if m == 0.0 {
                    return (c, 1.0);
                }
                // Past θ = π − m, cos(θ + m) stops being monotone; fall back
                // to the linear extension used by common implementations.
                let threshold = (std::f64::consts::PI - m).cos();
                if c > threshold {
                    let s = (1.0 - c * c).max(1e-12).sqrt();
                    (c * m.cos() - s * m.sin(), m.cos() + m.sin() * c / s)
                } else {
                    (c - (std::f64::consts::PI - m).sin() * m, 1.0)
                }
            }
        }
    }
}

fn normalized_rows(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let cols = t.shape()[1];
    let mut out = Vec::with_capacity(t.len());
    let mut norms = Vec::with_capacity(t.shape()[0]);
    for r in t.data().chunks_exact(cols) {
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        norms.push(n);
        out.extend(r.iter().map(|&v| v as f64 / n));
    }
    (out, norms)
}

fn check(emb: &Tensor, weight: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let [b, d] = emb.dims2()?;
    let [n, wd] = weight.dims2()?;
    if wd != d {
        return Err(Error::invalid(format!(
            "embedding dim {d} does not match head dim {wd}"
        )));
    }
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    Ok((b, d, n))
}

/// Cosine similarity matrix `(B, n)` between normalised embeddings and class weights.
pub fn cosine_logits(emb: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let [b, d] = emb.dims2()?;
    let [n, wd] = weight.dims2()?;
    if wd != d {
        return Err(Error::invalid("embedding/head dim mismatch"));
    }
    let (e, _) = normalized_rows(emb);
    let (w, _) = normalized_rows(weight);
    let mut out = vec![0.0f32; b * n];
    for i in 0..b {
        for j in 0..n {
            out[i * n + j] = (0..d).map(|k| e[i * d + k] * w[j * d + k]).sum::<f64>() as f32;
        }
    }
    Tensor::new(&[b, n], out)
}

/// Returns the mean loss and the gradient factor `∂L/∂cos_ij` (already divided by B).
fn loss_and_cos_grad(
    emb: &Tensor,
    weight: &Tensor,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let (b, d, n) = check(emb, weight, labels)?;
    let (e, en) = normalized_rows(emb);
    let (w, wn) = normalized_rows(weight);
    let mut total = 0.0;
    let mut gcos = vec![0.0f64; b * n];
    let mut z = vec![0.0f64; n];
    for i in 0..b {
        let y = labels[i];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = (0..d).map(|k| e[i * d + k] * w[j * d + k]).sum();
        }
        let (loss, dcos) = cfg.row_loss(&z, y);
        total += loss;
        for j in 0..n {
            gcos[i * n + j] = dcos[j] / b as f64;
        }
    }
    Ok((total / b as f64, gcos, e, en, w, wn))
}

/// Mean margin cross-entropy over the batch.
pub fn arcface_value(emb: &Tensor, weight: &Tensor, labels: &[usize], cfg: &MarginConfig) -> Result<f32> {
    Ok(loss_and_cos_grad(emb, weight, labels, cfg)?.0 as f32)
}

/// Gradients `(∂L/∂emb, ∂L/∂weight)` scaled by the upstream gradient `g`.
pub(crate) fn arcface_backward(
    emb: &Tensor,
    weight: &Tensor,
    labels: &[usize],
    cfg: &MarginConfig,
    g: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (_, gcos, e, en, w, wn) = loss_and_cos_grad(emb, weight, labels, cfg)?;
    let (b, d) = (emb.shape()[0], emb.shape()[1]);
    let n = weight.shape()[0];
    let mut de_hat = vec![0.0f64; b * d];
    let mut dw_hat = vec![0.0f64; n * d];
    for i in 0..b {
        for j in 0..n {
            let gij = gcos[i * n + j] * g as f64;
            if gij == 0.0 {
                continue;
            }
            for k in 0..d {
                de_hat[i * d + k] += gij * w[j * d + k];
                dw_hat[j * d + k] += gij * e[i * d + k];
            }
        }
    }
    // through u = v / |v|:  dv = (du - u (u·du)) / |v|
    let unnormalize = |u: &[f64], du: &[f64], norms: &[f64]| -> Vec<f32> {
        let mut out = vec![0.0f32; u.len()];
        for (r, &nrm) in norms.iter().enumerate() {
            let ur = &u[r * d..(r + 1) * d];
            let dr = &du[r * d..(r + 1) * d];
            let dot: f64 = ur.iter().zip(dr).map(|(a, b)| a * b).sum();
            for k in 0..d {
                out[r * d + k] = ((dr[k] - ur[k] * dot) / nrm) as f32;
            }
        }
        out
    };
    Ok((unnormalize(&e, &de_hat, &en), unnormalize(&w, &dw_hat, &wn)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed | 1;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 40) as f32 / (1u64 << 23) as f32 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn margin_free_is_cosine_softmax() {
        let emb = t(&[5, 4], 1);
        let w = t(&[3, 4], 2);
        let labels = [0, 2, 1, 1, 0];
        let cfg = MarginConfig {
            scale: 1.0,
            margin: 0.0,
            kind: MarginKind::Angular,
        };
        let got = arcface_value(&emb, &w, &labels, &cfg).unwrap() as f64;
        let cos = cosine_logits(&emb, &w).unwrap();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = cos.row(i);
            let lse = row.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
            want += lse - row[y] as f64;
        }
        want /= labels.len() as f64;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn single_class_has_zero_loss() {
        let emb = t(&[4, 6], 3);
        let w = t(&[1, 6], 4);
        let v = arcface_value(&emb, &w, &[0, 0, 0, 0], &MarginConfig::default()).unwrap();
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let emb = t(&[2, 4], 3);
        let w = t(&[3, 4], 4);
        assert!(matches!(
            arcface_value(&emb, &w, &[0, 3], &MarginConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn row_loss_monotone_in_target_cosine() {
        let mut rng = crate::perturb::SplitMix64::new(99);
        for kind in [MarginKind::Angular, MarginKind::Cosine] {
            let cfg = MarginConfig {
                kind,
                ..MarginConfig::default()
            };
            for _ in 0..200 {
                let n = 2 + rng.below(8) as usize;
                let y = rng.below(n as u64) as usize;
                let mut cos: Vec<f64> = (0..n).map(|_| rng.unit() * 2.0 - 1.0).collect();
                let lo = cos[y].min(0.9);
                cos[y] = lo;
                let (l0, _) = cfg.row_loss(&cos, y);
                cos[y] = lo + (1.0 - lo) * (0.05 + 0.9 * rng.unit());
                let (l1, _) = cfg.row_loss(&cos, y);
                assert!(l1 < l0, "{kind:?}: {l1} !< {l0}");
            }
        }
    }

    #[test]
    fn loss_decreases_as_target_cosine_rises() {
        // Two-dimensional embeddings rotated towards the target class weight.
        let w = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        for kind in [MarginKind::Angular, MarginKind::Cosine] {
            let cfg = MarginConfig {
                kind,
                ..MarginConfig::default()
            };
            let mut prev = f32::INFINITY;
            for step in 0..10 {
                let a = 1.4 - step as f32 * 0.15;
                let emb = Tensor::new(&[1, 2], vec![a.cos(), a.sin()]).unwrap();
                let l = arcface_value(&emb, &w, &[0], &cfg).unwrap();
                assert!(l < prev);
                prev = l;
            }
        }
    }
}
