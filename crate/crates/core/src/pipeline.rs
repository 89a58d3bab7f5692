//! Residues, regeneration, protective images and the combined objective.

use crate::codec::{self, HighDimRep, MappingSpec, Planes, SpatialImage};
use crate::error::{Error, Result};
use crate::nn::{Graph, Model, Tensor, Var};
use crate::nn::MarginConfig;
use crate::perturb::{mask_channels, permutation_from_seed, shuffle_channels, ShuffleSeed};

/// Perturbation applied to the residue before decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Shuffle,
    /// Zero a seeded fraction of channels.
    Mask(f64),
    /// No perturbation: `X_p = R'`. Only meaningful for ablations.
    None,
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Perturbation::Shuffle => f.write_str("shuffle"),
            Perturbation::Mask(r) => write!(f, "mask:{r}"),
            Perturbation::None => f.write_str("none"),
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "shuffle" => Ok(Perturbation::Shuffle),
            "none" => Ok(Perturbation::None),
            _ => {
                let ratio = s
                    .strip_prefix("mask:")
                    .or_else(|| s.strip_prefix("mask="))
                    .ok_or_else(|| Error::invalid(format!("unknown perturbation '{s}'")))?;
                let r: f64 = ratio
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad mask ratio '{ratio}'")))?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::invalid(format!("mask ratio {r} outside [0, 1]")));
                }
                Ok(Perturbation::Mask(r))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtectorConfig {
    pub mapping: MappingSpec,
    /// Weight on the regeneration loss.
    pub alpha: f32,
    /// Weight on the recognition loss.
    pub beta: f32,
    pub perturbation: Perturbation,
    pub margin: MarginConfig,
}

impl Default for ProtectorConfig {
    fn default() -> Self {
        Self {
            mapping: MappingSpec::dct8(),
            alpha: 5.0,
            beta: 1.0,
            perturbation: Perturbation::Shuffle,
            margin: MarginConfig::default(),
        }
    }
}

impl ProtectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if let Perturbation::Mask(r) = self.perturbation {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("mask ratio {r} outside [0, 1]")));
            }
        }
        self.margin.validate()
    }
}

/// `r = x − x'`.
pub fn residue(x: &HighDimRep, x_prime: &HighDimRep) -> Result<HighDimRep> {
    x.sub(x_prime)
}

/// Stack images into a `(B, 3, H, W)` tensor.
pub fn image_batch(images: &[&SpatialImage]) -> Result<Tensor> {
    let planes: Vec<&Planes> = images.iter().map(|i| &***i).collect();
    Tensor::stack(&planes)
}

/// Encode each image and stack into `(B, C, H, W)`.
pub fn encode_batch(images: &[&SpatialImage], spec: &MappingSpec) -> Result<Tensor> {
    let reps: Vec<HighDimRep> = images.iter().map(|i| codec::encode(i, spec)).collect();
    let planes: Vec<&Planes> = reps.iter().map(|r| &**r).collect();
    Tensor::stack(&planes)
}

pub fn reps_from_batch(t: &Tensor) -> Result<Vec<HighDimRep>> {
    Ok(t.unstack()?.into_iter().map(HighDimRep::from_planes).collect())
}

fn check_generator(g: &Model, spec: &MappingSpec) -> Result<()> {
    if g.spec().in_channels() != spec.channels() {
        return Err(Error::invalid(format!(
            "generator takes {} channels but the {} mapping produces {}",
            g.spec().in_channels(),
            spec.kind,
            spec.channels()
        )));
    }
    Ok(())
}

/// `x = e(X)`, `x' = g(x)`, `X' = d(x')`.
#[derive(Clone, Debug)]
pub struct Regenerated {
    pub x: HighDimRep,
    pub x_prime: HighDimRep,
    pub image_prime: SpatialImage,
}

impl Regenerated {
    pub fn residue(&self) -> HighDimRep {
        residue(&self.x, &self.x_prime).expect("shapes match by construction")
    }
}

pub fn regenerate(image: &SpatialImage, g: &Model, spec: &MappingSpec) -> Result<Regenerated> {
    Ok(regenerate_batch(&[image], g, spec)?.pop().expect("one item"))
}

pub fn regenerate_batch(images: &[&SpatialImage], g: &Model, spec: &MappingSpec) -> Result<Vec<Regenerated>> {
    check_generator(g, spec)?;
    let x = encode_batch(images, spec)?;
    let xp = g.infer(&x)?;
    reps_from_batch(&x)?
        .into_iter()
        .zip(reps_from_batch(&xp)?)
        .map(|(x, x_prime)| {
            let image_prime = codec::decode(&x_prime, spec)?;
            Ok(Regenerated {
                x,
                x_prime,
                image_prime,
            })
        })
        .collect()
}

/// Apply the configured perturbation with `seed`.
pub fn perturb(r: &HighDimRep, seed: ShuffleSeed, p: Perturbation) -> Result<HighDimRep> {
    match p {
        Perturbation::Shuffle => shuffle_channels(r, &permutation_from_seed(seed, r.channels())),
        Perturbation::Mask(ratio) => mask_channels(r, seed, ratio),
        Perturbation::None => Ok(r.clone()),
    }
}

/// A protective image and whether a perturbation produced it.
#[derive(Clone, Debug)]
pub struct Protected {
    pub image: SpatialImage,
    pub perturbed: bool,
}

/// `X_p = d(s(r; θ))` with `r = e(X) − g(e(X))`. Values are not clamped.
pub fn protect(image: &SpatialImage, g: &Model, seed: ShuffleSeed, cfg: &ProtectorConfig) -> Result<Protected> {
    Ok(protect_batch(&[image], g, &[seed], cfg)?.pop().expect("one item"))
}

pub fn protect_batch(
    images: &[&SpatialImage],
    g: &Model,
    seeds: &[ShuffleSeed],
    cfg: &ProtectorConfig,
) -> Result<Vec<Protected>> {
    if images.len() != seeds.len() {
        return Err(Error::invalid(format!(
            "{} images but {} seeds",
            images.len(),
            seeds.len()
        )));
    }
    cfg.validate()?;
    let regen = regenerate_batch(images, g, &cfg.mapping)?;
    regen
        .iter()
        .zip(seeds)
        .map(|(rg, &seed)| {
            let r = perturb(&rg.residue(), seed, cfg.perturbation)?;
            Ok(Protected {
                image: codec::decode(&r, &cfg.mapping)?,
                perturbed: cfg.perturbation != Perturbation::None,
            })
        })
        .collect()
}

/// Protective image of the no-subtraction ablation: `d(s(e(X); θ))`.
pub fn protect_without_subtraction(
    image: &SpatialImage,
    seed: ShuffleSeed,
    spec: &MappingSpec,
    p: Perturbation,
) -> Result<SpatialImage> {
    let x = codec::encode(image, spec);
    codec::decode(&perturb(&x, seed, p)?, spec)
}

/// Loss nodes of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub gen: Var,
    pub fr: Var,
}

/// `α·‖X − X'‖₁ + β·arcface(emb, labels)` recorded into `graph`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    graph: &mut Graph,
    image: Var,
    image_prime: Var,
    embeddings: Var,
    labels: &[usize],
    head_weight: Var,
    cfg: &ProtectorConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let gen = graph.l1_loss(image, image_prime)?;
    let fr = graph.margin_loss(embeddings, head_weight, labels, cfg.margin)?;
    let a = graph.scale(gen, cfg.alpha);
    let b = graph.scale(fr, cfg.beta);
    let total = graph.add(a, b)?;
    Ok(LossVars { total, gen, fr })
}
