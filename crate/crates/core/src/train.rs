//! Two-stage protector training and recovery-attacker training.

use std::fmt;

use crate::codec::{self, HighDimRep, MappingSpec, Planes, SpatialImage};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{
    build_generator, build_recognizer, build_recovery, Adam, ArcFaceHead, Graph, MarginConfig, Model, Sgd, Tensor,
};
use crate::perturb::{ShuffleSeed, SplitMix64};
use crate::pipeline::{self, combined_loss, Perturbation, ProtectorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            data: 2,
            shuffle: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f32,
    pub lr_drop_epochs: Vec<usize>,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Multiplier on the generator's learning rate.
    pub generator_lr_factor: f32,
    /// Protected copies per image in stage 2.
    pub augment_copies: usize,
    pub seeds: Seeds,
    pub generator_base: usize,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_initial: 1e-3,
            lr_drop_epochs: vec![15, 24],
            momentum: 0.9,
            weight_decay: 1e-4,
            generator_lr_factor: 0.5,
            augment_copies: 3,
            seeds: Seeds::default(),
            generator_base: 16,
            embedding_dim: 64,
        }
    }
}

impl TrainConfig {
    /// The large-scale schedule: 24 epochs, batch 64, drops at 10, 18 and 22.
    pub fn full_schedule() -> Self {
        Self {
            epochs: 24,
            batch_size: 64,
            lr_initial: 1e-2,
            lr_drop_epochs: vec![10, 18, 22],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("learning-rate drop epochs must be strictly increasing"));
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::invalid("learning-rate drops must come before the last epoch"));
        }
        if !(self.lr_initial >= 0.0 && self.generator_lr_factor >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        if self.augment_copies == 0 {
            return Err(Error::invalid("augment copies must be at least 1"));
        }
        if self.embedding_dim == 0 || self.generator_base == 0 {
            return Err(Error::invalid("model widths must be positive"));
        }
        Ok(())
    }

    fn sgd(&self, lr: f32) -> Sgd {
        Sgd {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// `lr_initial / 10^k` where `k` counts drop epochs `≤ epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f32> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.lr_initial / 10f32.powi(drops as i32))
}

/// One line of a training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub gen_loss: f64,
    pub fr_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:e} l_gen={:.6} l_fr={:.6} l_total={:.6} acc={:.4}",
            self.epoch, self.lr, self.gen_loss, self.fr_loss, self.total_loss, self.accuracy
        )
    }
}

pub fn format_logs(logs: &[EpochLog]) -> String {
    logs.iter().map(|l| format!("{l}\n")).collect()
}

/// Seeded epoch order split into batches.
/// Embeddings of `inputs` under `model`, one row per input.
pub fn embed(model: &Model, inputs: &[Planes]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let refs: Vec<&Planes> = chunk.iter().collect();
        let t = model.infer(&Tensor::stack(&refs)?)?;
        out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
    }
    Ok(out)
}

fn batches(n: usize, batch: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i as u64 + 1) as usize);
    }
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn gather(items: &[Planes], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Planes> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

fn check_labeled(data: &LabeledSet) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.distinct_classes() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    Ok(())
}

pub struct Stage1Output {
    pub generator: Model,
    pub recognizer: Model,
    pub head: ArcFaceHead,
    pub logs: Vec<EpochLog>,
}

/// Jointly train `g` and `f` on `α·‖X − d(g(e(X)))‖₁ + β·arcface(f(r))` with
/// `r = e(X) − g(e(X))`. With `β = 0` the recognizer and head stay at init.
pub fn train_stage1(data: &LabeledSet, cfg: &TrainConfig, pcfg: &ProtectorConfig) -> Result<Stage1Output> {
    check_labeled(data)?;
    cfg.validate()?;
    pcfg.validate()?;
    let spec = pcfg.mapping;
    let channels = spec.channels();
    let mut g = build_generator(channels, cfg.generator_base, cfg.seeds.init)?;
    let (mut f, mut head) = build_recognizer(
        channels,
        cfg.embedding_dim,
        data.class_count(),
        pcfg.margin,
        cfg.seeds.init.wrapping_add(100),
    )?;
    let train_f = pcfg.beta > 0.0;
    if !train_f {
        f.freeze();
        head.params_mut().set_trainable(false);
    }
    let images: Vec<Planes> = data.images.iter().map(|i| (**i).clone()).collect();
    let encoded: Vec<Planes> = data
        .images
        .iter()
        .map(|i| codec::encode(i, &spec).into_planes())
        .collect();
    let mut rng = SplitMix64::new(cfg.seeds.data);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let (opt_g, opt_f) = (cfg.sgd(lr * cfg.generator_lr_factor), cfg.sgd(lr));
        let (mut sg, mut sf, mut st, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut graph = Graph::new();
            let img = graph.input(gather(&images, &idx)?);
            let x = graph.input(gather(&encoded, &idx)?);
            let xp = g.forward(&mut graph, x)?;
            let r = graph.sub(x, xp)?;
            let img_p = graph.decode(xp, spec)?;
            let emb = f.forward(&mut graph, r)?;
            let w = head.weight_var(&mut graph);
            let loss = combined_loss(&mut graph, img, img_p, emb, &labels, w, pcfg)?;
            let n = idx.len() as f64;
            sg += graph.value(loss.gen).item() as f64 * n;
            sf += graph.value(loss.fr).item() as f64 * n;
            st += graph.value(loss.total).item() as f64 * n;
            correct += head
                .predict(graph.value(emb))?
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            graph.backward(loss.total)?;
            g.params_mut().accumulate_grads(&graph)?;
            opt_g.step(g.params_mut())?;
            if train_f {
                f.params_mut().accumulate_grads(&graph)?;
                head.params_mut().accumulate_grads(&graph)?;
                opt_f.step(f.params_mut())?;
                opt_f.step(head.params_mut())?;
            }
        }
        let n = data.len() as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            gen_loss: sg / n,
            fr_loss: sf / n,
            total_loss: st / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok(Stage1Output {
        generator: g,
        recognizer: f,
        head,
        logs,
    })
}

pub struct RecognizerOutput {
    pub recognizer: Model,
    pub head: ArcFaceHead,
    pub logs: Vec<EpochLog>,
}

/// Root-mean-square level that recognizer inputs are rescaled to.
pub const INPUT_RMS: f64 = 0.5;

/// Global multiplier bringing the training inputs to [`INPUT_RMS`].
pub fn input_scale(inputs: &[Planes]) -> f32 {
    let (sum, n) = inputs.iter().fold((0.0f64, 0usize), |(s, n), p| {
        (s + p.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>(), n + p.data().len())
    });
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 1e-12 {
        (INPUT_RMS / rms) as f32
    } else {
        1.0
    }
}

/// Train a recognizer with the margin loss alone on fixed per-sample inputs.
pub fn train_recognizer(
    inputs: &[Planes],
    labels: &[usize],
    cfg: &TrainConfig,
    margin: MarginConfig,
) -> Result<RecognizerOutput> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    if inputs.len() != labels.len() {
        return Err(Error::invalid("inputs and labels differ in length"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    cfg.validate()?;
    let (mut f, mut head) = build_recognizer(
        first.channels(),
        cfg.embedding_dim,
        classes,
        margin,
        cfg.seeds.init.wrapping_add(200),
    )?;
    f.set_input_scale(input_scale(inputs))?;
    let mut rng = SplitMix64::new(cfg.seeds.data ^ 0x5EED);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let opt = cfg.sgd(lr);
        let (mut sf, mut correct) = (0.0, 0usize);
        for idx in batches(inputs.len(), cfg.batch_size, &mut rng) {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut graph = Graph::new();
            let x = graph.input(gather(inputs, &idx)?);
            let emb = f.forward(&mut graph, x)?;
            let w = head.weight_var(&mut graph);
            let loss = graph.margin_loss(emb, w, &y, margin)?;
            sf += graph.value(loss).item() as f64 * idx.len() as f64;
            correct += head
                .predict(graph.value(emb))?
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            graph.backward(loss)?;
            f.params_mut().accumulate_grads(&graph)?;
            head.params_mut().accumulate_grads(&graph)?;
            opt.step(f.params_mut())?;
            opt.step(head.params_mut())?;
        }
        let n = inputs.len() as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            gen_loss: 0.0,
            fr_loss: sf / n,
            total_loss: sf / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok(RecognizerOutput {
        recognizer: f,
        head,
        logs,
    })
}

/// Seed of the `copy`-th augmented version of sample `index`.
pub fn augment_seed(shuffle_seed: u64, index: usize, copy: usize) -> ShuffleSeed {
    let mut rng = SplitMix64::new(shuffle_seed);
    let mut r = rng.fork(((index as u64) << 16) | copy as u64);
    ShuffleSeed(r.next())
}

/// Expand every image into `augment_copies` protective images with fresh
/// seeds; copies after the first are mirrored with probability 1/2.
pub fn protected_copies(
    data: &LabeledSet,
    g: &Model,
    cfg: &TrainConfig,
    pcfg: &ProtectorConfig,
) -> Result<(Vec<Planes>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(data.len() * cfg.augment_copies);
    let mut labels = Vec::with_capacity(inputs.capacity());
    let mut flip_rng = SplitMix64::new(cfg.seeds.shuffle ^ 0xF11F);
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
        for copy in 0..cfg.augment_copies {
            let imgs: Vec<SpatialImage> = chunk
                .iter()
                .map(|&i| {
                    let flip = copy > 0 && flip_rng.below(2) == 1;
                    if flip {
                        data.images[i].flipped_horizontal()
                    } else {
                        data.images[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SpatialImage> = imgs.iter().collect();
            let seeds: Vec<ShuffleSeed> = chunk
                .iter()
                .map(|&i| augment_seed(cfg.seeds.shuffle, i, copy))
                .collect();
            for (p, &i) in pipeline::protect_batch(&refs, g, &seeds, pcfg)?.into_iter().zip(chunk) {
                inputs.push(p.image.into_planes());
                labels.push(data.labels[i]);
            }
        }
    }
    Ok((inputs, labels))
}

/// Train `f_p` on protective images from a frozen generator.
pub fn train_stage2(
    data: &LabeledSet,
    g: &Model,
    cfg: &TrainConfig,
    pcfg: &ProtectorConfig,
) -> Result<RecognizerOutput> {
    if !g.is_frozen() {
        return Err(Error::state("stage 2 requires a frozen generator"));
    }
    check_labeled(data)?;
    cfg.validate()?;
    pcfg.validate()?;
    let (inputs, labels) = protected_copies(data, g, cfg, pcfg)?;
    train_recognizer(&inputs, &labels, cfg, pcfg.margin)
}

/// What the attacker observes for a given original image.
#[derive(Clone, Debug)]
pub enum Protection {
    /// `X_p = X` (sanity upper bound).
    Identity,
    /// MinusFace with a frozen generator.
    MinusFace { generator: Model, cfg: ProtectorConfig },
    /// Perturb `e(X)` directly, without feature subtraction.
    NoSubtraction { cfg: ProtectorConfig },
}

/// Seed-independent part of a protection applied to a fixed image set.
pub struct Prepared {
    images: Vec<SpatialImage>,
    reps: Vec<HighDimRep>,
    spec: MappingSpec,
    perturbation: Perturbation,
    identity: bool,
}

impl Protection {
    pub fn prepare(&self, images: &[SpatialImage]) -> Result<Prepared> {
        match self {
            Protection::Identity => Ok(Prepared {
                images: images.to_vec(),
                reps: Vec::new(),
                spec: MappingSpec::dct8(),
                perturbation: Perturbation::None,
                identity: true,
            }),
            Protection::MinusFace { generator, cfg } => {
                let mut reps = Vec::with_capacity(images.len());
                for chunk in images.chunks(64) {
                    let refs: Vec<&SpatialImage> = chunk.iter().collect();
                    reps.extend(
                        pipeline::regenerate_batch(&refs, generator, &cfg.mapping)?
                            .iter()
                            .map(|r| r.residue()),
                    );
                }
                Ok(Prepared {
                    images: images.to_vec(),
                    reps,
                    spec: cfg.mapping,
                    perturbation: cfg.perturbation,
                    identity: false,
                })
            }
            Protection::NoSubtraction { cfg } => Ok(Prepared {
                images: images.to_vec(),
                reps: images.iter().map(|i| codec::encode(i, &cfg.mapping)).collect(),
                spec: cfg.mapping,
                perturbation: cfg.perturbation,
                identity: false,
            }),
        }
    }
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn original(&self, i: usize) -> &SpatialImage {
        &self.images[i]
    }

    /// Protective image of sample `i` under `seed`.
    pub fn protected(&self, i: usize, seed: ShuffleSeed) -> Result<SpatialImage> {
        if self.identity {
            return Ok(self.images[i].clone());
        }
        let p = pipeline::perturb(&self.reps[i], seed, self.perturbation)?;
        codec::decode(&p, &self.spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedMode {
    /// A fresh θ for every sample in every epoch.
    Random,
    /// One θ for everything.
    Fixed(ShuffleSeed),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epochs: usize,
    pub patience: usize,
    /// Minimum relative improvement of the epoch loss that resets patience.
    pub min_delta: f64,
    pub batch_size: usize,
    pub lr: f32,
    pub seed_mode: SeedMode,
    pub init_seed: u64,
    pub data_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            patience: 5,
            min_delta: 1e-3,
            batch_size: 4,
            lr: 1e-3,
            seed_mode: SeedMode::Random,
            init_seed: 11,
            data_seed: 12,
        }
    }
}

pub struct RecoveryOutput {
    pub model: Model,
    /// `(epoch, mean L1)` per completed epoch.
    pub logs: Vec<(usize, f64)>,
}

/// Seed the attacker's simulated client uses for sample `i` at `epoch`.
pub fn attack_seed(mode: SeedMode, data_seed: u64, epoch: usize, i: usize) -> ShuffleSeed {
    match mode {
        SeedMode::Fixed(s) => s,
        SeedMode::Random => {
            let mut r = SplitMix64::new(data_seed ^ 0xA77A_C4E5);
            ShuffleSeed(r.fork(((epoch as u64) << 32) | i as u64).next())
        }
    }
}

/// Train `f⁻¹` to map protective images back to originals with an L1 loss,
/// stopping early once the epoch loss stops improving for `patience` epochs.
pub fn train_recovery(images: &[SpatialImage], protection: &Protection, cfg: &AttackConfig) -> Result<RecoveryOutput> {
    if images.is_empty() {
        return Err(Error::invalid("attacker dataset is empty"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let prepared = protection.prepare(images)?;
    let targets: Vec<Planes> = images.iter().map(|i| (**i).clone()).collect();
    let mut model = build_recovery(cfg.init_seed);
    let first = (0..images.len())
        .map(|i| {
            prepared
                .protected(i, attack_seed(cfg.seed_mode, cfg.data_seed, 0, i))
                .map(SpatialImage::into_planes)
        })
        .collect::<Result<Vec<_>>>()?;
    model.set_input_scale(input_scale(&first))?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = SplitMix64::new(cfg.data_seed);
    let mut logs = Vec::new();
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(images.len(), cfg.batch_size, &mut rng) {
            let inputs = idx
                .iter()
                .map(|&i| {
                    prepared
                        .protected(i, attack_seed(cfg.seed_mode, cfg.data_seed, epoch, i))
                        .map(SpatialImage::into_planes)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Planes> = inputs.iter().collect();
            let mut graph = Graph::new();
            let x = graph.input(Tensor::stack(&refs)?);
            let y = graph.input(gather(&targets, &idx)?);
            let out = model.forward(&mut graph, x)?;
            let loss = graph.l1_loss(out, y)?;
            total += graph.value(loss).item() as f64 * idx.len() as f64;
            graph.backward(loss)?;
            model.params_mut().accumulate_grads(&graph)?;
            opt.step(model.params_mut())?;
        }
        let mean = total / images.len() as f64;
        logs.push((epoch, mean));
        if mean < best * (1.0 - cfg.min_delta) {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.freeze();
    Ok(RecoveryOutput { model, logs })
}
