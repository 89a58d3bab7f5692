//! Synthetic identity datasets, 8-bit image I/O and verification pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::codec::SpatialImage;
use crate::error::{Error, Result};
use crate::perturb::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    DefenderTrain,
    DefenderTest,
    Attacker,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::DefenderTrain => "defender-train",
            Split::DefenderTest => "defender-test",
            Split::Attacker => "attacker",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "defender-train" => Ok(Split::DefenderTrain),
            "defender-test" => Ok(Split::DefenderTest),
            "attacker" => Ok(Split::Attacker),
            _ => Err(Error::Format(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: SpatialImage,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub identities: usize,
    pub images_per_identity: usize,
    pub size: usize,
    pub samples: Vec<Sample>,
}

/// Images with dense class labels `0..class_count`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<SpatialImage>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Vec<SpatialImage>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn distinct_classes(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn refs(&self) -> Vec<&SpatialImage> {
        self.images.iter().collect()
    }
}

impl ToyDataset {
    /// Samples of one split with identities relabelled densely in sorted
    /// order (so the two defender splits agree on labels).
    pub fn split(&self, split: Split) -> LabeledSet {
        let ids: Vec<usize> = {
            let mut v: Vec<usize> = self
                .samples
                .iter()
                .filter(|s| s.split == split || (split != Split::Attacker && s.split != Split::Attacker))
                .map(|s| s.label)
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let dense: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let (images, labels) = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| (s.image.clone(), dense[&s.label]))
            .unzip();
        LabeledSet { images, labels }
    }

    /// Identities present in a split.
    pub fn identities_in(&self, split: Split) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.label)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Identity-level appearance parameters of a synthetic face.
#[derive(Clone, Debug)]
struct FaceParams {
    background: [f32; 3],
    skin: [f32; 3],
    hair: [f32; 3],
    center: (f32, f32),
    axes: (f32, f32),
    hair_line: f32,
    eye_y: f32,
    eye_dx: f32,
    eye_r: (f32, f32),
    eye_color: [f32; 3],
    brow_gap: f32,
    brow_tilt: f32,
    nose_len: f32,
    nose_w: f32,
    mouth_y: f32,
    mouth_w: f32,
    mouth_h: f32,
    mouth_color: [f32; 3],
    mole: Option<(f32, f32)>,
}

fn uniform(rng: &mut SplitMix64, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.unit() as f32
}

fn color(rng: &mut SplitMix64, lo: f32, hi: f32) -> [f32; 3] {
    [uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)]
}

impl FaceParams {
    fn sample(rng: &mut SplitMix64) -> Self {
        let tone = uniform(rng, 0.35, 0.9);
        let skin = [
            (tone + uniform(rng, 0.0, 0.1)).min(1.0),
            tone * uniform(rng, 0.7, 0.9),
            tone * uniform(rng, 0.5, 0.75),
        ];
        Self {
            background: color(rng, 0.05, 0.95),
            skin,
            hair: color(rng, 0.0, 0.6),
            center: (uniform(rng, -0.06, 0.06), uniform(rng, -0.04, 0.08)),
            axes: (uniform(rng, 0.5, 0.72), uniform(rng, 0.68, 0.9)),
            hair_line: uniform(rng, -0.65, -0.3),
            eye_y: uniform(rng, -0.3, -0.05),
            eye_dx: uniform(rng, 0.2, 0.36),
            eye_r: (uniform(rng, 0.07, 0.14), uniform(rng, 0.04, 0.1)),
            eye_color: color(rng, 0.0, 0.45),
            brow_gap: uniform(rng, 0.1, 0.2),
            brow_tilt: uniform(rng, -0.15, 0.15),
            nose_len: uniform(rng, 0.12, 0.3),
            nose_w: uniform(rng, 0.04, 0.1),
            mouth_y: uniform(rng, 0.3, 0.5),
            mouth_w: uniform(rng, 0.15, 0.32),
            mouth_h: uniform(rng, 0.03, 0.09),
            mouth_color: [uniform(rng, 0.4, 0.9), uniform(rng, 0.0, 0.35), uniform(rng, 0.05, 0.4)],
            mole: if rng.unit() < 0.5 {
                Some((uniform(rng, -0.4, 0.4), uniform(rng, -0.1, 0.4)))
            } else {
                None
            },
        }
    }
}

/// Soft inside-test for an axis-aligned ellipse, antialiased over `edge`.
fn ellipse(px: f32, py: f32, cx: f32, cy: f32, rx: f32, ry: f32, edge: f32) -> f32 {
    let dx = (px - cx) / rx;
    let dy = (py - cy) / ry;
    let d = (dx * dx + dy * dy).sqrt() - 1.0;
    let scale = rx.min(ry);
    (0.5 - d * scale / edge).clamp(0.0, 1.0)
}

fn blend(dst: &mut [f32; 3], src: [f32; 3], a: f32) {
    for k in 0..3 {
        dst[k] += (src[k] - dst[k]) * a;
    }
}

fn render(p: &FaceParams, size: usize, shift: (f32, f32)) -> SpatialImage {
    let mut img = SpatialImage::zeros(size, size);
    let hw = size * size;
    let edge = 2.0 / size as f32;
    let data = img.data_mut();
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) / size as f32 * 2.0 - 1.0 - shift.0;
            let v = (y as f32 + 0.5) / size as f32 * 2.0 - 1.0 - shift.1;
            let (cx, cy) = p.center;
            let mut c = p.background;
            let face = ellipse(u, v, cx, cy, p.axes.0, p.axes.1, edge);
            let hair_cap = ellipse(u, v, cx, cy - 0.06, p.axes.0 + 0.06, p.axes.1 + 0.04, edge)
                * ((cy + p.hair_line - v) / edge + 0.5).clamp(0.0, 1.0);
            blend(&mut c, p.hair, hair_cap);
            blend(&mut c, p.skin, face * (1.0 - hair_cap));
            for side in [-1.0f32, 1.0] {
                let ex = cx + side * p.eye_dx;
                let ey = cy + p.eye_y;
                blend(&mut c, [0.95, 0.95, 0.95], ellipse(u, v, ex, ey, p.eye_r.0, p.eye_r.1, edge));
                blend(&mut c, p.eye_color, ellipse(u, v, ex, ey, p.eye_r.1 * 0.9, p.eye_r.1 * 0.9, edge));
                let by = ey - p.brow_gap + side * p.brow_tilt * 0.3;
                blend(&mut c, p.hair, ellipse(u, v, ex, by, p.eye_r.0 * 1.2, 0.03, edge));
            }
            let nose_shade = [p.skin[0] * 0.75, p.skin[1] * 0.7, p.skin[2] * 0.7];
            blend(
                &mut c,
                nose_shade,
                ellipse(u, v, cx, cy + p.nose_len * 0.5, p.nose_w, p.nose_len * 0.5, edge),
            );
            blend(
                &mut c,
                p.mouth_color,
                ellipse(u, v, cx, cy + p.mouth_y, p.mouth_w, p.mouth_h, edge),
            );
            if let Some((mx, my)) = p.mole {
                blend(&mut c, [0.15, 0.08, 0.05], ellipse(u, v, cx + mx, cy + my, 0.045, 0.045, edge));
            }
            for k in 0..3 {
                data[k * hw + y * size + x] = c[k];
            }
        }
    }
    img
}

/// Generate `n_ids × per_id` synthetic faces. The first half of a seeded
/// identity ordering belongs to the defender (the first three quarters of
/// each identity's images for training, the rest for testing); the second
/// half belongs to the attacker.
pub fn generate_toy_dataset(n_ids: usize, per_id: usize, size: usize, seed: u64) -> Result<ToyDataset> {
    if n_ids < 2 || per_id < 2 || size < 16 {
        return Err(Error::invalid(format!(
            "need at least 2 identities, 2 images each and size >= 16 (got {n_ids}, {per_id}, {size})"
        )));
    }
    let mut root = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..n_ids).collect();
    let mut shuffler = root.fork(0x1D5);
    for i in (1..n_ids).rev() {
        order.swap(i, shuffler.below(i as u64 + 1) as usize);
    }
    let defender_ids = n_ids.div_ceil(2);
    let mut split_of = vec![Split::Attacker; n_ids];
    for &id in &order[..defender_ids] {
        split_of[id] = Split::DefenderTrain;
    }
    let train_count = (per_id * 3).div_ceil(4).min(per_id - 1);
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let mut samples = Vec::with_capacity(n_ids * per_id);
    for id in 0..n_ids {
        let mut id_rng = root.fork(1000 + id as u64);
        let params = FaceParams::sample(&mut id_rng);
        for k in 0..per_id {
            let mut rng = id_rng.fork(k as u64);
            let jitter = 2.0 * 2.0 / size as f32;
            let shift = (uniform(&mut rng, -jitter, jitter), uniform(&mut rng, -jitter, jitter));
            let brightness = uniform(&mut rng, -0.1, 0.1);
            let mut img = render(&params, size, shift);
            for v in img.data_mut() {
                *v += brightness + noise.sample(&mut rng);
            }
            if rng.unit() < 0.5 {
                img = img.flipped_horizontal();
            }
            let split = match split_of[id] {
                Split::Attacker => Split::Attacker,
                _ if k < train_count => Split::DefenderTrain,
                _ => Split::DefenderTest,
            };
            samples.push(Sample {
                image: img.clamped(),
                label: id,
                split,
            });
        }
    }
    Ok(ToyDataset {
        identities: n_ids,
        images_per_identity: per_id,
        size,
        samples,
    })
}

/// Load an 8-bit PNG or binary PPM as an image in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<SpatialImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for k in 0..3 {
            data[k * hw + i] = px[k] as f32 / 255.0;
        }
    }
    SpatialImage::new(h, w, data)
}

/// Clamp to `[0, 1]`, quantise to 8 bits and save as PNG or PPM (by extension).
pub fn save_image(image: &SpatialImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (_, h, w) = image.shape();
    let hw = h * w;
    let src = image.data();
    let mut buf = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for k in 0..3 {
            buf.push((src[k * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("png") => image::ImageFormat::Png,
        Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
        _ => return Err(Error::io(path, "unsupported image extension (use .png or .ppm)")),
    };
    rgb.save_with_format(path, format).map_err(|e| Error::io(path, e))
}

pub const MANIFEST: &str = "manifest.tsv";

/// Write every sample as `id_XXXX/img_XXXX.png` under `dir` plus a manifest
/// with one `path<TAB>label<TAB>split` line per sample.
pub fn save_dataset(ds: &ToyDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = String::new();
    let mut counters = vec![0usize; ds.identities];
    for s in &ds.samples {
        let rel = format!("id_{:04}/img_{:04}.png", s.label, counters[s.label]);
        counters[s.label] += 1;
        let full = dir.join(&rel);
        let parent = full.parent().expect("joined path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        save_image(&s.image, &full)?;
        manifest.push_str(&format!("{rel}\t{}\t{}\n", s.label, s.split));
    }
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Read a dataset written by [`save_dataset`] (images are 8-bit quantised).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<ToyDataset> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |why: &str| Error::io(&mpath, format!("line {}: {why}", n + 1));
        let mut cols = line.split('\t');
        let (Some(p), Some(l), Some(s), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(bad("expected path, label and split"));
        };
        let label: usize = l.parse().map_err(|_| bad("bad label"))?;
        let split: Split = s.parse().map_err(|_| bad("bad split"))?;
        samples.push(Sample {
            image: load_image(dir.join(p))?,
            label,
            split,
        });
    }
    let first = samples.first().ok_or_else(|| Error::io(&mpath, "manifest lists no samples"))?;
    let size = first.image.height();
    let identities = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Ok(ToyDataset {
        identities,
        images_per_identity: samples.len() / identities,
        size,
        samples,
    })
}

/// Verification pair of sample indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Balanced same/different pairs over `labels`, drawn without replacement
/// while enough distinct pairs exist.
pub fn make_pairs(labels: &[usize], n_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(
            "need at least two identities and one identity with two samples",
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut draw = |pool: &mut Vec<(usize, usize)>, count: usize, same: bool| -> Vec<Pair> {
        for i in (1..pool.len()).rev() {
            pool.swap(i, rng.below(i as u64 + 1) as usize);
        }
        (0..count)
            .map(|k| {
                let (a, b) = pool[k % pool.len()];
                Pair { a, b, same }
            })
            .collect()
    };
    let n_pos = n_pairs - n_pairs / 2;
    let mut pairs = draw(&mut pos, n_pos, true);
    pairs.extend(draw(&mut neg, n_pairs / 2, false));
    Ok(pairs)
}
