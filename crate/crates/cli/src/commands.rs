use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use minusface::attack;
use minusface::codec::format::{TensorFile, FLAG_UNPERTURBED};
use minusface::data::{self, LabeledSet, Split, ToyDataset};
use minusface::metrics;
use minusface::nn::{Checkpoint, MarginConfig, Model};
use minusface::pipeline::{self, Perturbation, ProtectorConfig};
use minusface::train::{self, AttackConfig, Protection, SeedMode, TrainConfig};
use minusface::{MappingKind, MappingSpec, Planes, ShuffleSeed, SpatialImage};

use crate::settings::Settings;
use crate::{
    Ablate, AblationKind, AttackEval, AttackOpts, Command, Enroll, Failure, FixedSeedAttack,
    GenData, Protect, ProtectOpts, Report, TrainAttack, TrainOpts, TrainStage1, TrainStage2, Verify,
};

type Outcome = Result<(), Failure>;

pub fn run(cmd: Command, s: &Settings) -> Outcome {
    match cmd {
        Command::GenData(a) => gen_data(a, s),
        Command::TrainStage1(a) => train_stage1(a, s),
        Command::TrainStage2(a) => train_stage2(a, s),
        Command::Protect(a) => protect(a, s),
        Command::Enroll(a) => enroll(a, s),
        Command::Verify(a) => verify(a, s),
        Command::TrainAttack(a) => train_attack(a, s),
        Command::AttackEval(a) => attack_eval(a, s),
        Command::FixedSeedAttack(a) => fixed_seed_attack(a, s),
        Command::Ablate(a) => ablate(a, s),
        Command::CheckInvariants(a) => crate::invariants::run(a, s),
        Command::Report(a) => report(a, s),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|e| usage(format!("bad {what} '{t}': {e}"))))
        .collect()
}

fn train_config(o: &TrainOpts, s: &Settings) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let drops = match s.pick(o.lr_drops.clone(), "lr_drops", String::new())? {
        t if t.is_empty() => d.lr_drop_epochs.clone(),
        t => parse_list(&t, "lr drop epoch")?,
    };
    let mut cfg = TrainConfig {
        epochs: s.pick(o.epochs, "epochs", d.epochs)?,
        batch_size: s.pick(o.batch_size, "batch_size", d.batch_size)?,
        lr_initial: s.pick(o.lr, "lr", d.lr_initial)?,
        lr_drop_epochs: drops,
        ..d.clone()
    };
    cfg.seeds.init = s.pick(o.init_seed, "init_seed", d.seeds.init)?;
    cfg.seeds.data = s.pick(o.data_seed, "data_seed", d.seeds.data)?;
    cfg.seeds.shuffle = s.pick(o.shuffle_seed, "shuffle_seed", d.seeds.shuffle)?;
    // Short runs keep only the drops that still fall inside the budget.
    cfg.lr_drop_epochs.retain(|&e| e < cfg.epochs);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn protector_config(o: &ProtectOpts, s: &Settings) -> Result<ProtectorConfig, Failure> {
    let d = ProtectorConfig::default();
    let kind: MappingKind = s
        .pick(o.mapping.clone(), "mapping", d.mapping.kind.to_string())?
        .parse()
        .map_err(|e: minusface::Error| usage(e.to_string()))?;
    let perturbation: Perturbation = s
        .pick(o.perturbation.clone(), "perturbation", d.perturbation.to_string())?
        .parse()
        .map_err(|e: minusface::Error| usage(e.to_string()))?;
    let margin = MarginConfig {
        scale: s.pick(o.margin_scale, "margin_scale", d.margin.scale)?,
        margin: s.pick(o.margin, "margin", d.margin.margin)?,
        ..d.margin
    };
    let cfg = ProtectorConfig {
        mapping: MappingSpec { kind },
        perturbation,
        margin,
        ..d
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_data(flag: &Option<PathBuf>, s: &Settings) -> Result<ToyDataset, Failure> {
    let dir: PathBuf = s.require(flag.clone(), "data")?;
    data::load_dataset(&dir)
        .with_context(|| format!("loading dataset from {}", dir.display()))
        .map_err(Failure::from)
}

fn load_generator(flag: &Option<PathBuf>, s: &Settings) -> Result<Model, Failure> {
    let path: PathBuf = s.require(flag.clone(), "gen")?;
    let mut g = Checkpoint::load(&path)
        .and_then(|c| c.model())
        .with_context(|| format!("loading generator {}", path.display()))?;
    g.freeze();
    Ok(g)
}

fn load_model(flag: &Option<PathBuf>, key: &str, s: &Settings) -> Result<Model, Failure> {
    let path: PathBuf = s.require(flag.clone(), key)?;
    let mut m = Checkpoint::load(&path)
        .and_then(|c| c.model())
        .with_context(|| format!("loading model {}", path.display()))?;
    m.freeze();
    Ok(m)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn out_dir(flag: &Option<PathBuf>, s: &Settings) -> Result<PathBuf, Failure> {
    let dir: PathBuf = s.require(flag.clone(), "out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Seed the defender uses for test image `i` in evaluation runs.
fn eval_seed(seed: u64, i: usize) -> ShuffleSeed {
    train::augment_seed(seed, i, 0)
}

fn protected_inputs(set: &LabeledSet, g: &Model, pcfg: &ProtectorConfig, seed: u64) -> Result<Vec<Planes>, Failure> {
    let seeds: Vec<ShuffleSeed> = (0..set.len()).map(|i| eval_seed(seed, i)).collect();
    Ok(pipeline::protect_batch(&set.refs(), g, &seeds, pcfg)?
        .into_iter()
        .map(|p| p.image.into_planes())
        .collect())
}

fn verification(model: &Model, inputs: &[Planes], labels: &[usize], n_pairs: usize, seed: u64) -> Result<metrics::Verification, Failure> {
    let pairs = data::make_pairs(labels, n_pairs, seed)?;
    let emb = train::embed(model, inputs)?;
    Ok(metrics::verify_indexed(&emb, &pairs)?)
}

fn gen_data(a: GenData, s: &Settings) -> Outcome {
    let ids = s.pick(a.ids, "ids", 20usize)?;
    let per_id = s.pick(a.per_id, "per_id", 26usize)?;
    let size = s.pick(a.size, "size", 32usize)?;
    let seed = s.pick(a.seed, "seed", 7u64)?;
    let out = out_dir(&a.out, s)?;
    let ds = data::generate_toy_dataset(ids, per_id, size, seed).map_err(|e| usage(e.to_string()))?;
    let manifest = data::save_dataset(&ds, &out)?;
    println!(
        "wrote {} images of {} identities ({}x{}) to {}",
        ds.samples.len(),
        ds.identities,
        size,
        size,
        manifest.display()
    );
    Ok(())
}

fn train_stage1(a: TrainStage1, s: &Settings) -> Outcome {
    let cfg = train_config(&a.train, s)?;
    let mut pcfg = protector_config(&a.protect, s)?;
    pcfg.alpha = s.pick(a.alpha, "alpha", pcfg.alpha)?;
    pcfg.beta = s.pick(a.beta, "beta", pcfg.beta)?;
    pcfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_data(&a.data, s)?;
    let out = out_dir(&a.out, s)?;
    let train_set = ds.split(Split::DefenderTrain);
    let result = train::train_stage1(&train_set, &cfg, &pcfg)?;
    let log = train::format_logs(&result.logs);
    print!("{log}");
    write_file(&out.join("stage1.log"), &log)?;
    Checkpoint::from_model(&result.generator).save(out.join("g.mfck"))?;
    Checkpoint::from_model(&result.recognizer)
        .with_head(&result.head)
        .save(out.join("f.mfck"))?;

    let test = ds.split(Split::DefenderTest);
    let (mut rp, mut x) = (0.0, 0.0);
    for img in &test.images {
        let rg = pipeline::regenerate(img, &result.generator, &pcfg.mapping)?;
        rp += img.sub(&rg.image_prime)?.mean_abs();
        x += img.mean_abs();
    }
    let n = test.len().max(1) as f64;
    let report = format!(
        "mapping={}\nheld_out_images={}\nmean_l1_residue={:.6}\nmean_l1_image={:.6}\nfinal_train_accuracy={:.4}\n",
        pcfg.mapping.kind,
        test.len(),
        rp / n,
        x / n,
        result.logs.last().map_or(0.0, |l| l.accuracy)
    );
    print!("{report}");
    write_file(&out.join("stage1_report.txt"), &report)?;
    Ok(())
}

fn train_stage2(a: TrainStage2, s: &Settings) -> Outcome {
    let mut cfg = train_config(&a.train, s)?;
    cfg.augment_copies = s.pick(a.copies, "copies", cfg.augment_copies)?;
    let pcfg = protector_config(&a.protect, s)?;
    let ds = load_data(&a.data, s)?;
    let g = load_generator(&a.gen, s)?;
    let out = out_dir(&a.out, s)?;
    let result = train::train_stage2(&ds.split(Split::DefenderTrain), &g, &cfg, &pcfg)?;
    let log = train::format_logs(&result.logs);
    print!("{log}");
    write_file(&out.join("stage2.log"), &log)?;
    Checkpoint::from_model(&result.recognizer)
        .with_head(&result.head)
        .save(out.join("fp.mfck"))?;
    let test = ds.split(Split::DefenderTest);
    let inputs = protected_inputs(&test, &g, &pcfg, cfg.seeds.shuffle ^ 0x7E57)?;
    let v = verification(&result.recognizer, &inputs, &test.labels, 400, 5)?;
    let report = format!(
        "perturbation={}\nverification_accuracy={:.4}\nthreshold={:.4}\n",
        pcfg.perturbation, v.accuracy, v.threshold
    );
    print!("{report}");
    write_file(&out.join("stage2_report.txt"), &report)?;
    Ok(())
}

fn protect(a: Protect, s: &Settings) -> Outcome {
    let pcfg = protector_config(&a.protect, s)?;
    let image_path: PathBuf = s.require(a.image.clone(), "image")?;
    let seed: ShuffleSeed = s
        .require::<String>(a.seed.clone(), "seed")?
        .parse()
        .map_err(|e: minusface::Error| usage(e.to_string()))?;
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let g = load_generator(&a.gen, s)?;
    let image = data::load_image(&image_path)?;
    let p = pipeline::protect(&image, &g, seed, &pcfg)?;
    let flags = if p.perturbed { 0 } else { FLAG_UNPERTURBED };
    let file = TensorFile::spatial(&p.image, flags);
    file.save(&out)?;
    if let Some(preview) = &a.preview {
        data::save_image(&p.image.clamped(), preview)?;
    }
    println!("wrote {} ({} bytes)", out.display(), file.encoded_len());
    Ok(())
}

fn read_protective(path: &Path) -> Result<SpatialImage, Failure> {
    let is_mfrp = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mfrp"));
    let img = if is_mfrp {
        TensorFile::load(path)?.into_spatial()?
    } else {
        data::load_image(path)?
    };
    Ok(img)
}

fn enroll(a: Enroll, s: &Settings) -> Outcome {
    let model = load_model(&a.model, "model", s)?;
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let inputs = a
        .inputs
        .iter()
        .map(|p| read_protective(p).map(SpatialImage::into_planes))
        .collect::<Result<Vec<_>, _>>()?;
    let emb = train::embed(&model, &inputs)?;
    let mut text = String::new();
    for (p, e) in a.inputs.iter().zip(&emb) {
        let values: Vec<String> = e.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(text, "{}\t{}", p.display(), values.join(","));
    }
    write_file(&out, &text)?;
    println!("enrolled {} templates into {}", emb.len(), out.display());
    Ok(())
}

fn verify(a: Verify, s: &Settings) -> Outcome {
    let model = load_model(&a.model, "model", s)?;
    if let (Some(pa), Some(pb)) = (&a.a, &a.b) {
        let threshold = s.pick(a.threshold, "threshold", 0.5)?;
        let imgs = [read_protective(pa)?.into_planes(), read_protective(pb)?.into_planes()];
        let emb = train::embed(&model, &imgs)?;
        let score = metrics::cosine_similarity(&emb[0], &emb[1]);
        let same = score > threshold;
        println!("score={score:.6}\nthreshold={threshold}\nsame={same}");
        return Ok(());
    }
    let pcfg = protector_config(&a.protect, s)?;
    let ds = load_data(&a.data, s)?;
    let g = load_generator(&a.gen, s)?;
    let n_pairs = s.pick(a.pairs, "pairs", 400usize)?;
    let seed = s.pick(a.seed, "seed", 5u64)?;
    let test = ds.split(Split::DefenderTest);
    let inputs = protected_inputs(&test, &g, &pcfg, seed)?;
    let v = verification(&model, &inputs, &test.labels, n_pairs, seed)?;
    println!("pairs={n_pairs}\nverification_accuracy={:.4}\nthreshold={:.4}", v.accuracy, v.threshold);
    Ok(())
}

fn protection(o: &AttackOpts, s: &Settings) -> Result<Protection, Failure> {
    let cfg = protector_config(&o.protect, s)?;
    match s.pick(o.protection.clone(), "protection", "minusface".to_string())?.as_str() {
        "minusface" => Ok(Protection::MinusFace {
            generator: load_generator(&o.gen, s)?,
            cfg,
        }),
        "identity" => Ok(Protection::Identity),
        "no-subtraction" => Ok(Protection::NoSubtraction { cfg }),
        other => Err(usage(format!(
            "unknown protection '{other}' (expected minusface, identity or no-subtraction)"
        ))),
    }
}

fn parse_mode(text: &str) -> Result<SeedMode, Failure> {
    match text.split_once(':') {
        None if text == "random" => Ok(SeedMode::Random),
        Some(("fixed", seed)) => Ok(SeedMode::Fixed(
            seed.parse().map_err(|e: minusface::Error| usage(e.to_string()))?,
        )),
        _ => Err(usage(format!("bad mode '{text}' (expected random or fixed:<seed>)"))),
    }
}

fn train_attack(a: TrainAttack, s: &Settings) -> Outcome {
    let d = AttackConfig::default();
    let cfg = AttackConfig {
        epochs: s.pick(a.epochs, "epochs", d.epochs)?,
        patience: s.pick(a.patience, "patience", d.patience)?,
        batch_size: s.pick(a.batch_size, "batch_size", d.batch_size)?,
        lr: s.pick(a.lr, "lr", d.lr)?,
        seed_mode: parse_mode(&s.pick(a.mode.clone(), "mode", "random".to_string())?)?,
        init_seed: s.pick(a.init_seed, "init_seed", d.init_seed)?,
        data_seed: s.pick(a.data_seed, "data_seed", d.data_seed)?,
        ..d
    };
    let prot = protection(&a.attack, s)?;
    let ds = load_data(&a.data, s)?;
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let attacker = ds.split(Split::Attacker);
    let result = train::train_recovery(&attacker.images, &prot, &cfg)?;
    let mut log = String::new();
    for (epoch, loss) in &result.logs {
        let _ = writeln!(log, "epoch={epoch} l_rec={loss:.6}");
    }
    print!("{log}");
    Checkpoint::from_model(&result.model).save(&out)?;
    write_file(&out.with_extension("log"), &log)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn write_reports(text: &str, csv: &str, report: &Option<PathBuf>, csv_path: &Option<PathBuf>) -> Outcome {
    print!("{text}");
    if let Some(p) = report {
        write_file(p, text)?;
    }
    if let Some(p) = csv_path {
        write_file(p, csv)?;
    }
    Ok(())
}

fn attack_eval(a: AttackEval, s: &Settings) -> Outcome {
    let split: Split = s
        .pick(a.split.clone(), "split", Split::DefenderTest.to_string())?
        .parse()
        .map_err(|e: minusface::Error| usage(e.to_string()))?;
    let seed = s.pick(a.seed, "seed", 99u64)?;
    let prot = protection(&a.attack, s)?;
    let model = load_model(&a.model, "model", s)?;
    let ds = load_data(&a.data, s)?;
    let images = ds.split(split).images;
    let prepared = prot.prepare(&images)?;
    let result = attack::attack_eval(&model, &prepared, SeedMode::Random, seed)?;
    let floor = attack::constant_mean_floor(&images)?;
    let text = format!(
        "{}{}ssim_above_floor={:.6}\n",
        result.key_values("recovered."),
        floor.key_values("floor."),
        result.ssim_mean - floor.ssim_mean
    );
    write_reports(&text, &result.csv(), &a.report, &a.csv)
}

fn fixed_seed_attack(a: FixedSeedAttack, s: &Settings) -> Outcome {
    let parse_seed = |t: String| t.parse::<ShuffleSeed>().map_err(|e| usage(e.to_string()));
    let theta = parse_seed(s.require(a.theta.clone(), "theta")?)?;
    let primes: Vec<ShuffleSeed> = parse_list(&s.pick(a.theta_prime.clone(), "theta_prime", "1,2,3,4,5".into())?, "seed")?;
    let cfg = protector_config(&a.protect, s)?;
    let prot = Protection::MinusFace {
        generator: load_generator(&a.gen, s)?,
        cfg,
    };
    let model = load_model(&a.model, "model", s)?;
    let ds = load_data(&a.data, s)?;
    let images = ds.split(Split::DefenderTest).images;
    let result = attack::fixed_seed_experiment(&model, &prot, &images, theta, &primes).map_err(|e| match e {
        minusface::Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    let floor = attack::constant_mean_floor(&images)?;
    let text = format!("{}{}", result.key_values(), floor.key_values("floor."));
    write_reports(&text, &result.csv(), &a.report, &a.csv)
}

fn ablate(a: Ablate, s: &Settings) -> Outcome {
    let cfg = train_config(&a.train, s)?;
    let ds = load_data(&a.data, s)?;
    let out = out_dir(&a.out, s)?;
    let pcfg = ProtectorConfig::default();
    let train_set = ds.split(Split::DefenderTrain);
    let test = ds.split(Split::DefenderTest);
    let mut text = format!("ablation={:?}\n", a.kind).to_lowercase();
    match a.kind {
        AblationKind::R | AblationKind::RPrime => {
            let g = load_generator(&a.gen, s)?;
            let view = |set: &LabeledSet| -> Result<Vec<Planes>, Failure> {
                let regen = pipeline::regenerate_batch(&set.refs(), &g, &pcfg.mapping)?;
                regen
                    .iter()
                    .map(|rg| match a.kind {
                        AblationKind::R => Ok(rg.residue().into_planes()),
                        _ => Ok(minusface::decode(&rg.residue(), &pcfg.mapping)?.into_planes()),
                    })
                    .collect()
            };
            let trained = train::train_recognizer(&view(&train_set)?, &train_set.labels, &cfg, pcfg.margin)?;
            let v = verification(&trained.recognizer, &view(&test)?, &test.labels, 400, 5)?;
            let _ = writeln!(text, "verification_accuracy={:.4}", v.accuracy);
            write_file(&out.join("ablate.log"), &train::format_logs(&trained.logs))?;
        }
        AblationKind::Mask => {
            let g = load_generator(&a.gen, s)?;
            let ratio = s.pick(a.mask_ratio, "mask_ratio", 0.25)?;
            for p in [Perturbation::Shuffle, Perturbation::Mask(ratio)] {
                let pc = ProtectorConfig { perturbation: p, ..pcfg };
                let trained = train::train_stage2(&train_set, &g, &cfg, &pc)?;
                let inputs = protected_inputs(&test, &g, &pc, 99)?;
                let v = verification(&trained.recognizer, &inputs, &test.labels, 400, 5)?;
                let _ = writeln!(text, "{p}.verification_accuracy={:.4}", v.accuracy);
            }
        }
        AblationKind::NoSubtraction => {
            let g = load_generator(&a.gen, s)?;
            let attacker = ds.split(Split::Attacker);
            let acfg = AttackConfig::default();
            for (name, prot) in [
                ("minusface", Protection::MinusFace { generator: g, cfg: pcfg }),
                ("no-subtraction", Protection::NoSubtraction { cfg: pcfg }),
            ] {
                let trained = train::train_recovery(&attacker.images, &prot, &acfg)?;
                let r = attack::attack_eval(&trained.model, &prot.prepare(&test.images)?, SeedMode::Random, 99)?;
                text += &r.key_values(&format!("{name}."));
            }
            text += &attack::constant_mean_floor(&test.images)?.key_values("floor.");
        }
        AblationKind::Dwt => {
            let pc = ProtectorConfig {
                mapping: MappingSpec::haar2(),
                ..pcfg
            };
            let s1 = train::train_stage1(&train_set, &cfg, &pc)?;
            let mut g = s1.generator;
            g.freeze();
            Checkpoint::from_model(&g).save(out.join("g_haar2.mfck"))?;
            let trained = train::train_stage2(&train_set, &g, &cfg, &pc)?;
            let inputs = protected_inputs(&test, &g, &pc, 99)?;
            let v = verification(&trained.recognizer, &inputs, &test.labels, 400, 5)?;
            let _ = writeln!(text, "verification_accuracy={:.4}", v.accuracy);
        }
    }
    print!("{text}");
    write_file(&out.join("ablate_report.txt"), &text)?;
    Ok(())
}

/// Epoch logs and key-value reports found in a directory, one section each.
pub fn summarize(dir: &Path) -> anyhow::Result<String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut out = String::new();
    for path in entries {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("log") | Some("txt") => fs::read_to_string(&path)?,
            _ => continue,
        };
        if name.ends_with(".log") {
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            if let (Some(first), Some(last)) = (lines.first(), lines.last()) {
                let _ = writeln!(out, "[{name}] {} epochs", lines.len());
                let _ = writeln!(out, "  first: {first}");
                let _ = writeln!(out, "  last:  {last}");
            }
        } else {
            let _ = writeln!(out, "[{name}]");
            for line in text.lines().filter(|l| l.contains('=')) {
                let (k, v) = line.split_once('=').expect("filtered");
                let _ = writeln!(out, "  {k:<32} {v}");
            }
        }
    }
    if out.is_empty() {
        bail!("no .log or .txt files in {}", dir.display());
    }
    Ok(out)
}

fn report(a: Report, s: &Settings) -> Outcome {
    let dir: PathBuf = s.require(a.dir.clone(), "dir")?;
    let text = summarize(&dir)?;
    print!("{text}");
    if let Some(p) = &a.out {
        write_file(p, &text)?;
    }
    Ok(())
}
