//! End-to-end acceptance run on the synthetic face set.
//!
//! Prints one `PASS`/`FAIL` line per criterion (with the measured values and
//! the bound they were held to) and exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use minusface::attack::{attack_eval, constant_mean_floor, fixed_seed_experiment};
use minusface::codec::format::{TensorFile, HEADER_LEN};
use minusface::data::{generate_toy_dataset, make_pairs, LabeledSet, Pair, Split};
use minusface::metrics::{pair_scores, verify_indexed};
use minusface::nn::{build_generator, check_gradients, Graph, MarginConfig, Model, Tensor};
use minusface::perturb::SplitMix64;
use minusface::pipeline::{protect, regenerate, Perturbation, ProtectorConfig};
use minusface::train::{
    embed, train_recognizer, train_recovery, train_stage1, train_stage2, AttackConfig, Protection, SeedMode,
    TrainConfig,
};
use minusface::{decode, encode, HighDimRep, MappingSpec, Planes, ShuffleSeed, SpatialImage};

const SIZE: usize = 32;
const PAIRS: usize = 400;
const SEED_SETS: u64 = 5;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
    took: Duration,
}

struct Run {
    lines: Vec<Line>,
}

impl Run {
    fn record(&mut self, id: &'static str, pass: bool, detail: String, took: Duration) {
        println!(
            "[{}] criterion {id:<3} {detail}  ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        self.lines.push(Line { id, pass, detail, took });
    }
}

fn random_image(rng: &mut SplitMix64) -> SpatialImage {
    SpatialImage::new(SIZE, SIZE, (0..3 * SIZE * SIZE).map(|_| rng.unit() as f32).collect()).unwrap()
}

fn random_rep(rng: &mut SplitMix64, channels: usize) -> HighDimRep {
    HighDimRep::new(
        channels,
        SIZE,
        SIZE,
        (0..channels * SIZE * SIZE).map(|_| (rng.unit() * 2.0 - 1.0) as f32).collect(),
    )
    .unwrap()
}

/// Orthonormal 8×8 DCT-II of one block, straight from the cosine sum.
fn naive_dct8(block: &[f64; 64]) -> [f64; 64] {
    let a = |u: usize| if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    s += block[i * 8 + j]
                        * ((2 * i + 1) as f64 * u as f64 * PI / 16.0).cos()
                        * ((2 * j + 1) as f64 * v as f64 * PI / 16.0).cos();
                }
            }
            out[u * 8 + v] = a(u) * a(v) * s;
        }
    }
    out
}

/// Encode by replicate-upsampling ×8 and applying `naive_dct8` per block.
fn oracle_encode_dct8(x: &SpatialImage) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let mut out = vec![0.0; 192 * h * w];
    for k in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let block = [x.at(k, i, j) as f64; 64];
                let coeffs = naive_dct8(&block);
                for (uv, c) in coeffs.iter().enumerate() {
                    out[((k * 64 + uv) * h + i) * w + j] = *c;
                }
            }
        }
    }
    out
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max)
}

fn criterion_1(run: &mut Run) {
    let t = Instant::now();
    let mut rng = SplitMix64::new(101);
    let mut roundtrip = [0.0f64; 2];
    let mut parseval = [0.0f64; 2];
    let specs = [MappingSpec::dct8(), MappingSpec::haar2()];
    for _ in 0..100 {
        let x = random_image(&mut rng);
        for (s, spec) in specs.iter().enumerate() {
            let e = encode(&x, spec);
            roundtrip[s] = roundtrip[s].max(max_abs(decode(&e, spec).unwrap().data(), x.data()));
            // replicate ×n then an orthonormal transform multiplies energy by n²
            let n = spec.upsample_factor() as f64;
            let ex: f64 = e.data().iter().map(|v| (*v as f64).powi(2)).sum();
            let xx: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum();
            parseval[s] = parseval[s].max((ex - n * n * xx).abs() / (n * n * xx));
        }
    }
    let mut oracle = 0.0f64;
    for _ in 0..5 {
        let x = random_image(&mut rng);
        let e = encode(&x, &specs[0]);
        let o = oracle_encode_dct8(&x);
        oracle = oracle.max(e.data().iter().zip(&o).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max));
    }
    let pass = roundtrip.iter().all(|&r| r <= 1e-5) && parseval.iter().all(|&p| p <= 1e-5) && oracle <= 1e-4;
    run.record(
        "1",
        pass,
        format!(
            "roundtrip max|d(e(X))-X| dct8={:.2e} haar2={:.2e} (<=1e-5); energy rel.err {:.1e}/{:.1e}; naive-DCT oracle {:.1e} (<=1e-4)",
            roundtrip[0], roundtrip[1], parseval[0], parseval[1], oracle
        ),
        t.elapsed(),
    );
}

fn criterion_2(run: &mut Run) -> [f64; 2] {
    let t = Instant::now();
    let mut rng = SplitMix64::new(202);
    let mut worst = [0.0f64; 2];
    let mut pointwise = 0.0f64;
    for (s, spec) in [MappingSpec::dct8(), MappingSpec::haar2()].iter().enumerate() {
        let c = spec.channels();
        let g = build_generator(c, 8, 7 + s as u64).unwrap();
        for trial in 0..100 {
            let x = random_image(&mut rng);
            let xe = encode(&x, spec);
            // half the instances take x' from an untrained generator, half are arbitrary tensors
            let x_prime = if trial % 2 == 0 {
                regenerate(&x, &g, spec).unwrap().x_prime
            } else {
                random_rep(&mut rng, c)
            };
            let lhs = x.sub(&decode(&x_prime, spec).unwrap()).unwrap();
            let r = xe.sub(&x_prime).unwrap();
            let rhs = decode(&r, spec).unwrap();
            worst[s] = worst[s].max((lhs.mean_abs() - rhs.mean_abs()).abs());
            pointwise = pointwise.max(max_abs(lhs.data(), rhs.data()));
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-5);
    run.record(
        "2",
        pass,
        format!(
            "| |X-X'|_1 - |d(r)|_1 | dct8={:.2e} haar2={:.2e} (<=1e-5, per-element mean); pointwise {:.2e}",
            worst[0], worst[1], pointwise
        ),
        t.elapsed(),
    );
    worst
}

fn tensor(rng: &mut SplitMix64, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let v = rng.unit() * 2.0 - 1.0;
                if away_from_zero {
                    (v.signum() * (0.1 + 0.9 * v.abs())) as f32
                } else {
                    v as f32
                }
            })
            .collect(),
    )
    .unwrap()
}

type Case = (&'static str, Box<dyn Fn(&mut Graph, &[minusface::nn::Var]) -> minusface::Result<minusface::nn::Var>>, Vec<Tensor>);

fn criterion_3(run: &mut Run) {
    let t = Instant::now();
    let mut rng = SplitMix64::new(303);
    let margin = MarginConfig::default();
    let cases: Vec<Case> = vec![
        (
            "conv3x3/s1",
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1)),
            vec![tensor(&mut rng, &[2, 3, 6, 6], false), tensor(&mut rng, &[4, 3, 3, 3], false), tensor(&mut rng, &[4], false)],
        ),
        (
            "conv3x3/s2",
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2)),
            vec![tensor(&mut rng, &[2, 2, 8, 8], false), tensor(&mut rng, &[3, 2, 3, 3], false), tensor(&mut rng, &[3], false)],
        ),
        ("relu", Box::new(|g, v| Ok(g.relu(v[0]))), vec![tensor(&mut rng, &[2, 3, 4, 4], true)]),
        (
            "add",
            Box::new(|g, v| g.add(v[0], v[1])),
            vec![tensor(&mut rng, &[2, 3, 4, 4], false), tensor(&mut rng, &[2, 3, 4, 4], false)],
        ),
        (
            "sub",
            Box::new(|g, v| g.sub(v[0], v[1])),
            vec![tensor(&mut rng, &[2, 3, 4, 4], false), tensor(&mut rng, &[2, 3, 4, 4], false)],
        ),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], -2.5))), vec![tensor(&mut rng, &[2, 5], false)]),
        ("upsample2x", Box::new(|g, v| g.upsample2x(v[0])), vec![tensor(&mut rng, &[2, 3, 3, 3], false)]),
        ("avgpool2", Box::new(|g, v| g.avgpool2(v[0])), vec![tensor(&mut rng, &[2, 3, 4, 4], false)]),
        ("global_avgpool", Box::new(|g, v| g.global_avgpool(v[0])), vec![tensor(&mut rng, &[2, 3, 4, 4], false)]),
        (
            "linear",
            Box::new(|g, v| g.linear(v[0], v[1], v[2])),
            vec![tensor(&mut rng, &[3, 5], false), tensor(&mut rng, &[4, 5], false), tensor(&mut rng, &[4], false)],
        ),
        (
            "decode/dct8",
            Box::new(|g, v| g.decode(v[0], MappingSpec::dct8())),
            vec![tensor(&mut rng, &[1, 192, 2, 2], false)],
        ),
        (
            "decode/haar2",
            Box::new(|g, v| g.decode(v[0], MappingSpec::haar2())),
            vec![tensor(&mut rng, &[2, 12, 3, 3], false)],
        ),
        ("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![tensor(&mut rng, &[2, 3], false)]),
        (
            "l1 loss",
            Box::new(|g, v| g.l1_loss(v[0], v[1])),
            vec![tensor(&mut rng, &[2, 3, 4, 4], false), tensor(&mut rng, &[2, 3, 4, 4], false)],
        ),
        (
            "margin loss",
            Box::new(move |g, v| g.margin_loss(v[0], v[1], &[0, 2, 1, 2, 0], margin)),
            vec![tensor(&mut rng, &[5, 6], false), tensor(&mut rng, &[3, 6], false)],
        ),
    ];
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    for (name, f, inputs) in &cases {
        let checks = check_gradients(|g, v| f(g, v), inputs, 1e-3, 17).unwrap();
        for c in checks {
            let e = c.relative_error();
            if e > worst.0 {
                worst = (e, name);
            }
            if e > 1e-2 {
                failed.push(format!("{name}#{}={e:.2e}", c.input));
            }
        }
    }
    run.record(
        "3",
        failed.is_empty(),
        format!(
            "{} ops checked, worst rel.err {:.2e} ({}) (<=1e-2, eps 1e-3){}",
            cases.len(),
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
        t.elapsed(),
    );
}

fn planes(images: &[SpatialImage]) -> Vec<Planes> {
    images.iter().map(|i| (**i).clone()).collect()
}

fn residue_image(x: &SpatialImage, g: &Model, spec: &MappingSpec) -> SpatialImage {
    x.sub(&regenerate(x, g, spec).unwrap().image_prime).unwrap()
}

/// Verification accuracy per seed set and the fraction of pairs whose
/// decision is identical across all seed sets.
fn protected_verification(f: &Model, protection: &Protection, test: &LabeledSet, pairs: &[Pair]) -> (Vec<f64>, f64) {
    let prep = protection.prepare(&test.images).unwrap();
    let mut accs = Vec::new();
    let mut decisions: Vec<Vec<bool>> = Vec::new();
    for k in 0..SEED_SETS {
        let mut rng = SplitMix64::new(9000 + k);
        let xs: Vec<Planes> = (0..prep.len())
            .map(|i| prep.protected(i, ShuffleSeed(rng.next())).unwrap().into_planes())
            .collect();
        let emb = embed(f, &xs).unwrap();
        let v = verify_indexed(&emb, pairs).unwrap();
        decisions.push(pair_scores(&emb, pairs).unwrap().iter().map(|s| *s > v.threshold).collect());
        accs.push(v.accuracy);
    }
    let same = (0..pairs.len())
        .filter(|&j| decisions.iter().all(|d| d[j] == decisions[0][j]))
        .count();
    (accs, same as f64 / pairs.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Configuration of recognizers trained on fixed inputs (baseline, R′, stage 2).
fn recognizer_config() -> TrainConfig {
    TrainConfig {
        lr_initial: 1e-2,
        augment_copies: 16,
        ..TrainConfig::default()
    }
}

fn attack_config() -> AttackConfig {
    AttackConfig {
        batch_size: 4,
        ..AttackConfig::default()
    }
}

fn main() {
    let started = Instant::now();
    let mut run = Run { lines: Vec::new() };
    criterion_1(&mut run);
    criterion_2(&mut run);
    criterion_3(&mut run);

    let ds = generate_toy_dataset(20, 26, SIZE, 7).unwrap();
    let train = ds.split(Split::DefenderTrain);
    let test = ds.split(Split::DefenderTest);
    let attacker = ds.split(Split::Attacker);
    let pairs = make_pairs(&test.labels, PAIRS, 5).unwrap();
    println!(
        "dataset: {} train / {} test defender images, {} attacker images, {} pairs",
        train.len(),
        test.len(),
        attacker.len(),
        pairs.len()
    );
    let pcfg = ProtectorConfig::default();
    let spec = pcfg.mapping;

    // 4: blank residue after stage 1
    let t = Instant::now();
    let stage1 = train_stage1(&train, &TrainConfig::default(), &pcfg).unwrap();
    let mut g = stage1.generator.clone();
    g.freeze();
    let (mut r_l1, mut x_l1, mut chain) = (0.0, 0.0, 0.0f64);
    for x in &test.images {
        let reg = regenerate(x, &g, &spec).unwrap();
        let r_prime = x.sub(&reg.image_prime).unwrap();
        chain = chain.max(max_abs(decode(&reg.residue(), &spec).unwrap().data(), r_prime.data()));
        r_l1 += r_prime.mean_abs();
        x_l1 += x.mean_abs();
    }
    let (r_l1, x_l1) = (r_l1 / test.len() as f64, x_l1 / test.len() as f64);
    run.record(
        "4",
        r_l1 <= 0.05 && x_l1 >= 0.3 && x_l1 >= 6.0 * r_l1,
        format!(
            "mean |R'|_1={r_l1:.4} (<=0.05), mean |X|_1={x_l1:.4} (>=0.3), ratio {:.1}x (>=6); d(r)=R' to {chain:.1e}; L_gen {:.4} -> {:.4}",
            x_l1 / r_l1,
            stage1.logs[0].gen_loss,
            stage1.logs.last().unwrap().gen_loss
        ),
        t.elapsed(),
    );

    // 5: recognizable residue r, unrecognizable R'
    let t = Instant::now();
    let r_test: Vec<Planes> = test
        .images
        .iter()
        .map(|x| regenerate(x, &g, &spec).unwrap().residue().into_planes())
        .collect();
    let acc_r = verify_indexed(&embed(&stage1.recognizer, &r_test).unwrap(), &pairs).unwrap().accuracy;
    let rp = |set: &LabeledSet| -> Vec<Planes> {
        set.images.iter().map(|x| residue_image(x, &g, &spec).into_planes()).collect()
    };
    let on_rp = train_recognizer(&rp(&train), &train.labels, &recognizer_config(), pcfg.margin).unwrap();
    let acc_rp = verify_indexed(&embed(&on_rp.recognizer, &rp(&test)).unwrap(), &pairs).unwrap().accuracy;
    run.record(
        "5",
        acc_r >= 0.90 && acc_rp <= 0.60 && acc_r - acc_rp >= 0.30,
        format!(
            "verification on r={:.1}% (>=90), on R'={:.1}% (<=60), gap {:.1} points (>=30)",
            100.0 * acc_r,
            100.0 * acc_rp,
            100.0 * (acc_r - acc_rp)
        ),
        t.elapsed(),
    );

    // 6: protected recognition utility and seed consistency
    let t = Instant::now();
    let base = train_recognizer(&planes(&train.images), &train.labels, &recognizer_config(), pcfg.margin).unwrap();
    let acc_base = verify_indexed(&embed(&base.recognizer, &planes(&test.images)).unwrap(), &pairs)
        .unwrap()
        .accuracy;
    let stage2 = train_stage2(&train, &g, &recognizer_config(), &pcfg).unwrap();
    let minusface = Protection::MinusFace {
        generator: g.clone(),
        cfg: pcfg,
    };
    let (accs, consistency) = protected_verification(&stage2.recognizer, &minusface, &test, &pairs);
    let acc_p = mean(&accs);
    run.record(
        "6",
        acc_base - acc_p <= 0.05 && consistency >= 0.95,
        format!(
            "baseline {:.1}%, protected {:.1}% (per seed set {}) (within 5 points), consistency {:.1}% over {SEED_SETS} seed sets (>=95)",
            100.0 * acc_base,
            100.0 * acc_p,
            accs.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/"),
            100.0 * consistency
        ),
        t.elapsed(),
    );

    // 7: recovery resistance
    let t = Instant::now();
    let floor = constant_mean_floor(&test.images).unwrap().ssim_mean;
    let acfg = attack_config();
    let identity = train_recovery(&attacker.images, &Protection::Identity, &acfg).unwrap();
    let ssim_id = attack_eval(
        &identity.model,
        &Protection::Identity.prepare(&test.images).unwrap(),
        SeedMode::Random,
        5,
    )
    .unwrap();
    let random = train_recovery(&attacker.images, &minusface, &acfg).unwrap();
    let prepared = minusface.prepare(&test.images).unwrap();
    let ssim_mf = attack_eval(&random.model, &prepared, SeedMode::Random, 5).unwrap();
    run.record(
        "7",
        ssim_mf.ssim_mean <= floor + 0.1 && ssim_id.ssim_mean >= 0.95,
        format!(
            "random-seed attacker SSIM {:.3} (<= floor {floor:.3} + 0.1), PSNR {:.2} dB; identity attacker SSIM {:.3} (>=0.95) after {}/{} epochs",
            ssim_mf.ssim_mean,
            ssim_mf.psnr_mean,
            ssim_id.ssim_mean,
            identity.logs.len(),
            random.logs.len()
        ),
        t.elapsed(),
    );

    // 8: fixed-seed attacker
    let t = Instant::now();
    let theta = ShuffleSeed(0xF1CED);
    let fixed_cfg = AttackConfig {
        seed_mode: SeedMode::Fixed(theta),
        ..attack_config()
    };
    let fixed = train_recovery(&attacker.images, &minusface, &fixed_cfg).unwrap();
    let primes: Vec<ShuffleSeed> = (1..=5).map(|k| ShuffleSeed(0xF1CED + k)).collect();
    let rep = fixed_seed_experiment(&fixed.model, &minusface, &test.images, theta, &primes).unwrap();
    run.record(
        "8",
        rep.same.ssim_mean > rep.different_ssim() && rep.different_ssim() <= floor + 0.1,
        format!(
            "same-seed SSIM {:.3} > different-seed SSIM {:.3} (spread {:.3}); different <= floor {floor:.3} + 0.1",
            rep.same.ssim_mean,
            rep.different_ssim(),
            rep.different_spread()
        ),
        t.elapsed(),
    );

    // 9: ablations
    let t = Instant::now();
    let no_sub = Protection::NoSubtraction { cfg: pcfg };
    let ns = train_recovery(&attacker.images, &no_sub, &acfg).unwrap();
    let ssim_ns = attack_eval(&ns.model, &no_sub.prepare(&test.images).unwrap(), SeedMode::Random, 5).unwrap();
    let pass_a = ssim_ns.ssim_mean >= ssim_mf.ssim_mean + 0.3;

    let mask_cfg = ProtectorConfig {
        perturbation: Perturbation::Mask(0.25),
        ..pcfg
    };
    let masked = train_stage2(&train, &g, &recognizer_config(), &mask_cfg).unwrap();
    let (mask_accs, _) = protected_verification(
        &masked.recognizer,
        &Protection::MinusFace {
            generator: g.clone(),
            cfg: mask_cfg,
        },
        &test,
        &pairs,
    );
    let acc_mask = mean(&mask_accs);
    let pass_b = acc_mask < acc_p;

    let haar_cfg = ProtectorConfig {
        mapping: MappingSpec::haar2(),
        ..pcfg
    };
    let haar1 = train_stage1(&train, &TrainConfig::default(), &haar_cfg).unwrap();
    let mut gh = haar1.generator;
    gh.freeze();
    let haar2 = train_stage2(&train, &gh, &recognizer_config(), &haar_cfg).unwrap();
    let (haar_accs, _) = protected_verification(
        &haar2.recognizer,
        &Protection::MinusFace {
            generator: gh.clone(),
            cfg: haar_cfg,
        },
        &test,
        &pairs,
    );
    let acc_haar = mean(&haar_accs);
    let haar_codec = run.lines.iter().filter(|l| l.id == "1" || l.id == "2").all(|l| l.pass);
    let pass_c = haar_codec && acc_haar >= 0.70;
    run.record(
        "9",
        pass_a && pass_b && pass_c,
        format!(
            "(a) {} no-subtraction attacker SSIM {:.3} vs MinusFace {:.3} (needs +0.3); (b) {} mask(0.25) {:.1}% < shuffle {:.1}%; (c) {} haar2 codec checks {}, utility {:.1}% (>=70)",
            if pass_a { "ok" } else { "FAIL" },
            ssim_ns.ssim_mean,
            ssim_mf.ssim_mean,
            if pass_b { "ok" } else { "FAIL" },
            100.0 * acc_mask,
            100.0 * acc_p,
            if pass_c { "ok" } else { "FAIL" },
            if haar_codec { "pass" } else { "fail" },
            100.0 * acc_haar
        ),
        t.elapsed(),
    );

    // 10: representation size
    let t = Instant::now();
    let x = &test.images[0];
    let p = protect(x, &g, ShuffleSeed(5), &pcfg).unwrap();
    let spatial_len = TensorFile::spatial(&p.image, 0).to_bytes().len();
    let residue = regenerate(x, &g, &spec).unwrap().residue();
    let rep_len = TensorFile::rep(&residue, spec.kind).to_bytes().len();
    let expected = 3 * SIZE * SIZE * 4 + 19;
    let payload_ratio = (rep_len - HEADER_LEN) as f64 / (spatial_len - HEADER_LEN) as f64;
    run.record(
        "10",
        spatial_len == expected && rep_len == 192 * SIZE * SIZE * 4 + 19 && payload_ratio == 64.0,
        format!("X_p file {spatial_len} bytes (= 3*{SIZE}*{SIZE}*4+19 = {expected}), residue file {rep_len} bytes, payload ratio {payload_ratio}x"),
        t.elapsed(),
    );

    let failed: Vec<&str> = run.lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    let total: Duration = run.lines.iter().map(|l| l.took).sum();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s (criteria {:.0}s){}",
        run.lines.len() - failed.len(),
        run.lines.len(),
        started.elapsed().as_secs_f64(),
        total.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    for l in &run.lines {
        if !l.pass {
            eprintln!("criterion {} failed: {}", l.id, l.detail);
        }
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
