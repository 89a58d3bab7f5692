use minusface::attack::{attack_eval, evaluate_recovery, recover_batch, reencode_inversion};
use minusface::data::{generate_toy_dataset, load_dataset, save_dataset, LabeledSet, Split};
use minusface::nn::Checkpoint;
use minusface::pipeline::{
    protect, protect_batch, protect_without_subtraction, regenerate, Perturbation, ProtectorConfig,
};
use minusface::train::{
    embed, input_scale, train_recognizer, train_recovery, train_stage1, train_stage2, AttackConfig, Protection,
    SeedMode, TrainConfig,
};
use minusface::{decode, encode, MappingSpec, Planes, ShuffleSeed};

fn small() -> (LabeledSet, LabeledSet, LabeledSet) {
    let ds = generate_toy_dataset(6, 6, 16, 21).unwrap();
    (
        ds.split(Split::DefenderTrain),
        ds.split(Split::DefenderTest),
        ds.split(Split::Attacker),
    )
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 6,
        lr_drop_epochs: vec![4],
        generator_base: 4,
        embedding_dim: 8,
        augment_copies: 2,
        ..TrainConfig::default()
    }
}

fn haar() -> ProtectorConfig {
    ProtectorConfig {
        mapping: MappingSpec::haar2(),
        ..ProtectorConfig::default()
    }
}

#[test]
fn stage1_halves_the_regeneration_loss() {
    let (train, _, _) = small();
    let out = train_stage1(&train, &TrainConfig { epochs: 10, lr_drop_epochs: vec![8], ..quick() }, &haar()).unwrap();
    let first = out.logs[0].gen_loss;
    let last = out.logs.last().unwrap().gen_loss;
    assert!(last < 0.5 * first, "L_gen {first} -> {last}");
    assert!(out.logs.iter().all(|l| l.total_loss.is_finite()));
}

#[test]
fn protection_round_trip_through_checkpoint() {
    let (train, test, _) = small();
    let pcfg = haar();
    let mut g = train_stage1(&train, &quick(), &pcfg).unwrap().generator;
    g.freeze();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.mfck");
    Checkpoint::from_model(&g).save(&path).unwrap();
    let mut g2 = Checkpoint::load(&path).unwrap().model().unwrap();
    g2.freeze();

    let seeds: Vec<ShuffleSeed> = (0..test.len() as u64).map(ShuffleSeed).collect();
    let a = protect_batch(&test.refs(), &g, &seeds, &pcfg).unwrap();
    let b = protect_batch(&test.refs(), &g2, &seeds, &pcfg).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.image, q.image);
        assert!(p.perturbed);
    }
    // single and batched paths agree, and a new seed changes the image
    let one = protect(&test.images[0], &g, seeds[0], &pcfg).unwrap();
    assert_eq!(one.image, a[0].image);
    let other = protect(&test.images[0], &g, ShuffleSeed(12345), &pcfg).unwrap();
    assert_ne!(other.image, one.image);
}

#[test]
fn protective_image_is_the_decoded_shuffled_residue() {
    let (train, test, _) = small();
    let pcfg = haar();
    let mut g = train_stage1(&train, &quick(), &pcfg).unwrap().generator;
    g.freeze();
    let x = &test.images[1];
    let reg = regenerate(x, &g, &pcfg.mapping).unwrap();
    let seed = ShuffleSeed(77);
    let perm = minusface::perturb::permutation_from_seed(seed, 12);
    let expected = decode(
        &minusface::perturb::shuffle_channels(&reg.residue(), &perm).unwrap(),
        &pcfg.mapping,
    )
    .unwrap();
    let got = protect(x, &g, seed, &pcfg).unwrap().image;
    let diff = got.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-6);
    // without subtraction the input to the shuffle is e(X) itself
    let ns = protect_without_subtraction(x, seed, &pcfg.mapping, Perturbation::Shuffle).unwrap();
    let direct = decode(
        &minusface::perturb::shuffle_channels(&encode(x, &pcfg.mapping), &perm).unwrap(),
        &pcfg.mapping,
    )
    .unwrap();
    assert_eq!(ns, direct);
}

#[test]
fn stage2_and_recognizer_scale_their_inputs() {
    let (train, test, _) = small();
    let pcfg = haar();
    let mut g = train_stage1(&train, &quick(), &pcfg).unwrap().generator;
    g.freeze();
    let out = train_stage2(&train, &g, &quick(), &pcfg).unwrap();
    assert_eq!(out.logs.len(), quick().epochs);
    assert!(out.recognizer.input_scale() > 1.0, "protective images are faint");
    let xs: Vec<Planes> = test.images.iter().map(|i| (**i).clone()).collect();
    assert!((input_scale(&xs) - 0.5 / rms(&xs)).abs() < 1e-3);

    // the scale survives a checkpoint
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fp.mfck");
    Checkpoint::from_model(&out.recognizer).with_head(&out.head).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().model().unwrap();
    assert_eq!(back.input_scale(), out.recognizer.input_scale());
    let prep = Protection::MinusFace { generator: g, cfg: pcfg }.prepare(&test.images).unwrap();
    let inputs: Vec<Planes> = (0..prep.len())
        .map(|i| prep.protected(i, ShuffleSeed(i as u64)).unwrap().into_planes())
        .collect();
    assert_eq!(embed(&out.recognizer, &inputs).unwrap(), embed(&back, &inputs).unwrap());
}

fn rms(xs: &[Planes]) -> f32 {
    let n: usize = xs.iter().map(|p| p.len()).sum();
    let s: f64 = xs.iter().flat_map(|p| p.data()).map(|v| (*v as f64).powi(2)).sum();
    (s / n as f64).sqrt() as f32
}

#[test]
fn recognizer_rejects_mismatched_labels() {
    let (train, _, _) = small();
    let xs: Vec<Planes> = train.images.iter().map(|i| (**i).clone()).collect();
    assert!(train_recognizer(&xs, &train.labels[1..], &quick(), ProtectorConfig::default().margin).is_err());
    assert!(train_recognizer(&xs, &vec![0; xs.len()], &quick(), ProtectorConfig::default().margin).is_err());
}

#[test]
fn recovery_pipeline_runs_and_reports() {
    let (_, test, attacker) = small();
    let cfg = AttackConfig {
        epochs: 2,
        batch_size: 8,
        ..AttackConfig::default()
    };
    let out = train_recovery(&attacker.images, &Protection::Identity, &cfg).unwrap();
    assert!(out.model.is_frozen());
    assert!(!out.logs.is_empty() && out.logs.len() <= 2);
    let prep = Protection::Identity.prepare(&test.images).unwrap();
    let report = attack_eval(&out.model, &prep, SeedMode::Random, 3).unwrap();
    assert_eq!(report.count, test.len());
    assert!(report.ssim_mean.is_finite() && report.psnr_mean.is_finite());
    let recovered = recover_batch(&out.model, &test.images).unwrap();
    assert!(recovered.iter().all(|r| r.data().iter().all(|v| (0.0..=1.0).contains(v))));
    let direct = evaluate_recovery(&recovered, &test.images).unwrap();
    assert!((direct.ssim_mean - report.ssim_mean).abs() < 1e-9);
}

#[test]
fn reencoding_a_protective_image_is_a_fixed_point() {
    let (_, test, _) = small();
    let spec = MappingSpec::dct8();
    let x = &test.images[0];
    let r = reencode_inversion(x, &spec);
    let again = reencode_inversion(&decode(&r, &spec).unwrap(), &spec);
    let d = r.data().iter().zip(again.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(d < 1e-5);
}

#[test]
fn dataset_survives_disk() {
    let ds = generate_toy_dataset(4, 4, 16, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.samples.len(), ds.samples.len());
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.split, b.split);
        // PNG stores 8-bit channels
        let d = a.image.data().iter().zip(b.image.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(d <= 0.5 / 255.0 + 1e-6);
    }
}
