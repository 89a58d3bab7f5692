use minusface::codec::format::TensorFile;
use minusface::codec::{self, decode_adjoint};
use minusface::perturb::{self, SplitMix64};
use minusface::{HighDimRep, MappingKind, MappingSpec, ShuffleSeed, SpatialImage};

use crate::settings::Settings;
use crate::{CheckInvariants, Failure};

struct Check {
    name: String,
    worst: f64,
    tolerance: f64,
}

impl Check {
    fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn random_image(rng: &mut SplitMix64, size: usize) -> SpatialImage {
    SpatialImage::new(size, size, (0..3 * size * size).map(|_| rng.unit() as f32).collect()).expect("sized")
}

fn random_rep(rng: &mut SplitMix64, c: usize, size: usize) -> HighDimRep {
    HighDimRep::new(c, size, size, (0..c * size * size).map(|_| rng.unit() as f32 * 2.0 - 1.0).collect())
        .expect("sized")
}

fn checks_for(spec: MappingSpec, trials: usize, size: usize, seed: u64) -> minusface::Result<Vec<Check>> {
    let mut rng = SplitMix64::new(seed);
    let c = spec.channels();
    let mut roundtrip = 0.0f64;
    let mut linear = 0.0f64;
    let mut chain = 0.0f64;
    let mut projector = 0.0f64;
    let mut adjoint = 0.0f64;
    let mut shuffle_inv = 0.0f64;
    let mut perm_valid = 0.0f64;
    let mut file = 0.0f64;
    for t in 0..trials {
        let x = random_image(&mut rng, size);
        roundtrip = roundtrip.max(codec::decode(&codec::encode(&x, &spec), &spec)?.max_abs_diff(&x)? as f64);

        let a = random_rep(&mut rng, c, size);
        let b = random_rep(&mut rng, c, size);
        let lhs = codec::decode(&a.add(&b)?, &spec)?;
        let rhs = codec::decode(&a, &spec)?.add(&codec::decode(&b, &spec)?)?;
        linear = linear.max(lhs.max_abs_diff(&rhs)? as f64);

        // ‖X − d(x')‖₁ = ‖d(e(X) − x')‖₁ for an arbitrary x'
        let xe = codec::encode(&x, &spec);
        let r = xe.sub(&b)?;
        let direct = x.sub(&codec::decode(&b, &spec)?)?.mean_abs();
        chain = chain.max((direct - codec::decode(&r, &spec)?.mean_abs()).abs());

        let p1 = codec::encode(&codec::decode(&a, &spec)?, &spec);
        let p2 = codec::encode(&codec::decode(&p1, &spec)?, &spec);
        projector = projector.max(p1.max_abs_diff(&p2)? as f64);

        let y = random_image(&mut rng, size);
        let lhs: f64 = codec::decode(&a, &spec)?.data().iter().zip(y.data()).map(|(p, q)| (*p as f64) * (*q as f64)).sum();
        let rhs: f64 = a.data().iter().zip(decode_adjoint(&y, &spec)?.data()).map(|(p, q)| (*p as f64) * (*q as f64)).sum();
        adjoint = adjoint.max((lhs - rhs).abs() / lhs.abs().max(1.0));

        let perm = perturb::permutation_from_seed(ShuffleSeed(rng.next() ^ t as u64), c);
        let mut seen = perm.mapping().to_vec();
        seen.sort_unstable();
        if seen != (0..c).collect::<Vec<_>>() {
            perm_valid = 1.0;
        }
        let back = perturb::shuffle_channels(&perturb::shuffle_channels(&a, &perm)?, &perm.inverse())?;
        shuffle_inv = shuffle_inv.max(back.max_abs_diff(&a)? as f64);

        let f = TensorFile::spatial(&x, 0);
        let again = TensorFile::from_bytes(&f.to_bytes())?.into_spatial()?;
        file = file.max(again.max_abs_diff(&x)? as f64);
    }
    let tag = spec.kind;
    let check = |name: &str, worst, tolerance| Check {
        name: format!("{tag} {name}"),
        worst,
        tolerance,
    };
    Ok(vec![
        check("decode(encode(X)) = X", roundtrip, 1e-5),
        check("decode is linear", linear, 1e-5),
        check("L1 chain |X-X'| = |d(r)|", chain, 1e-5),
        check("encode.decode idempotent", projector, 1e-5),
        check("decode_adjoint is the adjoint", adjoint, 1e-4),
        check("permutation is a bijection", perm_valid, 0.0),
        check("unshuffle(shuffle(r)) = r", shuffle_inv, 0.0),
        check("MFRP round trip", file, 0.0),
    ])
}

pub fn run(a: CheckInvariants, s: &Settings) -> Result<(), Failure> {
    let which = s.pick(a.mapping.clone(), "mapping", "all".to_string())?;
    let trials = s.pick(a.trials, "trials", 100usize)?;
    let seed = s.pick(a.seed, "seed", 1u64)?;
    let size = s.pick(a.size, "size", 32usize)?;
    let specs = match which.as_str() {
        "all" => vec![MappingSpec::dct8(), MappingSpec::haar2()],
        other => {
            let kind: MappingKind = other
                .parse()
                .map_err(|e: minusface::Error| Failure::Usage(e.to_string()))?;
            vec![MappingSpec { kind }]
        }
    };
    if trials == 0 || size == 0 {
        return Err(Failure::Usage("trials and size must be positive".into()));
    }
    let mut all = Vec::new();
    for spec in specs {
        all.extend(checks_for(spec, trials, size, seed)?);
    }
    println!("{:<40} {:>12} {:>10}  result", "check", "worst", "tolerance");
    for c in &all {
        println!(
            "{:<40} {:>12.3e} {:>10.1e}  {}",
            c.name,
            c.worst,
            c.tolerance,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = all.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} invariant check(s) failed")));
    }
    Ok(())
}
