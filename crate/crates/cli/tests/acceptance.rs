//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
//! lines are always printed; exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pertbound::gadget::{build_gadget, verify_leading_orders, GadgetSpec, SPINS};
use pertbound::model::EnergyCombination;
use pertbound::oracle::{build_operator, geometric_bound, spectral_error, walk_sum_oracle, ExactSeries};
use pertbound::sympoly::TraceTerm;
use pertbound::{Automaton, ModelConfig, Partition, SubsystemSpectrum, TransitionModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const Z_VALUES: [f64; 5] = [0.0, 0.25, -0.25, 0.45, -0.45];

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn gadget_spec() -> GadgetSpec {
    GadgetSpec::new(1e-3, 1e-3, 1.0).unwrap()
}

fn gadget_series() -> Result<(pertbound::gadget::Gadget, ExactSeries), String> {
    let g = build_gadget(gadget_spec()).map_err(e)?;
    let h = build_operator(&g.h, SPINS).map_err(e)?;
    let v = build_operator(&g.v, SPINS).map_err(e)?;
    let s = ExactSeries::new(&h, &v, Some(g.model.cutoff())).map_err(e)?;
    Ok((g, s))
}

fn soundness(g: &pertbound::gadget::Gadget, s: &ExactSeries) -> Check {
    let mut rows = 0;
    let mut worst = f64::INFINITY;
    for z in Z_VALUES {
        let exact = s.term_norms(z, 6).map_err(e)?;
        let mut a = Automaton::build(&g.model.at_z(z).map_err(e)?).map_err(e)?;
        for r in 2..=6 {
            let ca = a.run(r).map_err(e)?.value;
            let ex = exact[r - 2].inf_norm;
            ensure(ca >= ex - 1e-10 * ex, || format!("z = {z}, r = {r}: ca {ca:e} < exact {ex:e}"))?;
            worst = worst.min(ca / ex);
            rows += 1;
        }
    }
    Ok(format!("{rows} rows, 0 violations, min ca/exact = {worst:.15}"))
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let m = rng.random_range(1..=3usize);
    let l = rng.random_range(2..=3usize);
    let mut levels = vec![0.0];
    for _ in 1..l {
        let last = *levels.last().unwrap();
        levels.push(last + rng.random_range(0.5..1.5));
    }
    let mut counts = vec![vec![0u32; l]; l];
    for (s, row) in counts.iter_mut().enumerate() {
        for (t, c) in row.iter_mut().enumerate() {
            if s.abs_diff(t) <= 1 && rng.random_bool(0.7) {
                *c = rng.random_range(1..=3);
            }
        }
    }
    let lambdas = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let omega = if rng.random_bool(0.5) { rng.random_range(0.0..0.2) } else { 0.0 };
    let z = rng.random_range(-0.5..0.4 * levels[1]);
    let spectrum = SubsystemSpectrum::new(levels).unwrap();
    ModelConfig::new(spectrum, TransitionModel::new(lambdas, omega, counts).unwrap(), z).unwrap()
}

fn oracle_equivalence(g: &pertbound::gadget::Gadget) -> Check {
    let mut worst = 0.0f64;
    for z in Z_VALUES {
        let cfg = g.model.at_z(z).map_err(e)?;
        let mut a = Automaton::build(&cfg).map_err(e)?;
        for r in 2..=6 {
            let (ca, walk) = (a.run(r).map_err(e)?.value, walk_sum_oracle(&cfg, r).map_err(e)?);
            worst = worst.max(rel(ca, walk));
            ensure(rel(ca, walk) <= 1e-12, || format!("gadget z = {z}, r = {r}: {ca:e} vs {walk:e}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..50 {
        let cfg = random_model(&mut rng);
        let mut a = Automaton::build(&cfg).map_err(e)?;
        for r in 2..=5 {
            let (ca, walk) = (a.run(r).map_err(e)?.value, walk_sum_oracle(&cfg, r).map_err(e)?);
            worst = worst.max(rel(ca, walk));
            ensure(rel(ca, walk) <= 1e-12, || format!("model {k}, r = {r}: {ca:e} vs {walk:e}"))?;
        }
    }
    Ok(format!("gadget + 50 random models, worst relative difference {worst:e}"))
}

fn n(c: &[u32]) -> EnergyCombination {
    EnergyCombination::new(c.to_vec())
}

fn part(p: &[u32]) -> Partition {
    Partition::new(p.to_vec()).unwrap()
}

fn second_order_trace() -> Check {
    let mut shown = String::new();
    for (m01, m10, m11, e1, z, lambdas) in [
        (3u32, 1u32, 2u32, 1.0, 0.0, vec![0.05, 0.07]),
        (2, 5, 0, 0.7, -0.4, vec![0.1, 0.2, 0.3]),
        (1, 1, 1, 2.0, 0.9, vec![0.3]),
    ] {
        let m = lambdas.len() as u32;
        let spectrum = SubsystemSpectrum::new(vec![0.0, e1]).map_err(e)?;
        let t = TransitionModel::new(lambdas, 0.0, vec![vec![0, m01], vec![m10, m11]]).map_err(e)?;
        let cfg = ModelConfig::new(spectrum, t, z).map_err(e)?;
        let trace = Automaton::build(&cfg).map_err(e)?.with_trace(true).run(2).map_err(e)?.trace.unwrap();
        let want = TraceTerm::new(part(&[2]), (m01 * m10) as f64, vec![(n(&[m - 1, 1]), e1, 1)]).to_string();
        ensure(trace.len() == 1, || format!("{} terms", trace.len()))?;
        ensure(trace[0].to_string() == want, || format!("got {:?}, want {want:?}", trace[0].to_string()))?;
        shown = want;
    }
    Ok(format!("3 models, e.g. {shown:?}"))
}

fn fourth_order_trace() -> Check {
    let (m01, m10, m12, m21) = (2u32, 3u32, 1u32, 4u32);
    let (e1, e2, omega, z) = (1.0, 2.6, 0.25, -0.2);
    let spectrum = SubsystemSpectrum::new(vec![0.0, e1, e2]).map_err(e)?;
    let t = TransitionModel::new(
        vec![0.11, 0.05],
        omega,
        vec![vec![0, m01, 0], vec![m10, 0, m12], vec![0, m21, 0]],
    )
    .map_err(e)?;
    let cfg = ModelConfig::new(spectrum, t, z).map_err(e)?;
    let trace = Automaton::build(&cfg).map_err(e)?.with_trace(true).run(4).map_err(e)?.trace.unwrap();
    let mut got: Vec<String> = trace.iter().map(|t| t.to_string()).collect();
    let (m01, m10, m12, m21) = (m01 as f64, m10 as f64, m12 as f64, m21 as f64);
    let mut want: Vec<String> = [
        TraceTerm::new(part(&[2]), m01 * m10 * omega * omega, vec![(n(&[1, 1, 0]), e1, 3)]),
        TraceTerm::new(
            part(&[2, 2]),
            2.0 * m01 * m01 * m10 * m10,
            vec![(n(&[1, 1, 0]), e1, 2), (n(&[0, 2, 0]), 2.0 * e1, 1)],
        ),
        TraceTerm::new(part(&[4]), m01 * m12 * m21 * m10, vec![(n(&[1, 1, 0]), e1, 2), (n(&[1, 0, 1]), e2, 1)]),
    ]
    .iter()
    .map(|t| t.to_string())
    .collect();
    got.sort();
    want.sort();
    ensure(got == want, || format!("got {got:?}, want {want:?}"))?;
    Ok(format!("{} terms match", got.len()))
}

fn crude_bound(g: &pertbound::gadget::Gadget, s: &ExactSeries) -> Check {
    let vnorm = s.v_norm().map_err(e)?;
    let mut rows = 0;
    for z in Z_VALUES {
        let d = s.min_distance(z).map_err(e)?;
        let exact = s.term_norms(z, 6).map_err(e)?;
        let mut a = Automaton::build(&g.model.at_z(z).map_err(e)?).map_err(e)?;
        for r in 2..=6 {
            let geo = geometric_bound(vnorm, d, r);
            let ex = exact[r - 2].two_norm;
            ensure(geo >= ex, || format!("z = {z}, r = {r}: geometric {geo:e} < exact {ex:e}"))?;
            let ca = a.run(r).map_err(e)?.value;
            ensure(r < 3 || ca < geo, || format!("z = {z}, r = {r}: ca {ca:e} >= geometric {geo:e}"))?;
            rows += 1;
        }
    }
    Ok(format!("{rows} rows"))
}

fn spectral_ordering(g: &pertbound::gadget::Gadget, s: &ExactSeries) -> Check {
    let htilde = build_operator(&g.htilde(), SPINS).map_err(e)?;
    let heff = build_operator(&g.heff, 5).map_err(e)?;
    let spec = spectral_error(&htilde, &heff, 128).map_err(e)?;
    let se = s.self_energy_error(0.0, 3, 40).map_err(e)?;
    ensure(spec <= se.value + 1e-10, || format!("spectral {spec:e} > self-energy {:e}", se.value))?;
    Ok(format!("spectral {spec:e} <= self-energy {:e}", se.value))
}

fn gadget_identity() -> Check {
    let spec = gadget_spec();
    let r = verify_leading_orders(spec, 0.0).map_err(e)?;
    ensure(r.pass, || format!("distance {:e} > tolerance {:e}", r.distance, r.tolerance))?;
    for (mu, a) in [(spec.mu1(), spec.alpha1), (spec.mu2(), spec.alpha2)] {
        let back = mu.powi(3) * 6.0 / spec.delta.powi(2);
        ensure(rel(back, a) <= 1e-12, || format!("mu^3 * 6 / delta^2 = {back:e}, alpha = {a:e}"))?;
    }
    Ok(format!("distance {:e} <= tolerance {:e}", r.distance, r.tolerance))
}

fn bound(cfg: &ModelConfig, r: usize) -> Result<f64, String> {
    Ok(Automaton::build(cfg).map_err(e)?.run(r).map_err(e)?.value)
}

fn rebuild(cfg: &ModelConfig, lambdas: Vec<f64>, omega: f64, counts: Vec<Vec<u32>>) -> Result<ModelConfig, String> {
    let t = TransitionModel::new(lambdas, omega, counts).map_err(e)?;
    ModelConfig::new(cfg.spectrum().clone(), t, cfg.z()).map_err(e)
}

fn properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..100 {
        let cfg = random_model(&mut rng);
        let r = rng.random_range(2..=6usize);
        let t = cfg.transitions();
        let base = bound(&cfg, r)?;
        let again = bound(&cfg, r)?;
        ensure(base.to_bits() == again.to_bits(), || format!("config {k}: repeated runs differ"))?;

        let mut perm = t.lambdas().to_vec();
        perm.reverse();
        perm.rotate_left(1);
        let p = bound(&rebuild(&cfg, perm, t.omega(), t.matrix())?, r)?;
        ensure(rel(base, p) <= 1e-12, || format!("config {k}: permuted lambdas {p:e} vs {base:e}"))?;

        let up: Vec<f64> = t.lambdas().iter().map(|x| x * 1.25).collect();
        let b = bound(&rebuild(&cfg, up, t.omega(), t.matrix())?, r)?;
        ensure(b >= base, || format!("config {k}: larger lambda lowered bound"))?;

        let b = bound(&rebuild(&cfg, t.lambdas().to_vec(), t.omega() + 0.05, t.matrix())?, r)?;
        ensure(b >= base, || format!("config {k}: larger omega lowered bound"))?;

        let mut counts = t.matrix();
        let l = counts.len();
        let (s, u) = (rng.random_range(0..l), rng.random_range(0..l));
        if s.abs_diff(u) <= 1 {
            counts[s][u] += 1;
            let b = bound(&rebuild(&cfg, t.lambdas().to_vec(), t.omega(), counts)?, r)?;
            ensure(b >= base, || format!("config {k}: larger M[{s}][{u}] lowered bound"))?;
        }
    }
    Ok("100 configs: permutation, monotonicity in lambda/omega/M, repeatability".into())
}

fn run_bound(cfg: &Path, threads: &str) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_pertbound"))
        .args(["bound", "--config", cfg.to_str().unwrap(), "--orders", "2..8", "--z", "0,0.25,-0.45", "--no-timing"])
        .env("PB_THREADS", threads)
        .output()
        .map_err(e)?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    Ok(o.stdout)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = dir.path().join("gadget.cfg");
    let o = Command::new(env!("CARGO_BIN_EXE_pertbound"))
        .args(["gadget", "--alpha1", "1e-3", "--alpha2", "1e-3", "--delta", "1", "--out", cfg.to_str().unwrap()])
        .output()
        .map_err(e)?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    let runs = [
        run_bound(&cfg, "1")?,
        run_bound(&cfg, "4")?,
        run_bound(&cfg, "1")?,
        run_bound(&cfg, "4")?,
    ];
    ensure(runs.iter().all(|r| *r == runs[0]), || "CSV output differs between runs".into())?;
    Ok(format!("4 runs, {} identical bytes", runs[0].len()))
}

fn main() {
    let start = Instant::now();
    let fixture = gadget_series();
    let with_fixture = |f: &dyn Fn(&pertbound::gadget::Gadget, &ExactSeries) -> Check| match &fixture {
        Ok((g, s)) => f(g, s),
        Err(err) => Err(format!("gadget fixture: {err}")),
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("soundness on the gadget", Box::new(|| with_fixture(&soundness))),
        ("oracle equivalence", Box::new(|| match &fixture {
            Ok((g, _)) => oracle_equivalence(g),
            Err(err) => Err(err.clone()),
        })),
        ("second-order closed form", Box::new(second_order_trace)),
        ("fourth-order closed form", Box::new(fourth_order_trace)),
        ("crude-bound domination", Box::new(|| with_fixture(&crude_bound))),
        ("spectral-error ordering", Box::new(|| with_fixture(&spectral_ordering))),
        ("gadget identity", Box::new(gadget_identity)),
        ("symmetry and monotonicity", Box::new(properties)),
        ("determinism across thread counts", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} ({ms} ms)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} ({ms} ms)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed in {:?}", criteria.len() - failed, criteria.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
