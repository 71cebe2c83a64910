use std::time::Instant;

use pertbound::gadget::{build_gadget, GadgetSpec, SPINS};
use pertbound::oracle::{build_operator, derive_transition_model, ExactSeries, Fragment, Pauli, PauliTerm};
use pertbound::{Automaton, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gadget_bound_dominates_exact_norm() {
    let start = Instant::now();
    let g = build_gadget(GadgetSpec::new(1e-3, 1e-3, 1.0).unwrap()).unwrap();
    let h = build_operator(&g.h, SPINS).unwrap();
    let v = build_operator(&g.v, SPINS).unwrap();
    let series = ExactSeries::new(&h, &v, Some(g.model.cutoff())).unwrap();
    assert_eq!(series.low_dim(), 128);
    for z in [0.0, 0.25, -0.25, 0.45, -0.45] {
        let exact = series.term_norms(z, 6).unwrap();
        let mut a = Automaton::build(&g.model.at_z(z).unwrap()).unwrap();
        for r in 2..=6 {
            let ca = a.run(r).unwrap().value;
            let ex = exact[r - 2].inf_norm;
            println!("z = {z:>5}  r = {r}  ca = {ca:.6e}  exact = {ex:.6e}  ratio = {:.4}", ca / ex);
            assert!(ca >= ex - 1e-10 * ex.max(1e-300), "z = {z}, r = {r}: {ca} < {ex}");
        }
    }
    println!("elapsed {:?}", start.elapsed());
}

struct Realization {
    cfg: ModelConfig,
    h: Vec<PauliTerm>,
    v: Vec<PauliTerm>,
    spins: usize,
}

fn random_pauli(rng: &mut ChaCha8Rng) -> Pauli {
    [Pauli::X, Pauli::Y, Pauli::Z][rng.random_range(0..3)]
}

/// Identical diagonal subsystems of one or two spins plus a few environment
/// spins, coupled by random Pauli strings that touch one subsystem each.
fn random_realization(rng: &mut ChaCha8Rng) -> Realization {
    let q = rng.random_range(1..=2usize);
    let m = rng.random_range(1..=3usize);
    let env = rng.random_range(0..=2usize);
    let spins = m * q + env;
    let hsub: Vec<PauliTerm> = if q == 1 {
        vec![PauliTerm::new(-0.5, vec![(0, Pauli::Z)]).unwrap()]
    } else {
        let j = rng.random_range(0.3..0.7);
        let f = rng.random_range(0.05..0.2);
        vec![
            PauliTerm::new(-j, vec![(0, Pauli::Z), (1, Pauli::Z)]).unwrap(),
            PauliTerm::new(-f, vec![(0, Pauli::Z)]).unwrap(),
            PauliTerm::new(-f, vec![(1, Pauli::Z)]).unwrap(),
        ]
    };
    let mut h = Vec::new();
    let mut v = Vec::new();
    let mut fragments = Vec::new();
    for i in 0..m {
        let block: Vec<usize> = (i * q..(i + 1) * q).collect();
        for t in &hsub {
            h.push(t.relabeled(|s| block[s]).unwrap());
        }
        let mut terms = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let mut factors = vec![(block[rng.random_range(0..q)], random_pauli(rng))];
            if q == 2 && rng.random_bool(0.3) {
                let other = if factors[0].0 == block[0] { block[1] } else { block[0] };
                factors.push((other, random_pauli(rng)));
            }
            if env > 0 && rng.random_bool(0.6) {
                factors.push((m * q + rng.random_range(0..env), random_pauli(rng)));
            }
            terms.push(PauliTerm::new(rng.random_range(-0.3..0.3), factors).unwrap());
        }
        v.extend(terms.iter().cloned());
        fragments.push(Fragment {
            subsystem_spins: block,
            terms,
        });
    }
    let hsub_op = build_operator(&hsub, q).unwrap();
    let (spectrum, transitions) = derive_transition_model(&hsub_op, &fragments).unwrap();
    let z = rng.random_range(-1.0..0.4 * spectrum.gap());
    let cfg = ModelConfig::new(spectrum, transitions, z).unwrap();
    Realization { cfg, h, v, spins }
}

#[test]
fn random_realizations_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for _ in 0..60 {
        let real = random_realization(&mut rng);
        let h = build_operator(&real.h, real.spins).unwrap();
        let v = build_operator(&real.v, real.spins).unwrap();
        let series = ExactSeries::new(&h, &v, Some(real.cfg.cutoff())).unwrap();
        let exact = series.term_norms(real.cfg.z(), 6).unwrap();
        let mut a = Automaton::build(&real.cfg).unwrap();
        for r in 2..=6 {
            let ca = a.run(r).unwrap().value;
            let ex = exact[r - 2].inf_norm;
            assert!(
                ca >= ex - 1e-10 * ca.max(ex),
                "r = {r}: bound {ca} < exact {ex}\nH = {:?}\nV = {:?}\n{:?}",
                real.h.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
                real.v.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
                real.cfg
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 300);
}
