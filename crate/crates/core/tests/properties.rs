//! Randomized invariants.

use approx::assert_relative_eq;
use parmcmc_core::deer::converged;
use parmcmc_core::pscan::{parallel_affine_solve, sequential_affine_solve};
use parmcmc_core::*;
use proptest::prelude::*;

fn element(kind: AffineKind, n: usize) -> impl Strategy<Value = AffineElement> {
    let jl = kind.jac_len(n);
    (prop::collection::vec(-1.2f64..1.2, jl), prop::collection::vec(-2.0f64..2.0, n)).prop_map(move |(jv, u)| {
        match kind {
            AffineKind::Dense => AffineElement::Dense { j: jv, u },
            AffineKind::Diag => AffineElement::Diag { j: jv, u },
            AffineKind::Block2x2 => {
                let h = n / 2;
                AffineElement::Block2x2 {
                    a: jv[..h].to_vec(),
                    b: jv[h..2 * h].to_vec(),
                    c: jv[2 * h..3 * h].to_vec(),
                    d: jv[3 * h..].to_vec(),
                    u,
                }
            }
        }
    })
}

fn affine_case() -> impl Strategy<Value = (Vec<AffineElement>, Vec<f64>)> {
    (
        prop_oneof![Just(AffineKind::Dense), Just(AffineKind::Diag), Just(AffineKind::Block2x2)],
        1usize..4,
        1usize..300,
    )
        .prop_flat_map(|(kind, half, len)| {
            let n = 2 * half;
            (prop::collection::vec(element(kind, n), len), prop::collection::vec(-1.0f64..1.0, n))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_scan_matches_sequential((elems, s0) in affine_case()) {
        let seq = AffineSeq::from_elements(&elems).unwrap();
        let a = sequential_affine_solve(&seq, &s0).unwrap();
        let b = parallel_affine_solve(&seq, &s0).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = 1.0 + x.abs();
            prop_assert!((x - y).abs() <= 1e-9 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn compose_agrees_with_dense((elems, s0) in affine_case()) {
        let (f, g) = (&elems[0], elems.last().unwrap());
        let c = g.compose(f).unwrap();
        let via = g.apply(&f.apply(&s0).unwrap()).unwrap();
        for (x, y) in c.apply(&s0).unwrap().iter().zip(&via) {
            assert_relative_eq!(x, y, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn converged_is_reflexive_and_monotone_in_tolerance(
        v in prop::collection::vec(-10.0f64..10.0, 1..64),
        shift in -1e-3f64..1e-3,
    ) {
        let n = v.len();
        let a = StateSequence::from_vec(v.clone(), n, 1).unwrap();
        let b = StateSequence::from_vec(v.iter().map(|x| x + shift).collect(), n, 1).unwrap();
        prop_assert_eq!(converged(&a, &a, 1e-12, 0.0).unwrap(), (true, 0.0));
        let (tight, dmax) = converged(&a, &b, 1e-6, 0.0).unwrap();
        let (loose, dmax2) = converged(&a, &b, 1e-2, 0.0).unwrap();
        prop_assert!(loose || !tight);
        prop_assert!(loose);
        prop_assert_eq!(dmax, dmax2);
        prop_assert!((dmax - shift.abs()).abs() <= 1e-9);
    }

    #[test]
    fn deer_dense_reproduces_mala_on_gaussians(
        dim in 1usize..4,
        seed in any::<u64>(),
        eps in 0.05f64..0.6,
    ) {
        let model = ModelSpec::StdNormal { dim }.build().unwrap();
        let kernel = MalaKernel::new(model, eps, seed, 256).unwrap();
        let s0 = InitialState::new(vec![0.5; dim]).unwrap();
        let seq = sequential_evaluate(&kernel, &s0).unwrap();
        let mut cfg = DeerConfig::new(JacobianMode::Dense, 256);
        cfg.max_iters = 256;
        let res = run_deer(&kernel, &s0, &cfg).unwrap();
        prop_assert!(res.converged);
        prop_assert!(converged(&res.trace, &seq, 1e-4, 1e-3).unwrap().0);
        prop_assert_eq!(res.delta_history.len(), res.iterations);
        prop_assert!(res.per_step_converged_at.iter().all(|&i| i >= 1 && i <= res.iterations));
    }
}
