//! Property tests for the norms, the interpolation operators, the rate
//! model and the simulators.

use std::f64::consts::PI;

use proptest::prelude::*;
use sktlab::analytics::{clopper_pearson, deviation_event};
use sktlab::grid::{laplacian_apply, GridFn, HMinusOneAccumulator, SpectralPlan};
use sktlab::interp::{interpolate, restrict, InterpNorms};
use sktlab::model::{build_skt, check_smallness, SktParams, Species};
use sktlab::particle::{init_particles, run, InitialCondition, RunControls, TransitionClass};
use sktlab::rng::replica_rng;
use sktlab::semidiscrete::{integrate, IntegrateControls, SemiDiscreteState};

fn grid(m: usize, lo: f64, hi: f64) -> impl Strategy<Value = GridFn> {
    prop::collection::vec(lo..hi, m).prop_map(GridFn::new)
}

fn sized_grid(lo: f64, hi: f64) -> impl Strategy<Value = GridFn> {
    (4usize..=256).prop_flat_map(move |m| grid(m, lo, hi))
}

fn hm1(u: &GridFn) -> f64 {
    SpectralPlan::new(u.m()).unwrap().norm_sq(u).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Each eigenvalue is checked against the Rayleigh quotient of the
    /// matching cosine mode under the stencil.
    #[test]
    fn spectrum_lies_in_zero_or_band(m in 2usize..=1024) {
        let plan = SpectralPlan::new(m).unwrap();
        let ev = plan.eigenvalues();
        let mf = m as f64;
        prop_assert_eq!(ev.iter().filter(|l| l.abs() < 1e-9).count(), 1);
        prop_assert!(ev[0].abs() < 1e-9);
        for (k, &l) in ev.iter().enumerate().skip(1) {
            prop_assert!(l >= 16.0 * (1.0 - 1e-12) && l <= 4.0 * mf * mf * (1.0 + 1e-12), "M={} k={} λ={}", m, k, l);
        }
        for k in [1, m / 2, m - 1] {
            if k == 0 { continue; }
            let c = GridFn::from_fn(m, |x| (2.0 * PI * k as f64 * x).cos());
            let lc = laplacian_apply(&c);
            let q = -lc.dot(&c) / c.dot(&c);
            prop_assert!((q - ev[k]).abs() <= 1e-9 * ev[k].max(1.0), "k={} {} vs {}", k, q, ev[k]);
        }
    }

    /// Non-negative samples: `‖u‖_{-1} ≤ ‖u‖_2 ≤ 1.01 M ‖u‖_{-1}`.
    #[test]
    fn norm_sandwich_on_densities(u in sized_grid(0.0, 1.0)) {
        let (a, b) = (hm1(&u), u.norm_p(2.0));
        prop_assert!(a <= b * (1.0 + 1e-12));
        prop_assert!(b <= 1.01 * u.m() as f64 * a, "ratio {}", b / (u.m() as f64 * a));
    }

    /// Signed samples: the upper constant is `2M`, attained by the
    /// alternating mode.
    #[test]
    fn norm_sandwich_signed(u in sized_grid(-1.0, 1.0)) {
        let (a, b) = (hm1(&u), u.norm_p(2.0));
        prop_assert!(a <= b * (1.0 + 1e-12));
        prop_assert!(b <= 2.0 * u.m() as f64 * a * (1.0 + 1e-12));
    }

    /// Extreme points of the ℓ¹ ball are the scaled site vectors, whose
    /// norm ratio is below `√(13/12)` for every `M`.
    #[test]
    fn l1_embedding(u in sized_grid(-1.0, 1.0)) {
        prop_assert!(hm1(&u) <= (13.0f64 / 12.0).sqrt() * u.norm_p(1.0) * (1.0 + 1e-12));
    }

    #[test]
    fn translation_invariance(u in sized_grid(-1.0, 1.0), k in -300isize..300) {
        let plan = SpectralPlan::new(u.m()).unwrap();
        let a = plan.norm_sq(&u);
        let b = plan.norm_sq(&u.shifted(k));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }

    #[test]
    fn uniform_equivalence(u in sized_grid(-1.0, 1.0)) {
        let m = u.m();
        let plan = SpectralPlan::shared(m).unwrap();
        let norms = InterpNorms::new(plan.clone(), 4 * m);
        let l2 = norms.l2_sq(&u).sqrt();
        let cont = m as f64 * norms.hm1_sq(&u).sqrt() + l2;
        let disc = m as f64 * plan.norm_sq(&u).sqrt() + l2;
        let r = cont / disc;
        prop_assert!((1.0 / 3.0..=3.0).contains(&r), "M={} ratio {}", m, r);
    }

    #[test]
    fn nodal_reproduction_and_domination(u in sized_grid(-1.0, 1.0)) {
        let m = u.m();
        prop_assert_eq!(restrict(&interpolate(&u), m), u.clone());
        let norms = InterpNorms::new(SpectralPlan::shared(m).unwrap(), m);
        prop_assert!(norms.l2_sq(&u).sqrt() <= u.norm_p(2.0) * (1.0 + 1e-12));
    }

    #[test]
    fn site_and_neighbour_jump_sizes(m in 2usize..=1024, i in 0usize..1024) {
        let plan = SpectralPlan::new(m).unwrap();
        let i = i % m;
        let mf = m as f64;
        let e = GridFn::basis(m, i);
        prop_assert!(plan.norm_sq(&e) <= 1.0 / mf + 1.0 / (mf * mf));
        let mut d = GridFn::basis(m, (i + 1) % m);
        d.axpy(-1.0, &e);
        prop_assert!((plan.norm_sq(&d) - (mf - 1.0) / mf.powi(4)).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn incremental_norm_tracks_fresh_norm(m in 2usize..64, steps in prop::collection::vec((0usize..64, any::<bool>()), 1..2000)) {
        let plan = SpectralPlan::shared(m).unwrap();
        let mut acc = HMinusOneAccumulator::zero(plan.clone());
        let mut field = GridFn::zeros(m);
        for (j, up) in steps {
            let a = if up { 1.0 } else { -1.0 };
            acc.add_site(j % m, a);
            field.values_mut()[j % m] += a;
        }
        let fresh = plan.norm_sq(&field);
        prop_assert!((acc.norm_sq() - fresh).abs() <= 1e-9 * fresh.max(1e-12));
    }

    #[test]
    fn skt_growth_never_exceeds_cap(
        rho in (0.0f64..2.0, 0.0f64..2.0),
        s in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        u in 0.0f64..50.0, v in 0.0f64..50.0,
    ) {
        let model = build_skt(&SktParams {
            d1: 1.0, d2: 0.5, a1: 0.2, a2: 0.3,
            rho1: rho.0, rho2: rho.1, s11: s.0, s12: s.1, s21: s.2, s22: s.3,
        }).unwrap();
        let total = model.growth(Species::U, u, v) + model.growth(Species::V, u, v);
        prop_assert!(total <= model.rho0 + 1e-12);
    }

    #[test]
    fn smallness_is_monotone(u in 0.0f64..10.0, v in 0.0f64..10.0, du in 0.0f64..5.0, dv in 0.0f64..5.0) {
        let model = build_skt(&SktParams::conservative(1.0, 1.0, 0.5, 0.5)).unwrap();
        let small = check_smallness(&model, u, v).holds;
        let big = check_smallness(&model, u + du, v + dv).holds;
        prop_assert!(!big || small);
    }

    /// With `R ≡ 0` the mean is conserved and positivity is kept.
    #[test]
    fn semidiscrete_conserves_mass(m in 4usize..24, vals in prop::collection::vec(0.0f64..2.0, 48)) {
        let model = build_skt(&SktParams::conservative(1.0, 1.0, 0.2, 0.2)).unwrap();
        let u = GridFn::new(vals[..m].to_vec());
        let v = GridFn::new(vals[24..24 + m].to_vec());
        let s0 = SemiDiscreteState::new(u.clone(), v.clone(), 0.0).unwrap();
        let traj = integrate(&s0, &model, 0.02, &IntegrateControls { sample_dt: 0.01, ..Default::default() }).unwrap();
        let last = traj.last();
        for (a, b) in [(&u, &last.u), (&v, &last.v)] {
            prop_assert!((a.mean() - b.mean()).abs() <= 1e-12 * a.mean().max(1e-300));
            prop_assert!(b.iter().all(|x| *x >= 0.0));
        }
    }

    /// Mass changes exactly by births minus deaths at every sample.
    #[test]
    fn particle_count_identity(seed in any::<u64>(), reactive in any::<bool>()) {
        let p = if reactive {
            SktParams { d1: 1.0, d2: 1.0, a1: 0.1, a2: 0.1, rho1: 1.0, rho2: 0.5, s11: 0.2, s12: 0.1, s21: 0.1, s22: 0.2 }
        } else {
            SktParams::conservative(1.0, 1.0, 0.1, 0.1)
        };
        let model = build_skt(&p).unwrap();
        let mut rng = replica_rng(seed, 0);
        let ic = InitialCondition::Counts { u: vec![5, 0, 3, 7], v: vec![2, 2, 0, 4] };
        let state = init_particles(&model, &ic, 4, 4, &mut rng).unwrap();
        let controls = RunControls { t_end: 0.2, sample_dt: 0.05, ..Default::default() };
        let tr = run(state, &model, &controls, None, 0, &mut rng).unwrap();
        let total = |s: &sktlab::particle::Sample, sp| s.counts(sp).iter().sum::<u64>() as i64;
        let s0 = &tr.samples[0];
        for s in &tr.samples {
            let j = |c: TransitionClass| s.jumps[c.index()] as i64;
            prop_assert_eq!(total(s, Species::U) - total(s0, Species::U), j(TransitionClass::Births1) - j(TransitionClass::Deaths1));
            prop_assert_eq!(total(s, Species::V) - total(s0, Species::V), j(TransitionClass::Births2) - j(TransitionClass::Deaths2));
            if !reactive {
                prop_assert_eq!(total(s, Species::U), total(s0, Species::U));
            }
        }
        let h = tr.martingale.unwrap();
        // H is rebuilt from its parts.
        for i in 0..2 {
            prop_assert!((h.h_final[i] - (2.0 * h.q_final[i] + h.jump_qv[i])).abs() <= 1e-9 * (1.0 + h.h_final[i].abs()));
        }
    }

    #[test]
    fn deviation_frequencies_are_probabilities(k in 0u64..500, extra in 0u64..500) {
        let n = k + extra + 1;
        let (lo, hi) = clopper_pearson(k, n, 0.95);
        let f = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= f && f <= hi && hi <= 1.0);
    }

    /// A path that tracks its compensator exactly never deviates.
    #[test]
    fn exact_tracking_never_deviates(n in 1usize..200, k in 1.0f64..50.0) {
        let jumps: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        // Counter n at u just below n+1 gives |n - u| < 1 < 0.5u once u > 2.
        prop_assert!(!deviation_event(&jumps, n as f64, 0.5, k.max(3.0)));
    }
}
