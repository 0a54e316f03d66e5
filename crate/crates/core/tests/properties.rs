use std::sync::Arc;

use proptest::prelude::*;
use upo_core::flow::{ControlMode, ControlledField};
use upo_core::gapmin::{CloudPoint, GapPolynomial, PointCloud};
use upo_core::polyalg::Polynomial;
use upo_core::recurrence::{events_to_csv, parse_events_csv, RecurrenceEvent};
use upo_core::sdpsolve::{self, sdpa, BlockKind, Constraint, Entry, SdpProblem, SdpStatus, SolveOptions};
use upo_core::sosbound::AffineScaling;
use upo_core::systems::{builtin, lorenz96, DynamicalSystem};
use upo_core::varorbit::{arc_length, resample};

const DIM: usize = 3;

fn poly() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec((-2.0f64..2.0, prop::collection::vec(0u32..3, DIM)), 1..6)
        .prop_map(|terms| Polynomial::from_terms(DIM, terms).unwrap())
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, DIM)
}

/// `min ⟨C, X⟩` over `3×3 X ⪰ 0` with `tr X = 1`; the optimum is `λ_min(C)`.
fn trace_one(c: &[f64]) -> SdpProblem {
    let mut objective = Vec::new();
    let mut k = 0;
    for i in 0..3 {
        for j in i..3 {
            objective.push(Entry::new(0, i, j, c[k]));
            k += 1;
        }
    }
    SdpProblem {
        blocks: vec![BlockKind::Psd(3), BlockKind::Diag(2)],
        n_free: 1,
        constraints: vec![
            Constraint {
                entries: (0..3).map(|i| Entry::new(0, i, i, 1.0)).collect(),
                free: vec![],
                rhs: 1.0,
            },
            // A diagonal block and a free variable pinned to harmless values.
            Constraint {
                entries: vec![Entry::new(1, 0, 0, 1.0), Entry::new(1, 1, 1, 1.0)],
                free: vec![(0, 1.0)],
                rhs: 2.0,
            },
            Constraint {
                entries: vec![Entry::new(1, 0, 0, 1.0)],
                free: vec![(0, -1.0)],
                rhs: 0.0,
            },
        ],
        objective,
        free_objective: vec![],
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ring_operations_commute_with_evaluation(p in poly(), q in poly(), x in point()) {
        let (pv, qv) = (p.eval(&x).unwrap(), q.eval(&x).unwrap());
        prop_assert!(close(p.checked_add(&q).unwrap().eval(&x).unwrap(), pv + qv, 1e-12));
        prop_assert!(close(p.checked_sub(&q).unwrap().eval(&x).unwrap(), pv - qv, 1e-12));
        prop_assert!(close(p.checked_mul(&q).unwrap().eval(&x).unwrap(), pv * qv, 1e-12));
    }

    #[test]
    fn gradient_matches_central_differences(p in poly(), x in point()) {
        let h = 1e-5;
        for (i, di) in p.gradient().iter().enumerate() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.eval(&xp).unwrap() - p.eval(&xm).unwrap()) / (2.0 * h);
            prop_assert!(close(di.eval(&x).unwrap(), fd, 1e-7));
        }
    }

    #[test]
    fn affine_composition_evaluates_at_the_image(
        p in poly(),
        x in point(),
        center in point(),
        scale in prop::collection::vec(0.1f64..3.0, DIM),
    ) {
        let composed = p.compose_affine(&center, &scale);
        let s = AffineScaling { center, scale };
        prop_assert!(close(composed.eval(&x).unwrap(), p.eval(&s.to_original(&x)).unwrap(), 1e-10));
        let back = s.to_scaled(&s.to_original(&x));
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let inv = s.inverse().to_original(&s.to_original(&x));
        for (a, b) in inv.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_form_round_trips(p in poly()) {
        let again = Polynomial::parse_terms(DIM, &p.to_text(), 1).unwrap();
        prop_assert_eq!(again, p);
    }

    #[test]
    fn lie_derivative_is_gradient_dot_field(p in poly(), f0 in poly(), f1 in poly(), f2 in poly(), x in point()) {
        let field = [f0, f1, f2];
        let lie = p.lie_derivative(&field).unwrap().eval(&x).unwrap();
        let dot: f64 = p.gradient().iter().zip(&field)
            .map(|(g, f)| g.eval(&x).unwrap() * f.eval(&x).unwrap())
            .sum();
        prop_assert!(close(lie, dot, 1e-10));
    }

    #[test]
    fn lorenz96_commutes_with_cyclic_shift(x in prop::collection::vec(-10.0f64..10.0, 5), forcing in 0.0f64..10.0) {
        let sys = lorenz96(5, forcing).unwrap();
        let fx = sys.eval(&x).unwrap();
        let mut shifted = x.clone();
        shifted.rotate_left(1);
        let mut f_shifted = sys.eval(&shifted).unwrap();
        f_shifted.rotate_right(1);
        for (a, b) in f_shifted.iter().zip(&fx) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn system_text_round_trips(name in prop::sample::select(vec!["vdp", "sprott", "lorenz96"])) {
        let sys = builtin(name, None).unwrap();
        let again = DynamicalSystem::parse(&sys.to_text()).unwrap();
        prop_assert_eq!(again.field, sys.field);
    }

    #[test]
    fn projected_control_is_orthogonal_to_the_field(d in poly(), x in point(), k in 0.01f64..5.0) {
        let sys = builtin("sprott", None).unwrap();
        let gap = Arc::new(GapPolynomial::from_polynomial(d));
        let cf = ControlledField::controlled(sys, gap, ControlMode::Projected, k).unwrap();
        let f = cf.f(&x);
        let q: f64 = f.iter().map(|v| v * v).sum();
        prop_assume!(q > 1e-6);
        let u: Vec<f64> = cf.eval(&x).iter().zip(&f).map(|(a, b)| a - b).collect();
        let dot: f64 = u.iter().zip(&f).map(|(a, b)| a * b).sum();
        let un: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(dot.abs() <= 1e-10 * (1.0 + un * q.sqrt()));
    }

    #[test]
    fn controlled_jacobian_matches_differences(d in poly(), x in point(), k in 0.01f64..2.0, projected in any::<bool>()) {
        let sys = builtin("sprott", None).unwrap();
        let mode = if projected { ControlMode::Projected } else { ControlMode::Gradient };
        let cf = ControlledField::controlled(sys, Arc::new(GapPolynomial::from_polynomial(d)), mode, k).unwrap();
        prop_assume!(cf.f(&x).iter().map(|v| v * v).sum::<f64>() > 1e-2);
        let j = cf.jacobian(&x);
        let h = 1e-6;
        for c in 0..DIM {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (cf.eval(&xp), cf.eval(&xm));
            for r in 0..DIM {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                prop_assert!(close(j[(r, c)], fd, 1e-5), "J[{r},{c}] = {} vs {fd}", j[(r, c)]);
            }
        }
    }

    #[test]
    fn resampling_a_loop_preserves_trigonometric_content(
        coef in prop::collection::vec(-1.0f64..1.0, 6),
        m in 16usize..64,
        shift in 0usize..16,
    ) {
        // A loop with harmonics up to 2 is reproduced exactly by any resampling with n ≥ 5.
        let curve = |s: f64| -> Vec<f64> {
            let th = std::f64::consts::TAU * s;
            vec![
                coef[0] + coef[1] * th.cos() + coef[2] * (2.0 * th).sin(),
                coef[3] * th.sin() + coef[4] * (2.0 * th).cos() + coef[5],
            ]
        };
        let n = 16;
        let pts: Vec<Vec<f64>> = (0..n).map(|j| curve(j as f64 / n as f64)).collect();
        let out = resample(&pts, m);
        for (j, p) in out.iter().enumerate() {
            let exact = curve(j as f64 / m as f64);
            prop_assert!((p[0] - exact[0]).abs() < 1e-12 && (p[1] - exact[1]).abs() < 1e-12);
        }
        let mut rotated = pts.clone();
        rotated.rotate_left(shift);
        prop_assert!(close(arc_length(&rotated), arc_length(&pts), 1e-12));
    }

    #[test]
    fn event_csv_round_trips(evs in prop::collection::vec((0.0f64..1e3, 0.1f64..50.0, 0.0f64..0.1), 0..8)) {
        let events: Vec<RecurrenceEvent> = evs.into_iter().map(|(t, period, r)| RecurrenceEvent { t, period, r }).collect();
        prop_assert_eq!(parse_events_csv(&events_to_csv(&events)).unwrap(), events);
    }

    #[test]
    fn trace_constrained_sdp_finds_the_smallest_eigenvalue(c in prop::collection::vec(-2.0f64..2.0, 6)) {
        let p = trace_one(&c);
        let sol = sdpsolve::solve(&p, &SolveOptions::default()).unwrap();
        prop_assert_eq!(sol.status, SdpStatus::Solved);
        let m = nalgebra::Matrix3::new(c[0], c[1], c[2], c[1], c[3], c[4], c[2], c[4], c[5]);
        let lmin = m.symmetric_eigenvalues().min();
        prop_assert!((sol.primal_obj - lmin).abs() < 1e-6, "{} vs {lmin}", sol.primal_obj);
        prop_assert!(sol.primal_obj >= sol.dual_obj - 1e-7);
        for x in &sol.primal {
            prop_assert!(x.min_eigenvalue() >= -1e-8);
        }
    }

    #[test]
    fn sdpa_text_round_trips(c in prop::collection::vec(-2.0f64..2.0, 6)) {
        let p = trace_one(&c);
        let text = sdpa::write_problem(&p).unwrap();
        let again = sdpa::read_problem(&text).unwrap();
        prop_assert_eq!(sdpa::write_problem(&again).unwrap(), text);
        let sol = sdpsolve::solve(&p, &SolveOptions::default()).unwrap();
        let back = sdpa::read_solution(&p, &sdpa::write_solution(&p, &sol)).unwrap();
        for (a, b) in back.primal.iter().zip(&sol.primal) {
            prop_assert!((a.frobenius_sq() - b.frobenius_sq()).abs() < 1e-12);
        }
    }

    #[test]
    fn point_cloud_csv_round_trips(pts in prop::collection::vec((point(), 0.0f64..1e-3, 0.0f64..1.0), 0..10)) {
        let cloud = PointCloud {
            points: pts.into_iter().map(|(x, d, grad_norm)| CloudPoint { x, d, grad_norm }).collect(),
            eps: 1e-3,
        };
        let again = PointCloud::parse_csv(&cloud.to_csv()).unwrap();
        prop_assert_eq!(again.points.len(), cloud.points.len());
        for (a, b) in again.points.iter().zip(&cloud.points) {
            prop_assert_eq!(&a.x, &b.x);
            prop_assert_eq!(a.d, b.d);
        }
    }
}
