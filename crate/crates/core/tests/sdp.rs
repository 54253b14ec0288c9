//! The conic solver on programs with known optima.

use descent_mean::sdp::{solve, ConicProblem, LinearConstraint, SdpConfig, SdpStatus, SymSparse};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// `⟨C, X⟩` as a linear form: off-diagonal positions count twice.
fn sparse(c: &DMatrix<f64>) -> SymSparse {
    let mut s = SymSparse::new();
    for i in 0..c.nrows() {
        for j in i..c.ncols() {
            if c[(i, j)] != 0.0 {
                s.add(i, j, if i == j { c[(i, j)] } else { 2.0 * c[(i, j)] });
            }
        }
    }
    s
}

fn trace_one(n: usize) -> LinearConstraint {
    let mut t = SymSparse::new();
    for i in 0..n {
        t.add(i, i, 1.0);
    }
    LinearConstraint { coeffs: t, rhs: 1.0 }
}

fn symmetric() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=5).prop_flat_map(|n| {
        prop::collection::vec(-3.0f64..3.0, n * n).prop_map(move |e| {
            let a = DMatrix::from_row_slice(n, n, &e);
            (&a + a.transpose()) * 0.5
        })
    })
}

fn accurate() -> SdpConfig {
    SdpConfig {
        abs_tol: 1e-8,
        rel_tol: 1e-8,
        max_iter: 200_000,
        ..SdpConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unit_trace_program_finds_the_top_eigenvalue(c in symmetric()) {
        let n = c.nrows();
        let problem = ConicProblem {
            dim: n,
            objective: sparse(&c),
            eq_constraints: vec![trace_one(n)],
            ineq_constraints: vec![],
        };
        let r = solve(&problem, &accurate()).unwrap();
        prop_assert_eq!(r.status, SdpStatus::Optimal);
        let top = c.clone().symmetric_eigen().eigenvalues.max();
        prop_assert!((r.value - top).abs() <= 1e-5 * (1.0 + top.abs()), "{} vs {top}", r.value);
        prop_assert!((r.primal_residual - problem.max_violation(&r.x)).abs() <= 1e-12);
        prop_assert!(r.x.clone().symmetric_eigen().eigenvalues.min() >= -1e-9);
    }

    #[test]
    fn solves_are_deterministic(c in symmetric()) {
        let n = c.nrows();
        let eqs: Vec<LinearConstraint> = (0..n)
            .map(|i| LinearConstraint { coeffs: SymSparse::new().with(i, i, 1.0), rhs: 1.0 })
            .collect();
        let problem = ConicProblem {
            dim: n,
            objective: sparse(&c),
            eq_constraints: eqs,
            ineq_constraints: vec![LinearConstraint { coeffs: SymSparse::new().with(0, n - 1, 1.0), rhs: -0.5 }],
        };
        let a = solve(&problem, &SdpConfig::default()).unwrap();
        let b = solve(&problem, &SdpConfig::default()).unwrap();
        prop_assert_eq!(a.x, b.x);
        prop_assert_eq!(a.iterations, b.iterations);
        if a.status == SdpStatus::Optimal {
            prop_assert!(a.primal_residual <= 1e-5);
        }
    }
}
