use nalgebra::DMatrix;
use pathlangevin::diagnostics::{ergodic_average, ks_distance};
use pathlangevin::model::{LogAlpha, MatrixSet, Observations, Potential, ProblemSpec, SmoothingMatrices};
use pathlangevin::operators::{assemble_precision, solve_bvp};
use pathlangevin::oracle::importance_bridge;
use pathlangevin::sampler::run_chain;
use pathlangevin::{seeded_rng, Grid, SamplerConfig, Scheme, TargetMeasure};
use proptest::prelude::*;
use rand::Rng as _;

#[derive(Clone, Debug)]
struct Instance {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    quartic: bool,
    ends: Vec<f64>,
    increments_seed: u64,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=2).prop_flat_map(|dim| {
        let n = dim * dim;
        (
            Just(dim),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-0.5f64..0.5, n),
            prop::collection::vec(0.5f64..1.5, dim),
            any::<bool>(),
            prop::collection::vec(-2.0f64..2.0, 2 * dim),
            any::<u64>(),
        )
            .prop_map(|(dim, a, mut b, diag, quartic, ends, increments_seed)| {
                // Lower triangular with a positive diagonal keeps B well conditioned.
                for i in 0..dim {
                    for j in 0..dim {
                        if j > i {
                            b[i * dim + j] = 0.0;
                        }
                    }
                    b[i * dim + i] = diag[i];
                }
                Instance { dim, a, b, quartic, ends, increments_seed }
            })
    })
}

impl Instance {
    fn potential(&self) -> Potential {
        if self.quartic {
            Potential::double_well(self.dim, 1.0, 1.0).unwrap()
        } else {
            Potential::quadratic(DMatrix::identity(self.dim, self.dim)).unwrap()
        }
    }

    fn matrices(&self) -> MatrixSet {
        let d = self.dim;
        MatrixSet::new(DMatrix::from_row_slice(d, d, &self.a), DMatrix::from_row_slice(d, d, &self.b)).unwrap()
    }

    fn specs(&self, grid: &Grid) -> Vec<ProblemSpec> {
        let d = self.dim;
        let start = self.ends[..d].to_vec();
        let end = self.ends[d..].to_vec();
        // A21 = I + A/4 stays invertible, so the smoothing precision is proper.
        let a21 = DMatrix::identity(d, d) + DMatrix::from_row_slice(d, d, &self.a) * 0.25;
        let sm = SmoothingMatrices::new(a21, DMatrix::from_row_slice(d, d, &self.b), DMatrix::identity(d, d) * 0.5)
            .unwrap();
        let mut rng = seeded_rng(self.increments_seed);
        let incs: Vec<f64> =
            (0..grid.intervals() * d).map(|_| rng.random_range(-1.0..1.0) * grid.du().sqrt()).collect();
        let obs = Observations::from_increments(grid, d, incs).unwrap();
        vec![
            ProblemSpec::free_path(self.matrices(), self.potential(), start.clone()).unwrap(),
            ProblemSpec::bridge(self.matrices(), self.potential(), start, end).unwrap(),
            ProblemSpec::smoothing(sm, self.potential(), LogAlpha::Stationary, obs).unwrap(),
        ]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn precision_is_symmetric_and_bvp_residual_small(inst in instance(), mi in 0usize..3, seed in any::<u64>()) {
        let grid = Grid::new([4, 16, 64][mi]).unwrap();
        for spec in inst.specs(&grid) {
            let op = assemble_precision(&spec, &grid).unwrap();
            let lam = op.lambda();
            prop_assert!(lam.asymmetry() <= 1e-12 * lam.max_abs());

            let mut rng = seeded_rng(seed);
            let rhs: Vec<f64> = (0..op.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let path = solve_bvp(&op, &rhs).unwrap();
            let x = op.layout().restrict(path.values());
            let lx = lam.mul_vec(x);
            let resid: Vec<f64> = (0..op.size()).map(|i| lx[i] - rhs[i] - op.forcing()[i]).collect();
            let scale = norm(&rhs) + norm(op.forcing());
            prop_assert!(norm(&resid) <= 1e-10 * scale, "residual {} vs {}", norm(&resid), scale);
        }
    }

    #[test]
    fn factor_reconstructs_precision(inst in instance(), mi in 0usize..3) {
        let grid = Grid::new([4, 16, 64][mi]).unwrap();
        for spec in inst.specs(&grid) {
            let op = assemble_precision(&spec, &grid).unwrap();
            let dense = op.lambda().to_dense();
            let l = op.lambda().cholesky().unwrap().to_dense_lower();
            let err = (&l * l.transpose() - &dense).norm() / dense.norm();
            prop_assert!(err <= 1e-10, "relative error {err:e}");
            if grid.intervals() <= 16 {
                prop_assert!(dense.clone().cholesky().is_some());
            }
        }
    }

    #[test]
    fn smoothing_split_sums_to_precision(inst in instance(), eps in 0.1f64..5.0) {
        let grid = Grid::new(16).unwrap();
        let spec = inst.specs(&grid).pop().unwrap();
        let t = TargetMeasure::with_epsilon(spec, &grid, eps).unwrap();
        let op = t.operator();
        let sum = op.lambda0().to_dense() + op.lambda1().to_dense();
        let err = (sum - op.lambda().to_dense()).amax();
        prop_assert!(err <= 1e-12 * op.lambda().max_abs());
        prop_assert!(op.lambda0().cholesky().is_ok());
    }

    #[test]
    fn gradient_matches_differences(inst in instance(), seed in any::<u64>()) {
        let grid = Grid::new(8).unwrap();
        for spec in inst.specs(&grid) {
            let t = TargetMeasure::new(spec, &grid).unwrap();
            let mut rng = seeded_rng(seed);
            let x: Vec<f64> = (0..t.size()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut g = vec![0.0; x.len()];
            t.grad_unknowns(&x, &mut g);
            let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for i in 0..x.len() {
                let h = 1e-5;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (t.log_density_unknowns(&xp) - t.log_density_unknowns(&xm)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + gmax), "component {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn potential_derivatives_match_differences(a in 0.2f64..3.0, b in 0.0f64..3.0, x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let v = Potential::double_well(2, a, b).unwrap();
        let fd = pathlangevin::model::finite_difference_derivatives(&|p: &[f64]| v.value(p), &x, 1e-4).unwrap();
        let g = v.grad(&x);
        for k in 0..2 {
            prop_assert!((g[k] - fd.grad[k]).abs() <= 1e-6 * (1.0 + g[k].abs()));
        }
        let h = v.hess(&x);
        prop_assert!((&h - &fd.hess).amax() <= 1e-4 * (1.0 + h.amax()));
    }

    #[test]
    fn grid_weights_sum_to_one(m in 2usize..2000) {
        let grid = Grid::new(m).unwrap();
        let s: f64 = grid.weights().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-13);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 1..200),
        b in prop::collection::vec(-5.0f64..5.0, 1..200),
    ) {
        let d1 = ks_distance(&a, &b);
        let d2 = ks_distance(&b, &a);
        prop_assert!((0.0..=1.0).contains(&d1));
        prop_assert_eq!(d1, d2);
        prop_assert_eq!(ks_distance(&a, &a), 0.0);
    }

    #[test]
    fn batch_standard_error_is_scale_equivariant(
        series in prop::collection::vec(-10.0f64..10.0, 400..800),
        power in -4i32..4,
        s in -10.0f64..10.0,
    ) {
        let base = ergodic_average(&series, 0, 20).unwrap();
        // Powers of two scale without rounding.
        let p = 2f64.powi(power);
        let scaled: Vec<f64> = series.iter().map(|v| v * p).collect();
        let e = ergodic_average(&scaled, 0, 20).unwrap();
        prop_assert_eq!(e.value, base.value * p);
        prop_assert_eq!(e.std_error, base.std_error * p);

        let scaled: Vec<f64> = series.iter().map(|v| v * s).collect();
        let e = ergodic_average(&scaled, 0, 20).unwrap();
        prop_assert!((e.value - base.value * s).abs() <= 1e-12 * (1.0 + (base.value * s).abs()) * 10.0);
        prop_assert!((e.std_error - base.std_error * s.abs()).abs() <= 1e-12 * (1.0 + base.std_error * s.abs()) * 10.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn chains_are_deterministic(inst in instance(), seed in any::<u64>(), pre in any::<bool>()) {
        let grid = Grid::new(8).unwrap();
        for spec in inst.specs(&grid) {
            let t = TargetMeasure::new(spec, &grid).unwrap();
            let scheme = if pre { Scheme::Preconditioned } else { Scheme::SemiImplicit { theta: 0.5 } };
            let mut cfg = SamplerConfig::new(scheme, 0.001, 200);
            cfg.record_paths = true;
            let a = run_chain(&t, &cfg, seed, None, &[]).unwrap();
            let b = run_chain(&t, &cfg, seed, None, &[]).unwrap();
            prop_assert_eq!(&a.final_state.x, &b.final_state.x);
            prop_assert_eq!(a.samples.len(), b.samples.len());
            for (p, q) in a.samples.iter().zip(&b.samples) {
                prop_assert_eq!(p.values(), q.values());
            }
        }
    }

    #[test]
    fn importance_effective_size_in_range(inst in instance(), seed in any::<u64>()) {
        let grid = Grid::new(8).unwrap();
        let spec = inst.specs(&grid).swap_remove(1);
        let t = TargetMeasure::new(spec, &grid).unwrap();
        let e = importance_bridge(&t, 200, &mut seeded_rng(seed)).unwrap();
        let n_eff = e.effective_size();
        prop_assert!(n_eff > 0.0 && n_eff <= 200.0 + 1e-9);
        prop_assert!(e.log_weights().iter().all(|w| w.is_finite()));
    }
}
