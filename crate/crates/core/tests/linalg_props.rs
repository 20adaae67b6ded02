use hprobe::linalg::{self, Basis, PcaModel, Provenance};
use hprobe::probes::random_basis;
use hprobe::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: &mut rng::Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| {
        let v: f64 = StandardNormal.sample(r);
        v
    })
}

#[test]
fn pca_components_solve_the_covariance_eigenproblem() {
    for seed in 0..3 {
        let mut r = rng::seeded(seed);
        // Anisotropic data so the spectrum is well separated.
        let scales = DVector::from_fn(64, |j, _| 1.0 + 10.0 * (-(j as f64) / 6.0).exp());
        let mut x = gaussian(&mut r, 500, 64);
        for j in 0..64 {
            x.column_mut(j).scale_mut(scales[j]);
            x.column_mut(j).add_scalar_mut(j as f64);
        }
        let pca = PcaModel::fit(&x, 10).unwrap();
        let mean = x.row_mean();
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= &mean;
        }
        let cov = xc.tr_mul(&xc) / 499.0;
        for c in 0..10 {
            let v = pca.components.row(c).transpose();
            let lam = pca.explained_variance[c];
            let res = (&cov * &v - &v * lam).norm();
            assert!(res <= 1e-5, "seed {seed} component {c}: residual {res:e}");
            if c > 0 {
                assert!(lam <= pca.explained_variance[c - 1]);
            }
        }
        let gram = &pca.components * pca.components.transpose();
        assert!((gram - DMatrix::identity(10, 10)).amax() < 1e-10);
        assert!((pca.total_variance - cov.trace()).abs() < 1e-8 * cov.trace());
    }
}

// Brute-force minimizer of the weighted ridge objective for one feature,
// zooming a grid around the best point.
fn grid_ridge(x: &[f64], y: &[f64], wts: &[f64], lambda: f64) -> (f64, f64) {
    let mean = wts.iter().sum::<f64>() / wts.len() as f64;
    let obj = |w: f64, b: f64| {
        x.iter()
            .zip(y)
            .zip(wts)
            .map(|((xi, yi), wi)| wi / mean * (w * xi + b - yi).powi(2))
            .sum::<f64>()
            + lambda * w * w
    };
    let (mut cw, mut cb, mut span) = (0.0, 0.0, 20.0);
    for _ in 0..40 {
        let mut best = (f64::INFINITY, cw, cb);
        for i in -10..=10 {
            for j in -10..=10 {
                let (w, b) = (cw + span * i as f64 / 10.0, cb + span * j as f64 / 10.0);
                let o = obj(w, b);
                if o < best.0 {
                    best = (o, w, b);
                }
            }
        }
        (cw, cb) = (best.1, best.2);
        span *= 0.5;
    }
    (cw, cb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ridge_matches_grid_search(seed in any::<u64>(), lambda in 0.01f64..5.0, weighted in any::<bool>()) {
        let mut r = rng::seeded(seed);
        let n = 30;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.5 * v - 0.7 + r.random_range(-0.5..0.5)).collect();
        let wts: Vec<f64> = (0..n).map(|_| if weighted { r.random_range(0.1..3.0) } else { 1.0 }).collect();
        let fit = linalg::ridge_solve(
            &DMatrix::from_column_slice(n, 1, &x),
            &DVector::from_column_slice(&y),
            lambda,
            Some(&DVector::from_column_slice(&wts)),
        ).unwrap();
        let (gw, gb) = grid_ridge(&x, &y, &wts, lambda);
        prop_assert!((fit.w[0] - gw).abs() < 1e-3, "w {} vs {}", fit.w[0], gw);
        prop_assert!((fit.b - gb).abs() < 1e-3, "b {} vs {}", fit.b, gb);
    }

    #[test]
    fn ablation_leaves_only_the_orthogonal_part(seed in any::<u64>(), d in 3usize..40, r_frac in 0.0f64..1.0) {
        let r = ((d as f64 * r_frac) as usize).clamp(1, d);
        let h = random_basis(d, r, seed).unwrap();
        let mut g = rng::seeded(seed ^ 1);
        let x = gaussian(&mut g, d, 1).column(0).into_owned();
        let a = linalg::ablate_vector(&x, &h).unwrap();
        prop_assert!(h.matrix().tr_mul(&a).amax() < 1e-10);
        prop_assert!(a.norm() <= x.norm() + 1e-12);
        let again = linalg::ablate_vector(&a, &h).unwrap();
        prop_assert!((&again - &a).amax() < 1e-10);
        let p = h.project(&x).unwrap();
        prop_assert!((&p + &a - &x).amax() < 1e-10);
        prop_assert!(p.dot(&a).abs() < 1e-9);
        let rows = DMatrix::from_fn(3, d, |i, j| x[j] * (i + 1) as f64);
        let ar = linalg::ablate_rows(&rows, &h).unwrap();
        prop_assert!((ar.row(0).transpose() - &a).amax() < 1e-10);
    }

    #[test]
    fn similarity_is_symmetric_and_rotation_invariant(seed in any::<u64>(), d in 4usize..30, ra in 1usize..4, rb in 1usize..4) {
        let a = random_basis(d, ra, seed).unwrap();
        let b = random_basis(d, rb, seed.wrapping_add(1)).unwrap();
        let s = linalg::subspace_similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - linalg::subspace_similarity(&b, &a).unwrap()).abs() < 1e-10);
        prop_assert!((linalg::subspace_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-10);
        // Same span, different basis vectors.
        let q = random_basis(ra, ra, seed ^ 7).unwrap();
        let a2 = Basis::from_orthonormal(a.matrix() * q.matrix(), Provenance::Random).unwrap();
        prop_assert!((linalg::subspace_similarity(&a2, &b).unwrap() - s).abs() < 1e-9);
        // A shared orthogonal map of the ambient space.
        let o = random_basis(d, d, seed ^ 9).unwrap();
        let ra2 = Basis::from_orthonormal(o.matrix() * a.matrix(), Provenance::Random).unwrap();
        let rb2 = Basis::from_orthonormal(o.matrix() * b.matrix(), Provenance::Random).unwrap();
        prop_assert!((linalg::subspace_similarity(&ra2, &rb2).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn orthonormalize_keeps_the_span(seed in any::<u64>(), d in 3usize..20, k in 1usize..5) {
        let mut g = rng::seeded(seed);
        let k = k.min(d);
        let cols = gaussian(&mut g, d, k);
        let h = linalg::orthonormalize(&cols, Provenance::Probe).unwrap();
        prop_assert_eq!(h.rank(), k);
        for c in 0..k {
            let v = cols.column(c).into_owned();
            prop_assert!(linalg::ablate_vector(&v, &h).unwrap().norm() < 1e-9 * v.norm().max(1.0));
        }
    }

    #[test]
    fn pearson_is_bounded(seed in any::<u64>(), n in 2usize..50) {
        let mut g = rng::seeded(seed);
        let a: Vec<f64> = (0..n).map(|_| g.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| g.random_range(-5.0..5.0)).collect();
        let (p, _) = linalg::pearson(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&p));
        let (self_p, ok) = linalg::pearson(&a, &a);
        prop_assert!(!ok || (self_p - 1.0).abs() < 1e-12);
    }
}
