use super::*;
use crate::cov::Kernel;
use crate::geo::{build_neighbor_dag, order_locations, LocationSet, NeighborScheme, OrderStrategy};
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEQ: Execution = Execution::Sequential;

fn points(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
}

fn dag_for(pts: &[Point], m: usize) -> Arc<NeighborDag> {
    let locs = LocationSet::new(pts.to_vec()).unwrap();
    let ord = order_locations(&locs, OrderStrategy::ByCoordSum);
    Arc::new(build_neighbor_dag(&locs, &ord, m, NeighborScheme::Nearest, SEQ).unwrap())
}

fn exp_cross(sigma2: f64, phi: f64) -> CrossCovariance {
    CrossCovariance::univariate(sigma2, Kernel::exponential(phi).unwrap()).unwrap()
}

fn bivariate_cross() -> CrossCovariance {
    let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, -0.4, 0.7]);
    CrossCovariance::new(
        a,
        vec![Kernel::exponential(3.0).unwrap(), Kernel::matern(5.0, 1.5).unwrap()],
    )
    .unwrap()
}

fn dense_mvn_logpdf(c: &DMatrix<f64>, x: &[f64]) -> f64 {
    let chol = c.clone().cholesky().unwrap();
    let v = DVector::from_column_slice(x);
    let z = chol.l().solve_lower_triangular(&v).unwrap();
    let ld: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + z.norm_squared())
}

/// Dense `(I − B)` and block-diagonal `F` in position order.
fn dense_b_f(f: &NngpFactors) -> (DMatrix<f64>, DMatrix<f64>) {
    let (k, q) = (f.len(), f.q());
    let mut ib = DMatrix::identity(k * q, k * q);
    let mut fm = DMatrix::zeros(k * q, k * q);
    for i in 0..k {
        let nf = f.node(i);
        for (l, &n) in f.dag().neighbors(i).iter().enumerate() {
            let blk = -nf.b_block(l);
            ib.view_mut((i * q, n * q), (q, q)).copy_from(&blk);
        }
        fm.view_mut((i * q, i * q), (q, q)).copy_from(&nf.f);
    }
    (ib, fm)
}

fn position_coords_parent(f: &NngpFactors, cross: &CrossCovariance) -> DMatrix<f64> {
    cross.cov_matrix_jittered(f.dag().coords())
}

#[test]
fn first_node_is_unconditioned() {
    let pts = points(10, 1);
    let dag = dag_for(&pts, 3);
    let cross = exp_cross(2.0, 4.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    assert_eq!(f.node(0).b.ncols(), 0);
    assert_relative_eq!(f.node(0).f[(0, 0)], 2.0 + cross.jitter(), max_relative = 1e-15);
}

#[test]
fn two_point_bivariate_conditional() {
    let pts = vec![[0.0, 0.0], [0.3, 0.4]];
    let dag = Arc::new(NeighborDag::from_lists(pts, vec![vec![], vec![0]]).unwrap());
    let (s2, phi) = (1.7, 2.0);
    let cross = exp_cross(s2, phi);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let rho = (-phi * 0.5f64).exp();
    let c0 = s2 + cross.jitter();
    let b = s2 * rho / c0;
    assert_relative_eq!(f.node(1).b[(0, 0)], b, max_relative = 1e-12);
    assert_relative_eq!(f.node(1).f[(0, 0)], c0 - b * s2 * rho, max_relative = 1e-12);
    // without jitter these collapse to ρ and σ²(1 − ρ²)
    assert_relative_eq!(f.node(1).b[(0, 0)], rho, max_relative = 1e-9);
    assert_relative_eq!(f.node(1).f[(0, 0)], s2 * (1.0 - rho * rho), max_relative = 1e-9);

    let p = assemble_precision(&f, SEQ).to_dense();
    let (b2, f1, f2) = (f.node(1).b[(0, 0)], f.node(0).f[(0, 0)], f.node(1).f[(0, 0)]);
    let expect = DMatrix::from_row_slice(2, 2, &[1.0 / f1 + b2 * b2 / f2, -b2 / f2, -b2 / f2, 1.0 / f2]);
    assert!((p - expect).amax() < 1e-12);
}

#[test]
fn full_conditioning_matches_sequential_cholesky() {
    let pts = points(20, 2);
    let dag = dag_for(&pts, 19);
    let cross = exp_cross(1.0, 6.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let c = position_coords_parent(&f, &cross);
    let l = c.cholesky().unwrap().l();
    for i in 0..20 {
        // conditional variance of node i given all predecessors is L_ii²
        assert_relative_eq!(f.node(i).f[(0, 0)], l[(i, i)] * l[(i, i)], max_relative = 1e-8);
    }
}

#[test]
fn precision_matches_dense_product() {
    let pts = points(30, 3);
    let dag = dag_for(&pts, 5);
    let cross = exp_cross(1.3, 5.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let p = assemble_precision(&f, SEQ);
    let (ib, fm) = dense_b_f(&f);
    let expect = ib.transpose() * fm.try_inverse().unwrap() * ib;
    assert!((p.to_dense() - &expect).amax() < 1e-10 * expect.amax());
    assert!(p.nnz_offdiag_blocks() <= 30 * 5 * 6 / 2);
}

#[test]
fn multivariate_precision_and_density() {
    let pts = points(25, 4);
    let dag = dag_for(&pts, 4);
    let cross = bivariate_cross();
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let p = assemble_precision(&f, SEQ);
    let (ib, fm) = dense_b_f(&f);
    let expect = ib.transpose() * fm.try_inverse().unwrap() * ib;
    assert!((p.to_dense() - &expect).amax() < 1e-9 * expect.amax());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w: Vec<f64> = (0..50).map(|_| rng.random::<f64>() - 0.5).collect();
    let lp = log_density(&f, &w, SEQ).unwrap();
    let l0 = log_density(&f, &[0.0; 50], SEQ).unwrap();
    assert_relative_eq!(lp - l0, -0.5 * p.quad_form(&w), max_relative = 1e-9);
}

#[test]
fn log_density_exact_at_full_conditioning() {
    let pts = points(50, 5);
    let dag = dag_for(&pts, 49);
    let cross = exp_cross(0.8, 3.0);
    let f = compute_factors(&dag, &cross, Execution::Parallel).unwrap();
    let c = position_coords_parent(&f, &cross);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let w: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let a = log_density(&f, &w, SEQ).unwrap();
        let b = dense_mvn_logpdf(&c, &w);
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    assert!(kl_divergence(&f, &cross).unwrap() < 1e-8);
}

#[test]
fn single_node_density() {
    let dag = Arc::new(NeighborDag::from_lists(vec![[0.2, 0.2]], vec![vec![]]).unwrap());
    let cross = exp_cross(2.5, 1.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let v = 2.5 + cross.jitter();
    let expect = -0.5 * (2.0 * std::f64::consts::PI * v).ln();
    assert_relative_eq!(log_density(&f, &[0.0], SEQ).unwrap(), expect, max_relative = 1e-14);
}

#[test]
fn dimension_mismatch_is_reported() {
    let dag = dag_for(&points(5, 6), 2);
    let f = compute_factors(&dag, &exp_cross(1.0, 1.0), SEQ).unwrap();
    assert!(matches!(
        log_density(&f, &[0.0; 4], SEQ),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn log_det_identity() {
    let pts = points(60, 7);
    let dag = dag_for(&pts, 6);
    let cross = exp_cross(1.0, 8.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let p = assemble_precision(&f, SEQ).to_dense();
    let ld: f64 = p.cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    assert!((-ld - f.log_det()).abs() < 1e-8);
}

#[test]
fn schur_domination() {
    let pts = points(40, 8);
    let dag = dag_for(&pts, 5);
    let cross = bivariate_cross();
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let mut c0 = cross.marginal();
    for d in 0..2 {
        c0[(d, d)] += cross.jitter();
    }
    for i in 0..40 {
        let diff = &c0 - &f.node(i).f;
        let eig = diff.symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-10);
    }
}

#[test]
fn query_factors_match_dense_conditional() {
    let pts = points(100, 10);
    let dag = dag_for(&pts, 8);
    let cross = exp_cross(1.4, 4.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    for u in points(20, 11) {
        let (nf, nb) = query_factors(&f, &u).unwrap();
        assert_eq!(nb.len(), 8);
        let nc: Vec<Point> = nb.iter().map(|&p| *dag.coord(p)).collect();
        let cnn = cross.cov_matrix_jittered(&nc);
        let cun = cross.cov_matrix(&[u], &nc);
        let inv = cnn.try_inverse().unwrap();
        let b = &cun * &inv;
        let fu = cross.marginal()[(0, 0)] + cross.jitter() - (&b * cun.transpose())[(0, 0)];
        assert!((&nf.b - &b).amax() < 1e-9);
        assert_relative_eq!(nf.f[(0, 0)], fu, max_relative = 1e-8);
    }
}

#[test]
fn query_single_neighbor_closed_form() {
    let pts = vec![[0.0, 0.0], [5.0, 5.0]];
    let dag = Arc::new(NeighborDag::from_lists(pts, vec![vec![], vec![0]]).unwrap());
    let cross = exp_cross(1.0, 1.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let (nf, nb) = query_factors(&f, &[0.6, 0.8]).unwrap();
    assert_eq!(nb, vec![0]);
    let rho = (-1.0f64).exp();
    assert_relative_eq!(nf.b[(0, 0)], rho, max_relative = 1e-9);
    assert_relative_eq!(nf.f[(0, 0)], 1.0 - rho * rho, max_relative = 1e-9);
}

#[test]
fn query_near_reference_concentrates() {
    let pts = points(30, 12);
    let dag = dag_for(&pts, 5);
    let cross = exp_cross(1.0, 3.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let target = *dag.coord(7);
    let u = [target[0] + 1e-9, target[1]];
    let (nf, nb) = query_factors(&f, &u).unwrap();
    assert_eq!(nb[0], 7);
    assert!(nf.f[(0, 0)] < 1e-6);
    assert!((nf.b[(0, 0)] - 1.0).abs() < 1e-3);
    assert!(matches!(query_factors(&f, &target), Err(Error::QueryOnReference(_))));
}

#[test]
fn nngp_cov_full_conditioning_is_parent() {
    let pts = points(25, 13);
    let dag = dag_for(&pts, 24);
    let cross = exp_cross(1.1, 5.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let cache = CovarianceCache::new(&f);
    for i in 0..25 {
        for j in 0..25 {
            let c = cache.cov(&pts[i], &pts[j]).unwrap()[(0, 0)];
            let mut parent = cross.cross_cov(&pts[i], &pts[j])[(0, 0)];
            if i == j {
                parent += cross.jitter();
            }
            assert!((c - parent).abs() < 1e-9, "{i} {j}");
        }
    }
    let s0 = *dag.coord(0);
    assert_relative_eq!(
        nngp_cov(&f, &s0, &s0).unwrap()[(0, 0)],
        1.1 + cross.jitter(),
        max_relative = 1e-14
    );
}

#[test]
fn cached_blocks_match_dense_recursion_and_precision_inverse() {
    let pts = points(40, 14);
    let dag = dag_for(&pts, 4);
    let cross = bivariate_cross();
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let dense = dense_nngp_covariance(&f);
    let inv = assemble_precision(&f, SEQ).to_dense().try_inverse().unwrap();
    assert!((&dense - &inv).amax() < 1e-8);
    let cache = CovarianceCache::new(&f);
    for &(i, j) in &[(39, 0), (0, 39), (17, 17), (22, 5), (3, 30)] {
        let blk = cache.reference_block(i, j);
        let d = dense.view((i * 2, j * 2), (2, 2)).into_owned();
        assert!((blk - d).amax() < 1e-12);
    }
}

#[test]
fn nngp_cov_far_query_decouples() {
    let pts = points(30, 15);
    let dag = dag_for(&pts, 5);
    let cross = exp_cross(1.0, 5.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let far = [40.0, 40.0];
    let cache = CovarianceCache::new(&f);
    assert!(cache.cov(&far, &pts[3]).unwrap()[(0, 0)].abs() < 1e-12);
    assert!(cache.cov(&far, &[41.0, 40.0]).unwrap()[(0, 0)].abs() < 1e-2);
    assert_relative_eq!(cache.cov(&far, &far).unwrap()[(0, 0)], 1.0, max_relative = 1e-8);
}

#[test]
fn nngp_cov_query_query_matches_generative_oracle() {
    // joint covariance of (w_S, w_u, w_v) from the generative definition
    let pts = points(15, 16);
    let dag = dag_for(&pts, 3);
    let cross = exp_cross(1.0, 2.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let cs = dense_nngp_covariance(&f);
    let (u, v) = ([0.41, 0.52], [0.43, 0.55]);
    let (fu, nu) = query_factors(&f, &u).unwrap();
    let (fv, nv) = query_factors(&f, &v).unwrap();
    let sub = |a: &[usize], b: &[usize]| {
        DMatrix::from_fn(a.len(), b.len(), |r, c| cs[(a[r], b[c])])
    };
    let expect_uv = &fu.b * sub(&nu, &nv) * fv.b.transpose();
    let cache = CovarianceCache::new(&f);
    assert_relative_eq!(cache.cov(&u, &v).unwrap()[(0, 0)], expect_uv[(0, 0)], max_relative = 1e-10);
    let expect_uu = (&fu.b * sub(&nu, &nu) * fu.b.transpose())[(0, 0)] + fu.f[(0, 0)];
    assert_relative_eq!(cache.cov(&u, &u).unwrap()[(0, 0)], expect_uu, max_relative = 1e-10);
    let s = *dag.coord(4);
    let expect_us = (&fu.b * sub(&nu, &[4]))[(0, 0)];
    assert_relative_eq!(cache.cov(&u, &s).unwrap()[(0, 0)], expect_us, max_relative = 1e-10);
    assert_relative_eq!(cache.cov(&s, &u).unwrap()[(0, 0)], expect_us, max_relative = 1e-10);
}

#[test]
fn covariance_is_continuous_off_ties() {
    let pts = points(50, 17);
    let dag = dag_for(&pts, 6);
    let cross = exp_cross(1.0, 4.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let cache = CovarianceCache::new(&f);
    let u = [0.3712, 0.6281];
    let s = pts[11];
    let base = cache.cov(&u, &s).unwrap()[(0, 0)];
    let mut prev = f64::INFINITY;
    for e in 3..10 {
        let h = 10f64.powi(-e);
        let c = cache.cov(&[u[0] + h, u[1] - h], &s).unwrap()[(0, 0)];
        let gap = (c - base).abs();
        assert!(gap <= prev + 1e-15);
        prev = gap;
    }
    assert!(prev < 1e-8);
}

#[test]
fn marginalizing_a_leaf_matches_subgraph() {
    let pts = points(12, 18);
    let dag = dag_for(&pts, 3);
    let cross = exp_cross(1.0, 3.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let leaf = (0..12).rev().find(|&p| dag.reverse(p).is_empty()).unwrap();
    let sub = Arc::new(dag.without_leaf(leaf).unwrap());
    let fs = compute_factors(&sub, &cross, SEQ).unwrap();
    let full = dense_nngp_covariance(&f);
    let keep: Vec<usize> = (0..12).filter(|&p| p != leaf).collect();
    let marg = DMatrix::from_fn(11, 11, |r, c| full[(keep[r], keep[c])]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..11).map(|_| rng.random::<f64>() - 0.5).collect();
    let a = log_density(&fs, &w, SEQ).unwrap();
    assert!((a - dense_mvn_logpdf(&marg, &w)).abs() < 1e-8);
}

#[test]
fn query_density_uses_query_factors() {
    let pts = points(20, 19);
    let mut dag = (*dag_for(&pts, 3)).clone();
    let qs = points(4, 20);
    dag.attach_queries(&qs, SEQ).unwrap();
    let dag = Arc::new(dag);
    let cross = exp_cross(1.0, 3.0);
    let f = compute_factors(&dag, &cross, SEQ).unwrap();
    let w_s = vec![0.1; 20];
    let w_u = vec![0.2, -0.1, 0.0, 0.3];
    let mut expect = 0.0;
    for (j, u) in qs.iter().enumerate() {
        let (nf, nb) = query_factors(&f, u).unwrap();
        assert_eq!(nb, dag.query_neighbors(j));
        let mean = (&nf.b * gather(&w_s, &nb, 1))[0];
        let v = nf.f[(0, 0)];
        expect += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (w_u[j] - mean).powi(2) / v);
    }
    let got = log_density_queries(&f, &w_s, &w_u, SEQ).unwrap();
    assert_relative_eq!(got, expect, max_relative = 1e-12);
}

#[test]
fn kl_is_nonnegative_and_shrinks() {
    let pts = points(60, 21);
    let cross = CrossCovariance::univariate(1.0, Kernel::damped_cosine(10.0, 0.099).unwrap()).unwrap();
    let kl = |m: usize| {
        let f = compute_factors(&dag_for(&pts, m), &cross, SEQ).unwrap();
        kl_divergence(&f, &cross).unwrap()
    };
    let (k2, k10, kfull) = (kl(2), kl(10), kl(59));
    assert!(k2 >= 0.0 && k10 >= 0.0);
    assert!(k10 < k2);
    assert!(kfull < 1e-8);
}

#[test]
fn parallel_and_sequential_agree() {
    let pts = points(300, 22);
    let dag = dag_for(&pts, 10);
    let cross = exp_cross(1.0, 6.0);
    let a = compute_factors(&dag, &cross, SEQ).unwrap();
    let b = compute_factors(&dag, &cross, Execution::Parallel).unwrap();
    let w: Vec<f64> = (0..300).map(|i| (i as f64 * 0.1).sin()).collect();
    assert_eq!(
        log_density(&a, &w, SEQ).unwrap().to_bits(),
        log_density(&b, &w, Execution::Parallel).unwrap().to_bits()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn precision_sparsity_bound(seed in 0u64..1000, k in 5usize..100, m in 1usize..10) {
        let pts = points(k, seed);
        let dag = dag_for(&pts, m);
        let f = compute_factors(&dag, &exp_cross(1.0, 5.0), SEQ).unwrap();
        let p = assemble_precision(&f, SEQ);
        prop_assert!(p.nnz_offdiag_blocks() <= k * m * (m + 1) / 2);
        // every stored block is justified by a shared neighbor set
        for j in 0..k {
            for (i, _) in p.column(j) {
                let ok = (0..k).any(|l| {
                    let inset = |x: usize| x == l || dag.neighbors(l).contains(&x);
                    inset(*i) && inset(j)
                });
                prop_assert!(ok);
            }
        }
    }

    #[test]
    fn log_density_quadratic_form(seed in 0u64..1000, m in 1usize..8) {
        let pts = points(35, seed);
        let dag = dag_for(&pts, m);
        let f = compute_factors(&dag, &exp_cross(0.7, 4.0), SEQ).unwrap();
        let p = assemble_precision(&f, SEQ);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let w: Vec<f64> = (0..35).map(|_| rng.random::<f64>() - 0.5).collect();
        let diff = log_density(&f, &w, SEQ).unwrap() - log_density(&f, &[0.0; 35], SEQ).unwrap();
        let qf = -0.5 * p.quad_form(&w);
        prop_assert!((diff - qf).abs() <= 1e-9 * qf.abs().max(1.0));
    }

    #[test]
    fn kl_nonnegative(seed in 0u64..1000, m in 1usize..6) {
        let pts = points(30, seed);
        let cross = exp_cross(1.0, 3.0);
        let f = compute_factors(&dag_for(&pts, m), &cross, SEQ).unwrap();
        prop_assert!(kl_divergence(&f, &cross).unwrap() >= 0.0);
    }
}
