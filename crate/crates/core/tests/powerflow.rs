mod common;

use common::gauss_seidel;
use gridmp_core::grid::{build_synthetic_grid, Branch, Bus, BusRole, Grid, GridKind};
use gridmp_core::powerflow::{build_admittance, solve_power_flow, DEFAULT_MAX_ITER, DEFAULT_TOL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn compare(grid: &Grid, p: &[f64], q: &[f64]) {
    let sol = solve_power_flow(grid, p, q, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(sol.converged, "{:?}", sol.diagnostic);
    let oracle = gauss_seidel(grid, p, q);
    for (i, vo) in oracle.iter().enumerate() {
        assert!((sol.v_mag[i] - vo.norm()).abs() < 1e-8, "bus {i} magnitude");
        assert!((sol.v_ang[i] - vo.arg()).abs() < 1e-8, "bus {i} angle");
    }
}

#[test]
fn two_bus_matches_gauss_seidel() {
    let grid = Grid {
        buses: vec![
            Bus { id: 0, vn_pu: 1.0, role: BusRole::Slack },
            Bus { id: 1, vn_pu: 1.0, role: BusRole::Pq },
        ],
        branches: vec![Branch {
            id: 0,
            from: 0,
            to: 1,
            r_pu: 0.0,
            x_pu: 0.1,
            closed: true,
            transformer: false,
            shift_rad: 0.0,
        }],
        slack: 0,
    };
    compare(&grid, &[0.0, 0.1], &[0.0, 0.0]);
}

#[test]
fn random_small_grids_match_gauss_seidel() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..10u64 {
        let n = rng.gen_range(3..=15);
        let kind = if case % 2 == 0 { GridKind::Radial } else { GridKind::Meshed };
        let grid = build_synthetic_grid(kind, n, case).unwrap();
        let p: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { rng.gen_range(0.0..0.05) }).collect();
        let q: Vec<f64> = p.iter().map(|v| v * rng.gen_range(0.2..0.5)).collect();
        compare(&grid, &p, &q);
    }
}

#[test]
fn large_grid_with_size_scaled_loads_converges() {
    let scale = 15.0 / 248.0;
    for (kind, seed) in [(GridKind::Radial, 1), (GridKind::Meshed, 2)] {
        let grid = build_synthetic_grid(kind, 248, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..248).map(|i| if i == 0 { 0.0 } else { scale * rng.gen_range(0.0..0.1) }).collect();
        let q: Vec<f64> = p.iter().map(|v| 0.5 * v).collect();
        let sol = solve_power_flow(&grid, &p, &q, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(sol.converged, "{kind}: {:?}", sol.diagnostic);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solution_is_equivariant_under_relabeling(seed in 0u64..1000, n in 3usize..12) {
        let grid = build_synthetic_grid(GridKind::Meshed, n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { rng.gen_range(0.0..0.05) }).collect();
        let q: Vec<f64> = p.iter().map(|v| 0.3 * v).collect();
        // keep the slack at 0, shuffle the rest
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (2..n).rev() {
            let j = rng.gen_range(1..=i);
            perm.swap(i, j);
        }
        let mut relabeled = grid.clone();
        for br in relabeled.branches.iter_mut() {
            br.from = perm[br.from];
            br.to = perm[br.to];
        }
        let mut pp = vec![0.0; n];
        let mut qp = vec![0.0; n];
        for i in 0..n {
            pp[perm[i]] = p[i];
            qp[perm[i]] = q[i];
        }
        let a = solve_power_flow(&grid, &p, &q, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let b = solve_power_flow(&relabeled, &pp, &qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        prop_assert!(a.converged && b.converged);
        for i in 0..n {
            prop_assert!((a.v_mag[i] - b.v_mag[perm[i]]).abs() < 1e-9);
            prop_assert!((a.v_ang[i] - b.v_ang[perm[i]]).abs() < 1e-9);
        }
    }

    #[test]
    fn converged_solutions_reproduce_injections(seed in 0u64..1000, n in 2usize..20) {
        let grid = build_synthetic_grid(GridKind::Radial, n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.05)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.02)).collect();
        let sol = solve_power_flow(&grid, &p, &q, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        prop_assert!(sol.converged);
        let s = build_admittance(&grid).unwrap().injections(&sol.voltages());
        for i in 1..n {
            prop_assert!((s[i].re + p[i]).abs() < DEFAULT_TOL);
            prop_assert!((s[i].im + q[i]).abs() < DEFAULT_TOL);
        }
    }
}
