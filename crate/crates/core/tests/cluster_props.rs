use ae_core::cluster::{
    default_candidates, round_solution, select_num_groups, selection_density, solve_sdp, Partition, SdpProblem,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = rng.random::<f64>();
            t[i][j] = v;
            t[j][i] = v;
        }
    }
    t
}

fn random_partition(n: usize, rng: &mut ChaCha8Rng) -> Partition {
    let m = rng.random_range(1..=n);
    let mut groups = vec![Vec::new(); m];
    for u in 0..n {
        groups[if u < m { u } else { rng.random_range(0..m) }].push(u as u32);
    }
    Partition::new(groups)
}

/// `<T + lambda I, X_P>` for the normalized block matrix of `p`.
fn partition_objective(t: &[Vec<f64>], lambda: f64, p: &Partition) -> f64 {
    p.groups
        .iter()
        .map(|g| {
            let s: f64 = g.iter().flat_map(|&u| g.iter().map(move |&v| t[u as usize][v as usize])).sum();
            s / g.len() as f64 + lambda
        })
        .sum()
}

/// All set partitions of `0..n`.
fn set_partitions(n: usize) -> Vec<Vec<Vec<u32>>> {
    let mut out: Vec<Vec<Vec<u32>>> = vec![vec![]];
    for u in 0..n as u32 {
        let mut next = Vec::new();
        for p in &out {
            for g in 0..p.len() {
                let mut q = p.clone();
                q[g].push(u);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![u]);
            next.push(q);
        }
        out = next;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn solutions_are_feasible_and_dominate_partitions(n in 2usize..8, seed in any::<u64>(), lambda in -1.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_sym(n, &mut rng);
        let sol = solve_sdp(&SdpProblem::new(t.clone(), lambda)).unwrap();
        prop_assert!(sol.is_feasible(), "row {} min {} eig {}", sol.row_sum_residual, sol.min_entry, sol.min_eigenvalue);
        for _ in 0..20 {
            let p = random_partition(n, &mut rng);
            let bound = partition_objective(&t, lambda, &p);
            prop_assert!(sol.objective >= bound - 1e-6 * (1.0 + bound.abs()), "sdp {} < partition {}", sol.objective, bound);
        }
    }

    #[test]
    fn rounding_gives_connected_disjoint_cover(n in 1usize..10, seed in any::<u64>(), c in 1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_sym(n, &mut rng).into_iter().map(|r| r.into_iter().map(|v| v * 2.0 / n as f64).collect()).collect::<Vec<Vec<f64>>>();
        let p = round_solution(&x, c, n).unwrap();
        p.validate(n).unwrap();
        let thr = c / n as f64 - 1e-9;
        let a = p.assignment();
        for u in 0..n {
            for v in 0..n {
                if u != v && a[u] != a[v] {
                    prop_assert!(x[u][v] < thr && x[v][u] < thr);
                }
            }
        }
        // Each group is connected through entries at or above the threshold.
        for g in &p.groups {
            let mut seen = vec![g[0]];
            let mut frontier = vec![g[0]];
            while let Some(u) = frontier.pop() {
                for &v in g {
                    if !seen.contains(&v) && x[u as usize][v as usize] >= thr {
                        seen.push(v);
                        frontier.push(v);
                    }
                }
            }
            prop_assert_eq!(seen.len(), g.len());
        }
    }
}

#[test]
fn planted_blocks_match_exhaustive_search() {
    let layouts: [&[usize]; 6] = [&[2, 2], &[3, 3], &[2, 3], &[2, 2, 3], &[3, 4], &[1, 3, 3]];
    for (k, sizes) in layouts.iter().enumerate() {
        let n: usize = sizes.iter().sum();
        let mut label = Vec::new();
        for (b, &s) in sizes.iter().enumerate() {
            label.extend(std::iter::repeat_n(b, s));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut t = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let base = if label[i] == label[j] { 0.9 } else { 0.3 };
                let v = base + 0.05 * rng.random::<f64>();
                t[i][j] = v;
                t[j][i] = v;
            }
        }
        let sel = select_num_groups(&t, &default_candidates(&t)).unwrap();
        let best = set_partitions(n)
            .into_iter()
            .map(Partition::new)
            .max_by(|a, b| selection_density(&t, a).unwrap().total_cmp(&selection_density(&t, b).unwrap()))
            .unwrap();
        let planted = Partition::new(
            (0..sizes.len()).map(|b| (0..n as u32).filter(|&u| label[u as usize] == b).collect()).collect(),
        );
        // A lone task has no intra-block pairs, so the score may fold it into a block.
        if sizes.iter().all(|&s| s >= 2) {
            assert_eq!(best, planted, "layout {sizes:?}");
        }
        assert_eq!(sel.partition, best, "layout {sizes:?}");
    }
}
