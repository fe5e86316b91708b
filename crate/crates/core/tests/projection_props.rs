use ae_core::projection::ProjectionMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_linear(
        seed in any::<u64>(),
        (g, h) in (4usize..40).prop_flat_map(|p| (vec_of(p), vec_of(p))),
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
        d in 1usize..12,
    ) {
        let p = g.len();
        let d = d.min(p);
        let proj = ProjectionMatrix::gaussian(seed, p, d).unwrap();
        let mix: Vec<f64> = g.iter().zip(&h).map(|(x, y)| a * x + b * y).collect();
        let lhs = proj.project(&mix).unwrap();
        let (pg, ph) = (proj.project(&g).unwrap(), proj.project(&h).unwrap());
        for k in 0..d {
            let rhs = a * pg[k] + b * ph[k];
            let scale = 1.0 + lhs[k].abs() + (a * pg[k]).abs() + (b * ph[k]).abs();
            prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * scale, "k={} lhs={} rhs={}", k, lhs[k], rhs);
        }
    }

    #[test]
    fn same_seed_same_bits(seed in any::<u64>(), g in vec_of(25), d in 1usize..10) {
        let a = ProjectionMatrix::gaussian(seed, 25, d).unwrap().project(&g).unwrap();
        let b = ProjectionMatrix::gaussian(seed, 25, d).unwrap().project(&g).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn identity_projection_copies() {
    let g = vec![1.5, -2.0, 0.25];
    assert_eq!(ProjectionMatrix::identity(3).project(&g).unwrap(), g);
}

#[test]
fn squared_norms_concentrate() {
    // 30 unit vectors give 435 pairs; distortion of pairwise differences is
    // checked against eps = sqrt(8 ln(pairs) / d).
    let (p, d, count) = (500, 400, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vs: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let pairs = count * (count - 1) / 2;
    let eps = (8.0 * (pairs as f64).ln() / d as f64).sqrt();
    for seed in 0..20 {
        let proj = ProjectionMatrix::gaussian(seed, p, d).unwrap();
        let pv: Vec<Vec<f64>> = vs.iter().map(|v| proj.project(v).unwrap()).collect();
        let mut within = 0;
        for i in 0..count {
            for j in i + 1..count {
                let orig: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                let got: f64 = pv[i].iter().zip(&pv[j]).map(|(a, b)| (a - b).powi(2)).sum();
                if (got / orig - 1.0).abs() <= eps {
                    within += 1;
                }
            }
        }
        assert!(within as f64 >= 0.9 * pairs as f64, "seed {seed}: {within}/{pairs} pairs within {eps}");
    }
}
