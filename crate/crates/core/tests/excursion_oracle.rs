use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use surface_glm::inference::excursion_set;
use surface_glm::seed;

const P: [f64; 5] = [0.999, 0.99, 0.9, 0.5, 0.1];

/// Largest subset whose product of exceedance probabilities is at least `1 − α`.
fn brute_force(alpha: f64) -> Vec<bool> {
    let mut best: Option<(usize, f64, u32)> = None;
    for mask in 0u32..32 {
        let prob: f64 = (0..5)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| P[i])
            .product();
        let size = mask.count_ones() as usize;
        if prob >= 1.0 - alpha && best.is_none_or(|(s, p, _)| size > s || (size == s && prob > p)) {
            best = Some((size, prob, mask));
        }
    }
    let m = best.unwrap().2;
    (0..5).map(|i| m >> i & 1 == 1).collect()
}

#[test]
fn matches_exhaustive_enumeration() {
    let z = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<f64> = P.iter().map(|&p| z.inverse_cdf(p)).collect();
    for alpha in [0.01, 0.05, 0.1] {
        let want = brute_force(alpha);
        for s in 0..10u64 {
            let mut rng = seed::rng(s, &[99]);
            let draws: Vec<Vec<f64>> = (0..100_000)
                .map(|_| {
                    means
                        .iter()
                        .map(|m| {
                            m + {
                                let e: f64 = StandardNormal.sample(&mut rng);
                                e
                            }
                        })
                        .collect()
                })
                .collect();
            let got = excursion_set(&draws, 0.0, alpha).unwrap();
            assert_eq!(got.active, want, "alpha {alpha} seed {s}");
        }
    }
}
