use driftlab::stats::{mid_ranks, wilcoxon_signed_rank, PairedScores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact two-sided p by enumerating every sign assignment of the ranks.
pub fn exact(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, _) = mid_ranks(&abs);
    let total: f64 = ranks.iter().sum();
    let plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_obs = plus.min(total - plus);
    let n = ranks.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s.min(total - s) <= w_obs + 1e-9 {
            hits += 1;
        }
    }
    (w_obs, hits as f64 / (1u64 << n) as f64)
}

pub fn pairs(d: &[f64]) -> PairedScores {
    PairedScores::new(d.to_vec(), vec![0.0; d.len()]).unwrap()
}

pub fn eight_difference_example_matches_enumeration() {
    let d = [1.1, -0.5, 2.3, 0.7, -0.2, 1.8, 0.9, -1.4];
    let r = wilcoxon_signed_rank(&pairs(&d));
    let (w, p) = exact(&d);
    assert_eq!(r.w, w);
    assert_eq!(w, 9.0);
    assert!((r.p - p).abs() < 0.05, "normal {} exact {}", r.p, p);
}

pub fn random_small_samples_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.random_range(6..=8);
        // coarse values so ties occur
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let v = (rng.random_range(-30..=30) as f64) / 10.0;
                if v == 0.0 { 0.1 } else { v }
            })
            .collect();
        let r = wilcoxon_signed_rank(&pairs(&d));
        let (w, p) = exact(&d);
        assert_eq!(r.w, w, "{d:?}");
        assert!((r.p - p).abs() <= 0.05, "{d:?}: normal {} exact {}", r.p, p);
    }
}
