//! Paired significance testing between systems.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Per-sentence scores of two systems on the same sentence ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    pub ids: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PairedScores {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Usage(format!("{} scores paired with {}", x.len(), y.len())));
        }
        let ids = (0..x.len()).map(|i| i.to_string()).collect();
        Ok(Self { ids, x, y })
    }

    /// Pairs two `id,score` tables on their ids, in the order of `x`.
    pub fn from_tables(x: &[(String, f64)], y: &[(String, f64)]) -> Result<Self> {
        let ymap: HashMap<&str, f64> = y.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        if ymap.len() != y.len() || x.len() != y.len() {
            return Err(Error::Format("score tables differ in size or repeat ids".into()));
        }
        let mut out = Self {
            ids: vec![],
            x: vec![],
            y: vec![],
        };
        for (id, v) in x {
            let w = ymap
                .get(id.as_str())
                .ok_or_else(|| Error::Format(format!("sentence id {id:?} missing from second table")))?;
            out.ids.push(id.clone());
            out.x.push(*v);
            out.y.push(*w);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.x.iter().zip(&self.y).map(|(a, b)| a - b).collect()
    }
}

/// Parses `id,score` lines; a non-numeric first line is taken as a header.
pub fn parse_score_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, score) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: expected id,score", i + 1)))?;
        match score.trim().parse::<f64>() {
            Ok(v) => out.push((id.trim().to_string(), v)),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Format(format!("line {}: bad score {score:?}", i + 1))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// min(W+, W−).
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p: f64,
    /// Nonzero differences used.
    pub n: usize,
    /// All differences were zero.
    pub degenerate: bool,
    /// Fewer than six nonzero differences; the normal approximation is poor.
    pub unreliable: bool,
}

impl fmt::Display for WilcoxonResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "W={:.4} W+={:.4} W-={:.4} n={} p={:.6}{}",
            self.w,
            self.w_plus,
            self.w_minus,
            self.n,
            self.p,
            if self.degenerate { " degenerate" } else { "" }
        )
    }
}

/// Mid-ranks (1-based) of `values`, plus the sizes of tie groups.
pub fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test with mid-ranks, tie-corrected
/// normal approximation and a 0.5 continuity correction.
pub fn wilcoxon_signed_rank(pairs: &PairedScores) -> WilcoxonResult {
    let d: Vec<f64> = pairs.differences().into_iter().filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return WilcoxonResult {
            w: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p: 1.0,
            n: 0,
            degenerate: true,
            unreliable: true,
        };
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let (ranks, ties) = mid_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    WilcoxonResult {
        w,
        w_plus,
        w_minus,
        p,
        n,
        degenerate: false,
        unreliable: n < 6,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    pub mean_w: f64,
    pub mean_p: f64,
    pub n_boot: usize,
    pub seed: u64,
}

impl fmt::Display for BootstrapResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean_W={:.4}\tmean_p={:.6}\tn_boot={}\tseed={}",
            self.mean_w, self.mean_p, self.n_boot, self.seed
        )
    }
}

/// Wilcoxon test averaged over `n_boot` resamples of the sentence pairs.
pub fn bootstrap_test(pairs: &PairedScores, n_boot: usize, seed: u64) -> Result<BootstrapResult> {
    if n_boot < 100 {
        return Err(Error::Usage(format!("n_boot = {n_boot}; at least 100 resamples required")));
    }
    if pairs.is_empty() {
        return Err(Error::Usage("bootstrap of an empty sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pairs.len();
    let (mut sw, mut sp) = (0.0, 0.0);
    for _ in 0..n_boot {
        let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let i = rng.random_range(0..n);
            x.push(pairs.x[i]);
            y.push(pairs.y[i]);
        }
        let r = wilcoxon_signed_rank(&PairedScores::new(x, y)?);
        sw += r.w;
        sp += r.p;
    }
    Ok(BootstrapResult {
        mean_w: sw / n_boot as f64,
        mean_p: sp / n_boot as f64,
        n_boot,
        seed,
    })
}

/// Index of the run with the median final score; among equal medians the
/// lowest index wins.
pub fn median_run_selector(finals: &[f64]) -> Result<usize> {
    if finals.is_empty() || finals.len() % 2 == 0 {
        return Err(Error::Usage(format!(
            "median selection needs an odd number of runs, got {}",
            finals.len()
        )));
    }
    let mut sorted = finals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(finals.iter().position(|&v| v == median).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_diffs(d: &[f64]) -> PairedScores {
        PairedScores::new(d.to_vec(), vec![0.0; d.len()]).unwrap()
    }

    #[test]
    fn one_sided_extreme() {
        let r = wilcoxon_signed_rank(&from_diffs(&[1.0, 2.0, 3.0]));
        assert_eq!(r.w, 0.0);
        assert_eq!(r.w_plus, 6.0);
        assert!(r.unreliable);
    }

    #[test]
    fn antisymmetric_is_null() {
        let r = wilcoxon_signed_rank(&from_diffs(&[-1.0, 1.0, -2.0, 2.0]));
        assert_eq!(r.w, 5.0);
        assert!((r.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let r = wilcoxon_signed_rank(&from_diffs(&[0.0, 0.0]));
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn mid_ranks_with_ties() {
        let (r, t) = mid_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    #[test]
    fn permutation_invariant() {
        let d = [1.1, -0.5, 2.3, 0.7, -0.2, 1.8, 0.9, -1.4];
        let a = wilcoxon_signed_rank(&from_diffs(&d));
        let mut e = d;
        e.reverse();
        e.swap(1, 5);
        let b = wilcoxon_signed_rank(&from_diffs(&e));
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_properties() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let same = PairedScores::new(x.clone(), x.clone()).unwrap();
        let r = bootstrap_test(&same, 200, 1).unwrap();
        assert_eq!(r.mean_p, 1.0);
        let shifted = PairedScores::new(x.iter().map(|v| v + 1.0).collect(), x.clone()).unwrap();
        let r = bootstrap_test(&shifted, 200, 1).unwrap();
        assert!(r.mean_p < 0.02);
        assert_eq!(r, bootstrap_test(&shifted, 200, 1).unwrap());
        assert!(bootstrap_test(&shifted, 99, 1).is_err());
    }

    #[test]
    fn median_selector() {
        assert_eq!(median_run_selector(&[1.0, 2.0, 3.0]).unwrap(), 1);
        assert_eq!(median_run_selector(&[4.0, 4.0, 4.0]).unwrap(), 0);
        assert_eq!(median_run_selector(&[5.0, 1.0, 3.0]).unwrap(), 2);
        assert!(median_run_selector(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn score_tables_pair_by_id() {
        let a = parse_score_csv("id,score\ns1,0.5\ns2,1.5\n").unwrap();
        let b = parse_score_csv("s2,1.0\ns1,0.25\n").unwrap();
        let p = PairedScores::from_tables(&a, &b).unwrap();
        assert_eq!(p.differences(), vec![0.25, 0.5]);
        let c = parse_score_csv("s3,1.0\ns1,0.25\n").unwrap();
        assert!(PairedScores::from_tables(&a, &c).is_err());
        assert!(parse_score_csv("s1,0.5\ns2,abc\n").is_err());
    }
}
