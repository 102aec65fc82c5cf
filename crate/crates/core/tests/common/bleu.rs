use driftlab::metrics::corpus_bleu;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Occurrences of `gram` in `toks` by sliding comparison.
fn occurrences(toks: &[&str], gram: &[&str]) -> usize {
    if gram.len() > toks.len() {
        return 0;
    }
    (0..=toks.len() - gram.len()).filter(|&i| &toks[i..i + gram.len()] == gram).count()
}

/// Corpus BLEU by explicit enumeration of each hypothesis n-gram type.
pub fn brute_force_bleu(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() - n + 1;
            let mut seen: Vec<&[&str]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched[n - 1] += occurrences(h, g).min(occurrences(rf, g));
            }
        }
    }
    if c == 0 || matched[0] == 0 {
        return 0.0;
    }
    let smooth = matched.contains(&0);
    let mut product = 1.0;
    for n in 0..4 {
        product *= if smooth && n > 0 {
            (matched[n] + 1) as f64 / (totals[n] + 1) as f64
        } else {
            matched[n] as f64 / totals[n] as f64
        };
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

const WORDS: [&str; 5] = ["the", "cat", "sat", "on", "mat"];

fn sentence(rng: &mut ChaCha8Rng, min: usize) -> Vec<&'static str> {
    let len = rng.random_range(min..=8);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect()
}

pub fn bleu_matches_oracle_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..100 {
        let n = rng.random_range(1..=5);
        let refs: Vec<Vec<&str>> = (0..n).map(|_| sentence(&mut rng, 1)).collect();
        let hyps: Vec<Vec<&str>> = (0..n).map(|_| sentence(&mut rng, 0)).collect();
        let got = corpus_bleu(&hyps, &refs, 4).unwrap();
        let want = brute_force_bleu(&hyps, &refs);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}\n{hyps:?}\n{refs:?}");
        let ident = corpus_bleu(&refs, &refs, 4).unwrap();
        assert!((ident - 100.0).abs() < 1e-9, "identity case {case}: {ident}");
    }
}
