use driftlab::corpus::{generate_corpus, Domain, GroundingSpace, Languages, Triple};
use driftlab::metrics::token_flip_report;

/// A generated pivot corpus where `from` is replaced by `to` in 15 of the 35
/// references that contain `from`, plus harmless noise elsewhere.
pub fn implanted_corpus(from: &str, to: &str) -> (Vec<Triple>, Vec<Vec<String>>) {
    let langs = Languages::default();
    let space = GroundingSpace::new(&langs.inventory, 8, 0.0, 1);
    let pool = generate_corpus(&langs, &Domain::finetuning(), &space, 2000, 5).unwrap();
    let to_sem = langs.pivot.denotation(to).unwrap();
    let has = |t: &Triple, w: &str| t.pivot.iter().any(|x| x == w);
    let mut data: Vec<Triple> = pool
        .iter()
        .filter(|t| has(t, from) && !t.meaning.mentions(to_sem))
        .take(35)
        .cloned()
        .collect();
    data.extend(pool.iter().filter(|t| !has(t, from)).take(65).cloned());
    assert_eq!(data.len(), 100);
    let mut hyps: Vec<Vec<String>> = data.iter().map(|t| t.pivot.clone()).collect();
    for h in hyps.iter_mut().take(15) {
        for w in h.iter_mut().filter(|w| *w == from) {
            *w = to.to_string();
        }
    }
    // dropped punctuation and reordered tokens introduce no substitutes
    for h in hyps.iter_mut().skip(40).take(20) {
        h.pop();
    }
    for h in hyps.iter_mut().skip(70).take(10) {
        h.reverse();
    }
    (data, hyps)
}

pub fn implanted_flip_is_the_only_flag() {
    let langs = Languages::default();
    let (data, hyps) = implanted_corpus("child", "horse");
    let refs: Vec<Vec<String>> = data.iter().map(|t| t.pivot.clone()).collect();
    let meanings: Vec<_> = data.iter().map(|t| t.meaning.clone()).collect();
    let flags = token_flip_report(&hyps, &refs, &meanings, &langs.pivot, 0.3, 5).unwrap();
    assert_eq!(flags.len(), 1, "{flags:?}");
    let f = &flags[0];
    assert_eq!((f.reference.as_str(), f.hypothesis.as_str()), ("child", "horse"));
    assert_eq!((f.count, f.support), (15, 35));
    assert!(token_flip_report(&refs, &refs, &meanings, &langs.pivot, 0.3, 5).unwrap().is_empty());
}
