use std::sync::atomic::{AtomicUsize, Ordering};

use duorank_core::listwise::{
    build_prompt, parse_permutation, rerank_window, FnBackend, IdentityBackend, OracleBackend, PromptOptions,
    WindowConfig, SCAFFOLD,
};
use duorank_core::{Document, Error, Query};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn is_permutation(p: &[usize], k: usize) -> bool {
    let mut v = p.to_vec();
    v.sort_unstable();
    v == (1..=k).collect::<Vec<_>>()
}

fn planted(n: usize, seed: u64) -> (Vec<Document>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grades: Vec<f64> = (0..n).map(|_| rng.random_range(0..100) as f64).collect();
    let docs = (0..n).map(|i| Document::new(format!("d{i}"), format!("passage {i} body"))).collect();
    (docs, grades)
}

#[test]
fn one_pass_bubbles_the_true_top_ten_to_the_head() {
    let cfg = WindowConfig::default();
    let q = Query::new("q", "anything");
    for trial in 0..50 {
        let (mut docs, _) = planted(50, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        // distinct grades make the true top ten unambiguous
        let mut grades: Vec<f64> = (0..50).map(f64::from).collect();
        grades.shuffle(&mut rng);
        docs.shuffle(&mut rng);
        let oracle = OracleBackend::new(docs.iter().zip(&grades).map(|(d, g)| (d.text.as_str(), *g)), cfg.prompt.token_budget);
        let refs: Vec<&Document> = docs.iter().collect();
        let out = rerank_window(&oracle, &q, &refs, &cfg).unwrap();
        let mut top: Vec<f64> = out.order[..10].iter().map(|&i| grades[i]).collect();
        let mut truth = grades.clone();
        truth.sort_by(|a, b| b.total_cmp(a));
        top.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(top, truth[..10], "trial {trial}");
        assert_eq!(out.windows.len(), 4);
    }
}

#[test]
fn identity_backend_keeps_order_and_permutation_holds() {
    let (docs, _) = planted(37, 1);
    let refs: Vec<&Document> = docs.iter().collect();
    let out = rerank_window(&IdentityBackend, &Query::new("q", "x"), &refs, &WindowConfig::default()).unwrap();
    assert_eq!(out.order, (0..37).collect::<Vec<_>>());
    assert_eq!(out.failures(), 0);
}

#[test]
fn failed_windows_are_left_in_place() {
    let (docs, _) = planted(30, 2);
    let refs: Vec<&Document> = docs.iter().collect();
    let calls = AtomicUsize::new(0);
    // the first (tail) window fails; the head window reverses
    let backend = FnBackend::new("flaky", |p| {
        if calls.fetch_add(1, Ordering::SeqCst) == 0 {
            return Err(Error::Backend { status: Some(503), message: "down".into(), retryable: true });
        }
        let chain: Vec<String> = (1..=p.num_passages).rev().map(|i| format!("[{i}]")).collect();
        Ok(format!("{SCAFFOLD} {}", chain.join(" > ")))
    });
    let out = rerank_window(&backend, &Query::new("q", "x"), &refs, &WindowConfig::default()).unwrap();
    assert_eq!(out.failures(), 1);
    let expect: Vec<usize> = (0..20).rev().chain(20..30).collect();
    assert_eq!(out.order, expect);
}

#[test]
fn documented_repairs() {
    let clean = parse_permutation("### Final Reranking: [1] > [2] > [3]", 3);
    assert_eq!(clean.permutation.as_slice(), [1, 2, 3]);
    assert!(clean.repairs.is_clean());

    let fixed = parse_permutation("### Final Reranking: [2] > [2] > [9]", 3);
    assert_eq!(fixed.permutation.as_slice(), [2, 1, 3]);
    assert_eq!((fixed.repairs.duplicates, fixed.repairs.out_of_range, fixed.repairs.missing), (1, 1, 2));

    let junk = parse_permutation("no idea, sorry", 4);
    assert_eq!(junk.permutation.as_slice(), [1, 2, 3, 4]);
    assert!(junk.repairs.fallback);
}

#[test]
fn structured_malformations_always_repair() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        let k = rng.random_range(1..=20);
        let mut ids: Vec<usize> = (1..=k).collect();
        ids.shuffle(&mut rng);
        match case % 4 {
            0 => ids.push(ids[0]),
            1 => ids.push(k + rng.random_range(1..50)),
            2 => ids.truncate(rng.random_range(0..k)),
            _ => {}
        }
        let mut text = format!("{SCAFFOLD} {}", ids.iter().map(|i| format!("[{i}]")).collect::<Vec<_>>().join(" > "));
        if case % 4 == 3 {
            // cut mid-token
            let cut = rng.random_range(SCAFFOLD.len()..=text.len());
            text.truncate(cut);
        }
        let out = parse_permutation(&text, k);
        assert!(is_permutation(out.permutation.as_slice(), k), "{text:?}");
    }
}

#[test]
fn prompt_for_three_passages() {
    let q = Query::new("q", "what is a shape of art");
    let p = build_prompt(&q, &["a", "b", "c"], &PromptOptions::default()).unwrap();
    for needle in ["[1] a", "[2] b", "[3] c", "Search Query: what is a shape of art", SCAFFOLD] {
        assert!(p.user.contains(needle), "missing {needle}");
    }
    assert_eq!(p.num_passages, 3);
}

proptest! {
    #[test]
    fn random_bytes_always_parse(bytes in prop::collection::vec(any::<u8>(), 0..300), k in 1usize..30) {
        let text = String::from_utf8_lossy(&bytes);
        let out = parse_permutation(&text, k);
        prop_assert!(is_permutation(out.permutation.as_slice(), k));
    }

    #[test]
    fn window_output_is_a_permutation(n in 1usize..60, w in 2usize..25, s in 1usize..24, seed in any::<u64>()) {
        prop_assume!(s < w);
        let (docs, grades) = planted(n, seed);
        let cfg = WindowConfig { window: w, stride: s, ..Default::default() };
        let oracle = OracleBackend::new(docs.iter().zip(&grades).map(|(d, g)| (d.text.as_str(), *g)), cfg.prompt.token_budget);
        let refs: Vec<&Document> = docs.iter().collect();
        let out = rerank_window(&oracle, &Query::new("q", "x"), &refs, &cfg).unwrap();
        let mut seen = out.order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        // the best document always reaches the head in one pass
        let best = grades.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(grades[out.order[0]], best);
    }
}
