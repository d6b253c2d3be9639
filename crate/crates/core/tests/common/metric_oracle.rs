//! Brute-force ranking metrics.

use std::collections::BTreeSet;

/// AP@5 from explicit prefix precisions: Σ_k Prec@k · rel(k) / min(|Y|, 5).
pub fn ap_at_5_bruteforce(ranked: &[String], truth: &BTreeSet<String>) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 1..=ranked.len().min(5) {
        let prefix: BTreeSet<&String> = ranked[..k].iter().collect();
        let hits_in_prefix = prefix.iter().filter(|l| truth.contains(l.as_str())).count();
        let precision = hits_in_prefix as f64 / k as f64;
        let rel = if truth.contains(&ranked[k - 1]) { 1.0 } else { 0.0 };
        total += precision * rel;
    }
    total / truth.len().min(5) as f64
}
