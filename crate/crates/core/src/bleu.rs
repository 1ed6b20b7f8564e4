//! Corpus-level BLEU-4 with add-one smoothing on orders above one.

use std::collections::HashMap;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_default() += 1;
        }
    }
    m
}

/// BLEU-4 of `hypotheses` against their reference lists. Brevity penalty uses
/// the closest reference length (shorter on ties).
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<Vec<usize>>]) -> f64 {
    assert_eq!(hypotheses.len(), references.len(), "one reference list per hypothesis");
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|l| ((*l as isize - hyp.len() as isize).abs(), *l))
            .unwrap_or(0);
        for n in 1..=4 {
            let hc = ngram_counts(hyp, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (g, c) in &hc {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matches[n - 1] += (*c).min(max_ref);
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let (m, t) = if i == 0 {
                (matches[i] as f64, totals[i] as f64)
            } else {
                (matches[i] as f64 + 1.0, totals[i] as f64 + 1.0)
            };
            (m / t).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_is_one() {
        let h = vec![vec![4, 5, 6], vec![7, 8]];
        let r = vec![vec![vec![4, 5, 6]], vec![vec![9], vec![7, 8]]];
        assert!((corpus_bleu(&h, &r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_partial_match() {
        // hyp [1 2 3], ref [1 2 4 5]: p1 = 2/3, p2 = (1+1)/(2+1), p3 = (0+1)/(1+1), p4 = 1/1.
        // BP = exp(1 - 4/3).
        let b = corpus_bleu(&[vec![1, 2, 3]], &[vec![vec![1, 2, 4, 5]]]);
        let expect = (1.0f64 - 4.0 / 3.0).exp() * ((2.0f64 / 3.0) * (2.0 / 3.0) * 0.5 * 1.0).powf(0.25);
        assert!((b - expect).abs() < 1e-12, "{b} vs {expect}");
    }

    #[test]
    fn no_unigram_overlap_is_zero() {
        assert_eq!(corpus_bleu(&[vec![1, 2]], &[vec![vec![3, 4]]]), 0.0);
    }
}
