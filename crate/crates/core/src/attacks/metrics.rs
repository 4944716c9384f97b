//! Sequence similarity metrics over token ids.

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between a candidate and a reference sequence. Two empty
/// sequences score 1.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Fraction of indices holding equal tokens, over the longer length. Two
/// empty sequences score 1.
pub fn exact_match(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l(&[1, 2, 3], &[4, 5]), 0.0);
        assert_eq!(lcs_len(&[1, 2, 3, 4], &[1, 3, 4, 9]), 3);
        assert!((rouge_l(&[1, 2, 3, 4], &[1, 3, 4, 9]) - 0.75).abs() < 1e-15);
        assert_eq!(rouge_l(&[], &[]), 1.0);
        assert_eq!(rouge_l(&[], &[1]), 0.0);
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match(&[], &[]), 1.0);
        assert_eq!(exact_match(&[1, 2, 3, 4], &[1, 9, 3, 4]), 0.75);
        assert_eq!(exact_match(&[1, 2], &[1, 2, 3, 4]), 0.5);
    }
}
