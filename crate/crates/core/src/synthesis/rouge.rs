//! ROUGE-L over lowercased, punctuation-stripped whitespace tokens.

/// Lowercase, drop every character that is neither alphanumeric nor whitespace, split on whitespace.
pub fn rouge_tokens(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F-measure of LCS precision (over the candidate) and recall (over the reference).
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&rouge_tokens(candidate), &rouge_tokens(reference))
}

pub fn rouge_l_tokens(c: &[String], r: &[String]) -> f64 {
    let l = lcs_len(c, r);
    if l == 0 {
        return 0.0;
    }
    // 2PR/(P+R) reduces to 2l/(|c|+|r|); one division keeps boundary cases exact
    2.0 * l as f64 / (c.len() + r.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert_eq!(rouge_l("the cat sat on mat", "the cat ran"), 0.5);
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b c", "d e f"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
        assert_eq!(rouge_l("The Cat, sat!", "the cat sat"), 1.0);
        // LCS 4 of 5 on both sides: exactly 0.8
        assert_eq!(rouge_l("a b c d e", "a b c d f"), 0.8);
        // LCS 2: P = 2/2, R = 2/4, F = 2/3
        assert!((rouge_l("a b", "a x b y") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lcs_len(&[1, 3, 4, 1, 2], &[3, 4, 1, 2, 1, 3]), 4);
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(vec!["a", "b", "c", "d", "the", "Cat,", "x!"]), 0..12)
            .prop_map(|v| v.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn symmetric_and_bounded(a in words(), b in words()) {
            let f = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, rouge_l(&b, &a));
        }
    }
}
