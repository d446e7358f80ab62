//! Span recovery: generation can drop subword tokens and produce near-miss
//! values ("Mocer" for "Mocher"). If the generated value is not already an
//! utterance span, the closest token-aligned span by character edit
//! distance is returned instead, provided it is within
//! `threshold_ratio * len(generated)` edits.

use crate::tokenizer::TokenSeq;

#[derive(Debug, Clone, Copy)]
pub struct RecoveryConfig {
    /// Accept a span when its edit distance is at most this fraction of the
    /// generated value's character length.
    pub threshold_ratio: f64,
    /// Longest candidate span in tokens.
    pub max_span_tokens: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            threshold_ratio: 0.3,
            max_span_tokens: 10,
        }
    }
}

/// Unit-cost character-level edit distance, two-row dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + (ca != cb) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// All contiguous token-aligned spans of up to `max_span_tokens` tokens.
/// Surfaces are trimmed of surrounding whitespace (a leading space is glued
/// to word tokens); spans that trim to nothing are skipped.
pub fn enumerate_spans(
    utterance: &str,
    tokens: &TokenSeq,
    max_span_tokens: usize,
) -> Vec<(String, (usize, usize))> {
    let n = tokens.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n.min(i + max_span_tokens) {
            let (mut s, mut e) = (tokens.char_spans[i].0, tokens.char_spans[j].1);
            if s >= e {
                continue;
            }
            while s < e && !utterance.is_char_boundary(s) {
                s += 1;
            }
            while e > s && !utterance.is_char_boundary(e) {
                e -= 1;
            }
            let raw = &utterance[s..e];
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let lead = raw.len() - raw.trim_start().len();
            let trail = raw.len() - raw.trim_end().len();
            out.push((trimmed.to_string(), (s + lead, e - trail)));
        }
    }
    out
}

/// Detailed recovery outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recovery {
    /// The generated value was the "not provided" phrase.
    NotProvided,
    /// A token-aligned utterance span (exact or within the threshold).
    Span(String),
    /// Nothing matched; the raw generated value is passed through.
    Raw(String),
}

/// Map a generated value back onto the utterance. Ties break by smaller
/// distance, then shorter span, then leftmost.
pub fn recover(
    generated: &str,
    utterance: &str,
    tokens: &TokenSeq,
    cfg: &RecoveryConfig,
) -> Recovery {
    let norm_gen = normalize(generated);
    if norm_gen == crate::templating::NOT_PROVIDED {
        return Recovery::NotProvided;
    }
    let spans = enumerate_spans(utterance, tokens, cfg.max_span_tokens);

    // Exact pass: the value is already a span, no distance computation.
    let exact = spans
        .iter()
        .filter(|(surface, _)| normalize(surface) == norm_gen)
        .min_by_key(|(surface, (start, _))| (surface.chars().count(), *start));
    if let Some((surface, _)) = exact {
        return Recovery::Span(surface.clone());
    }

    let threshold = cfg.threshold_ratio * norm_gen.chars().count() as f64;
    let best = spans
        .iter()
        .map(|(surface, range)| (levenshtein(&norm_gen, &normalize(surface)), surface, range))
        .min_by_key(|(d, surface, (start, _))| (*d, surface.chars().count(), *start));
    match best {
        Some((d, surface, _)) if d as f64 <= threshold => Recovery::Span(surface.clone()),
        _ => Recovery::Raw(generated.to_string()),
    }
}

/// `recover` flattened to the value shape the rest of the system passes
/// around: `None` marks "not provided".
pub fn recover_span(
    generated: &str,
    utterance: &str,
    tokens: &TokenSeq,
    cfg: &RecoveryConfig,
) -> Option<String> {
    match recover(generated, utterance, tokens, cfg) {
        Recovery::NotProvided => None,
        Recovery::Span(s) => Some(s),
        Recovery::Raw(r) => Some(r),
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    fn lev_oracle(a: &[char], b: &[char]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = lev_oracle(&a[1..], &b[1..]) + (a[0] != b[0]) as usize;
        let del = lev_oracle(&a[1..], b) + 1;
        let ins = lev_oracle(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    fn words_seq(utterance: &str) -> TokenSeq {
        // Token per word, leading space glued to the word, mirroring the
        // tokenizer's chunk shape.
        let mut seq = TokenSeq::default();
        let mut start = 0;
        for (i, word) in utterance.split(' ').enumerate() {
            let s = if i == 0 { start } else { start - 1 };
            seq.ids.push(i as u32);
            seq.char_spans.push((s, start + word.len()));
            start += word.len() + 1;
        }
        seq
    }

    #[test]
    fn distance_examples() {
        assert_eq!(levenshtein("Mocer", "Mocher"), 1);
        assert_eq!(levenshtein("same", "same"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn distance_matches_recursive_oracle_small() {
        let alphabet = ['a', 'b', 'c'];
        let mut strings: Vec<String> = vec![String::new()];
        for len in 1..=3usize {
            let mut next = Vec::new();
            for s in strings.iter().filter(|s| s.chars().count() == len - 1) {
                for c in alphabet {
                    next.push(format!("{s}{c}"));
                }
            }
            strings.extend(next);
        }
        for a in &strings {
            for b in &strings {
                let ac: Vec<char> = a.chars().collect();
                let bc: Vec<char> = b.chars().collect();
                assert_eq!(levenshtein(a, b), lev_oracle(&ac, &bc), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn span_counts_follow_closed_form() {
        let three = words_seq("one two three");
        assert_eq!(enumerate_spans("one two three", &three, 10).len(), 6);
        let one = words_seq("single");
        assert_eq!(enumerate_spans("single", &one, 10).len(), 1);

        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let utt = words.join(" ");
        let twenty = words_seq(&utt);
        let expected: usize = (1..=10).map(|l| 20 - l + 1).sum(); // 155
        assert_eq!(enumerate_spans(&utt, &twenty, 10).len(), expected);
    }

    #[test]
    fn spans_have_trimmed_surfaces() {
        let utt = "my name is Lakesha Mocher";
        let seq = words_seq(utt);
        for (surface, (s, e)) in enumerate_spans(utt, &seq, 10) {
            assert_eq!(&utt[s..e], surface);
            assert_eq!(surface.trim(), surface);
        }
    }

    #[test]
    fn recovers_the_motivating_typo() {
        let utt = "my name is Lakesha Mocher";
        let seq = words_seq(utt);
        let got = recover_span("Mocer", utt, &seq, &RecoveryConfig::default());
        assert_eq!(got.as_deref(), Some("Mocher"));
    }

    #[test]
    fn exact_span_skips_distance_machinery() {
        let utt = "table on August 23rd please";
        let seq = words_seq(utt);
        let got = recover_span("August 23rd", utt, &seq, &RecoveryConfig::default());
        assert_eq!(got.as_deref(), Some("August 23rd"));
        // Case-insensitive match returns the utterance casing.
        let got = recover_span("august 23rd", utt, &seq, &RecoveryConfig::default());
        assert_eq!(got.as_deref(), Some("August 23rd"));
    }

    #[test]
    fn hopeless_value_passes_through() {
        let utt = "my name is Lakesha Mocher";
        let seq = words_seq(utt);
        let got = recover_span("zzzzz", utt, &seq, &RecoveryConfig::default());
        assert_eq!(got.as_deref(), Some("zzzzz"));
    }

    #[test]
    fn not_provided_maps_to_null() {
        let utt = "anything";
        let seq = words_seq(utt);
        assert_eq!(
            recover_span("not provided", utt, &seq, &RecoveryConfig::default()),
            None
        );
        assert_eq!(
            recover_span("  Not Provided ", utt, &seq, &RecoveryConfig::default()),
            None
        );
    }

    #[test]
    fn recovery_is_idempotent() {
        let utt = "we arrive at 7pm on friday";
        let seq = words_seq(utt);
        let cfg = RecoveryConfig::default();
        for gen in ["7pm", "7pn", "fridy", "zzzzz", "at 7pm"] {
            let once = recover_span(gen, utt, &seq, &cfg).unwrap();
            let twice = recover_span(&once, utt, &seq, &cfg).unwrap();
            assert_eq!(once, twice, "generated {gen:?}");
        }
    }

    #[test]
    fn raising_threshold_never_unrecovers() {
        let utt = "book for Nerys Moorcroft tomorrow";
        let seq = words_seq(utt);
        for gen in ["Moorcrof", "Nery", "tomorow", "xxxx", "Moo"] {
            let mut was_span = false;
            for t in [0.0, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0] {
                let cfg = RecoveryConfig {
                    threshold_ratio: t,
                    max_span_tokens: 10,
                };
                let got = recover_span(gen, utt, &seq, &cfg).unwrap();
                let is_span = got != gen;
                if was_span {
                    assert!(is_span, "threshold {t} reverted {gen:?} to raw");
                }
                was_span = is_span;
            }
        }
    }

    #[test]
    fn works_with_real_tokenizer_output() {
        let utt = "my name is Lakesha Mocher";
        let v = train_bpe(["my name is someone", "Mo ch er La ke sha"], 300).unwrap();
        let seq = v.encode(utt);
        let got = recover_span("Mocer", utt, &seq, &RecoveryConfig::default());
        assert_eq!(got.as_deref(), Some("Mocher"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn distance_symmetry_and_triangle(
                a in "[abc]{0,8}",
                b in "[abc]{0,8}",
                c in "[abc]{0,8}",
            ) {
                prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
                prop_assert!(
                    levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c)
                );
            }

            #[test]
            fn recovery_output_shape_and_idempotence(gen in "[a-z0-9 ]{0,12}") {
                let utt = "we arrive at 7pm on friday night";
                let seq = words_seq(utt);
                let cfg = RecoveryConfig::default();
                match recover(&gen, utt, &seq, &cfg) {
                    Recovery::NotProvided => {
                        prop_assert_eq!(gen.trim().to_lowercase(), "not provided");
                    }
                    Recovery::Span(s) => {
                        let spans = enumerate_spans(utt, &seq, cfg.max_span_tokens);
                        prop_assert!(spans.iter().any(|(surface, _)| *surface == s));
                        // Recovering a recovered span is a fixed point.
                        prop_assert_eq!(recover(&s, utt, &seq, &cfg), Recovery::Span(s));
                    }
                    Recovery::Raw(r) => prop_assert_eq!(r, gen),
                }
            }
        }
    }
}
