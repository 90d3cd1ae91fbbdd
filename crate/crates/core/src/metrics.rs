//! Word error rate, semantic error rate, interpretation error rate and
//! intent classification error rate.
//!
//! SemER follows
//!
//! ```text
//!            #deletion + #insertion + #substitution
//! SemER = -----------------------------------------
//!            #correct + #deletion + #substitution
//! ```
//!
//! where the intent is one alignable unit (a wrong intent is a
//! substitution) and slots are matched per slot name in order of
//! appearance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::OUTSIDE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("word error rate is undefined for an empty reference")]
    EmptyReference,
    #[error("token and tag sequences differ in length ({tokens} vs {tags})")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("semantic error rate denominator is zero")]
    ZeroDenominator,
    #[error("no utterances to score")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotEntry {
    pub name: String,
    pub value: String,
}

impl SlotEntry {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

/// Levenshtein distance over tokens with one optimal alignment decomposed
/// into insertions, deletions and substitutions. On ties the backtrace
/// prefers substitution (or match), then deletion, then insertion.
pub fn word_edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = (d[(i - 1) * w + j - 1] + cost)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        distance: d[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if here == d[(i - 1) * w + j - 1] + cost {
                counts.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(word_edit_distance(reference, hypothesis).distance as f64 / reference.len() as f64)
}

/// Σ distance / Σ reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let (mut dist, mut len) = (0usize, 0usize);
    for (r, h) in pairs {
        dist += word_edit_distance(r, h).distance;
        len += r.len();
    }
    if len == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(dist as f64 / len as f64)
}

/// Maximal runs of one non-Outside tag become one entry whose value is the
/// run's words joined by single spaces.
pub fn extract_slots<W: AsRef<str>, T: AsRef<str>>(tokens: &[W], tags: &[T]) -> Result<Vec<SlotEntry>> {
    if tokens.len() != tags.len() {
        return Err(MetricsError::LengthMismatch {
            tokens: tokens.len(),
            tags: tags.len(),
        });
    }
    let mut out: Vec<SlotEntry> = Vec::new();
    let mut prev: Option<&str> = None;
    for (w, t) in tokens.iter().zip(tags) {
        let t = t.as_ref();
        if t == OUTSIDE {
            prev = None;
            continue;
        }
        match (prev, out.last_mut()) {
            (Some(p), Some(last)) if p == t => {
                last.value.push(' ');
                last.value.push_str(w.as_ref());
            }
            _ => out.push(SlotEntry::new(t, w.as_ref())),
        }
        prev = Some(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemerCounts {
    pub correct: usize,
    pub deletion: usize,
    pub insertion: usize,
    pub substitution: usize,
}

impl SemerCounts {
    pub fn errors(&self) -> usize {
        self.deletion + self.insertion + self.substitution
    }

    pub fn reference_units(&self) -> usize {
        self.correct + self.deletion + self.substitution
    }

    pub fn add(&mut self, other: &SemerCounts) {
        self.correct += other.correct;
        self.deletion += other.deletion;
        self.insertion += other.insertion;
        self.substitution += other.substitution;
    }
}

pub fn semer_counts<I: PartialEq>(
    ref_intent: &I,
    ref_slots: &[SlotEntry],
    hyp_intent: &I,
    hyp_slots: &[SlotEntry],
) -> SemerCounts {
    let mut c = SemerCounts::default();
    if ref_intent == hyp_intent {
        c.correct += 1;
    } else {
        c.substitution += 1;
    }
    let mut names: Vec<&str> = Vec::new();
    for s in ref_slots.iter().chain(hyp_slots) {
        if !names.contains(&s.name.as_str()) {
            names.push(&s.name);
        }
    }
    for name in names {
        let r: Vec<&SlotEntry> = ref_slots.iter().filter(|s| s.name == name).collect();
        let h: Vec<&SlotEntry> = hyp_slots.iter().filter(|s| s.name == name).collect();
        for (a, b) in r.iter().zip(&h) {
            if a.value == b.value {
                c.correct += 1;
            } else {
                c.substitution += 1;
            }
        }
        let matched = r.len().min(h.len());
        c.deletion += r.len() - matched;
        c.insertion += h.len() - matched;
    }
    c
}

pub fn semer(counts: &SemerCounts) -> Result<f64> {
    let den = counts.reference_units();
    if den == 0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok(counts.errors() as f64 / den as f64)
}

/// Fraction of utterances with any semantic error.
pub fn irer(per_utterance: &[SemerCounts]) -> Result<f64> {
    if per_utterance.is_empty() {
        return Err(MetricsError::Empty);
    }
    let bad = per_utterance.iter().filter(|c| c.errors() > 0).count();
    Ok(bad as f64 / per_utterance.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IcerAveraging {
    /// Fraction of utterances with a wrong intent.
    #[default]
    Micro,
    /// Mean over reference intents of (1 - recall).
    Macro,
}

pub fn icer<I: PartialEq>(pairs: &[(I, I)], averaging: IcerAveraging) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    match averaging {
        IcerAveraging::Micro => {
            let wrong = pairs.iter().filter(|(r, h)| r != h).count();
            Ok(wrong as f64 / pairs.len() as f64)
        }
        IcerAveraging::Macro => {
            let mut classes: Vec<&I> = Vec::new();
            for (r, _) in pairs {
                if !classes.contains(&r) {
                    classes.push(r);
                }
            }
            let total: f64 = classes
                .iter()
                .map(|c| {
                    let of_class: Vec<_> = pairs.iter().filter(|(r, _)| r == *c).collect();
                    let wrong = of_class.iter().filter(|(r, h)| r != h).count();
                    wrong as f64 / of_class.len() as f64
                })
                .sum();
            Ok(total / classes.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wer: f64,
    pub semer: f64,
    pub irer: f64,
    pub icer: f64,
    pub icer_macro: f64,
    pub counts: SemerCounts,
    pub word_errors: usize,
    pub reference_words: usize,
    pub utterances: usize,
}

/// Order-independent accumulator for corpus metrics.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    counts: SemerCounts,
    word_errors: usize,
    reference_words: usize,
    utterances: usize,
    erroneous: usize,
    intents: Vec<(usize, usize)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `words` is `(reference, hypothesis)` or `None` when no transcript
    /// is scored.
    pub fn add(
        &mut self,
        words: Option<(&[usize], &[usize])>,
        ref_intent: usize,
        ref_slots: &[SlotEntry],
        hyp_intent: usize,
        hyp_slots: &[SlotEntry],
    ) {
        if let Some((r, h)) = words {
            self.word_errors += word_edit_distance(r, h).distance;
            self.reference_words += r.len();
        }
        let c = semer_counts(&ref_intent, ref_slots, &hyp_intent, hyp_slots);
        if c.errors() > 0 {
            self.erroneous += 1;
        }
        self.counts.add(&c);
        self.utterances += 1;
        self.intents.push((ref_intent, hyp_intent));
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.utterances == 0 {
            return Err(MetricsError::Empty);
        }
        let wer = if self.reference_words == 0 {
            0.0
        } else {
            self.word_errors as f64 / self.reference_words as f64
        };
        Ok(MetricReport {
            wer,
            semer: semer(&self.counts)?,
            irer: self.erroneous as f64 / self.utterances as f64,
            icer: icer(&self.intents, IcerAveraging::Micro)?,
            icer_macro: icer(&self.intents, IcerAveraging::Macro)?,
            counts: self.counts,
            word_errors: self.word_errors,
            reference_words: self.reference_words,
            utterances: self.utterances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Exhaustive search over every edit script (no memoisation).
    fn brute_force_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
        match (r, h) {
            ([], _) => h.len(),
            (_, []) => r.len(),
            ([a, rr @ ..], [b, hh @ ..]) => {
                let diag = brute_force_distance(rr, hh) + usize::from(a != b);
                let del = brute_force_distance(rr, h) + 1;
                let ins = brute_force_distance(r, hh) + 1;
                diag.min(del).min(ins)
            }
        }
    }

    #[test]
    fn alarm_example_is_one_deletion() {
        let r = toks("set an alarm for six a.m");
        let h = toks("set alarm for six a.m");
        let c = word_edit_distance(&r, &h);
        assert_eq!(brute_force_distance(&r, &h), 1);
        assert_eq!(
            c,
            EditCounts {
                distance: 1,
                insertions: 0,
                deletions: 1,
                substitutions: 0
            }
        );
        assert!((wer(&r, &h).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_reference_cases() {
        let c = word_edit_distance::<&str>(&[], &["x", "y"]);
        assert_eq!((c.distance, c.insertions), (2, 2));
        assert_eq!(wer::<&str>(&[], &["x"]), Err(MetricsError::EmptyReference));
    }

    #[test]
    fn corpus_wer_sums_before_dividing() {
        let r1 = toks("set an alarm for six a.m");
        let h1 = toks("set alarm for six a.m");
        let r2 = toks("turn on the lights");
        let pairs: Vec<(&[&str], &[&str])> = vec![(&r1, &h1), (&r2, &r2)];
        assert!((corpus_wer(&pairs).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn backtrace_prefers_substitution() {
        // "a b" -> "c": one substitution plus one deletion either way.
        let c = word_edit_distance(&["a", "b"], &["c"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 1, 0));
    }

    #[test]
    fn table_one_slots() {
        let t = toks("set an alarm for six a.m");
        let tags = ["O", "O", "NotificationType", "O", "Time", "Time"];
        assert_eq!(
            extract_slots(&t, &tags).unwrap(),
            vec![
                SlotEntry::new("NotificationType", "alarm"),
                SlotEntry::new("Time", "six a.m")
            ]
        );
        assert!(extract_slots(&t, &["O"; 6]).unwrap().is_empty());
        assert_eq!(
            extract_slots(&toks("six at seven"), &["Time", "O", "Time"]).unwrap(),
            vec![SlotEntry::new("Time", "six"), SlotEntry::new("Time", "seven")]
        );
        assert_eq!(
            extract_slots(&t, &["O"]),
            Err(MetricsError::LengthMismatch { tokens: 6, tags: 1 })
        );
    }

    fn table_one_reference() -> Vec<SlotEntry> {
        vec![
            SlotEntry::new("NotificationType", "alarm"),
            SlotEntry::new("Time", "six a.m"),
        ]
    }

    #[test]
    fn semer_hand_cases() {
        let r = table_one_reference();
        let intent = "SetNotificationIntent";
        let perfect = semer_counts(&intent, &r, &intent, &r);
        assert_eq!(
            perfect,
            SemerCounts {
                correct: 3,
                ..Default::default()
            }
        );
        assert_eq!(semer(&perfect).unwrap(), 0.0);

        let mut wrong_time = r.clone();
        wrong_time[1].value = "six p.m".into();
        let c = semer_counts(&intent, &r, &intent, &wrong_time);
        assert_eq!((c.correct, c.substitution), (2, 1));
        assert!((semer(&c).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let mut extra = r.clone();
        extra.push(SlotEntry::new("Device", "kitchen"));
        let c = semer_counts(&intent, &r, &intent, &extra);
        assert_eq!((c.correct, c.insertion), (3, 1));
        assert!((semer(&c).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let c = semer_counts(&intent, &r, &"PlayMusic", &r);
        assert_eq!((c.correct, c.substitution), (2, 1));
    }

    #[test]
    fn semer_irer_icer_arithmetic() {
        let c = SemerCounts {
            correct: 1,
            deletion: 1,
            insertion: 1,
            substitution: 1,
        };
        assert_eq!(semer(&c).unwrap(), 1.0);
        assert_eq!(semer(&SemerCounts::default()), Err(MetricsError::ZeroDenominator));
        let ok = SemerCounts {
            correct: 3,
            ..Default::default()
        };
        assert_eq!(irer(&[ok, c]).unwrap(), 0.5);
        let pairs = [(0, 0), (1, 1), (2, 0), (0, 0)];
        assert_eq!(icer(&pairs, IcerAveraging::Micro).unwrap(), 0.25);
        // Class 0: 0/2 wrong, class 1: 0/1, class 2: 1/1.
        assert!((icer(&pairs, IcerAveraging::Macro).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dp_matches_brute_force_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(0..=6);
            let m = rng.random_range(0..=6);
            let r: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let h: Vec<u8> = (0..m).map(|_| rng.random_range(0..3)).collect();
            let c = word_edit_distance(&r, &h);
            assert_eq!(c.distance, brute_force_distance(&r, &h));
            assert_eq!(c.distance, c.insertions + c.deletions + c.substitutions);
            // Alignment consistency: every reference token is either kept,
            // substituted or deleted.
            assert!(c.deletions + c.substitutions <= n);
            assert_eq!(n - c.deletions + c.insertions, m);
        }
    }

    proptest! {
        #[test]
        fn distance_bounds(r in prop::collection::vec(0u8..4, 0..8), h in prop::collection::vec(0u8..4, 0..8)) {
            let d = word_edit_distance(&r, &h).distance;
            prop_assert!(d <= r.len() + h.len());
            prop_assert_eq!(d == 0, r == h);
        }

        #[test]
        fn semer_zero_iff_exact_match(
            intents in (0u8..3, 0u8..3),
            slots in prop::collection::vec((0u8..3, 0u8..3), 0..4),
            hyp in prop::collection::vec((0u8..3, 0u8..3), 0..4),
        ) {
            let mk = |v: &[(u8, u8)]| v.iter().map(|(n, x)| SlotEntry::new(format!("S{n}"), format!("v{x}"))).collect::<Vec<_>>();
            let (r, h) = (mk(&slots), mk(&hyp));
            let c = semer_counts(&intents.0, &r, &intents.1, &h);
            let s = semer(&c).unwrap();
            let mut rs = r.clone();
            let mut hs = h.clone();
            rs.sort_by(|a, b| (&a.name, &a.value).cmp(&(&b.name, &b.value)));
            hs.sort_by(|a, b| (&a.name, &a.value).cmp(&(&b.name, &b.value)));
            let exact = intents.0 == intents.1 && rs == hs;
            // Name-keyed order-preserving matching only guarantees the
            // forward direction for reordered equal multisets.
            if s == 0.0 { prop_assert!(exact); }
            if exact && r == h { prop_assert_eq!(s, 0.0); }
            if s > 1.0 { prop_assert!(c.insertion > 0); }
        }

        #[test]
        fn corpus_metrics_ignore_order(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let items: Vec<(Vec<usize>, Vec<usize>, usize, usize)> = (0..6)
                .map(|_| {
                    let r = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..4)).collect();
                    let h = (0..rng.random_range(0..5)).map(|_| rng.random_range(0..4)).collect();
                    (r, h, rng.random_range(0..3), rng.random_range(0..3))
                })
                .collect();
            let score = |order: &[usize]| {
                let mut acc = MetricAccumulator::new();
                for &i in order {
                    let (r, h, ri, hi) = &items[i];
                    acc.add(Some((r, h)), *ri, &[], *hi, &[]);
                }
                acc.report().unwrap()
            };
            let fwd: Vec<usize> = (0..6).collect();
            let rev: Vec<usize> = (0..6).rev().collect();
            let (a, b) = (score(&fwd), score(&rev));
            prop_assert_eq!(a.wer, b.wer);
            prop_assert_eq!(a.semer, b.semer);
            prop_assert_eq!(a.irer, b.irer);
        }
    }
}
