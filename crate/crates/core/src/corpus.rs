//! Seeded generator of English-like text, used when no corpus file is given.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "that", "this", "one"];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "heavy", "green", "strange", "patient", "early", "cold",
    "silver", "narrow", "gentle", "wild", "distant",
];
const NOUNS: &[&str] = &[
    "river", "house", "teacher", "garden", "letter", "mountain", "window", "child", "ship",
    "forest", "machine", "village", "road", "lamp", "story", "market", "bird", "clock",
];
const VERBS: &[&str] = &[
    "sees", "follows", "remembers", "carries", "finds", "watches", "builds", "opens", "crosses",
    "keeps", "answers", "leaves",
];
const ADVERBS: &[&str] = &["slowly", "again", "today", "quietly", "at night", "once more"];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(DETERMINERS.choose(rng).unwrap());
    out.push(' ');
    if rng.gen_bool(0.6) {
        out.push_str(ADJECTIVES.choose(rng).unwrap());
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).unwrap());
}

fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    out.push_str(VERBS.choose(rng).unwrap());
    out.push(' ');
    noun_phrase(rng, out);
    if rng.gen_bool(0.3) {
        out.push(' ');
        out.push_str(ADVERBS.choose(rng).unwrap());
    }
}

/// At least `min_chars` characters of sentences built from a small grammar.
pub fn builtin_corpus(min_chars: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_chars + 128);
    while out.len() < min_chars {
        let start = out.len();
        clause(&mut rng, &mut out);
        if rng.gen_bool(0.4) {
            out.push_str(", ");
            out.push_str(CONNECTIVES.choose(&mut rng).unwrap());
            out.push(' ');
            clause(&mut rng, &mut out);
        }
        out.push_str(if rng.gen_bool(0.9) { ". " } else { "! " });
        if let Some(c) = out[start..].chars().next() {
            let upper: String = c.to_uppercase().collect();
            out.replace_range(start..start + c.len_utf8(), &upper);
        }
        if rng.gen_bool(0.1) {
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_long_enough() {
        let a = builtin_corpus(5000, 3);
        assert!(a.len() >= 5000);
        assert_eq!(a, builtin_corpus(5000, 3));
        assert_ne!(a, builtin_corpus(5000, 4));
        assert!(a.is_ascii());
    }
}
