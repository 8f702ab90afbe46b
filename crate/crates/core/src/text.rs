//! Text normalization shared by alias indexing and question processing.
//!
//! Both sides of entity linking must agree on tokenization, so every piece of
//! text that reaches an index or a model goes through [`normalize`].

/// Lowercases, strips leading/trailing non-alphanumeric characters from each
/// whitespace-separated token, and drops tokens that become empty.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|tok| !tok.is_empty())
        .collect()
}

/// Normalized tokens joined by single spaces.
pub fn normalize_joined(text: &str) -> String {
    normalize(text).join(" ")
}

/// All contiguous `n`-grams of `tokens`, space-joined, in left-to-right order.
pub fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = String> + '_ {
    let windows = if n == 0 || n > tokens.len() { &tokens[..0] } else { tokens };
    windows.windows(n.max(1)).map(|w| {
        let mut out = String::new();
        for (i, t) in w.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(t.as_ref());
        }
        out
    })
}

/// 64-bit FNV-1a. Used where a hash must be stable across builds and platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_punctuation_and_case() {
        assert_eq!(normalize("  How old is Sarah Michelle-Gellar? "), vec!["how", "old", "is", "sarah", "michelle-gellar"]);
        assert_eq!(normalize("F. Prinze"), vec!["f", "prinze"]);
        assert_eq!(normalize("\"what\" ... is"), vec!["what", "is"]);
        assert!(normalize(" ?! ").is_empty());
    }

    #[test]
    fn inner_punctuation_is_kept() {
        assert_eq!(normalize("4/14/1977"), vec!["4/14/1977"]);
    }

    #[test]
    fn ngram_windows() {
        let toks = normalize("sarah michelle gellar");
        assert_eq!(ngrams(&toks, 1).count(), 3);
        assert_eq!(ngrams(&toks, 2).collect::<Vec<_>>(), vec!["sarah michelle", "michelle gellar"]);
        assert_eq!(ngrams(&toks, 3).collect::<Vec<_>>(), vec!["sarah michelle gellar"]);
        assert_eq!(ngrams(&toks, 4).count(), 0);
        assert_eq!(ngrams(&toks, 0).count(), 0);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
