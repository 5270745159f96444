//! Byte-level corpora and fixed-length training windows.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenId;

/// `target` is `input` shifted left by one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

pub fn detokenize(tokens: &[TokenId]) -> Result<String> {
    let bytes = tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::contract(format!("token {t} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::contract(e.to_string()))
}

/// Non-overlapping windows: `floor((n - 1) / seq_len)` of them.
pub fn windows(tokens: &[TokenId], seq_len: usize) -> Vec<Window> {
    if seq_len == 0 || tokens.len() < 2 {
        return Vec::new();
    }
    let count = (tokens.len() - 1) / seq_len;
    (0..count)
        .map(|k| {
            let s = k * seq_len;
            Window {
                input: tokens[s..s + seq_len].to_vec(),
                target: tokens[s + 1..s + seq_len + 1].to_vec(),
            }
        })
        .collect()
}

/// Reads a text file and cuts it into windows.
pub fn ingest_corpus(path: &Path, seq_len: usize) -> Result<Vec<Window>> {
    let text = std::fs::read_to_string(path)?;
    if text.is_empty() {
        return Err(Error::contract(format!("corpus {} is empty", path.display())));
    }
    Ok(windows(&tokenize(&text), seq_len))
}

/// Deterministic structured text with redundant filler.
///
/// Each record binds a letter to four digits, runs a stretch of `.` filler
/// (occasionally broken by a noise letter), then recalls the binding:
///
/// ```text
/// q=4821;..........k.....q>4821
/// ```
///
/// Predicting the recalled digits needs the binding tokens; the filler is
/// never needed again.
pub fn synthetic_corpus(len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 64);
    while out.len() < len {
        let key = (b'a' + rng.gen_range(0..26u8)) as char;
        let digits: String = (0..4).map(|_| (b'0' + rng.gen_range(0..10u8)) as char).collect();
        out.push(key);
        out.push('=');
        out.push_str(&digits);
        out.push(';');
        for _ in 0..rng.gen_range(8..=20) {
            if rng.gen_bool(0.05) {
                out.push((b'a' + rng.gen_range(0..26u8)) as char);
            } else {
                out.push('.');
            }
        }
        out.push(key);
        out.push('>');
        out.push_str(&digits);
        out.push('\n');
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abc_with_length_two() {
        let w = windows(&tokenize("abc"), 2);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].input, tokenize("ab"));
        assert_eq!(w[0].target, tokenize("bc"));
    }

    #[test]
    fn window_count() {
        for n in 0..40 {
            let toks = vec![1; n];
            assert_eq!(windows(&toks, 4).len(), n.saturating_sub(1) / 4);
        }
    }

    #[test]
    fn round_trip() {
        let s = "héllo\nworld";
        assert_eq!(detokenize(&tokenize(s)).unwrap(), s);
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(ingest_corpus(f.path(), 4).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_ascii() {
        let a = synthetic_corpus(500, 3);
        assert_eq!(a, synthetic_corpus(500, 3));
        assert_ne!(a, synthetic_corpus(500, 4));
        assert_eq!(a.len(), 500);
        assert!(a.is_ascii());
    }
}
