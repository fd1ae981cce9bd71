//! Character vocabulary, encoding and fixed-length windowing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Marker emitted when decoding the reserved unknown id.
pub const UNK_MARKER: &str = "⟨unk⟩";
pub const UNK_ID: u32 = 0;

/// Token strings with dense ids; id 0 is reserved for unknown input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from the token list, `tokens[0]` being the unknown slot.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Vocab(format!("need at least 2 entries, got {}", tokens.len())));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate().skip(1) {
            if tok.chars().count() != 1 {
                return Err(Error::Vocab(format!("token {id} is not a single character: {tok:?}")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Top `size - 1` characters by frequency (ties by code point) plus the unknown slot.
    pub fn build<'a, I>(texts: I, size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if size < 2 {
            return Err(Error::Vocab(format!("size must be >= 2, got {size}")));
        }
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        for text in texts {
            for ch in text.chars() {
                *counts.entry(ch).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus("no characters to build a vocabulary from".into()));
        }
        let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut tokens = vec![UNK_MARKER.to_string()];
        tokens.extend(ranked.into_iter().take(size - 1).map(|(c, _)| c.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut buf = [0u8; 4];
        text.chars().map(|c| self.index.get(c.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id)?);
        }
        Ok(out)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        match id {
            UNK_ID => Ok(UNK_MARKER),
            _ => self
                .tokens
                .get(id as usize)
                .map(String::as_str)
                .ok_or(Error::NodeOutOfRange { id, n: self.tokens.len() }),
        }
    }

    /// One token per line, line number = id. Control characters are escaped.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(&escape_token(tok));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let tokens = text.split_terminator('\n').map(unescape_token).collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn unescape_token(line: &str) -> Result<String> {
    let mut out = String::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('u') => {
                let rest: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let hex = rest.strip_prefix('{').ok_or_else(|| Error::Vocab(format!("bad escape in {line:?}")))?;
                let ch = u32::from_str_radix(hex, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Vocab(format!("bad escape in {line:?}")))?;
                out.push(ch);
            }
            _ => return Err(Error::Vocab(format!("bad escape in {line:?}"))),
        }
    }
    Ok(out)
}

/// Windows of at most `max_len` ids, starting every `stride` ids. The stream
/// ends with the first window that reaches the end of `ids`; windows shorter
/// than 2 are never emitted.
pub fn windows(ids: &[u32], max_len: usize, stride: usize) -> Windows<'_> {
    assert!(max_len >= 2 && stride >= 1, "max_len >= 2 and stride >= 1");
    Windows { ids, max_len, stride, start: 0, done: false }
}

pub struct Windows<'a> {
    ids: &'a [u32],
    max_len: usize,
    stride: usize,
    start: usize,
    done: bool,
}

impl<'a> Iterator for Windows<'a> {
    type Item = &'a [u32];

    fn next(&mut self) -> Option<&'a [u32]> {
        if self.done || self.start + 2 > self.ids.len() {
            return None;
        }
        let end = (self.start + self.max_len).min(self.ids.len());
        let window = &self.ids[self.start..end];
        self.done = end == self.ids.len();
        self.start += self.stride;
        Some(window)
    }
}

/// Reads UTF-8 text files in order.
pub fn read_texts<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<String>> {
    paths.iter().map(|p| Ok(fs::read_to_string(p.as_ref())?)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn build_examples() {
        let v = Vocabulary::build(["aab"], 3).unwrap();
        assert_eq!(v.tokens(), &[UNK_MARKER, "a", "b"]);
        let v = Vocabulary::build(["ab"], 2).unwrap();
        assert_eq!(v.tokens(), &[UNK_MARKER, "a"]);
        let v = Vocabulary::build(["ba"], 2).unwrap();
        assert_eq!(v.tokens(), &[UNK_MARKER, "a"]);
        assert!(Vocabulary::build([""], 4).is_err());
        assert!(Vocabulary::build(["abc"], 1).is_err());
        // fewer distinct characters than requested: vocabulary is smaller
        assert_eq!(Vocabulary::build(["aa"], 10).unwrap().len(), 2);
    }

    #[test]
    fn rebuild_gives_identical_file() {
        let corpus = ["the quick brown fox\njumps", "over\tthe lazy dog \\ 狐狸"];
        let a = Vocabulary::build(corpus, 50).unwrap().to_file_string();
        let b = Vocabulary::build(corpus, 50).unwrap().to_file_string();
        assert_eq!(a, b);
        let parsed = Vocabulary::from_file_string(&a).unwrap();
        assert_eq!(parsed, Vocabulary::build(corpus, 50).unwrap());
        assert!(parsed.id("\n").is_some() && parsed.id("\\").is_some() && parsed.id("狐").is_some());
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocabulary::build(["aab"], 3).unwrap();
        assert_eq!(v.encode("ab"), vec![1, 2]);
        assert_eq!(v.encode("ax"), vec![1, 0]);
        assert_eq!(v.decode(&[1, 0]).unwrap(), "a⟨unk⟩");
        assert_eq!(v.decode(&v.encode("abba")).unwrap(), "abba");
        assert!(matches!(v.decode(&[3]), Err(Error::NodeOutOfRange { id: 3, n: 3 })));
    }

    #[test]
    fn window_examples() {
        let ids: Vec<u32> = (0..70).collect();
        let lens: Vec<usize> = windows(&ids, 32, 32).map(|w| w.len()).collect();
        assert_eq!(lens, vec![32, 32, 6]);
        assert_eq!(windows(&[7], 32, 32).count(), 0);
        let ids: Vec<u32> = (0..5).collect();
        let got: Vec<&[u32]> = windows(&ids, 3, 1).collect();
        assert_eq!(got, vec![&[0, 1, 2][..], &[1, 2, 3], &[2, 3, 4]]);
        assert_eq!(windows(&ids, 2, 3).collect::<Vec<_>>(), vec![&[0, 1][..], &[3, 4]]);
        assert_eq!(windows(&ids, 8, 8).collect::<Vec<_>>(), vec![&ids[..]]);
    }

    proptest! {
        #[test]
        fn windows_have_valid_lengths(len in 0usize..200, max in 2usize..40, stride in 1usize..50) {
            let ids: Vec<u32> = (0..len as u32).collect();
            for w in windows(&ids, max, stride) {
                prop_assert!(w.len() >= 2 && w.len() <= max);
            }
        }

        #[test]
        fn round_trip_in_vocab(text in "[a-e\n ]{0,40}") {
            let v = Vocabulary::build(["abcde\n "], 10).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), text);
        }

        #[test]
        fn build_ignores_line_order(mut lines in proptest::collection::vec("[a-z]{0,12}", 1..8), size in 2usize..12) {
            let joined = lines.join("\n");
            prop_assume!(!joined.is_empty());
            let a = Vocabulary::build([joined.as_str()], size).unwrap();
            lines.reverse();
            let b = Vocabulary::build([lines.join("\n").as_str()], size).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
