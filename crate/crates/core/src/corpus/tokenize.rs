use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, EOS, UNK};
use crate::error::{Error, Result};

/// Token ids with whole-word grouping and a language tag.
///
/// `word_starts` lists the index of the first unit of every word group; the
/// groups tile `ids` contiguously. Special tokens form single-unit groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub word_starts: Vec<usize>,
    pub lang: String,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, word_starts: Vec<usize>, lang: impl Into<String>) -> Result<Self> {
        let seq = Self { ids, word_starts, lang: lang.into() };
        seq.check()?;
        Ok(seq)
    }

    pub fn empty(lang: impl Into<String>) -> Self {
        Self { ids: Vec::new(), word_starts: Vec::new(), lang: lang.into() }
    }

    fn check(&self) -> Result<()> {
        let ok = match self.word_starts.first() {
            None => self.ids.is_empty(),
            Some(&first) => {
                first == 0
                    && self.word_starts.windows(2).all(|w| w[0] < w[1])
                    && *self.word_starts.last().unwrap() < self.ids.len()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "word_starts {:?} do not partition {} ids",
                self.word_starts,
                self.ids.len()
            )))
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_starts.len()
    }

    /// Index range of word group `w`.
    pub fn word_range(&self, w: usize) -> std::ops::Range<usize> {
        let start = self.word_starts[w];
        let end = self.word_starts.get(w + 1).copied().unwrap_or(self.ids.len());
        start..end
    }

    pub fn words(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n_words()).map(|w| self.word_range(w))
    }

    /// Appends one token as its own word group.
    pub fn push_single(&mut self, id: u32) {
        self.word_starts.push(self.ids.len());
        self.ids.push(id);
    }

    /// Prepends one token as its own word group.
    pub fn prepend_single(&mut self, id: u32) {
        self.ids.insert(0, id);
        for s in &mut self.word_starts {
            *s += 1;
        }
        self.word_starts.insert(0, 0);
    }
}

impl Vocab {
    /// Whole-word lookup per whitespace-delimited word, falling back to
    /// single-character units (UNK for characters outside the inventory).
    pub fn tokenize(&self, text: &str, lang: &str) -> TokenSeq {
        let mut seq = TokenSeq::empty(lang);
        for word in text.split_whitespace() {
            seq.word_starts.push(seq.ids.len());
            match self.word_id(word) {
                Some(id) => seq.ids.push(id),
                None => seq
                    .ids
                    .extend(word.chars().map(|c| self.char_id(c).unwrap_or(UNK))),
            }
        }
        seq
    }

    /// Joins units within a word and words with single spaces; specials are dropped.
    pub fn detokenize(&self, seq: &TokenSeq) -> Result<String> {
        let mut words: Vec<String> = Vec::with_capacity(seq.n_words());
        for range in seq.words() {
            let mut w = String::new();
            for &id in &seq.ids[range] {
                let e = self.entry(id)?;
                if !self.is_special(id) {
                    w.push_str(&e.surface);
                }
            }
            if !w.is_empty() {
                words.push(w);
            }
        }
        Ok(words.join(" "))
    }

    /// Rebuilds word grouping for a bare id sequence (e.g. decoder output).
    ///
    /// Whole-word entries and specials start a group; a run of character
    /// units after them is read as one fallback-spelled word.
    pub fn seq_from_ids(&self, ids: &[u32], lang: &str) -> Result<TokenSeq> {
        let mut seq = TokenSeq::empty(lang);
        let mut prev_is_char = false;
        for &id in ids {
            let e = self.entry(id)?;
            let is_char_unit = !e.word_begin && !self.is_special(id);
            if !(is_char_unit && prev_is_char) {
                seq.word_starts.push(seq.ids.len());
            }
            seq.ids.push(id);
            prev_is_char = is_char_unit;
        }
        Ok(seq)
    }

    /// Encoder input framing: `payload </s> <lang>`.
    pub fn frame_source(&self, payload: &TokenSeq) -> Result<TokenSeq> {
        let mut s = payload.clone();
        s.push_single(EOS);
        s.push_single(self.lang_id(&payload.lang)?);
        Ok(s)
    }

    /// Decoder teacher-forcing pair: input `<lang> payload`, target `payload </s>`.
    pub fn frame_target(&self, payload: &TokenSeq) -> Result<(TokenSeq, TokenSeq)> {
        let mut input = payload.clone();
        input.prepend_single(self.lang_id(&payload.lang)?);
        let mut target = payload.clone();
        target.push_single(EOS);
        Ok((input, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(
            &[("X".into(), vec!["aa bb".into(), "aa cc".into()])],
            64,
        )
        .unwrap()
    }

    #[test]
    fn whole_words_get_single_units() {
        let v = vocab();
        let s = v.tokenize("aa bb", "X");
        assert_eq!(s.ids, vec![v.word_id("aa").unwrap(), v.word_id("bb").unwrap()]);
        assert_eq!(s.word_starts, vec![0, 1]);
    }

    #[test]
    fn unknown_word_spelled_in_characters_under_one_group() {
        let v = vocab();
        let s = v.tokenize("aa cab zz", "X");
        // reference splitter: one unit per character, UNK outside the inventory
        let spelled: Vec<u32> = "cab".chars().map(|c| v.char_id(c).unwrap()).collect();
        assert_eq!(&s.ids[1..4], spelled.as_slice());
        assert_eq!(&s.ids[4..], &[UNK, UNK]);
        assert_eq!(s.word_starts, vec![0, 1, 4]);
        // UNK is a special and is dropped on the way back
        assert_eq!(v.detokenize(&s).unwrap(), "aa cab");
    }

    #[test]
    fn detokenize_drops_specials_and_handles_empty() {
        let v = vocab();
        let mut s = v.tokenize("aa bb", "X");
        s.prepend_single(super::super::vocab::BOS);
        s.push_single(EOS);
        assert_eq!(v.detokenize(&s).unwrap(), "aa bb");
        assert_eq!(v.detokenize(&TokenSeq::empty("X")).unwrap(), "");
    }

    #[test]
    fn detokenize_rejects_out_of_range() {
        let v = vocab();
        let s = TokenSeq::new(vec![9999], vec![0], "X").unwrap();
        assert!(matches!(v.detokenize(&s), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn seq_from_ids_regroups_fallback_runs() {
        let v = vocab();
        let s = v.tokenize("aa cab bb", "X");
        let rebuilt = v.seq_from_ids(&s.ids, "X").unwrap();
        assert_eq!(rebuilt, s);
    }

    #[test]
    fn framing_places_language_ids() {
        let v = vocab();
        let p = v.tokenize("aa bb", "X");
        let lid = v.lang_id("X").unwrap();
        let src = v.frame_source(&p).unwrap();
        assert_eq!(&src.ids[2..], &[EOS, lid]);
        let (inp, tgt) = v.frame_target(&p).unwrap();
        assert_eq!(inp.ids[0], lid);
        assert_eq!(inp.word_starts, vec![0, 1, 2]);
        assert_eq!(*tgt.ids.last().unwrap(), EOS);
    }

    #[test]
    fn token_seq_rejects_bad_word_starts() {
        assert!(TokenSeq::new(vec![5, 6], vec![1], "X").is_err());
        assert!(TokenSeq::new(vec![5, 6], vec![0, 2], "X").is_err());
        assert!(TokenSeq::new(vec![5, 6], vec![0, 0], "X").is_err());
    }
}
