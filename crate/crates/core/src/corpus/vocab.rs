use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

const CORE_SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

fn lang_surface(lang: &str) -> String {
    format!("<lang:{lang}>")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub surface: String,
    /// Set for whole-word entries; character fallback units carry `false`.
    pub word_begin: bool,
}

/// One input text file tagged with its language.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub lang: String,
    pub path: std::path::PathBuf,
}

/// Token inventory shared by all languages.
///
/// Ids are dense. The five core specials take ids 0..5, followed by one
/// language-id token per language, then whole words in frequency order, then
/// the remaining single-character fallback units.
#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    langs: Vec<String>,
    words: HashMap<String, u32>,
    chars: HashMap<char, u32>,
    freq: BTreeMap<String, Vec<f64>>,
}

impl Vocab {
    /// Builds a vocabulary from in-memory monolingual text, one `(lang, lines)`
    /// pair per language. Frequencies are computed over exactly these lines.
    pub fn build(corpora: &[(String, Vec<String>)], size: usize) -> Result<Self> {
        let mut langs: Vec<String> = Vec::new();
        for (lang, _) in corpora {
            if !langs.contains(lang) {
                langs.push(lang.clone());
            }
        }
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut inventory: BTreeSet<char> = BTreeSet::new();
        for (_, lines) in corpora {
            for line in lines {
                for w in line.split_whitespace() {
                    *word_counts.entry(w).or_default() += 1;
                    inventory.extend(w.chars());
                }
            }
        }
        if word_counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let n_specials = CORE_SPECIALS.len() + langs.len();
        let required = n_specials + inventory.len();
        if size < required {
            return Err(Error::VocabTooSmall {
                size,
                required,
                deficit: required - size,
            });
        }

        let mut entries: Vec<VocabEntry> = CORE_SPECIALS
            .iter()
            .map(|s| VocabEntry { surface: s.to_string(), word_begin: false })
            .chain(langs.iter().map(|l| VocabEntry { surface: lang_surface(l), word_begin: false }))
            .collect();

        let mut ranked: Vec<(&str, u64)> = word_counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        // Single-character words coincide with fallback units and cost no slot.
        let mut free_slots = size - required;
        let mut chosen_chars: BTreeSet<char> = BTreeSet::new();
        for (w, _) in ranked {
            if CORE_SPECIALS.contains(&w) || w.starts_with("<lang:") {
                continue;
            }
            let mut it = w.chars();
            let single = match (it.next(), it.next()) {
                (Some(c), None) => Some(c),
                _ => None,
            };
            match single {
                Some(c) => {
                    chosen_chars.insert(c);
                }
                None if free_slots > 0 => free_slots -= 1,
                None => continue,
            }
            entries.push(VocabEntry { surface: w.to_string(), word_begin: true });
        }
        for c in inventory {
            if !chosen_chars.contains(&c) {
                entries.push(VocabEntry { surface: c.to_string(), word_begin: false });
            }
        }

        let mut vocab = Self::from_entries(entries, langs)?;
        for (lang, lines) in corpora {
            let counts = vocab.count_tokens(lines.iter().map(|s| s.as_str()));
            let slot = vocab
                .freq
                .entry(lang.clone())
                .or_insert_with(|| vec![0.0; counts.len()]);
            for (acc, c) in slot.iter_mut().zip(counts) {
                *acc += c as f64;
            }
        }
        vocab.normalize_freq();
        Ok(vocab)
    }

    /// Reads UTF-8 corpus files (one sentence per line) and builds the vocabulary.
    pub fn build_from_files(files: &[CorpusFile], size: usize) -> Result<Self> {
        let mut per_lang: Vec<(String, Vec<String>)> = Vec::new();
        for f in files {
            let text = fs::read_to_string(&f.path)?;
            let lines = text.lines().map(str::to_owned).filter(|l| !l.trim().is_empty());
            match per_lang.iter_mut().find(|(l, _)| *l == f.lang) {
                Some((_, v)) => v.extend(lines),
                None => per_lang.push((f.lang.clone(), lines.collect())),
            }
        }
        Self::build(&per_lang, size)
    }

    fn from_entries(entries: Vec<VocabEntry>, langs: Vec<String>) -> Result<Self> {
        let n_specials = CORE_SPECIALS.len() + langs.len();
        let mut words = HashMap::new();
        let mut chars = HashMap::new();
        let mut seen = BTreeSet::new();
        for (id, e) in entries.iter().enumerate() {
            if !seen.insert(e.surface.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate surface `{}`", e.surface)));
            }
            if id < n_specials {
                continue;
            }
            if e.word_begin {
                words.insert(e.surface.clone(), id as u32);
            }
            let mut it = e.surface.chars();
            if let (Some(c), None) = (it.next(), it.next()) {
                chars.insert(c, id as u32);
            }
        }
        Ok(Self { entries, langs, words, chars, freq: BTreeMap::new() })
    }

    fn count_tokens<'a>(&self, lines: impl Iterator<Item = &'a str>) -> Vec<u64> {
        let mut counts = vec![0u64; self.len()];
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            for id in self.tokenize(line, "").ids {
                counts[id as usize] += 1;
            }
        }
        counts
    }

    fn normalize_freq(&mut self) {
        let n_specials = self.n_specials();
        for table in self.freq.values_mut() {
            for v in table.iter_mut().take(n_specials) {
                *v = 0.0;
            }
            let total: f64 = table.iter().sum();
            if total > 0.0 {
                table.iter_mut().for_each(|v| *v /= total);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u32) -> Result<&VocabEntry> {
        self.entries
            .get(id as usize)
            .ok_or(Error::IdOutOfRange { id, size: self.len() })
    }

    pub fn languages(&self) -> &[String] {
        &self.langs
    }

    pub fn n_specials(&self) -> usize {
        CORE_SPECIALS.len() + self.langs.len()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.n_specials()
    }

    pub fn special_ids(&self) -> impl Iterator<Item = u32> {
        0..self.n_specials() as u32
    }

    pub fn lang_id(&self, lang: &str) -> Result<u32> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .map(|i| (CORE_SPECIALS.len() + i) as u32)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.words.get(word).copied()
    }

    pub fn char_id(&self, c: char) -> Option<u32> {
        self.chars.get(&c).copied()
    }

    /// Relative frequencies of every id in `lang`'s monolingual text
    /// (specials are zero).
    pub fn freq(&self, lang: &str) -> Result<&[f64]> {
        self.freq
            .get(lang)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Non-special whole words observed in `lang`.
    pub fn word_inventory(&self, lang: &str) -> Result<Vec<u32>> {
        let f = self.freq(lang)?;
        Ok((self.n_specials()..self.len())
            .filter(|&i| self.entries[i].word_begin && f[i] > 0.0)
            .map(|i| i as u32)
            .collect())
    }

    /// Specials plus every id whose frequency in `lang` is at least `threshold`.
    pub fn frequency_mask(&self, lang: &str, threshold: f64) -> Result<BTreeSet<u32>> {
        let f = self.freq(lang)?;
        Ok((0..self.len() as u32)
            .filter(|&i| self.is_special(i) || f[i as usize] >= threshold)
            .collect())
    }

    /// Serialized vocabulary records: `surface \t id \t word_begin`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}", e.surface, id, u8::from(e.word_begin));
        }
        out
    }

    pub fn freq_tsv(&self, lang: &str) -> Result<String> {
        let f = self.freq(lang)?;
        let mut out = String::new();
        for (id, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.surface, id, u8::from(e.word_begin), f[id]);
        }
        Ok(out)
    }

    /// SHA-256 over the vocabulary records (frequencies excluded).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    /// Writes `vocab.tsv` plus one `freq.<lang>.tsv` sidecar per language.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("vocab.tsv"), self.to_tsv())?;
        for lang in self.freq.keys() {
            fs::write(dir.join(format!("freq.{lang}.tsv")), self.freq_tsv(lang)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("vocab.tsv"))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut f = line.split('\t');
            let (Some(surface), Some(id), Some(flag)) = (f.next(), f.next(), f.next()) else {
                return Err(Error::InvalidArgument(format!("vocab.tsv line {}: expected 3 fields", lineno + 1)));
            };
            if id.parse::<usize>().ok() != Some(lineno) {
                return Err(Error::InvalidArgument(format!("vocab.tsv line {}: id {id} is not dense", lineno + 1)));
            }
            entries.push(VocabEntry { surface: surface.to_string(), word_begin: flag == "1" });
        }
        if entries.len() < CORE_SPECIALS.len()
            || entries.iter().zip(CORE_SPECIALS).any(|(e, s)| e.surface != s)
        {
            return Err(Error::InvalidArgument("vocab.tsv does not start with the core specials".into()));
        }
        let langs: Vec<String> = entries[CORE_SPECIALS.len()..]
            .iter()
            .map_while(|e| {
                e.surface
                    .strip_prefix("<lang:")
                    .and_then(|s| s.strip_suffix('>'))
                    .map(str::to_owned)
            })
            .collect();
        let mut vocab = Self::from_entries(entries, langs.clone())?;
        for lang in langs {
            let path = dir.join(format!("freq.{lang}.tsv"));
            if !path.exists() {
                continue;
            }
            let table = fs::read_to_string(path)?
                .lines()
                .map(|l| {
                    l.rsplit('\t')
                        .next()
                        .and_then(|v| v.parse::<f64>().ok())
                        .ok_or_else(|| Error::InvalidArgument(format!("bad frequency record `{l}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if table.len() != vocab.len() {
                return Err(Error::LengthMismatch(format!(
                    "frequency table for {lang} has {} rows, vocab has {}",
                    table.len(),
                    vocab.len()
                )));
            }
            vocab.freq.insert(lang, table);
        }
        Ok(vocab)
    }
}

/// Maps token ids back to the specials' or units' surfaces, for diagnostics.
pub fn surfaces(vocab: &Vocab, ids: &[u32]) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.entry(i).map(|e| e.surface.clone()).unwrap_or_else(|_| format!("#{i}")))
        .collect()
}
