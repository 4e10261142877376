//! Text front-end and alignment ingestion.
//!
//! Words are looked up in a pronouncing [`Lexicon`] after uppercasing and
//! punctuation stripping. Punctuation contributes a single silence phone
//! attached to the end of the word it follows. Phone durations come from an
//! external aligner through the corpus manifest and are validated against
//! the extracted features.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FrameRange, VocoderFeatures};

pub const SILENCE_PHONE: &str = "SIL";

/// Word → pronunciation map with a fixed phone inventory. Phone ID 0 is
/// always [`SILENCE_PHONE`]; the rest are the lexicon's phones in sorted
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<u32>>,
    inventory: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Lexicon {
    pub fn from_entries<I, W, P>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (W, P)>,
        W: AsRef<str>,
        P: AsRef<str>,
    {
        let mut raw: Vec<(String, Vec<String>)> = Vec::new();
        for (word, pron) in entries {
            let word = normalize_word(word.as_ref());
            let phones: Vec<String> = pron.as_ref().split_whitespace().map(str::to_string).collect();
            if word.is_empty() || phones.is_empty() {
                return Err(Error::invalid(format!(
                    "lexicon entry '{}' has an empty word or pronunciation",
                    word
                )));
            }
            raw.push((word, phones));
        }
        let mut set: BTreeSet<&str> = BTreeSet::new();
        for (_, phones) in &raw {
            set.extend(phones.iter().map(String::as_str).filter(|p| *p != SILENCE_PHONE));
        }
        let inventory: Vec<String> = std::iter::once(SILENCE_PHONE)
            .chain(set)
            .map(str::to_string)
            .collect();
        let ids: HashMap<String, u32> = inventory
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let mut entries = HashMap::new();
        for (word, phones) in raw {
            let pron = phones.iter().map(|p| ids[p]).collect();
            // First pronunciation wins, as in CMUdict-style files.
            entries.entry(word).or_insert(pron);
        }
        Ok(Self {
            entries,
            inventory,
            ids,
        })
    }

    /// Parses `WORD PH1 PH2 ...` lines. Blank lines, `#` and `;;;` comments
    /// and alternate pronunciations (`WORD(2)`) are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(";;;") {
                continue;
            }
            let (word, pron) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Format(format!("lexicon line {}: no pronunciation", n + 1)))?;
            if word.ends_with(')') && word.contains('(') {
                continue;
            }
            entries.push((word.to_string(), pron.trim().to_string()));
        }
        Self::from_entries(entries)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    pub fn phone_id(&self, phone: &str) -> Result<u32> {
        self.ids
            .get(phone)
            .copied()
            .ok_or_else(|| Error::UnknownPhone(phone.to_string()))
    }

    pub fn phone_name(&self, id: u32) -> Option<&str> {
        self.inventory.get(id as usize).map(String::as_str)
    }

    pub fn silence_id(&self) -> u32 {
        0
    }

    pub fn lookup(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(&normalize_word(word)).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.lookup(word).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Phone-rate linguistic input for one utterance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSequence {
    pub phones: Vec<u32>,
    /// Source word of each phone; non-decreasing.
    pub word_index: Vec<usize>,
    /// True on the first phone of every word.
    pub is_word_boundary: Vec<bool>,
    /// Normalised words, indexed by `word_index`.
    pub words: Vec<String>,
}

impl PhoneSequence {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Phone index range covering words `[first, last)`.
    pub fn phone_range_of_words(&self, first: usize, last: usize) -> std::ops::Range<usize> {
        let start = self.word_index.partition_point(|&w| w < first);
        let end = self.word_index.partition_point(|&w| w < last);
        start..end
    }

    fn push_word(&mut self, word: String, phones: &[u32]) {
        let w = self.words.len();
        self.words.push(word);
        for (k, &p) in phones.iter().enumerate() {
            self.phones.push(p);
            self.word_index.push(w);
            self.is_word_boundary.push(k == 0);
        }
    }

    /// Appends `other`, shifting its word indices past ours.
    pub fn extend(&mut self, other: &PhoneSequence) {
        let offset = self.words.len();
        self.phones.extend_from_slice(&other.phones);
        self.word_index.extend(other.word_index.iter().map(|w| w + offset));
        self.is_word_boundary.extend_from_slice(&other.is_word_boundary);
        self.words.extend(other.words.iter().cloned());
    }

    pub fn validate(&self, inventory_size: usize) -> Result<()> {
        let n = self.phones.len();
        if self.word_index.len() != n || self.is_word_boundary.len() != n {
            return Err(Error::Shape("phone sequence fields differ in length".into()));
        }
        if let Some(&p) = self.phones.iter().find(|&&p| p as usize >= inventory_size) {
            return Err(Error::UnknownPhone(format!("id {p}")));
        }
        if self.word_index.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("word indices must be non-decreasing"));
        }
        if self.word_index.last().is_some_and(|&w| w >= self.words.len()) {
            return Err(Error::invalid("word index past the word list"));
        }
        Ok(())
    }
}

fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'' || *c == '-')
        .collect::<String>()
        .to_uppercase()
}

fn is_punctuation(c: char) -> bool {
    matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '-' | '(' | ')' | '"')
}

/// Splits `text` into `(word, trailing_silence)` tokens. Tokens without
/// any letters or digits are pure punctuation and only mark a pause after
/// the previous word.
fn tokenize(text: &str) -> Vec<(String, bool)> {
    let mut out: Vec<(String, bool)> = Vec::new();
    for raw in text.split_whitespace() {
        let word = normalize_word(raw);
        let tail = raw
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_alphanumeric())
            .map_or(raw, |(i, c)| &raw[i + c.len_utf8()..]);
        let pause = tail.chars().any(is_punctuation);
        if word.is_empty() {
            if let Some(last) = out.last_mut() {
                last.1 |= raw.chars().any(is_punctuation);
            }
            continue;
        }
        out.push((word, pause));
    }
    out
}

/// Normalised words of `text`, in order, as used by [`text_to_phones`].
pub fn words_of(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|(w, _)| w).collect()
}

pub fn text_to_phones(text: &str, lexicon: &Lexicon) -> Result<PhoneSequence> {
    let mut seq = PhoneSequence::default();
    for (word, pause) in tokenize(text) {
        let pron = lexicon
            .lookup(&word)
            .ok_or_else(|| Error::OutOfLexicon(word.clone()))?;
        let mut phones = pron.to_vec();
        if pause && phones.last() != Some(&lexicon.silence_id()) {
            phones.push(lexicon.silence_id());
        }
        seq.push_word(word, &phones);
    }
    Ok(seq)
}

/// One line of the corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub text: String,
    pub phones: String,
    pub durations_frames: Vec<usize>,
    pub speaker_id: String,
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn read_manifest_file(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    read_manifest(&std::fs::read_to_string(path)?)
}

/// Builds the phone sequence an aligner produced for `record`, assigning
/// each manifest phone to a transcript word. Aligners insert silences the
/// transcript does not predict and may drop punctuation pauses; both are
/// tolerated. Extra silences belong to the preceding word (the first word
/// when leading).
pub fn manifest_phones(record: &ManifestRecord, lexicon: &Lexicon) -> Result<PhoneSequence> {
    let text = text_to_phones(&record.text, lexicon)?;
    let sil = lexicon.silence_id();
    let mut seq = PhoneSequence {
        words: text.words.clone(),
        ..Default::default()
    };
    let mut j = 0;
    for (i, name) in record.phones.split_whitespace().enumerate() {
        let id = lexicon.phone_id(name)?;
        while j < text.len() && text.phones[j] == sil && id != sil {
            j += 1;
        }
        let word = if j < text.len() && text.phones[j] == id {
            j += 1;
            text.word_index[j - 1]
        } else if id == sil {
            seq.word_index.last().copied().unwrap_or(0)
        } else {
            let expected = text.phones.get(j).and_then(|&p| lexicon.phone_name(p)).unwrap_or("<end>");
            return Err(Error::invalid(format!(
                "record {}: manifest phone {i} is {name}, transcript expects {expected}",
                record.id
            )));
        };
        if seq.words.is_empty() {
            return Err(Error::invalid(format!("record {}: phones for an empty transcript", record.id)));
        }
        let boundary = seq.word_index.last() != Some(&word);
        seq.phones.push(id);
        seq.word_index.push(word);
        seq.is_word_boundary.push(boundary);
    }
    if text.phones[j..].iter().any(|&p| p != sil) {
        return Err(Error::invalid(format!(
            "record {}: manifest ends before the transcript's phones do",
            record.id
        )));
    }
    if seq.word_index.last().map_or(0, |w| w + 1) != seq.words.len() {
        return Err(Error::invalid(format!("record {}: some words have no phones", record.id)));
    }
    Ok(seq)
}

/// Frame-level alignment of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub spans: Vec<FrameRange>,
    pub phone_durations: Vec<usize>,
}

impl WordAlignment {
    pub fn total_frames(&self) -> usize {
        self.phone_durations.iter().sum()
    }

    /// Start frame of every phone.
    pub fn phone_starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.phone_durations
            .iter()
            .map(|d| {
                let s = acc;
                acc += d;
                s
            })
            .collect()
    }

    fn from_durations(phones: &PhoneSequence, durations: Vec<usize>) -> Self {
        let mut spans: Vec<FrameRange> = (0..phones.word_count()).map(|_| FrameRange::new(0, 0)).collect();
        let mut t = 0;
        let mut seen = vec![false; spans.len()];
        for (&w, &d) in phones.word_index.iter().zip(&durations) {
            if !seen[w] {
                spans[w] = FrameRange::new(t, t);
                seen[w] = true;
            }
            t += d;
            spans[w].end = t;
        }
        Self {
            spans,
            phone_durations: durations,
        }
    }
}

/// Validates `record`'s durations against `features` and derives word spans.
pub fn ingest_alignment(
    record: &ManifestRecord,
    features: &VocoderFeatures,
    phones: &PhoneSequence,
) -> Result<WordAlignment> {
    let durations = &record.durations_frames;
    if durations.len() != phones.len() {
        return Err(Error::PhoneCountMismatch {
            expected: phones.len(),
            found: durations.len(),
        });
    }
    let manifest_count = record.phones.split_whitespace().count();
    if manifest_count != durations.len() {
        return Err(Error::PhoneCountMismatch {
            expected: manifest_count,
            found: durations.len(),
        });
    }
    let sum: usize = durations.iter().sum();
    if sum != features.frame_count() {
        return Err(Error::AlignmentMismatch {
            sum,
            frames: features.frame_count(),
        });
    }
    Ok(WordAlignment::from_durations(phones, durations.clone()))
}

/// Even split of `frames` over the phones (the first `frames mod P` phones
/// get one extra frame).
pub fn uniform_fallback_alignment(phones: &PhoneSequence, frames: usize) -> Result<WordAlignment> {
    let p = phones.len();
    if p == 0 || frames < p {
        return Err(Error::invalid(format!(
            "cannot spread {frames} frames over {p} phones"
        )));
    }
    let (base, rem) = (frames / p, frames % p);
    let durations = (0..p).map(|i| base + usize::from(i < rem)).collect();
    Ok(WordAlignment::from_durations(phones, durations))
}
