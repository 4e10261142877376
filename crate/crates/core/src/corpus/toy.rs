//! Deterministic multi-speaker toy corpus.
//!
//! Each phone has a fixed log-mel envelope (a few formant bumps over a
//! tilt), voicing and periodicity profile. Speakers differ in pitch, formant
//! scale and spectral tilt. Utterances are random word sequences with known
//! per-phone durations, rendered through the baseline vocoder, so the
//! manifest durations are exact by construction.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::dsp::{dct2, MEL_BANDS};
use crate::features::{synthesize_baseline, FrameSpec, VocoderFeatures, MFCC_DIM, PERIODICITY_DIM};
use crate::frontend::{ManifestRecord, SILENCE_PHONE};

pub const WORDS: &[(&str, &str)] = &[
    ("CAT", "K AE T"),
    ("SAT", "S AE T"),
    ("MAT", "M AE T"),
    ("THE", "D AH"),
    ("ON", "AA N"),
    ("DOG", "D AA G"),
    ("FEET", "F IY T"),
    ("MOON", "M UW N"),
    ("RED", "R EH D"),
    ("SEA", "S IY"),
    ("LAKE", "L EH K"),
    ("NEAT", "N IY T"),
    ("ROOM", "R UW M"),
    ("FAST", "F AE S T"),
    ("GREEN", "G R IY N"),
    ("SMALL", "S M AA L"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Vowel,
    Sonorant,
    VoicedStop,
    Fricative,
    Stop,
}

struct PhoneShape {
    class: Class,
    /// Formant centres in mel-band units.
    formants: [f64; 2],
}

fn shape(phone: &str) -> Option<PhoneShape> {
    use Class::*;
    let (class, formants) = match phone {
        "AA" => (Vowel, [12.0, 20.0]),
        "AE" => (Vowel, [14.0, 24.0]),
        "AH" => (Vowel, [11.0, 19.0]),
        "EH" => (Vowel, [10.0, 26.0]),
        "IY" => (Vowel, [5.0, 31.0]),
        "UW" => (Vowel, [6.0, 14.0]),
        "M" => (Sonorant, [4.0, 18.0]),
        "N" => (Sonorant, [4.0, 22.0]),
        "L" => (Sonorant, [7.0, 20.0]),
        "R" => (Sonorant, [8.0, 17.0]),
        "D" => (VoicedStop, [6.0, 28.0]),
        "G" => (VoicedStop, [6.0, 20.0]),
        "S" => (Fricative, [36.0, 36.0]),
        "F" => (Fricative, [30.0, 38.0]),
        "T" => (Stop, [30.0, 34.0]),
        "K" => (Stop, [22.0, 26.0]),
        _ => return None,
    };
    Some(PhoneShape { class, formants })
}

impl Class {
    /// (level, tilt across the band range, formant height)
    fn envelope(self) -> (f64, f64, f64) {
        match self {
            Class::Vowel => (23.0, -6.0, 4.0),
            Class::Sonorant => (21.0, -7.0, 3.0),
            Class::VoicedStop => (19.0, -2.0, 3.0),
            Class::Fricative => (17.5, 7.0, 4.0),
            Class::Stop => (17.0, 4.0, 3.0),
        }
    }

    fn periodicity(self) -> [f32; PERIODICITY_DIM] {
        match self {
            Class::Vowel => [0.95, 0.92, 0.8, 0.55, 0.3],
            Class::Sonorant => [0.9, 0.85, 0.65, 0.4, 0.2],
            Class::VoicedStop => [0.8, 0.6, 0.4, 0.2, 0.1],
            Class::Fricative | Class::Stop => [0.0; PERIODICITY_DIM],
        }
    }

    fn voiced(self) -> bool {
        matches!(self, Class::Vowel | Class::Sonorant | Class::VoicedStop)
    }

    fn durations(self) -> (usize, usize) {
        match self {
            Class::Vowel => (5, 9),
            Class::Sonorant => (3, 6),
            Class::VoicedStop | Class::Stop => (2, 4),
            Class::Fricative => (4, 7),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub f0_hz: f64,
    /// Multiplies formant positions (vocal tract length).
    pub formant_scale: f64,
    pub tilt: f64,
}

impl Speaker {
    pub fn nth(k: usize) -> Self {
        let f0 = [120.0, 210.0, 95.0, 165.0, 240.0, 135.0];
        let scale = [1.0, 1.12, 0.92, 1.06, 1.18, 0.97];
        let tilt = [0.0, 1.5, -1.5, 0.8, 2.0, -0.8];
        let i = k % f0.len();
        let cycle = (k / f0.len()) as f64;
        Self {
            f0_hz: f0[i] * (1.0 + 0.05 * cycle),
            formant_scale: scale[i],
            tilt: tilt[i] + 0.3 * cycle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 3,
            utterances_per_speaker: 4,
            min_words: 3,
            max_words: 5,
            seed: 0,
        }
    }
}

pub fn lexicon_text() -> String {
    WORDS.iter().map(|(w, p)| format!("{w} {p}\n")).collect()
}

/// One generated utterance before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub record: ManifestRecord,
    pub features: VocoderFeatures,
}

fn log_mel(phone: &PhoneShape, speaker: &Speaker) -> Vec<f64> {
    let (level, tilt, height) = phone.class.envelope();
    let tilt = tilt + speaker.tilt;
    (0..MEL_BANDS)
        .map(|b| {
            let x = b as f64;
            let bumps: f64 = phone
                .formants
                .iter()
                .map(|&c| {
                    let c = (c * speaker.formant_scale).min(MEL_BANDS as f64 - 1.0);
                    height * (-((x - c) / 2.5).powi(2)).exp()
                })
                .sum();
            level + tilt * (x / MEL_BANDS as f64 - 0.5) + bumps
        })
        .collect()
}

/// Draws one utterance: words, phones with an occasional aligner-style
/// pause, durations and frame features.
pub fn generate_utterance(id: &str, speaker_id: &str, speaker: &Speaker, words: usize, rng: &mut impl Rng) -> ToyUtterance {
    let chosen: Vec<(&str, &str)> = (0..words).map(|_| *WORDS.choose(rng).expect("word list is not empty")).collect();
    let mut text = Vec::new();
    let mut phones: Vec<&str> = vec![SILENCE_PHONE];
    let mut durations = vec![rng.gen_range(6..=10)];
    for (k, (word, pron)) in chosen.iter().enumerate() {
        let last = k + 1 == chosen.len();
        let comma = !last && rng.gen_bool(0.15);
        text.push(if comma { format!("{}, ", word.to_lowercase()) } else { word.to_lowercase() });
        for p in pron.split_whitespace() {
            let (lo, hi) = shape(p).expect("toy phones have shapes").class.durations();
            phones.push(p);
            durations.push(rng.gen_range(lo..=hi));
        }
        if last || comma || rng.gen_bool(0.2) {
            phones.push(SILENCE_PHONE);
            durations.push(if last { rng.gen_range(6..=10) } else { rng.gen_range(3..=6) });
        }
    }
    let text = text.join(" ").replace(",  ", ", ");

    let frames: usize = durations.iter().sum();
    let jitter = Normal::new(0.0, 0.25).expect("valid normal");
    let mut envelopes: Vec<Option<Vec<f64>>> = Vec::with_capacity(frames);
    let mut feats = VocoderFeatures::zeros(frames);
    let mut t = 0;
    for (&p, &d) in phones.iter().zip(&durations) {
        let s = shape(p);
        for _ in 0..d {
            let frame = feats.frame_mut(t);
            if let Some(s) = &s {
                if s.class.voiced() {
                    let pos = t as f64 / frames as f64;
                    let contour = (1.1 - 0.2 * pos) * (1.0 + 0.03 * (t as f64 * 0.37).sin());
                    frame[0] = (speaker.f0_hz * contour) as f32;
                    frame[14..19].copy_from_slice(&s.class.periodicity());
                }
                envelopes.push(Some(log_mel(s, speaker).into_iter().map(|v| v + jitter.sample(rng)).collect()));
            } else {
                envelopes.push(None);
            }
            t += 1;
        }
    }
    // Light smoothing between neighbouring non-silent frames.
    for t in 0..frames {
        let Some(centre) = &envelopes[t] else { continue };
        let mut acc: Vec<f64> = centre.iter().map(|v| 0.5 * v).collect();
        let mut weight = 0.5;
        for n in [t.checked_sub(1), Some(t + 1).filter(|&n| n < frames)].into_iter().flatten() {
            if let Some(e) = &envelopes[n] {
                acc.iter_mut().zip(e).for_each(|(a, v)| *a += 0.25 * v);
                weight += 0.25;
            }
        }
        let mfcc = dct2(&acc.iter().map(|v| v / weight).collect::<Vec<_>>(), MFCC_DIM);
        for (o, c) in feats.frame_mut(t)[1..1 + MFCC_DIM].iter_mut().zip(mfcc) {
            *o = c as f32;
        }
    }

    ToyUtterance {
        record: ManifestRecord {
            id: id.to_string(),
            audio_path: format!("wav/{id}.wav"),
            text,
            phones: phones.join(" "),
            durations_frames: durations,
            speaker_id: speaker_id.to_string(),
        },
        features: feats,
    }
}

/// Vocodes `features` and pads the tail so analysis yields exactly one
/// frame per synthesized frame.
pub fn render(features: &VocoderFeatures, spec: &FrameSpec, seed: u64) -> Result<AudioClip> {
    let mut clip = synthesize_baseline(features, spec, seed)?;
    clip.samples.extend(std::iter::repeat_n(0.0, spec.window - spec.hop));
    Ok(clip)
}

pub fn generate(cfg: &ToyCorpusConfig) -> Result<Vec<ToyUtterance>> {
    if cfg.speakers == 0 || cfg.utterances_per_speaker == 0 || cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::invalid("toy corpus needs speakers, utterances and 1 <= min_words <= max_words"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for s in 0..cfg.speakers {
        let speaker = Speaker::nth(s);
        let sid = format!("spk{s}");
        for u in 0..cfg.utterances_per_speaker {
            let words = rng.gen_range(cfg.min_words..=cfg.max_words);
            out.push(generate_utterance(&format!("{sid}_{u:03}"), &sid, &speaker, words, &mut rng));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyCorpusFiles {
    pub manifest: PathBuf,
    pub lexicon: PathBuf,
}

/// Writes `lexicon.txt`, `manifest.jsonl` and `wav/*.wav` under `dir`.
pub fn write_toy_corpus(dir: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpusFiles> {
    let spec = FrameSpec::default();
    let utts = generate(cfg)?;
    std::fs::create_dir_all(dir.join("wav"))?;
    let rendered = crate::exec::map(&utts, |u| render(&u.features, &spec, cfg.seed).and_then(|c| c.to_wav_bytes()));
    let mut manifest = String::new();
    for (u, wav) in utts.iter().zip(rendered) {
        std::fs::write(dir.join(&u.record.audio_path), wav?)?;
        manifest.push_str(&serde_json::to_string(&u.record)?);
        manifest.push('\n');
    }
    let files = ToyCorpusFiles {
        manifest: dir.join("manifest.jsonl"),
        lexicon: dir.join("lexicon.txt"),
    };
    std::fs::write(&files.lexicon, lexicon_text())?;
    std::fs::write(&files.manifest, manifest)?;
    Ok(files)
}
