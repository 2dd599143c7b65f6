//! Synthetic datasets: a marker-counting classification task and
//! byte-level language-model corpora.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::Example;
use crate::transformer::{Target, TokenSequence, PAD_ID};

/// Byte `b` is token `b + 1`; token 0 is padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB: usize = 257;

    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize + 1).collect()
    }

    /// Padding is skipped; ids above 256 are rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| {
                u8::try_from(i - 1)
                    .map_err(|_| Error::OutOfRange { what: "byte token", index: i, limit: Self::VOCAB })
            })
            .collect()
    }
}

pub const CLS_ID: usize = 1;
/// Vocabulary of the classification task: padding, CLS, markers and noise.
pub const CLASSIFICATION_VOCAB: usize = 64;
pub const MARKERS_PER_CLASS: usize = 4;
const FIRST_MARKER: usize = 2;

/// Marker ids of class `c`.
pub fn markers(c: usize) -> std::ops::Range<usize> {
    let start = FIRST_MARKER + c * MARKERS_PER_CLASS;
    start..start + MARKERS_PER_CLASS
}

/// Class a token marks, if any.
pub fn marker_class(id: usize, n_classes: usize) -> Option<usize> {
    let end = FIRST_MARKER + n_classes * MARKERS_PER_CLASS;
    (FIRST_MARKER..end).contains(&id).then(|| (id - FIRST_MARKER) / MARKERS_PER_CLASS)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationSpec {
    pub n_examples: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Fraction in `[0, 1]`: distractor markers per other class relative to
    /// the label's markers.
    pub difficulty: f64,
    pub seed: u64,
}

impl ClassificationSpec {
    /// Markers of the label class planted in each sequence.
    pub fn label_markers(&self) -> usize {
        (self.seq_len / 16).max(3)
    }

    fn distractors(&self) -> usize {
        (self.difficulty * (self.label_markers() - 1) as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_classes < 2 || FIRST_MARKER + self.n_classes * MARKERS_PER_CLASS >= CLASSIFICATION_VOCAB {
            return bad(format!("n_classes must be in 2..={}", (CLASSIFICATION_VOCAB - 3) / MARKERS_PER_CLASS));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return bad(format!("difficulty {} outside [0, 1]", self.difficulty));
        }
        let planted = self.label_markers() + (self.n_classes - 1) * self.distractors();
        if self.seq_len < 2 || planted > self.seq_len - 1 {
            return bad(format!("seq_len {} too short for {planted} markers", self.seq_len));
        }
        Ok(())
    }
}

/// Sequences of `[CLS, ...]` whose label is the class with the most marker
/// tokens. Every other class receives fewer distractor markers, and the
/// remaining positions are noise tokens. Labels cycle through a shuffled
/// balanced order.
pub fn gen_classification(spec: &ClassificationSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise: Vec<usize> =
        (FIRST_MARKER + spec.n_classes * MARKERS_PER_CLASS..CLASSIFICATION_VOCAB).collect();
    let mut labels: Vec<usize> = (0..spec.n_examples).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let body = spec.seq_len - 1;
    let out = labels
        .into_iter()
        .map(|label| {
            let mut ids = vec![CLS_ID];
            ids.extend((0..body).map(|_| noise[rng.gen_range(0..noise.len())]));
            let mut planted = Vec::new();
            for c in 0..spec.n_classes {
                let count = if c == label { spec.label_markers() } else { spec.distractors() };
                planted.extend((0..count).map(|_| c));
            }
            let slots = sample(&mut rng, body, planted.len());
            for (slot, c) in slots.into_iter().zip(planted) {
                ids[1 + slot] = markers(c).start + rng.gen_range(0..MARKERS_PER_CLASS);
            }
            Example::classification(TokenSequence::new(ids), label)
        })
        .collect();
    Ok(out)
}

/// Class with the most marker tokens (ties to the lower class).
pub fn bag_of_tokens_predict(seq: &TokenSequence, n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    for (&id, &real) in seq.ids.iter().zip(&seq.real) {
        if let Some(c) = marker_class(id, n_classes).filter(|_| real) {
            counts[c] += 1;
        }
    }
    (0..n_classes).fold(0, |best, c| if counts[c] > counts[best] { c } else { best })
}

#[derive(Serialize)]
struct Record<'a> {
    ids: &'a [usize],
    label: usize,
}

/// One `{"ids": [...], "label": c}` line per classification example.
pub fn write_classification_jsonl(data: &[Example], mut w: impl Write) -> Result<()> {
    for ex in data {
        let Target::Class(label) = ex.target else {
            return Err(Error::Data("not a classification example".into()));
        };
        serde_json::to_writer(&mut w, &Record { ids: &ex.seq.ids, label })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Windows of `seq_len` byte tokens starting every `stride` bytes.
pub fn lm_windows(bytes: &[u8], seq_len: usize, stride: usize) -> Result<Vec<Example>> {
    if seq_len < 2 || stride == 0 {
        return Err(Error::InvalidConfig("seq_len must be >= 2 and stride >= 1".into()));
    }
    if bytes.len() < seq_len {
        return Err(Error::Data(format!(
            "corpus of {} bytes is shorter than one window of {seq_len}",
            bytes.len()
        )));
    }
    let tok = ByteTokenizer;
    Ok((0..=bytes.len() - seq_len)
        .step_by(stride)
        .map(|s| Example::lm(TokenSequence::new(tok.encode(&bytes[s..s + seq_len]))))
        .collect())
}

pub fn load_lm_corpus(path: &Path, seq_len: usize, stride: usize) -> Result<Vec<Example>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    lm_windows(&bytes, seq_len, stride)
}

const WORDS: [&str; 48] = [
    "the", "a", "model", "token", "memory", "gradient", "layer", "of", "and", "to", "in", "is",
    "selects", "small", "subset", "input", "positions", "backward", "pass", "cache", "attention",
    "with", "fewer", "states", "we", "train", "fine", "tune", "large", "language", "network",
    "on", "for", "each", "step", "keeps", "only", "rows", "weights", "adapter", "low", "rank",
    "batch", "sequence", "loss", "value", "query", "key",
];

/// Pseudo-text of `len` bytes: random words from a fixed list, grouped into
/// capitalized sentences.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        let words = rng.gen_range(4..12);
        for w in 0..words {
            let word = WORDS[rng.gen_range(0..WORDS.len())].as_bytes();
            if w == 0 {
                out.push(word[0].to_ascii_uppercase());
                out.extend_from_slice(&word[1..]);
            } else {
                out.push(b' ');
                out.extend_from_slice(word);
            }
        }
        out.extend_from_slice(if rng.gen_bool(0.8) { b". " } else { b".\n" });
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(difficulty: f64) -> ClassificationSpec {
        ClassificationSpec { n_examples: 200, seq_len: 64, n_classes: 3, difficulty, seed: 4 }
    }

    #[test]
    fn tokenizer_layout() {
        let t = ByteTokenizer;
        assert_eq!(t.encode(b"\x00A\xff"), vec![1, 66, 256]);
        assert_eq!(t.decode(&[66, 0, 67]).unwrap(), b"AB");
        assert!(t.decode(&[257]).is_err());
    }

    proptest! {
        #[test]
        fn tokenizer_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = ByteTokenizer;
            let ids = t.encode(&bytes);
            prop_assert!(ids.iter().all(|&i| (1..ByteTokenizer::VOCAB).contains(&i)));
            prop_assert_eq!(t.decode(&ids).unwrap(), bytes);
        }
    }

    #[test]
    fn counting_markers_recovers_every_label() {
        for difficulty in [0.0, 0.2, 1.0] {
            for ex in gen_classification(&spec(difficulty)).unwrap() {
                let Target::Class(label) = ex.target else { unreachable!() };
                assert_eq!(bag_of_tokens_predict(&ex.seq, 3), label);
            }
        }
    }

    #[test]
    fn difficulty_zero_plants_only_label_markers() {
        for ex in gen_classification(&spec(0.0)).unwrap() {
            let Target::Class(label) = ex.target else { unreachable!() };
            let classes: Vec<usize> = ex.seq.ids.iter().filter_map(|&i| marker_class(i, 3)).collect();
            assert_eq!(classes.len(), 4);
            assert!(classes.iter().all(|&c| c == label));
        }
    }

    #[test]
    fn sequences_start_with_cls_and_stay_in_vocabulary() {
        let data = gen_classification(&spec(0.5)).unwrap();
        assert_eq!(data.len(), 200);
        for ex in &data {
            assert_eq!(ex.seq.ids[0], CLS_ID);
            assert_eq!(ex.seq.len(), 64);
            assert!(ex.seq.ids.iter().all(|&i| i > PAD_ID && i < CLASSIFICATION_VOCAB));
            assert_eq!(ex.seq.ids.iter().filter(|&&i| i == CLS_ID).count(), 1);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        assert_eq!(gen_classification(&spec(0.2)).unwrap(), gen_classification(&spec(0.2)).unwrap());
        let other = ClassificationSpec { seed: 5, ..spec(0.2) };
        assert_ne!(gen_classification(&spec(0.2)).unwrap(), gen_classification(&other).unwrap());
    }

    #[test]
    fn classes_are_balanced() {
        let s = ClassificationSpec { n_examples: 10_000, seq_len: 16, n_classes: 3, difficulty: 0.2, seed: 1 };
        let data = gen_classification(&s).unwrap();
        for c in 0..3 {
            let f = data.iter().filter(|e| e.target == Target::Class(c)).count() as f64 / 1e4;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "class {c}: {f}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for s in [
            ClassificationSpec { n_classes: 1, ..spec(0.2) },
            ClassificationSpec { n_classes: 16, ..spec(0.2) },
            ClassificationSpec { difficulty: 1.5, ..spec(0.2) },
            ClassificationSpec { seq_len: 4, difficulty: 1.0, ..spec(0.2) },
        ] {
            assert!(matches!(gen_classification(&s), Err(Error::InvalidConfig(_))), "{s:?}");
        }
    }

    #[test]
    fn jsonl_dump() {
        let data = gen_classification(&ClassificationSpec { n_examples: 2, ..spec(0.0) }).unwrap();
        let mut buf = Vec::new();
        write_classification_jsonl(&data, &mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_str(String::from_utf8(buf).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(line["ids"].as_array().unwrap().len(), 64);
        assert!(line["label"].is_u64());
    }

    #[test]
    fn windows_count_and_content() {
        let text = synthetic_text(1000, 0);
        let w = lm_windows(&text, 100, 100).unwrap();
        assert_eq!(w.len(), 10);
        let w = lm_windows(&text, 100, 30).unwrap();
        assert_eq!(w.len(), (1000 - 100) / 30 + 1);
        let t = ByteTokenizer;
        for (i, ex) in w.iter().enumerate() {
            assert_eq!(t.decode(&ex.seq.ids).unwrap(), &text[i * 30..i * 30 + 100]);
            let Target::Next(targets) = &ex.target else { unreachable!() };
            assert_eq!(targets[0], Some(ex.seq.ids[1]));
            assert_eq!(targets[99], None);
        }
    }

    #[test]
    fn one_mebibyte_gives_4096_windows() {
        let text = synthetic_text(1 << 20, 7);
        assert_eq!(text.len(), 1 << 20);
        assert_eq!(lm_windows(&text, 256, 256).unwrap().len(), 4096);
    }

    #[test]
    fn corpus_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.txt");
        let err = load_lm_corpus(&missing, 8, 8).unwrap_err();
        assert!(err.to_string().contains("none.txt"));
        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(load_lm_corpus(&empty, 8, 8), Err(Error::Data(_))));
        let short = dir.path().join("short.txt");
        std::fs::write(&short, b"abc").unwrap();
        assert!(matches!(load_lm_corpus(&short, 8, 8), Err(Error::Data(_))));
        std::fs::write(&short, b"abcdefghij").unwrap();
        assert_eq!(load_lm_corpus(&short, 4, 2).unwrap().len(), 4);
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(5000, 3);
        assert_eq!(a, synthetic_text(5000, 3));
        assert!(a.iter().all(|b| b.is_ascii()));
        assert!(a.starts_with(&[a[0]]) && a[0].is_ascii_uppercase());
    }
}
