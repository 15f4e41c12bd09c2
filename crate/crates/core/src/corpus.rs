//! Conversation corpora: the JSON on-disk format, validation, and the
//! synthetic generator with planted low/high-frequency emotion structure.
//!
//! File layout (field names are part of the format):
//!
//! ```json
//! {"n_classes": 4, "dims": {"t": 8, "a": 8, "v": 8},
//!  "conversations": [{"id": "c0", "split": "train",
//!     "utterances": [{"speaker": 0, "label": 2, "t": [..], "a": [..], "v": [..]}]}]}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub a: usize,
    pub v: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub label: usize,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub n_classes: usize,
    pub dims: Dims,
    pub conversations: Vec<Conversation>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Conversation> {
        self.conversations
            .iter()
            .filter(|c| c.split == split)
            .collect()
    }

    /// Number of speaker slots needed to embed every speaker id.
    pub fn n_speakers(&self) -> usize {
        self.conversations
            .iter()
            .flat_map(|c| c.utterances.iter())
            .map(|u| u.speaker + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn n_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::parse("n_classes", "must be positive"));
        }
        for (ci, conv) in self.conversations.iter().enumerate() {
            if conv.utterances.is_empty() {
                return Err(Error::parse(
                    format!("conversations[{ci}].utterances"),
                    "conversation has no utterances",
                ));
            }
            for (ui, u) in conv.utterances.iter().enumerate() {
                let at = |field: &str| format!("conversations[{ci}].utterances[{ui}].{field}");
                if u.label >= self.n_classes {
                    return Err(Error::parse(
                        at("label"),
                        format!("label {} >= n_classes {}", u.label, self.n_classes),
                    ));
                }
                for (name, feat, dim) in [
                    ("t", &u.text, self.dims.t),
                    ("a", &u.audio, self.dims.a),
                    ("v", &u.visual, self.dims.v),
                ] {
                    if feat.len() != dim {
                        return Err(Error::invalid_input(format!(
                            "{}: expected {dim} values, found {}",
                            at(name),
                            feat.len()
                        )));
                    }
                    if let Some(bad) = feat.iter().position(|x| !x.is_finite()) {
                        return Err(Error::parse(
                            format!("{}[{bad}]", at(name)),
                            "non-finite feature value",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    n_classes: usize,
    dims: Dims,
    conversations: Vec<ConversationFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationFile {
    id: String,
    split: Split,
    utterances: Vec<UtteranceFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
enum SpeakerKey {
    Index(usize),
    Name(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceFile {
    speaker: SpeakerKey,
    label: usize,
    t: Vec<f64>,
    a: Vec<f64>,
    v: Vec<f64>,
}

/// Parses a corpus from JSON text.
///
/// Integer speaker ids are kept as-is. Named speakers are assigned ids in
/// order of first appearance, after the largest integer id in the file.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let file: CorpusFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;

    let max_index = file
        .conversations
        .iter()
        .flat_map(|c| c.utterances.iter())
        .filter_map(|u| match u.speaker {
            SpeakerKey::Index(i) => Some(i + 1),
            SpeakerKey::Name(_) => None,
        })
        .max()
        .unwrap_or(0);
    let mut names: HashMap<String, usize> = HashMap::new();

    let conversations = file
        .conversations
        .into_iter()
        .map(|c| Conversation {
            id: c.id,
            split: c.split,
            utterances: c
                .utterances
                .into_iter()
                .map(|u| {
                    let speaker = match u.speaker {
                        SpeakerKey::Index(i) => i,
                        SpeakerKey::Name(name) => {
                            let next = max_index + names.len();
                            *names.entry(name).or_insert(next)
                        }
                    };
                    Utterance {
                        speaker,
                        label: u.label,
                        text: u.t,
                        audio: u.a,
                        visual: u.v,
                    }
                })
                .collect(),
        })
        .collect();

    let corpus = Corpus {
        n_classes: file.n_classes,
        dims: file.dims,
        conversations,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn corpus_to_json(corpus: &Corpus) -> Result<String> {
    let file = CorpusFile {
        n_classes: corpus.n_classes,
        dims: corpus.dims,
        conversations: corpus
            .conversations
            .iter()
            .map(|c| ConversationFile {
                id: c.id.clone(),
                split: c.split,
                utterances: c
                    .utterances
                    .iter()
                    .map(|u| UtteranceFile {
                        speaker: SpeakerKey::Index(u.speaker),
                        label: u.label,
                        t: u.text.clone(),
                        a: u.audio.clone(),
                        v: u.visual.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).map_err(|e| Error::invalid_input(e.to_string()))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, corpus_to_json(corpus)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Parameters of the synthetic corpus generator.
///
/// Each conversation carries a slow cyclic emotion trend (the low-frequency
/// part). With probability `flip_rate` an utterance's label jumps to another
/// class and only one randomly chosen modality shows it (the high-frequency,
/// cross-modal-complementary part).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub n_speakers: usize,
    pub n_classes: usize,
    pub dims: Dims,
    /// Utterances per trend step.
    pub trend_period: usize,
    pub flip_rate: f64,
    pub noise_sigma: f64,
    pub prototype_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            min_utterances: 8,
            max_utterances: 16,
            n_speakers: 4,
            n_classes: 4,
            dims: Dims { t: 8, a: 8, v: 8 },
            trend_period: 6,
            flip_rate: 0.25,
            noise_sigma: 0.3,
            prototype_scale: 3.0,
        }
    }
}

impl SynthSpec {
    pub fn n_conversations(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid_config(msg.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.n_conversations() == 0 {
            return bad("at least one conversation is required");
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad("need 1 <= min_utterances <= max_utterances");
        }
        if self.n_speakers == 0 {
            return bad("n_speakers must be positive");
        }
        if self.dims.t < self.n_classes || self.dims.a < self.n_classes || self.dims.v < self.n_classes {
            return bad("every modality dimension must be >= n_classes");
        }
        if self.trend_period < 2 {
            return bad("trend_period must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return bad("flip_rate must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return bad("prototype_scale must be positive");
        }
        Ok(())
    }
}

fn prototype(class: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[class] = scale;
    v
}

/// Generates a corpus from `spec`. Every conversation draws from its own
/// generator seeded from `(spec.seed, index)`, so output is independent of
/// evaluation order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let c = spec.n_classes;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid_config(e.to_string()))?;

    // Baseline emotion per speaker: the class a conversation opened by this
    // speaker starts its trend from.
    let mut corpus_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let temperament: Vec<usize> = (0..spec.n_speakers).map(|_| corpus_rng.random_range(0..c)).collect();

    let mut conversations = Vec::with_capacity(spec.n_conversations());
    for index in 0..spec.n_conversations() {
        let split = if index < spec.n_train {
            Split::Train
        } else if index < spec.n_train + spec.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64 + 1);

        let n = rng.random_range(spec.min_utterances..=spec.max_utterances);
        let first = rng.random_range(0..spec.n_speakers);
        let second = if spec.n_speakers > 1 {
            (first + rng.random_range(1..spec.n_speakers)) % spec.n_speakers
        } else {
            first
        };
        let phase = rng.random_range(0..spec.trend_period);
        let start = temperament[first];

        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let speaker = if i == 0 || rng.random_bool(0.5) { first } else { second };
            let base = (start + (i + phase) / spec.trend_period) % c;
            let (label, flipped_modality) = if rng.random_bool(spec.flip_rate) {
                let label = (base + rng.random_range(1..c)) % c;
                (label, Some(rng.random_range(0..3usize)))
            } else {
                (base, None)
            };
            let mut feature = |m: usize, dim: usize| {
                let class = if flipped_modality == Some(m) { label } else { base };
                let mut v = prototype(class, dim, spec.prototype_scale);
                for x in &mut v {
                    *x += noise.sample(&mut rng);
                }
                v
            };
            let text = feature(0, spec.dims.t);
            let audio = feature(1, spec.dims.a);
            let visual = feature(2, spec.dims.v);
            utterances.push(Utterance {
                speaker,
                label,
                text,
                audio,
                visual,
            });
        }
        conversations.push(Conversation {
            id: format!("synth-{index:05}"),
            split,
            utterances,
        });
    }

    Ok(Corpus {
        n_classes: c,
        dims: spec.dims,
        conversations,
    })
}

/// Index of the prototype basis vector nearest to `x` (argmax over the first
/// `n_classes` coordinates; ties go to the lowest index).
pub fn nearest_prototype(x: &[f64], n_classes: usize) -> usize {
    let mut best = 0;
    for k in 1..n_classes.min(x.len()) {
        if x[k] > x[best] {
            best = k;
        }
    }
    best
}

/// Marks utterances whose majority modality vote (nearest prototype per
/// modality) disagrees with the true label. On synthetic data these are the
/// flipped utterances.
pub fn flipped_mask(conv: &Conversation, n_classes: usize) -> Vec<bool> {
    conv.utterances
        .iter()
        .map(|u| {
            let votes = [
                nearest_prototype(&u.text, n_classes),
                nearest_prototype(&u.audio, n_classes),
                nearest_prototype(&u.visual, n_classes),
            ];
            let majority = if votes[1] == votes[2] { votes[1] } else { votes[0] };
            majority != u.label
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"n_classes": 3, "dims": {"t": 2, "a": 1, "v": 1},
            "conversations": [{"id": "x", "split": "train",
              "utterances": [{"speaker": 0, "label": 2, "t": [0.5, 1.0], "a": [1.0], "v": [-1.0]}]}]}"#
    }

    #[test]
    fn minimal_file_parses() {
        let c = parse_corpus(minimal()).unwrap();
        assert_eq!(c.conversations.len(), 1);
        assert_eq!(c.conversations[0].len(), 1);
        assert_eq!(c.n_speakers(), 1);
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let text = minimal().replace("\"label\": 2", "\"label\": 3");
        match parse_corpus(&text) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with(".label"), "{location}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let text = minimal().replace("\"a\": [1.0]", "\"a\": [1.0, 2.0]");
        assert!(matches!(parse_corpus(&text), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_corpus("{\n  \"n_classes\": 3,\n  oops }").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert!(location.starts_with("line 3"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = minimal().replace("\"id\": \"x\"", "\"id\": \"x\", \"extra\": 1");
        assert!(matches!(parse_corpus(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn named_speakers_follow_first_appearance() {
        let text = r#"{"n_classes": 2, "dims": {"t": 1, "a": 1, "v": 1},
            "conversations": [{"id": "x", "split": "test", "utterances": [
              {"speaker": "bob", "label": 0, "t": [1], "a": [1], "v": [1]},
              {"speaker": "amy", "label": 1, "t": [1], "a": [1], "v": [1]},
              {"speaker": "bob", "label": 1, "t": [1], "a": [1], "v": [1]}]}]}"#;
        let c = parse_corpus(text).unwrap();
        let ids: Vec<_> = c.conversations[0].utterances.iter().map(|u| u.speaker).collect();
        assert_eq!(ids, vec![0, 1, 0]);
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let spec = SynthSpec {
            n_train: 3,
            n_val: 1,
            n_test: 1,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let again = parse_corpus(&corpus_to_json(&corpus).unwrap()).unwrap();
        assert_eq!(corpus, again);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SynthSpec {
            n_train: 5,
            n_val: 2,
            n_test: 2,
            ..SynthSpec::default()
        };
        let a = corpus_to_json(&generate_synthetic(&spec).unwrap()).unwrap();
        let b = corpus_to_json(&generate_synthetic(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SynthSpec { seed: 8, ..spec };
        assert_ne!(a, corpus_to_json(&generate_synthetic(&other).unwrap()).unwrap());
    }

    #[test]
    fn noiseless_unflipped_modalities_agree_with_label() {
        let spec = SynthSpec {
            flip_rate: 0.0,
            noise_sigma: 0.0,
            n_train: 10,
            n_val: 0,
            n_test: 0,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        for u in corpus.conversations.iter().flat_map(|c| &c.utterances) {
            for feat in [&u.text, &u.audio, &u.visual] {
                assert_eq!(nearest_prototype(feat, spec.n_classes), u.label);
            }
        }
    }

    #[test]
    fn flip_fraction_matches_rate() {
        // Count flips directly from the noiseless generator: an utterance is
        // flipped iff exactly one modality disagrees with the other two.
        let spec = SynthSpec {
            flip_rate: 0.3,
            noise_sigma: 0.0,
            n_train: 50,
            n_val: 0,
            n_test: 0,
            min_utterances: 10,
            max_utterances: 10,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let mut flips = 0usize;
        let mut total = 0usize;
        for conv in &corpus.conversations {
            for u in &conv.utterances {
                let votes = [&u.text, &u.audio, &u.visual].map(|f| nearest_prototype(f, spec.n_classes));
                let odd = votes.iter().filter(|&&v| v == u.label).count() == 1
                    && votes.iter().filter(|&&v| v != u.label).collect::<std::collections::HashSet<_>>().len() == 1;
                flips += odd as usize;
                total += 1;
            }
        }
        assert_eq!(total, 500);
        let frac = flips as f64 / total as f64;
        assert!((frac - 0.3).abs() <= 0.05, "flip fraction {frac}");
    }

    #[test]
    fn flipped_mask_matches_majority_disagreement() {
        let spec = SynthSpec {
            flip_rate: 0.4,
            noise_sigma: 0.0,
            n_train: 20,
            n_val: 0,
            n_test: 0,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        for conv in &corpus.conversations {
            let mask = flipped_mask(conv, spec.n_classes);
            for (u, &flipped) in conv.utterances.iter().zip(&mask) {
                let votes = [&u.text, &u.audio, &u.visual].map(|f| nearest_prototype(f, spec.n_classes));
                let agree = votes.iter().filter(|&&v| v == u.label).count();
                // Unflipped: all three agree. Flipped: exactly one agrees.
                assert_eq!(flipped, agree == 1);
                assert!(agree == 1 || agree == 3);
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = SynthSpec {
            flip_rate: 1.5,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidConfig(_))));
        let spec = SynthSpec {
            trend_period: 1,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
