//! Fixed caption vocabulary, tokenizer, and the template grammar the
//! synthetic clip generator draws captions from.
//!
//! The vocabulary is closed: every caption the pipeline can produce (and
//! every prompt users may pass at generation time) tokenizes into this set,
//! and unknown words are an error rather than a silent `<unk>` — at desk
//! scale a typo should fail loudly.

use once_cell::sync::Lazy;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Token id reserved for the unconditional ("null") caption.
pub const NULL_TOKEN: u32 = 0;

/// Word lists the caption templates are assembled from. Also the source of
/// truth for the vocabulary.
const ADJECTIVES: &[&str] = &[
    "crimson", "azure", "golden", "silver", "emerald", "violet", "amber", "ivory", "teal",
    "scarlet", "cobalt", "jade",
];
const ACTORS: &[&str] = &[
    "sphere", "cube", "disc", "ring", "prism", "slab", "orb", "shard", "lantern", "kite",
];
const VERBS: &[&str] = &[
    "drifts", "glides", "tumbles", "sweeps", "spins", "floats", "slides", "arcs", "weaves",
    "sails",
];
const BACKDROPS: &[&str] = &[
    "dusk", "dawn", "storm", "meadow", "canyon", "harbor", "skyline", "glacier", "desert",
    "lagoon",
];
const SCENES: &[&str] = &[
    "field", "plain", "expanse", "horizon", "basin", "vault", "terrace", "valley",
];
const LIGHTING_WORDS: &[&str] = &[
    "torchlit", "daylight", "foggy", "moonlit", "warm", "bright", "hazy", "dim",
];
const CAMERAS: &[&str] = &[
    "slow pan left",
    "slow pan right",
    "static camera",
    "gentle push in",
    "steady drift upward",
];
const GLUE: &[&str] = &[
    "a", "an", "the", "across", "over", "through", "in", "under", "lighting", "with", "and",
    "toward", "past", "above",
];

/// The closed vocabulary: lookup in both directions.
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Lowercases, strips punctuation, splits on whitespace, and maps each
    /// word to its id. The empty string is the null caption.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for raw in caption.split_whitespace() {
            let word: String = raw
                .to_lowercase()
                .chars()
                .filter(|c| !matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\''))
                .collect();
            if word.is_empty() {
                continue;
            }
            let id = self.ids.get(&word).copied().ok_or_else(|| Error::UnknownWord {
                word: word.clone(),
                caption: caption.to_string(),
            })?;
            out.push(id);
        }
        if out.is_empty() {
            out.push(NULL_TOKEN);
        }
        Ok(out)
    }
}

static VOCAB: Lazy<Vocab> = Lazy::new(|| {
    let mut words: Vec<String> = vec!["<null>".to_string()];
    let mut push_list = |list: &[&str]| {
        for entry in list {
            // Multi-word entries (camera moves) contribute their words.
            for w in entry.split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
    };
    push_list(ADJECTIVES);
    push_list(ACTORS);
    push_list(VERBS);
    push_list(BACKDROPS);
    push_list(SCENES);
    push_list(LIGHTING_WORDS);
    push_list(CAMERAS);
    push_list(GLUE);
    let ids = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();
    Vocab { words, ids }
});

/// The process-wide vocabulary.
pub fn vocab() -> &'static Vocab {
    &VOCAB
}

/// Lighting conditions the corpus styles clips with. Tags double as the
/// style presets' names and appear verbatim in manifests and captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingTag {
    Torch,
    Day,
    Fog,
    Night,
}

impl LightingTag {
    pub const ALL: [LightingTag; 4] = [
        LightingTag::Torch,
        LightingTag::Day,
        LightingTag::Fog,
        LightingTag::Night,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LightingTag::Torch => "torch",
            LightingTag::Day => "day",
            LightingTag::Fog => "fog",
            LightingTag::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "torch" => Ok(LightingTag::Torch),
            "day" => Ok(LightingTag::Day),
            "fog" => Ok(LightingTag::Fog),
            "night" => Ok(LightingTag::Night),
            other => Err(Error::InvalidArgument(format!(
                "unknown lighting tag {other:?} (expected torch|day|fog|night)"
            ))),
        }
    }

    /// The word the caption template uses for this lighting condition.
    fn caption_word(self) -> &'static str {
        match self {
            LightingTag::Torch => "torchlit",
            LightingTag::Day => "daylight",
            LightingTag::Fog => "foggy",
            LightingTag::Night => "moonlit",
        }
    }
}

/// Draws a caption from the template grammar. Every generated caption
/// tokenizes cleanly against [`vocab`].
pub fn build_caption(tag: LightingTag, rng: &mut StreamRng) -> String {
    let adj = ADJECTIVES[rng.uniform_usize(ADJECTIVES.len())];
    let actor = ACTORS[rng.uniform_usize(ACTORS.len())];
    let verb = VERBS[rng.uniform_usize(VERBS.len())];
    let backdrop = BACKDROPS[rng.uniform_usize(BACKDROPS.len())];
    let scene = SCENES[rng.uniform_usize(SCENES.len())];
    let camera = CAMERAS[rng.uniform_usize(CAMERAS.len())];
    format!(
        "a {adj} {actor} {verb} across a {backdrop} {scene} in {} lighting, {camera}",
        tag.caption_word()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_token_is_id_zero() {
        assert_eq!(vocab().word(NULL_TOKEN), Some("<null>"));
        assert_eq!(vocab().tokenize("").unwrap(), vec![NULL_TOKEN]);
        assert_eq!(vocab().tokenize("  \t ").unwrap(), vec![NULL_TOKEN]);
    }

    #[test]
    fn tokenize_normalizes_case_and_punctuation() {
        let ids = vocab().tokenize("A Crimson sphere, drifts!").unwrap();
        let words: Vec<&str> = ids.iter().map(|&i| vocab().word(i).unwrap()).collect();
        assert_eq!(words, vec!["a", "crimson", "sphere", "drifts"]);
    }

    #[test]
    fn unknown_words_are_rejected_with_context() {
        let err = vocab().tokenize("a quantum sphere").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("quantum"), "{msg}");
        assert!(msg.contains("a quantum sphere"), "{msg}");
    }

    #[test]
    fn every_template_caption_tokenizes() {
        let mut rng = StreamRng::new(123, "caption-test");
        for _ in 0..200 {
            for tag in LightingTag::ALL {
                let caption = build_caption(tag, &mut rng);
                let ids = vocab().tokenize(&caption).unwrap();
                assert!(ids.len() >= 8, "caption too short: {caption}");
                assert!(!ids.contains(&NULL_TOKEN));
            }
        }
    }

    #[test]
    fn vocabulary_is_stable_and_bounded() {
        // The model's embedding table is sized from this; keep it fixed.
        let n = vocab().len();
        assert!(n < 128, "vocabulary unexpectedly large: {n}");
        assert_eq!(vocab().id("<null>"), Some(0));
        // ids round-trip
        for id in 0..n as u32 {
            let w = vocab().word(id).unwrap();
            assert_eq!(vocab().id(w), Some(id));
        }
    }

    #[test]
    fn lighting_tags_round_trip() {
        for tag in LightingTag::ALL {
            assert_eq!(LightingTag::parse(tag.as_str()).unwrap(), tag);
        }
        assert!(LightingTag::parse("dawn").is_err());
    }
}
