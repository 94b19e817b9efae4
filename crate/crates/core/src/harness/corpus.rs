use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level token stream with a train/eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    /// Tokens before this offset are training data; the rest is held out.
    pub split: usize,
}

impl Corpus {
    /// The last `eval_fraction` of the bytes becomes the eval split.
    pub fn from_text(text: &str, eval_fraction: f64) -> Result<Self> {
        if !(0.0 < eval_fraction && eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval_fraction must lie in (0, 1), got {eval_fraction}"
            )));
        }
        let tokens: Vec<usize> = text.bytes().map(usize::from).collect();
        let split = ((1.0 - eval_fraction) * tokens.len() as f64).round() as usize;
        if split < 2 || tokens.len() - split < 2 {
            return Err(Error::InvalidArgument(format!(
                "text of {} bytes is too short to split",
                tokens.len()
            )));
        }
        Ok(Corpus { tokens, split })
    }

    pub fn load(path: &Path, eval_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Config(format!("{} is not UTF-8: {e}", path.display())))?;
        Self::from_text(&text, eval_fraction)
    }

    /// Deterministic synthetic English-like text of about `n_bytes` bytes.
    pub fn synthetic(n_bytes: usize, seed: u64, eval_fraction: f64) -> Result<Self> {
        Self::from_text(&synthetic_text(n_bytes, seed), eval_fraction)
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn eval(&self) -> &[usize] {
        &self.tokens[self.split..]
    }
}

/// Consecutive windows of up to `len + 1` tokens overlapping by one, so each
/// token after the first is predicted exactly once.
pub fn eval_windows(tokens: &[usize], len: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + len + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start += len;
    }
    out
}

const NAMES: &[&str] = &[
    "anna", "boris", "clara", "david", "elena", "felix", "greta", "hugo",
];
const ADJ: &[&str] = &[
    "small", "old", "quiet", "bright", "heavy", "green", "careful", "silent", "warm", "narrow",
];
const NOUN_SG: &[&str] = &[
    "fox", "river", "teacher", "garden", "window", "engine", "letter", "bird", "stone", "farmer",
    "lamp", "bridge",
];
const VERB: &[(&str, &str)] = &[
    ("sees", "see"),
    ("likes", "like"),
    ("follows", "follow"),
    ("paints", "paint"),
    ("finds", "find"),
    ("watches", "watch"),
    ("carries", "carry"),
    ("opens", "open"),
];
const PREP: &[&str] = &["near", "under", "behind", "across", "beside"];
const TIME: &[&str] = &[
    "in the morning",
    "at night",
    "after the rain",
    "every day",
    "before dinner",
];

fn plural(noun: &str) -> String {
    if noun.ends_with('x') || noun.ends_with("ch") {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng, plural_np: bool) -> String {
    let noun = *NOUN_SG.choose(rng).expect("non-empty");
    let noun = if plural_np {
        plural(noun)
    } else {
        noun.to_string()
    };
    let det = if plural_np {
        *["the", "some", "two", "many"]
            .choose(rng)
            .expect("non-empty")
    } else {
        *["the", "a", "one", "every"].choose(rng).expect("non-empty")
    };
    if rng.random_bool(0.5) {
        format!("{det} {} {noun}", ADJ.choose(rng).expect("non-empty"))
    } else {
        format!("{det} {noun}")
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let plural_subj = rng.random_bool(0.4);
    let subject = if !plural_subj && rng.random_bool(0.3) {
        NAMES.choose(rng).expect("non-empty").to_string()
    } else {
        noun_phrase(rng, plural_subj)
    };
    let (sg, pl) = *VERB.choose(rng).expect("non-empty");
    let verb = if plural_subj { pl } else { sg };
    let plural_obj = rng.random_bool(0.3);
    let object = noun_phrase(rng, plural_obj);
    let mut s = format!("{subject} {verb} {object}");
    if rng.random_bool(0.5) {
        let place = noun_phrase(rng, false);
        s.push_str(&format!(
            " {} {place}",
            PREP.choose(rng).expect("non-empty")
        ));
    }
    if rng.random_bool(0.3) {
        s.push_str(&format!(" {}", TIME.choose(rng).expect("non-empty")));
    }
    if rng.random_bool(0.2) {
        let be = if plural_subj { "are" } else { "is" };
        s.push_str(&format!(
            ", and {} {be} {}",
            if plural_subj { "they" } else { "it" },
            ADJ.choose(rng).expect("non-empty")
        ));
    }
    let mut chars = s.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or(' ');
    format!("{first}{}.", chars.as_str())
}

pub fn synthetic_text(n_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    let mut in_para = 0;
    while out.len() < n_bytes {
        out.push_str(&sentence(&mut rng));
        in_para += 1;
        if in_para >= 3 && rng.random_bool(0.25) {
            out.push_str("\n\n");
            in_para = 0;
        } else {
            out.push(' ');
        }
    }
    out
}
