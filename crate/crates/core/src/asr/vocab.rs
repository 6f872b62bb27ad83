use serde::{Deserialize, Serialize};

use crate::corpus::render::ALPHABET;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const FIRST_CHAR: usize = 3;

/// Token inventory: `PAD, SOS, EOS`, then characters, then one token per
/// training speaker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    chars: Vec<char>,
    speakers: Vec<String>,
}

impl VocabSpec {
    pub fn new(speakers: Vec<String>) -> Result<Self> {
        let chars: Vec<char> = ALPHABET.chars().collect();
        let mut sorted = speakers.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != speakers.len() {
            return Err(Error::Vocab("duplicate speaker token".into()));
        }
        if speakers.iter().any(|s| s.chars().count() == 1 && chars.contains(&s.chars().next().unwrap_or(' '))) {
            return Err(Error::Vocab("speaker token collides with a character token".into()));
        }
        Ok(Self { chars, speakers })
    }

    pub fn size(&self) -> usize {
        FIRST_CHAR + self.chars.len() + self.speakers.len()
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn char_token(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| FIRST_CHAR + i)
    }

    pub fn speaker_token(&self, speaker: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == speaker).map(|i| FIRST_CHAR + self.chars.len() + i)
    }

    pub fn is_char(&self, tok: usize) -> bool {
        (FIRST_CHAR..FIRST_CHAR + self.chars.len()).contains(&tok)
    }

    pub fn is_speaker(&self, tok: usize) -> bool {
        (FIRST_CHAR + self.chars.len()..self.size()).contains(&tok)
    }

    pub fn speaker_of(&self, tok: usize) -> Option<&str> {
        self.is_speaker(tok).then(|| self.speakers[tok - FIRST_CHAR - self.chars.len()].as_str())
    }

    pub fn char_of(&self, tok: usize) -> Option<char> {
        self.is_char(tok).then(|| self.chars[tok - FIRST_CHAR])
    }

    /// `<SOS> <speaker> c1 .. cn <EOS>`.
    pub fn encode(&self, speaker: &str, transcript: &str) -> Result<LabelSequence> {
        let spk = self
            .speaker_token(speaker)
            .ok_or_else(|| Error::Vocab(format!("unknown speaker {speaker}")))?;
        let mut tokens = vec![SOS, spk];
        for c in transcript.chars() {
            tokens.push(self.char_token(c).ok_or_else(|| Error::Vocab(format!("character {c:?} not in vocabulary")))?);
        }
        tokens.push(EOS);
        Ok(LabelSequence { tokens })
    }

    /// Characters of a token sequence, skipping speaker and special tokens.
    pub fn text_of(&self, tokens: &[usize]) -> String {
        tokens.iter().filter_map(|&t| self.char_of(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    pub tokens: Vec<usize>,
}

impl LabelSequence {
    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        let t = &self.tokens;
        if t.len() < 3 || t[0] != SOS || !vocab.is_speaker(t[1]) || *t.last().unwrap_or(&PAD) != EOS {
            return Err(Error::Vocab(format!("malformed label sequence {t:?}")));
        }
        if let Some(bad) = t[2..t.len() - 1].iter().find(|&&x| !vocab.is_char(x)) {
            return Err(Error::Vocab(format!("token {bad} is not a character")));
        }
        Ok(())
    }

    /// Decoder inputs (all but last token).
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Prediction targets (all but first token).
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }
}
