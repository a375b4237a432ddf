//! Discrete attribute prompts.
//!
//! A prompt is a `(shape, position, intensity)` tuple. Id 0 in every slot is
//! reserved for "unspecified", and the all-zero prompt is the null prompt.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const SHAPES: [&str; 3] = ["disk", "square", "cross"];
pub const POSITIONS: [&str; 4] = ["nw", "ne", "sw", "se"];
pub const INTENSITIES: [&str; 3] = ["low", "mid", "high"];

/// Vocabulary size per slot, including the null id.
pub const VOCAB: [usize; 3] = [SHAPES.len() + 1, POSITIONS.len() + 1, INTENSITIES.len() + 1];

pub const SLOT_NAMES: [&str; 3] = ["shape", "position", "intensity"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prompt {
    pub shape: u8,
    pub position: u8,
    pub intensity: u8,
}

impl Prompt {
    pub const NULL: Prompt = Prompt {
        shape: 0,
        position: 0,
        intensity: 0,
    };

    pub fn new(shape: u8, position: u8, intensity: u8) -> Result<Self> {
        let p = Self {
            shape,
            position,
            intensity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn slots(&self) -> [usize; 3] {
        [self.shape as usize, self.position as usize, self.intensity as usize]
    }

    pub fn from_slots(slots: [usize; 3]) -> Result<Self> {
        let p = Self {
            shape: slots[0].min(255) as u8,
            position: slots[1].min(255) as u8,
            intensity: slots[2].min(255) as u8,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (slot, (&id, &vocab)) in self.slots().iter().zip(VOCAB.iter()).enumerate() {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { slot, id, vocab });
            }
        }
        Ok(())
    }

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }

    /// Every fully specified prompt, in slot-major order.
    pub fn all_specified() -> Vec<Prompt> {
        let mut out = Vec::with_capacity(36);
        for s in 1..VOCAB[0] {
            for p in 1..VOCAB[1] {
                for i in 1..VOCAB[2] {
                    out.push(Prompt {
                        shape: s as u8,
                        position: p as u8,
                        intensity: i as u8,
                    });
                }
            }
        }
        out
    }

    /// Number of slots in which the two prompts differ.
    pub fn differing_slots(&self, other: &Prompt) -> usize {
        self.slots()
            .iter()
            .zip(other.slots())
            .filter(|(a, b)| **a != *b)
            .count()
    }

    /// Copy with `slot` replaced by `id`.
    pub fn with_slot(&self, slot: usize, id: usize) -> Result<Prompt> {
        let mut s = self.slots();
        s[slot] = id;
        Prompt::from_slots(s)
    }
}

fn slot_word(words: &'static [&'static str], id: u8) -> &'static str {
    match id {
        0 => "-",
        i => words[i as usize - 1],
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            return f.write_str("null");
        }
        write!(
            f,
            "{}/{}/{}",
            slot_word(&SHAPES, self.shape),
            slot_word(&POSITIONS, self.position),
            slot_word(&INTENSITIES, self.intensity)
        )
    }
}

impl FromStr for Prompt {
    type Err = Error;

    /// Parses `null` or `shape/position/intensity`, with `-` for an unspecified slot.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("null") {
            return Ok(Prompt::NULL);
        }
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "prompt `{s}` must be `null` or `shape/position/intensity`"
            )));
        }
        let vocabs = [SHAPES.as_slice(), POSITIONS.as_slice(), INTENSITIES.as_slice()];
        let mut slots = [0usize; 3];
        for (i, (part, words)) in parts.iter().zip(vocabs).enumerate() {
            let part = part.trim().to_ascii_lowercase();
            slots[i] = if part == "-" {
                0
            } else {
                words.iter().position(|w| *w == part).map(|p| p + 1).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown {} `{part}` (expected one of {})",
                        SLOT_NAMES[i],
                        words.join(", ")
                    ))
                })?
            };
        }
        Prompt::from_slots(slots)
    }
}
