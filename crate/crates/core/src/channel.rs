//! Link between sender and receiver. Ideal by default; bit flips and whole
//! frame erasures are available for robustness runs.

use thiserror::Error;

use crate::neural::SeededRng;

#[derive(Debug, Error, PartialEq)]
#[error("{name} = {value} is not a probability")]
pub struct ChannelError {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    Ideal,
    BitFlip,
    Erasure,
}

impl ChannelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ideal" => Some(Self::Ideal),
            "bit_flip" => Some(Self::BitFlip),
            "erasure" => Some(Self::Erasure),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ideal => "ideal",
            Self::BitFlip => "bit_flip",
            Self::Erasure => "erasure",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub flip_probability: f64,
    pub erasure_probability: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::ideal()
    }
}

impl ChannelConfig {
    pub fn ideal() -> Self {
        Self {
            kind: ChannelKind::Ideal,
            flip_probability: 0.0,
            erasure_probability: 0.0,
            seed: 0,
        }
    }

    pub fn bit_flip(p: f64, seed: u64) -> Result<Self, ChannelError> {
        Self {
            kind: ChannelKind::BitFlip,
            flip_probability: p,
            erasure_probability: 0.0,
            seed,
        }
        .validated()
    }

    pub fn erasure(p: f64, seed: u64) -> Result<Self, ChannelError> {
        Self {
            kind: ChannelKind::Erasure,
            flip_probability: 0.0,
            erasure_probability: p,
            seed,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self, ChannelError> {
        for (name, value) in [
            ("flip_probability", self.flip_probability),
            ("erasure_probability", self.erasure_probability),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ChannelError { name, value });
            }
        }
        Ok(self)
    }

    /// Passes `frame` through the link. `None` means the frame was dropped.
    ///
    /// `index` selects an independent draw per frame, so the outcome for a
    /// frame does not depend on how many frames were sent before it.
    pub fn transmit(&self, frame: &[u8], index: u64) -> Option<Vec<u8>> {
        match self.kind {
            ChannelKind::Ideal => Some(frame.to_vec()),
            ChannelKind::BitFlip => {
                let mut out = frame.to_vec();
                if self.flip_probability > 0.0 {
                    let mut rng = SeededRng::stream(self.seed, index);
                    for byte in &mut out {
                        for bit in 0..8 {
                            if rng.uniform() < self.flip_probability {
                                *byte ^= 1 << bit;
                            }
                        }
                    }
                }
                Some(out)
            }
            ChannelKind::Erasure => {
                let mut rng = SeededRng::stream(self.seed, index);
                (rng.uniform() >= self.erasure_probability).then(|| frame.to_vec())
            }
        }
    }
}
