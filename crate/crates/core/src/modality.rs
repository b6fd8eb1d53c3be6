//! MRI modality identities and the 4-bit availability mask.
//!
//! The mask bit order is fixed as (FLAIR, T1, T1c, T2): the string `1011`
//! means FLAIR, T1c and T2 are available and T1 is missing. Numeric values
//! therefore run from 0001 (T2 alone) to 1111 (all four), giving the fixed
//! ascending row order of the evaluation grid.

use crate::error::XhvedError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    /// Channel position within a canonically ordered volume.
    pub fn index(self) -> usize {
        match self {
            Modality::Flair => 0,
            Modality::T1 => 1,
            Modality::T1c => 2,
            Modality::T2 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "fl",
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
        }
    }

    fn mask_bit(self) -> u8 {
        // FLAIR owns the most significant of the four bits so that the
        // string form reads left to right as (fl, t1, t1c, t2).
        1 << (3 - self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySubset {
    bits: u8,
}

impl ModalitySubset {
    pub fn from_bits(bits: u8) -> Self {
        assert!(
            bits >= 1 && bits <= 15,
            "contract violation: modality subset must be a non-empty 4-bit mask, got {bits:#06b}"
        );
        ModalitySubset { bits }
    }

    pub fn full() -> Self {
        ModalitySubset { bits: 0b1111 }
    }

    pub fn single(m: Modality) -> Self {
        ModalitySubset { bits: m.mask_bit() }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn has(self, m: Modality) -> bool {
        self.bits & m.mask_bit() != 0
    }

    pub fn count(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_full(self) -> bool {
        self.bits == 0b1111
    }

    /// Available modalities in canonical (fl, t1, t1c, t2) order.
    pub fn available(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.has(*m))
    }

    pub fn missing(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| !self.has(*m))
    }

    /// The 15 non-empty subsets in ascending mask order, 0001 through 1111.
    pub fn all() -> impl Iterator<Item = ModalitySubset> {
        (1u8..=15).map(|bits| ModalitySubset { bits })
    }

    pub fn mask_string(self) -> String {
        format!("{:04b}", self.bits)
    }

    /// Parse either a 4-bit mask (`1011`) or a comma-separated name list
    /// (`fl,t1c,t2`); the two forms are interchangeable.
    pub fn parse(s: &str) -> Result<Self, XhvedError> {
        let s = s.trim();
        if s.len() == 4 && s.chars().all(|c| c == '0' || c == '1') {
            let bits = u8::from_str_radix(s, 2).expect("checked binary digits");
            if bits == 0 {
                return Err(XhvedError::config(
                    "modality subset 0000 is empty; at least one modality is required",
                ));
            }
            return Ok(ModalitySubset { bits });
        }
        let mut bits = 0u8;
        for part in s.split(',') {
            let part = part.trim();
            let m = match part {
                "fl" | "flair" => Modality::Flair,
                "t1" => Modality::T1,
                "t1c" | "t1gd" => Modality::T1c,
                "t2" => Modality::T2,
                other => {
                    return Err(XhvedError::config(format!(
                        "unknown modality {other:?}; expected fl, t1, t1c or t2"
                    )))
                }
            };
            bits |= m.mask_bit();
        }
        if bits == 0 {
            return Err(XhvedError::config(
                "modality subset is empty; at least one modality is required",
            ));
        }
        Ok(ModalitySubset { bits })
    }
}

impl std::fmt::Display for ModalitySubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.mask_string())
    }
}
