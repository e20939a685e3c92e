//! Where prompt tokens go relative to the input segments and the mask.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptPosition {
    /// `[P, x1, x2, MASK]`
    Head,
    /// `[x1, P, x2, MASK]`
    Middle,
    /// `[P, x1, P, x2, P, MASK]`
    Uniform,
    /// `[x1, x2, MASK, P]`
    Tail,
}

impl PromptPosition {
    pub const ALL: [PromptPosition; 4] = [
        PromptPosition::Head,
        PromptPosition::Middle,
        PromptPosition::Uniform,
        PromptPosition::Tail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptPosition::Head => "head",
            PromptPosition::Middle => "middle",
            PromptPosition::Uniform => "uniform",
            PromptPosition::Tail => "tail",
        }
    }
}

impl fmt::Display for PromptPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(PromptPosition::Head),
            "middle" => Ok(PromptPosition::Middle),
            "uniform" => Ok(PromptPosition::Uniform),
            "tail" => Ok(PromptPosition::Tail),
            other => Err(Error::Config(format!(
                "unknown prompt position `{other}` (expected head, middle, uniform or tail)"
            ))),
        }
    }
}

/// Configuration form of a layout: `{ mode, m }`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub mode: PromptPosition,
    pub m: usize,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            mode: PromptPosition::Uniform,
            m: 10,
        }
    }
}

/// Insertion point of a prompt slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    BeforeFirst,
    BetweenSegments,
    BeforeMask,
    AfterMask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateLayout {
    pub mode: PromptPosition,
    pub m: usize,
    pub pair_mode: bool,
    slots: Vec<(Anchor, usize)>,
}

impl TemplateLayout {
    pub fn slot_sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|&(_, n)| n).collect()
    }

    pub fn slots(&self) -> &[(Anchor, usize)] {
        &self.slots
    }

    pub fn prompts_at(&self, anchor: Anchor) -> usize {
        self.slots
            .iter()
            .filter(|(a, _)| *a == anchor)
            .map(|&(_, n)| n)
            .sum()
    }

    pub fn spec(&self) -> LayoutSpec {
        LayoutSpec {
            mode: self.mode,
            m: self.m,
        }
    }
}

/// Splits `m` into `parts` near-equal sizes, remainder to the leftmost.
pub fn even_split(m: usize, parts: usize) -> Vec<usize> {
    let base = m / parts;
    let extra = m % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

pub fn build_layout(mode: PromptPosition, m: usize, pair_mode: bool) -> Result<TemplateLayout> {
    let slots = match (mode, pair_mode) {
        (PromptPosition::Head, _) => vec![(Anchor::BeforeFirst, m)],
        (PromptPosition::Middle, true) => vec![(Anchor::BetweenSegments, m)],
        (PromptPosition::Middle, false) => {
            return Err(Error::Config(
                "middle placement needs two input segments".into(),
            ))
        }
        (PromptPosition::Uniform, true) => {
            let s = even_split(m, 3);
            vec![
                (Anchor::BeforeFirst, s[0]),
                (Anchor::BetweenSegments, s[1]),
                (Anchor::BeforeMask, s[2]),
            ]
        }
        (PromptPosition::Uniform, false) => {
            let s = even_split(m, 2);
            vec![(Anchor::BeforeFirst, s[0]), (Anchor::BeforeMask, s[1])]
        }
        (PromptPosition::Tail, _) => vec![(Anchor::AfterMask, m)],
    };
    Ok(TemplateLayout {
        mode,
        m,
        pair_mode,
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_pair_split_puts_remainder_left() {
        let l = build_layout(PromptPosition::Uniform, 10, true).unwrap();
        assert_eq!(l.slot_sizes(), vec![4, 3, 3]);
        let l = build_layout(PromptPosition::Uniform, 11, true).unwrap();
        assert_eq!(l.slot_sizes(), vec![4, 4, 3]);
        let l = build_layout(PromptPosition::Uniform, 0, true).unwrap();
        assert_eq!(l.slot_sizes(), vec![0, 0, 0]);
    }

    #[test]
    fn head_places_everything_before_x1() {
        let l = build_layout(PromptPosition::Head, 10, true).unwrap();
        assert_eq!(l.slot_sizes(), vec![10]);
        assert_eq!(l.prompts_at(Anchor::BeforeFirst), 10);
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        assert!(matches!("diagonal".parse::<PromptPosition>(), Err(Error::Config(_))));
        assert_eq!("Uniform".parse::<PromptPosition>().unwrap(), PromptPosition::Uniform);
    }

    #[test]
    fn middle_requires_two_segments() {
        assert!(build_layout(PromptPosition::Middle, 4, false).is_err());
    }

    proptest! {
        #[test]
        fn slots_sum_to_m(m in 0usize..=20, pair in any::<bool>(), mode_idx in 0usize..4) {
            let mode = PromptPosition::ALL[mode_idx];
            if let Ok(l) = build_layout(mode, m, pair) {
                prop_assert_eq!(l.slot_sizes().iter().sum::<usize>(), m);
                let expected_slots = match mode {
                    PromptPosition::Uniform if pair => 3,
                    PromptPosition::Uniform => 2,
                    _ => 1,
                };
                prop_assert_eq!(l.slot_sizes().len(), expected_slots);
            }
        }
    }
}
