//! Robot-token quantization and the word-level prompt vocabulary.
//!
//! Each of the 7 pose fields is mapped linearly onto `bin_size` integer bins:
//!
//! ```text
//! X = floor((x - min) / (max - min) * (bin_size - 1))
//! x̂ = min + X / (bin_size - 1) * (max - min)
//! ```
//!
//! Bins are shared by every dimension and occupy the tail of the id space, after the
//! special tokens and the text vocabulary.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::common::{ActionState, Range, Workspace};
use crate::error::{Error, Result};

/// Added to the normalized ratio before flooring so values that sit on a bin
/// boundary up to representation error land in the upper bin.
pub const BOUNDARY_NUDGE: f64 = 1e-12;

pub const STATE_INSTRUCTION: &str = "What is the current state of the robot?";

pub const DIM_NAMES: [&str; 7] = ["x", "y", "z", "phi", "theta", "psi", "g"];

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const NUM_SPECIAL: u32 = 4;

/// Words used by the built-in tasks, the held-out tasks and the state query.
pub const DEFAULT_VOCABULARY: &[&str] = &[
    "what", "is", "the", "current", "state", "of", "robot", "put", "place", "pick", "move",
    "up", "and", "in", "into", "on", "onto", "to", "a", "it", "banana", "cube", "strawberry",
    "marker", "ball", "block", "apple", "grape", "corn", "plate", "bowl", "box", "cup", "tray",
    "basket", "region", "red", "green", "blue", "yellow", "white", "dark", "bright", "small",
    "large", "big", "round", "new", "paper", "plastic", "colored", "left", "right", "front",
    "back", "near", "far", "with", "from", "table",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdLayout {
    pub pad: u32,
    pub bos: u32,
    pub sep: u32,
    pub eos: u32,
    pub text_offset: u32,
    pub bin_offset: u32,
    pub vocab_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Special,
    Visual,
    Text,
    Action,
}

/// Per-dimension ranges, the bin count and the full id layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDocument", into = "SpecDocument")]
pub struct TokenizerSpec {
    bin_size: u32,
    ranges: [Range; 7],
    vocabulary: Vec<String>,
    word_ids: HashMap<String, u32>,
}

/// On-disk form of [`TokenizerSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    bin_size: u32,
    ranges: Vec<NamedRange>,
    vocabulary: Vec<String>,
    layout: IdLayout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedRange {
    dim: String,
    min: f64,
    max: f64,
}

impl From<TokenizerSpec> for SpecDocument {
    fn from(s: TokenizerSpec) -> Self {
        SpecDocument {
            bin_size: s.bin_size,
            ranges: s
                .ranges
                .iter()
                .zip(DIM_NAMES)
                .map(|(r, d)| NamedRange {
                    dim: d.to_string(),
                    min: r.min,
                    max: r.max,
                })
                .collect(),
            layout: s.layout(),
            vocabulary: s.vocabulary,
        }
    }
}

impl TryFrom<SpecDocument> for TokenizerSpec {
    type Error = Error;

    fn try_from(doc: SpecDocument) -> Result<Self> {
        if doc.ranges.len() != 7 {
            return Err(Error::invalid(format!(
                "tokenizer needs 7 ranges, got {}",
                doc.ranges.len()
            )));
        }
        let mut ranges = [Range::new(0.0, 0.0); 7];
        for (i, (r, name)) in doc.ranges.iter().zip(DIM_NAMES).enumerate() {
            if r.dim != name {
                return Err(Error::invalid(format!(
                    "tokenizer range {i} is `{}`, expected `{name}`",
                    r.dim
                )));
            }
            ranges[i] = Range::new(r.min, r.max);
        }
        let spec = TokenizerSpec::new(doc.bin_size, ranges, doc.vocabulary)?;
        if spec.layout() != doc.layout {
            return Err(Error::invalid(format!(
                "stored id layout {:?} disagrees with the vocabulary (expected {:?})",
                doc.layout,
                spec.layout()
            )));
        }
        Ok(spec)
    }
}

impl TokenizerSpec {
    pub fn new(bin_size: u32, ranges: [Range; 7], vocabulary: Vec<String>) -> Result<Self> {
        if bin_size < 2 {
            return Err(Error::invalid(format!("bin_size must be >= 2, got {bin_size}")));
        }
        for (r, name) in ranges.iter().zip(DIM_NAMES) {
            if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
                return Err(Error::invalid(format!(
                    "range for {name} needs min <= max, got [{}, {}]",
                    r.min, r.max
                )));
            }
        }
        let mut word_ids = HashMap::with_capacity(vocabulary.len());
        for (i, w) in vocabulary.iter().enumerate() {
            if w.is_empty() || normalize_word(w) != *w {
                return Err(Error::invalid(format!(
                    "vocabulary word `{w}` must be lowercase alphanumeric"
                )));
            }
            if word_ids.insert(w.clone(), NUM_SPECIAL + i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(TokenizerSpec {
            bin_size,
            ranges,
            vocabulary,
            word_ids,
        })
    }

    /// Ranges taken from the workspace; `phi` and `theta` are frozen at zero.
    pub fn for_workspace(w: &Workspace, bin_size: u32) -> Self {
        let ranges = [
            w.x,
            w.y,
            w.z,
            Range::new(0.0, 0.0),
            Range::new(0.0, 0.0),
            Range::new(-PI, PI),
            Range::new(0.0, 1.0),
        ];
        let vocab = DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect();
        TokenizerSpec::new(bin_size, ranges, vocab).expect("default tokenizer is valid")
    }

    pub fn bin_size(&self) -> u32 {
        self.bin_size
    }

    pub fn ranges(&self) -> &[Range; 7] {
        &self.ranges
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn layout(&self) -> IdLayout {
        let text_offset = NUM_SPECIAL;
        let bin_offset = text_offset + self.vocabulary.len() as u32;
        IdLayout {
            pad: PAD,
            bos: BOS,
            sep: SEP,
            eos: EOS,
            text_offset,
            bin_offset,
            vocab_size: bin_offset + self.bin_size,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.layout().vocab_size as usize
    }

    pub fn bin_offset(&self) -> u32 {
        self.layout().bin_offset
    }

    pub fn bin_to_id(&self, bin: u32) -> u32 {
        self.bin_offset() + bin
    }

    pub fn id_to_bin(&self, id: u32) -> Option<u32> {
        let off = self.bin_offset();
        (id >= off && id < off + self.bin_size).then(|| id - off)
    }

    pub fn segment_of(&self, id: u32) -> Segment {
        let l = self.layout();
        if id < l.text_offset {
            Segment::Special
        } else if id < l.bin_offset {
            Segment::Text
        } else {
            Segment::Action
        }
    }

    /// Step between adjacent grid values of `dim`.
    pub fn step(&self, dim: usize) -> f64 {
        self.ranges[dim].span() / (self.bin_size - 1) as f64
    }

    pub fn quantize(&self, value: f64, dim: usize) -> Result<u32> {
        if !value.is_finite() {
            return Err(Error::invalid(format!(
                "cannot quantize non-finite {} = {value}",
                DIM_NAMES[dim]
            )));
        }
        let r = self.ranges[dim];
        if r.span() == 0.0 {
            return Ok(0);
        }
        let ratio = (value - r.min) / r.span() + BOUNDARY_NUDGE;
        let top = (self.bin_size - 1) as f64;
        let bin = (ratio * top).floor().clamp(0.0, top);
        Ok(bin as u32)
    }

    pub fn dequantize(&self, bin: u32, dim: usize) -> Result<f64> {
        if bin >= self.bin_size {
            return Err(Error::invalid(format!(
                "bin {bin} out of range for bin_size {}",
                self.bin_size
            )));
        }
        let r = self.ranges[dim];
        if r.span() == 0.0 {
            return Ok(r.min);
        }
        Ok(r.min + bin as f64 / (self.bin_size - 1) as f64 * r.span())
    }

    /// Seven bin indices (not vocabulary ids) in `(x, y, z, phi, theta, psi, g)` order.
    pub fn encode_action(&self, a: &ActionState) -> Result<[u32; 7]> {
        let v = a.to_array();
        let mut out = [0u32; 7];
        for d in 0..7 {
            out[d] = self.quantize(v[d], d)?;
        }
        Ok(out)
    }

    pub fn decode_action(&self, bins: &[u32]) -> Result<ActionState> {
        if bins.len() != 7 {
            return Err(Error::invalid(format!(
                "an action decodes from 7 tokens, got {}",
                bins.len()
            )));
        }
        let mut v = [0.0; 7];
        for d in 0..7 {
            v[d] = self.dequantize(bins[d], d)?;
        }
        Ok(ActionState::from_array(v))
    }

    pub fn encode_text(&self, instruction: &str) -> Result<Vec<u32>> {
        instruction
            .split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .map(|w| {
                self.word_ids
                    .get(&w)
                    .copied()
                    .ok_or(Error::OutOfVocabulary(w))
            })
            .collect()
    }
}

fn normalize_word(w: &str) -> String {
    w.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> TokenizerSpec {
        TokenizerSpec::for_workspace(&Workspace::default(), 256)
    }

    /// All seven dimensions free, so every bin survives a decode/encode cycle.
    fn free_spec() -> TokenizerSpec {
        let r = Range::new(-1.0, 1.0);
        TokenizerSpec::new(256, [r; 7], vec!["robot".into()]).unwrap()
    }

    #[test]
    fn endpoints() {
        let s = spec();
        assert_eq!(s.quantize(-0.5, 0).unwrap(), 0);
        assert_eq!(s.quantize(0.5, 0).unwrap(), 255);
        assert_eq!(s.dequantize(0, 0).unwrap(), -0.5);
        assert_eq!(s.dequantize(255, 0).unwrap(), 0.5);
        assert_eq!(s.dequantize(255, 6).unwrap(), 1.0);
    }

    #[test]
    fn midpoint_bin_value() {
        let s = spec();
        let v = s.dequantize(127, 0).unwrap();
        assert!((v - (-0.5 + 127.0 / 255.0)).abs() < 1e-15);
    }

    #[test]
    fn illustrative_token_sequence_survives_round_trip() {
        let s = free_spec();
        let tokens = [183, 180, 36, 0, 127, 49, 255];
        let mut v = [0.0; 7];
        for d in 0..7 {
            v[d] = s.dequantize(tokens[d], d).unwrap();
        }
        let back: Vec<u32> = (0..7).map(|d| s.quantize(v[d], d).unwrap()).collect();
        assert_eq!(back, tokens);
        assert!(back.iter().all(|&t| t < 256));
    }

    #[test]
    fn frozen_dims_map_to_zero_and_back() {
        let s = spec();
        let a = ActionState::new(0.1, 0.2, 0.3, 1.0, crate::common::Gripper::Open);
        let t = s.encode_action(&a).unwrap();
        assert_eq!(t[3], 0);
        assert_eq!(t[4], 0);
        assert_eq!(t[6], 255);
        let d = s.decode_action(&t).unwrap();
        assert_eq!(d.phi, 0.0);
        assert_eq!(d.theta, 0.0);
        assert_eq!(d.gripper, crate::common::Gripper::Open);
        let closed = s.encode_action(&a.with_gripper(crate::common::Gripper::Closed)).unwrap();
        assert_eq!(closed[6], 0);
    }

    #[test]
    fn errors() {
        let s = spec();
        assert!(s.quantize(f64::NAN, 0).is_err());
        assert!(s.quantize(f64::INFINITY, 2).is_err());
        assert!(s.dequantize(256, 0).is_err());
        assert!(s.decode_action(&[0; 6]).is_err());
        assert!(TokenizerSpec::new(1, [Range::new(0.0, 1.0); 7], vec![]).is_err());
        assert!(TokenizerSpec::new(8, [Range::new(1.0, 0.0); 7], vec![]).is_err());
    }

    #[test]
    fn state_instruction_is_eight_ids() {
        let s = spec();
        let a = s.encode_text(STATE_INSTRUCTION).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, s.encode_text("what is the current STATE of the robot").unwrap());
        assert!(a.iter().all(|&id| s.segment_of(id) == Segment::Text));
    }

    #[test]
    fn empty_and_oov_text() {
        let s = spec();
        assert!(s.encode_text("").unwrap().is_empty());
        match s.encode_text("put the zebra in the plate") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "zebra"),
            other => panic!("expected OOV, got {other:?}"),
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let s = spec();
        let l = s.layout();
        assert_eq!(l.text_offset, 4);
        assert_eq!(l.bin_offset, 4 + DEFAULT_VOCABULARY.len() as u32);
        assert_eq!(l.vocab_size, l.bin_offset + 256);
        assert_eq!(s.id_to_bin(s.bin_to_id(17)), Some(17));
        assert_eq!(s.id_to_bin(l.bin_offset - 1), None);
        assert_eq!(s.id_to_bin(l.vocab_size), None);
    }

    #[test]
    fn json_round_trip_preserves_ids() {
        let s = spec();
        let json = serde_json::to_string(&s).unwrap();
        let back: TokenizerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        for w in DEFAULT_VOCABULARY {
            assert_eq!(back.encode_text(w).unwrap(), s.encode_text(w).unwrap());
        }
        let tampered = json.replace("\"vocab_size\":", "\"vocab_size\":1");
        assert!(serde_json::from_str::<TokenizerSpec>(&tampered).is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -0.5f64..0.5, b in -0.5f64..0.5) {
            let s = spec();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.quantize(lo, 0).unwrap() <= s.quantize(hi, 0).unwrap());
        }

        #[test]
        fn round_trip_error_below_one_step(x in -0.5f64..=0.5) {
            let s = spec();
            let back = s.dequantize(s.quantize(x, 0).unwrap(), 0).unwrap();
            let err = x - back;
            prop_assert!(err >= 0.0 && err < s.step(0), "err {err}");
        }
    }
}
