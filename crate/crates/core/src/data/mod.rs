//! Replay memories with gaze trails, deterministic splits, the synthetic
//! toy environment, and the archive format for external logs.

pub mod archive;
pub mod toy;

use crate::error::{Error, Result};
use crate::nn::{FRAME_SIZE, GRID, STACK};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// One grayscale 84x84 frame with the source geometry the gaze coordinates
/// refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array2<f32>,
    pub source_size: (u32, u32),
}

impl Frame {
    pub fn new(pixels: Array2<f32>, source_size: (u32, u32)) -> Result<Self> {
        if pixels.shape() != [FRAME_SIZE, FRAME_SIZE] {
            return Err(Error::data(format!(
                "frame must be {FRAME_SIZE}x{FRAME_SIZE}, got {:?}",
                pixels.shape()
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::data("frame pixels must lie in [0, 1]"));
        }
        Ok(Frame {
            pixels,
            source_size,
        })
    }

    /// Builds a frame from 8-bit intensities; values are `v / 255`.
    pub fn from_u8(bytes: &[u8], source_size: (u32, u32)) -> Result<Self> {
        if bytes.len() != FRAME_SIZE * FRAME_SIZE {
            return Err(Error::data("expected 84*84 bytes"));
        }
        let pixels = Array2::from_shape_fn((FRAME_SIZE, FRAME_SIZE), |(r, c)| {
            bytes[r * FRAME_SIZE + c] as f32 / 255.0
        });
        Ok(Frame {
            pixels,
            source_size,
        })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }
}

/// A stack of the four most recent frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub frames: [Arc<Frame>; STACK],
}

impl State {
    pub fn to_array(&self) -> Array3<f32> {
        let mut out = Array3::zeros((STACK, FRAME_SIZE, FRAME_SIZE));
        for (i, f) in self.frames.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(f.pixels());
        }
        out
    }
}

/// Assembles a batch tensor `(N, 4, 84, 84)` from states.
pub fn states_to_batch(states: &[&State]) -> Array4<f32> {
    let mut out = Array4::zeros((states.len(), STACK, FRAME_SIZE, FRAME_SIZE));
    for (i, s) in states.iter().enumerate() {
        for (j, f) in s.frames.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(f.pixels());
        }
    }
    out
}

/// One raw gaze measurement in source-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub x: f32,
    pub y: f32,
    /// Seconds since the start of the episode.
    pub t: f64,
}

/// Maximum number of gaze samples kept per trail.
pub const MAX_TRAIL: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub reward: f32,
    pub next_state: State,
    /// True for the last recorded transition of an episode.
    pub done: bool,
    /// Most recent gaze samples up to the decision frame, oldest first.
    /// Empty for agent players.
    pub gaze_trail: Vec<GazeSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayerKind {
    HumanLike,
    AgentLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMeta {
    pub game_id: String,
    pub player_kind: PlayerKind,
    /// Emulator frames covered by one transition.
    pub frame_skip: u32,
    pub n_actions: usize,
    pub source_size: (u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    pub transitions: Vec<Transition>,
    pub meta: ReplayMeta,
}

impl ReplayMemory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> Vec<&State> {
        self.transitions.iter().map(|t| &t.state).collect()
    }
}

/// Ground-truth relevance masks for toy transitions: the cells the scripted
/// policy actually reads.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceOracle {
    pub masks: Vec<Array2<bool>>,
}

impl RelevanceOracle {
    pub fn fraction(&self, idx: usize) -> f64 {
        let m = &self.masks[idx];
        m.iter().filter(|&&b| b).count() as f64 / (GRID * GRID) as f64
    }
}

/// Deterministic 80/20 split. Returns sorted train and validation index sets.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::config(format!(
            "need at least 5 transitions to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (0.8 * n as f64 + 0.5).floor() as usize;
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut val: Vec<usize> = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Convenience view of a memory restricted to an index set.
pub fn select<'a>(mem: &'a ReplayMemory, idx: &[usize]) -> Vec<&'a Transition> {
    idx.iter().map(|&i| &mem.transitions[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ratios() {
        let (tr, va) = split_indices(100, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let (tr, va) = split_indices(5, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (4, 1));
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let (tr1, va1) = split_indices(97, 42).unwrap();
        let (tr2, va2) = split_indices(97, 42).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        let mut all: Vec<usize> = tr1.iter().chain(va1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
        // different seed shuffles differently (overwhelmingly likely)
        let (tr3, _) = split_indices(97, 43).unwrap();
        assert_ne!(tr1, tr3);
    }

    #[test]
    fn split_rejects_tiny_memories() {
        assert!(split_indices(4, 0).is_err());
    }

    #[test]
    fn frame_validation() {
        let ok = Frame::new(Array2::zeros((84, 84)), (84, 84));
        assert!(ok.is_ok());
        let bad = Frame::new(Array2::from_elem((84, 84), 1.5), (84, 84));
        assert!(bad.is_err());
        let bad_shape = Frame::new(Array2::zeros((83, 84)), (84, 84));
        assert!(bad_shape.is_err());
    }
}
