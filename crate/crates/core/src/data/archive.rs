//! Replay archive: an index CSV, a frame directory of 8-bit grayscale PNGs,
//! and a JSON meta file.
//!
//! Layout of an archive directory:
//!
//! ```text
//! meta.json          format tag, game id, player kind, frame skip, actions
//! index.csv          one row per frame:
//!                    frame_id,episode_id,action,reward,gaze_x,gaze_y,gaze_t
//! frames/f<id>.png   8-bit grayscale, one file per frame
//! ```
//!
//! `frame_id` is a global running index and names the PNG. `action` and
//! `reward` belong to the transition whose decision frame this row is;
//! warm-up rows and the final row of an episode leave them empty. Gaze
//! columns are empty when no sample exists. Pixels map to floats as
//! `v / 255`, so export followed by ingest is lossless.

use super::{
    Frame, GazeSample, PlayerKind, ReplayMemory, ReplayMeta, State, Transition, MAX_TRAIL,
};
use crate::error::{Error, Result};
use crate::nn::{FRAME_SIZE, STACK};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Arc;

pub const FORMAT_TAG: &str = "replay-archive/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub format: String,
    pub game_id: String,
    pub player_kind: PlayerKind,
    pub frame_skip: u32,
    pub n_actions: usize,
    pub source_size: (u32, u32),
    /// Subsampling factor expected at ingestion (1 when rows are already at
    /// transition rate).
    pub frame_skip_align: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexRow {
    frame_id: u64,
    episode_id: u64,
    action: Option<usize>,
    reward: Option<f32>,
    gaze_x: Option<f32>,
    gaze_y: Option<f32>,
    gaze_t: Option<f64>,
}

/// Writes a replay memory as an archive. Requires sliding-stack episodes
/// (each transition's state overlapping the previous one by three frames),
/// which holds for everything this crate generates.
pub fn export_replay(mem: &ReplayMemory, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let meta = ArchiveMeta {
        format: FORMAT_TAG.to_string(),
        game_id: mem.meta.game_id.clone(),
        player_kind: mem.meta.player_kind,
        frame_skip: mem.meta.frame_skip,
        n_actions: mem.meta.n_actions,
        source_size: mem.meta.source_size,
        frame_skip_align: 1,
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta json"),
    )?;

    let mut writer = csv::Writer::from_path(dir.join("index.csv"))?;
    let mut frame_id: u64 = 0;
    for (episode_id, episode) in episodes(mem).into_iter().enumerate() {
        // reconstruct the frame sequence from the sliding stacks
        let mut frames: Vec<Arc<Frame>> = episode[0].state.frames.to_vec();
        for (k, t) in episode.iter().enumerate() {
            if k > 0 {
                let prev = &episode[k - 1];
                if t.state.frames[..STACK - 1]
                    .iter()
                    .zip(&prev.state.frames[1..])
                    .any(|(a, b)| a != b)
                    || prev.next_state != t.state
                {
                    return Err(Error::data(
                        "export requires sliding-stack episodes (overlapping frames)",
                    ));
                }
            }
            frames.push(t.next_state.frames[STACK - 1].clone());
        }
        // per-frame gaze: the first transition's trail covers the warm-up
        // frames, every later transition contributes its newest sample
        let mut gaze: Vec<Option<GazeSample>> = vec![None; frames.len()];
        let first_trail = &episode[0].gaze_trail;
        for (j, s) in first_trail.iter().enumerate() {
            let idx = STACK - first_trail.len() + j;
            gaze[idx] = Some(*s);
        }
        for (k, t) in episode.iter().enumerate().skip(1) {
            if let Some(s) = t.gaze_trail.last() {
                gaze[STACK - 1 + k] = Some(*s);
            }
        }
        for (i, frame) in frames.iter().enumerate() {
            let transition = (i >= STACK - 1 && i - (STACK - 1) < episode.len())
                .then(|| &episode[i - (STACK - 1)]);
            let row = IndexRow {
                frame_id,
                episode_id: episode_id as u64,
                action: transition.map(|t| t.action),
                reward: transition.map(|t| t.reward),
                gaze_x: gaze[i].map(|g| g.x),
                gaze_y: gaze[i].map(|g| g.y),
                gaze_t: gaze[i].map(|g| g.t),
            };
            writer.serialize(&row).map_err(csv_err)?;
            write_frame_png(frame, &dir.join("frames").join(frame_name(frame_id)))?;
            frame_id += 1;
        }
    }
    writer.flush()?;
    Ok(())
}

fn frame_name(id: u64) -> String {
    format!("f{id:06}.png")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("index.csv: {e}"))
}

fn write_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let buf = frame.to_u8();
    let img = image::GrayImage::from_raw(FRAME_SIZE as u32, FRAME_SIZE as u32, buf)
        .expect("gray image from frame");
    img.save(path)
        .map_err(|e| Error::Format(format!("write {}: {e}", path.display())))
}

/// Rec. 601 luminance, rounded to 8 bits.
pub fn luminance(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

fn load_frame_png(path: &Path, source_size: (u32, u32)) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("missing or unreadable frame {}: {e}", path.display())))?;
    let gray: image::GrayImage = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            let rgb = other.to_rgb8();
            image::GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y);
                image::Luma([luminance(p[0], p[1], p[2])])
            })
        }
    };
    let gray = if gray.dimensions() == (FRAME_SIZE as u32, FRAME_SIZE as u32) {
        gray
    } else {
        image::imageops::resize(
            &gray,
            FRAME_SIZE as u32,
            FRAME_SIZE as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    Frame::from_u8(gray.as_raw(), source_size)
}

/// Reads an archive back into a replay memory.
///
/// `frame_skip_align` keeps every n-th frame of each episode as a transition
/// frame; gaze samples from all rows (kept or skipped) enter the trails and
/// rewards of skipped rows accumulate onto the preceding kept frame. States
/// are stacked within episodes only. Missing frames are a hard error;
/// missing gaze produces empty trails and a warning.
pub fn ingest_replay(dir: &Path, frame_skip_align: u32) -> Result<(ReplayMemory, Vec<String>)> {
    if frame_skip_align == 0 {
        return Err(Error::config("frame_skip_align must be at least 1"));
    }
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", meta_path.display())))?;
    let meta: ArchiveMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    if meta.format != FORMAT_TAG {
        return Err(Error::Format(format!(
            "unsupported archive format tag {:?}",
            meta.format
        )));
    }

    let mut reader = csv::Reader::from_path(dir.join("index.csv")).map_err(csv_err)?;
    let mut rows: Vec<IndexRow> = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(csv_err)?);
    }

    let mut warnings = Vec::new();
    let mut transitions = Vec::new();
    let mut episode_start = 0;
    let mut any_gaze = false;
    while episode_start < rows.len() {
        let episode_id = rows[episode_start].episode_id;
        let mut episode_end = episode_start;
        while episode_end < rows.len() && rows[episode_end].episode_id == episode_id {
            episode_end += 1;
        }
        let episode = &rows[episode_start..episode_end];
        ingest_episode(
            dir,
            &meta,
            episode,
            frame_skip_align as usize,
            &mut transitions,
            &mut any_gaze,
        )?;
        episode_start = episode_end;
    }
    if !any_gaze && meta.player_kind == PlayerKind::HumanLike {
        warnings.push("no gaze samples found; trails are empty".to_string());
    }
    let mem = ReplayMemory {
        transitions,
        meta: ReplayMeta {
            game_id: meta.game_id,
            player_kind: meta.player_kind,
            frame_skip: meta.frame_skip,
            n_actions: meta.n_actions,
            source_size: meta.source_size,
        },
    };
    Ok((mem, warnings))
}

fn ingest_episode(
    dir: &Path,
    meta: &ArchiveMeta,
    rows: &[IndexRow],
    align: usize,
    out: &mut Vec<Transition>,
    any_gaze: &mut bool,
) -> Result<()> {
    // kept rows at indices 0, align, 2*align, ...
    let kept: Vec<usize> = (0..rows.len()).step_by(align).collect();
    if kept.len() < STACK + 1 {
        return Ok(()); // too short to form any transition
    }
    let mut frames: Vec<Arc<Frame>> = Vec::with_capacity(kept.len());
    for &ri in &kept {
        let path = dir.join("frames").join(frame_name(rows[ri].frame_id));
        frames.push(Arc::new(load_frame_png(&path, meta.source_size)?));
    }
    // gaze trail accumulates over all rows, kept or skipped
    let trail_at = |row_idx: usize| -> Vec<GazeSample> {
        let mut trail: Vec<GazeSample> = rows[..=row_idx]
            .iter()
            .filter_map(|r| match (r.gaze_x, r.gaze_y, r.gaze_t) {
                (Some(x), Some(y), Some(t)) => Some(GazeSample { x, y, t }),
                _ => None,
            })
            .collect();
        if trail.len() > MAX_TRAIL {
            trail.drain(..trail.len() - MAX_TRAIL);
        }
        trail
    };
    let n_transitions = kept.len() - STACK;
    for k in 0..n_transitions {
        // state = kept frames [k, k+4), decision frame is kept[k+3]
        let decision = kept[k + STACK - 1];
        let action = rows[decision].action.ok_or_else(|| {
            Error::data(format!(
                "row {} (frame {}) is a decision frame but has no action",
                decision, rows[decision].frame_id
            ))
        })?;
        if action >= meta.n_actions {
            return Err(Error::data(format!("action {action} out of range")));
        }
        // rewards of the decision row plus any skipped rows up to the next kept frame
        let reward: f32 = rows[decision..kept[k + STACK]]
            .iter()
            .filter_map(|r| r.reward)
            .sum();
        let trail = trail_at(decision);
        if !trail.is_empty() {
            *any_gaze = true;
        }
        let state = State {
            frames: [
                frames[k].clone(),
                frames[k + 1].clone(),
                frames[k + 2].clone(),
                frames[k + 3].clone(),
            ],
        };
        let next_state = State {
            frames: [
                frames[k + 1].clone(),
                frames[k + 2].clone(),
                frames[k + 3].clone(),
                frames[k + 4].clone(),
            ],
        };
        out.push(Transition {
            state,
            action,
            reward,
            next_state,
            done: k + 1 == n_transitions,
            gaze_trail: trail,
        });
    }
    Ok(())
}

/// Splits a memory into episodes (runs ending on `done`).
fn episodes(mem: &ReplayMemory) -> Vec<&[Transition]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in mem.transitions.iter().enumerate() {
        if t.done || i + 1 == mem.transitions.len() {
            out.push(&mem.transitions[start..=i]);
            start = i + 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::{generate_toy_replay, PolicyKind, ToyConfig};

    #[test]
    fn toy_replay_roundtrips_exactly() {
        let cfg = ToyConfig::default();
        let (mem, _) = generate_toy_replay(&cfg, 450, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_replay(&mem, dir.path()).unwrap();
        let (back, warnings) = ingest_replay(dir.path(), 1).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(mem, back);
    }

    #[test]
    fn agent_replay_roundtrips_with_gaze_warning() {
        let cfg = ToyConfig {
            policy: PolicyKind::GlobalBand,
            ..ToyConfig::default()
        };
        let (mem, _) = generate_toy_replay(&cfg, 250, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_replay(&mem, dir.path()).unwrap();
        let (back, _) = ingest_replay(dir.path(), 1).unwrap();
        assert_eq!(mem, back);
    }

    #[test]
    fn missing_frame_is_a_hard_error() {
        let cfg = ToyConfig::default();
        let (mem, _) = generate_toy_replay(&cfg, 220, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_replay(&mem, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frames").join("f000002.png")).unwrap();
        assert!(ingest_replay(dir.path(), 1).is_err());
    }

    #[test]
    fn sixteen_frame_episode_with_align_4_yields_one_state_no_transition() {
        // synthesize a 16-frame episode at full frame rate
        let dir = tempfile::tempdir().unwrap();
        synth_archive(dir.path(), &[16]);
        let (mem, _) = ingest_replay(dir.path(), 4).unwrap();
        // 4 kept frames form exactly one full stack but no next_state
        assert_eq!(mem.transitions.len(), 0);
        // with 20 frames there are 5 kept frames: one transition
        let dir2 = tempfile::tempdir().unwrap();
        synth_archive(dir2.path(), &[20]);
        let (mem2, _) = ingest_replay(dir2.path(), 4).unwrap();
        assert_eq!(mem2.transitions.len(), 1);
        // rewards of skipped rows accumulate (rows carry reward 1 each):
        // decision row 12 + skipped 13..15
        assert_eq!(mem2.transitions[0].reward, 4.0);
    }

    #[test]
    fn no_state_spans_an_episode_boundary() {
        let dir = tempfile::tempdir().unwrap();
        // episode ids are encoded into the first pixel of each frame
        synth_archive(dir.path(), &[9, 5, 13, 6]);
        let (mem, _) = ingest_replay(dir.path(), 1).unwrap();
        assert!(!mem.transitions.is_empty());
        for t in &mem.transitions {
            let tag = t.state.frames[0].pixels()[[0, 0]];
            for f in t.state.frames.iter().chain(t.next_state.frames.iter()) {
                assert_eq!(f.pixels()[[0, 0]], tag, "state mixes episodes");
            }
        }
        // an episode of L frames yields L - 4 transitions
        assert_eq!(mem.transitions.len(), 5 + 1 + 9 + 2);
    }

    /// Writes a minimal archive with the given episode lengths; frame (0,0)
    /// carries the episode id, actions are 0, rewards 1, no gaze.
    fn synth_archive(dir: &Path, episode_lens: &[usize]) {
        std::fs::create_dir_all(dir.join("frames")).unwrap();
        let meta = ArchiveMeta {
            format: FORMAT_TAG.to_string(),
            game_id: "synthetic".into(),
            player_kind: PlayerKind::AgentLike,
            frame_skip: 4,
            n_actions: 2,
            source_size: (84, 84),
            frame_skip_align: 1,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        let mut w = csv::Writer::from_path(dir.join("index.csv")).unwrap();
        let mut frame_id = 0u64;
        for (ep, &len) in episode_lens.iter().enumerate() {
            for _ in 0..len {
                w.serialize(IndexRow {
                    frame_id,
                    episode_id: ep as u64,
                    action: Some(0),
                    reward: Some(1.0),
                    gaze_x: None,
                    gaze_y: None,
                    gaze_t: None,
                })
                .unwrap();
                let mut buf = vec![7u8; FRAME_SIZE * FRAME_SIZE];
                buf[0] = ep as u8; // episode tag in pixel (0,0)
                let img =
                    image::GrayImage::from_raw(FRAME_SIZE as u32, FRAME_SIZE as u32, buf).unwrap();
                img.save(dir.join("frames").join(frame_name(frame_id))).unwrap();
                frame_id += 1;
            }
        }
        w.flush().unwrap();
    }
}
