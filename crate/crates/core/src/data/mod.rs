//! Story QA instances and their on-disk formats.
//!
//! Datasets are JSON Lines files with one QA item per line:
//!
//! ```text
//! {"version":1,"qa_id":"q1","captions":["..."],"frames":[[...]],
//!  "question":"...","answers":["a","b","c","d","e"],"correct":2}
//! ```
//!
//! Frames are either inline arrays or a `frame_feature_ref` pointing into a
//! binary feature file (see [`frames`]). A `clips` array of
//! `{captions, frames | frame_feature_ref}` objects may replace the top-level
//! pair; clips are concatenated in file order into one story.

pub mod frames;
pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MdamError, Result};
use frames::FrameStore;

pub const SCHEMA_VERSION: u32 = 1;
pub const ANSWER_COUNT: usize = 5;

/// Which kind of evidence a synthetic question needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CaptionAnswerable,
    FrameAnswerable,
    CrossModal,
}

/// Generator bookkeeping attached to synthetic items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub family: Family,
    /// Story position of the caption holding the answer, if any.
    pub evidence_caption: Option<usize>,
    /// Story position of the frame holding the answer, if any.
    pub evidence_frame: Option<usize>,
    /// Bayes-optimal accuracy on this item when only frames are visible.
    pub ceiling_frame_only: f64,
    /// Bayes-optimal accuracy on this item when only captions are visible.
    pub ceiling_caption_only: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoryInstance {
    pub qa_id: String,
    /// One feature vector per story position, paired 1:1 with `captions`.
    pub frames: Vec<Vec<f64>>,
    pub captions: Vec<Vec<String>>,
    pub question: Vec<String>,
    pub answers: Vec<Vec<String>>,
    pub correct: usize,
    pub meta: Option<ItemMeta>,
}

impl StoryInstance {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Validity of each of `n` story slots.
    pub fn story_mask(&self, n: usize) -> Vec<bool> {
        (0..n).map(|i| i < self.captions.len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str, reason: String| MdamError::Schema {
            qa_id: self.qa_id.clone(),
            field: field.to_string(),
            reason,
        };
        if self.answers.len() != ANSWER_COUNT {
            return Err(schema(
                "answers",
                format!("expected {ANSWER_COUNT} answers, found {}", self.answers.len()),
            ));
        }
        if self.correct >= ANSWER_COUNT {
            return Err(schema("correct", format!("index {} out of range", self.correct)));
        }
        if self.frames.len() != self.captions.len() {
            return Err(schema(
                "frames",
                format!("{} frames for {} captions", self.frames.len(), self.captions.len()),
            ));
        }
        if self.captions.is_empty() {
            return Err(schema("captions", "story has no captions".into()));
        }
        if let Some(dim) = self.frames.first().map(Vec::len) {
            if let Some(i) = self.frames.iter().position(|f| f.len() != dim) {
                return Err(schema(&format!("frames[{i}]"), "ragged frame widths".into()));
            }
        }
        if self.question.is_empty() {
            return Err(schema("question", "empty question".into()));
        }
        for (i, a) in self.answers.iter().enumerate() {
            if a.is_empty() {
                return Err(schema(&format!("answers[{i}]"), "empty answer".into()));
            }
        }
        for (i, c) in self.captions.iter().enumerate() {
            if c.is_empty() {
                return Err(schema(&format!("captions[{i}]"), "empty caption".into()));
            }
        }
        Ok(())
    }
}

/// Splits on whitespace after isolating punctuation characters. Apostrophes
/// and hyphens stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FrameRef {
    file: String,
    offsets: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ClipRecord {
    #[serde(default)]
    captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_feature_ref: Option<FrameRef>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Record {
    version: u32,
    qa_id: String,
    #[serde(flatten)]
    clip: ClipRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    clips: Vec<ClipRecord>,
    question: String,
    answers: Vec<String>,
    correct: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<ItemMeta>,
}

/// Parses a JSONL dataset. Frame-feature files referenced by items are
/// resolved relative to the dataset's directory and loaded once.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<StoryInstance>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| MdamError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut stores: HashMap<PathBuf, FrameStore> = HashMap::new();
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MdamError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)?;
        let qa_id = value
            .get("qa_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("line {}", lineno + 1));
        let schema = |field: &str, reason: String| MdamError::Schema {
            qa_id: qa_id.clone(),
            field: field.to_string(),
            reason,
        };
        let record: Record = serde_json::from_value(value).map_err(|e| schema("<record>", e.to_string()))?;
        if record.version != SCHEMA_VERSION {
            return Err(schema(
                "version",
                format!("schema version {} (expected {SCHEMA_VERSION})", record.version),
            ));
        }
        let clips: Vec<&ClipRecord> = if record.clips.is_empty() {
            vec![&record.clip]
        } else {
            if !record.clip.captions.is_empty() {
                return Err(schema("clips", "both `clips` and top-level captions given".into()));
            }
            record.clips.iter().collect()
        };
        let mut captions = Vec::new();
        let mut frames = Vec::new();
        for (ci, clip) in clips.iter().enumerate() {
            let field = |f: &str| {
                if record.clips.is_empty() {
                    f.to_string()
                } else {
                    format!("clips[{ci}].{f}")
                }
            };
            let clip_frames = match (&clip.frames, &clip.frame_feature_ref) {
                (Some(f), None) => f.clone(),
                (None, Some(r)) => {
                    let fpath = base.join(&r.file);
                    if !stores.contains_key(&fpath) {
                        let store = frames::load_frame_features(&fpath, None)?;
                        stores.insert(fpath.clone(), store);
                    }
                    let store = &stores[&fpath];
                    r.offsets
                        .iter()
                        .map(|&o| {
                            store
                                .row(o)
                                .ok_or_else(|| schema(&field("frame_feature_ref.offsets"), format!("offset {o} out of range")))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                _ => {
                    return Err(schema(
                        &field("frames"),
                        "exactly one of `frames` or `frame_feature_ref` is required".into(),
                    ))
                }
            };
            if clip_frames.len() != clip.captions.len() {
                return Err(schema(
                    &field("frames"),
                    format!("{} frames for {} captions", clip_frames.len(), clip.captions.len()),
                ));
            }
            captions.extend(clip.captions.iter().map(|c| tokenize(c)));
            frames.extend(clip_frames);
        }
        let inst = StoryInstance {
            qa_id: record.qa_id,
            frames,
            captions,
            question: tokenize(&record.question),
            answers: record.answers.iter().map(|a| tokenize(a)).collect(),
            correct: record.correct,
            meta: record.meta,
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Writes a dataset with inline frames.
pub fn save_dataset(path: impl AsRef<Path>, items: &[StoryInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| MdamError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in items {
        let record = Record {
            version: SCHEMA_VERSION,
            qa_id: inst.qa_id.clone(),
            clip: ClipRecord {
                captions: inst.captions.iter().map(|c| c.join(" ")).collect(),
                frames: Some(inst.frames.clone()),
                frame_feature_ref: None,
            },
            clips: Vec::new(),
            question: inst.question.join(" "),
            answers: inst.answers.iter().map(|a| a.join(" ")).collect(),
            correct: inst.correct,
            meta: inst.meta.clone(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| MdamError::io(path, e))?;
    }
    w.flush().map_err(|e| MdamError::io(path, e))
}
