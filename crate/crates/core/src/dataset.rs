//! Protocol files, splits and seeded batching.
//!
//! Accepted line layouts (whitespace separated, last field is the key):
//!
//! * `utt_id label`
//! * `utt_id path label` with an explicit audio path, relative to the audio root
//! * `speaker utt_id <env> attack label` and longer ASVspoof-style rows,
//!   where the attack tag is the fourth field (`-` means none)

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index used by the two-way classifier head.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub utt_id: String,
    pub label: Label,
    pub audio_path: PathBuf,
    pub attack_tag: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Eval,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub entries: Vec<ProtocolEntry>,
}

fn parse_line(line: &str, audio_root: &Path) -> std::result::Result<ProtocolEntry, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let label: Label = fields.last().ok_or("empty line")?.parse()?;
    let (utt_id, audio_path, attack_tag) = match fields.len() {
        2 => (
            fields[0],
            audio_root.join(format!("{}.wav", fields[0])),
            None,
        ),
        3 => (fields[0], audio_root.join(fields[1]), None),
        n if n >= 5 => {
            let attack = match fields[3] {
                "-" => None,
                tag => Some(tag.to_string()),
            };
            (
                fields[1],
                audio_root.join(format!("{}.wav", fields[1])),
                attack,
            )
        }
        n => return Err(format!("unsupported layout with {n} fields")),
    };
    Ok(ProtocolEntry {
        utt_id: utt_id.to_string(),
        label,
        audio_path,
        attack_tag,
    })
}

/// Parses protocol text. `source` names the file in error messages.
pub fn parse_protocol_str(
    text: &str,
    audio_root: &Path,
    source: &str,
) -> Result<Vec<ProtocolEntry>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_line(line, audio_root).map_err(|message| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        })?;
        if !seen.insert(entry.utt_id.clone()) {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: format!("duplicate utt_id {:?}", entry.utt_id),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn parse_protocol(
    path: impl AsRef<Path>,
    audio_root: impl AsRef<Path>,
) -> Result<Vec<ProtocolEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, audio_root.as_ref(), &path.display().to_string())
}

/// Writes parsed entries as CSV (`utt_id,label,audio_path,attack_tag`) for auditing.
pub fn write_entries_csv(entries: &[ProtocolEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["utt_id", "label", "audio_path", "attack_tag"])
        .map_err(csv_err)?;
    for e in entries {
        w.write_record([
            e.utt_id.as_str(),
            e.label.as_str(),
            &e.audio_path.display().to_string(),
            e.attack_tag.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded permutation of `items` cut into consecutive chunks of
/// `batch_size`; the last chunk may be short.
pub fn make_batches<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be >= 1".into()));
    }
    if items.is_empty() {
        return Err(Error::Validation("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| items[i].clone()).collect())
        .collect())
}

impl DatasetSplit {
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Vec<ProtocolEntry>>> {
        make_batches(&self.entries, batch_size, seed)
    }
}
