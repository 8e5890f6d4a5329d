//! Append-only event log: one JSON event per line, prefixed with the byte
//! length and CRC-32 of the JSON text (`{len} {crc:08x} {json}`).

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::Event;
use super::fold::PatientFold;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log {path} corrupted at line {line} ({reason}); last valid seq: {}", last_valid_seq.map_or("none".to_owned(), |s| s.to_string()))]
    Corrupted {
        path: String,
        line: usize,
        last_valid_seq: Option<u64>,
        reason: String,
    },
    #[error("event log i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn encode_line(event: &Event) -> String {
    let json = serde_json::to_string(event).expect("events serialize");
    format!("{} {:08x} {}\n", json.len(), crc32fast::hash(json.as_bytes()), json)
}

fn decode_line(line: &str) -> Result<Event, String> {
    let (len, rest) = line.split_once(' ').ok_or("missing length prefix")?;
    let (crc, json) = rest.split_once(' ').ok_or("missing checksum")?;
    let len: usize = len.parse().map_err(|_| "bad length prefix")?;
    if json.len() != len {
        return Err(format!("length {} does not match prefix {len}", json.len()));
    }
    let crc = u32::from_str_radix(crc, 16).map_err(|_| "bad checksum field")?;
    if crc32fast::hash(json.as_bytes()) != crc {
        return Err("checksum mismatch".to_owned());
    }
    serde_json::from_str(json).map_err(|e| format!("bad event: {e}"))
}

/// Parses a whole log. Any damaged line, including a final line without its
/// newline, halts decoding with the seq of the last good event.
pub fn decode_log(path: &str, text: &str) -> Result<Vec<Event>, LogError> {
    let mut events: Vec<Event> = Vec::new();
    let corrupted = |line: usize, events: &[Event], reason: String| LogError::Corrupted {
        path: path.to_owned(),
        line,
        last_valid_seq: events.last().map(|e| e.seq),
        reason,
    };
    let mut rest = text;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let Some((line, tail)) = rest.split_once('\n') else {
            return Err(corrupted(line_no, &events, "truncated line".to_owned()));
        };
        let event = decode_line(line).map_err(|r| corrupted(line_no, &events, r))?;
        if let Some(prev) = events.last() {
            if event.seq <= prev.seq {
                return Err(corrupted(
                    line_no,
                    &events,
                    format!("seq {} does not follow {}", event.seq, prev.seq),
                ));
            }
        }
        events.push(event);
        rest = tail;
    }
    Ok(events)
}

/// Writer for one patient's log. Without a path the log lives only in
/// memory.
#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    file: Option<File>,
    events: Vec<Event>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            events: Vec::new(),
        }
    }

    /// Opens (creating if needed) and fully validates the log at `path`.
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let events = decode_log(&path.display().to_string(), &text)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_owned()),
            file: Some(file),
            events,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Writes one event as a single line.
    pub fn append(&mut self, event: Event) -> Result<(), LogError> {
        if let Some(file) = &mut self.file {
            file.write_all(encode_line(&event).as_bytes())?;
            file.flush()?;
        }
        self.events.push(event);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub state: PatientFold,
}

impl Snapshot {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(self).expect("snapshot serializes"))?;
        fs::rename(tmp, path)
    }

    /// Reads a snapshot; a missing or unreadable one yields `None`, since
    /// snapshots only accelerate recovery.
    pub fn read(path: &Path) -> Option<Self> {
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }
}
