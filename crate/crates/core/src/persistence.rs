//! Append-only message log.
//!
//! Records are written to segment files named `log-<first_offset>.seg`. Each
//! record is framed as
//!
//! ```text
//! [u32 LE body length][u32 LE CRC32C(body)][body]
//! body = u64 LE timestamp_ms | u16 LE topic length | topic | payload
//! ```
//!
//! Offsets are implicit: the n-th record of a segment has offset
//! `first_offset + n`. A short frame at the tail of the newest segment is a
//! torn write and is dropped; any other damage is reported as corruption.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use bytes::Bytes;
use thiserror::Error;

use crate::topic::TopicName;

/// Largest payload the log accepts.
pub const MAX_PAYLOAD: usize = 256 * 1024;
/// Default segment rotation threshold.
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;

const FRAME_HEADER: usize = 8;
const BODY_FIXED: usize = 10;
const MAX_BODY: usize = BODY_FIXED + u16::MAX as usize + MAX_PAYLOAD;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub offset: u64,
    pub timestamp_ms: u64,
    pub topic: TopicName,
    pub payload: Bytes,
}

#[derive(Debug, Error)]
pub enum AppendError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD} byte limit")]
    PayloadTooLarge(usize),
    #[error("log write failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("corrupt record at offset {0}")]
    Corrupt(u64),
    #[error("offset {requested} is past the end of the log ({next})")]
    OutOfRange { requested: u64, next: u64 },
    #[error("log read failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct LogConfig {
    pub segment_bytes: u64,
    /// fsync after every append.
    pub sync_every_append: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            sync_every_append: true,
        }
    }
}

/// Where a record lives on disk.
#[derive(Debug, Clone)]
pub struct RecordLoc {
    segment: Arc<PathBuf>,
    pos: u64,
}

fn encode_frame(topic: &str, payload: &[u8], timestamp_ms: u64) -> Vec<u8> {
    let body_len = BODY_FIXED + topic.len() + payload.len();
    let mut frame = Vec::with_capacity(FRAME_HEADER + body_len);
    frame.extend_from_slice(&(body_len as u32).to_le_bytes());
    frame.extend_from_slice(&[0; 4]);
    frame.extend_from_slice(&timestamp_ms.to_le_bytes());
    frame.extend_from_slice(&(topic.len() as u16).to_le_bytes());
    frame.extend_from_slice(topic.as_bytes());
    frame.extend_from_slice(payload);
    let crc = crc32c::crc32c(&frame[FRAME_HEADER..]);
    frame[4..8].copy_from_slice(&crc.to_le_bytes());
    frame
}

enum Frame {
    Record { timestamp_ms: u64, topic: TopicName, payload: Bytes, len: usize },
    /// Not enough bytes for a whole frame.
    Short,
    Bad,
}

fn parse_frame(buf: &[u8]) -> Frame {
    if buf.len() < FRAME_HEADER {
        return Frame::Short;
    }
    let body_len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if !(BODY_FIXED..=MAX_BODY).contains(&body_len) {
        return Frame::Bad;
    }
    if buf.len() < FRAME_HEADER + body_len {
        return Frame::Short;
    }
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let body = &buf[FRAME_HEADER..FRAME_HEADER + body_len];
    if crc32c::crc32c(body) != crc {
        return Frame::Bad;
    }
    let timestamp_ms = u64::from_le_bytes(body[0..8].try_into().unwrap());
    let topic_len = u16::from_le_bytes(body[8..10].try_into().unwrap()) as usize;
    if BODY_FIXED + topic_len > body_len {
        return Frame::Bad;
    }
    let Ok(topic) = std::str::from_utf8(&body[BODY_FIXED..BODY_FIXED + topic_len]) else {
        return Frame::Bad;
    };
    let Ok(topic) = TopicName::new(topic) else {
        return Frame::Bad;
    };
    Frame::Record {
        timestamp_ms,
        topic,
        payload: Bytes::copy_from_slice(&body[BODY_FIXED + topic_len..]),
        len: FRAME_HEADER + body_len,
    }
}

fn segment_name(first_offset: u64) -> String {
    format!("log-{first_offset}.seg")
}

fn list_segments(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(first) = name
            .strip_prefix("log-")
            .and_then(|s| s.strip_suffix(".seg"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        out.push((first, entry.path()));
    }
    out.sort_by_key(|(first, _)| *first);
    Ok(out)
}

/// Result of scanning one segment file.
struct SegmentScan {
    records: Vec<(LogRecord, u64)>,
    /// Byte length of the valid prefix.
    valid_len: u64,
    torn: bool,
}

fn scan_segment(path: &Path, first_offset: u64, is_last: bool) -> Result<SegmentScan, ReplayError> {
    let data = fs::read(path)?;
    let mut pos = 0usize;
    let mut records = Vec::new();
    let mut offset = first_offset;
    while pos < data.len() {
        match parse_frame(&data[pos..]) {
            Frame::Record {
                timestamp_ms,
                topic,
                payload,
                len,
            } => {
                records.push((
                    LogRecord {
                        offset,
                        timestamp_ms,
                        topic,
                        payload,
                    },
                    pos as u64,
                ));
                pos += len;
                offset += 1;
            }
            Frame::Short if is_last => {
                return Ok(SegmentScan {
                    records,
                    valid_len: pos as u64,
                    torn: true,
                })
            }
            Frame::Short | Frame::Bad => return Err(ReplayError::Corrupt(offset)),
        }
    }
    Ok(SegmentScan {
        records,
        valid_len: pos as u64,
        torn: false,
    })
}

/// Reads every record with offset ≥ `from_offset` from the segments in
/// `dir` without modifying any file. A torn tail is skipped silently.
pub fn replay_dir(dir: &Path, from_offset: u64) -> Result<Vec<LogRecord>, ReplayError> {
    let segments = list_segments(dir)?;
    let mut out = Vec::new();
    let mut expected = segments.first().map(|(f, _)| *f).unwrap_or(0);
    for (i, (first, path)) in segments.iter().enumerate() {
        if *first != expected {
            return Err(ReplayError::Corrupt(expected));
        }
        let scan = scan_segment(path, *first, i + 1 == segments.len())?;
        expected += scan.records.len() as u64;
        out.extend(scan.records.into_iter().map(|(r, _)| r).filter(|r| r.offset >= from_offset));
    }
    if from_offset > expected {
        return Err(ReplayError::OutOfRange {
            requested: from_offset,
            next: expected,
        });
    }
    Ok(out)
}

/// Reads the single record stored at `loc`.
pub fn read_record_at(loc: &RecordLoc, offset: u64) -> Result<LogRecord, ReplayError> {
    let mut file = File::open(loc.segment.as_path())?;
    file.seek(SeekFrom::Start(loc.pos))?;
    let mut header = [0u8; FRAME_HEADER];
    file.read_exact(&mut header)?;
    let body_len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    if body_len > MAX_BODY {
        return Err(ReplayError::Corrupt(offset));
    }
    let mut buf = header.to_vec();
    buf.resize(FRAME_HEADER + body_len, 0);
    file.read_exact(&mut buf[FRAME_HEADER..])?;
    match parse_frame(&buf) {
        Frame::Record {
            timestamp_ms,
            topic,
            payload,
            ..
        } => Ok(LogRecord {
            offset,
            timestamp_ms,
            topic,
            payload,
        }),
        _ => Err(ReplayError::Corrupt(offset)),
    }
}

/// Writer side of the on-disk log.
#[derive(Debug)]
pub struct SegmentLog {
    dir: PathBuf,
    config: LogConfig,
    active: File,
    active_path: Arc<PathBuf>,
    active_len: u64,
    next_offset: u64,
}

impl SegmentLog {
    /// Opens (or creates) the log in `dir`, truncating a torn final record.
    /// Returns the log together with every record already stored and its
    /// location.
    pub fn open(dir: &Path, config: LogConfig) -> Result<(Self, Vec<(LogRecord, RecordLoc)>), ReplayError> {
        fs::create_dir_all(dir)?;
        let segments = list_segments(dir)?;
        let mut existing = Vec::new();
        let mut expected = segments.first().map(|(f, _)| *f).unwrap_or(0);
        let mut last: Option<(Arc<PathBuf>, u64)> = None;
        for (i, (first, path)) in segments.iter().enumerate() {
            if *first != expected {
                return Err(ReplayError::Corrupt(expected));
            }
            let is_last = i + 1 == segments.len();
            let scan = scan_segment(path, *first, is_last)?;
            let shared = Arc::new(path.clone());
            expected += scan.records.len() as u64;
            for (rec, pos) in scan.records {
                existing.push((
                    rec,
                    RecordLoc {
                        segment: shared.clone(),
                        pos,
                    },
                ));
            }
            if is_last {
                if scan.torn {
                    log::warn!(
                        "truncating torn record at end of {} (keeping {} bytes)",
                        path.display(),
                        scan.valid_len
                    );
                    let f = OpenOptions::new().write(true).open(path)?;
                    f.set_len(scan.valid_len)?;
                    f.sync_all()?;
                }
                last = Some((shared, scan.valid_len));
            }
        }
        let (active_path, active_len) = match last {
            Some(l) => l,
            None => (Arc::new(dir.join(segment_name(expected))), 0),
        };
        let active = OpenOptions::new()
            .create(true)
            .append(true)
            .open(active_path.as_path())?;
        Ok((
            SegmentLog {
                dir: dir.to_path_buf(),
                config,
                active,
                active_path,
                active_len,
                next_offset: expected,
            },
            existing,
        ))
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, topic: &TopicName, payload: &[u8], timestamp_ms: u64) -> Result<(u64, RecordLoc), AppendError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(AppendError::PayloadTooLarge(payload.len()));
        }
        let frame = encode_frame(topic.as_str(), payload, timestamp_ms);
        if self.active_len > 0 && self.active_len + frame.len() as u64 > self.config.segment_bytes {
            self.rotate()?;
        }
        self.active.write_all(&frame)?;
        if self.config.sync_every_append {
            self.active.sync_data()?;
        }
        let loc = RecordLoc {
            segment: self.active_path.clone(),
            pos: self.active_len,
        };
        self.active_len += frame.len() as u64;
        let offset = self.next_offset;
        self.next_offset += 1;
        Ok((offset, loc))
    }

    fn rotate(&mut self) -> io::Result<()> {
        self.active.sync_all()?;
        let path = self.dir.join(segment_name(self.next_offset));
        self.active = OpenOptions::new().create(true).append(true).open(&path)?;
        self.active_path = Arc::new(path);
        self.active_len = 0;
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.active.flush()?;
        self.active.sync_all()
    }

    pub fn replay(&self, from_offset: u64) -> Result<Vec<LogRecord>, ReplayError> {
        replay_dir(&self.dir, from_offset)
    }
}

/// Per-topic summary served by the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicSummary {
    pub topic: String,
    pub message_count: u64,
    pub last_timestamp_ms: u64,
    pub latest_payload: Bytes,
}

#[derive(Debug, Clone)]
enum Slot {
    Disk(RecordLoc),
    Memory(LogRecord),
}

#[derive(Debug, Default)]
struct TopicEntry {
    offsets: Vec<u64>,
    last_timestamp_ms: u64,
    latest: Bytes,
}

#[derive(Debug, Default)]
struct Index {
    /// Indexed by offset.
    slots: Vec<Slot>,
    topics: BTreeMap<String, TopicEntry>,
}

impl Index {
    fn insert(&mut self, record: &LogRecord, slot: Slot) {
        debug_assert_eq!(record.offset as usize, self.slots.len());
        self.slots.push(slot);
        let entry = self.topics.entry(record.topic.as_str().to_owned()).or_default();
        entry.offsets.push(record.offset);
        entry.last_timestamp_ms = record.timestamp_ms;
        entry.latest = record.payload.clone();
    }
}

#[derive(Debug)]
struct Writer {
    log: Option<SegmentLog>,
    next_offset: u64,
    degraded: bool,
}

/// The broker's message store: an optional on-disk [`SegmentLog`] plus an
/// in-memory index holding the latest value and record locations per topic.
///
/// There is a single writer; readers only take the index lock for the time
/// it takes to copy out locations, and read record bytes without any lock.
#[derive(Debug)]
pub struct MessageStore {
    writer: Mutex<Writer>,
    index: RwLock<Index>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

impl MessageStore {
    /// Store without a backing file; records live in memory.
    pub fn in_memory() -> Self {
        MessageStore {
            writer: Mutex::new(Writer {
                log: None,
                next_offset: 0,
                degraded: false,
            }),
            index: RwLock::new(Index::default()),
        }
    }

    pub fn open(dir: &Path, config: LogConfig) -> Result<Self, StoreError> {
        let (log, existing) = SegmentLog::open(dir, config)?;
        let mut index = Index::default();
        for (rec, loc) in existing {
            index.insert(&rec, Slot::Disk(loc));
        }
        Ok(MessageStore {
            writer: Mutex::new(Writer {
                next_offset: log.next_offset(),
                log: Some(log),
                degraded: false,
            }),
            index: RwLock::new(index),
        })
    }

    /// Appends a record and returns its offset.
    ///
    /// An I/O failure switches the store to memory-only operation; the
    /// record is still indexed so live reads keep working.
    pub fn append(&self, topic: &TopicName, payload: Bytes, timestamp_ms: u64) -> Result<u64, AppendError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(AppendError::PayloadTooLarge(payload.len()));
        }
        let mut writer = self.writer.lock().unwrap();
        let offset = writer.next_offset;
        let record = LogRecord {
            offset,
            timestamp_ms,
            topic: topic.clone(),
            payload,
        };
        let mut slot = Slot::Memory(record.clone());
        if let Some(log) = writer.log.as_mut() {
            match log.append(topic, &record.payload, timestamp_ms) {
                Ok((_, loc)) => slot = Slot::Disk(loc),
                Err(e) => {
                    log::error!("message log append failed, continuing in memory only: {e}");
                    writer.log = None;
                    writer.degraded = true;
                }
            }
        }
        writer.next_offset += 1;
        self.index.write().unwrap().insert(&record, slot);
        Ok(offset)
    }

    pub fn is_degraded(&self) -> bool {
        self.writer.lock().unwrap().degraded
    }

    pub fn next_offset(&self) -> u64 {
        self.index.read().unwrap().slots.len() as u64
    }

    pub fn flush(&self) -> io::Result<()> {
        match self.writer.lock().unwrap().log.as_mut() {
            Some(log) => log.flush(),
            None => Ok(()),
        }
    }

    pub fn latest(&self, topic: &str) -> Option<Bytes> {
        self.index.read().unwrap().topics.get(topic).map(|e| e.latest.clone())
    }

    fn load(slot: Slot, offset: u64) -> Result<LogRecord, ReplayError> {
        match slot {
            Slot::Memory(r) => Ok(r),
            Slot::Disk(loc) => read_record_at(&loc, offset),
        }
    }

    /// Up to `limit` most recent records on `topic`, oldest first.
    pub fn history(&self, topic: &str, limit: usize) -> Result<Vec<LogRecord>, ReplayError> {
        let wanted: Vec<(u64, Slot)> = {
            let index = self.index.read().unwrap();
            let Some(entry) = index.topics.get(topic) else {
                return Ok(Vec::new());
            };
            let start = entry.offsets.len().saturating_sub(limit);
            entry.offsets[start..]
                .iter()
                .map(|&o| (o, index.slots[o as usize].clone()))
                .collect()
        };
        wanted.into_iter().map(|(o, slot)| Self::load(slot, o)).collect()
    }

    /// Every record from `from_offset` on, in offset order.
    pub fn replay(&self, from_offset: u64) -> Result<Vec<LogRecord>, ReplayError> {
        let slots: Vec<Slot> = {
            let index = self.index.read().unwrap();
            let next = index.slots.len() as u64;
            if from_offset > next {
                return Err(ReplayError::OutOfRange {
                    requested: from_offset,
                    next,
                });
            }
            index.slots[from_offset as usize..].to_vec()
        };
        slots
            .into_iter()
            .zip(from_offset..)
            .map(|(slot, o)| Self::load(slot, o))
            .collect()
    }

    pub fn topic_summaries(&self) -> Vec<TopicSummary> {
        let index = self.index.read().unwrap();
        index
            .topics
            .iter()
            .map(|(topic, e)| TopicSummary {
                topic: topic.clone(),
                message_count: e.offsets.len() as u64,
                last_timestamp_ms: e.last_timestamp_ms,
                latest_payload: e.latest.clone(),
            })
            .collect()
    }

    pub fn message_count(&self, topic: &str) -> u64 {
        self.index
            .read()
            .unwrap()
            .topics
            .get(topic)
            .map_or(0, |e| e.offsets.len() as u64)
    }

    /// Stable digest of the indexed state, used to check that readers never
    /// mutate the store.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let index = self.index.read().unwrap();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        index.slots.len().hash(&mut h);
        for (topic, e) in &index.topics {
            topic.hash(&mut h);
            e.offsets.hash(&mut h);
            e.last_timestamp_ms.hash(&mut h);
            e.latest.hash(&mut h);
        }
        h.finish()
    }
}
