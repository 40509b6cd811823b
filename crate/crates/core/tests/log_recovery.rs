use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use bytes::Bytes;
use proptest::prelude::*;
use wsn_core::persistence::{replay_dir, LogConfig, LogRecord, MessageStore, ReplayError};
use wsn_core::topic::TopicName;

fn t(s: &str) -> TopicName {
    TopicName::new(s).unwrap()
}

fn only_segment(dir: &Path) -> PathBuf {
    let mut segs: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "seg"))
        .collect();
    segs.sort();
    segs.pop().unwrap()
}

fn write_log(dir: &Path, records: &[(&str, &[u8])]) -> Vec<LogRecord> {
    let store = MessageStore::open(dir, LogConfig::default()).unwrap();
    for (i, (topic, payload)) in records.iter().enumerate() {
        store.append(&t(topic), Bytes::copy_from_slice(payload), 1000 + i as u64).unwrap();
    }
    store.flush().unwrap();
    store.replay(0).unwrap()
}

#[test]
fn truncating_the_final_record_anywhere_leaves_a_clean_prefix() {
    let src = tempfile::tempdir().unwrap();
    let payloads: [(&str, &[u8]); 4] = [
        ("sensors/a/data", br#"{"temperature":26.200001,"humidity":67,"pressure":100031.59}"#),
        ("sensors/b/data", b"x"),
        ("sensors/a/status", b"online"),
        ("sensors/a/data", br#"{"temperature":26.200001,"humidity":67.300003,"pressure":100032.41}"#),
    ];
    let full = write_log(src.path(), &payloads);
    let seg = only_segment(src.path());
    let bytes = fs::read(&seg).unwrap();
    let last_start = {
        // length of everything but the final frame
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), &payloads[..3]);
        fs::metadata(only_segment(dir.path())).unwrap().len() as usize
    };
    assert!(last_start < bytes.len());

    for cut in last_start..=bytes.len() {
        let dir = tempfile::tempdir().unwrap();
        let copy = dir.path().join(seg.file_name().unwrap());
        fs::write(&copy, &bytes[..cut]).unwrap();

        let expected = if cut == bytes.len() { &full[..] } else { &full[..3] };
        let read_only = replay_dir(dir.path(), 0).unwrap();
        assert_eq!(read_only, expected, "replay at cut {cut}");

        let store = MessageStore::open(dir.path(), LogConfig::default()).unwrap();
        assert_eq!(store.replay(0).unwrap(), expected, "open at cut {cut}");
        assert_eq!(store.next_offset(), expected.len() as u64);
        // the torn tail is gone and appends continue densely
        let off = store.append(&t("sensors/c/data"), Bytes::from_static(b"after"), 9).unwrap();
        assert_eq!(off, expected.len() as u64);
        drop(store);
        let reopened = MessageStore::open(dir.path(), LogConfig::default()).unwrap();
        assert_eq!(reopened.replay(0).unwrap().len(), expected.len() + 1);
    }
}

#[test]
fn damage_before_the_tail_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_log(dir.path(), &[("a", b"one"), ("a", b"two"), ("a", b"three")]);
    let seg = only_segment(dir.path());
    let mut bytes = fs::read(&seg).unwrap();
    // payload byte of the first record
    let i = 8 + 10 + 1;
    bytes[i] ^= 0x40;
    fs::write(&seg, &bytes).unwrap();
    assert!(matches!(replay_dir(dir.path(), 0), Err(ReplayError::Corrupt(0))));
    assert!(MessageStore::open(dir.path(), LogConfig::default()).is_err());
}

#[test]
fn replay_from_offset_and_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let all = write_log(dir.path(), &[("a", b"1"), ("b", b"2"), ("a", b"3")]);
    let store = MessageStore::open(dir.path(), LogConfig::default()).unwrap();
    assert_eq!(store.replay(1).unwrap(), all[1..]);
    assert_eq!(store.replay(3).unwrap(), vec![]);
    assert!(matches!(store.replay(4), Err(ReplayError::OutOfRange { requested: 4, next: 3 })));
}

#[test]
fn unwritable_dir_fails_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"").unwrap();
    assert!(MessageStore::open(&file, LogConfig::default()).is_err());
}

#[test]
fn appended_garbage_after_segment_close_is_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let all = write_log(dir.path(), &[("a", b"1"), ("b", b"2")]);
    let seg = only_segment(dir.path());
    use std::io::Write;
    let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
    f.write_all(&[0xFF, 0xFF, 0xFF]).unwrap();
    drop(f);
    let store = MessageStore::open(dir.path(), LogConfig::default()).unwrap();
    assert_eq!(store.replay(0).unwrap(), all);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Reopening a log reproduces the records, per-topic latest values and
    /// counts of the store that wrote it.
    #[test]
    fn reopen_reproduces_state(
        ops in prop::collection::vec((0usize..3, prop::collection::vec(any::<u8>(), 0..64)), 1..40),
        segment_bytes in 64u64..512,
    ) {
        let topics = ["s/a/data", "s/b/data", "s/a/status"];
        let dir = tempfile::tempdir().unwrap();
        let cfg = LogConfig { segment_bytes, sync_every_append: false };
        let store = MessageStore::open(dir.path(), cfg.clone()).unwrap();
        for (i, (ti, payload)) in ops.iter().enumerate() {
            let off = store.append(&t(topics[*ti]), Bytes::from(payload.clone()), i as u64).unwrap();
            prop_assert_eq!(off, i as u64);
        }
        store.flush().unwrap();
        let before = store.replay(0).unwrap();
        let fp = store.fingerprint();
        drop(store);
        let reopened = MessageStore::open(dir.path(), cfg).unwrap();
        prop_assert_eq!(reopened.replay(0).unwrap(), before);
        prop_assert_eq!(reopened.fingerprint(), fp);
        for topic in topics {
            let last = ops.iter().rev().find(|(ti, _)| topics[*ti] == topic).map(|(_, p)| Bytes::from(p.clone()));
            prop_assert_eq!(reopened.latest(topic), last);
            let count = ops.iter().filter(|(ti, _)| topics[*ti] == topic).count() as u64;
            prop_assert_eq!(reopened.message_count(topic), count);
        }
    }
}
