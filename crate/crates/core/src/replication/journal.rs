use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest as _, Sha256};

use crate::blockstore::{Site, VolumeId};
use crate::error::{Error, Result};
use crate::simnet::SimTime;

use super::GroupId;

/// One sequenced full-block update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub group_seq: u64,
    /// Main-site volume the write was issued against.
    pub volume_id: VolumeId,
    pub block_index: usize,
    pub payload: Arc<[u8]>,
    /// Instant the entry was sequenced at the main site.
    pub logical_time: SimTime,
}

impl JournalEntry {
    pub fn payload_sha(&self) -> String {
        hex::encode(Sha256::digest(&self.payload))
    }
}

// `seq=<n> vol=<id> blk=<i> sha=<hex> t=<logical_time>`
impl fmt::Display for JournalEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seq={} vol={} blk={} sha={} t={}",
            self.group_seq,
            self.volume_id,
            self.block_index,
            self.payload_sha(),
            self.logical_time
        )
    }
}

/// Bounded, ordered, duplicate-free log of journal entries held at one site.
#[derive(Debug, Clone)]
pub struct Journal {
    site: Site,
    group_id: GroupId,
    entries: BTreeMap<u64, JournalEntry>,
    capacity: usize,
    trimmed_below: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JournalInfo {
    pub site: Site,
    pub group_id: GroupId,
    pub len: usize,
    pub capacity: usize,
    pub trimmed_below: u64,
}

impl Journal {
    pub fn new(site: Site, group_id: GroupId, capacity: usize) -> Self {
        Journal {
            site,
            group_id,
            entries: BTreeMap::new(),
            capacity: capacity.max(1),
            trimmed_below: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Lowest sequence number still retained (or that would be retained).
    pub fn trimmed_below(&self) -> u64 {
        self.trimmed_below
    }

    pub fn info(&self) -> JournalInfo {
        JournalInfo {
            site: self.site,
            group_id: self.group_id,
            len: self.entries.len(),
            capacity: self.capacity,
            trimmed_below: self.trimmed_below,
        }
    }

    /// Appends at the tail; the sequence must follow the current maximum.
    pub fn append(&mut self, entry: JournalEntry) -> Result<()> {
        if self.is_full() {
            return Err(Error::Backpressure(format!(
                "{} journal of {} holds {} entries",
                self.site, self.group_id, self.capacity
            )));
        }
        let expected = self
            .entries
            .last_key_value()
            .map(|(k, _)| k + 1)
            .unwrap_or(self.trimmed_below);
        if entry.group_seq != expected {
            return Err(Error::InvalidArgument(format!(
                "append of seq {} where {expected} was expected",
                entry.group_seq
            )));
        }
        self.entries.insert(entry.group_seq, entry);
        Ok(())
    }

    /// Stores an entry received out of order. Returns `false` for duplicates,
    /// already-trimmed sequences, or when the journal is full.
    pub fn insert(&mut self, entry: JournalEntry) -> bool {
        if entry.group_seq < self.trimmed_below
            || self.entries.contains_key(&entry.group_seq)
            || self.is_full()
        {
            return false;
        }
        self.entries.insert(entry.group_seq, entry);
        true
    }

    pub fn contains(&self, seq: u64) -> bool {
        self.entries.contains_key(&seq)
    }

    pub fn get(&self, seq: u64) -> Option<&JournalEntry> {
        self.entries.get(&seq)
    }

    pub fn first_seq(&self) -> Option<u64> {
        self.entries.first_key_value().map(|(k, _)| *k)
    }

    /// Entries with `from <= seq <= to`, ascending.
    pub fn range(&self, from: u64, to: u64) -> impl Iterator<Item = &JournalEntry> {
        self.entries
            .range(from..=to.max(from))
            .map(|(_, e)| e)
            .filter(move |e| e.group_seq <= to)
    }

    /// Removes and returns the lowest entry if its sequence is `seq`.
    pub fn pop_if(&mut self, seq: u64) -> Option<JournalEntry> {
        match self.entries.first_key_value() {
            Some((&k, _)) if k == seq => {
                self.trimmed_below = seq + 1;
                self.entries.pop_first().map(|(_, e)| e)
            }
            _ => None,
        }
    }

    /// Drops every entry with sequence `<= seq`.
    pub fn trim_through(&mut self, seq: u64) -> usize {
        let keep = self.entries.split_off(&(seq + 1));
        let removed = self.entries.len();
        self.entries = keep;
        self.trimmed_below = self.trimmed_below.max(seq + 1);
        removed
    }

    pub fn iter(&self) -> impl Iterator<Item = &JournalEntry> {
        self.entries.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(seq: u64) -> JournalEntry {
        JournalEntry {
            group_seq: seq,
            volume_id: VolumeId(1),
            block_index: 0,
            payload: vec![seq as u8; 16].into(),
            logical_time: SimTime(seq),
        }
    }

    #[test]
    fn append_is_gapless_and_bounded() {
        let mut j = Journal::new(Site::Main, GroupId(1), 2);
        j.append(entry(1)).unwrap();
        assert_eq!(j.append(entry(3)).unwrap_err().code(), "InvalidArgument");
        j.append(entry(2)).unwrap();
        assert_eq!(j.append(entry(3)).unwrap_err().code(), "Backpressure");
        assert_eq!(j.trim_through(1), 1);
        j.append(entry(3)).unwrap();
        assert_eq!(j.iter().map(|e| e.group_seq).collect::<Vec<_>>(), [2, 3]);
        assert_eq!(j.trimmed_below(), 2);
    }

    #[test]
    fn insert_dedups_and_pops_in_order() {
        let mut j = Journal::new(Site::Backup, GroupId(1), 8);
        assert!(j.insert(entry(7)));
        assert!(j.insert(entry(5)));
        assert!(!j.insert(entry(5)));
        assert!(j.pop_if(4).is_none());
        assert_eq!(j.pop_if(5).unwrap().group_seq, 5);
        assert!(!j.insert(entry(5)), "already consumed");
        assert!(j.pop_if(6).is_none());
    }

    #[test]
    fn dump_line_format() {
        let line = entry(3).to_string();
        assert!(line.starts_with("seq=3 vol=vol-0001 blk=0 sha="));
        assert!(line.ends_with(" t=0.003"));
    }
}
