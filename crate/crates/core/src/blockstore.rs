//! In-memory block volumes with copy-on-write snapshots.
//!
//! Each site owns one [`BlockStore`]. Volumes are fixed-size arrays of
//! equally sized blocks; writes always replace a whole block. A snapshot
//! keeps the original content of a block the first time that block is
//! overwritten after the snapshot was taken, so reading a snapshot returns
//! either the saved original or the (unchanged) live block.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 4096;
/// Smallest block that can hold a serialized transaction record.
pub const MIN_BLOCK_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Main,
    Backup,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Main => "main",
            Site::Backup => "backup",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Site::Main),
            "backup" => Ok(Site::Backup),
            other => Err(Error::InvalidArgument(format!("unknown site {other:?}"))),
        }
    }
}

macro_rules! prefixed_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u32);

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                write!(f, concat!($prefix, "-{:04}"), self.0)
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                s.strip_prefix(concat!($prefix, "-"))
                    .and_then(|n| n.parse::<u32>().ok())
                    .map($name)
                    .ok_or_else(|| {
                        $crate::error::Error::InvalidArgument(format!(
                            concat!("malformed ", $prefix, " id {:?}"),
                            s
                        ))
                    })
            }
        }

        impl ::serde::Serialize for $name {
            fn serialize<S: ::serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> ::serde::Deserialize<'de> for $name {
            fn deserialize<D: ::serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = <String as ::serde::Deserialize>::deserialize(d)?;
                s.parse().map_err(::serde::de::Error::custom)
            }
        }
    };
}
pub(crate) use prefixed_id;

prefixed_id!(
    /// Volume identifier, unique within one site.
    VolumeId,
    "vol"
);
prefixed_id!(SnapshotId, "snap");

/// SHA-256 over a volume's shape and its blocks in index order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of_blocks(block_count: usize, block_size: usize, bytes: &[u8]) -> Digest {
        let mut h = Sha256::new();
        h.update((block_count as u64).to_le_bytes());
        h.update((block_size as u64).to_le_bytes());
        h.update(bytes);
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        Digest(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

/// A full copy of a volume (or snapshot) taken for comparison and analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeImage {
    pub block_size: usize,
    pub bytes: Vec<u8>,
}

impl VolumeImage {
    pub fn zeroed(block_count: usize, block_size: usize) -> Self {
        VolumeImage {
            block_size,
            bytes: vec![0; block_count * block_size],
        }
    }

    pub fn block_count(&self) -> usize {
        self.bytes.len() / self.block_size
    }

    pub fn block(&self, index: usize) -> &[u8] {
        &self.bytes[index * self.block_size..(index + 1) * self.block_size]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [u8] {
        &mut self.bytes[index * self.block_size..(index + 1) * self.block_size]
    }

    pub fn digest(&self) -> Digest {
        Digest::of_blocks(self.block_count(), self.block_size, &self.bytes)
    }
}

#[derive(Debug, Clone)]
pub struct Volume {
    id: VolumeId,
    site: Site,
    block_count: usize,
    block_size: usize,
    data: Vec<u8>,
    generation: u64,
    snapshots: Vec<SnapshotId>,
}

impl Volume {
    pub fn id(&self) -> VolumeId {
        self.id
    }

    pub fn site(&self) -> Site {
        self.site
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of writes applied since creation.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn snapshots(&self) -> &[SnapshotId] {
        &self.snapshots
    }

    pub fn block(&self, index: usize) -> &[u8] {
        &self.data[index * self.block_size..(index + 1) * self.block_size]
    }

    pub fn is_zeroed(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    pub fn digest(&self) -> Digest {
        Digest::of_blocks(self.block_count, self.block_size, &self.data)
    }

    pub fn image(&self) -> VolumeImage {
        VolumeImage {
            block_size: self.block_size,
            bytes: self.data.clone(),
        }
    }
}

/// Read-only point-in-time view of a volume.
#[derive(Debug, Clone)]
pub struct Snapshot {
    id: SnapshotId,
    source: VolumeId,
    saved_blocks: BTreeMap<usize, Box<[u8]>>,
    created_at_generation: u64,
}

impl Snapshot {
    pub fn id(&self) -> SnapshotId {
        self.id
    }

    pub fn source_volume_id(&self) -> VolumeId {
        self.source
    }

    pub fn created_at_generation(&self) -> u64 {
        self.created_at_generation
    }

    /// Blocks preserved because the source overwrote them after creation.
    pub fn saved_blocks(&self) -> &BTreeMap<usize, Box<[u8]>> {
        &self.saved_blocks
    }
}

/// All volumes and snapshots of one site.
#[derive(Debug, Clone)]
pub struct BlockStore {
    site: Site,
    volumes: BTreeMap<VolumeId, Volume>,
    snapshots: BTreeMap<SnapshotId, Snapshot>,
    next_volume: u32,
    next_snapshot: u32,
}

impl BlockStore {
    pub fn new(site: Site) -> Self {
        BlockStore {
            site,
            volumes: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            next_volume: 1,
            next_snapshot: 1,
        }
    }

    pub fn site(&self) -> Site {
        self.site
    }

    /// Creates a zero-filled volume with the next free identifier.
    pub fn create_volume(&mut self, block_count: usize, block_size: usize) -> Result<VolumeId> {
        while self.volumes.contains_key(&VolumeId(self.next_volume)) {
            self.next_volume += 1;
        }
        self.create_volume_with_id(VolumeId(self.next_volume), block_count, block_size)
    }

    pub fn create_volume_with_id(
        &mut self,
        id: VolumeId,
        block_count: usize,
        block_size: usize,
    ) -> Result<VolumeId> {
        if block_count < 1 {
            return Err(Error::InvalidArgument(format!(
                "block_count must be at least 1, got {block_count}"
            )));
        }
        if block_size < MIN_BLOCK_SIZE {
            return Err(Error::InvalidArgument(format!(
                "block_size must be at least {MIN_BLOCK_SIZE}, got {block_size}"
            )));
        }
        if self.volumes.contains_key(&id) {
            return Err(Error::AlreadyExists(format!("{} volume {id}", self.site)));
        }
        let data = vec![
            0;
            block_count.checked_mul(block_size).ok_or_else(|| {
                Error::InvalidArgument("volume size overflows".into())
            })?
        ];
        self.volumes.insert(
            id,
            Volume {
                id,
                site: self.site,
                block_count,
                block_size,
                data,
                generation: 0,
                snapshots: Vec::new(),
            },
        );
        if id.0 >= self.next_volume {
            self.next_volume = id.0 + 1;
        }
        Ok(id)
    }

    pub fn contains(&self, id: VolumeId) -> bool {
        self.volumes.contains_key(&id)
    }

    pub fn volume(&self, id: VolumeId) -> Result<&Volume> {
        self.volumes
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("{} volume {id}", self.site)))
    }

    pub fn volumes(&self) -> impl Iterator<Item = &Volume> {
        self.volumes.values()
    }

    /// Replaces one block, preserving the original for every snapshot that
    /// has not yet saved it. Returns the new generation.
    pub fn apply_write(&mut self, id: VolumeId, block_index: usize, data: &[u8]) -> Result<u64> {
        let site = self.site;
        let vol = self
            .volumes
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("{site} volume {id}")))?;
        if block_index >= vol.block_count {
            return Err(Error::InvalidArgument(format!(
                "block {block_index} out of range for {id} ({} blocks)",
                vol.block_count
            )));
        }
        if data.len() != vol.block_size {
            return Err(Error::InvalidArgument(format!(
                "write of {} bytes to {id} with block_size {}",
                data.len(),
                vol.block_size
            )));
        }
        let range = block_index * vol.block_size..(block_index + 1) * vol.block_size;
        for sid in &vol.snapshots {
            let snap = self
                .snapshots
                .get_mut(sid)
                .expect("volume references a registered snapshot");
            snap.saved_blocks
                .entry(block_index)
                .or_insert_with(|| vol.data[range.clone()].into());
        }
        vol.data[range].copy_from_slice(data);
        vol.generation += 1;
        Ok(vol.generation)
    }

    pub fn read_block(&self, id: VolumeId, block_index: usize) -> Result<&[u8]> {
        let vol = self.volume(id)?;
        if block_index >= vol.block_count {
            return Err(Error::InvalidArgument(format!(
                "block {block_index} out of range for {id}"
            )));
        }
        Ok(vol.block(block_index))
    }

    pub fn create_snapshot(&mut self, id: VolumeId) -> Result<SnapshotId> {
        let site = self.site;
        let vol = self
            .volumes
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("{site} volume {id}")))?;
        let sid = SnapshotId(self.next_snapshot);
        self.next_snapshot += 1;
        vol.snapshots.push(sid);
        self.snapshots.insert(
            sid,
            Snapshot {
                id: sid,
                source: id,
                saved_blocks: BTreeMap::new(),
                created_at_generation: vol.generation,
            },
        );
        Ok(sid)
    }

    pub fn snapshot(&self, sid: SnapshotId) -> Result<&Snapshot> {
        self.snapshots
            .get(&sid)
            .ok_or_else(|| Error::NotFound(format!("{} snapshot {sid}", self.site)))
    }

    pub fn read_snapshot(&self, sid: SnapshotId, block_index: usize) -> Result<&[u8]> {
        let snap = self.snapshot(sid)?;
        let vol = self.volume(snap.source)?;
        if block_index >= vol.block_count {
            return Err(Error::InvalidArgument(format!(
                "block {block_index} out of range for {sid}"
            )));
        }
        Ok(match snap.saved_blocks.get(&block_index) {
            Some(saved) => saved,
            None => vol.block(block_index),
        })
    }

    pub fn image(&self, id: VolumeId) -> Result<VolumeImage> {
        Ok(self.volume(id)?.image())
    }

    pub fn snapshot_image(&self, sid: SnapshotId) -> Result<VolumeImage> {
        let snap = self.snapshot(sid)?;
        let mut image = self.volume(snap.source)?.image();
        for (&i, saved) in &snap.saved_blocks {
            image.block_mut(i).copy_from_slice(saved);
        }
        Ok(image)
    }

    pub fn volume_digest(&self, id: VolumeId) -> Result<Digest> {
        Ok(self.volume(id)?.digest())
    }

    pub fn snapshot_digest(&self, sid: SnapshotId) -> Result<Digest> {
        Ok(self.snapshot_image(sid)?.digest())
    }

    /// Writes a volume as raw concatenated blocks to `<site>-<volume_id>.vol`.
    pub fn persist_volume(&self, id: VolumeId, dir: &Path) -> io::Result<PathBuf> {
        let vol = self
            .volume(id)
            .map_err(|e| io::Error::new(io::ErrorKind::NotFound, e.to_string()))?;
        let path = dir.join(format!("{}-{}.vol", self.site, id));
        fs::write(&path, &vol.data)?;
        Ok(path)
    }

    pub fn persist_all(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        self.volumes
            .keys()
            .map(|&id| self.persist_volume(id, dir))
            .collect()
    }

    /// Loads a file written by [`persist_volume`](Self::persist_volume). The
    /// site prefix of the filename must match this store.
    pub fn load_volume(&mut self, path: &Path, block_size: usize) -> io::Result<VolumeId> {
        let invalid = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let stem = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".vol"))
            .ok_or_else(|| invalid(format!("not a volume file: {}", path.display())))?;
        let (site, id) = stem
            .split_once('-')
            .ok_or_else(|| invalid(format!("malformed volume file name {stem:?}")))?;
        if site != self.site.as_str() {
            return Err(invalid(format!(
                "file for site {site}, store is {}",
                self.site
            )));
        }
        let id: VolumeId = id.parse().map_err(|e: Error| invalid(e.to_string()))?;
        let data = fs::read(path)?;
        if block_size == 0 || data.is_empty() || data.len() % block_size != 0 {
            return Err(invalid(format!(
                "{} bytes is not a whole number of {block_size}-byte blocks",
                data.len()
            )));
        }
        self.create_volume_with_id(id, data.len() / block_size, block_size)
            .map_err(|e| invalid(e.to_string()))?;
        self.volumes.get_mut(&id).expect("just created").data = data;
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(size: usize, fill: u8) -> Vec<u8> {
        vec![fill; size]
    }

    #[test]
    fn fresh_volume_reads_zero() {
        let mut s = BlockStore::new(Site::Main);
        let v = s.create_volume(1024, 4096).unwrap();
        assert_eq!(s.read_block(v, 1023).unwrap(), &[0u8; 4096][..]);
        assert_eq!(s.volume(v).unwrap().generation(), 0);
    }

    #[test]
    fn minimal_and_invalid_shapes() {
        let mut s = BlockStore::new(Site::Backup);
        let v = s.create_volume(1, 16).unwrap();
        assert_eq!(s.volume(v).unwrap().block_size(), 16);
        assert_eq!(
            s.create_volume(0, 4096).unwrap_err().code(),
            "InvalidArgument"
        );
        assert_eq!(
            s.create_volume(4, 15).unwrap_err().code(),
            "InvalidArgument"
        );
        assert_eq!(
            s.create_volume_with_id(v, 1, 16).unwrap_err().code(),
            "AlreadyExists"
        );
    }

    #[test]
    fn write_bumps_generation_and_validates() {
        let mut s = BlockStore::new(Site::Main);
        let v = s.create_volume(2, 16).unwrap();
        assert_eq!(s.apply_write(v, 0, &block(16, 7)).unwrap(), 1);
        assert_eq!(s.read_block(v, 0).unwrap(), &block(16, 7)[..]);
        assert_eq!(
            s.apply_write(v, 2, &block(16, 7)).unwrap_err().code(),
            "InvalidArgument"
        );
        assert_eq!(
            s.apply_write(v, 0, &block(15, 7)).unwrap_err().code(),
            "InvalidArgument"
        );
        assert_eq!(
            s.apply_write(VolumeId(9), 0, &block(16, 7))
                .unwrap_err()
                .code(),
            "NotFound"
        );
        assert_eq!(s.volume(v).unwrap().generation(), 1);
    }

    #[test]
    fn snapshot_keeps_pre_write_content() {
        let mut s = BlockStore::new(Site::Backup);
        let v = s.create_volume(4, 16).unwrap();
        s.apply_write(v, 0, &block(16, 1)).unwrap();
        let snap = s.create_snapshot(v).unwrap();
        assert_eq!(
            s.snapshot_digest(snap).unwrap(),
            s.volume_digest(v).unwrap()
        );
        s.apply_write(v, 0, &block(16, 2)).unwrap();
        assert_eq!(s.read_snapshot(snap, 0).unwrap(), &block(16, 1)[..]);
        assert_eq!(s.read_block(v, 0).unwrap(), &block(16, 2)[..]);
    }

    #[test]
    fn repeated_overwrite_saves_only_first_original() {
        let mut s = BlockStore::new(Site::Backup);
        let v = s.create_volume(2, 16).unwrap();
        let snap = s.create_snapshot(v).unwrap();
        s.apply_write(v, 0, &block(16, 1)).unwrap();
        s.apply_write(v, 0, &block(16, 2)).unwrap();
        let saved = s.snapshot(snap).unwrap().saved_blocks();
        assert_eq!(saved.len(), 1);
        assert_eq!(&*saved[&0], &block(16, 0)[..]);
    }

    #[test]
    fn snapshots_at_different_generations_are_independent() {
        let mut s = BlockStore::new(Site::Backup);
        let v = s.create_volume(2, 16).unwrap();
        let a = s.create_snapshot(v).unwrap();
        s.apply_write(v, 1, &block(16, 5)).unwrap();
        let b = s.create_snapshot(v).unwrap();
        s.apply_write(v, 1, &block(16, 6)).unwrap();
        assert_eq!(s.read_snapshot(a, 1).unwrap(), &block(16, 0)[..]);
        assert_eq!(s.read_snapshot(b, 1).unwrap(), &block(16, 5)[..]);
        assert_eq!(s.snapshot(b).unwrap().created_at_generation(), 1);
    }

    #[test]
    fn digest_equal_for_equal_shapes_and_changes_on_write() {
        let mut s = BlockStore::new(Site::Main);
        let a = s.create_volume(8, 32).unwrap();
        let b = s.create_volume(8, 32).unwrap();
        let c = s.create_volume(4, 64).unwrap();
        assert_eq!(s.volume_digest(a).unwrap(), s.volume_digest(b).unwrap());
        assert_ne!(s.volume_digest(a).unwrap(), s.volume_digest(c).unwrap());
        s.apply_write(a, 3, &block(32, 1)).unwrap();
        assert_ne!(s.volume_digest(a).unwrap(), s.volume_digest(b).unwrap());
        assert_eq!(s.volume_digest(a).unwrap().to_hex().len(), 64);
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = BlockStore::new(Site::Main);
        let v = s.create_volume(3, 16).unwrap();
        s.apply_write(v, 2, &block(16, 9)).unwrap();
        let path = s.persist_volume(v, dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "main-vol-0001.vol");
        let mut t = BlockStore::new(Site::Main);
        let loaded = t.load_volume(&path, 16).unwrap();
        assert_eq!(loaded, v);
        assert_eq!(t.volume_digest(v).unwrap(), s.volume_digest(v).unwrap());
        let mut wrong = BlockStore::new(Site::Backup);
        assert!(wrong.load_volume(&path, 16).is_err());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Write(usize, u8),
        Snap,
    }

    fn ops(blocks: usize) -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                3 => (0..blocks, any::<u8>()).prop_map(|(i, b)| Op::Write(i, b)),
                1 => Just(Op::Snap),
            ],
            0..24,
        )
    }

    proptest! {
        // Full-copy oracle: every snapshot is compared with a clone of the
        // volume taken at creation time.
        #[test]
        fn cow_matches_full_copy(blocks in 1usize..=8, seq in ops(8)) {
            let mut s = BlockStore::new(Site::Backup);
            let v = s.create_volume(blocks, 16).unwrap();
            let mut copies: Vec<(SnapshotId, Vec<u8>, std::collections::BTreeSet<usize>)> = Vec::new();
            for op in seq {
                match op {
                    Op::Write(i, b) => {
                        let i = i % blocks;
                        s.apply_write(v, i, &block(16, b)).unwrap();
                        for c in &mut copies { c.2.insert(i); }
                    }
                    Op::Snap => {
                        let sid = s.create_snapshot(v).unwrap();
                        copies.push((sid, s.image(v).unwrap().bytes, Default::default()));
                    }
                }
            }
            for (sid, copy, written) in &copies {
                for i in 0..blocks {
                    prop_assert_eq!(s.read_snapshot(*sid, i).unwrap(), &copy[i * 16..(i + 1) * 16]);
                }
                prop_assert!(s.snapshot(*sid).unwrap().saved_blocks().len() <= written.len());
            }
        }

        #[test]
        fn digest_equal_iff_contents_equal(a in prop::collection::vec(0u8..3, 64), b in prop::collection::vec(0u8..3, 64)) {
            prop_assert_eq!(
                Digest::of_blocks(4, 16, &a) == Digest::of_blocks(4, 16, &b),
                a == b
            );
        }
    }
}
