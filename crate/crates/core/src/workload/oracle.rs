use std::collections::BTreeMap;

use crate::blockstore::{VolumeId, VolumeImage};
use crate::error::{Error, Result};
use crate::replication::{GroupHistory, JournalEntry};

/// Reapplies journal entries `1..=up_to_seq` over copies of the baseline
/// images by plain block copies. Entries must arrive in sequence order and
/// without gaps; entries past `up_to_seq` are ignored.
pub fn replay_oracle<'a>(
    entries: impl IntoIterator<Item = &'a JournalEntry>,
    up_to_seq: u64,
    baseline: &BTreeMap<VolumeId, VolumeImage>,
) -> Result<BTreeMap<VolumeId, VolumeImage>> {
    let mut images = baseline.clone();
    let mut expected = 1;
    for e in entries {
        if e.group_seq > up_to_seq {
            break;
        }
        if e.group_seq != expected {
            return Err(Error::InvalidArgument(format!(
                "journal gap: found seq {} where {expected} was expected",
                e.group_seq
            )));
        }
        let img = images.get_mut(&e.volume_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "seq {} targets unknown {}",
                e.group_seq, e.volume_id
            ))
        })?;
        if e.block_index >= img.block_count() || e.payload.len() != img.block(0).len() {
            return Err(Error::InvalidArgument(format!(
                "seq {} does not fit {}",
                e.group_seq, e.volume_id
            )));
        }
        img.block_mut(e.block_index).copy_from_slice(&e.payload);
        expected += 1;
    }
    if expected <= up_to_seq {
        return Err(Error::InvalidArgument(format!(
            "journal ends at seq {} before {up_to_seq}",
            expected - 1
        )));
    }
    Ok(images)
}

/// Replays each stream of a group up to its own prefix length.
pub fn replay_streams(
    history: &GroupHistory,
    stream_prefix: &[u64],
) -> Result<BTreeMap<VolumeId, VolumeImage>> {
    let mut images = history.baseline.clone();
    for (stream, &upto) in stream_prefix.iter().enumerate() {
        let replayed = replay_oracle(history.stream_entries(stream), upto, &history.baseline)?;
        for e in history.stream_entries(stream) {
            images.insert(e.volume_id, replayed[&e.volume_id].clone());
        }
    }
    Ok(images)
}

/// Whether `target` equals the main-site state after some prefix of the
/// global ack order (all streams merged in the order writes were acked).
pub fn matches_some_global_prefix(
    history: &GroupHistory,
    target: &BTreeMap<VolumeId, VolumeImage>,
) -> bool {
    let mut images = history.baseline.clone();
    let differs =
        |img: &VolumeImage, vol: VolumeId, blk: usize| target[&vol].block(blk) != img.block(blk);
    let mut mismatched: usize = images
        .iter()
        .map(|(v, img)| {
            (0..img.block_count())
                .filter(|&b| differs(img, *v, b))
                .count()
        })
        .sum();
    if mismatched == 0 {
        return true;
    }
    for h in &history.entries {
        let (v, b) = (h.entry.volume_id, h.entry.block_index);
        let img = images.get_mut(&v).expect("history only references members");
        let before = differs(img, v, b);
        img.block_mut(b).copy_from_slice(&h.entry.payload);
        let after = differs(img, v, b);
        mismatched = mismatched + after as usize - before as usize;
        if mismatched == 0 {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::simnet::SimTime;

    fn e(seq: u64, vol: u32, blk: usize, byte: u8) -> JournalEntry {
        JournalEntry {
            group_seq: seq,
            volume_id: VolumeId(vol),
            block_index: blk,
            payload: Arc::from(vec![byte; 16]),
            logical_time: SimTime::ZERO,
        }
    }

    fn base() -> BTreeMap<VolumeId, VolumeImage> {
        [
            (VolumeId(1), VolumeImage::zeroed(4, 16)),
            (VolumeId(2), VolumeImage::zeroed(4, 16)),
        ]
        .into()
    }

    #[test]
    fn empty_journal_yields_baseline() {
        let out = replay_oracle(std::iter::empty(), 0, &base()).unwrap();
        assert_eq!(out, base());
    }

    #[test]
    fn replays_prefix_only() {
        let j = [e(1, 1, 0, 5), e(2, 2, 3, 6), e(3, 1, 0, 7)];
        let out = replay_oracle(&j, 2, &base()).unwrap();
        assert_eq!(out[&VolumeId(1)].block(0), &[5; 16]);
        assert_eq!(out[&VolumeId(2)].block(3), &[6; 16]);
    }

    #[test]
    fn gaps_are_rejected() {
        let j = [e(1, 1, 0, 5), e(3, 1, 0, 7)];
        assert_eq!(
            replay_oracle(&j, 3, &base()).unwrap_err().code(),
            "InvalidArgument"
        );
        assert_eq!(
            replay_oracle(&j[..1], 2, &base()).unwrap_err().code(),
            "InvalidArgument"
        );
        assert!(replay_oracle(&j, 1, &base()).is_ok());
    }
}
