use std::collections::BTreeSet;

use serde::Serialize;

use crate::blockstore::VolumeImage;
use crate::replication::SnapshotGroupId;

use super::record::{BlockContent, Role, TransactionRecord, TxLayout};

/// Result of scanning a recovered pair of sales/stock volumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerificationReport {
    pub checked_site_or_snapshot: String,
    pub committed_txids: BTreeSet<u64>,
    /// Data present without a commit marker: legal, the transaction simply
    /// did not finish before the cut.
    pub incomplete_txids: BTreeSet<u64>,
    /// Commit marker present but a data record missing or invalid.
    pub torn_txids: BTreeSet<u64>,
    pub prefix_ok: bool,
    pub max_recovered_txid: u64,
}

impl VerificationReport {
    pub fn empty(target: impl Into<String>) -> Self {
        VerificationReport {
            checked_site_or_snapshot: target.into(),
            committed_txids: BTreeSet::new(),
            incomplete_txids: BTreeSet::new(),
            torn_txids: BTreeSet::new(),
            prefix_ok: true,
            max_recovered_txid: 0,
        }
    }

    pub fn from_scan(target: impl Into<String>, scan: Scan, prefix_ok: bool) -> Self {
        VerificationReport {
            checked_site_or_snapshot: target.into(),
            max_recovered_txid: scan.committed.last().copied().unwrap_or(0),
            committed_txids: scan.committed,
            incomplete_txids: scan.incomplete,
            torn_txids: scan.torn,
            prefix_ok,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scan {
    pub committed: BTreeSet<u64>,
    pub incomplete: BTreeSet<u64>,
    pub torn: BTreeSet<u64>,
    /// Sum of sales amounts over committed transactions.
    pub total_sales_amount: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Empty,
    Valid(TransactionRecord),
    Bad,
}

fn slot(img: &VolumeImage, layout: &TxLayout, txid: u64, role: Role) -> Slot {
    match TransactionRecord::decode(img.block(layout.block_of(txid, role))) {
        BlockContent::Empty => Slot::Empty,
        BlockContent::Record(r) if r.txid as u64 == txid && r.role == role => Slot::Valid(r),
        _ => Slot::Bad,
    }
}

/// Classifies every txid slot of the layout.
pub fn scan(layout: TxLayout, sales: &VolumeImage, stock: &VolumeImage) -> Scan {
    let mut out = Scan::default();
    for txid in 1..=layout.capacity() {
        let data = slot(sales, &layout, txid, Role::SalesData);
        let mirror = slot(stock, &layout, txid, Role::StockData);
        match slot(sales, &layout, txid, Role::Commit) {
            Slot::Valid(_) => match (data, mirror) {
                (Slot::Valid(s), Slot::Valid(_)) => {
                    out.committed.insert(txid);
                    out.total_sales_amount += s.amount as u64;
                }
                _ => {
                    out.torn.insert(txid);
                }
            },
            Slot::Bad => {
                out.torn.insert(txid);
            }
            Slot::Empty => {
                if data != Slot::Empty || mirror != Slot::Empty {
                    out.incomplete.insert(txid);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnalyticsReport {
    pub snapshot_group_id: SnapshotGroupId,
    pub at_seq: u64,
    pub committed_count: u64,
    pub total_sales_amount: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    const L: TxLayout = TxLayout {
        sales_blocks: 8,
        stock_blocks: 8,
    };

    fn put(img: &mut VolumeImage, txid: u64, role: Role, amount: u32) {
        let r = TransactionRecord {
            txid: txid as u32,
            role,
            amount,
        };
        img.block_mut(L.block_of(txid, role))
            .copy_from_slice(&r.encode(16).unwrap());
    }

    #[test]
    fn empty_volumes_have_nothing() {
        let z = VolumeImage::zeroed(8, 16);
        let s = scan(L, &z, &z);
        assert_eq!(s, Scan::default());
        let r = VerificationReport::from_scan("backup", s, true);
        assert_eq!(r, VerificationReport::empty("backup"));
    }

    #[test]
    fn classifies_by_commit_and_data() {
        let mut sales = VolumeImage::zeroed(8, 16);
        let mut stock = VolumeImage::zeroed(8, 16);
        // 1: complete
        put(&mut sales, 1, Role::SalesData, 10);
        put(&mut stock, 1, Role::StockData, 10);
        put(&mut sales, 1, Role::Commit, 10);
        // 2: sales only, no commit
        put(&mut sales, 2, Role::SalesData, 20);
        // 3: commit without stock data
        put(&mut sales, 3, Role::SalesData, 30);
        put(&mut sales, 3, Role::Commit, 30);
        // 4: commit with corrupted stock data
        put(&mut sales, 4, Role::SalesData, 40);
        put(&mut stock, 4, Role::StockData, 40);
        put(&mut sales, 4, Role::Commit, 40);
        stock.block_mut(L.block_of(4, Role::StockData))[9] ^= 1;

        let s = scan(L, &sales, &stock);
        assert_eq!(s.committed, [1].into());
        assert_eq!(s.incomplete, [2].into());
        assert_eq!(s.torn, [3, 4].into());
        assert_eq!(s.total_sales_amount, 10);
        let r = VerificationReport::from_scan("x", s, false);
        assert_eq!(r.max_recovered_txid, 1);
    }

    #[test]
    fn record_in_wrong_slot_counts_as_invalid() {
        let mut sales = VolumeImage::zeroed(8, 16);
        let mut stock = VolumeImage::zeroed(8, 16);
        put(&mut sales, 1, Role::SalesData, 1);
        put(&mut sales, 1, Role::Commit, 1);
        // A txid-2 record sitting where txid 1's stock record belongs.
        let r = TransactionRecord {
            txid: 2,
            role: Role::StockData,
            amount: 1,
        };
        stock.block_mut(0).copy_from_slice(&r.encode(16).unwrap());
        assert_eq!(scan(L, &sales, &stock).torn, [1].into());
    }
}
