use std::fmt;

use serde::Serialize;

use crate::blockstore::MIN_BLOCK_SIZE;
use crate::error::{Error, Result};

/// Bytes covered by the checksum: txid (4), role (1), reserved (3), amount (4).
const BODY_LEN: usize = 12;
pub const RECORD_LEN: usize = BODY_LEN + 4;

const _: () = assert!(RECORD_LEN <= MIN_BLOCK_SIZE);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SalesData,
    StockData,
    Commit,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::SalesData => "sales_data",
            Role::StockData => "stock_data",
            Role::Commit => "commit",
        }
    }

    fn code(self) -> u8 {
        match self {
            Role::SalesData => 1,
            Role::StockData => 2,
            Role::Commit => 3,
        }
    }

    fn from_code(c: u8) -> Option<Role> {
        match c {
            1 => Some(Role::SalesData),
            2 => Some(Role::StockData),
            3 => Some(Role::Commit),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One workload record, stored alone at the start of a block.
///
/// Layout (little endian): `txid:u32 role:u8 reserved:[u8;3] amount:u32
/// crc32:u32`, then zero padding to the block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransactionRecord {
    pub txid: u32,
    pub role: Role,
    pub amount: u32,
}

/// What a block holds, as far as the recovery scanner can tell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockContent {
    Empty,
    Record(TransactionRecord),
    Corrupt,
}

impl TransactionRecord {
    fn body(&self) -> [u8; BODY_LEN] {
        let mut b = [0u8; BODY_LEN];
        b[0..4].copy_from_slice(&self.txid.to_le_bytes());
        b[4] = self.role.code();
        b[8..12].copy_from_slice(&self.amount.to_le_bytes());
        b
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.body())
    }

    pub fn encode(&self, block_size: usize) -> Result<Vec<u8>> {
        if block_size < RECORD_LEN {
            return Err(Error::InvalidArgument(format!(
                "block size {block_size} cannot hold a record"
            )));
        }
        let mut out = vec![0u8; block_size];
        out[..BODY_LEN].copy_from_slice(&self.body());
        out[BODY_LEN..RECORD_LEN].copy_from_slice(&self.checksum().to_le_bytes());
        Ok(out)
    }

    pub fn decode(block: &[u8]) -> BlockContent {
        if block.iter().all(|&b| b == 0) {
            return BlockContent::Empty;
        }
        if block.len() < RECORD_LEN || block[RECORD_LEN..].iter().any(|&b| b != 0) {
            return BlockContent::Corrupt;
        }
        let word = |i: usize| u32::from_le_bytes(block[i..i + 4].try_into().expect("4 bytes"));
        let Some(role) = Role::from_code(block[4]) else {
            return BlockContent::Corrupt;
        };
        if block[5..8] != [0, 0, 0] {
            return BlockContent::Corrupt;
        }
        let rec = TransactionRecord {
            txid: word(0),
            role,
            amount: word(8),
        };
        if rec.checksum() != word(BODY_LEN) {
            return BlockContent::Corrupt;
        }
        BlockContent::Record(rec)
    }
}

/// Where each record of a transaction lives. Data records of txid `t` go to
/// block `t - 1` of their volume; the commit marker goes to the second half
/// of the sales volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxLayout {
    pub sales_blocks: usize,
    pub stock_blocks: usize,
}

impl TxLayout {
    /// Largest txid the two volumes can hold.
    pub fn capacity(&self) -> u64 {
        (self.sales_blocks / 2).min(self.stock_blocks) as u64
    }

    pub fn block_of(&self, txid: u64, role: Role) -> usize {
        let i = (txid - 1) as usize;
        match role {
            Role::SalesData | Role::StockData => i,
            Role::Commit => self.sales_blocks / 2 + i,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn zero_block_is_empty_not_corrupt() {
        assert_eq!(TransactionRecord::decode(&[0; 32]), BlockContent::Empty);
    }

    #[test]
    fn commit_lands_in_second_half() {
        let l = TxLayout {
            sales_blocks: 1024,
            stock_blocks: 1024,
        };
        assert_eq!(l.capacity(), 512);
        assert_eq!(l.block_of(1, Role::SalesData), 0);
        assert_eq!(l.block_of(1, Role::Commit), 512);
        assert_eq!(l.block_of(512, Role::Commit), 1023);
    }

    #[test]
    fn known_checksum() {
        let r = TransactionRecord {
            txid: 1,
            role: Role::SalesData,
            amount: 7,
        };
        let mut body = [0u8; 12];
        body[0] = 1;
        body[4] = 1;
        body[8] = 7;
        assert_eq!(r.checksum(), crc32fast::hash(&body));
    }

    proptest! {
        #[test]
        fn round_trips(txid in 1u32.., role in 0u8..3, amount in any::<u32>(), size in 16usize..80) {
            let role = [Role::SalesData, Role::StockData, Role::Commit][role as usize];
            let r = TransactionRecord { txid, role, amount };
            let block = r.encode(size).unwrap();
            prop_assert_eq!(block.len(), size);
            prop_assert_eq!(TransactionRecord::decode(&block), BlockContent::Record(r));
        }

        #[test]
        fn any_single_byte_flip_is_detected(txid in 1u32..1000, amount in 1u32..1000, pos in 0usize..32, bit in 0u8..8) {
            let r = TransactionRecord { txid, role: Role::Commit, amount };
            let mut block = r.encode(32).unwrap();
            block[pos] ^= 1 << bit;
            prop_assert!(!matches!(TransactionRecord::decode(&block), BlockContent::Record(x) if x == r));
        }
    }
}
