//! Order-0 canonical Huffman coding of byte streams.
//!
//! Stream layout:
//!
//! ```text
//! decoded_length:u32 (LE) | code_length[256]:u8 | payload (MSB-first bit packing, zero padded)
//! ```
//!
//! Codes are assigned canonically: symbols sorted by `(length, symbol)` get
//! consecutive code values, incrementing and left-shifting at each length
//! change. A stream with a single distinct symbol gives that symbol length 1.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 4 + 256;
pub const MAX_CODE_LEN: u8 = 32;

/// Shannon entropy (bits/symbol) of the byte histogram of `data`.
pub fn order0_entropy(data: &[u8]) -> f64 {
    entropy_of_counts(&histogram(data))
}

pub fn histogram(data: &[u8]) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    counts
}

pub fn entropy_of_counts(counts: &[u64; 256]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Huffman code lengths for a histogram, capped at [`MAX_CODE_LEN`].
///
/// Merging picks the two lightest nodes, ties going to the lower node id
/// (leaves are ids 0..256, internal nodes are numbered upward from 256).
/// When the tree would exceed the cap, counts are halved (keeping non-zero
/// counts non-zero) and the tree is rebuilt.
pub fn code_lengths(counts: &[u64; 256]) -> [u8; 256] {
    let mut counts = *counts;
    loop {
        let lengths = huffman_lengths(&counts);
        if lengths.iter().all(|&l| l <= MAX_CODE_LEN as u32) {
            return lengths.map(|l| l as u8);
        }
        for c in counts.iter_mut().filter(|c| **c > 0) {
            *c = (*c / 2).max(1);
        }
    }
}

fn huffman_lengths(counts: &[u64; 256]) -> [u32; 256] {
    let mut lengths = [0u32; 256];
    let used: Vec<usize> = (0..256).filter(|&s| counts[s] > 0).collect();
    match used.len() {
        0 => return lengths,
        1 => {
            lengths[used[0]] = 1;
            return lengths;
        }
        _ => {}
    }
    // parent[node] for every node; leaves first, internal nodes appended.
    let mut parent: Vec<usize> = vec![usize::MAX; 256];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        used.iter().map(|&s| Reverse((counts[s], s))).collect();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("two nodes");
        let Reverse((wb, b)) = heap.pop().expect("two nodes");
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((wa + wb, id)));
    }
    for &s in &used {
        let mut depth = 0;
        let mut node = s;
        while parent[node] != usize::MAX {
            node = parent[node];
            depth += 1;
        }
        lengths[s] = depth;
    }
    lengths
}

/// Canonical code value for each symbol with a non-zero length.
pub fn canonical_codes(lengths: &[u8; 256]) -> [u32; 256] {
    let mut order: Vec<usize> = (0..256).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = [0u32; 256];
    let mut code: u64 = 0;
    let mut prev_len = 0u8;
    for (i, &s) in order.iter().enumerate() {
        let len = lengths[s];
        if i > 0 {
            code += 1;
        }
        code <<= len - prev_len;
        prev_len = len;
        codes[s] = code as u32;
    }
    codes
}

/// Total payload bits for `data` under `lengths`.
pub fn payload_bits(counts: &[u64; 256], lengths: &[u8; 256]) -> u64 {
    counts
        .iter()
        .zip(lengths)
        .map(|(&c, &l)| c * u64::from(l))
        .sum()
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn put(&mut self, code: u32, len: u8) {
        self.acc = (self.acc << len) | u64::from(code);
        self.nbits += u32::from(len);
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.out.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1u64 << self.nbits) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.out.push((self.acc << (8 - self.nbits)) as u8);
        }
        self.out
    }
}

pub fn entropy_encode(data: &[u8]) -> Result<Vec<u8>> {
    if data.is_empty() {
        return Err(Error::Empty("entropy coder input"));
    }
    let len = u32::try_from(data.len())
        .map_err(|_| Error::InvalidArgument("input longer than u32::MAX bytes".into()))?;
    let counts = histogram(data);
    let lengths = code_lengths(&counts);
    let codes = canonical_codes(&lengths);
    let bits = payload_bits(&counts, &lengths);

    let mut out = Vec::with_capacity(HEADER_LEN + bits.div_ceil(8) as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&lengths);
    let mut w = BitWriter {
        out,
        acc: 0,
        nbits: 0,
    };
    for &b in data {
        w.put(codes[b as usize], lengths[b as usize]);
    }
    Ok(w.finish())
}

/// Canonical decoding tables: for each length, the first code value, the
/// number of codes, and the offset of its first symbol in `symbols`.
struct DecodeTable {
    first: [u64; MAX_CODE_LEN as usize + 1],
    count: [u64; MAX_CODE_LEN as usize + 1],
    offset: [usize; MAX_CODE_LEN as usize + 1],
    symbols: Vec<u8>,
}

impl DecodeTable {
    fn new(lengths: &[u8]) -> Result<Self> {
        let mut count = [0u64; MAX_CODE_LEN as usize + 1];
        for &l in lengths {
            if l > MAX_CODE_LEN {
                return Err(Error::Malformed(format!("code length {l} exceeds {MAX_CODE_LEN}")));
            }
            if l > 0 {
                count[l as usize] += 1;
            }
        }
        // Kraft: sum 2^-l <= 1, measured in units of 2^-MAX_CODE_LEN.
        let kraft: u64 = (1..=MAX_CODE_LEN as usize)
            .map(|l| count[l] << (MAX_CODE_LEN as usize - l))
            .sum();
        if kraft > 1u64 << MAX_CODE_LEN {
            return Err(Error::Malformed("code lengths violate the Kraft inequality".into()));
        }
        let mut symbols: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
        symbols.sort_by_key(|&s| (lengths[s as usize], s));
        let mut first = [0u64; MAX_CODE_LEN as usize + 1];
        let mut offset = [0usize; MAX_CODE_LEN as usize + 1];
        let mut code = 0u64;
        let mut index = 0usize;
        for l in 1..=MAX_CODE_LEN as usize {
            code = (code + count[l - 1]) << 1;
            first[l] = code;
            offset[l] = index;
            index += count[l] as usize;
        }
        Ok(Self {
            first,
            count,
            offset,
            symbols,
        })
    }
}

pub fn entropy_decode(stream: &[u8]) -> Result<Vec<u8>> {
    if stream.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            available: stream.len(),
        });
    }
    let n = u32::from_le_bytes(stream[..4].try_into().expect("4 bytes")) as usize;
    let table = DecodeTable::new(&stream[4..HEADER_LEN])?;
    let payload = &stream[HEADER_LEN..];
    if n == 0 {
        if !payload.is_empty() {
            return Err(Error::Malformed("payload present for an empty stream".into()));
        }
        return Ok(Vec::new());
    }
    if table.symbols.is_empty() {
        return Err(Error::Malformed("no symbols have a code".into()));
    }
    // Every symbol costs at least one bit.
    if n as u64 > payload.len() as u64 * 8 {
        return Err(Error::Malformed(format!(
            "payload exhausted: {} bytes cannot hold {n} symbols",
            payload.len()
        )));
    }

    let mut out = Vec::with_capacity(n);
    let mut bitpos = 0usize;
    let total_bits = payload.len() * 8;
    while out.len() < n {
        let mut code = 0u64;
        let mut len = 0usize;
        loop {
            if bitpos >= total_bits {
                return Err(Error::Malformed(format!(
                    "payload exhausted after {} of {n} symbols",
                    out.len()
                )));
            }
            let bit = (payload[bitpos / 8] >> (7 - bitpos % 8)) & 1;
            bitpos += 1;
            code = (code << 1) | u64::from(bit);
            len += 1;
            let rel = code.wrapping_sub(table.first[len]);
            if code >= table.first[len] && rel < table.count[len] {
                out.push(table.symbols[table.offset[len] + rel as usize]);
                break;
            }
            if len == MAX_CODE_LEN as usize {
                return Err(Error::Malformed("bit pattern matches no code".into()));
            }
        }
    }
    if payload.len() != bitpos.div_ceil(8) {
        return Err(Error::Malformed(format!(
            "{} trailing payload bytes",
            payload.len() - bitpos.div_ceil(8)
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_symbol_stream_size() {
        let enc = entropy_encode(&[0u8; 100]).unwrap();
        assert_eq!(enc.len(), 273);
        assert_eq!(enc[4], 1);
        assert_eq!(entropy_decode(&enc).unwrap(), vec![0u8; 100]);
    }

    #[test]
    fn canonical_assignment() {
        // Lengths a=2, b=1, c=3, d=3 -> b=0, a=10, c=110, d=111.
        let mut lengths = [0u8; 256];
        lengths[b'a' as usize] = 2;
        lengths[b'b' as usize] = 1;
        lengths[b'c' as usize] = 3;
        lengths[b'd' as usize] = 3;
        let codes = canonical_codes(&lengths);
        assert_eq!(codes[b'b' as usize], 0b0);
        assert_eq!(codes[b'a' as usize], 0b10);
        assert_eq!(codes[b'c' as usize], 0b110);
        assert_eq!(codes[b'd' as usize], 0b111);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(entropy_encode(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn malformed_streams() {
        assert!(matches!(entropy_decode(&[0; 10]), Err(Error::Truncated { .. })));
        let mut bad = vec![0u8; HEADER_LEN];
        bad[0] = 5;
        assert!(entropy_decode(&bad).is_err());
        // Three length-1 codes violate Kraft.
        let mut kraft = vec![0u8; HEADER_LEN + 1];
        kraft[0] = 1;
        kraft[4..7].copy_from_slice(&[1, 1, 1]);
        assert!(entropy_decode(&kraft).is_err());
        // Length beyond the cap.
        let mut long = vec![0u8; HEADER_LEN + 1];
        long[0] = 1;
        long[4] = 40;
        assert!(entropy_decode(&long).is_err());
    }

    #[test]
    fn exhausted_payload() {
        let mut enc = entropy_encode(b"abcabcabcabcdd").unwrap();
        enc.pop();
        assert!(entropy_decode(&enc).is_err());
    }

    #[test]
    fn length_cap_holds_for_fibonacci_counts() {
        let mut counts = [0u64; 256];
        let (mut a, mut b) = (1u64, 1u64);
        for c in counts.iter_mut().take(60) {
            *c = a;
            (a, b) = (b, a + b);
        }
        let lengths = code_lengths(&counts);
        assert!(lengths.iter().all(|&l| l <= MAX_CODE_LEN));
        assert!(lengths[..60].iter().all(|&l| l > 0));
        let kraft: f64 = lengths.iter().filter(|&&l| l > 0).map(|&l| 0.5f64.powi(l as i32)).sum();
        assert!(kraft <= 1.0);
    }
}
