//! Square bit matrix and the on-disk mask format.
//!
//! File layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `RAMK`                            |
//! | 4      | 2    | version (`1`)                           |
//! | 6      | 2    | flags (rule code, reference region)     |
//! | 8      | 8    | token count `n`                         |
//! | 16     | ..   | `ceil(n*n / 8)` bytes of packed bits    |
//!
//! Bit `u*n + v` lives in byte `(u*n + v) / 8` at position `(u*n + v) % 8`,
//! least significant bit first. Padding bits after the last cell are zero.

pub const MAGIC: [u8; 4] = *b"RAMK";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Flag value for masks that did not come from a named rule-set.
pub const FLAGS_UNSPECIFIED: u16 = 0x00ff;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskFileError {
    #[error("file shorter than the {HEADER_LEN}-byte header")]
    Truncated,
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("token count {0} too large")]
    Size(u64),
    #[error("expected {expected} payload bytes, found {actual}")]
    Payload { expected: usize, actual: usize },
    #[error("non-zero padding bits")]
    Padding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    n: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, words: vec![0; (n * n).div_ceil(64)] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        debug_assert!(u < self.n && v < self.n);
        let b = u * self.n + v;
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        debug_assert!(u < self.n && v < self.n);
        let b = u * self.n + v;
        if on {
            self.words[b / 64] |= 1 << (b % 64);
        } else {
            self.words[b / 64] &= !(1 << (b % 64));
        }
    }

    pub fn flip(&mut self, u: usize, v: usize) {
        let cur = self.get(u, v);
        self.set(u, v, !cur);
    }

    /// Sets columns `keys` of rows `queries`.
    pub fn fill(&mut self, queries: std::ops::Range<usize>, keys: std::ops::Range<usize>) {
        for u in queries {
            for v in keys.clone() {
                self.set(u, v, true);
            }
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn payload_len(n: usize) -> usize {
        (n * n).div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(Self::payload_len(self.n));
        out
    }

    pub fn from_bytes(n: usize, bytes: &[u8]) -> Result<Self, MaskFileError> {
        let expected = Self::payload_len(n);
        if bytes.len() != expected {
            return Err(MaskFileError::Payload { expected, actual: bytes.len() });
        }
        let used = n * n;
        if !used.is_multiple_of(8) && bytes[expected - 1] >> (used % 8) != 0 {
            return Err(MaskFileError::Padding);
        }
        let mut m = Self::zeros(n);
        for (w, chunk) in m.words.iter_mut().zip(bytes.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_le_bytes(buf);
        }
        Ok(m)
    }

    pub fn encode(&self, flags: u16) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + Self::payload_len(self.n));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&self.to_bytes());
        out
    }

    /// Returns the matrix and the header flags.
    pub fn decode(bytes: &[u8]) -> Result<(Self, u16), MaskFileError> {
        if bytes.len() < HEADER_LEN {
            return Err(MaskFileError::Truncated);
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(MaskFileError::Magic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(MaskFileError::Version(version));
        }
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        let n64 = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        // 2^31 tokens would already need 2^59 bytes of payload.
        if n64 > u64::from(u32::MAX >> 1) {
            return Err(MaskFileError::Size(n64));
        }
        let n = n64 as usize;
        let m = Self::from_bytes(n, &bytes[HEADER_LEN..])?;
        Ok((m, flags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_bytes_for_identity_3() {
        let mut m = BitMatrix::zeros(3);
        for u in 0..3 {
            m.set(u, u, true);
        }
        // Bits 0, 4, 8 set: 0b0001_0001, 0b0000_0001.
        assert_eq!(m.to_bytes(), vec![0x11, 0x01]);
        let file = m.encode(0);
        assert_eq!(&file[..4], b"RAMK");
        assert_eq!(&file[4..8], &[1, 0, 0, 0]);
        assert_eq!(&file[8..16], &3u64.to_le_bytes());
        assert_eq!(&file[16..], &[0x11, 0x01]);
        assert_eq!(BitMatrix::decode(&file).unwrap(), (m, 0));
    }

    #[test]
    fn decode_errors() {
        let m = BitMatrix::zeros(3);
        let good = m.encode(7);
        assert_eq!(BitMatrix::decode(&good[..10]), Err(MaskFileError::Truncated));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(BitMatrix::decode(&bad), Err(MaskFileError::Magic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(BitMatrix::decode(&bad), Err(MaskFileError::Version(2)));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(BitMatrix::decode(&bad), Err(MaskFileError::Payload { .. })));
        let mut bad = good.clone();
        *bad.last_mut().unwrap() = 0x80;
        assert_eq!(BitMatrix::decode(&bad), Err(MaskFileError::Padding));
    }

    #[test]
    fn empty_matrix() {
        let m = BitMatrix::zeros(0);
        let file = m.encode(0);
        assert_eq!(file.len(), HEADER_LEN);
        assert_eq!(BitMatrix::decode(&file).unwrap().0.size(), 0);
    }
}
