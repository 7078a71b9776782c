//! Fixed-length token coding and the `.codb` container.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! "CODB" | version u8 | height u32 | width u32 | f u8 | bits_per_token u8 | seed u64 | payload
//! ```
//!
//! The payload holds `rows * cols` indices of `bits_per_token` bits each in
//! row-major order, most significant bit first, zero-padded to a byte.

use crate::config::CodecConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CODB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 1 + 8;
pub const MAX_BITS_PER_TOKEN: u8 = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major codebook indices.
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} indices for a {rows}x{cols} grid",
                indices.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check_range(&self, codebook_size: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= codebook_size) {
            Some(i) => Err(Error::Range(format!(
                "index {i} outside codebook of size {codebook_size}"
            ))),
            None => Ok(()),
        }
    }
}

fn check_bits(bits_per_token: u8) -> Result<()> {
    if bits_per_token == 0 || bits_per_token > MAX_BITS_PER_TOKEN {
        return Err(Error::Range(format!(
            "bits_per_token {bits_per_token} outside 1..={MAX_BITS_PER_TOKEN}"
        )));
    }
    Ok(())
}

pub fn payload_len(tokens: usize, bits_per_token: u8) -> usize {
    (tokens * bits_per_token as usize).div_ceil(8)
}

pub fn pack_tokens(grid: &TokenGrid, bits_per_token: u8) -> Result<Vec<u8>> {
    check_bits(bits_per_token)?;
    grid.check_range(1usize << bits_per_token)?;
    let mut out = Vec::with_capacity(payload_len(grid.len(), bits_per_token));
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for &index in &grid.indices {
        acc = (acc << bits_per_token) | u64::from(index);
        filled += u32::from(bits_per_token);
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

pub fn unpack_tokens(
    payload: &[u8],
    rows: usize,
    cols: usize,
    bits_per_token: u8,
) -> Result<TokenGrid> {
    check_bits(bits_per_token)?;
    let count = rows * cols;
    let expected = payload_len(count, bits_per_token);
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mask = (1u64 << bits_per_token) - 1;
    let mut indices = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut bytes = payload.iter();
    while indices.len() < count {
        while filled < u32::from(bits_per_token) {
            // length was checked above
            let b = bytes.next().copied().unwrap_or(0);
            acc = (acc << 8) | u64::from(b);
            filled += 8;
        }
        filled -= u32::from(bits_per_token);
        indices.push(((acc >> filled) & mask) as u32);
        acc &= (1u64 << filled) - 1;
    }
    TokenGrid::new(rows, cols, indices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub height: u32,
    pub width: u32,
    pub downsample_factor: u8,
    pub bits_per_token: u8,
    /// Seed of the decoder's initial noise.
    pub seed: u64,
}

impl Header {
    pub fn for_config(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            version: VERSION,
            height: config.height as u32,
            width: config.width as u32,
            downsample_factor: u8::try_from(config.downsample_factor)
                .map_err(|_| Error::Config("downsample factor exceeds u8".into()))?,
            bits_per_token: config.bits_per_token() as u8,
            seed,
        })
    }

    pub fn grid_dims(&self) -> Result<(usize, usize)> {
        let f = self.downsample_factor as u32;
        if f == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Format(format!(
                "{}x{} not divisible by f={f}",
                self.height, self.width
            )));
        }
        Ok(((self.height / f) as usize, (self.width / f) as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub tokens: TokenGrid,
}

impl Bitstream {
    pub fn new(header: Header, tokens: TokenGrid) -> Result<Self> {
        check_bits(header.bits_per_token)?;
        let (rows, cols) = header.grid_dims()?;
        if (rows, cols) != (tokens.rows, tokens.cols) {
            return Err(Error::Shape(format!(
                "token grid {}x{} does not match header grid {rows}x{cols}",
                tokens.rows, tokens.cols
            )));
        }
        tokens.check_range(1usize << header.bits_per_token)?;
        Ok(Self { header, tokens })
    }

    pub fn payload_bits(&self) -> u64 {
        self.tokens.len() as u64 * u64::from(self.header.bits_per_token)
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let payload = pack_tokens(&self.tokens, h.bits_per_token)?;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.push(h.version);
        out.extend_from_slice(&h.height.to_be_bytes());
        out.extend_from_slice(&h.width.to_be_bytes());
        out.push(h.downsample_factor);
        out.push(h.bits_per_token);
        out.extend_from_slice(&h.seed.to_be_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "stream of {} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let u32_at = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let header = Header {
            version,
            height: u32_at(5),
            width: u32_at(9),
            downsample_factor: bytes[13],
            bits_per_token: bytes[14],
            seed: u64::from_be_bytes(bytes[15..23].try_into().expect("8 bytes")),
        };
        check_bits(header.bits_per_token).map_err(|e| Error::Format(e.to_string()))?;
        let (rows, cols) = header.grid_dims()?;
        let tokens = unpack_tokens(&bytes[HEADER_LEN..], rows, cols, header.bits_per_token)?;
        Ok(Self { header, tokens })
    }
}
