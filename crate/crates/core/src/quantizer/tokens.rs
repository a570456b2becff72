use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SWTK";
const MAX_SCALES: usize = 8;

#[derive(Debug, Error)]
pub enum TokenFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a token file")]
    BadMagic,
    #[error("{0} scales exceed the limit of 8")]
    TooManyScales(usize),
    #[error("scale side {0} does not fit in one byte")]
    SideTooLarge(usize),
    #[error("token {0} does not fit in 16 bits")]
    TokenTooLarge(usize),
    #[error("grid of side {side} holds {expected} tokens, got {got}")]
    CountMismatch { side: usize, expected: usize, got: usize },
}

/// Token indices for one scale, positions in (z, y, x) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub side: usize,
    pub tokens: Vec<usize>,
}

/// All token grids emitted by one quantizer level for one volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    pub level: u8,
    pub grids: Vec<TokenGrid>,
}

impl TokenFile {
    pub fn new(level: u8, sides: &[usize], tokens: &[Vec<usize>]) -> Self {
        let grids = sides
            .iter()
            .zip(tokens)
            .map(|(&side, t)| TokenGrid { side, tokens: t.clone() })
            .collect();
        Self { level, grids }
    }
}

/// Layout: `SWTK`, level, scale count, eight side bytes, two reserved bytes, then u16 LE tokens.
pub fn write_tokens(w: &mut impl Write, file: &TokenFile) -> Result<(), TokenFileError> {
    if file.grids.len() > MAX_SCALES {
        return Err(TokenFileError::TooManyScales(file.grids.len()));
    }
    let mut sides = [0u8; MAX_SCALES];
    for (slot, g) in sides.iter_mut().zip(&file.grids) {
        *slot = u8::try_from(g.side).map_err(|_| TokenFileError::SideTooLarge(g.side))?;
        let expected = g.side.pow(3);
        if g.tokens.len() != expected {
            return Err(TokenFileError::CountMismatch {
                side: g.side,
                expected,
                got: g.tokens.len(),
            });
        }
    }
    w.write_all(MAGIC)?;
    w.write_u8(file.level)?;
    w.write_u8(file.grids.len() as u8)?;
    w.write_all(&sides)?;
    w.write_all(&[0, 0])?;
    for g in &file.grids {
        for &t in &g.tokens {
            let t16 = u16::try_from(t).map_err(|_| TokenFileError::TokenTooLarge(t))?;
            w.write_u16::<LittleEndian>(t16)?;
        }
    }
    Ok(())
}

pub fn read_tokens(r: &mut impl Read) -> Result<TokenFile, TokenFileError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TokenFileError::BadMagic);
    }
    let level = r.read_u8()?;
    let count = r.read_u8()? as usize;
    if count > MAX_SCALES {
        return Err(TokenFileError::TooManyScales(count));
    }
    let mut sides = [0u8; MAX_SCALES];
    r.read_exact(&mut sides)?;
    let mut reserved = [0u8; 2];
    r.read_exact(&mut reserved)?;
    let mut grids = Vec::with_capacity(count);
    for &s in &sides[..count] {
        let side = s as usize;
        let mut tokens = vec![0u16; side.pow(3)];
        r.read_u16_into::<LittleEndian>(&mut tokens)?;
        grids.push(TokenGrid {
            side,
            tokens: tokens.into_iter().map(usize::from).collect(),
        });
    }
    Ok(TokenFile { level, grids })
}
