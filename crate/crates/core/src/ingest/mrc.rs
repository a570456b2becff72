use std::io::Read;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

use crate::volume::{DensityVolume, VolumeError};

pub const HEADER_LEN: usize = 1024;
const MAP_STAMP: [u8; 4] = *b"MAP ";
const STAMP_LE: [u8; 4] = [0x44, 0x44, 0x00, 0x00];

#[derive(Debug, Error, PartialEq)]
pub enum MrcError {
    #[error("file is {0} bytes, shorter than the 1024-byte header")]
    Short(usize),
    #[error("unsupported mode {0}")]
    UnknownMode(i32),
    #[error("invalid dimensions {0:?}")]
    BadDims([i32; 3]),
    #[error("negative extended header size {0}")]
    BadExtended(i32),
    #[error("expected {expected} bytes from header, file has {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("gzip stream: {0}")]
    Gzip(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Decoded 1024-byte MRC2014 header.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcHeader {
    pub nx: i32,
    pub ny: i32,
    pub nz: i32,
    pub mode: i32,
    pub nstart: [i32; 3],
    pub sampling: [i32; 3],
    /// Cell edge lengths in Å.
    pub cell: [f32; 3],
    pub angles: [f32; 3],
    pub axis_map: [i32; 3],
    pub dmin: f32,
    pub dmax: f32,
    pub dmean: f32,
    pub ispg: i32,
    pub nsymbt: i32,
    pub exttyp: [u8; 4],
    pub nversion: i32,
    pub origin: [f32; 3],
    pub map_stamp: [u8; 4],
    pub machine_stamp: [u8; 4],
    pub rms: f32,
    pub nlabl: i32,
    pub labels: Vec<[u8; 80]>,
    pub endian: Endian,
}

impl MrcHeader {
    /// Header describing `vol` as a mode-2 map with a cubic cell.
    pub fn for_volume(vol: &DensityVolume) -> Self {
        let [d, h, w] = vol.dims();
        let sp = vol.spacing() as f32;
        Self {
            nx: w as i32,
            ny: h as i32,
            nz: d as i32,
            mode: 2,
            nstart: [0; 3],
            sampling: [w as i32, h as i32, d as i32],
            cell: [w as f32 * sp, h as f32 * sp, d as f32 * sp],
            angles: [90.0; 3],
            axis_map: [1, 2, 3],
            dmin: 0.0,
            dmax: 0.0,
            dmean: 0.0,
            ispg: 1,
            nsymbt: 0,
            exttyp: [0; 4],
            nversion: 20140,
            origin: [0.0; 3],
            map_stamp: MAP_STAMP,
            machine_stamp: STAMP_LE,
            rms: 0.0,
            nlabl: 0,
            labels: Vec::new(),
            endian: Endian::Little,
        }
    }

    pub fn with_label(mut self, text: &str) -> Self {
        if self.labels.len() < 10 {
            let mut l = [b' '; 80];
            let b = text.as_bytes();
            let n = b.len().min(80);
            l[..n].copy_from_slice(&b[..n]);
            self.labels.push(l);
            self.nlabl = self.labels.len() as i32;
        }
        self
    }

    /// The header `write_mrc` emits for `vol`: dims, mode, stamps and statistics replaced.
    pub fn resolved_for(&self, vol: &DensityVolume) -> Self {
        let [d, h, w] = vol.dims();
        let n = vol.len() as f64;
        let (mn, mx) = vol.min_max();
        let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vol.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            nx: w as i32,
            ny: h as i32,
            nz: d as i32,
            mode: 2,
            dmin: mn,
            dmax: mx,
            dmean: mean as f32,
            rms: var.sqrt() as f32,
            nsymbt: 0,
            map_stamp: MAP_STAMP,
            machine_stamp: STAMP_LE,
            nlabl: self.labels.len().min(10) as i32,
            labels: self.labels.iter().take(10).copied().collect(),
            endian: Endian::Little,
            ..self.clone()
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.nx as usize * self.ny as usize * self.nz as usize
    }
}

fn sample_size(mode: i32) -> Option<usize> {
    match mode {
        0 => Some(1),
        1 | 6 => Some(2),
        2 => Some(4),
        _ => None,
    }
}

fn detect_endian(bytes: &[u8]) -> Endian {
    match bytes[212] {
        0x44 | 0x41 => Endian::Little,
        0x11 => Endian::Big,
        // absent stamp: whichever byte order gives a plausible mode
        _ => {
            if (0..=16).contains(&LittleEndian::read_i32(&bytes[12..16])) {
                Endian::Little
            } else {
                Endian::Big
            }
        }
    }
}

fn read_header<E: ByteOrder>(b: &[u8], endian: Endian) -> MrcHeader {
    let i = |w: usize| E::read_i32(&b[4 * w..4 * w + 4]);
    let f = |w: usize| E::read_f32(&b[4 * w..4 * w + 4]);
    let nlabl = i(55);
    let labels = (0..nlabl.clamp(0, 10) as usize)
        .map(|k| {
            let mut l = [0u8; 80];
            l.copy_from_slice(&b[224 + 80 * k..304 + 80 * k]);
            l
        })
        .collect();
    MrcHeader {
        nx: i(0),
        ny: i(1),
        nz: i(2),
        mode: i(3),
        nstart: [i(4), i(5), i(6)],
        sampling: [i(7), i(8), i(9)],
        cell: [f(10), f(11), f(12)],
        angles: [f(13), f(14), f(15)],
        axis_map: [i(16), i(17), i(18)],
        dmin: f(19),
        dmax: f(20),
        dmean: f(21),
        ispg: i(22),
        nsymbt: i(23),
        exttyp: b[104..108].try_into().unwrap(),
        nversion: i(27),
        origin: [f(49), f(50), f(51)],
        map_stamp: b[208..212].try_into().unwrap(),
        machine_stamp: b[212..216].try_into().unwrap(),
        rms: f(54),
        nlabl,
        labels,
        endian,
    }
}

/// Parse an MRC/CCP4 map. Data are exposed in storage order (sections, rows, columns) as D×H×W.
pub fn read_mrc(bytes: &[u8]) -> Result<(MrcHeader, DensityVolume), MrcError> {
    if bytes.len() < HEADER_LEN {
        return Err(MrcError::Short(bytes.len()));
    }
    let endian = detect_endian(bytes);
    let header = match endian {
        Endian::Little => read_header::<LittleEndian>(bytes, endian),
        Endian::Big => read_header::<BigEndian>(bytes, endian),
    };
    let dims = [header.nx, header.ny, header.nz];
    if dims.iter().any(|&d| d <= 0) {
        return Err(MrcError::BadDims(dims));
    }
    let size = sample_size(header.mode).ok_or(MrcError::UnknownMode(header.mode))?;
    if header.nsymbt < 0 {
        return Err(MrcError::BadExtended(header.nsymbt));
    }
    let n = header.voxel_count();
    let start = HEADER_LEN + header.nsymbt as usize;
    let expected = start + n * size;
    if expected != bytes.len() {
        return Err(MrcError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[start..];
    let mut data = vec![0f32; n];
    match (header.mode, endian) {
        (0, _) => {
            for (d, &b) in data.iter_mut().zip(payload) {
                *d = b as i8 as f32;
            }
        }
        (1, Endian::Little) => decode(payload, &mut data, |c| LittleEndian::read_i16(c) as f32),
        (1, Endian::Big) => decode(payload, &mut data, |c| BigEndian::read_i16(c) as f32),
        (6, Endian::Little) => decode(payload, &mut data, |c| LittleEndian::read_u16(c) as f32),
        (6, Endian::Big) => decode(payload, &mut data, |c| BigEndian::read_u16(c) as f32),
        (2, Endian::Little) => LittleEndian::read_f32_into(payload, &mut data),
        (2, Endian::Big) => BigEndian::read_f32_into(payload, &mut data),
        (m, _) => return Err(MrcError::UnknownMode(m)),
    }
    let spacing = if header.cell[0] > 0.0 {
        header.cell[0] as f64 / header.nx as f64
    } else {
        log::warn!("MRC cell length is zero; assuming 1 Å spacing");
        1.0
    };
    let vol = DensityVolume::new([header.nz as usize, header.ny as usize, header.nx as usize], data, spacing)?;
    Ok((header, vol))
}

fn decode(payload: &[u8], out: &mut [f32], f: impl Fn(&[u8]) -> f32) {
    let size = payload.len() / out.len();
    for (o, c) in out.iter_mut().zip(payload.chunks_exact(size)) {
        *o = f(c);
    }
}

/// Serialize `vol` as a little-endian mode-2 map using `header` for the free fields.
pub fn write_mrc(header: &MrcHeader, vol: &DensityVolume) -> Vec<u8> {
    let h = header.resolved_for(vol);
    let mut out = vec![0u8; HEADER_LEN + vol.len() * 4];
    {
        let b = &mut out[..HEADER_LEN];
        let mut wi = |w: usize, v: i32| LittleEndian::write_i32(&mut b[4 * w..4 * w + 4], v);
        wi(0, h.nx);
        wi(1, h.ny);
        wi(2, h.nz);
        wi(3, h.mode);
        for k in 0..3 {
            wi(4 + k, h.nstart[k]);
            wi(7 + k, h.sampling[k]);
            wi(16 + k, h.axis_map[k]);
        }
        wi(22, h.ispg);
        wi(23, h.nsymbt);
        wi(27, h.nversion);
        wi(55, h.nlabl);
        let mut wf = |w: usize, v: f32| LittleEndian::write_f32(&mut b[4 * w..4 * w + 4], v);
        for k in 0..3 {
            wf(10 + k, h.cell[k]);
            wf(13 + k, h.angles[k]);
            wf(49 + k, h.origin[k]);
        }
        wf(19, h.dmin);
        wf(20, h.dmax);
        wf(21, h.dmean);
        wf(54, h.rms);
        b[104..108].copy_from_slice(&h.exttyp);
        b[208..212].copy_from_slice(&h.map_stamp);
        b[212..216].copy_from_slice(&h.machine_stamp);
        for (k, l) in h.labels.iter().enumerate() {
            b[224 + 80 * k..304 + 80 * k].copy_from_slice(l);
        }
    }
    LittleEndian::write_f32_into(vol.data(), &mut out[HEADER_LEN..]);
    out
}

/// Read a map that may be gzip-compressed.
pub fn read_map_bytes(bytes: &[u8]) -> Result<(MrcHeader, DensityVolume), MrcError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| MrcError::Gzip(e.to_string()))?;
        read_mrc(&raw)
    } else {
        read_mrc(bytes)
    }
}
