//! Marker parsing up to the start of the first scan.

use serde::{Deserialize, Serialize};

use super::huffman::HuffmanTable;
use super::JpegError;

/// Zigzag scan position to natural (row-major) coefficient index.
pub(crate) const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21,
    28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54,
    47, 55, 62, 63,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subsampling {
    #[serde(rename = "444")]
    S444,
    #[serde(rename = "422")]
    S422,
    #[serde(rename = "420")]
    S420,
    #[serde(rename = "gray")]
    Gray,
}

impl Subsampling {
    pub fn name(self) -> &'static str {
        match self {
            Subsampling::S444 => "444",
            Subsampling::S422 => "422",
            Subsampling::S420 => "420",
            Subsampling::Gray => "gray",
        }
    }
}

/// One frame component and the tables its scan uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub id: u8,
    pub h: u32,
    pub v: u32,
    pub quant_table: usize,
    pub dc_table: usize,
    pub ac_table: usize,
}

/// Everything needed to decode the scan.
#[derive(Debug, Clone)]
pub struct JpegHeader {
    pub width: u32,
    pub height: u32,
    pub components: Vec<Component>,
    pub subsampling: Subsampling,
    /// MCUs per restart interval, if restart markers are present.
    pub restart_interval: Option<u32>,
    /// Dequantization tables in natural order.
    pub quant_tables: [Option<[u16; 64]>; 4],
    pub(crate) dc_tables: [Option<HuffmanTable>; 4],
    pub(crate) ac_tables: [Option<HuffmanTable>; 4],
    /// Components hold RGB rather than YCbCr (Adobe transform 0).
    pub rgb: bool,
    /// Offset of the first entropy-coded byte.
    pub scan_start: usize,
}

impl JpegHeader {
    pub fn max_h(&self) -> u32 {
        self.components.iter().map(|c| c.h).max().unwrap_or(1)
    }

    pub fn max_v(&self) -> u32 {
        self.components.iter().map(|c| c.v).max().unwrap_or(1)
    }

    /// MCU width and height in pixels.
    pub fn mcu_size(&self) -> (u32, u32) {
        (8 * self.max_h(), 8 * self.max_v())
    }

    /// MCU grid columns and rows.
    pub fn mcu_grid(&self) -> (u32, u32) {
        let (w, h) = self.mcu_size();
        (self.width.div_ceil(w), self.height.div_ceil(h))
    }

    pub fn mcu_count(&self) -> u64 {
        let (x, y) = self.mcu_grid();
        x as u64 * y as u64
    }

    pub fn blocks_per_mcu(&self) -> u32 {
        self.components.iter().map(|c| c.h * c.v).sum()
    }

    pub fn block_count(&self) -> u64 {
        self.mcu_count() * self.blocks_per_mcu() as u64
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, JpegError> {
        let b = *self.data.get(self.pos).ok_or(JpegError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, JpegError> {
        Ok(u16::from(self.u8()?) << 8 | u16::from(self.u8()?))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], JpegError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or(JpegError::Truncated)?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Payload of a length-prefixed segment.
    fn segment(&mut self) -> Result<&'a [u8], JpegError> {
        let len = self.u16()? as usize;
        if len < 2 {
            return Err(JpegError::Corrupt(format!("segment length {len}")));
        }
        self.take(len - 2)
    }
}

fn unsupported_sof(marker: u8) -> Option<&'static str> {
    match marker {
        0xC2 => Some("progressive DCT (SOF2)"),
        0xC3 => Some("lossless (SOF3)"),
        0xC5 => Some("differential sequential (SOF5)"),
        0xC6 => Some("differential progressive (SOF6)"),
        0xC7 => Some("differential lossless (SOF7)"),
        0xC9 => Some("arithmetic-coded sequential (SOF9)"),
        0xCA => Some("arithmetic-coded progressive (SOF10)"),
        0xCB => Some("arithmetic-coded lossless (SOF11)"),
        0xCC => Some("arithmetic coding conditioning (DAC)"),
        0xCD..=0xCF => Some("arithmetic-coded hierarchical frame"),
        _ => None,
    }
}

/// Parses markers from SOI through the first SOS.
pub fn parse_headers(bytes: &[u8]) -> Result<JpegHeader, JpegError> {
    if bytes.len() < 2 || bytes[0] != 0xFF || bytes[1] != 0xD8 {
        return Err(JpegError::MissingSoi);
    }
    let mut cur = Cursor { data: bytes, pos: 2 };
    let mut quant_tables: [Option<[u16; 64]>; 4] = [None; 4];
    let mut dc_tables: [Option<HuffmanTable>; 4] = Default::default();
    let mut ac_tables: [Option<HuffmanTable>; 4] = Default::default();
    let mut frame: Option<(u32, u32, Vec<Component>)> = None;
    let mut restart_interval = None;
    let mut adobe_transform: Option<u8> = None;

    loop {
        // Markers may be preceded by any number of fill bytes.
        let mut b = cur.u8()?;
        if b != 0xFF {
            return Err(JpegError::Corrupt(format!("expected marker at byte {}, found {b:02X}", cur.pos - 1)));
        }
        while b == 0xFF {
            b = cur.u8()?;
        }
        let marker = b;
        if let Some(what) = unsupported_sof(marker) {
            return Err(JpegError::Unsupported(what.into()));
        }
        match marker {
            0xC0 | 0xC1 => {
                if frame.is_some() {
                    return Err(JpegError::Corrupt("multiple frames".into()));
                }
                frame = Some(parse_sof(cur.segment()?)?);
            }
            0xC4 => parse_dht(cur.segment()?, &mut dc_tables, &mut ac_tables)?,
            0xDB => parse_dqt(cur.segment()?, &mut quant_tables)?,
            0xDD => {
                let seg = cur.segment()?;
                if seg.len() != 2 {
                    return Err(JpegError::Corrupt("DRI length".into()));
                }
                let n = u16::from_be_bytes([seg[0], seg[1]]) as u32;
                restart_interval = (n > 0).then_some(n);
            }
            0xEE => {
                let seg = cur.segment()?;
                if seg.len() >= 12 && &seg[..5] == b"Adobe" {
                    adobe_transform = Some(seg[11]);
                }
            }
            0xDA => {
                let seg = cur.segment()?;
                let (width, height, mut components) =
                    frame.ok_or_else(|| JpegError::Corrupt("scan before frame header".into()))?;
                parse_sos(seg, &mut components)?;
                return finish(FinishArgs {
                    width,
                    height,
                    components,
                    quant_tables,
                    dc_tables,
                    ac_tables,
                    restart_interval,
                    adobe_transform,
                    scan_start: cur.pos,
                });
            }
            0xD9 => return Err(JpegError::Corrupt("EOI before any scan".into())),
            0xD8 => return Err(JpegError::Corrupt("nested SOI".into())),
            0xD0..=0xD7 | 0x01 => {}
            0xE0..=0xEF | 0xFE | 0xDC | 0xDE | 0xDF | 0xC8 | 0xF0..=0xFD => {
                cur.segment()?;
            }
            m => return Err(JpegError::Unsupported(format!("marker FF{m:02X}"))),
        }
    }
}

fn parse_sof(seg: &[u8]) -> Result<(u32, u32, Vec<Component>), JpegError> {
    if seg.len() < 6 {
        return Err(JpegError::Truncated);
    }
    if seg[0] != 8 {
        return Err(JpegError::Unsupported(format!("{}-bit samples", seg[0])));
    }
    let height = u16::from_be_bytes([seg[1], seg[2]]) as u32;
    let width = u16::from_be_bytes([seg[3], seg[4]]) as u32;
    if height == 0 {
        return Err(JpegError::Unsupported("height defined by DNL marker".into()));
    }
    if width == 0 {
        return Err(JpegError::Corrupt("zero width".into()));
    }
    let n = seg[5] as usize;
    if seg.len() != 6 + 3 * n {
        return Err(JpegError::Corrupt("SOF length".into()));
    }
    if n != 1 && n != 3 {
        return Err(JpegError::Unsupported(format!("{n} components")));
    }
    let mut comps = Vec::with_capacity(n);
    for c in seg[6..].chunks_exact(3) {
        let (h, v, q) = ((c[1] >> 4) as u32, (c[1] & 15) as u32, c[2] as usize);
        if !(1..=4).contains(&h) || !(1..=4).contains(&v) || q > 3 {
            return Err(JpegError::Corrupt(format!("component {} sampling {h}x{v} table {q}", c[0])));
        }
        comps.push(Component { id: c[0], h, v, quant_table: q, dc_table: 0, ac_table: 0 });
    }
    Ok((width, height, comps))
}

fn parse_dqt(mut seg: &[u8], tables: &mut [Option<[u16; 64]>; 4]) -> Result<(), JpegError> {
    while !seg.is_empty() {
        let (precision, id) = (seg[0] >> 4, (seg[0] & 15) as usize);
        if id > 3 || precision > 1 {
            return Err(JpegError::Corrupt(format!("DQT table {id} precision {precision}")));
        }
        let size = if precision == 0 { 64 } else { 128 };
        if seg.len() < 1 + size {
            return Err(JpegError::Truncated);
        }
        let mut table = [0u16; 64];
        for (k, &natural) in ZIGZAG.iter().enumerate() {
            table[natural] =
                if precision == 0 { seg[1 + k] as u16 } else { u16::from_be_bytes([seg[1 + 2 * k], seg[2 + 2 * k]]) };
        }
        tables[id] = Some(table);
        seg = &seg[1 + size..];
    }
    Ok(())
}

fn parse_dht(
    mut seg: &[u8],
    dc: &mut [Option<HuffmanTable>; 4],
    ac: &mut [Option<HuffmanTable>; 4],
) -> Result<(), JpegError> {
    while !seg.is_empty() {
        if seg.len() < 17 {
            return Err(JpegError::Truncated);
        }
        let (class, id) = (seg[0] >> 4, (seg[0] & 15) as usize);
        if class > 1 || id > 3 {
            return Err(JpegError::Corrupt(format!("DHT class {class} id {id}")));
        }
        let counts: [u8; 16] = seg[1..17].try_into().expect("16 bytes");
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        if seg.len() < 17 + total {
            return Err(JpegError::Truncated);
        }
        let table = HuffmanTable::new(&counts, &seg[17..17 + total])?;
        if class == 0 {
            dc[id] = Some(table);
        } else {
            ac[id] = Some(table);
        }
        seg = &seg[17 + total..];
    }
    Ok(())
}

fn parse_sos(seg: &[u8], comps: &mut [Component]) -> Result<(), JpegError> {
    let n = *seg.first().ok_or(JpegError::Truncated)? as usize;
    if seg.len() != 1 + 2 * n + 3 {
        return Err(JpegError::Corrupt("SOS length".into()));
    }
    if n != comps.len() {
        return Err(JpegError::Unsupported("multi-scan (non-interleaved) sequential JPEG".into()));
    }
    for (i, s) in seg[1..1 + 2 * n].chunks_exact(2).enumerate() {
        let c = &mut comps[i];
        if c.id != s[0] {
            return Err(JpegError::Corrupt(format!("scan component {} out of frame order", s[0])));
        }
        c.dc_table = (s[1] >> 4) as usize;
        c.ac_table = (s[1] & 15) as usize;
        if c.dc_table > 3 || c.ac_table > 3 {
            return Err(JpegError::Corrupt("scan table selector".into()));
        }
    }
    let tail = &seg[1 + 2 * n..];
    if tail[0] != 0 || tail[1] != 63 || tail[2] != 0 {
        return Err(JpegError::Corrupt("spectral selection in a sequential scan".into()));
    }
    Ok(())
}

struct FinishArgs {
    width: u32,
    height: u32,
    components: Vec<Component>,
    quant_tables: [Option<[u16; 64]>; 4],
    dc_tables: [Option<HuffmanTable>; 4],
    ac_tables: [Option<HuffmanTable>; 4],
    restart_interval: Option<u32>,
    adobe_transform: Option<u8>,
    scan_start: usize,
}

fn finish(a: FinishArgs) -> Result<JpegHeader, JpegError> {
    let mut components = a.components;
    if components.len() == 1 {
        // A single-component scan is never interleaved: one block per MCU.
        components[0].h = 1;
        components[0].v = 1;
    }
    let max_h = components.iter().map(|c| c.h).max().unwrap_or(1);
    let max_v = components.iter().map(|c| c.v).max().unwrap_or(1);
    for c in &components {
        let ratio = (max_h / c.h, max_v / c.v);
        let exact = max_h % c.h == 0 && max_v % c.v == 0;
        if !exact || !matches!(ratio, (1, 1) | (2, 1) | (2, 2)) {
            return Err(JpegError::Unsupported(format!("sampling factors {}x{} against {max_h}x{max_v}", c.h, c.v)));
        }
        if a.quant_tables[c.quant_table].is_none() {
            return Err(JpegError::Corrupt(format!("missing quantization table {}", c.quant_table)));
        }
        if a.dc_tables[c.dc_table].is_none() || a.ac_tables[c.ac_table].is_none() {
            return Err(JpegError::Corrupt(format!("missing huffman table for component {}", c.id)));
        }
    }
    let subsampling = if components.len() == 1 {
        Subsampling::Gray
    } else {
        let chroma = &components[1];
        match (max_h / chroma.h, max_v / chroma.v) {
            (1, 1) => Subsampling::S444,
            (2, 1) => Subsampling::S422,
            _ => Subsampling::S420,
        }
    };
    let ids: Vec<u8> = components.iter().map(|c| c.id).collect();
    let rgb = components.len() == 3
        && match a.adobe_transform {
            Some(t) => t == 0,
            None => ids == *b"RGB",
        };
    Ok(JpegHeader {
        width: a.width,
        height: a.height,
        components,
        subsampling,
        restart_interval: a.restart_interval,
        quant_tables: a.quant_tables,
        dc_tables: a.dc_tables,
        ac_tables: a.ac_tables,
        rgb,
        scan_start: a.scan_start,
    })
}
