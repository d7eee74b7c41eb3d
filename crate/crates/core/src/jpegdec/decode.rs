//! Scan decoding restricted to the blocks a pixel rectangle depends on.

use super::header::{JpegHeader, ZIGZAG};
use super::huffman::{seek_restart, BitReader, HuffmanTable};
use super::idct::idct_islow;
use super::{DecodeStats, Image, JpegError, RoiSpec};

/// Decoded samples of one component, covering only the needed blocks.
struct Plane {
    /// Horizontal and vertical upsampling ratios (1 or 2).
    rh: u32,
    rv: u32,
    /// Triangular upsampling; libjpeg falls back to replication for very
    /// narrow components.
    fancy: bool,
    /// Real (downsampled) component dimensions.
    width: u32,
    height: u32,
    bx: (u32, u32),
    by: (u32, u32),
    stride: usize,
    data: Vec<u8>,
}

impl Plane {
    #[inline]
    fn get(&self, sy: u32, sx: u32) -> i32 {
        let row = (sy - self.by.0 * 8) as usize;
        let col = (sx - self.bx.0 * 8) as usize;
        self.data[row * self.stride + col] as i32
    }

    /// Upsampled value at output pixel `(y, x)`, bit-exact with libjpeg's
    /// h2v1/h2v2 fancy upsamplers.
    #[inline]
    fn sample(&self, y: u32, x: u32) -> i32 {
        if !self.fancy {
            return self.get(y / self.rv, x / self.rh);
        }
        let j = x / 2;
        let last = self.width - 1;
        if self.rv == 1 {
            let row = y;
            let here = self.get(row, j) * 3;
            return if x % 2 == 0 {
                if j == 0 {
                    self.get(row, 0)
                } else {
                    (here + self.get(row, j - 1) + 1) >> 2
                }
            } else if j == last {
                self.get(row, last)
            } else {
                (here + self.get(row, j + 1) + 2) >> 2
            };
        }
        let i = y / 2;
        // The vertical neighbor is the row above for even outputs and below
        // for odd ones, replicating the edge rows.
        let n = if y % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(self.height - 1) };
        let colsum = |c: u32| self.get(i, c) * 3 + self.get(n, c);
        let this = colsum(j);
        if x % 2 == 0 {
            if j == 0 {
                (this * 4 + 8) >> 4
            } else {
                (this * 3 + colsum(j - 1) + 8) >> 4
            }
        } else if j == last {
            (this * 4 + 7) >> 4
        } else {
            (this * 3 + colsum(j + 1) + 7) >> 4
        }
    }
}

/// Component sample range `[lo, hi)` feeding output pixels `[a, b)`.
fn sample_span(a: u32, b: u32, ratio: u32, fancy: bool, len: u32) -> (u32, u32) {
    if ratio == 1 {
        return (a, b);
    }
    if !fancy {
        return (a / 2, (b - 1) / 2 + 1);
    }
    let lo = if a % 2 == 0 { (a / 2).saturating_sub(1) } else { a / 2 };
    let last = b - 1;
    let hi = if last % 2 == 1 { last / 2 + 1 } else { last / 2 };
    (lo, hi.min(len - 1) + 1)
}

struct BlockDecoder<'h> {
    dc: &'h HuffmanTable,
    ac: &'h HuffmanTable,
}

impl BlockDecoder<'_> {
    /// Decodes one block's coefficients; when `out` is `None` the values are
    /// only parsed to advance the bit stream.
    #[inline]
    fn decode(&self, r: &mut BitReader, pred: &mut i32, out: Option<&mut [i32; 64]>) -> Result<(), JpegError> {
        let t = r.decode(self.dc)? as u32;
        if t > 11 {
            return Err(JpegError::Corrupt(format!("DC category {t}")));
        }
        *pred += r.receive_extend(t)?;
        match out {
            Some(coef) => {
                coef.fill(0);
                coef[0] = *pred;
                let mut k = 1;
                while k < 64 {
                    let rs = r.decode(self.ac)?;
                    let (run, size) = ((rs >> 4) as usize, (rs & 15) as u32);
                    if size == 0 {
                        if run != 15 {
                            break;
                        }
                        k += 16;
                        continue;
                    }
                    k += run;
                    if k > 63 {
                        return Err(JpegError::Corrupt("AC coefficient index past 63".into()));
                    }
                    coef[ZIGZAG[k]] = r.receive_extend(size)?;
                    k += 1;
                }
            }
            None => {
                let mut k = 1;
                while k < 64 {
                    let rs = r.decode(self.ac)?;
                    let (run, size) = ((rs >> 4) as usize, (rs & 15) as u32);
                    if size == 0 {
                        if run != 15 {
                            break;
                        }
                        k += 16;
                        continue;
                    }
                    k += run + 1;
                    r.bits(size)?;
                }
                if k > 64 {
                    return Err(JpegError::Corrupt("AC coefficient index past 63".into()));
                }
            }
        }
        Ok(())
    }
}

pub(super) fn decode_region(
    bytes: &[u8],
    header: &JpegHeader,
    roi: RoiSpec,
) -> Result<(Image, DecodeStats), JpegError> {
    let (max_h, max_v) = (header.max_h(), header.max_v());
    let (mcux, _) = header.mcu_grid();

    let mut planes = Vec::with_capacity(header.components.len());
    for c in &header.components {
        let (rh, rv) = (max_h / c.h, max_v / c.v);
        let width = (header.width * c.h).div_ceil(max_h);
        let height = (header.height * c.v).div_ceil(max_v);
        let fancy = rh == 2 && width > 2;
        let (x0, x1) = sample_span(roi.left, roi.right, rh, fancy, width);
        let (y0, y1) = sample_span(roi.top, roi.bottom, rv, fancy, height);
        let bx = (x0 / 8, x1.div_ceil(8));
        let by = (y0 / 8, y1.div_ceil(8));
        let stride = (bx.1 - bx.0) as usize * 8;
        let rows = (by.1 - by.0) as usize * 8;
        planes.push(Plane { rh, rv, fancy, width, height, bx, by, stride, data: vec![0; stride * rows] });
    }

    // MCU rows and, in the last row, columns that contain a needed block.
    let comps = &header.components;
    let row_first = comps.iter().zip(&planes).map(|(c, p)| p.by.0 / c.v).min().unwrap_or(0);
    let row_end = comps.iter().zip(&planes).map(|(c, p)| (p.by.1 - 1) / c.v + 1).max().unwrap_or(0);
    let col_last = comps.iter().zip(&planes).map(|(c, p)| (p.bx.1 - 1) / c.h).max().unwrap_or(0);
    let end_mcu = (row_end as u64 - 1) * mcux as u64 + col_last as u64 + 1;

    let first_needed = row_first as u64 * mcux as u64;
    let (start_mcu, pos, mut next_rst) = match header.restart_interval {
        Some(ri) if first_needed >= ri as u64 => {
            let interval = first_needed / ri as u64;
            let pos = seek_restart(bytes, header.scan_start, interval as usize)
                .ok_or_else(|| JpegError::Corrupt(format!("restart marker {interval} not found")))?;
            (interval * ri as u64, pos, (interval % 8) as u8)
        }
        _ => (0, header.scan_start, 0),
    };

    let decoders: Vec<BlockDecoder> = comps
        .iter()
        .map(|c| BlockDecoder {
            dc: header.dc_tables[c.dc_table].as_ref().expect("validated"),
            ac: header.ac_tables[c.ac_table].as_ref().expect("validated"),
        })
        .collect();
    let quant: Vec<&[u16; 64]> =
        comps.iter().map(|c| header.quant_tables[c.quant_table].as_ref().expect("validated")).collect();

    let mut reader = BitReader::new(bytes, pos);
    let mut preds = vec![0i32; comps.len()];
    let mut coef = [0i32; 64];
    let mut idct_blocks = 0u64;
    for m in start_mcu..end_mcu {
        if let Some(ri) = header.restart_interval {
            if m > start_mcu && m % ri as u64 == 0 {
                reader.restart(next_rst)?;
                next_rst = (next_rst + 1) % 8;
                preds.fill(0);
            }
        }
        let (mx, my) = ((m % mcux as u64) as u32, (m / mcux as u64) as u32);
        for (ci, c) in comps.iter().enumerate() {
            let plane = &mut planes[ci];
            for v in 0..c.v {
                let by = my * c.v + v;
                let row_ok = by >= plane.by.0 && by < plane.by.1;
                for h in 0..c.h {
                    let bx = mx * c.h + h;
                    if row_ok && bx >= plane.bx.0 && bx < plane.bx.1 {
                        decoders[ci].decode(&mut reader, &mut preds[ci], Some(&mut coef))?;
                        let off = (by - plane.by.0) as usize * 8 * plane.stride + (bx - plane.bx.0) as usize * 8;
                        idct_islow(&coef, quant[ci], &mut plane.data[off..], plane.stride);
                        idct_blocks += 1;
                    } else {
                        decoders[ci].decode(&mut reader, &mut preds[ci], None)?;
                    }
                }
            }
        }
    }

    let img = convert(header, &planes, roi);
    let stats = DecodeStats {
        mcus_total: header.mcu_count(),
        mcus_entropy_decoded: end_mcu - start_mcu,
        mcus_skipped_by_restart: start_mcu,
        blocks_total: header.block_count(),
        idct_blocks,
        rows_output: roi.height(),
    };
    Ok((img, stats))
}

#[inline]
fn clamp(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

/// Upsamples and color converts the planes into RGB pixels of `roi`.
fn convert(header: &JpegHeader, planes: &[Plane], roi: RoiSpec) -> Image {
    let mut img = Image::new(roi.width(), roi.height(), 3);
    let mut out = img.pixels.chunks_exact_mut(3);
    for y in roi.top..roi.bottom {
        for x in roi.left..roi.right {
            let px = out.next().expect("sized for roi");
            if planes.len() == 1 {
                let g = planes[0].sample(y, x) as u8;
                px.copy_from_slice(&[g, g, g]);
                continue;
            }
            let (a, b, c) = (planes[0].sample(y, x), planes[1].sample(y, x), planes[2].sample(y, x));
            if header.rgb {
                px.copy_from_slice(&[a as u8, b as u8, c as u8]);
                continue;
            }
            let (cb, cr) = (b - 128, c - 128);
            // 16-bit fixed-point BT.601 with the reference codec's rounding.
            let r = a + ((91881 * cr + 32768) >> 16);
            let g = a + ((-22554 * cb + 32768 - 46802 * cr) >> 16);
            let bl = a + ((116130 * cb + 32768) >> 16);
            px.copy_from_slice(&[clamp(r), clamp(g), clamp(bl)]);
        }
    }
    img
}
