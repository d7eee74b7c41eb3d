use super::JpegError;

const LOOKAHEAD: u32 = 9;

/// A canonical Huffman table with a 9-bit fast path.
#[derive(Debug, Clone)]
pub struct HuffmanTable {
    /// `(code_length << 8) | symbol`, zero when the prefix needs the slow path.
    fast: Vec<u16>,
    maxcode: [i32; 18],
    valoffset: [i32; 17],
    symbols: Vec<u8>,
}

impl HuffmanTable {
    /// Builds a table from the DHT code-length counts (`counts[i]` codes of
    /// length `i + 1`) and the symbols in code order.
    pub fn new(counts: &[u8; 16], symbols: &[u8]) -> Result<Self, JpegError> {
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        if total != symbols.len() || total > 256 {
            return Err(JpegError::Corrupt("huffman table symbol count mismatch".into()));
        }
        let mut maxcode = [-1i32; 18];
        let mut valoffset = [0i32; 17];
        let mut fast = vec![0u16; 1 << LOOKAHEAD];
        let mut code: u32 = 0;
        let mut k = 0usize;
        for len in 1..=16u32 {
            let n = counts[len as usize - 1] as usize;
            if n > 0 {
                valoffset[len as usize] = k as i32 - code as i32;
                for _ in 0..n {
                    if len <= LOOKAHEAD {
                        let shift = LOOKAHEAD - len;
                        let base = (code << shift) as usize;
                        for e in &mut fast[base..base + (1 << shift)] {
                            *e = ((len as u16) << 8) | symbols[k] as u16;
                        }
                    }
                    code += 1;
                    k += 1;
                }
                if code > (1 << len) {
                    return Err(JpegError::Corrupt("huffman code lengths overflow".into()));
                }
                maxcode[len as usize] = code as i32 - 1;
            }
            code <<= 1;
        }
        maxcode[17] = i32::MAX;
        Ok(Self { fast, maxcode, valoffset, symbols: symbols.to_vec() })
    }
}

/// Where the reader stopped when it could not supply more entropy bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Marker(u8),
    EndOfData,
}

/// MSB-first bit reader over entropy-coded data with 0xFF00 unstuffing.
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u64,
    /// Bits in `acc`, real or padding.
    count: u32,
    /// Real bits in `acc`; the rest are zero padding past a marker.
    real: u32,
    stop: Option<Stop>,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8], pos: usize) -> Self {
        Self { data, pos, acc: 0, count: 0, real: 0, stop: None }
    }

    fn fill(&mut self) {
        while self.count <= 56 {
            let byte = if self.stop.is_some() {
                0
            } else if self.pos >= self.data.len() {
                self.stop = Some(Stop::EndOfData);
                0
            } else {
                let b = self.data[self.pos];
                if b == 0xFF {
                    let mut next = self.pos + 1;
                    while next < self.data.len() && self.data[next] == 0xFF {
                        next += 1;
                    }
                    match self.data.get(next) {
                        Some(0x00) => {
                            self.pos = next + 1;
                            self.real += 8;
                            0xFF
                        }
                        Some(&m) => {
                            self.pos = next - 1;
                            self.stop = Some(Stop::Marker(m));
                            0
                        }
                        None => {
                            self.pos = self.data.len();
                            self.stop = Some(Stop::EndOfData);
                            0
                        }
                    }
                } else {
                    self.pos += 1;
                    self.real += 8;
                    b
                }
            };
            self.acc |= (byte as u64) << (56 - self.count);
            self.count += 8;
        }
    }

    fn overrun(&self) -> JpegError {
        match self.stop {
            Some(Stop::Marker(0xD9)) | Some(Stop::EndOfData) | None => JpegError::PrematureEnd,
            Some(Stop::Marker(m)) => JpegError::Corrupt(format!("unexpected marker FF{m:02X} in entropy data")),
        }
    }

    #[inline]
    fn consume(&mut self, n: u32) -> Result<(), JpegError> {
        if n > self.real {
            return Err(self.overrun());
        }
        self.acc <<= n;
        self.count -= n;
        self.real -= n;
        Ok(())
    }

    #[inline]
    pub fn bits(&mut self, n: u32) -> Result<u32, JpegError> {
        if n == 0 {
            return Ok(0);
        }
        if self.count < n {
            self.fill();
        }
        let v = (self.acc >> (64 - n)) as u32;
        self.consume(n)?;
        Ok(v)
    }

    #[inline]
    pub fn decode(&mut self, table: &HuffmanTable) -> Result<u8, JpegError> {
        if self.count < 16 {
            self.fill();
        }
        let peek = (self.acc >> (64 - LOOKAHEAD)) as usize;
        let e = table.fast[peek];
        if e != 0 {
            self.consume((e >> 8) as u32)?;
            return Ok(e as u8);
        }
        let mut code = (self.acc >> (64 - LOOKAHEAD)) as i32;
        let mut len = LOOKAHEAD as usize;
        while len < 16 {
            len += 1;
            code = (self.acc >> (64 - len)) as i32;
            if code <= table.maxcode[len] {
                self.consume(len as u32)?;
                let idx = (code + table.valoffset[len]) as usize;
                return table.symbols.get(idx).copied().ok_or_else(|| JpegError::Corrupt("bad huffman code".into()));
            }
        }
        let _ = code;
        if self.real < 16 {
            return Err(self.overrun());
        }
        Err(JpegError::Corrupt("invalid huffman code".into()))
    }

    /// Signed value of an `s`-bit magnitude category.
    #[inline]
    pub fn receive_extend(&mut self, s: u32) -> Result<i32, JpegError> {
        if s == 0 {
            return Ok(0);
        }
        if s > 16 {
            return Err(JpegError::Corrupt(format!("coefficient category {s} out of range")));
        }
        let v = self.bits(s)? as i32;
        Ok(if v < (1 << (s - 1)) { v - (1 << s) + 1 } else { v })
    }

    /// Drops buffered bits and consumes the expected restart marker.
    pub fn restart(&mut self, expected: u8) -> Result<(), JpegError> {
        self.acc = 0;
        self.count = 0;
        self.real = 0;
        self.stop = None;
        // Padding bits belong to bytes already consumed; the marker follows.
        while self.pos < self.data.len() && self.data[self.pos] != 0xFF {
            self.pos += 1;
        }
        while self.pos < self.data.len() && self.data[self.pos] == 0xFF {
            self.pos += 1;
        }
        match self.data.get(self.pos) {
            Some(&m) if m == 0xD0 + expected => {
                self.pos += 1;
                Ok(())
            }
            Some(&m) => Err(JpegError::Corrupt(format!("expected RST{expected}, found FF{m:02X}"))),
            None => Err(JpegError::PrematureEnd),
        }
    }
}

/// Byte offset just past the `n`-th restart marker after `start`, skipping
/// stuffed bytes.
pub fn seek_restart(data: &[u8], start: usize, n: usize) -> Option<usize> {
    let mut seen = 0;
    let mut i = start;
    while i + 1 < data.len() {
        if data[i] == 0xFF {
            let m = data[i + 1];
            if (0xD0..=0xD7).contains(&m) {
                seen += 1;
                if seen == n {
                    return Some(i + 2);
                }
                i += 2;
                continue;
            }
            if m == 0xD9 {
                return None;
            }
        }
        i += 1;
    }
    None
}
