//! Binary 8-bit NetPBM: P5 (greyscale) and P6 (RGB).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            Kind::Gray => b"P5",
            Kind::Rgb => b"P6",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

/// Decoded raster: interleaved bytes, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<u32, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

pub fn decode(bytes: &[u8], expected: Kind, path: &Path) -> Result<Raster> {
    let malformed = |msg: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != expected.magic() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(malformed(format!(
            "expected magic {}, found {found:?}",
            String::from_utf8_lossy(expected.magic())
        )));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width").map_err(malformed)? as usize;
    let height = h.number("height").map_err(malformed)? as usize;
    let maxval = h.number("maxval").map_err(malformed)?;
    if width == 0 || height == 0 {
        return Err(malformed(format!("empty raster {width}x{height}")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("no whitespace after maxval".into()));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedDepth {
            path: path.to_path_buf(),
            maxval,
        });
    }
    let data = &bytes[h.pos + 1..];
    let expected_len = width * height * expected.channels();
    if data.len() < expected_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            got: data.len(),
            expected: expected_len,
        });
    }
    Ok(Raster {
        kind: expected,
        width,
        height,
        pixels: data[..expected_len].to_vec(),
    })
}

pub fn encode(raster: &Raster) -> Vec<u8> {
    let mut out = format!(
        "{}\n{} {}\n255\n",
        String::from_utf8_lossy(raster.kind.magic()),
        raster.width,
        raster.height
    )
    .into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

pub fn read(path: &Path, kind: Kind) -> Result<Raster> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, kind, path)
}

pub fn write(path: &Path, raster: &Raster) -> Result<()> {
    std::fs::write(path, encode(raster))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
