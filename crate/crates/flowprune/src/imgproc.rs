//! Image decoding, gray-level conversion, patch partitioning, and per-patch
//! information entropy.
//!
//! Input images are binary portable pixmaps (P5 grayscale / P6 RGB, 8-bit).
//! Entropy is Shannon entropy of the 256-bin gray-level histogram of each
//! patch, in nats; patches are ordered row-major so that token `i` sits at
//! grid coordinates `(i % cols, i / cols)`.

use crate::error::{Error, Result};

/// Number of gray levels an 8-bit sample can take.
pub const GRAY_LEVELS: usize = 256;

/// An 8-bit raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "image data length {} does not match {}x{}x{} = {}",
                data.len(),
                width,
                height,
                channels,
                expected
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }
}

/// Decode a binary portable pixmap (P5 or P6, maxval 255).
///
/// Header comments (`#` to end of line) are permitted; exactly one
/// whitespace byte separates the maxval from the raster.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = HeaderCursor { bytes, pos: 0 };

    let channels = match (bytes.first(), bytes.get(1)) {
        (Some(b'P'), Some(b'5')) => 1,
        (Some(b'P'), Some(b'6')) => 3,
        _ => {
            return Err(Error::Decode {
                offset: 0,
                reason: "expected magic P5 or P6".into(),
            })
        }
    };
    cur.pos = 2;

    let width = cur.read_number("width")?;
    let height = cur.read_number("height")?;
    let maxval_at = {
        cur.skip_space_and_comments();
        cur.pos
    };
    let maxval = cur.read_number("maxval")?;
    if maxval != 255 {
        return Err(Error::Decode {
            offset: maxval_at,
            reason: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    // Exactly one whitespace byte before the raster.
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::Decode {
                offset: cur.pos,
                reason: "expected single whitespace after maxval".into(),
            })
        }
    }

    if width == 0 || height == 0 {
        return Err(Error::Decode {
            offset: 2,
            reason: "zero image dimension".into(),
        });
    }
    let need = width * height * channels;
    let raster = &cur.bytes[cur.pos.min(cur.bytes.len())..];
    if raster.len() < need {
        return Err(Error::Decode {
            offset: cur.pos + raster.len(),
            reason: format!(
                "raster truncated: expected {need} bytes, got {}",
                raster.len()
            ),
        });
    }
    ImageBuffer::new(width, height, channels, raster[..need].to_vec())
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self
                .bytes
                .get(self.pos)
                .is_some_and(|b| b.is_ascii_whitespace())
            {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Decode {
                offset: start,
                reason: format!("expected decimal {what}"),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are ascii");
        text.parse().map_err(|_| Error::Decode {
            offset: start,
            reason: format!("{what} out of range"),
        })
    }
}

/// Convert to a single gray channel: floor of the RGB mean.
///
/// Grayscale input comes back bitwise identical.
pub fn gray_levels(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| ((px[0] as u16 + px[1] as u16 + px[2] as u16) / 3) as u8)
        .collect();
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// A grayscale image cut into square patches, row-major patch order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// Patches per row.
    pub cols: usize,
    /// Patches per column.
    pub rows: usize,
    /// `cols * rows` pixel blocks, each `patch_size * patch_size` bytes.
    pub patches: Vec<Vec<u8>>,
}

impl PatchGrid {
    pub fn from_image(img: &ImageBuffer, patch_size: usize) -> Result<Self> {
        if !img.is_gray() {
            return Err(Error::Shape("patch grid requires a grayscale image".into()));
        }
        if patch_size == 0 {
            return Err(Error::InvalidArgument("patch_size must be positive".into()));
        }
        if !img.width.is_multiple_of(patch_size) || !img.height.is_multiple_of(patch_size) {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by patch size {}",
                img.width, img.height, patch_size
            )));
        }
        let cols = img.width / patch_size;
        let rows = img.height / patch_size;
        let mut patches = Vec::with_capacity(cols * rows);
        for pr in 0..rows {
            for pc in 0..cols {
                let mut block = Vec::with_capacity(patch_size * patch_size);
                for y in 0..patch_size {
                    let row = pr * patch_size + y;
                    let start = row * img.width + pc * patch_size;
                    block.extend_from_slice(&img.data[start..start + patch_size]);
                }
                patches.push(block);
            }
        }
        Ok(Self {
            patch_size,
            cols,
            rows,
            patches,
        })
    }

    pub fn token_count(&self) -> usize {
        self.cols * self.rows
    }

    /// Grid coordinates of token `i`: `(i % cols, i / cols)`.
    pub fn coord(&self, i: usize) -> (usize, usize) {
        (i % self.cols, i / self.cols)
    }
}

/// Per-token patch entropy, in nats. Values live in `[0, ln 256]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub values: Vec<f64>,
    /// Histogram bin count (256 for 8-bit samples).
    pub gray_levels: usize,
}

impl EntropyMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Shannon entropy of the gray-level histogram of each patch.
///
/// Empty histogram bins are skipped, so `0 * ln 0` contributes nothing.
pub fn entropy_map(img: &ImageBuffer, patch_size: usize) -> Result<EntropyMap> {
    let grid = PatchGrid::from_image(img, patch_size)?;
    let values = grid.patches.iter().map(|p| patch_entropy(p)).collect();
    Ok(EntropyMap {
        values,
        gray_levels: GRAY_LEVELS,
    })
}

fn patch_entropy(pixels: &[u8]) -> f64 {
    let mut hist = [0u32; GRAY_LEVELS];
    for &px in pixels {
        hist[px as usize] += 1;
    }
    let total = pixels.len() as f64;
    hist.iter()
        .filter(|&&count| count > 0)
        .map(|&count| {
            let p = count as f64 / total;
            -p * p.ln()
        })
        .sum()
}
