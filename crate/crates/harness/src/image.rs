//! 8-bit RGB frames and binary PPM (P6) I/O.

use std::path::Path;

use mst_core::{Scalar, Tensor};

use crate::error::{read, write, HarnessError, Result};

/// Row-major interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean in `[0, 255]`.
    pub fn mean_pixel(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        s.map(|v| v / n)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HarnessError::Data(format!("ppm: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("only binary P6 is supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * 3;
        if bytes.len() < pos + n {
            return Err(bad("truncated raster"));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + n].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, self.to_ppm())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ppm(&read(path)?).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
    }

    /// `[H, W, 3]` tensor with `v ↦ (v/255 − 0.5)/0.25`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::of((self.data[i] as f64 / 255.0 - 0.5) * 4.0))
    }
}
