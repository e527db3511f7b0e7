//! Planar images with values in `[0, 1]`, plain PGM/PPM I/O, and the
//! space-to-depth patchify that serves as the generation encoder.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

/// Row-major `height × width × channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Raw little-endian float bytes, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Binary PGM (one channel) or PPM (three channels), 8-bit.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Format(format!("cannot write {c}-channel image as PNM"))),
        };
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads P2/P5 (gray) and P3/P6 (color) files with any maxval.
    pub fn read_pnm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse_pnm(BufReader::new(file)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse_pnm(mut r: impl BufRead) -> Result<Self> {
        let magic = header_token(&mut r)?;
        let (channels, binary) = match magic.as_str() {
            "P2" => (1, false),
            "P5" => (1, true),
            "P3" => (3, false),
            "P6" => (3, true),
            m => return Err(Error::Format(format!("unsupported magic {m:?}"))),
        };
        let width = header_number(&mut r, "width")?;
        let height = header_number(&mut r, "height")?;
        let maxval = header_number(&mut r, "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Format("bad PNM header values".into()));
        }
        let n = width * height * channels;
        let maxf = maxval as f32;
        let mut data = Vec::with_capacity(n);
        if binary {
            let wide = maxval > 255;
            let mut raw = vec![0u8; if wide { 2 * n } else { n }];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Format("truncated pixel data".into()))?;
            if wide {
                data.extend(raw.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / maxf));
            } else {
                data.extend(raw.iter().map(|&b| b as f32 / maxf));
            }
        } else {
            let mut text = String::new();
            r.read_to_string(&mut text)?;
            for tok in text.split_whitespace().take(n) {
                let v: usize = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad sample {tok:?}")))?;
                data.push(v.min(maxval) as f32 / maxf);
            }
            if data.len() != n {
                return Err(Error::Format("truncated pixel data".into()));
            }
        }
        Image::new(height, width, channels, data)
    }
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8];
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(ch);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(tok)
}

fn header_number(r: &mut impl BufRead, what: &str) -> Result<usize> {
    let tok = header_token(r)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} {tok:?}")))
}

/// Space-to-depth: one token per `p × p` patch, `p·p·C` channels.
///
/// Token `by·(W/p) + bx`, channel `(dy·p + dx)·C + c` holds pixel
/// `(by·p + dy, bx·p + dx, c)`.
pub fn patchify(img: &Image, p: usize) -> Result<Tensor<f32>> {
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![img.height, img.width, img.channels],
            rhs: vec![p],
        });
    }
    let (gh, gw, c) = (img.height / p, img.width / p, img.channels);
    let dim = p * p * c;
    let mut out = vec![0.0f32; gh * gw * dim];
    for by in 0..gh {
        for bx in 0..gw {
            let base = (by * gw + bx) * dim;
            for dy in 0..p {
                for dx in 0..p {
                    let src = img.idx(by * p + dy, bx * p + dx, 0);
                    let dst = base + (dy * p + dx) * c;
                    out[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, dim], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor<f32>, height: usize, width: usize, channels: usize, p: usize) -> Result<Image> {
    let (n, dim) = tokens.dims2("unpatchify")?;
    if p == 0 || height % p != 0 || width % p != 0 || n != (height / p) * (width / p) || dim != p * p * channels {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: vec![n, dim],
            rhs: vec![height, width, channels, p],
        });
    }
    let gw = width / p;
    let mut img = Image::filled(height, width, channels, 0.0);
    for t in 0..n {
        let (by, bx) = (t / gw, t % gw);
        let row = tokens.row(t);
        for dy in 0..p {
            for dx in 0..p {
                let dst = img.idx(by * p + dy, bx * p + dx, 0);
                let src = (dy * p + dx) * channels;
                img.data[dst..dst + channels].copy_from_slice(&row[src..src + channels]);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trip_is_exact() {
        let img = Image::new(8, 4, 3, (0..96).map(|i| i as f32 / 97.0).collect()).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), &[8, 12]);
        assert_eq!(unpatchify(&t, 8, 4, 3, 2).unwrap(), img);
    }

    #[test]
    fn patchify_channel_layout() {
        let img = Image::new(4, 4, 1, (0..16).map(|i| i as f32).collect()).unwrap();
        let t = patchify(&img, 2).unwrap();
        // token 1 is the top-right 2x2 block: pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn pgm_round_trip_on_8bit_values() {
        let img = Image::new(3, 2, 1, (0..6).map(|i| (i * 40) as f32 / 255.0).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        img.write_pnm(&path).unwrap();
        assert_eq!(Image::read_pnm(&path).unwrap(), img);
    }

    #[test]
    fn ascii_pgm_with_comment() {
        let text = "P2\n# note\n2 1\n4\n0 4\n";
        let img = Image::parse_pnm(text.as_bytes()).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn malformed_pgm_is_rejected() {
        assert!(matches!(Image::parse_pnm("P5\n2 2\n255\n\x01".as_bytes()), Err(Error::Format(_))));
        assert!(matches!(Image::parse_pnm("P7\n".as_bytes()), Err(Error::Format(_))));
    }
}
