//! Hand-built pixel-statistic classifier.
//!
//! One statistic per artifact kind, each oriented so larger means "more
//! fake". Thresholds are the 99th percentile of the statistic over real
//! training images; an image is called fake when any statistic exceeds its
//! threshold. It serves as an existence proof that the corpus is separable.

use std::collections::HashMap;

use super::{DetSample, TiltGeometry};
use crate::error::{Error, Result};
use crate::image::Image;

pub const STAT_NAMES: [&str; 5] = ["checker", "distinct", "light_agreement", "duplicate_block", "tilt"];

#[derive(Clone, Debug, PartialEq)]
pub struct StatisticClassifier {
    pub tilt: TiltGeometry,
    pub thresholds: [f64; 5],
}

impl StatisticClassifier {
    pub fn fit(train: &[DetSample], tilt: TiltGeometry) -> Result<Self> {
        let mut per_stat: Vec<Vec<f64>> = vec![Vec::new(); 5];
        for s in train.iter().filter(|s| s.label == 0) {
            for (k, v) in statistics(&s.image, tilt)?.into_iter().enumerate() {
                per_stat[k].push(v);
            }
        }
        if per_stat[0].is_empty() {
            return Err(Error::Data("no real images to fit thresholds on".into()));
        }
        let mut thresholds = [0.0; 5];
        for (k, vals) in per_stat.iter_mut().enumerate() {
            vals.sort_by(|a, b| a.total_cmp(b));
            let i = ((vals.len() as f64 * 0.99).ceil() as usize).clamp(1, vals.len()) - 1;
            thresholds[k] = vals[i];
        }
        Ok(Self { tilt, thresholds })
    }

    pub fn predict(&self, img: &Image) -> Result<u8> {
        let stats = statistics(img, self.tilt)?;
        Ok(stats.iter().zip(&self.thresholds).any(|(v, t)| v > t) as u8)
    }

    pub fn accuracy(&self, samples: &[DetSample]) -> Result<f64> {
        let mut correct = 0usize;
        for s in samples {
            correct += (self.predict(&s.image)? == s.label) as usize;
        }
        Ok(correct as f64 / samples.len().max(1) as f64)
    }
}

/// All five statistics of one image, in [`STAT_NAMES`] order.
pub fn statistics(img: &Image, tilt: TiltGeometry) -> Result<[f64; 5]> {
    Ok([checker(img), 1.0 - distinct_fraction(img), light_agreement(img), duplicate_block(img), tilt_stat(img, tilt)?])
}

fn checker(img: &Image) -> f64 {
    let mut acc = 0.0f64;
    for y in 0..img.height {
        for x in 0..img.width {
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..img.channels {
                acc += sign * img.get(y, x, c) as f64;
            }
        }
    }
    (acc / img.data.len() as f64).abs()
}

fn distinct_fraction(img: &Image) -> f64 {
    let mut bits: Vec<u32> = img.data.iter().map(|v| v.to_bits()).collect();
    bits.sort_unstable();
    bits.dedup();
    bits.len() as f64 / img.data.len() as f64
}

/// Channel-averaged intensity.
fn luma(img: &Image, y: usize, x: usize) -> f64 {
    (0..img.channels).map(|c| img.get(y, x, c) as f64).sum::<f64>() / img.channels as f64
}

/// Negated cosine between the background gradient (plane fit on the
/// border) and the offset of the objects' bright side. Real images light
/// both from the same side, giving values near −1.
fn light_agreement(img: &Image) -> f64 {
    let (h, w) = (img.height, img.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // least squares v = a + b·(x − cx) + c·(y − cy) over the border ring
    let (mut n, mut sv, mut sxx, mut syy, mut sxv, mut syv, mut sxy, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if y != 0 && x != 0 && y + 1 != h && x + 1 != w {
                continue;
            }
            let (u, v, val) = (x as f64 - cx, y as f64 - cy, luma(img, y, x));
            n += 1.0;
            sv += val;
            sx += u;
            sy += v;
            sxx += u * u;
            syy += v * v;
            sxy += u * v;
            sxv += u * val;
            syv += v * val;
        }
    }
    let m = nalgebra::Matrix3::new(n, sx, sy, sx, sxx, sxy, sy, sxy, syy);
    let rhs = nalgebra::Vector3::new(sv, sxv, syv);
    let Some(sol) = m.lu().solve(&rhs) else {
        return 0.0;
    };
    let (a, gx, gy) = (sol[0], sol[1], sol[2]);

    let (mut wsum, mut wx, mut wy, mut count, mut mx, mut my) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let r = luma(img, y, x) - (a + gx * u + gy * v);
            if r > 0.03 {
                wsum += r;
                wx += r * u;
                wy += r * v;
                count += 1.0;
                mx += u;
                my += v;
            }
        }
    }
    if count == 0.0 || wsum == 0.0 {
        return 0.0;
    }
    let (sx, sy) = (wx / wsum - mx / count, wy / wsum - my / count);
    let denom = (gx * gx + gy * gy).sqrt() * (sx * sx + sy * sy).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    -(gx * sx + gy * sy) / denom
}

/// 1 when two disjoint `size/4` blocks hold bit-identical pixels.
fn duplicate_block(img: &Image) -> f64 {
    let b = (img.height.min(img.width) / 4).max(1);
    if b > img.height || b > img.width {
        return 0.0;
    }
    let mut seen: HashMap<Vec<u32>, Vec<(usize, usize)>> = HashMap::new();
    for y in 0..=img.height - b {
        for x in 0..=img.width - b {
            let mut key = Vec::with_capacity(b * b * img.channels);
            for dy in 0..b {
                let start = img.idx(y + dy, x, 0);
                key.extend(img.data[start..start + b * img.channels].iter().map(|v| v.to_bits()));
            }
            let sites = seen.entry(key).or_default();
            if sites.iter().any(|&(py, px)| py.abs_diff(y) >= b || px.abs_diff(x) >= b) {
                return 1.0;
            }
            sites.push((y, x));
        }
    }
    0.0
}

/// Mean relative excess of the tilted sub-pixel over its 4-neighbourhood.
fn tilt_stat(img: &Image, tilt: TiltGeometry) -> Result<f64> {
    let (p, ch) = (tilt.patch, img.channels);
    if p == 0 || tilt.channel >= p * p * ch || img.height % p != 0 || img.width % p != 0 {
        return Err(Error::Domain("tilt geometry does not fit the image".into()));
    }
    let pos = tilt.channel / ch;
    let c = tilt.channel % ch;
    let (dy, dx) = (pos / p, pos % p);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for by in 0..img.height / p {
        for bx in 0..img.width / p {
            let (y, x) = (by * p + dy, bx * p + dx);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(img.get(y - 1, x, c));
            }
            if y + 1 < img.height {
                nb.push(img.get(y + 1, x, c));
            }
            if x > 0 {
                nb.push(img.get(y, x - 1, c));
            }
            if x + 1 < img.width {
                nb.push(img.get(y, x + 1, c));
            }
            let mean = nb.iter().map(|&v| v as f64).sum::<f64>() / nb.len().max(1) as f64;
            num += img.get(y, x, c) as f64 - mean;
            den += mean;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
