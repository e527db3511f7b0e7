//! Procedural real/fake image corpus: lit spheres over a shaded
//! background, five injectable artifacts, and templated instructions,
//! explanations and captions.

mod corpus;
mod oracle;
mod vocab;

pub use corpus::{
    det_sample, det_split, gen_sample, gen_split, make_corpus, read_det_corpus, read_gen_corpus, sample_seed, write_det_corpus, write_gen_corpus, CorpusConfig,
    CorpusPaths, DetSample, GenSample, SPLIT_DET_TEST, SPLIT_DET_TRAIN, SPLIT_GEN_TEST, SPLIT_GEN_TRAIN,
};
pub use oracle::{StatisticClassifier, STAT_NAMES};
pub use vocab::{explanation_text, Vocab, BOS, EOS, INSTRUCTIONS, PAD, UNK};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{patchify, unpatchify, Image};

/// Direction the light comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LightDir {
    Left,
    Right,
    Top,
    Bottom,
}

impl LightDir {
    pub const ALL: [LightDir; 4] = [LightDir::Left, LightDir::Right, LightDir::Top, LightDir::Bottom];

    /// Unit vector `(x, y)` pointing towards the light.
    pub fn vector(self) -> (f32, f32) {
        match self {
            LightDir::Left => (-1.0, 0.0),
            LightDir::Right => (1.0, 0.0),
            LightDir::Top => (0.0, -1.0),
            LightDir::Bottom => (0.0, 1.0),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            LightDir::Left => "left",
            LightDir::Right => "right",
            LightDir::Top => "top",
            LightDir::Bottom => "bottom",
        }
    }
}

/// A lit sphere seen from above.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub amplitude: f32,
}

/// Everything needed to render a real image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub channels: usize,
    pub base: f32,
    pub light: LightDir,
    /// Brightness change of the background across the image.
    pub gradient: f32,
    pub blobs: Vec<Blob>,
    pub noise_std: f32,
}

impl SceneSpec {
    pub fn random(size: usize, channels: usize, noise_std: f32, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f32;
        let light = LightDir::ALL[rng.gen_range(0..4)];
        let count = rng.gen_range(1..=3);
        let blobs = (0..count)
            .map(|_| Blob {
                cx: rng.gen_range(0.25 * s..0.75 * s),
                cy: rng.gen_range(0.25 * s..0.75 * s),
                radius: rng.gen_range(0.12 * s..0.2 * s),
                amplitude: rng.gen_range(0.25..0.4),
            })
            .collect();
        Self {
            size,
            channels,
            base: rng.gen_range(0.2..0.45),
            light,
            gradient: rng.gen_range(0.2..0.3),
            blobs,
            noise_std,
        }
    }

    /// Signed position along the light axis, in `[-0.5, 0.5]`.
    pub fn light_coord(&self, y: usize, x: usize) -> f32 {
        let s = self.size as f32;
        let (lx, ly) = self.light.vector();
        let u = (x as f32 + 0.5) / s - 0.5;
        let v = (y as f32 + 0.5) / s - 0.5;
        u * lx + v * ly
    }

    /// Caption describing brightness, object count and light direction.
    pub fn caption(&self) -> String {
        let tone = if self.base >= 0.325 { "bright" } else { "dark" };
        let (count, noun) = match self.blobs.len() {
            1 => ("one", "blob"),
            2 => ("two", "blobs"),
            _ => ("three", "blobs"),
        };
        format!("a {tone} scene with {count} {noun} lit from the {}", self.light.word())
    }

    /// Noise-free intensity at a pixel.
    fn shade(&self, y: usize, x: usize) -> f32 {
        let (lx, ly) = self.light.vector();
        let norm = (1.0f32 + 0.8 * 0.8).sqrt();
        let (lx, ly, lz) = (lx / norm, ly / norm, 0.8 / norm);
        let mut v = self.base + self.gradient * self.light_coord(y, x);
        for b in &self.blobs {
            let dx = x as f32 + 0.5 - b.cx;
            let dy = y as f32 + 0.5 - b.cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let coverage = (b.radius - dist + 0.5).clamp(0.0, 1.0);
            if coverage == 0.0 {
                continue;
            }
            let (a, c) = (dx / b.radius, dy / b.radius);
            let nz = (1.0 - a * a - c * c).max(0.0).sqrt();
            let lambert = (a * lx + c * ly + nz * lz).max(0.0);
            v += coverage * b.amplitude * (0.25 + 0.75 * lambert);
        }
        v
    }

    /// Renders the scene with sensor noise; values are clamped to `[0, 1]`.
    pub fn render(&self, rng: &mut ChaCha8Rng) -> Image {
        let noise = Normal::new(0.0f32, self.noise_std.max(0.0)).expect("valid std");
        let mut img = Image::filled(self.size, self.size, self.channels, 0.0);
        for y in 0..self.size {
            for x in 0..self.size {
                let v = self.shade(y, x);
                for c in 0..self.channels {
                    let n = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    img.set(y, x, c, v + n);
                }
            }
        }
        img.clamp01();
        img
    }
}

/// A known, injected defect that makes an image fake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArtifactKind {
    Checkerboard,
    Banding,
    LightingConflict,
    PatchDuplication,
    LatentTilt,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 5] = [
        ArtifactKind::Checkerboard,
        ArtifactKind::Banding,
        ArtifactKind::LightingConflict,
        ArtifactKind::PatchDuplication,
        ArtifactKind::LatentTilt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::Checkerboard => "checkerboard",
            ArtifactKind::Banding => "banding",
            ArtifactKind::LightingConflict => "lighting_conflict",
            ArtifactKind::PatchDuplication => "patch_duplication",
            ArtifactKind::LatentTilt => "latent_tilt",
        }
    }

    /// Code stored in corpus files (0 is reserved for real images).
    pub fn code(self) -> u8 {
        ArtifactKind::ALL.iter().position(|&k| k == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Result<Option<Self>> {
        match code {
            0 => Ok(None),
            c if (c as usize) <= ArtifactKind::ALL.len() => Ok(Some(ArtifactKind::ALL[c as usize - 1])),
            c => Err(Error::Data(format!("unknown artifact code {c}"))),
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown artifact kind {s:?}")))
    }
}

/// Patch geometry the latent tilt acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TiltGeometry {
    pub patch: usize,
    pub channel: usize,
}

/// Renders a fresh real scene.
pub fn make_real(size: usize, channels: usize, noise_std: f32, rng: &mut ChaCha8Rng) -> (Image, SceneSpec) {
    let scene = SceneSpec::random(size, channels, noise_std, rng);
    let img = scene.render(rng);
    (img, scene)
}

/// Applies exactly one artifact.
///
/// * checkerboard: `+s` on even `x + y`, `−s` on odd;
/// * banding: quantization to `round(1/s)` levels (at least 2);
/// * lighting_conflict: adds `−2·s` times the scene's background gradient,
///   so `s = 1` mirrors the background light while objects keep their shading;
/// * patch_duplication: blends (alpha `s`) one half of the image, split
///   across the light axis, over the other half, so the background shading
///   restarts at the seam;
/// * latent_tilt: multiplies one space-to-depth channel by `1 + s`.
///
/// All kinds except latent_tilt clamp to `[0, 1]`.
pub fn inject_artifact(
    img: &Image,
    scene: &SceneSpec,
    kind: ArtifactKind,
    strength: f32,
    tilt: TiltGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(Error::Domain(format!("artifact strength {strength} must be positive")));
    }
    let mut out = img.clone();
    match kind {
        ArtifactKind::Checkerboard => {
            for y in 0..img.height {
                for x in 0..img.width {
                    let d = if (x + y) % 2 == 0 { strength } else { -strength };
                    for c in 0..img.channels {
                        out.set(y, x, c, img.get(y, x, c) + d);
                    }
                }
            }
            out.clamp01();
        }
        ArtifactKind::Banding => {
            let levels = (1.0 / strength).round().max(2.0);
            let k = levels - 1.0;
            for v in &mut out.data {
                *v = (v.clamp(0.0, 1.0) * k).round() / k;
            }
        }
        ArtifactKind::LightingConflict => {
            for y in 0..img.height {
                for x in 0..img.width {
                    let d = -2.0 * strength * scene.gradient * scene.light_coord(y, x);
                    for c in 0..img.channels {
                        out.set(y, x, c, img.get(y, x, c) + d);
                    }
                }
            }
            out.clamp01();
        }
        ArtifactKind::PatchDuplication => {
            let (src, dst, (bh, bw)) = duplication_band(img.height, img.width, scene.light, rng)?;
            let alpha = strength.min(1.0);
            for dy in 0..bh {
                for dx in 0..bw {
                    for c in 0..img.channels {
                        let s = img.get(src.0 + dy, src.1 + dx, c);
                        let d = img.get(dst.0 + dy, dst.1 + dx, c);
                        let v = if alpha >= 1.0 { s } else { (1.0 - alpha) * d + alpha * s };
                        out.set(dst.0 + dy, dst.1 + dx, c, v);
                    }
                }
            }
            out.clamp01();
        }
        ArtifactKind::LatentTilt => {
            let mut z = patchify(img, tilt.patch)?;
            let dim = z.cols();
            if tilt.channel >= dim {
                return Err(Error::Index {
                    what: "tilt channel",
                    index: tilt.channel,
                    size: dim,
                });
            }
            let f = 1.0 + strength;
            for row in z.data_mut().chunks_mut(dim) {
                row[tilt.channel] *= f;
            }
            out = unpatchify(&z, img.height, img.width, img.channels, tilt.patch)?;
        }
    }
    Ok(out)
}

/// Source and destination corners of a band half the image deep along the
/// light axis and spanning it across, plus the band's `(height, width)`.
/// Which half is copied is random.
fn duplication_band(
    h: usize,
    w: usize,
    light: LightDir,
    rng: &mut ChaCha8Rng,
) -> Result<((usize, usize), (usize, usize), (usize, usize))> {
    let horizontal = matches!(light, LightDir::Left | LightDir::Right);
    let along = if horizontal { w } else { h };
    if along < 2 {
        return Err(Error::Domain("image too small for patch duplication".into()));
    }
    let b = along / 2;
    let (a_src, a_dst) = if rng.gen::<bool>() { (0, along - b) } else { (along - b, 0) };
    Ok(if horizontal {
        ((0, a_src), (0, a_dst), (h, b))
    } else {
        ((a_src, 0), (a_dst, 0), (b, w))
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    const TILT: TiltGeometry = TiltGeometry { patch: 4, channel: 5 };

    #[test]
    fn rendered_values_are_in_unit_range() {
        let mut r = rng(0);
        for _ in 0..50 {
            let (img, scene) = make_real(32, 1, 0.01, &mut r);
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((1..=3).contains(&scene.blobs.len()));
        }
    }

    #[test]
    fn checkerboard_on_constant_image() {
        let img = Image::filled(4, 4, 1, 0.5);
        let scene = SceneSpec::random(4, 1, 0.0, &mut rng(1));
        let out = inject_artifact(&img, &scene, ArtifactKind::Checkerboard, 0.1, TILT, &mut rng(2)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (x + y) % 2 == 0 { 0.6 } else { 0.4 };
                assert!((out.get(y, x, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn banding_two_levels_on_ramp() {
        let img = Image::new(1, 16, 1, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        let scene = SceneSpec::random(16, 1, 0.0, &mut rng(1));
        let out = inject_artifact(&img, &scene, ArtifactKind::Banding, 0.5, TILT, &mut rng(2)).unwrap();
        let mut vals: Vec<u32> = out.data.iter().map(|v| v.to_bits()).collect();
        vals.sort();
        vals.dedup();
        assert_eq!(vals.len(), 2);
    }

    #[test]
    fn latent_tilt_scales_one_channel_only() {
        let (img, scene) = make_real(32, 1, 0.01, &mut rng(3));
        let out = inject_artifact(&img, &scene, ArtifactKind::LatentTilt, 0.5, TILT, &mut rng(4)).unwrap();
        let (a, b) = (patchify(&img, 4).unwrap(), patchify(&out, 4).unwrap());
        for t in 0..a.rows() {
            for c in 0..16 {
                if c == 5 {
                    assert_eq!(b.at(t, c), a.at(t, c) * 1.5);
                } else {
                    assert_eq!(b.at(t, c), a.at(t, c));
                }
            }
        }
    }

    #[test]
    fn lighting_conflict_mirrors_background_gradient() {
        let mut scene = SceneSpec::random(32, 1, 0.0, &mut rng(5));
        scene.blobs.clear();
        scene.base = 0.5;
        let img = scene.render(&mut rng(6));
        let out = inject_artifact(&img, &scene, ArtifactKind::LightingConflict, 1.0, TILT, &mut rng(7)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let mirrored = 0.5 - scene.gradient * scene.light_coord(y, x);
                assert!((out.get(y, x, 0) - mirrored).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn patch_duplication_copies_one_half_over_the_other() {
        for seed in 0..20 {
            let (img, scene) = make_real(32, 1, 0.01, &mut rng(seed));
            let out = inject_artifact(&img, &scene, ArtifactKind::PatchDuplication, 1.0, TILT, &mut rng(seed + 100)).unwrap();
            // (vertical split, source is the first half)
            let explains = |vertical: bool, first: bool| {
                (0..32).all(|y| {
                    (0..32).all(|x| {
                        let (a, other) = if vertical { (x, (y, (x + 16) % 32)) } else { (y, ((y + 16) % 32, x)) };
                        let in_dst = (a >= 16) == first;
                        let want = if in_dst { img.get(other.0, other.1, 0) } else { img.get(y, x, 0) };
                        out.get(y, x, 0) == want
                    })
                })
            };
            let horizontal_light = matches!(scene.light, LightDir::Left | LightDir::Right);
            assert_ne!(out, img, "seed {seed}");
            assert!(explains(horizontal_light, true) || explains(horizontal_light, false), "seed {seed}");
        }
    }

    #[test]
    fn non_positive_strength_is_rejected() {
        let img = Image::filled(8, 8, 1, 0.5);
        let scene = SceneSpec::random(8, 1, 0.0, &mut rng(1));
        assert!(inject_artifact(&img, &scene, ArtifactKind::Banding, 0.0, TILT, &mut rng(1)).is_err());
    }

    #[test]
    fn kind_names_and_codes_round_trip() {
        for k in ArtifactKind::ALL {
            assert_eq!(k.name().parse::<ArtifactKind>().unwrap(), k);
            assert_eq!(ArtifactKind::from_code(k.code()).unwrap(), Some(k));
        }
        assert!("sparkles".parse::<ArtifactKind>().is_err());
        assert!(ArtifactKind::from_code(9).is_err());
    }

    #[test]
    fn captions_encode() {
        let v = Vocab::new();
        let mut r = rng(9);
        for _ in 0..20 {
            let scene = SceneSpec::random(32, 1, 0.01, &mut r);
            assert!(v.encode(&scene.caption()).is_ok());
        }
    }
}
