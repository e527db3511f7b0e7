//! Corpus assembly and the fixed-width binary corpus format.
//!
//! Header (little-endian): magic, `u32` version, `u8` kind (0 detection,
//! 1 generation), `u32` count, `u32` height, width, channels, `u64` vocab
//! hash, `u32` token capacity. Records are fixed width: detection records
//! hold label, artifact code, pixels as `f32`, then instruction, answer and
//! caption lists; generation records hold pixels and a caption list. Each
//! list is a `u16` length followed by `capacity` `u16` ids (zero padded).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{inject_artifact, make_real, ArtifactKind, TiltGeometry, Vocab, INSTRUCTIONS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kv_config;

const MAGIC: &[u8; 8] = b"GDCORPUS";
const VERSION: u32 = 1;

pub const SPLIT_DET_TRAIN: u64 = 1;
pub const SPLIT_DET_TEST: u64 = 2;
pub const SPLIT_GEN_TRAIN: u64 = 3;
pub const SPLIT_GEN_TEST: u64 = 4;

/// Sizes, seeds and artifact strengths of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub det_train: usize,
    pub det_test: usize,
    pub gen_train: usize,
    pub gen_test: usize,
    pub corpus_seed: u64,
    pub noise_std: f64,
    pub token_capacity: usize,
    pub strength_checkerboard: f64,
    pub strength_banding: f64,
    pub strength_lighting_conflict: f64,
    pub strength_patch_duplication: f64,
    pub strength_latent_tilt: f64,
    pub tilt_channel: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            det_train: 2000,
            det_test: 400,
            gen_train: 2000,
            gen_test: 200,
            corpus_seed: 0,
            noise_std: 0.01,
            token_capacity: 24,
            strength_checkerboard: 0.03,
            strength_banding: 0.15,
            strength_lighting_conflict: 1.5,
            strength_patch_duplication: 1.0,
            strength_latent_tilt: 0.08,
            tilt_channel: 5,
        }
    }
}

kv_config!(CorpusConfig {
    det_train: value,
    det_test: value,
    gen_train: value,
    gen_test: value,
    corpus_seed: value,
    noise_std: float,
    token_capacity: value,
    strength_checkerboard: float,
    strength_banding: float,
    strength_lighting_conflict: float,
    strength_patch_duplication: float,
    strength_latent_tilt: float,
    tilt_channel: value,
});

impl CorpusConfig {
    pub fn strength(&self, kind: ArtifactKind) -> f32 {
        (match kind {
            ArtifactKind::Checkerboard => self.strength_checkerboard,
            ArtifactKind::Banding => self.strength_banding,
            ArtifactKind::LightingConflict => self.strength_lighting_conflict,
            ArtifactKind::PatchDuplication => self.strength_patch_duplication,
            ArtifactKind::LatentTilt => self.strength_latent_tilt,
        }) as f32
    }
}

/// One detection example.
#[derive(Clone, Debug, PartialEq)]
pub struct DetSample {
    pub image: Image,
    pub instruction: Vec<usize>,
    /// 1 = fake, 0 = real.
    pub label: u8,
    pub answer: Vec<usize>,
    pub kind: Option<ArtifactKind>,
    /// Caption of the underlying scene.
    pub caption: Vec<usize>,
}

/// One generation example.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSample {
    pub image: Image,
    pub caption: Vec<usize>,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed; independent of generation order.
pub fn sample_seed(corpus_seed: u64, split: u64, index: u64) -> u64 {
    mix64(mix64(mix64(corpus_seed) ^ split) ^ index)
}

/// Even indices are real, odd indices fake; fake kinds cycle in order.
pub fn det_sample(cfg: &CorpusConfig, size: usize, channels: usize, gen_patch: usize, split: u64, index: usize) -> Result<DetSample> {
    let vocab = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.corpus_seed, split, index as u64));
    let (img, scene) = make_real(size, channels, cfg.noise_std as f32, &mut rng);
    let instruction = vocab.instruction(rng.gen_range(0..INSTRUCTIONS.len()));
    let caption = vocab.encode(&scene.caption())?;
    let (image, kind) = if index % 2 == 0 {
        (img, None)
    } else {
        let kind = ArtifactKind::ALL[(index / 2) % ArtifactKind::ALL.len()];
        let tilt = TiltGeometry {
            patch: gen_patch,
            channel: cfg.tilt_channel,
        };
        (inject_artifact(&img, &scene, kind, cfg.strength(kind), tilt, &mut rng)?, Some(kind))
    };
    Ok(DetSample {
        image,
        instruction,
        label: kind.is_some() as u8,
        answer: vocab.explanation(kind),
        kind,
        caption,
    })
}

pub fn gen_sample(cfg: &CorpusConfig, size: usize, channels: usize, split: u64, index: usize) -> Result<GenSample> {
    let vocab = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.corpus_seed, split, index as u64));
    let (image, scene) = make_real(size, channels, cfg.noise_std as f32, &mut rng);
    Ok(GenSample {
        image,
        caption: vocab.encode(&scene.caption())?,
    })
}

struct Header {
    kind: u8,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    vocab_hash: u64,
    capacity: usize,
}

fn write_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(h.kind);
    for v in [h.count, h.height, h.width, h.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&h.vocab_hash.to_le_bytes());
    out.extend_from_slice(&(h.capacity as u32).to_le_bytes());
}

fn write_tokens(out: &mut Vec<u8>, ids: &[usize], capacity: usize) -> Result<()> {
    if ids.len() > capacity {
        return Err(Error::Data(format!("token list of {} exceeds capacity {capacity}", ids.len())));
    }
    out.extend_from_slice(&(ids.len() as u16).to_le_bytes());
    for k in 0..capacity {
        out.extend_from_slice(&(ids.get(k).copied().unwrap_or(0) as u16).to_le_bytes());
    }
    Ok(())
}

fn write_pixels(out: &mut Vec<u8>, img: &Image, h: &Header) -> Result<()> {
    if img.height != h.height || img.width != h.width || img.channels != h.channels {
        return Err(Error::Data("image size differs from corpus header".into()));
    }
    out.extend(img.data.iter().flat_map(|v| v.to_le_bytes()));
    Ok(())
}

fn header_for(first: Option<&Image>, kind: u8, count: usize, capacity: usize) -> Header {
    let (height, width, channels) = first.map_or((0, 0, 0), |i| (i.height, i.width, i.channels));
    Header {
        kind,
        count,
        height,
        width,
        channels,
        vocab_hash: Vocab::new().hash(),
        capacity,
    }
}

pub fn write_det_corpus(samples: &[DetSample], capacity: usize) -> Result<Vec<u8>> {
    let h = header_for(samples.first().map(|s| &s.image), 0, samples.len(), capacity);
    let mut out = Vec::new();
    write_header(&mut out, &h);
    for s in samples {
        out.push(s.label);
        out.push(s.kind.map_or(0, |k| k.code()));
        write_pixels(&mut out, &s.image, &h)?;
        write_tokens(&mut out, &s.instruction, capacity)?;
        write_tokens(&mut out, &s.answer, capacity)?;
        write_tokens(&mut out, &s.caption, capacity)?;
    }
    Ok(out)
}

pub fn write_gen_corpus(samples: &[GenSample], capacity: usize) -> Result<Vec<u8>> {
    let h = header_for(samples.first().map(|s| &s.image), 1, samples.len(), capacity);
    let mut out = Vec::new();
    write_header(&mut out, &h);
    for s in samples {
        write_pixels(&mut out, &s.image, &h)?;
        write_tokens(&mut out, &s.caption, capacity)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("corpus file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tokens(&mut self, capacity: usize) -> Result<Vec<usize>> {
        let len = self.u16()? as usize;
        if len > capacity {
            return Err(Error::Data("token list longer than capacity".into()));
        }
        let mut ids = Vec::with_capacity(len);
        for k in 0..capacity {
            let id = self.u16()? as usize;
            if k < len {
                ids.push(id);
            }
        }
        Ok(ids)
    }

    fn image(&mut self, h: &Header) -> Result<Image> {
        let n = h.height * h.width * h.channels;
        let raw = self.take(4 * n)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Image::new(h.height, h.width, h.channels, data)
    }
}

fn read_header(c: &mut Cursor, want_kind: u8) -> Result<Header> {
    if c.take(8)? != MAGIC {
        return Err(Error::Data("not a corpus file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Data(format!("unsupported corpus version {version}")));
    }
    let kind = c.u8()?;
    if kind != want_kind {
        return Err(Error::Data(format!("corpus kind {kind}, expected {want_kind}")));
    }
    let h = Header {
        kind,
        count: c.u32()?,
        height: c.u32()?,
        width: c.u32()?,
        channels: c.u32()?,
        vocab_hash: c.u64()?,
        capacity: c.u32()?,
    };
    if h.vocab_hash != Vocab::new().hash() {
        return Err(Error::Data("corpus vocabulary hash does not match the tokenizer".into()));
    }
    Ok(h)
}

pub fn read_det_corpus(bytes: &[u8]) -> Result<Vec<DetSample>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let h = read_header(&mut c, 0)?;
    let mut out = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let label = c.u8()?;
        let kind = ArtifactKind::from_code(c.u8()?)?;
        if label > 1 || (label == 1) != kind.is_some() {
            return Err(Error::Data("label and artifact kind disagree".into()));
        }
        let image = c.image(&h)?;
        out.push(DetSample {
            image,
            label,
            kind,
            instruction: c.tokens(h.capacity)?,
            answer: c.tokens(h.capacity)?,
            caption: c.tokens(h.capacity)?,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Data("trailing bytes in corpus file".into()));
    }
    Ok(out)
}

pub fn read_gen_corpus(bytes: &[u8]) -> Result<Vec<GenSample>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let h = read_header(&mut c, 1)?;
    let mut out = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let image = c.image(&h)?;
        out.push(GenSample {
            image,
            caption: c.tokens(h.capacity)?,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Data("trailing bytes in corpus file".into()));
    }
    Ok(out)
}

/// The four files of a corpus directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPaths {
    pub det_train: PathBuf,
    pub det_test: PathBuf,
    pub gen_train: PathBuf,
    pub gen_test: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            det_train: dir.join("det-train.gdc"),
            det_test: dir.join("det-test.gdc"),
            gen_train: dir.join("gen-train.gdc"),
            gen_test: dir.join("gen-test.gdc"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.det_train, &self.det_test, &self.gen_train, &self.gen_test]
    }

    pub fn load_det(path: &Path) -> Result<Vec<DetSample>> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        read_det_corpus(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn load_gen(path: &Path) -> Result<Vec<GenSample>> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        read_gen_corpus(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

pub fn det_split(cfg: &CorpusConfig, size: usize, channels: usize, gen_patch: usize, split: u64, count: usize) -> Result<Vec<DetSample>> {
    (0..count).map(|i| det_sample(cfg, size, channels, gen_patch, split, i)).collect()
}

pub fn gen_split(cfg: &CorpusConfig, size: usize, channels: usize, split: u64, count: usize) -> Result<Vec<GenSample>> {
    (0..count).map(|i| gen_sample(cfg, size, channels, split, i)).collect()
}

/// Writes the four corpus files into `dir`; refuses to overwrite.
pub fn make_corpus(cfg: &CorpusConfig, size: usize, channels: usize, gen_patch: usize, dir: &Path) -> Result<CorpusPaths> {
    let paths = CorpusPaths::in_dir(dir);
    for p in paths.all() {
        if p.exists() {
            return Err(Error::Data(format!("{} already exists", p.display())));
        }
    }
    std::fs::create_dir_all(dir)?;
    let cap = cfg.token_capacity;
    let write = |p: &Path, bytes: Vec<u8>| std::fs::write(p, bytes);
    write(&paths.det_train, write_det_corpus(&det_split(cfg, size, channels, gen_patch, SPLIT_DET_TRAIN, cfg.det_train)?, cap)?)?;
    write(&paths.det_test, write_det_corpus(&det_split(cfg, size, channels, gen_patch, SPLIT_DET_TEST, cfg.det_test)?, cap)?)?;
    write(&paths.gen_train, write_gen_corpus(&gen_split(cfg, size, channels, SPLIT_GEN_TRAIN, cfg.gen_train)?, cap)?)?;
    write(&paths.gen_test, write_gen_corpus(&gen_split(cfg, size, channels, SPLIT_GEN_TEST, cfg.gen_test)?, cap)?)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, HashSet};

    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            det_train: 200,
            det_test: 40,
            gen_train: 20,
            gen_test: 10,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn detection_split_is_balanced() {
        let s = det_split(&small(), 32, 1, 4, SPLIT_DET_TRAIN, 200).unwrap();
        assert_eq!(s.iter().filter(|d| d.label == 0).count(), 100);
        assert_eq!(s.iter().filter(|d| d.label == 1).count(), 100);
    }

    #[test]
    fn artifact_kinds_are_uniform_over_fakes() {
        let cfg = small();
        let mut counts: BTreeMap<ArtifactKind, usize> = BTreeMap::new();
        for i in (1..2000).step_by(2) {
            // kind assignment depends only on the index
            let kind = ArtifactKind::ALL[(i / 2) % 5];
            *counts.entry(kind).or_default() += 1;
        }
        for &c in counts.values() {
            assert!((180..=220).contains(&c), "{counts:?}");
        }
        let s = det_split(&cfg, 32, 1, 4, SPLIT_DET_TRAIN, 20).unwrap();
        for (i, d) in s.iter().enumerate() {
            let want = (i % 2 == 1).then(|| ArtifactKind::ALL[(i / 2) % 5]);
            assert_eq!(d.kind, want);
        }
    }

    #[test]
    fn explanations_name_their_artifact() {
        let v = Vocab::new();
        let keyword = |k: ArtifactKind| match k {
            ArtifactKind::Checkerboard => "checkerboard",
            ArtifactKind::Banding => "banding",
            ArtifactKind::LightingConflict => "lighting",
            ArtifactKind::PatchDuplication => "copied",
            ArtifactKind::LatentTilt => "tilt",
        };
        for d in det_split(&small(), 32, 1, 4, SPLIT_DET_TEST, 40).unwrap() {
            let text = v.decode(&d.answer);
            match d.kind {
                None => assert!(text.starts_with("real")),
                Some(k) => assert!(text.starts_with("fake") && text.contains(keyword(k)), "{text}"),
            }
        }
    }

    #[test]
    fn files_round_trip_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let a = make_corpus(&cfg, 32, 1, 4, &dir.path().join("a")).unwrap();
        let b = make_corpus(&cfg, 32, 1, 4, &dir.path().join("b")).unwrap();
        for (p, q) in a.all().iter().zip(b.all()) {
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
        }
        let det = CorpusPaths::load_det(&a.det_train).unwrap();
        assert_eq!(det, det_split(&cfg, 32, 1, 4, SPLIT_DET_TRAIN, 200).unwrap());
        let gen = CorpusPaths::load_gen(&a.gen_test).unwrap();
        assert_eq!(gen.len(), 10);
        assert!(matches!(make_corpus(&cfg, 32, 1, 4, &dir.path().join("a")), Err(Error::Data(_))));
    }

    #[test]
    fn samples_do_not_depend_on_generation_order() {
        let cfg = small();
        let forward = det_split(&cfg, 32, 1, 4, SPLIT_DET_TRAIN, 12).unwrap();
        for i in (0..12).rev() {
            assert_eq!(det_sample(&cfg, 32, 1, 4, SPLIT_DET_TRAIN, i).unwrap(), forward[i]);
        }
    }

    #[test]
    fn train_and_test_images_are_disjoint() {
        let cfg = small();
        let train: HashSet<Vec<u8>> = det_split(&cfg, 32, 1, 4, SPLIT_DET_TRAIN, 200)
            .unwrap()
            .iter()
            .map(|d| d.image.to_bytes())
            .collect();
        for d in det_split(&cfg, 32, 1, 4, SPLIT_DET_TEST, 40).unwrap() {
            assert!(!train.contains(&d.image.to_bytes()));
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let s = det_split(&small(), 32, 1, 4, SPLIT_DET_TRAIN, 2).unwrap();
        let mut bytes = write_det_corpus(&s, 24).unwrap();
        assert!(read_gen_corpus(&bytes).is_err());
        bytes.truncate(bytes.len() - 1);
        assert!(read_det_corpus(&bytes).is_err());
        let mut bad_hash = write_det_corpus(&s, 24).unwrap();
        bad_hash[30] ^= 1;
        assert!(read_det_corpus(&bad_hash).unwrap_err().to_string().contains("hash"));
    }
}
