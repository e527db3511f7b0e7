//! The unified backbone: a learned patch encoder for detection, a fixed
//! space-to-depth encoder for generation, a stack of shared transformer
//! blocks routed by task masks, and the detection, explanation, velocity
//! and alignment heads.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{accumulate, ParamId, ParamStore, Session};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{patchify, unpatchify, Image};
use crate::masks::{build_detection_mask, build_generation_mask, SeqLayout};
use crate::smsa::{block_forward, MhaParams, SmsaLayer};
use crate::tensorgrad::{Real, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Name prefixes of the detector-only parameters: `E_det`, `F_det`, and
/// the text head.
pub const DETECTOR_HEAD_PREFIXES: &[&str] = &["det_embed.", "det_pos", "det_head.", "text_head."];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    shape: [usize; 2],
    init: Init,
    buffer: bool,
}

fn specs(c: &ModelConfig) -> Vec<Spec> {
    let d = c.d_model;
    let mut out = Vec::new();
    let mut add = |name: &str, r: usize, k: usize, init: Init| {
        out.push(Spec {
            name: name.to_string(),
            shape: [r, k],
            init,
            buffer: false,
        })
    };
    add("det_embed.w", c.det_dim(), d, Init::Normal);
    add("det_embed.b", 1, d, Init::Zeros);
    add("det_pos", c.n_det(), d, Init::Normal);
    add("gen_embed.w", c.gen_dim(), d, Init::Normal);
    add("gen_embed.b", 1, d, Init::Zeros);
    add("gen_pos", c.n_gen(), d, Init::Normal);
    add("time.w", c.t_embed_dim, d, Init::Normal);
    add("time.b", 1, d, Init::Zeros);
    add("tok_embed", c.vocab_size, d, Init::Normal);
    add("text_pos", c.max_text_len, d, Init::Normal);
    for l in 0..c.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        add(&p("ln1.g"), 1, d, Init::Ones);
        add(&p("ln1.b"), 1, d, Init::Zeros);
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            add(&p(w), d, d, Init::Normal);
        }
        add(&p("ln2.g"), 1, d, Init::Ones);
        add(&p("ln2.b"), 1, d, Init::Zeros);
        add(&p("ff.w1"), d, c.ff_dim, Init::Normal);
        add(&p("ff.b1"), 1, c.ff_dim, Init::Zeros);
        add(&p("ff.w2"), c.ff_dim, d, Init::Normal);
        add(&p("ff.b2"), 1, d, Init::Zeros);
    }
    add("final_ln.g", 1, d, Init::Ones);
    add("final_ln.b", 1, d, Init::Zeros);
    add("det_head.w1", d, c.det_hidden, Init::Normal);
    add("det_head.b1", 1, c.det_hidden, Init::Zeros);
    add("det_head.w2", c.det_hidden, 1, Init::Normal);
    add("det_head.b2", 1, 1, Init::Zeros);
    add("text_head.w", d, c.vocab_size, Init::Normal);
    add("text_head.b", 1, c.vocab_size, Init::Zeros);
    add("vel_head.w", d, c.gen_dim(), Init::Normal);
    add("vel_head.b", 1, c.gen_dim(), Init::Zeros);
    add("diga.w1", d, c.diga_hidden, Init::Normal);
    add("diga.b1", 1, c.diga_hidden, Init::Zeros);
    add("diga.w2", c.diga_hidden, d, Init::Normal);
    add("diga.b2", 1, d, Init::Zeros);
    for (name, init) in [("latent.mean", Init::Zeros), ("latent.std", Init::Ones)] {
        out.push(Spec {
            name: name.to_string(),
            shape: [1, c.gen_dim()],
            init,
            buffer: true,
        });
    }
    out
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    attn: [ParamId; 4],
    ln2: (ParamId, ParamId),
    ff: [ParamId; 4],
}

#[derive(Clone, Debug)]
struct Ids {
    det_embed: (ParamId, ParamId),
    det_pos: ParamId,
    gen_embed: (ParamId, ParamId),
    gen_pos: ParamId,
    time: (ParamId, ParamId),
    tok_embed: ParamId,
    text_pos: ParamId,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    det_head: [ParamId; 4],
    text_head: (ParamId, ParamId),
    vel_head: (ParamId, ParamId),
    diga: [ParamId; 4],
    latent_mean: ParamId,
    latent_std: ParamId,
}

impl Ids {
    fn resolve(store: &ParamStore, c: &ModelConfig) -> Result<Self> {
        let id = |n: &str| store.id(n);
        let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId)> { Ok((id(a)?, id(b)?)) };
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                ln1: pair(&p("ln1.g"), &p("ln1.b"))?,
                attn: [id(&p("attn.wq"))?, id(&p("attn.wk"))?, id(&p("attn.wv"))?, id(&p("attn.wo"))?],
                ln2: pair(&p("ln2.g"), &p("ln2.b"))?,
                ff: [id(&p("ff.w1"))?, id(&p("ff.b1"))?, id(&p("ff.w2"))?, id(&p("ff.b2"))?],
            });
        }
        Ok(Self {
            det_embed: pair("det_embed.w", "det_embed.b")?,
            det_pos: id("det_pos")?,
            gen_embed: pair("gen_embed.w", "gen_embed.b")?,
            gen_pos: id("gen_pos")?,
            time: pair("time.w", "time.b")?,
            tok_embed: id("tok_embed")?,
            text_pos: id("text_pos")?,
            layers,
            final_ln: pair("final_ln.g", "final_ln.b")?,
            det_head: [id("det_head.w1")?, id("det_head.b1")?, id("det_head.w2")?, id("det_head.b2")?],
            text_head: pair("text_head.w", "text_head.b")?,
            vel_head: pair("vel_head.w", "vel_head.b")?,
            diga: [id("diga.w1")?, id("diga.b1")?, id("diga.w2")?, id("diga.b2")?],
            latent_mean: id("latent.mean")?,
            latent_std: id("latent.std")?,
        })
    }
}

/// Outputs of one detection pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectOutput {
    /// `1 × 1` logit of the "fake" class.
    pub fake_logit: Var,
    /// Teacher-forced logits, row `j` predicting answer token `j`.
    pub answer_logits: Option<Var>,
    /// `1 × vocab` logits for the token after the last text token.
    pub next_logits: Var,
    /// Mean-pooled final detection features (`1 × d_model`).
    pub pooled: Var,
    /// Last-block detection features `h_det^(L)` (`n_det × d_model`).
    pub z_d: Var,
}

/// Outputs of one generation pass.
#[derive(Clone, Copy, Debug)]
pub struct GenOutput {
    /// Predicted velocity, same shape as the input latents.
    pub velocity: Var,
    /// Latent-token features after the requested block, if any.
    pub captured: Option<Var>,
}

/// Sinusoidal flow-time features `[sin(1000·t·f_i), cos(1000·t·f_i)]`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Both encoders, the shared backbone and all heads.
#[derive(Clone, Debug)]
pub struct UnifiedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl PartialEq for UnifiedModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl UnifiedModel {
    /// Fresh model: truncated-normal weights (σ = 0.02, cut at 2σ), unit
    /// norm gains, zero biases, identity latent standardization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut store = ParamStore::new();
        for spec in specs(&config) {
            let n = spec.shape[0] * spec.shape[1];
            let data: Vec<f32> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => (0..n)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break (z * INIT_STD) as f32;
                        }
                    })
                    .collect(),
            };
            store.insert(&spec.name, Tensor::new(&spec.shape, data)?, spec.buffer)?;
        }
        Self::from_parts(config, store)
    }

    /// Assembles a model from a store whose names, order and shapes match
    /// the configuration exactly.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = specs(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (spec, id) in expected.iter().zip(params.ids()) {
            if params.name(id) != spec.name
                || params.get(id).shape() != spec.shape
                || params.is_buffer(id) != spec.buffer
            {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let ids = Ids::resolve(&params, &config)?;
        Ok(Self { config, params, ids })
    }

    /// Trainable mask with every non-buffer parameter selected.
    pub fn all_trainable(&self) -> Vec<bool> {
        self.params.select(|_| true)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let c = &self.config;
        if img.height != c.image_size || img.width != c.image_size || img.channels != c.channels {
            return Err(Error::Shape {
                op: "image size",
                lhs: vec![img.height, img.width, img.channels],
                rhs: vec![c.image_size, c.image_size, c.channels],
            });
        }
        Ok(())
    }

    /// `z_gen^(0)`: lossless space-to-depth patchify.
    pub fn encode_gen(&self, img: &Image) -> Result<Tensor<f32>> {
        self.check_image(img)?;
        patchify(img, self.config.gen_patch)
    }

    /// Exact inverse of [`UnifiedModel::encode_gen`].
    pub fn decode_gen(&self, latents: &Tensor<f32>) -> Result<Image> {
        let c = &self.config;
        unpatchify(latents, c.image_size, c.image_size, c.channels, c.gen_patch)
    }

    /// Detection patches fed to the learned `E_det` embedding, standardized
    /// with the fitted latent statistics. Raw pixels in [0, 1] leave the
    /// faint artifacts far below the embedding's initial scale.
    pub fn det_patches(&self, img: &Image) -> Result<Tensor<f32>> {
        self.check_image(img)?;
        let p = patchify(img, self.config.det_patch)?;
        if self.config.det_patch == self.config.gen_patch {
            return Ok(self.standardize(&p));
        }
        // different widths: pool the statistics per pixel channel
        let ch = self.config.channels;
        let mean = self.params.get(self.ids.latent_mean).data();
        let std = self.params.get(self.ids.latent_std).data();
        let mut m = vec![0f64; ch];
        let mut sq = vec![0f64; ch];
        for (i, (&mu, &sd)) in mean.iter().zip(std).enumerate() {
            m[i % ch] += mu as f64;
            sq[i % ch] += (sd as f64).powi(2) + (mu as f64).powi(2);
        }
        let per = (mean.len() / ch) as f64;
        let stats: Vec<(f32, f32)> = m
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let mu = s / per;
                (mu as f32, ((q / per - mu * mu).max(0.0).sqrt().max(1e-3)) as f32)
            })
            .collect();
        let mut out = p;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (mu, sd) = stats[i % ch];
            *v = (*v - mu) / sd;
        }
        Ok(out)
    }

    /// Per-channel standardization of raw latents.
    pub fn standardize(&self, raw: &Tensor<f32>) -> Tensor<f32> {
        let mean = self.params.get(self.ids.latent_mean).data();
        let std = self.params.get(self.ids.latent_std).data();
        let cols = raw.cols();
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = (*v - mean[c]) / std[c];
        }
        out
    }

    pub fn destandardize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        let mean = self.params.get(self.ids.latent_mean).data();
        let std = self.params.get(self.ids.latent_std).data();
        let cols = z.cols();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = *v * std[c] + mean[c];
        }
        out
    }

    /// Fits the latent standardization buffers to a set of images.
    pub fn fit_latent_stats<'a>(&mut self, images: impl IntoIterator<Item = &'a Image>) -> Result<()> {
        let dim = self.config.gen_dim();
        let mut sum = vec![0f64; dim];
        let mut sq = vec![0f64; dim];
        let mut n = 0usize;
        for img in images {
            let z = self.encode_gen(img)?;
            for row in z.data().chunks(dim) {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("no images to fit latent statistics".into()));
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n as f64;
                ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32
            })
            .collect();
        *self.params.get_mut(self.ids.latent_mean) = Tensor::new(&[1, dim], mean)?;
        *self.params.get_mut(self.ids.latent_std) = Tensor::new(&[1, dim], std)?;
        Ok(())
    }

    fn layer<T: Real>(&self, s: &mut Session<T>, l: usize) -> SmsaLayer {
        let ids = &self.ids.layers[l];
        SmsaLayer {
            attn: MhaParams {
                wq: s.p(ids.attn[0]),
                wk: s.p(ids.attn[1]),
                wv: s.p(ids.attn[2]),
                wo: s.p(ids.attn[3]),
                heads: self.config.heads,
            },
            ln1_gamma: s.p(ids.ln1.0),
            ln1_beta: s.p(ids.ln1.1),
            ln2_gamma: s.p(ids.ln2.0),
            ln2_beta: s.p(ids.ln2.1),
            ff_in_w: s.p(ids.ff[0]),
            ff_in_b: s.p(ids.ff[1]),
            ff_out_w: s.p(ids.ff[2]),
            ff_out_b: s.p(ids.ff[3]),
        }
    }

    fn linear<T: Real>(&self, s: &mut Session<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (s.p(w), s.p(b));
        let h = s.tape.matmul(x, w)?;
        s.tape.add_row(h, b)
    }

    fn final_norm<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.ids.final_ln.0), s.p(self.ids.final_ln.1));
        s.tape.layernorm(x, g, b)
    }

    fn time_row<T: Real>(&self, s: &mut Session<T>, t: f64) -> Result<Var> {
        let dim = self.config.t_embed_dim;
        let feats = s.constant(Tensor::from_f64(1, dim, &time_features(t, dim))?);
        self.linear(s, feats, self.ids.time)
    }

    /// Latent tokens: `z·W + b + pos + time(t)`.
    fn gen_tokens<T: Real>(&self, s: &mut Session<T>, z: Var, t: f64) -> Result<Var> {
        let (n, dim) = s.tape.value(z).dims2("gen_tokens")?;
        if n != self.config.n_gen() || dim != self.config.gen_dim() {
            return Err(Error::Shape {
                op: "gen_tokens",
                lhs: vec![n, dim],
                rhs: vec![self.config.n_gen(), self.config.gen_dim()],
            });
        }
        let h = self.linear(s, z, self.ids.gen_embed)?;
        let pos = s.p(self.ids.gen_pos);
        let h = s.tape.add(h, pos)?;
        let tr = self.time_row(s, t)?;
        s.tape.add_row(h, tr)
    }

    /// `h_det^(0) = E_det(I)`: linear patch embedding plus positions.
    pub fn encode_det<T: Real>(&self, s: &mut Session<T>, patches: Var) -> Result<Var> {
        let (n, dim) = s.tape.value(patches).dims2("encode_det")?;
        if n != self.config.n_det() || dim != self.config.det_dim() {
            return Err(Error::Shape {
                op: "encode_det",
                lhs: vec![n, dim],
                rhs: vec![self.config.n_det(), self.config.det_dim()],
            });
        }
        let h = self.linear(s, patches, self.ids.det_embed)?;
        let pos = s.p(self.ids.det_pos);
        s.tape.add(h, pos)
    }

    fn text_tokens<T: Real>(&self, s: &mut Session<T>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let table = s.p(self.ids.tok_embed);
        let e = s.tape.gather_rows(table, ids)?;
        let pos_table = s.p(self.ids.text_pos);
        let pos = s.tape.gather_rows(pos_table, positions)?;
        s.tape.add(e, pos)
    }

    fn check_text(&self, len: usize) -> Result<()> {
        if len > self.config.max_text_len {
            return Err(Error::Domain(format!(
                "text of {len} tokens exceeds max_text_len {}",
                self.config.max_text_len
            )));
        }
        Ok(())
    }

    /// Constant detection inputs for an image: det patches and
    /// standardized latents.
    pub fn detect_inputs<T: Real>(&self, s: &mut Session<T>, img: &Image) -> Result<(Var, Var)> {
        let patches = self.det_patches(img)?.cast::<T>();
        let z = self.standardize(&self.encode_gen(img)?).cast::<T>();
        Ok((s.constant(patches), s.constant(z)))
    }

    /// Detection pass over `[z_gen | h_det | instruction | answer]`.
    ///
    /// With `answer`, teacher forcing feeds `answer[..T-1]` and returns one
    /// logit row per answer token.
    pub fn detect_forward<T: Real>(
        &self,
        s: &mut Session<T>,
        img: &Image,
        instruction: &[usize],
        answer: Option<&[usize]>,
    ) -> Result<DetectOutput> {
        let (patches, z) = self.detect_inputs(s, img)?;
        self.detect_from(s, patches, z, instruction, answer)
    }

    /// [`UnifiedModel::detect_forward`] on already-bound inputs.
    pub fn detect_from<T: Real>(
        &self,
        s: &mut Session<T>,
        det_patches: Var,
        z_gen: Var,
        instruction: &[usize],
        answer: Option<&[usize]>,
    ) -> Result<DetectOutput> {
        self.detect_impl(s, det_patches, z_gen, instruction, answer, !self.config.smsa)
    }

    /// With `prune`, latent tokens are left out of the sequence entirely;
    /// only valid when the mask already hides them from every other row.
    fn detect_impl<T: Real>(
        &self,
        s: &mut Session<T>,
        det_patches: Var,
        z_gen: Var,
        instruction: &[usize],
        answer: Option<&[usize]>,
        prune: bool,
    ) -> Result<DetectOutput> {
        let c = &self.config;
        if instruction.is_empty() {
            return Err(Error::Layout("detection needs a non-empty instruction".into()));
        }
        let answer = answer.filter(|a| !a.is_empty());
        let mut text: Vec<usize> = instruction.to_vec();
        if let Some(a) = answer {
            text.extend_from_slice(&a[..a.len() - 1]);
        }
        self.check_text(text.len())?;
        let (n_gen, n_det) = (c.n_gen(), c.n_det());
        let layout = SeqLayout::detection(n_gen, n_det, instruction.len(), text.len() - instruction.len())?;
        let mut mask = build_detection_mask(&layout, c.mask_options())?;

        let h_det = self.encode_det(s, det_patches)?;
        let positions: Vec<usize> = (0..text.len()).collect();
        let h_text = self.text_tokens(s, &text, &positions)?;
        let (x, det_off) = if prune {
            let keep: Vec<usize> = (n_gen..layout.total()).collect();
            mask = mask.select(&keep);
            (s.tape.concat_rows(&[h_det, h_text])?, 0)
        } else {
            let z0 = self.gen_tokens(s, z_gen, 0.0)?;
            (s.tape.concat_rows(&[z0, h_det, h_text])?, n_gen)
        };
        let mut x = x;
        for l in 0..c.layers {
            let layer = self.layer(s, l);
            x = block_forward(s.tape, x, &layer, &mask)?;
        }
        let z_d = s.tape.slice_rows(x, det_off, n_det)?;
        let det_final = self.final_norm(s, z_d)?;
        let pooled = s.tape.mean_pool_rows(det_final)?;
        let [w1, b1, w2, b2] = self.ids.det_head;
        let h = self.linear(s, pooled, (w1, b1))?;
        let h = s.tape.gelu(h)?;
        let fake_logit = self.linear(s, h, (w2, b2))?;

        let text_off = det_off + n_det;
        let first = text_off + instruction.len() - 1;
        let rows = text_off + text.len() - first;
        let t_rows = s.tape.slice_rows(x, first, rows)?;
        let t_rows = self.final_norm(s, t_rows)?;
        let logits = self.linear(s, t_rows, self.ids.text_head)?;
        let next_logits = if rows == 1 {
            logits
        } else {
            s.tape.slice_rows(logits, rows - 1, 1)?
        };
        Ok(DetectOutput {
            fake_logit,
            answer_logits: answer.map(|_| logits),
            next_logits,
            pooled,
            z_d,
        })
    }

    /// Velocity `v_θ(x_t, t, c)` over `[caption | latents]`.
    ///
    /// `capture = Some(l)` also returns the latent rows after block `l`
    /// (1-based).
    pub fn gen_forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x_t: Var,
        t: f64,
        caption: &[usize],
        capture: Option<usize>,
    ) -> Result<GenOutput> {
        let c = &self.config;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("flow time {t} outside (0, 1]")));
        }
        if let Some(l) = capture {
            if l == 0 || l > c.layers {
                return Err(Error::Domain(format!("capture layer {l} outside 1..={}", c.layers)));
            }
        }
        self.check_text(caption.len())?;
        let lat = self.gen_tokens(s, x_t, t)?;
        let mut parts = Vec::new();
        let mut cap_len = 0;
        if !caption.is_empty() {
            let positions: Vec<usize> = (0..caption.len()).collect();
            parts.push(self.text_tokens(s, caption, &positions)?);
            cap_len += caption.len();
            if c.detector_condition {
                let w = s.p(self.ids.text_head.0);
                let wt = s.tape.transpose(w)?;
                let cond = s.tape.gather_rows(wt, caption)?;
                let pos_table = s.p(self.ids.text_pos);
                let pos = s.tape.gather_rows(pos_table, &positions)?;
                parts.push(s.tape.add(cond, pos)?);
                cap_len += caption.len();
            }
        }
        parts.push(lat);
        let layout = SeqLayout::generation(cap_len, c.n_gen())?;
        let mask = build_generation_mask(&layout)?;
        let mut x = if parts.len() == 1 {
            lat
        } else {
            s.tape.concat_rows(&parts)?
        };
        let mut captured = None;
        for l in 0..c.layers {
            let layer = self.layer(s, l);
            x = block_forward(s.tape, x, &layer, &mask)?;
            if capture == Some(l + 1) {
                captured = Some(if cap_len == 0 {
                    x
                } else {
                    s.tape.slice_rows(x, cap_len, c.n_gen())?
                });
            }
        }
        let lat_rows = if cap_len == 0 {
            x
        } else {
            s.tape.slice_rows(x, cap_len, c.n_gen())?
        };
        let normed = self.final_norm(s, lat_rows)?;
        let velocity = self.linear(s, normed, self.ids.vel_head)?;
        Ok(GenOutput { velocity, captured })
    }

    /// `h_φ`: two-layer gelu projection of generator features.
    pub fn diga_project<T: Real>(&self, s: &mut Session<T>, z_g: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.ids.diga;
        let h = self.linear(s, z_g, (w1, b1))?;
        let h = s.tape.gelu(h)?;
        self.linear(s, h, (w2, b2))
    }

    /// Probability that `img` is fake.
    pub fn fake_probability(&self, img: &Image, instruction: &[usize]) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let mut s = Session::new(&mut tape, &self.params, None);
        let out = self.detect_forward(&mut s, img, instruction, None)?;
        let logit = s.tape.value(out.fake_logit).item();
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    /// Mean-pooled final detection features of `img`.
    pub fn det_features(&self, img: &Image, instruction: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let mut s = Session::new(&mut tape, &self.params, None);
        let out = self.detect_forward(&mut s, img, instruction, None)?;
        Ok(s.tape.value(out.pooled).data().to_vec())
    }

    /// Fake probability and greedily decoded explanation, stopping at
    /// `stop` or after `max_len` tokens.
    pub fn explain(&self, img: &Image, instruction: &[usize], stop: usize, max_len: usize) -> Result<(f32, Vec<usize>)> {
        let mut answer: Vec<usize> = Vec::new();
        let mut prob = 0.0;
        let budget = max_len.min(self.config.max_text_len.saturating_sub(instruction.len()) + 1);
        for step in 0..budget {
            let mut tape = Tape::<f32>::new();
            let mut s = Session::new(&mut tape, &self.params, None);
            // feed the tokens decoded so far plus a placeholder that the
            // teacher-forcing slice drops
            let mut fed = answer.clone();
            fed.push(stop);
            let out = self.detect_forward(&mut s, img, instruction, Some(&fed))?;
            if step == 0 {
                let logit = s.tape.value(out.fake_logit).item();
                prob = 1.0 / (1.0 + (-logit).exp());
            }
            let next = argmax(s.tape.value(out.next_logits).data());
            if next == stop {
                break;
            }
            answer.push(next);
        }
        Ok((prob, answer))
    }

    /// Velocity for raw tensors, without gradients.
    pub fn velocity(&self, x_t: &Tensor<f32>, t: f64, caption: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let mut s = Session::new(&mut tape, &self.params, None);
        let x = s.constant(x_t.clone());
        let out = self.gen_forward(&mut s, x, t, caption, None)?;
        Ok(s.tape.value(out.velocity).clone())
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
