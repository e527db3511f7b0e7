//! Metrics: accuracy/F1, ROUGE-L, embedding-based semantic consistency,
//! Fréchet feature distance, perturbations for robustness, and a feature
//! diversity score. The last three use the model's own detector features
//! as the embedding, so they are labelled as proxies in reports.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{sample, FlowSchedule};
use crate::image::Image;
use crate::model::UnifiedModel;
use crate::synthcorpus::{ArtifactKind, DetSample, GenSample, Vocab, EOS};
use crate::tensorgrad::Tensor;

/// `(accuracy, F1 of the fake class)`. F1 is 1 when there are no
/// positives in either predictions or labels.
pub fn acc_f1(preds: &[u8], labels: &[u8]) -> Result<(f64, f64)> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape {
            op: "acc_f1",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let (mut tp, mut fp, mut fne, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        correct += (p == y) as usize;
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fne += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / preds.len() as f64;
    let denom = 2 * tp + fp + fne;
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok((acc, f1))
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure. Two empty sequences score 1, one empty sequence 0.
pub fn rouge_l(pred: &[usize], reference: &[usize]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(pred, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / pred.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn mean_embedding(tokens: &[usize], table: &Tensor<f32>) -> Result<Vec<f64>> {
    let (vocab, dim) = table.dims2("css")?;
    if tokens.is_empty() {
        return Err(Error::Domain("css of an empty token sequence".into()));
    }
    let mut acc = vec![0.0f64; dim];
    for &t in tokens {
        if t >= vocab {
            return Err(Error::Index {
                what: "token",
                index: t,
                size: vocab,
            });
        }
        for (a, &v) in acc.iter_mut().zip(table.row(t)) {
            *a += v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / tokens.len() as f64).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of mean token embeddings, mapped to `[0, 1]`.
pub fn css(pred: &[usize], reference: &[usize], table: &Tensor<f32>) -> Result<f64> {
    let a = mean_embedding(pred, table)?;
    let b = mean_embedding(reference, table)?;
    let c = cosine(&a, &b).ok_or(Error::ZeroNorm { op: "css", row: 0 })?;
    Ok((c + 1.0) / 2.0)
}

fn gaussian_fit(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut mu = DVector::zeros(d);
    for row in x {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in x {
        let c = DVector::from_iterator(d, row.iter().zip(mu.iter()).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root; negative eigenvalues are clamped to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. Each side
/// needs at least twice as many rows as feature dimensions.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, |r| r.len());
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Data("feature rows are empty or of unequal width".into()));
    }
    for (side, x) in [("first", a), ("second", b)] {
        if x.len() < 2 * d {
            return Err(Error::Data(format!(
                "{side} set has {} samples; at least {} are needed for {d} features",
                x.len(),
                2 * d
            )));
        }
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    let diff = (&m1 - &m2).norm_squared();
    let cross = if s1 == s2 {
        s1.trace()
    } else {
        let r1 = sqrt_psd(&s1);
        sqrt_psd(&(&r1 * &s2 * &r1)).trace()
    };
    Ok((diff + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// 95th percentile of the distance between two independent bootstrap
/// resamples (half size each) of `x`: the distance expected from sampling
/// noise alone.
pub fn resampled_bound(x: &[Vec<f64>], rounds: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = x.len() / 2;
    let mut draws = Vec::with_capacity(rounds);
    for _ in 0..rounds.max(1) {
        let a: Vec<Vec<f64>> = (0..half).map(|_| x[rng.gen_range(0..x.len())].clone()).collect();
        let b: Vec<Vec<f64>> = (0..half).map(|_| x[rng.gen_range(0..x.len())].clone()).collect();
        draws.push(frechet_distance(&a, &b)?);
    }
    draws.sort_by(|p, q| p.total_cmp(q));
    let i = ((draws.len() as f64 * 0.95).ceil() as usize).clamp(1, draws.len()) - 1;
    Ok(draws[i])
}

/// Distance between the two halves of a shuffled copy of `x`.
pub fn shuffled_halves_distance(x: &[Vec<f64>], seed: u64) -> Result<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = x.len() / 2;
    let a: Vec<Vec<f64>> = idx[..half].iter().map(|&i| x[i].clone()).collect();
    let b: Vec<Vec<f64>> = idx[half..2 * half].iter().map(|&i| x[i].clone()).collect();
    frechet_distance(&a, &b)
}

/// Mean-pooled final detection features, one row per image.
pub fn detector_features(model: &UnifiedModel, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let instruction = Vocab::new().instruction(0);
    images
        .iter()
        .map(|img| Ok(model.det_features(img, &instruction)?.into_iter().map(f64::from).collect()))
        .collect()
}

/// Fréchet distance in the model's detector feature space.
pub fn fid_proxy(real: &[Image], generated: &[Image], model: &UnifiedModel) -> Result<f64> {
    frechet_distance(&detector_features(model, real)?, &detector_features(model, generated)?)
}

/// Mean pairwise cosine distance of feature rows.
pub fn feature_diversity(x: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Data("diversity needs at least two samples".into()));
    }
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            if x[i] != x[j] {
                total += 1.0 - cosine(&x[i], &x[j]).unwrap_or(1.0);
            }
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn diversity(images: &[Image], model: &UnifiedModel) -> Result<f64> {
    feature_diversity(&detector_features(model, images)?)
}

/// Image degradations for the robustness table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    None,
    /// Keep the centred `r`-fraction window, resize back (nearest).
    Crop(f64),
    /// Round to `q` evenly spaced levels.
    Quantize(u32),
}

impl Perturbation {
    /// Rows of the robustness table.
    pub const STANDARD: [Perturbation; 6] = [
        Perturbation::None,
        Perturbation::Crop(0.9),
        Perturbation::Crop(0.7),
        Perturbation::Crop(0.5),
        Perturbation::Quantize(32),
        Perturbation::Quantize(8),
    ];
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => f.write_str("none"),
            Perturbation::Crop(r) => write!(f, "crop_{r}"),
            Perturbation::Quantize(q) => write!(f, "quantize_{q}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("unknown perturbation {s:?}"));
        if s == "none" {
            return Ok(Perturbation::None);
        }
        if let Some(r) = s.strip_prefix("crop_") {
            return Ok(Perturbation::Crop(r.parse().map_err(|_| bad())?));
        }
        if let Some(q) = s.strip_prefix("quantize_") {
            return Ok(Perturbation::Quantize(q.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }
}

pub fn perturb(img: &Image, p: Perturbation) -> Result<Image> {
    match p {
        Perturbation::None => Ok(img.clone()),
        Perturbation::Crop(r) => {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Domain(format!("crop ratio {r} outside (0, 1]")));
            }
            let (h, w) = (img.height, img.width);
            let (ch, cw) = (((r * h as f64).round() as usize).max(1), ((r * w as f64).round() as usize).max(1));
            let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
            let mut out = Image::filled(h, w, img.channels, 0.0);
            for y in 0..h {
                let sy = oy + y * ch / h;
                for x in 0..w {
                    let sx = ox + x * cw / w;
                    for c in 0..img.channels {
                        out.set(y, x, c, img.get(sy, sx, c));
                    }
                }
            }
            Ok(out)
        }
        Perturbation::Quantize(q) => {
            if q < 2 {
                return Err(Error::Domain(format!("quantization needs at least 2 levels, got {q}")));
            }
            let k = (q - 1) as f32;
            let mut out = img.clone();
            for v in &mut out.data {
                *v = (v.clamp(0.0, 1.0) * k).round() / k;
            }
            Ok(out)
        }
    }
}

/// Reference explanation without its terminator.
fn reference_text(answer: &[usize]) -> &[usize] {
    match answer.last() {
        Some(&EOS) => &answer[..answer.len() - 1],
        _ => answer,
    }
}

/// Detection and explanation scores on one (possibly perturbed) split.
#[derive(Clone, Debug, PartialEq)]
pub struct DetScores {
    pub acc: f64,
    pub f1: f64,
    /// `None` when explanations were not decoded.
    pub rouge_l: Option<f64>,
    pub css: Option<f64>,
    pub per_kind: Vec<(ArtifactKind, f64)>,
}

/// Scores `samples`; with `explain`, also decodes explanations greedily.
pub fn score_detection(model: &UnifiedModel, samples: &[DetSample], p: Perturbation, explain: bool) -> Result<DetScores> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let table = model.params.get(model.params.id("tok_embed")?).clone();
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let (mut rouge, mut cs) = (0.0, 0.0);
    for s in samples {
        let img = perturb(&s.image, p)?;
        let prob = if explain {
            let (prob, tokens) = model.explain(&img, &s.instruction, EOS, s.answer.len() + 4)?;
            let reference = reference_text(&s.answer);
            rouge += rouge_l(&tokens, reference);
            cs += if tokens.is_empty() { 0.0 } else { css(&tokens, reference, &table)? };
            prob
        } else {
            model.fake_probability(&img, &s.instruction)?
        };
        preds.push((prob > 0.5) as u8);
        labels.push(s.label);
    }
    let (acc, f1) = acc_f1(&preds, &labels)?;
    let n = samples.len() as f64;
    let per_kind = ArtifactKind::ALL
        .iter()
        .filter_map(|&k| {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].kind == Some(k)).collect();
            (!idx.is_empty()).then(|| {
                let hit = idx.iter().filter(|&&i| preds[i] == labels[i]).count();
                (k, hit as f64 / idx.len() as f64)
            })
        })
        .collect();
    Ok(DetScores {
        acc,
        f1,
        rouge_l: explain.then_some(rouge / n),
        css: explain.then_some(cs / n),
        per_kind,
    })
}

/// Everything `eval` reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub clean: DetScores,
    pub fid_proxy: Option<f64>,
    pub diversity: Option<f64>,
    pub robustness: Vec<(Perturbation, DetScores)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// `metric,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "acc,{:.6}", self.clean.acc);
        let _ = writeln!(out, "f1,{:.6}", self.clean.f1);
        let _ = writeln!(out, "rouge_l,{}", opt(self.clean.rouge_l));
        let _ = writeln!(out, "css_proxy,{}", opt(self.clean.css));
        let _ = writeln!(out, "fid_proxy,{}", opt(self.fid_proxy));
        let _ = writeln!(out, "diversity_proxy,{}", opt(self.diversity));
        for (k, a) in &self.clean.per_kind {
            let _ = writeln!(out, "acc_{k},{a:.6}");
        }
        out
    }

    /// Perturbation × metric rows.
    pub fn robustness_csv(&self) -> String {
        let mut out = String::from("perturbation,acc,f1,rouge_l,css_proxy\n");
        for (p, s) in &self.robustness {
            let _ = writeln!(out, "{p},{:.6},{:.6},{},{}", s.acc, s.f1, opt(s.rouge_l), opt(s.css));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22}{:>10}", "metric", "value");
        for line in self.metrics_csv().lines().skip(1) {
            let (k, v) = line.split_once(',').unwrap_or((line, ""));
            let _ = writeln!(out, "{k:<22}{:>10}", if v.is_empty() { "-" } else { v });
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<14}{:>10}{:>10}{:>10}{:>12}", "perturbation", "acc", "f1", "rouge_l", "css_proxy");
        for (p, s) in &self.robustness {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<14}{:>10.4}{:>10.4}{:>10}{:>12}", p.to_string(), s.acc, s.f1, f(s.rouge_l), f(s.css));
        }
        out
    }
}

/// Sizes for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPlan {
    /// Generated images compared against as many real ones; the Fréchet
    /// distance is skipped when this is below twice the feature width.
    pub fid_samples: usize,
    /// Samples of one caption for the diversity score (0 skips it).
    pub diversity_samples: usize,
    pub schedule: FlowSchedule,
    /// Image `i` is sampled with seed `seed + i`.
    pub seed: u64,
    /// Decode explanations for ROUGE-L and CSS.
    pub explain: bool,
}

/// Detection under every standard perturbation plus, when `gen_test` is
/// non-empty, the generation proxies.
pub fn evaluate(model: &UnifiedModel, det_test: &[DetSample], gen_test: &[GenSample], plan: &EvalPlan) -> Result<MetricsReport> {
    let mut robustness = Vec::new();
    for p in Perturbation::STANDARD {
        log::info!("scoring detection under {p}");
        robustness.push((p, score_detection(model, det_test, p, plan.explain)?));
    }
    let clean = robustness[0].1.clone();
    let n = plan.fid_samples.min(gen_test.len());
    let fid_proxy = if n >= 2 * model.config.d_model {
        let real: Vec<Image> = gen_test[..n].iter().map(|g| g.image.clone()).collect();
        let mut fake = Vec::with_capacity(n);
        for (i, g) in gen_test[..n].iter().enumerate() {
            fake.push(sample(model, &g.caption, &plan.schedule, plan.seed + i as u64)?);
        }
        Some(fid_proxy(&real, &fake, model)?)
    } else {
        log::warn!("fid_proxy skipped: {n} samples, need {}", 2 * model.config.d_model);
        None
    };
    let diversity = match gen_test.first() {
        Some(g) if plan.diversity_samples >= 2 => {
            let imgs = (0..plan.diversity_samples)
                .map(|i| sample(model, &g.caption, &plan.schedule, plan.seed + i as u64))
                .collect::<Result<Vec<_>>>()?;
            Some(diversity(&imgs, model)?)
        }
        _ => None,
    };
    Ok(MetricsReport {
        clean,
        fid_proxy,
        diversity,
        robustness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_f1_examples() {
        assert_eq!(acc_f1(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(acc_f1(&[0, 0, 0, 0], &[1, 0, 1, 0]).unwrap(), (0.5, 0.0));
        let (a, f) = acc_f1(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12 && (f - 2.0 / 3.0).abs() < 1e-12);
        assert!(acc_f1(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
        // ref a b c d e, pred a c e: LCS 3, P 1, R 0.6
        assert!((rouge_l(&[1, 3, 5], &[1, 2, 3, 4, 5]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn css_examples() {
        let table = Tensor::new(&[3, 2], vec![1.0f32, 0.0, -1.0, 0.0, 0.3, 0.8]).unwrap();
        assert!((css(&[0, 2], &[0, 2], &table).unwrap() - 1.0).abs() < 1e-12);
        assert!(css(&[0], &[1], &table).unwrap().abs() < 1e-12);
        assert_eq!(css(&[2, 0, 0], &[0, 2, 0], &table).unwrap(), css(&[0, 0, 2], &[0, 2, 0], &table).unwrap());
        assert!(matches!(css(&[0, 1], &[2], &table), Err(Error::ZeroNorm { .. })));
    }

    fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn frechet_is_zero_on_identical_sets_and_symmetric() {
        let a = gaussian_rows(40, 4, 0.0, 1);
        let b = gaussian_rows(50, 4, 0.3, 2);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-6, "{ab} {ba}");
    }

    #[test]
    fn frechet_matches_the_one_dimensional_closed_form() {
        // equal spreads, means apart by δ → δ²
        let a: Vec<Vec<f64>> = [-1.0, 0.0, 1.0, 2.0].iter().map(|&v| vec![v]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|r| vec![r[0] + 0.7]).collect();
        assert!((frechet_distance(&a, &b).unwrap() - 0.49).abs() < 1e-6);
        // sample variances 4/3 and 16/3, equal means: (σ1 − σ2)² = 4/3
        let c: Vec<Vec<f64>> = [-1.0, 1.0, -1.0, 1.0].iter().map(|&v| vec![v]).collect();
        let d: Vec<Vec<f64>> = c.iter().map(|r| vec![2.0 * r[0]]).collect();
        assert!((frechet_distance(&c, &d).unwrap() - 4.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn frechet_needs_enough_samples() {
        let a = gaussian_rows(7, 4, 0.0, 1);
        assert!(matches!(frechet_distance(&a, &a), Err(Error::Data(_))));
    }

    #[test]
    fn shuffled_halves_sit_below_the_resampled_bound() {
        let x = gaussian_rows(400, 8, 0.0, 3);
        let bound = resampled_bound(&x, 50, 4).unwrap();
        let d = shuffled_halves_distance(&x, 5).unwrap();
        assert!(d < bound, "{d} vs {bound}");
        let far = gaussian_rows(200, 8, 1.0, 6);
        assert!(frechet_distance(&x[..200], &far).unwrap() > bound);
    }

    #[test]
    fn crop_and_quantize_examples() {
        let img = Image::new(32, 32, 1, (0..1024).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        assert_eq!(perturb(&img, Perturbation::Crop(1.0)).unwrap(), img);
        assert_eq!(perturb(&img, Perturbation::Quantize(256)).unwrap(), img);
        let half = perturb(&img, Perturbation::Crop(0.5)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(half.get(y, x, 0), img.get(8 + y / 2, 8 + x / 2, 0));
            }
        }
        let q = perturb(&img, Perturbation::Quantize(2)).unwrap();
        assert!(q.data.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(perturb(&img, Perturbation::Crop(0.0)).is_err());
    }

    #[test]
    fn perturbation_names_round_trip() {
        for p in Perturbation::STANDARD {
            assert_eq!(p.to_string().parse::<Perturbation>().unwrap(), p);
        }
    }

    #[test]
    fn diversity_examples() {
        let same = vec![vec![1.0, 2.0]; 3];
        assert_eq!(feature_diversity(&same).unwrap(), 0.0);
        let orth = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        assert!((feature_diversity(&orth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_lists_every_perturbation() {
        let s = DetScores {
            acc: 1.0,
            f1: 1.0,
            rouge_l: Some(0.5),
            css: None,
            per_kind: vec![(ArtifactKind::Banding, 1.0)],
        };
        let r = MetricsReport {
            clean: s.clone(),
            fid_proxy: Some(1.5),
            diversity: None,
            robustness: Perturbation::STANDARD.iter().map(|&p| (p, s.clone())).collect(),
        };
        assert_eq!(r.robustness_csv().lines().count(), 1 + Perturbation::STANDARD.len());
        assert!(r.metrics_csv().contains("fid_proxy,1.500000"));
        assert!(r.metrics_csv().contains("acc_banding,1.000000"));
        assert!(r.table().contains("css_proxy"));
    }
}
