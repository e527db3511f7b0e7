//! The finite-difference gradient suite run by `grad-check`: every tape
//! primitive, the attention blocks, and the training losses through a tiny
//! model, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::fm_loss_against;
use crate::image::Image;
use crate::masks::{build_detection_mask, AttentionMask, MaskOptions, SeqLayout};
use crate::model::{ModelConfig, Session, UnifiedModel};
use crate::objectives::{det_loss, diga_loss, diga_total, exp_loss, gduf_total, LossWeights};
use crate::smsa::{block_forward, smsa_forward, MhaParams, SmsaLayer};
use crate::tensorgrad::{grad_check, grad_check_entries, Tape, Tensor, Var};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// `sum(w ⊙ y)` with a fixed random `w`, so every output entry carries a
/// distinct, generic weight.
fn weighted(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn check_weighted(
    out: &mut Vec<CheckResult>,
    name: &str,
    seed: u64,
    out_shape: (usize, usize),
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let w = rand_t(rng, out_shape.0, out_shape.1);
    let g = move |tape: &mut Tape<f64>, v: &[Var]| {
        let y = f(tape, v)?;
        weighted(tape, y, &w)
    };
    push(out, name, seed, grad_check(g, &inputs, EPSILON)?);
    Ok(())
}

fn push(out: &mut Vec<CheckResult>, name: &str, seed: u64, err: f64) {
    out.push(CheckResult {
        name: name.to_string(),
        seed,
        max_rel_err: err,
    });
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
    for r in 0..rows {
        m[r * cols + rng.gen_range(0..cols)] = true;
    }
    m
}

/// Every tape primitive for one seed.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let a = rand_t(&mut rng, 3, 4);
    let b = rand_t(&mut rng, 4, 5);
    let c = rand_t(&mut rng, 3, 4);
    let row = rand_t(&mut rng, 1, 4);
    let r = &mut rng;

    check_weighted(&mut out, "matmul", seed, (3, 5), |t, v| t.matmul(v[0], v[1]), vec![a.clone(), b.clone()], r)?;
    check_weighted(&mut out, "add", seed, (3, 4), |t, v| t.add(v[0], v[1]), vec![a.clone(), c.clone()], r)?;
    check_weighted(&mut out, "sub", seed, (3, 4), |t, v| t.sub(v[0], v[1]), vec![a.clone(), c.clone()], r)?;
    check_weighted(&mut out, "mul", seed, (3, 4), |t, v| t.mul(v[0], v[1]), vec![a.clone(), c.clone()], r)?;
    check_weighted(&mut out, "add_row", seed, (3, 4), |t, v| t.add_row(v[0], v[1]), vec![a.clone(), row.clone()], r)?;
    check_weighted(&mut out, "scale", seed, (3, 4), |t, v| t.scale(v[0], -1.7), vec![a.clone()], r)?;
    check_weighted(&mut out, "concat_rows", seed, (6, 4), |t, v| t.concat_rows(&[v[0], v[1]]), vec![a.clone(), c.clone()], r)?;
    check_weighted(&mut out, "concat_cols", seed, (3, 8), |t, v| t.concat_cols(&[v[0], v[1]]), vec![a.clone(), c.clone()], r)?;
    check_weighted(&mut out, "slice_rows", seed, (2, 4), |t, v| t.slice_rows(v[0], 1, 2), vec![a.clone()], r)?;
    check_weighted(&mut out, "slice_cols", seed, (3, 2), |t, v| t.slice_cols(v[0], 1, 2), vec![a.clone()], r)?;
    check_weighted(&mut out, "transpose", seed, (4, 3), |t, v| t.transpose(v[0]), vec![a.clone()], r)?;
    let mask = random_mask(r, 3, 4);
    check_weighted(
        &mut out,
        "softmax_rows_masked",
        seed,
        (3, 4),
        move |t, v| t.softmax_rows_masked(v[0], Some(&mask)),
        vec![a.clone()],
        r,
    )?;
    check_weighted(&mut out, "softmax_rows", seed, (3, 4), |t, v| t.softmax_rows_masked(v[0], None), vec![a.clone()], r)?;
    let beta = rand_t(r, 1, 4);
    check_weighted(
        &mut out,
        "layernorm",
        seed,
        (3, 4),
        |t, v| t.layernorm(v[0], v[1], v[2]),
        vec![a.clone(), row.clone(), beta],
        r,
    )?;
    check_weighted(&mut out, "gelu", seed, (3, 4), |t, v| t.gelu(v[0]), vec![a.clone()], r)?;
    check_weighted(&mut out, "mean_pool_rows", seed, (1, 4), |t, v| t.mean_pool_rows(v[0]), vec![a.clone()], r)?;
    check_weighted(&mut out, "cosine", seed, (3, 1), |t, v| t.cosine(v[0], v[1]), vec![a.clone(), c.clone()], r)?;
    let ids = [2usize, 0, 2, 1];
    check_weighted(&mut out, "gather_rows", seed, (4, 4), move |t, v| t.gather_rows(v[0], &ids), vec![a.clone()], r)?;
    let targets = [3usize, 0, 1];
    let ce = move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy_logits(v[0], &targets);
    push(&mut out, "cross_entropy_logits", seed, grad_check(ce, &[a.clone()], EPSILON)?);
    let logits = rand_t(r, 4, 1);
    let bce = |t: &mut Tape<f64>, v: &[Var]| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0]);
    push(&mut out, "bce_with_logits", seed, grad_check(bce, &[logits], EPSILON)?);
    check_weighted(&mut out, "sum", seed, (1, 1), |t, v| t.sum(v[0]), vec![a.clone()], r)?;
    check_weighted(&mut out, "mean", seed, (1, 1), |t, v| t.mean(v[0]), vec![a.clone()], r)?;
    Ok(out)
}

fn layer_tensors(rng: &mut ChaCha8Rng, d: usize, ff: usize) -> Vec<Tensor<f64>> {
    let s = 1.0 / (d as f64).sqrt();
    let mut m = |r, c, scale: f64| Tensor::from_fn(r, c, |_, _| scale * rng.gen_range(-1.0..1.0));
    vec![
        m(d, d, s),
        m(d, d, s),
        m(d, d, s),
        m(d, d, s),
        Tensor::from_fn(1, d, |_, j| 1.0 + 0.1 * j as f64),
        m(1, d, 0.1),
        Tensor::from_fn(1, d, |_, j| 1.0 - 0.05 * j as f64),
        m(1, d, 0.1),
        m(d, ff, s),
        m(1, ff, 0.1),
        m(ff, d, 1.0 / (ff as f64).sqrt()),
        m(1, d, 0.1),
    ]
}

fn layer_from(v: &[Var], heads: usize) -> SmsaLayer {
    SmsaLayer {
        attn: MhaParams {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            heads,
        },
        ln1_gamma: v[4],
        ln1_beta: v[5],
        ln2_gamma: v[6],
        ln2_beta: v[7],
        ff_in_w: v[8],
        ff_in_b: v[9],
        ff_out_w: v[10],
        ff_out_b: v[11],
    }
}

/// Attention and both block forms under a real detection mask.
pub fn attention_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77E);
    let mut out = Vec::new();
    let (d, ff, heads) = (4, 6, 2);
    let layout = SeqLayout::detection(2, 2, 2, 1)?;
    let mask = build_detection_mask(&layout, MaskOptions::default())?;
    let n = layout.total();
    let x = rand_t(&mut rng, n, d);
    let params = layer_tensors(&mut rng, d, ff);

    let mut inputs = vec![x.clone()];
    inputs.extend(params.iter().take(4).cloned());
    let m = mask.clone();
    check_weighted(
        &mut out,
        "multi_head_attention",
        seed,
        (n, d),
        move |t, v| {
            let p = MhaParams {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
                heads,
            };
            crate::smsa::multi_head_attention(t, v[0], v[0], &m, &p)
        },
        inputs,
        &mut rng,
    )?;

    let mut inputs = vec![x.clone()];
    inputs.extend(params.iter().cloned());
    let m = mask.clone();
    check_weighted(
        &mut out,
        "block_forward",
        seed,
        (n, d),
        move |t, v| block_forward(t, v[0], &layer_from(&v[1..], heads), &m),
        inputs,
        &mut rng,
    )?;

    let det_rows: AttentionMask = mask.row_slice(layout.det_range());
    let (z, h, txt) = (
        rand_t(&mut rng, 2, d),
        rand_t(&mut rng, 2, d),
        rand_t(&mut rng, layout.text_len(), d),
    );
    let mut inputs = vec![z, h, txt];
    inputs.extend(params.iter().cloned());
    check_weighted(
        &mut out,
        "smsa_forward",
        seed,
        (2, d),
        move |t, v| smsa_forward(t, v[1], Some(v[2]), Some(v[0]), &layer_from(&v[3..], heads), &det_rows),
        inputs,
        &mut rng,
    )?;
    Ok(out)
}

/// Entries probed per parameter tensor in the model-level checks.
const ENTRIES_PER_INPUT: usize = 12;

fn check_model_loss(
    out: &mut Vec<CheckResult>,
    name: &str,
    seed: u64,
    model: &UnifiedModel,
    names: &[&str],
    loss: impl Fn(&mut Session<f64>) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let ids: Vec<_> = names.iter().map(|n| model.params.id(n)).collect::<Result<_>>()?;
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params.get(id).cast::<f64>()).collect();
    let mut entries = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.len() <= ENTRIES_PER_INPUT {
            entries.extend((0..t.len()).map(|j| (i, j)));
        } else {
            entries.extend((0..ENTRIES_PER_INPUT).map(|_| (i, rng.gen_range(0..t.len()))));
        }
    }
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let mut s = Session::new(tape, &model.params, None);
        for (&id, &var) in ids.iter().zip(v) {
            s.preset(id, var);
        }
        loss(&mut s)
    };
    push(out, name, seed, grad_check_entries(f, &inputs, EPSILON, &entries)?);
    Ok(())
}

fn tiny_model(seed: u64) -> Result<UnifiedModel> {
    let mut model = UnifiedModel::new(ModelConfig::tiny(), seed)?;
    // spread the weights so gradients are not dominated by near-zero entries
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.is_buffer(id) {
            continue;
        }
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3f32..0.3);
        }
    }
    Ok(model)
}

/// The training losses composed through a tiny model, with gradients
/// taken with respect to parameter tensors along each path.
pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let model = tiny_model(seed)?;
    let c = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let img = Image::new(8, 8, 1, (0..64).map(|_| rng.gen::<f32>()).collect())?;
    let (instr, answer, caption) = (vec![4usize, 5, 6], vec![7usize, 8, 2], vec![9usize, 3]);
    let label = (seed % 2) as f64;
    let x_t = rand_t(&mut rng, c.n_gen(), c.gen_dim());
    let target = rand_t(&mut rng, c.n_gen(), c.gen_dim());
    let z_d = rand_t(&mut rng, c.n_det(), c.d_model);
    let t = 0.35;
    let w = LossWeights {
        lambda_det: 0.7,
        lambda_exp: 1.3,
        lambda_fm: 0.4,
        lambda_diga: 0.5,
    };
    let mut out = Vec::new();

    let det = |s: &mut Session<f64>| -> Result<(Var, Var)> {
        let o = model.detect_forward(s, &img, &instr, Some(&answer))?;
        let ld = det_loss(s.tape, o.fake_logit, &[label])?;
        let le = exp_loss(s.tape, o.answer_logits.expect("answer given"), &answer)?;
        Ok((ld, le))
    };
    let fm = |s: &mut Session<f64>, capture: Option<usize>| -> Result<(Var, Option<Var>)> {
        let x = s.constant(x_t.clone());
        let o = model.gen_forward(s, x, t, &caption, capture)?;
        let tg = s.constant(target.clone());
        Ok((fm_loss_against(s.tape, o.velocity, tg)?, o.captured))
    };
    let align = |s: &mut Session<f64>| -> Result<(Var, Var)> {
        let (lf, zg) = fm(s, Some(1))?;
        let proj = model.diga_project(s, zg.expect("capture requested"))?;
        let zd = s.constant(z_d.clone());
        Ok((lf, diga_loss(s.tape, proj, zd)?))
    };

    let r = &mut rng;
    check_model_loss(
        &mut out,
        "det_loss",
        seed,
        &model,
        &["det_head.w1", "det_head.w2", "det_embed.w", "gen_embed.w", "layers.0.attn.wq"],
        |s| Ok(det(s)?.0),
        r,
    )?;
    check_model_loss(
        &mut out,
        "exp_loss",
        seed,
        &model,
        &["text_head.w", "tok_embed", "layers.1.attn.wv", "final_ln.g"],
        |s| Ok(det(s)?.1),
        r,
    )?;
    check_model_loss(
        &mut out,
        "fm_loss",
        seed,
        &model,
        &["vel_head.w", "gen_embed.w", "time.w", "layers.0.attn.wk"],
        |s| Ok(fm(s, None)?.0),
        r,
    )?;
    check_model_loss(
        &mut out,
        "gduf_total",
        seed,
        &model,
        &["layers.0.attn.wq", "layers.1.ln1.g", "layers.1.ff.w1", "tok_embed"],
        |s| {
            let (ld, le) = det(s)?;
            let (lf, _) = fm(s, None)?;
            gduf_total(s.tape, ld, le, lf, &w)
        },
        r,
    )?;
    check_model_loss(
        &mut out,
        "diga_loss",
        seed,
        &model,
        &["diga.w1", "diga.b2", "layers.0.ff.w2", "gen_embed.w"],
        |s| Ok(align(s)?.1),
        r,
    )?;
    check_model_loss(
        &mut out,
        "diga_total",
        seed,
        &model,
        &["diga.w2", "vel_head.w", "layers.0.attn.wo", "layers.1.attn.wq"],
        |s| {
            let (lf, la) = align(s)?;
            diga_total(s.tape, lf, la, w.lambda_diga)
        },
        r,
    )?;
    Ok(out)
}

/// The full suite over the given seeds.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(primitive_checks(seed)?);
        out.extend(attention_checks(seed)?);
        out.extend(loss_checks(seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let results = run_suite(&[0]).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(results.len() > 25);
    }
}
