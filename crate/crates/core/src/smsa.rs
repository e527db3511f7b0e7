//! Masked multi-head attention and the symbiotic detection block, where
//! detection-feature queries attend over `[z_gen; h_det; h_text]`.

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::tensorgrad::{Real, Tape, Var};

/// Projections of one attention block, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// One pre-norm transformer block: attention then a gelu feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct SmsaLayer {
    pub attn: MhaParams,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ff_in_w: Var,
    pub ff_in_b: Var,
    pub ff_out_w: Var,
    pub ff_out_b: Var,
}

/// `Concat(head_1..head_H) · W_O` with
/// `head_h = softmax(Q_h K_hᵀ / √d_k) V_h` over the unmasked columns.
///
/// `Q = q_tokens · W_Q`, `K = kv_tokens · W_K`, `V = kv_tokens · W_V`; tokens
/// are rows.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_tokens: Var,
    kv_tokens: Var,
    mask: &AttentionMask,
    params: &MhaParams,
) -> Result<Var> {
    let (n_q, d_model) = tape.value(q_tokens).dims2("multi_head_attention")?;
    let (n_kv, d_kv) = tape.value(kv_tokens).dims2("multi_head_attention")?;
    if d_kv != d_model {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: vec![n_q, d_model],
            rhs: vec![n_kv, d_kv],
        });
    }
    if params.heads == 0 || d_model % params.heads != 0 {
        return Err(Error::Shape {
            op: "multi_head_attention heads",
            lhs: vec![d_model],
            rhs: vec![params.heads],
        });
    }
    if mask.rows() != n_q || mask.cols() != n_kv {
        return Err(Error::Shape {
            op: "multi_head_attention mask",
            lhs: vec![n_q, n_kv],
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    let d_k = d_model / params.heads;
    let q = tape.matmul(q_tokens, params.wq)?;
    let k = tape.matmul(kv_tokens, params.wk)?;
    let v = tape.matmul(kv_tokens, params.wv)?;
    let inv_sqrt = T::one() / T::of(d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d_k, d_k)?,
                tape.slice_cols(k, h * d_k, d_k)?,
                tape.slice_cols(v, h * d_k, d_k)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let probs = tape.softmax_rows_masked(scores, Some(mask.as_slice()))?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(cat, params.wo)
}

fn feed_forward<T: Real>(tape: &mut Tape<T>, x: Var, layer: &SmsaLayer) -> Result<Var> {
    let h = tape.matmul(x, layer.ff_in_w)?;
    let h = tape.add_row(h, layer.ff_in_b)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, layer.ff_out_w)?;
    tape.add_row(h, layer.ff_out_b)
}

/// Updates the detection features of one layer:
/// `h = h_det + MHA(LN(h_det), LN([z_gen; h_det; h_text]))`, then
/// `h + FFN(LN(h))`.
///
/// `mask` holds the detection rows of the sequence mask (`n_det × n_kv`),
/// columns in concatenation order. Absent segments are simply left out of
/// the key/value set.
pub fn smsa_forward<T: Real>(
    tape: &mut Tape<T>,
    h_det: Var,
    h_text: Option<Var>,
    z_gen: Option<Var>,
    layer: &SmsaLayer,
    mask: &AttentionMask,
) -> Result<Var> {
    let n_det = tape.value(h_det).rows();
    let offset = z_gen.map_or(0, |z| tape.value(z).rows());
    let parts: Vec<Var> = z_gen.into_iter().chain([h_det]).chain(h_text).collect();
    let concat = if parts.len() == 1 {
        h_det
    } else {
        tape.concat_rows(&parts)?
    };
    let normed = tape.layernorm(concat, layer.ln1_gamma, layer.ln1_beta)?;
    let queries = if parts.len() == 1 {
        normed
    } else {
        tape.slice_rows(normed, offset, n_det)?
    };
    let attended = multi_head_attention(tape, queries, normed, mask, &layer.attn)?;
    let h = tape.add(h_det, attended)?;
    let normed2 = tape.layernorm(h, layer.ln2_gamma, layer.ln2_beta)?;
    let ff = feed_forward(tape, normed2, layer)?;
    tape.add(h, ff)
}

/// The same block applied to every token of a sequence under a square
/// mask. Detection rows of the result equal [`smsa_forward`] on the
/// corresponding mask rows.
pub fn block_forward<T: Real>(tape: &mut Tape<T>, x: Var, layer: &SmsaLayer, mask: &AttentionMask) -> Result<Var> {
    let normed = tape.layernorm(x, layer.ln1_gamma, layer.ln1_beta)?;
    let attended = multi_head_attention(tape, normed, normed, mask, &layer.attn)?;
    let h = tape.add(x, attended)?;
    let normed2 = tape.layernorm(h, layer.ln2_gamma, layer.ln2_beta)?;
    let ff = feed_forward(tape, normed2, layer)?;
    tape.add(h, ff)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::masks::{build_detection_mask, MaskOptions, SeqLayout};
    use crate::tensorgrad::{grad_check, Tensor};

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-s..s))
    }

    fn bind_mha(tape: &mut Tape<f64>, w: &[Tensor<f64>; 4], heads: usize) -> MhaParams {
        MhaParams {
            wq: tape.constant(w[0].clone()),
            wk: tape.constant(w[1].clone()),
            wv: tape.constant(w[2].clone()),
            wo: tape.constant(w[3].clone()),
            heads,
        }
    }

    fn bind_layer(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, d: usize, ff: usize, heads: usize, zero_ff: bool) -> SmsaLayer {
        let w = [
            rand_t(rng, d, d, 0.5),
            rand_t(rng, d, d, 0.5),
            rand_t(rng, d, d, 0.5),
            rand_t(rng, d, d, 0.5),
        ];
        let attn = bind_mha(tape, &w, heads);
        let scale = if zero_ff { 0.0 } else { 0.5 };
        SmsaLayer {
            attn,
            ln1_gamma: tape.constant(Tensor::full(&[1, d], 1.0)),
            ln1_beta: tape.constant(Tensor::zeros(&[1, d])),
            ln2_gamma: tape.constant(Tensor::full(&[1, d], 1.0)),
            ln2_beta: tape.constant(Tensor::zeros(&[1, d])),
            ff_in_w: tape.constant(rand_t(rng, d, ff, 0.5).map(|v| v * scale)),
            ff_in_b: tape.constant(Tensor::zeros(&[1, ff])),
            ff_out_w: tape.constant(rand_t(rng, ff, d, 0.5).map(|v| v * scale)),
            ff_out_b: tape.constant(Tensor::zeros(&[1, d])),
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::identity(2);
        let p = bind_mha(&mut tape, &[eye.clone(), eye.clone(), eye.clone(), eye], 1);
        let q = tape.constant(Tensor::from_f64(1, 2, &[1.0, 0.0]).unwrap());
        let kv = tape.constant(Tensor::from_f64(1, 2, &[5.0, 5.0]).unwrap());
        let out = multi_head_attention(&mut tape, q, kv, &AttentionMask::full(1, 1), &p).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 5.0]);
    }

    #[test]
    fn identical_keys_average_to_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let w = [
            rand_t(&mut rng, 4, 4, 1.0),
            rand_t(&mut rng, 4, 4, 1.0),
            Tensor::identity(4),
            Tensor::identity(4),
        ];
        let p = bind_mha(&mut tape, &w, 2);
        let q = tape.constant(rand_t(&mut rng, 3, 4, 1.0));
        let row = rand_t(&mut rng, 1, 4, 1.0);
        let kv_data: Vec<f64> = row.data().iter().chain(row.data()).copied().collect();
        let kv = tape.constant(Tensor::new(&[2, 4], kv_data).unwrap());
        let out = multi_head_attention(&mut tape, q, kv, &AttentionMask::full(3, 2), &p).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((tape.value(out).at(r, c) - row.at(0, c)).abs() < 1e-12);
            }
        }
    }

    /// Straight-line reference: explicit loops over heads, queries and keys.
    fn naive_mha(q: &Tensor<f64>, kv: &Tensor<f64>, w: &[Tensor<f64>; 4], heads: usize, mask: &AttentionMask) -> Tensor<f64> {
        let d = q.cols();
        let dk = d / heads;
        let proj = |x: &Tensor<f64>, m: &Tensor<f64>| {
            Tensor::from_fn(x.rows(), d, |r, c| (0..d).map(|i| x.at(r, i) * m.at(i, c)).sum())
        };
        let (qq, kk, vv) = (proj(q, &w[0]), proj(kv, &w[1]), proj(kv, &w[2]));
        let mut cat = Tensor::<f64>::zeros(&[q.rows(), d]);
        for h in 0..heads {
            for r in 0..q.rows() {
                let mut logits = vec![f64::NEG_INFINITY; kv.rows()];
                for j in 0..kv.rows() {
                    if mask.get(r, j) {
                        logits[j] = (0..dk).map(|i| qq.at(r, h * dk + i) * kk.at(j, h * dk + i)).sum::<f64>() / (dk as f64).sqrt();
                    }
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for i in 0..dk {
                    let v: f64 = (0..kv.rows()).map(|j| e[j] / z * vv.at(j, h * dk + i)).sum();
                    cat.data_mut()[r * d + h * dk + i] = v;
                }
            }
        }
        proj(&cat, &w[3])
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = [
            rand_t(&mut rng, 4, 4, 1.0),
            rand_t(&mut rng, 4, 4, 1.0),
            rand_t(&mut rng, 4, 4, 1.0),
            rand_t(&mut rng, 4, 4, 1.0),
        ];
        let q = rand_t(&mut rng, 3, 4, 1.0);
        let kv = rand_t(&mut rng, 5, 4, 1.0);
        let mask = AttentionMask::new(3, 5, (0..15).map(|i| i % 3 != 1).collect()).unwrap();
        let expected = naive_mha(&q, &kv, &w, 2, &mask);
        let mut tape = Tape::<f64>::new();
        let p = bind_mha(&mut tape, &w, 2);
        let qv = tape.constant(q);
        let kvv = tape.constant(kv);
        let out = multi_head_attention(&mut tape, qv, kvv, &mask, &p).unwrap();
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn fully_masked_query_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::identity(2);
        let p = bind_mha(&mut tape, &[eye.clone(), eye.clone(), eye.clone(), eye], 1);
        let q = tape.constant(Tensor::from_f64(1, 2, &[1.0, 0.0]).unwrap());
        let mask = AttentionMask::new(1, 1, vec![false]).unwrap();
        assert!(matches!(
            multi_head_attention(&mut tape, q, q, &mask, &p),
            Err(Error::FullyMasked { .. })
        ));
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::identity(3);
        let p = bind_mha(&mut tape, &[eye.clone(), eye.clone(), eye.clone(), eye], 2);
        let q = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            multi_head_attention(&mut tape, q, q, &AttentionMask::full(1, 1), &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn degenerate_concat_is_masked_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let layer = bind_layer(&mut tape, &mut rng, 4, 8, 2, false);
        let h = tape.constant(rand_t(&mut rng, 3, 4, 1.0));
        let mask = AttentionMask::full(3, 3);
        let a = smsa_forward(&mut tape, h, None, None, &layer, &mask).unwrap();
        let b = block_forward(&mut tape, h, &layer, &mask).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    fn layernorm_row(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    }

    #[test]
    fn three_token_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::identity(2);
        let attn = bind_mha(&mut tape, &[eye.clone(), eye.clone(), eye.clone(), eye], 1);
        let mut layer = bind_layer(&mut tape, &mut rng, 2, 4, 1, true);
        layer.attn = attn;
        let (zg, hd, ht) = ([0.3, -1.2], [0.9, 0.1], [-0.4, 0.8]);
        let z = tape.constant(Tensor::from_f64(1, 2, &zg).unwrap());
        let h = tape.constant(Tensor::from_f64(1, 2, &hd).unwrap());
        let t = tape.constant(Tensor::from_f64(1, 2, &ht).unwrap());
        let out = smsa_forward(&mut tape, h, Some(t), Some(z), &layer, &AttentionMask::full(1, 3)).unwrap();

        let rows: Vec<Vec<f64>> = [zg, hd, ht].iter().map(|r| layernorm_row(r)).collect();
        let q = &rows[1];
        let logits: Vec<f64> = rows.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z_sum: f64 = w.iter().sum();
        let expected: Vec<f64> = (0..2)
            .map(|c| hd[c] + (0..3).map(|j| w[j] / z_sum * rows[j][c]).sum::<f64>())
            .collect();
        let got = tape.value(out).data();
        for c in 0..2 {
            assert!((got[c] - expected[c]).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn detection_rows_of_block_match_smsa() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = SeqLayout::detection(3, 4, 2, 2).unwrap();
        let mask = build_detection_mask(&layout, MaskOptions::default()).unwrap();
        let mut tape = Tape::<f64>::new();
        let layer = bind_layer(&mut tape, &mut rng, 8, 16, 2, false);
        let x = rand_t(&mut rng, layout.total(), 8, 1.0);
        let xv = tape.constant(x);
        let full = block_forward(&mut tape, xv, &layer, &mask).unwrap();
        let z = tape.slice_rows(xv, 0, 3).unwrap();
        let h = tape.slice_rows(xv, 3, 4).unwrap();
        let t = tape.slice_rows(xv, 7, 4).unwrap();
        let det_mask = mask.row_slice(layout.det_range());
        let smsa = smsa_forward(&mut tape, h, Some(t), Some(z), &layer, &det_mask).unwrap();
        let det_rows = tape.slice_rows(full, 3, 4).unwrap();
        assert!(tape.value(det_rows).max_abs_diff(tape.value(smsa)) < 1e-12);
    }

    #[test]
    fn permuting_latents_with_mask_columns_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f64>::new();
        let layer = bind_layer(&mut tape, &mut rng, 4, 8, 2, false);
        let z = rand_t(&mut rng, 3, 4, 1.0);
        let h = tape.constant(rand_t(&mut rng, 2, 4, 1.0));
        // column 1 (second latent) is hidden
        let allow: Vec<bool> = (0..2).flat_map(|_| [true, false, true, true, true]).collect();
        let mask = AttentionMask::new(2, 5, allow).unwrap();
        let zv = tape.constant(z.clone());
        let a = smsa_forward(&mut tape, h, None, Some(zv), &layer, &mask).unwrap();

        let perm = [2, 0, 1];
        let zp = Tensor::from_fn(3, 4, |r, c| z.at(perm[r], c));
        let allow_p: Vec<bool> = (0..2)
            .flat_map(|r| {
                let mut row: Vec<bool> = perm.iter().map(|&p| mask.get(r, p)).collect();
                row.extend([true, true]);
                row
            })
            .collect();
        let mask_p = AttentionMask::new(2, 5, allow_p).unwrap();
        let zpv = tape.constant(zp);
        let b = smsa_forward(&mut tape, h, None, Some(zpv), &layer, &mask_p).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }

    #[test]
    fn gradient_reaches_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&mut rng, 4, 4, 0.7)).collect();
        let ffw = (rand_t(&mut rng, 4, 8, 0.5), rand_t(&mut rng, 8, 4, 0.5));
        let h = rand_t(&mut rng, 2, 4, 1.0);
        let t = rand_t(&mut rng, 2, 4, 1.0);
        let z = rand_t(&mut rng, 3, 4, 1.0);
        let f = move |tape: &mut Tape<f64>, v: &[Var]| {
            let attn = MhaParams {
                wq: tape.constant(w[0].clone()),
                wk: tape.constant(w[1].clone()),
                wv: tape.constant(w[2].clone()),
                wo: tape.constant(w[3].clone()),
                heads: 2,
            };
            let layer = SmsaLayer {
                attn,
                ln1_gamma: tape.constant(Tensor::full(&[1, 4], 1.0)),
                ln1_beta: tape.constant(Tensor::zeros(&[1, 4])),
                ln2_gamma: tape.constant(Tensor::full(&[1, 4], 1.0)),
                ln2_beta: tape.constant(Tensor::zeros(&[1, 4])),
                ff_in_w: tape.constant(ffw.0.clone()),
                ff_in_b: tape.constant(Tensor::zeros(&[1, 8])),
                ff_out_w: tape.constant(ffw.1.clone()),
                ff_out_b: tape.constant(Tensor::zeros(&[1, 4])),
            };
            let hv = tape.constant(h.clone());
            let tv = tape.constant(t.clone());
            let out = smsa_forward(tape, hv, Some(tv), Some(v[0]), &layer, &AttentionMask::full(2, 7))?;
            tape.sum(out)
        };
        let grads = crate::tensorgrad::analytic_grads(&f, std::slice::from_ref(&z)).unwrap();
        assert!(grads[0].data().iter().any(|g| g.abs() > 1e-6));
        let err = grad_check(f, &[z], 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
