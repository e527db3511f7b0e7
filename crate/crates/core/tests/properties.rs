use gendet::eval::{frechet_distance, rouge_l};
use gendet::flow::{euler_step, flow_target, noise, FlowTarget};
use gendet::masks::{build_detection_mask, build_generation_mask, MaskOptions, SeqLayout};
use gendet::objectives::{det_loss, diga_loss};
use gendet::tensorgrad::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::from_f64(rows, cols, &v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_sum_to_one(x in matrix(4, 5), bits in prop::collection::vec(any::<bool>(), 20), keep in 0usize..5) {
        let mut mask = bits;
        for r in 0..4 {
            mask[r * 5 + keep] = true;
        }
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let y = tape.softmax_rows_masked(v, Some(&mask)).unwrap();
        let y = tape.value(y);
        for r in 0..4 {
            let mut total = 0.0;
            for c in 0..5 {
                let p = y.at(r, c);
                if mask[r * 5 + c] {
                    total += p;
                } else {
                    prop_assert_eq!(p, 0.0);
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_rows_never_see_detection_or_text(g in 1usize..6, d in 1usize..6, i in 1usize..5, a in 0usize..5, smsa: bool, text: bool) {
        let layout = SeqLayout::detection(g, d, i, a).unwrap();
        let opts = MaskOptions { smsa, text_in_smsa: text };
        let m = build_detection_mask(&layout, opts).unwrap();
        for r in 0..g {
            for c in g..layout.total() {
                prop_assert!(!m.get(r, c));
            }
        }
        m.validate().unwrap();
        prop_assert_eq!(m, build_detection_mask(&layout, opts).unwrap());
    }

    #[test]
    fn generation_latents_are_dense_and_caption_lower_triangular(caption in 0usize..6, latents in 1usize..6) {
        let m = build_generation_mask(&SeqLayout::generation(caption, latents).unwrap()).unwrap();
        for r in caption..caption + latents {
            for c in 0..caption + latents {
                prop_assert!(m.get(r, c));
            }
        }
        for r in 0..caption {
            for c in 0..caption {
                prop_assert_eq!(m.get(r, c), c <= r);
            }
        }
    }

    #[test]
    fn noise_is_affine(x0 in matrix(2, 3), eps in matrix(2, 3), t in 0.0f64..=1.0, a in -4.0f64..4.0) {
        let scale = |m: &Tensor<f64>| Tensor::from_fn(m.rows(), m.cols(), |r, c| a * m.at(r, c));
        let lhs = noise(&scale(&x0), t, &scale(&eps)).unwrap();
        let rhs = scale(&noise(&x0, t, &eps).unwrap());
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn one_oracle_step_recovers_the_data(x0 in matrix(3, 4), eps in matrix(3, 4), t in 0.01f64..=1.0, velocity: bool) {
        let kind = if velocity { FlowTarget::Velocity } else { FlowTarget::Literal };
        let xt = noise(&x0, t, &eps).unwrap();
        let v = flow_target(&x0, &xt, &eps, kind).unwrap();
        let back = euler_step(&xt, &v, t, 0.0, kind).unwrap();
        for (p, q) in back.data().iter().zip(x0.data()) {
            prop_assert!((p - q).abs() < 1e-9, "{} vs {}", p, q);
        }
    }

    #[test]
    fn detection_loss_is_label_sign_symmetric(logits in prop::collection::vec(-8.0f64..8.0, 1..6), seed: u64) {
        let labels: Vec<f64> = (0..logits.len()).map(|i| ((seed >> i) & 1) as f64).collect();
        let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
        let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(logits.len(), 1, &logits).unwrap());
        let b = tape.constant(Tensor::from_f64(neg.len(), 1, &neg).unwrap());
        let la = det_loss(&mut tape, a, &labels).unwrap();
        let lb = det_loss(&mut tape, b, &flipped).unwrap();
        prop_assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_ignores_positive_row_scaling(p in matrix(3, 4), z in matrix(3, 4), s in prop::collection::vec(0.1f64..10.0, 3)) {
        prop_assume!((0..3).all(|r| p.row(r).iter().any(|v| v.abs() > 1e-3) && z.row(r).iter().any(|v| v.abs() > 1e-3)));
        let scaled = Tensor::from_fn(3, 4, |r, c| s[r] * p.at(r, c));
        let mut tape = Tape::<f64>::new();
        let (pv, sv, zv) = (tape.constant(p), tape.constant(scaled), tape.constant(z));
        let a = diga_loss(&mut tape, pv, zv).unwrap();
        let b = diga_loss(&mut tape, sv, zv).unwrap();
        prop_assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-9);
    }

    #[test]
    fn rouge_is_symmetric(a in prop::collection::vec(0usize..6, 0..10), b in prop::collection::vec(0usize..6, 0..10)) {
        prop_assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() < 1e-12);
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_itself(a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..12), shift in -1.0f64..1.0) {
        let b: Vec<Vec<f64>> = a.iter().rev().map(|r| r.iter().enumerate().map(|(j, v)| v * (1.0 + 0.1 * j as f64) + shift).collect()).collect();
        prop_assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-6, "{} vs {}", ab, ba);
        prop_assert!(ab >= -1e-9);
    }
}
