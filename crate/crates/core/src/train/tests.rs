use super::*;
use crate::config::{from_text, KvConfig};
use crate::model::{write_checkpoint, ModelConfig};
use crate::objectives::gduf_total;
use crate::synthcorpus::{CorpusConfig, SPLIT_DET_TRAIN, SPLIT_GEN_TRAIN};

fn small_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        max_text_len: 24,
        ..ModelConfig::tiny()
    }
}

fn corpora() -> (Vec<DetSample>, Vec<GenSample>) {
    let cfg = CorpusConfig::default();
    let det = crate::synthcorpus::det_split(&cfg, 8, 1, 4, SPLIT_DET_TRAIN, 12).unwrap();
    let gen = crate::synthcorpus::gen_split(&cfg, 8, 1, SPLIT_GEN_TRAIN, 6).unwrap();
    (det, gen)
}

fn quick() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        gduf_steps: 2,
        diga_steps: 3,
        det_batch: 2,
        gen_batch: 2,
        ..TrainConfig::default()
    }
}

fn fresh() -> UnifiedModel {
    UnifiedModel::new(small_model_config(), 1).unwrap()
}

#[test]
fn gduf_is_deterministic() {
    let (det, gen) = corpora();
    let a = train_gduf(fresh(), &det, &gen, &quick(), None).unwrap();
    let b = train_gduf(fresh(), &det, &gen, &quick(), None).unwrap();
    assert_eq!(write_checkpoint(&a.model), write_checkpoint(&b.model));
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_ne!(a.model.params, fresh().params);
}

#[test]
fn zero_detection_weights_leave_detection_heads_untouched() {
    let (det, gen) = corpora();
    let cfg = TrainConfig {
        lambda_det: 0.0,
        lambda_exp: 0.0,
        ..quick()
    };
    let before = fresh();
    let out = train_gduf(before.clone(), &det, &gen, &cfg, None).unwrap();
    for name in ["det_head.w1", "det_head.b2", "text_head.w", "det_embed.w", "det_pos"] {
        let id = before.params.id(name).unwrap();
        assert_eq!(before.params.bytes_of(id), out.model.params.bytes_of(id), "{name}");
    }
    let vel = before.params.id("vel_head.w").unwrap();
    assert_ne!(before.params.bytes_of(vel), out.model.params.bytes_of(vel));
}

#[test]
fn log_has_one_row_per_step_and_no_timing_by_default() {
    let (det, gen) = corpora();
    let out = train_gduf(fresh(), &det, &gen, &quick(), None).unwrap();
    let csv = out.log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TrainLog::HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",0.001,"));
    assert!(lines[1].split(',').nth(4).unwrap().is_empty());
}

#[test]
fn non_finite_loss_aborts_with_step_and_breakdown() {
    let (det, gen) = corpora();
    let mut model = fresh();
    let id = model.params.id("vel_head.b").unwrap();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    match train_gduf(model, &det, &gen, &quick(), None) {
        Err(Error::NonFiniteLoss { step, breakdown }) => {
            assert_eq!(step, 1);
            assert!(breakdown.contains("loss_fm=NaN"), "{breakdown}");
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn gradient_is_linear_in_the_loss_weights() {
    let model = fresh();
    let (det, gen) = corpora();
    let (d, g) = (&det[1], &gen[0]);
    let trainable = model.all_trainable();
    let x0 = model.standardize(&model.encode_gen(&g.image).unwrap()).cast::<f64>();
    let eps = Tensor::<f64>::from_fn(x0.rows(), x0.cols(), |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0 - 0.5);
    let t = 0.4;
    let x_t = noise(&x0, t, &eps).unwrap();
    let target = flow_target(&x0, &x_t, &eps, model.config.flow_target).unwrap();
    let w = LossWeights {
        lambda_det: 0.7,
        lambda_exp: 1.3,
        lambda_fm: 0.4,
        lambda_diga: 0.0,
    };
    // which = Some(k) returns the gradient of term k alone
    let run = |which: Option<usize>| {
        let mut tape = Tape::<f64>::new();
        let mut s = Session::new(&mut tape, &model.params, Some(&trainable));
        let out = model.detect_forward(&mut s, &d.image, &d.instruction, Some(&d.answer)).unwrap();
        let ld = det_loss(s.tape, out.fake_logit, &[d.label as f64]).unwrap();
        let le = exp_loss(s.tape, out.answer_logits.unwrap(), &d.answer).unwrap();
        let xt = s.constant(x_t.clone());
        let gv = model.gen_forward(&mut s, xt, t, &g.caption, None).unwrap();
        let tg = s.constant(target.clone());
        let lf = fm_loss_against(s.tape, gv.velocity, tg).unwrap();
        let total = match which {
            None => gduf_total(s.tape, ld, le, lf, &w).unwrap(),
            Some(k) => [ld, le, lf][k],
        };
        s.tape.backward(total).unwrap();
        s.grads()
    };
    let full = run(None);
    let parts: Vec<_> = (0..3).map(|k| run(Some(k))).collect();
    let lambdas = [w.lambda_det, w.lambda_exp, w.lambda_fm];
    let mut worst = 0.0f64;
    for (i, f) in full.iter().enumerate() {
        let Some(f) = f else { continue };
        for (j, &v) in f.data().iter().enumerate() {
            let combined: f64 = (0..3)
                .map(|k| parts[k][i].as_ref().map_or(0.0, |g| g.data()[j]) * lambdas[k])
                .sum();
            worst = worst.max((v - combined).abs());
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

fn gduf_model() -> (UnifiedModel, Vec<DetSample>, Vec<GenSample>) {
    let (det, gen) = corpora();
    let out = train_gduf(fresh(), &det, &gen, &quick(), None).unwrap();
    (out.model, det, gen)
}

#[test]
fn alignment_leaves_frozen_parameters_byte_identical() {
    let (model, det, gen) = gduf_model();
    for freeze in [FreezePolicy::DetectorHeads, FreezePolicy::Backbone] {
        let cfg = TrainConfig { freeze, ..quick() };
        let trainable = freeze.trainable(&model);
        let out = train_diga(model.clone(), &gen, &det, &cfg).unwrap();
        let mut changed = 0;
        for id in model.params.ids() {
            let same = model.params.bytes_of(id) == out.model.params.bytes_of(id);
            if !trainable[id.0] {
                assert!(same, "{} moved under {freeze}", model.params.name(id));
            } else if !same {
                changed += 1;
            }
        }
        assert!(changed > 0);
        let diga = model.params.id("diga.w1").unwrap();
        assert_ne!(model.params.bytes_of(diga), out.model.params.bytes_of(diga));
    }
}

#[test]
fn zero_alignment_weight_leaves_projection_untouched() {
    let (model, det, gen) = gduf_model();
    let cfg = TrainConfig {
        lambda_diga: 0.0,
        ..quick()
    };
    let out = train_diga(model.clone(), &gen, &det, &cfg).unwrap();
    for name in ["diga.w1", "diga.b1", "diga.w2", "diga.b2"] {
        let id = model.params.id(name).unwrap();
        assert_eq!(model.params.bytes_of(id), out.model.params.bytes_of(id));
    }
    assert!(out.log.rows.iter().all(|r| r.loss_diga.is_none()));
}

#[test]
fn balanced_alignment_needs_fakes_and_runs_with_them() {
    let (model, det, gen) = gduf_model();
    let cfg = TrainConfig {
        balanced_diga: true,
        ..quick()
    };
    assert!(train_diga(model.clone(), &gen, &[], &cfg).is_err());
    let out = train_diga(model, &gen, &det, &cfg).unwrap();
    assert_eq!(out.log.rows.len(), 3);
}

#[test]
fn alignment_layer_out_of_range_is_rejected() {
    let (model, det, gen) = gduf_model();
    let cfg = TrainConfig {
        diga_layer: 3,
        ..quick()
    };
    assert!(matches!(train_diga(model, &gen, &det, &cfg), Err(Error::Domain(_))));
    assert_eq!(TrainConfig::default().align_layer(4).unwrap(), 2);
    assert_eq!(TrainConfig::default().align_layer(5).unwrap(), 3);
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let cfg = TrainConfig {
        lr: 3e-4,
        freeze: FreezePolicy::Backbone,
        balanced_diga: true,
        ..TrainConfig::default()
    };
    let back: TrainConfig = from_text(&cfg.to_text(), "t.cfg").unwrap();
    assert_eq!(back, cfg);
    let err = from_text::<TrainConfig>("lr = 1e-3\nwarmup = 5\n", "t.cfg").unwrap_err();
    assert_eq!(err.to_string(), "t.cfg:2: unknown key \"warmup\"");
    assert!(TrainConfig { det_batch: 0, ..TrainConfig::default() }.validate().is_err());
}
