mod common;

use pseg::data::{encode_checkpoint, load_dataset, synth_generate, Modality, Sample};
use pseg::metrics::{fscore_from_iou, ConfusionMatrix};
use pseg::nn::{Module, ModelConfig, SegModel, Variant};
use pseg::train::*;
use pseg::{Mask, Parameter};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        stage_widths: [4, 8, 8, 8, 8],
        stage_blocks: [1, 1, 1, 1, 1],
        aspp_width: 8,
        aspp_rates: vec![1, 2],
        msffm_compression: 2,
        cam_reduction: 2,
        ..ModelConfig::default()
    }
}

fn dataset(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(n, size, seed, dir.path()).unwrap();
    load_dataset(dir.path(), Modality::Rgb).unwrap()
}

fn pothole_sample(seed: u64) -> Vec<Sample> {
    let s = dataset(8, 32, seed).into_iter().find(|s| s.mask.count(1) > 0).expect("a scene with potholes");
    vec![s]
}

#[test]
fn two_momentum_steps_match_the_unrolled_recurrence() {
    let p = Parameter::new("w", vec![2], vec![1.0, -0.5]);
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let (g1, g2) = ([0.3, -0.2], [0.1, 0.4]);
    let mut st = SgdState::default();
    p.set_grad(Some(g1.to_vec())).unwrap();
    sgd_step(std::slice::from_ref(&p), &mut st, lr, mu, wd).unwrap();
    p.set_grad(Some(g2.to_vec())).unwrap();
    sgd_step(std::slice::from_ref(&p), &mut st, lr, mu, wd).unwrap();
    for (i, w0) in [1.0f64, -0.5].into_iter().enumerate() {
        let v1 = g1[i] + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g2[i] + wd * w1;
        let w2 = w1 - lr * v2;
        assert!((p.to_vec()[i] - w2).abs() <= 1e-15);
    }
    assert_eq!(st.step, 2);
}

#[test]
fn overfitting_one_sample_reduces_the_loss() {
    let data = pothole_sample(1);
    let model = SegModel::new(&tiny_config(), Variant::CamMsffm, 0).unwrap();
    let cfg = TrainConfig { epochs: 200, lr: 0.05, eval_interval: 200, ..TrainConfig::default() };
    let h = train(&model, &data, &cfg).unwrap();
    assert_eq!(h.rows.len(), 200);
    assert!(h.final_loss().unwrap() < h.rows[0].loss, "{:?} -> {:?}", h.rows[0].loss, h.final_loss());
}

#[test]
fn training_is_deterministic() {
    let data = dataset(3, 16, 2);
    let cfg = TrainConfig { epochs: 4, eval_interval: 2, ..TrainConfig::default() };
    let run = || {
        let model = SegModel::new(&tiny_config(), Variant::CamMsffm, 3).unwrap();
        let h = train(&model, &data, &cfg).unwrap();
        (h.to_csv(), model.parameters().iter().flat_map(|p| p.to_vec()).map(f64::to_bits).collect::<Vec<_>>())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.0.starts_with("epoch,loss,miou,mfsc\n1,"));
    assert_eq!(a.0.lines().count(), 5);
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let data = pothole_sample(4);
    let model = SegModel::new(&tiny_config(), Variant::CamMsffm, 4).unwrap();
    let loss = model.forward(&data[0].image).unwrap().cross_entropy_loss(&data[0].mask, None).unwrap();
    loss.backward().unwrap();
    for p in model.parameters() {
        let g = p.grad().unwrap_or_else(|| panic!("{} has no gradient", p.name()));
        assert!(g.iter().all(|v| v.is_finite()), "{}", p.name());
    }
    let alpha = model.msffm().unwrap().alpha.grad().unwrap();
    assert!(alpha[0] != 0.0, "alpha gradient is exactly zero");
}

#[test]
fn zero_gradient_step_keeps_msffm_logits() {
    let data = dataset(1, 16, 5);
    let model = SegModel::new(&tiny_config(), Variant::Msffm, 5).unwrap();
    let before = model.forward(&data[0].image).unwrap().to_vec();
    let params = model.parameters();
    for p in &params {
        p.set_grad(Some(vec![0.0; p.numel()])).unwrap();
    }
    sgd_step(&params, &mut SgdState::default(), 0.1, 0.9, 0.0).unwrap();
    assert_eq!(model.forward(&data[0].image).unwrap().to_vec(), before);
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let data = dataset(3, 24, 6);
    let model = SegModel::new(&tiny_config(), Variant::CamMsffm, 6).unwrap();
    let hash = || crc32fast::hash(&encode_checkpoint(&model, 0, 0).unwrap());
    let before = hash();
    let a = evaluate(&model, &data).unwrap();
    let b = evaluate(&model, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(hash(), before);
    for p in model.parameters() {
        assert!(p.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)), "{} picked up a gradient", p.name());
    }
}

#[test]
fn all_background_predictor_scores_zero_on_potholes() {
    let data = dataset(6, 32, 7);
    assert!(data.iter().any(|s| s.mask.count(1) > 0));
    let model = SegModel::new(&tiny_config(), Variant::Baseline, 7).unwrap();
    model.classifier.weight.fill(0.0);
    model.classifier.bias.as_ref().unwrap().set_data(&[1.0, 0.0]).unwrap();
    let s = evaluate(&model, &data).unwrap();
    assert_eq!(s.pothole_iou, Some(0.0));
    assert_eq!(s.pothole_fsc, Some(0.0));
}

#[test]
fn evaluation_matches_the_counting_oracle() {
    let data = dataset(4, 32, 8);
    let model = SegModel::new(&tiny_config(), Variant::Cam, 8).unwrap();
    train(&model, &data, &TrainConfig { epochs: 3, eval_interval: 3, ..TrainConfig::default() }).unwrap();
    let s = evaluate(&model, &data).unwrap();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for d in &data {
        pred.extend_from_slice(model.predict(&d.image).unwrap().data());
        truth.extend_from_slice(d.mask.data());
    }
    let (miou, mfsc) = common::scores(&pred, &truth, 2);
    assert!((s.miou - miou).abs() <= 1e-12 && (s.mfsc - mfsc).abs() <= 1e-12);
}

#[test]
fn evaluation_uses_only_the_unpadded_region() {
    let mut r = common::rng(9);
    let data: Vec<f64> = common::uniform(&mut r, 3 * 10 * 12, 1.0).iter().map(|v| v.abs()).collect();
    let sample = Sample::from_planes("odd", 3, 10, 12, data, Mask::filled(10, 12, 1)).unwrap();
    let model = SegModel::new(&tiny_config(), Variant::Baseline, 9).unwrap();
    let cm = confusion(&model, &[sample]).unwrap();
    assert_eq!(cm.total(), 120);
}

#[test]
fn channel_mismatch_is_a_dimension_error() {
    let data = dataset(1, 16, 10);
    let cfg = ModelConfig { in_channels: 1, ..tiny_config() };
    let model = SegModel::new(&cfg, Variant::Baseline, 0).unwrap();
    assert!(matches!(evaluate(&model, &data), Err(pseg::Error::Dimension(_))));
}

#[test]
fn inverse_frequency_weights_count_padding_as_background() {
    let mut m = Mask::filled(2, 2, 0);
    m.set(0, 0, 1);
    let s = Sample::from_planes("a", 1, 2, 2, vec![0.0; 4], m).unwrap();
    // 64 padded pixels, 1 pothole
    let w = inverse_frequency_weights(&[s], 2);
    assert_eq!(w, vec![64.0 / (2.0 * 63.0), 32.0]);
}

#[test]
fn ablation_table_format() {
    let data = dataset(2, 16, 11);
    let cfg = TrainConfig { epochs: 1, eval_interval: 1, ..TrainConfig::default() };
    let ab = run_ablation(&tiny_config(), &cfg, &data, &data).unwrap();
    let md = ab.markdown();
    let tables: Vec<&str> = md.split("Pothole class only:").collect();
    assert_eq!(tables.len(), 2);
    for t in &tables {
        let rows: Vec<&str> = t.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Methods")).collect();
        let labels: Vec<&str> = rows.iter().map(|r| r.split('|').nth(1).unwrap().trim()).collect();
        assert_eq!(labels, ["Baseline", "Baseline + CAM", "Baseline + MSFFM", "Baseline + CAM + MSFFM (ours)"]);
        for r in rows {
            let cells: Vec<&str> = r.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
            assert_eq!(cells.len(), 3);
            assert!(cells[1].parse::<f64>().is_ok() && cells[2].parse::<f64>().is_ok());
        }
    }
    for (_, s, _) in &ab.rows {
        if let (Some(i), Some(f)) = (s.pothole_iou, s.pothole_fsc) {
            assert!((f - fscore_from_iou(i)).abs() <= 1e-12);
        }
        for c in &s.per_class {
            if let (Some(i), Some(f)) = (c.iou, c.fscore) {
                assert!((f - fscore_from_iou(i)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let data = dataset(1, 16, 12);
    let model = SegModel::new(&tiny_config(), Variant::Baseline, 0).unwrap();
    model.classifier.bias.as_ref().unwrap().set_data(&[f64::NAN, 0.0]).unwrap();
    let err = train(&model, &data, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn metrics_match_counting_oracle_on_random_masks() {
    let mut r = common::rng(13);
    for _ in 0..50 {
        use rand::Rng;
        let k = r.random_range(2..=4);
        let pred: Vec<u8> = (0..256).map(|_| r.random_range(0..k as u8)).collect();
        let truth: Vec<u8> = (0..256).map(|_| r.random_range(0..k as u8)).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&Mask::new(16, 16, pred.clone()).unwrap(), &Mask::new(16, 16, truth.clone()).unwrap()).unwrap();
        for t in 0..k {
            for p in 0..k {
                let n = pred.iter().zip(&truth).filter(|(&a, &b)| a as usize == p && b as usize == t).count();
                assert_eq!(cm.get(t, p), n as u64);
            }
        }
        let (miou, mfsc) = common::scores(&pred, &truth, k);
        assert!((cm.miou().unwrap() - miou).abs() <= 1e-12);
        assert!((cm.mfsc().unwrap() - mfsc).abs() <= 1e-12);
        assert!(cm.miou().unwrap() <= cm.mfsc().unwrap());
    }
}
