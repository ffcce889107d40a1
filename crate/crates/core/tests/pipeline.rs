use febench::cnn::{cnn_forward, init_head, CnnHead, CnnHeadConfig};
use febench::encoder::{EncoderConfig, Preset};
use febench::model::Classifier;
use febench::weights::ParamMap;
use febench::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ids(rng: &mut ChaCha8Rng, valid: usize, len: usize, vocab: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..valid).map(|_| rng.random_range(4..vocab)).collect();
    ids.resize(len, 0);
    ids
}

fn full_length_logits(model: &Classifier, ids: &[usize], valid: usize) -> Vec<f32> {
    let mut tape = Tape::inference();
    let eb = model.encoder.bind(&mut tape);
    let hb = model.head.bind(&mut tape);
    let h = model.encoder.forward(&mut tape, &eb, ids, valid).unwrap();
    let y = model.head.forward(&mut tape, &hb, h, valid).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn prefix_encoding_matches_full_padded_sequence_bitwise() {
    let vocab = 300;
    let enc = Preset::BertTiny.config(vocab);
    let head = CnnHeadConfig::new(enc.hidden, 4);
    let model: Classifier = Classifier::random(enc, 5, head, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for valid in [6, 17, 40] {
        let ids = random_ids(&mut rng, valid, 200, vocab);
        let full = full_length_logits(&model, &ids, valid);
        assert_eq!(model.infer(&ids, valid).unwrap(), full, "valid length {valid}");
    }
}

#[test]
fn padding_content_never_reaches_logits() {
    let vocab = 100;
    let enc = Preset::BertTiny.config(vocab);
    let head = CnnHeadConfig::new(enc.hidden, 3);
    let model: Classifier = Classifier::random(enc, 2, head, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_ids(&mut rng, 12, 60, vocab);
    let mut noisy = ids.clone();
    for id in &mut noisy[12..] {
        *id = rng.random_range(0..vocab);
    }
    assert_eq!(
        full_length_logits(&model, &ids, 12),
        full_length_logits(&model, &noisy, 12)
    );
}

#[test]
fn frozen_scratch_path_matches_recorded_encoder() {
    let enc = EncoderConfig::transformer(1, 16, 2, 50).with_frozen(true);
    let head = CnnHeadConfig::new(16, 2);
    let model: Classifier = Classifier::random(enc, 7, head, 8).unwrap();
    let ids: Vec<usize> = (4..24).collect();
    let mut tape = Tape::new();
    let eb = model.encoder.bind(&mut tape);
    let hb = model.head.bind(&mut tape);
    let a = model.logits(&mut tape, Some(&eb), &hb, &ids, 20).unwrap();
    let b = model.logits(&mut tape, None, &hb, &ids, 20).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

/// Convolution, ReLU, max over valid windows and projection written as
/// plain loops.
fn pooled_logits_oracle(config: &CnnHeadConfig, w: &ParamMap<f64>, hidden: &[f64], valid: usize) -> Vec<f64> {
    let h = config.hidden;
    let f = config.filters;
    let mut features = Vec::new();
    for (i, &k) in config.kernel_sizes.iter().enumerate() {
        let kernel = w.get(&format!("head.conv.{i}.weight")).unwrap().data();
        let bias = w.get(&format!("head.conv.{i}.bias")).unwrap().data();
        for j in 0..f {
            let mut best = f64::NEG_INFINITY;
            for t in 0..=valid - k {
                let mut acc = bias[j];
                for dt in 0..k {
                    for c in 0..h {
                        acc += hidden[(t + dt) * h + c] * kernel[(dt * h + c) * f + j];
                    }
                }
                best = best.max(acc.max(0.0));
            }
            features.push(best);
        }
    }
    let proj = w.get("head.proj.weight").unwrap().data();
    let pb = w.get("head.proj.bias").unwrap().data();
    (0..config.classes)
        .map(|c| {
            pb[c]
                + features
                    .iter()
                    .enumerate()
                    .map(|(r, x)| x * proj[r * config.classes + c])
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn head_matches_brute_force_pooling() {
    let config = CnnHeadConfig {
        kernel_sizes: vec![2, 3, 5],
        filters: 4,
        hidden: 3,
        classes: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10 {
        let w: ParamMap<f64> = init_head(&config, seed).unwrap().cast();
        let len = 12;
        let valid = rng.random_range(5..=len);
        let hidden: Vec<f64> = (0..len * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::inference();
        let hb = w.bind(&mut tape, "head");
        let x = tape.constant(Tensor::new(vec![len, 3], hidden.clone()).unwrap());
        let y = cnn_forward(&config, &mut tape, &hb, x, valid).unwrap();
        let oracle = pooled_logits_oracle(&config, &w, &hidden, valid);
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn kernel_order_does_not_change_logits() {
    let config = CnnHeadConfig::new(8, 3);
    let weights = init_head(&config, 4).unwrap();
    let order = [2usize, 0, 3, 1];
    let permuted_cfg = CnnHeadConfig {
        kernel_sizes: order.iter().map(|&i| config.kernel_sizes[i]).collect(),
        ..config.clone()
    };
    let f = config.filters;
    let mut permuted = ParamMap::new();
    for (new, &old) in order.iter().enumerate() {
        for part in ["weight", "bias"] {
            let t = weights.get(&format!("head.conv.{old}.{part}")).unwrap().clone();
            permuted.insert(format!("head.conv.{new}.{part}"), t);
        }
    }
    let proj = weights.get("head.proj.weight").unwrap();
    let mut rows = Vec::new();
    for &old in &order {
        rows.extend_from_slice(&proj.data()[old * f * 3..(old + 1) * f * 3]);
    }
    permuted.insert("head.proj.weight", Tensor::new(proj.shape().to_vec(), rows).unwrap());
    permuted.insert("head.proj.bias", weights.get("head.proj.bias").unwrap().clone());

    let a = CnnHead::new(config, weights).unwrap();
    let b = CnnHead::new(permuted_cfg, permuted).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hidden: Vec<f32> = (0..20 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |head: &CnnHead| {
        let mut tape = Tape::inference();
        let hb = head.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![20, 8], hidden.clone()).unwrap());
        let y = head.forward(&mut tape, &hb, x, 17).unwrap();
        tape.value(y).data().to_vec()
    };
    for (x, y) in run(&a).iter().zip(run(&b)) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn short_documents_are_classified_through_padding() {
    let enc = EncoderConfig::transformer(1, 16, 2, 30);
    let head = CnnHeadConfig::new(16, 2);
    let model: Classifier = Classifier::random(enc, 1, head, 2).unwrap();
    let mut ids = vec![2, 9, 3];
    ids.resize(10, 0);
    assert_eq!(model.span(&ids, 3).unwrap(), 6);
    assert_eq!(model.infer(&ids, 3).unwrap().len(), 2);
    assert!(model.infer(&ids[..4], 3).is_err());
}
