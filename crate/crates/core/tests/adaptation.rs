mod common;

use fairda::adaptation::{
    estimate_attributes, run_stage1, stage1_epoch, Stage1Config, Stage1Model, Stage1Sampler,
};
use fairda::autodiff::{Graph, Matrix};
use fairda::data::Dataset;
use fairda::metrics::accuracy;
use fairda::models::{encode, hard_label, head_prob};
use fairda::optim::{shuffled_batches, RmsProp, Schedule};
use fairda::{seeded_rng, streams};

use common::{gaussian_attribute, separable, Sample};

fn short(max_epochs: usize) -> Schedule {
    Schedule {
        max_epochs,
        ..Schedule::default()
    }
}

fn agreement(a: &[u8], b: &[u8]) -> f64 {
    accuracy(a, b).unwrap()
}

#[test]
fn separable_source_is_learned_within_fifty_epochs() {
    let src = separable(1000, 1).source();
    let held_out = separable(500, 2);
    let tgt = separable(1000, 3).target();
    let mut model = Stage1Model::new(2, 0.01, 0).unwrap();
    let mut opt = RmsProp::default();
    let mut sampler = Stage1Sampler::new(0);
    let mut best = 0.0f64;
    for _ in 0..50 {
        stage1_epoch(&mut model, &src, &tgt, &mut opt, None, &mut sampler, 64).unwrap();
        let p = model.attribute_probs(&held_out.matrix()).unwrap();
        best = best.max(agreement(&hard_label(&p, 0.5), &held_out.a));
        if best > 0.95 {
            break;
        }
    }
    assert!(best > 0.95, "held-out attribute accuracy {best}");
}

#[test]
fn domain_head_is_confused_after_adversarial_training() {
    let src_sample = gaussian_attribute(2000, 4, 2, 1.0, 0.5, 0.0, 10);
    let tgt_sample = gaussian_attribute(2000, 4, 2, 1.0, 0.5, 0.5, 11);
    let (src, tgt) = (src_sample.source(), tgt_sample.target());
    let hs = gaussian_attribute(1000, 4, 2, 1.0, 0.5, 0.0, 12);
    let ht = gaussian_attribute(1000, 4, 2, 1.0, 0.5, 0.5, 13);
    let mut rows = hs.x.clone();
    rows.extend(ht.x.iter().cloned());
    let mix = Matrix::from_rows(&rows);
    let truth: Vec<u8> = (0..2000).map(|i| u8::from(i < 1000)).collect();

    let mut model = Stage1Model::new(4, 1.0, 0).unwrap();
    let mut opt = RmsProp::default();
    let mut sampler = Stage1Sampler::new(0);
    // The game oscillates, so average over the tail of training.
    let mut tail = Vec::new();
    for epoch in 0..60 {
        stage1_epoch(&mut model, &src, &tgt, &mut opt, None, &mut sampler, 64).unwrap();
        if epoch >= 50 {
            let p = model.domain_probs(&mix).unwrap();
            tail.push(agreement(&hard_label(&p, 0.5), &truth));
        }
    }
    let acc = common::mean(&tail);
    assert!((acc - 0.5).abs() <= 0.1, "domain accuracy {acc}");
}

fn split(s: &Sample, at: usize) -> (Sample, Sample) {
    let take = |r: std::ops::Range<usize>| Sample {
        x: s.x[r.clone()].to_vec(),
        y: s.y[r.clone()].to_vec(),
        a: s.a[r].to_vec(),
    };
    (take(0..at), take(at..s.x.len()))
}

fn config(max_epochs: usize) -> Stage1Config {
    Stage1Config {
        schedule: short(max_epochs),
        ..Stage1Config::default()
    }
}

#[test]
fn estimates_agree_with_truth_without_shift() {
    let s = gaussian_attribute(3000, 6, 3, 1.5, 0.5, 0.0, 20);
    let (src, rest) = split(&s, 1500);
    let (src_eval, tgt) = split(&rest, 500);
    let out = run_stage1(&src.source(), &src_eval.source(), &tgt.target(), &config(40), 0).unwrap();
    let agree = agreement(&out.estimate.a_hat, &tgt.a);
    assert!(agree > 0.9, "agreement {agree}");
    assert_eq!(out.estimate.len(), tgt.x.len());
}

#[test]
fn self_adaptation_recovers_source_proportions() {
    let s = gaussian_attribute(4000, 6, 3, 1.5, 0.3, 0.0, 30);
    let (src, rest) = split(&s, 2000);
    let (src_eval, tgt) = split(&rest, 800);
    let out = run_stage1(&src.source(), &src_eval.source(), &tgt.target(), &config(40), 1).unwrap();
    let p = &out.model.proportions;
    assert!(
        (p.pi_target_hat[1] - p.pi_source[1]).abs() <= 0.05,
        "source {:?} vs estimated target {:?}",
        p.pi_source,
        p.pi_target_hat
    );
}

#[test]
fn stage_one_is_deterministic() {
    let s = gaussian_attribute(1200, 4, 2, 1.0, 0.5, 0.0, 40);
    let (src, rest) = split(&s, 600);
    let (src_eval, tgt) = split(&rest, 200);
    let run = || {
        run_stage1(&src.source(), &src_eval.source(), &tgt.target(), &config(8), 7)
            .unwrap()
            .estimate
    };
    let (a, b) = (run(), run());
    assert_eq!(a.a_hat, b.a_hat);
    assert_eq!(a.a_prob, b.a_prob);
}

/// With no adversary strength and unit weights, the encoder and attribute
/// head follow the same path as a loop that never builds a domain head.
#[test]
fn zero_alpha_matches_plain_attribute_classifier() {
    let s = gaussian_attribute(700, 4, 2, 1.0, 0.4, 0.0, 50);
    let t = gaussian_attribute(300, 4, 2, 1.0, 0.4, 0.7, 51);
    let (src, tgt): (Dataset, Dataset) = (s.source(), t.target());
    let seed = 3;
    let epochs = 3;

    let mut model = Stage1Model::new(4, 0.0, seed).unwrap();
    let mut reference = model.clone();
    let mut opt = RmsProp::default();
    let mut sampler = Stage1Sampler::new(seed);
    for _ in 0..epochs {
        stage1_epoch(&mut model, &src, &tgt, &mut opt, Some([1.0, 1.0]), &mut sampler, 64).unwrap();
    }

    let mut opt = RmsProp::default();
    let mut rng = seeded_rng(seed, streams::STAGE1_SHUFFLE);
    let mut g = Graph::new();
    let a = src.a.as_ref().unwrap();
    for _ in 0..epochs {
        for idx in shuffled_batches(src.n(), 64, &mut rng) {
            g.reset();
            let enc = reference.encoder.bind(&mut g);
            let head = reference.attribute_head.bind(&mut g);
            let x = g.constant(src.x.select_rows(&idx).unwrap());
            let z = encode(&mut g, &enc, x).unwrap().z;
            let p = head_prob(&mut g, &head, z).unwrap();
            let targets = Matrix::column(idx.iter().map(|&i| f64::from(a[i])).collect());
            let loss = g.bce_loss(p, &targets, None).unwrap();
            g.backward(loss).unwrap();
            reference.encoder.zero_grad();
            reference.attribute_head.zero_grad();
            reference.encoder.collect_grads(&g, &enc).unwrap();
            reference.attribute_head.collect_grads(&g, &head).unwrap();
            opt.step(
                reference
                    .encoder
                    .tensors_mut()
                    .chain(reference.attribute_head.tensors_mut()),
            )
            .unwrap();
        }
    }
    assert_eq!(model.encoder, reference.encoder);
    assert_eq!(model.attribute_head, reference.attribute_head);
}

#[test]
fn untrained_estimate_covers_every_target_row() {
    let t = gaussian_attribute(37, 3, 1, 1.0, 0.5, 0.0, 60);
    let model = Stage1Model::new(3, 0.01, 0).unwrap();
    let est = estimate_attributes(&model, &t.target()).unwrap();
    assert_eq!(est.len(), 37);
    assert!(est.a_prob.iter().all(|p| (0.0..=1.0).contains(p)));
}
