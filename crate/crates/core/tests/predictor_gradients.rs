mod support;

use ckg_core::kg_store::RelationId;
use ckg_core::predictor::{PredictorShape, RelationPredictorParams, TrainingExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

fn shape() -> PredictorShape {
    PredictorShape {
        relations: 6,
        relation_dim: 4,
        step_dim: 4,
        hidden: 4,
        max_step: 3,
    }
}

#[test]
fn gradients_match_central_differences_on_100_draws() {
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0, 0);
    for draw in 0..100u64 {
        let params = RelationPredictorParams::init(shape(), draw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let batch = random_batch(&mut rng, 6, 3, 8);
        let r = grad_check(&params, &batch, 1e-4);
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        kinks += r.kinks;
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
    assert!(kinks * 100 <= checked, "{kinks} kink crossings out of {checked}");
}

#[test]
fn sgd_step_reduces_uniform_loss() {
    let mut p = RelationPredictorParams::zeros(PredictorShape {
        relations: 2,
        ..shape()
    })
    .unwrap();
    let batch = [TrainingExample {
        prev: RelationId(0),
        step: 1,
        gold: RelationId(1),
    }];
    let before = p.loss(&batch).unwrap();
    assert!((before - std::f64::consts::LN_2).abs() < 1e-12);
    let (_, g) = p.loss_and_grad(&batch).unwrap();
    p.sgd_step(&g, 0.5).unwrap();
    assert!(p.loss(&batch).unwrap() < before);
}

#[test]
fn relation_following_rule_is_learnable() {
    // b always follows a at step 2; other transitions are noise
    let (a, b) = (RelationId(0), RelationId(3));
    let mut successes = 0;
    let trials = 20;
    for seed in 0..trials {
        let mut params = RelationPredictorParams::init(shape(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let mut batch = random_batch(&mut rng, 6, 3, 48);
        batch.retain(|e| !(e.prev == a && e.step == 2));
        batch.extend((0..16).map(|_| TrainingExample {
            prev: a,
            step: 2,
            gold: b,
        }));
        for _ in 0..500 {
            let (_, g) = params.loss_and_grad(&batch).unwrap();
            params.sgd_step(&g, 0.5).unwrap();
        }
        assert!(params.is_finite());
        if params.topm(a, 2, 1).unwrap()[0].0 == b {
            successes += 1;
        }
    }
    assert!(successes * 100 >= 95 * trials, "{successes}/{trials}");
}
