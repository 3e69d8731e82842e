//! End-to-end restoration behaviour on synthesized pairs.

use smokebench_core::dcp::{dcp_desmoke, DcpConfig};
use smokebench_core::metrics::psnr;
use smokebench_core::model::{desmoke_learned, ModelConfig, ToyModel, TrainPair};
use smokebench_core::scene::tissue_scene;
use smokebench_core::synth::{composite_smoke, gen_smoke_map, oracle_restore, randomize_params, SmokeParams};
use smokebench_core::train::{evaluate_loss, train, TrainConfig};

fn pair(h: usize, w: usize, seed: u64, index: u64) -> (TrainPair, SmokeParams) {
    let clean = tissue_scene(h, w, 500 + index).quantized();
    let params = randomize_params(seed, index);
    let alpha = gen_smoke_map(h, w, &params).unwrap();
    let (smoky, smoke) = composite_smoke(&clean, &alpha, &params).unwrap();
    (
        TrainPair {
            smoky,
            clean,
            smoke,
        },
        params,
    )
}

#[test]
fn oracle_restores_unquantized_pairs_exactly() {
    for i in 0..5 {
        let (p, params) = pair(32, 40, 3, i);
        let restored = oracle_restore(&p.smoky, &params).unwrap();
        let db = psnr(restored.field(), p.clean.field()).unwrap();
        assert!(db > 80.0, "pair {i}: {db} dB");
    }
}

#[test]
fn dcp_helps_on_dense_uniform_smoke() {
    let clean = tissue_scene(64, 80, 9);
    let params = SmokeParams::neutral(0, 1.0);
    let alpha = smokebench_core::ScalarField::filled(64, 80, [0.5]);
    let (smoky, _) = composite_smoke(&clean, &alpha, &params).unwrap();
    let restored = dcp_desmoke(&smoky, &DcpConfig::default()).unwrap().restored;
    assert!(psnr(restored.field(), clean.field()).unwrap() > psnr(smoky.field(), clean.field()).unwrap());
}

#[test]
fn short_training_run_improves_held_out_loss() {
    let model_cfg = ModelConfig {
        height: 32,
        width: 40,
        ..ModelConfig::default()
    };
    let pairs: Vec<TrainPair> = (0..24).map(|i| pair(32, 40, 11, i).0).collect();
    let (train_set, held_out) = pairs.split_at(20);
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        steps: 150,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut model = ToyModel::new(model_cfg, 4).unwrap();
    let before = evaluate_loss(&model, held_out, cfg.lambda).unwrap();
    train(&mut model, train_set, &cfg).unwrap();
    let after = evaluate_loss(&model, held_out, cfg.lambda).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = ToyModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    let (a, _) = desmoke_learned(&model, &held_out[0].smoky).unwrap();
    let (b, _) = desmoke_learned(&loaded, &held_out[0].smoky).unwrap();
    assert_eq!(a, b);
}
