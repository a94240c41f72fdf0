//! The composite model through the public API: a few plain SGD steps on one
//! batch, then stripping and a checkpoint round trip.

use bgdb_core::block::{BgdbConfig, CompositeModel, DenoiserConfig, TaskLoss};
use bgdb_core::nets::{Backbone, BackboneConfig, Module, ParamStore, UNetConfig};
use bgdb_core::rng;
use bgdb_core::tensor::no_grad;
use bgdb_core::Tensor;

fn sgd(store: &mut ParamStore, lr: f64) {
    let values = store
        .tensors()
        .iter()
        .map(|t| {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            t.data().iter().zip(&g).map(|(p, g)| p - lr * g).collect()
        })
        .collect();
    store.set_values(values).unwrap();
}

fn model() -> CompositeModel {
    let backbone = Backbone::new(
        &BackboneConfig::Segmentation(UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 2,
            depth: 1,
            channel_mult: 2,
            time_dim: None,
        }),
        4,
    )
    .unwrap();
    let config = BgdbConfig {
        horizon: 25,
        logit_side: 4,
        denoiser: DenoiserConfig { base_channels: 2, depth: 1, time_dim: 4, channel_mult: 1 },
        ..BgdbConfig::default()
    };
    CompositeModel::new(backbone, config, 5).unwrap()
}

#[test]
fn descent_lowers_the_composite_loss() {
    let mut m = model();
    let x = Tensor::randn(&[2, 1, 8, 8], &mut rng::stream(1, 0));
    let y = Tensor::new(x.data().iter().map(|&v| f64::from(v > 0.0)).collect(), x.shape()).unwrap();
    let total = |m: &CompositeModel| {
        no_grad(|| m.loss(&x, &y, TaskLoss::CrossEntropy, &mut rng::stream(1, 1))).unwrap().breakdown.total
    };
    let before = total(&m);
    for _ in 0..5 {
        let loss = m.loss(&x, &y, TaskLoss::CrossEntropy, &mut rng::stream(1, 1)).unwrap();
        loss.total.backward().unwrap();
        sgd(m.backbone.params_mut(), 1e-5);
        sgd(m.denoiser.params_mut(), 1e-5);
    }
    let after = total(&m);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn stripped_backbone_survives_a_checkpoint() {
    let m = model();
    let x = Tensor::randn(&[3, 1, 8, 8], &mut rng::stream(2, 0));
    let composite = m.backbone_logits(&x).unwrap();
    let full = m.num_params();
    let backbone = m.strip_for_inference();
    assert!(backbone.num_params() < full);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.bin");
    backbone.save(&path).unwrap();
    let reloaded = Backbone::load(&path).unwrap();
    assert_eq!(reloaded.forward(&x).unwrap().data(), composite.data());
}
