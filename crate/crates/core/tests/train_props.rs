mod common;

use common::*;
use ggcnlab::data::{generate_splits, generate_synthetic, DegreeModel, LabeledDataset, SplitSet, SynthSpec};
use ggcnlab::layers::{Model, ModelConfig, NormKind, PropagationContext};
use ggcnlab::theory::ClassFeatureModel;
use ggcnlab::train::{accuracy, train_model, Adam, TrainConfig};
use ggcnlab::{Error, Scheme, Tensor};
use proptest::prelude::*;

fn small_dataset(seed: u64) -> LabeledDataset {
    generate_synthetic(&SynthSpec {
        n: 60,
        classes: 2,
        target_h: 0.8,
        degree_model: DegreeModel::PowerLaw { exponent: 2.5, dmin: 1, dmax: 10 },
        feature_model: ClassFeatureModel::new(vec![0.4; 4], vec![1.0; 4]).unwrap(),
        seed,
    })
    .unwrap()
}

fn split_for(data: &LabeledDataset, seed: u64) -> SplitSet {
    generate_splits(&data.labels, data.num_classes, (0.48, 0.32, 0.20), &[seed]).unwrap().remove(0)
}

fn configs() -> Vec<ModelConfig> {
    let mut out = vec![
        ModelConfig::mlp(6, 0.5),
        ModelConfig::gcn(2, 6, 0.5),
        ModelConfig::gcn(3, 6, 0.5),
        ModelConfig::base(2, 6, 0.5),
        ModelConfig::ggcn(2, 6, 0.5),
    ];
    for norm in [NormKind::BatchNorm, NormKind::LayerNorm] {
        let mut g = ModelConfig::ggcn(2, 6, 0.5);
        g.norm = norm;
        out.push(g);
        let mut c = ModelConfig::gcn(2, 6, 0.5);
        c.norm = norm;
        out.push(c);
    }
    out
}

/// Masked cross-entropy of the model in eval mode, with its gradient.
fn loss_and_grad(model: &Model, ctx: &PropagationContext, data: &LabeledDataset, mask: &[bool]) -> (f64, Vec<Tensor>) {
    let fwd = model.forward(ctx, &data.features, false, &mut rng(0)).unwrap();
    let mut tape = fwd.tape;
    let loss = tape.cross_entropy_masked(fwd.logits, &data.labels, mask).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = fwd.params.iter().flat_map(|l| l.values()).map(|&v| grads.wrt(v)).collect();
    (tape.value(loss).item().unwrap(), g)
}

#[test]
fn model_loss_gradient_is_the_cross_entropy_gradient() {
    let data = small_dataset(3);
    let split = split_for(&data, 3);
    let mask = SplitSet::mask(&split.train, data.num_nodes());
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    for (k, cfg) in configs().into_iter().enumerate() {
        let mut model = Model::new(cfg.clone(), 4, 2, &mut rng(k as u64)).unwrap();
        let (_, grads) = loss_and_grad(&model, &ctx, &data, &mask);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let n_layers = model.layers.len();
        let mut slot = 0;
        for l in 0..n_layers {
            let names: Vec<String> = model.layers[l].keys().cloned().collect();
            for name in names {
                let len = model.layers[l][&name].len();
                for idx in (0..len).step_by(3) {
                    let orig = model.layers[l][&name].data()[idx];
                    model.layers[l].get_mut(&name).unwrap().data_mut()[idx] = orig + h;
                    let up = loss_and_grad(&model, &ctx, &data, &mask).0;
                    model.layers[l].get_mut(&name).unwrap().data_mut()[idx] = orig - h;
                    let down = loss_and_grad(&model, &ctx, &data, &mask).0;
                    model.layers[l].get_mut(&name).unwrap().data_mut()[idx] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = grads[slot].data()[idx];
                    worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
                }
                slot += 1;
            }
        }
        assert!(worst <= 1e-5, "{:?} {:?}: {worst:e}", cfg.arch, cfg.norm);
    }
}

#[test]
fn weight_decay_adds_a_linear_term_to_the_step() {
    let mut r = rng(9);
    let w0 = random_tensor(3, 4, &mut r);
    let g = random_tensor(3, 4, &mut r);
    let wd = 0.3;

    let mut with_decay = w0.clone();
    let mut adam = Adam::new(&TrainConfig { weight_decay: wd, ..TrainConfig::default() });
    adam.step([&mut with_decay], std::slice::from_ref(&g)).unwrap();

    let folded = Tensor::from_fn(3, 4, |i, j| g.get(i, j) + wd * w0.get(i, j));
    let mut plain = w0.clone();
    let mut adam = Adam::new(&TrainConfig { weight_decay: 0.0, ..TrainConfig::default() });
    adam.step([&mut plain], &[folded]).unwrap();
    assert_eq!(with_decay, plain);
}

#[test]
fn early_stopping_restores_the_best_validation_epoch() {
    for seed in 0..4 {
        let data = small_dataset(seed);
        let split = split_for(&data, seed);
        let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
        let cfg = TrainConfig { max_epochs: 80, patience: 15, seed, ..TrainConfig::default() };
        for model_cfg in [ModelConfig::gcn(2, 8, 0.5), ModelConfig::ggcn(2, 8, 0.5)] {
            let trained = train_model(&model_cfg, &data, &split, &cfg, &ctx).unwrap();
            let res = &trained.result;
            let hist = &res.val_history;
            assert_eq!(hist.len(), res.epochs_run);
            let max = hist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = hist.iter().position(|&v| v == max).unwrap() + 1;
            assert_eq!(res.best_val_accuracy, max);
            assert_eq!(res.best_epoch, first);
            if res.epochs_run < cfg.max_epochs {
                assert_eq!(res.epochs_run - res.best_epoch, cfg.patience);
            }
            let fwd = trained.model.forward(&ctx, &data.features, false, &mut rng(0)).unwrap();
            let pred = fwd.tape.value(fwd.logits).argmax_rows();
            assert_eq!(accuracy(&pred, &data.labels, &split.val), max);
        }
    }
}

#[test]
fn exploding_updates_raise_diverged_loss() {
    let data = small_dataset(1);
    let split = split_for(&data, 1);
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    let cfg = TrainConfig { lr: 1e300, max_epochs: 50, ..TrainConfig::default() };
    let err = train_model(&ModelConfig::gcn(2, 8, 0.0), &data, &split, &cfg, &ctx).unwrap_err();
    assert!(matches!(err, Error::DivergedLoss { .. }), "{err:?}");
}

#[test]
fn training_is_reproducible() {
    let data = small_dataset(2);
    let split = split_for(&data, 2);
    let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
    let cfg = TrainConfig { max_epochs: 30, seed: 5, ..TrainConfig::default() };
    let a = train_model(&ModelConfig::ggcn(2, 8, 0.5), &data, &split, &cfg, &ctx).unwrap();
    let b = train_model(&ModelConfig::ggcn(2, 8, 0.5), &data, &split, &cfg, &ctx).unwrap();
    assert_eq!(a.result, b.result);
    assert_eq!(a.model, b.model);
}

proptest! {
    #[test]
    fn argmax_takes_the_lowest_tied_index(values in proptest::collection::vec(0..3i32, 1..12)) {
        let row: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let t = Tensor::row_vector(&row).unwrap();
        let max = values.iter().max().unwrap();
        let want = values.iter().position(|v| v == max).unwrap();
        prop_assert_eq!(t.argmax_rows(), vec![want]);
    }

    #[test]
    fn training_either_stays_finite_or_reports_divergence(
        lr in prop_oneof![Just(1e-3), Just(1e-1), Just(1e3), Just(1e150)],
        seed in 0..4u64,
    ) {
        let data = small_dataset(seed);
        let split = split_for(&data, seed);
        let ctx = PropagationContext::new(&data.graph, Scheme::Renormalized);
        let cfg = TrainConfig { lr, max_epochs: 15, seed, ..TrainConfig::default() };
        match train_model(&ModelConfig::base(2, 6, 0.0), &data, &split, &cfg, &ctx) {
            Ok(t) => {
                prop_assert!(t.model.layers.iter().flat_map(|l| l.values()).all(Tensor::is_finite));
                prop_assert!((0.0..=1.0).contains(&t.result.test_accuracy));
            }
            Err(Error::DivergedLoss { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {e:?}"),
        }
    }
}
