use mcdncnn::gradcheck::random_tensor;
use mcdncnn::network::{denoise_stack, denoise_volume, load_model, loss_residual, save_model, LayerKind};
use mcdncnn::phantom::phantom;
use mcdncnn::selfcheck::model_gradients;
use mcdncnn::tensor::{batchnorm_forward, batchnorm_infer, conv2d_mc_forward, relu_forward};
use mcdncnn::{build_model, Error, Mode, Model, ModelConfig, Tensor};

fn tiny(in_channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        width: 2,
        depth: 3,
        out_channels: 1,
    }
}

fn perturbed(config: ModelConfig, seed: u64) -> Model {
    let mut model = build_model(config, seed).unwrap();
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        layer.conv.bias = random_tensor(layer.conv.bias.shape(), seed + i as u64, 0.3);
        if let Some(bn) = &mut layer.bn {
            bn.gamma = random_tensor::<f32>(&[config.width], seed + 50, 0.5).map(|g| g + 1.0);
            bn.beta = random_tensor(&[config.width], seed + 51, 0.5);
            bn.running_mean = random_tensor(&[config.width], seed + 52, 0.5);
            bn.running_var = random_tensor::<f32>(&[config.width], seed + 53, 0.5).map(|v| v + 1.0);
        }
    }
    model
}

#[test]
fn forward_matches_hand_composed_chain() {
    let model = perturbed(tiny(1), 3);
    let input = random_tensor(&[1, 4, 4, 1], 4, 1.0);
    let l = model.layers();
    assert_eq!(
        l.iter().map(|x| x.kind()).collect::<Vec<_>>(),
        [LayerKind::ConvRelu, LayerKind::ConvBnRelu, LayerKind::Conv]
    );

    let h1 = relu_forward(&conv2d_mc_forward(&input, &l[0].conv).unwrap());
    let c2 = conv2d_mc_forward(&h1, &l[1].conv).unwrap();

    // train mode: batch statistics
    let mut bn = l[1].bn.clone().unwrap();
    let (n2, _) = batchnorm_forward(&c2, &mut bn, Mode::Train).unwrap();
    let expected = conv2d_mc_forward(&relu_forward(&n2), &l[2].conv).unwrap();
    let (pred, _) = model.clone().forward(&input, Mode::Train).unwrap();
    for (a, b) in pred.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-6);
    }

    // infer mode: running statistics
    let n2 = batchnorm_infer(&c2, l[1].bn.as_ref().unwrap()).unwrap();
    let expected = conv2d_mc_forward(&relu_forward(&n2), &l[2].conv).unwrap();
    let pred = model.forward_infer(&input).unwrap();
    for (a, b) in pred.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn default_model_shapes() {
    let model = build_model(ModelConfig::default(), 1).unwrap();
    let pred = model.forward_infer(&random_tensor(&[2, 60, 60, 5], 2, 100.0)).unwrap();
    assert_eq!(pred.shape(), [2, 60, 60, 1]);
    assert!(pred.is_finite());
    let zero = model.forward_infer(&Tensor::zeros(&[1, 60, 60, 5])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn infer_forward_is_deterministic_and_pure() {
    let model = perturbed(tiny(5), 8);
    let before = model.clone();
    let input = random_tensor(&[2, 7, 5, 5], 9, 10.0);
    let a = model.forward_infer(&input).unwrap();
    let mut m = model.clone();
    let (b, _) = m.forward(&input, Mode::Infer).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(model, before);
    assert_eq!(m, before);
}

#[test]
fn train_forward_updates_only_running_statistics() {
    let model = perturbed(tiny(5), 10);
    let mut m = model.clone();
    m.forward(&random_tensor(&[2, 5, 5, 5], 11, 1.0), Mode::Train).unwrap();
    assert_eq!(m.params(), model.params());
    assert_ne!(m, model);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        for r in model_gradients::<f32>(seed).into_iter().chain(model_gradients::<f64>(seed)) {
            assert!(r.passed(), "{r}");
        }
    }
}

#[test]
fn output_bias_gradient_is_loss_gradient_sum() {
    let mut model = perturbed(tiny(5), 12);
    let input = random_tensor(&[2, 6, 6, 5], 13, 1.0);
    let (pred, cache) = model.forward(&input, Mode::Train).unwrap();
    let g = random_tensor(pred.shape(), 14, 1.0);
    let grads = model.backward(&cache, &g).unwrap();
    let tensors = grads.tensors();
    let sum: f64 = g.data().iter().map(|&v| v as f64).sum();
    assert!((tensors.last().unwrap().data()[0] as f64 - sum).abs() <= 1e-5);

    let zero = model.backward(&cache, &Tensor::zeros(pred.shape())).unwrap();
    assert!(zero.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn loss_decreases_along_negative_gradient() {
    let mut model = perturbed(tiny(5), 15);
    let input = random_tensor(&[2, 6, 6, 5], 16, 1.0);
    let noisy = random_tensor(&[2, 6, 6, 1], 17, 1.0);
    let clean = random_tensor(&[2, 6, 6, 1], 18, 1.0);
    let (pred, cache) = model.forward(&input, Mode::Train).unwrap();
    let loss = loss_residual(&pred, &noisy, &clean).unwrap();
    let grads = model.backward(&cache, &loss.gradient_wrt_prediction).unwrap();
    let grads: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
    for (p, g) in model.params_mut().into_iter().zip(&grads) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= 1e-3 * d;
        }
    }
    let (pred, _) = model.forward(&input, Mode::Train).unwrap();
    let after = loss_residual(&pred, &noisy, &clean).unwrap();
    assert!(after.value < loss.value, "{} -> {}", loss.value, after.value);
}

#[test]
fn loss_is_zero_at_target() {
    let noisy = random_tensor::<f32>(&[2, 4, 4, 1], 1, 10.0);
    let clean = random_tensor(&[2, 4, 4, 1], 2, 10.0);
    let target = Tensor::from_vec(noisy.shape(), noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect()).unwrap();
    let loss = loss_residual(&target, &noisy, &clean).unwrap();
    assert_eq!(loss.value, 0.0);
    assert!(loss.gradient_wrt_prediction.data().iter().all(|&v| v == 0.0));
    assert!(loss_residual(&target, &noisy, &Tensor::zeros(&[2, 4, 4, 2])).is_err());
}

#[test]
fn denoise_stack_identity() {
    let model = perturbed(tiny(5), 20);
    for seed in 0..5 {
        let stack = random_tensor(&[1, 6, 9, 5], 100 + seed, 1.0);
        let out = denoise_stack(&model, &stack).unwrap();
        let pred = model.forward_infer(&stack).unwrap();
        let centre = stack.channel(2).unwrap();
        for ((&o, &p), &c) in out.data().iter().zip(pred.data()).zip(centre.data()) {
            assert_eq!(o.to_bits(), (c - p).to_bits());
            assert!((o + p - c).abs() <= 1e-6, "{o} + {p} vs {c}");
        }
    }
}

#[test]
fn zero_residual_model_returns_centre_slice() {
    let mut model = build_model(tiny(5), 1).unwrap();
    let last = model.layers_mut().last_mut().unwrap();
    last.conv.kernels = Tensor::zeros(last.conv.kernels.shape());
    let stack = random_tensor(&[1, 5, 5, 5], 3, 9.0);
    assert_eq!(denoise_stack(&model, &stack).unwrap().data(), stack.channel(2).unwrap().data());

    let volume = phantom([16, 12, 9], 4).unwrap();
    let out = denoise_volume(&model, &volume).unwrap();
    assert_eq!(out.dims(), volume.dims());
    assert_eq!(out.voxels(), volume.voxels());
}

#[test]
fn denoise_rejects_wrong_channels() {
    let model = build_model(tiny(5), 1).unwrap();
    let err = denoise_stack(&model, &Tensor::zeros(&[1, 5, 5, 3])).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    let small = build_model(tiny(3), 1).unwrap();
    assert!(denoise_volume(&small, &phantom([16, 16, 8], 1).unwrap()).is_err());
}

#[test]
fn saved_model_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.mcdn");
    let model = perturbed(tiny(5), 30);
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, model);
    let input = random_tensor(&[1, 6, 6, 5], 31, 1.0);
    assert_eq!(model.forward_infer(&input).unwrap().data(), loaded.forward_infer(&input).unwrap().data());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::ModelFormat { .. })));
}
