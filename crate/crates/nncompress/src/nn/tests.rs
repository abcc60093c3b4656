use super::*;
use crate::harness::data::{synthetic_blobs, BlobSpec, Dataset, Split};
use crate::tensor::rand_normal;

fn blob_data(seed: u64, classes: usize, noise: f64, train: usize, test: usize) -> (Dataset, Dataset) {
    synthetic_blobs(
        &BlobSpec {
            classes,
            shape: (1, 8, 8),
            noise,
            seed,
        },
        train,
        test,
    )
    .unwrap()
}

fn small_model(seed: u64) -> Model {
    let mut rng = Rng::new(seed);
    snn_student((1, 8, 8), 4, 8, &mut rng).unwrap()
}

#[test]
fn zero_weights_give_zero_logits() {
    let model = Model {
        layers: vec![
            Layer::conv2d(
                Tensor::zeros(&[1, 3, 3, 2]).unwrap(),
                Tensor::zeros(&[2]).unwrap(),
            )
            .unwrap(),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense(
                Tensor::zeros(&[2 * 16, 3]).unwrap(),
                Tensor::zeros(&[3]).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (1, 4, 4),
        num_classes: 3,
    };
    let mut rng = Rng::new(1);
    let x = rand_normal(&mut rng, &[2, 1, 4, 4], 0.0, 1.0).unwrap();
    let logits = model.forward(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_by_one_conv_is_channel_mix() {
    // 1x1 kernels reduce convolution to a per-pixel channel mix; with a
    // diagonal mixing matrix the output channels are scaled inputs.
    let weight = Tensor::new(&[2, 1, 1, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
    let model = Model {
        layers: vec![
            Layer::conv2d(weight, Tensor::zeros(&[2]).unwrap()).unwrap(),
            Layer::Flatten,
        ],
        input_shape: (2, 1, 1),
        num_classes: 2,
    };
    let x = Tensor::new(&[1, 2, 1, 1], vec![5.0, 7.0]).unwrap();
    let y = model.forward(&x).unwrap();
    assert_eq!(y.data(), &[10.0, 21.0]);
}

/// Independent scalar-by-scalar evaluation of conv -> relu -> maxpool ->
/// flatten -> dense, written directly from the definitions.
fn oracle_forward(
    x: &[f64], // 1x4x4
    conv_w: &[f64], // (1,3,3,2)
    conv_b: &[f64],
    dense_w: &[f64], // (8, 2)
    dense_b: &[f64],
) -> Vec<f64> {
    let (h, w, n) = (4usize, 4usize, 2usize);
    // conv, cross-correlation with zero padding 1
    let mut conv = vec![0.0; n * h * w];
    for oc in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = conv_b[oc];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let iy = y as isize + dy as isize - 1;
                        let ix = xx as isize + dx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc += x[iy as usize * w + ix as usize]
                            * conv_w[(dy * 3 + dx) * n + oc];
                    }
                }
                conv[(oc * h + y) * w + xx] = acc.max(0.0); // fused relu
            }
        }
    }
    // 2x2 max pool
    let (ph, pw) = (h / 2, w / 2);
    let mut pooled = vec![0.0; n * ph * pw];
    for oc in 0..n {
        for y in 0..ph {
            for xx in 0..pw {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(conv[(oc * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                pooled[(oc * ph + y) * pw + xx] = best;
            }
        }
    }
    // dense over the flattened 2*2*2 = 8 features
    let mut out = vec![0.0; 2];
    for (j, o) in out.iter_mut().enumerate() {
        *o = dense_b[j];
        for (i, &p) in pooled.iter().enumerate() {
            *o += p * dense_w[i * 2 + j];
        }
    }
    out
}

#[test]
fn forward_matches_hand_oracle() {
    let mut rng = Rng::new(202);
    let x = rand_normal(&mut rng, &[1, 1, 4, 4], 0.0, 1.0).unwrap();
    let conv_w = rand_normal(&mut rng, &[1, 3, 3, 2], 0.0, 0.7).unwrap();
    let conv_b = rand_normal(&mut rng, &[2], 0.0, 0.4).unwrap();
    let dense_w = rand_normal(&mut rng, &[8, 2], 0.0, 0.7).unwrap();
    let dense_b = rand_normal(&mut rng, &[2], 0.0, 0.4).unwrap();
    let model = Model {
        layers: vec![
            Layer::conv2d(conv_w.clone(), conv_b.clone()).unwrap(),
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            Layer::dense(dense_w.clone(), dense_b.clone()).unwrap(),
        ],
        input_shape: (1, 4, 4),
        num_classes: 2,
    };
    let got = model.forward(&x).unwrap();
    let expected = oracle_forward(
        x.data(),
        conv_w.data(),
        conv_b.data(),
        dense_w.data(),
        dense_b.data(),
    );
    for (g, e) in got.data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let model = small_model(3);
    let bad = Tensor::zeros(&[2, 1, 7, 8]).unwrap();
    assert!(matches!(model.forward(&bad), Err(Error::Dimension(_))));
}

#[test]
fn backward_zero_grad_logits_gives_zero_gradients() {
    let mut rng = Rng::new(5);
    let model = small_model(4);
    let x = rand_normal(&mut rng, &[3, 1, 8, 8], 0.5, 0.2).unwrap();
    let (logits, cache) = model.forward_train(&x).unwrap();
    let zeros = Tensor::zeros(logits.shape()).unwrap();
    let grads = model.backward(&cache, &zeros).unwrap();
    for (_, g) in grads.iter() {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

/// Central finite differences over every parameter of a model against the
/// cross-entropy loss.
fn check_gradients(model: &Model, x: &Tensor, labels: &[u32], tol: f64) {
    let (logits, cache) = model.forward_train(x).unwrap();
    let (_, grad_logits) = cross_entropy(&logits, labels).unwrap();
    let grads = model.backward(&cache, &grad_logits).unwrap();
    let eps = 1e-5;
    let loss_of = |m: &Model| -> f64 {
        let (logits, _) = m.forward_train(x).unwrap();
        cross_entropy(&logits, labels).unwrap().0
    };
    for (name, param) in model.parameters() {
        let analytic = grads.get(&name).unwrap();
        for i in 0..param.numel() {
            let mut plus = model.clone();
            plus.parameter_mut(&name).unwrap().data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.parameter_mut(&name).unwrap().data_mut()[i] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let g = analytic.data()[i];
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            assert!(err < tol, "{name}[{i}]: fd {fd} vs analytic {g} (rel {err:.2e})");
        }
    }
}

#[test]
fn dense_model_gradients_match_finite_differences() {
    let mut rng = Rng::new(6);
    let model = Model {
        layers: vec![
            Layer::Flatten,
            Layer::dense(
                rand_normal(&mut rng, &[16, 8], 0.0, 0.5).unwrap(),
                rand_normal(&mut rng, &[8], 0.0, 0.1).unwrap(),
            )
            .unwrap(),
            Layer::Relu,
            Layer::dense(
                rand_normal(&mut rng, &[8, 3], 0.0, 0.5).unwrap(),
                rand_normal(&mut rng, &[3], 0.0, 0.1).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (1, 4, 4),
        num_classes: 3,
    };
    let x = rand_normal(&mut rng, &[4, 1, 4, 4], 0.0, 1.0).unwrap();
    check_gradients(&model, &x, &[0, 2, 1, 2], 1e-4);
}

#[test]
fn conv_batchnorm_gradients_match_finite_differences() {
    let mut rng = Rng::new(7);
    let model = Model {
        layers: vec![
            Layer::conv2d(
                rand_normal(&mut rng, &[1, 3, 3, 3], 0.0, 0.5).unwrap(),
                rand_normal(&mut rng, &[3], 0.0, 0.1).unwrap(),
            )
            .unwrap(),
            Layer::BatchNorm(BatchNormParams::identity(3).unwrap()),
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            Layer::dense(
                rand_normal(&mut rng, &[3 * 4, 2], 0.0, 0.5).unwrap(),
                rand_normal(&mut rng, &[2], 0.0, 0.1).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (1, 4, 4),
        num_classes: 2,
    };
    let x = rand_normal(&mut rng, &[3, 1, 4, 4], 0.0, 1.0).unwrap();
    check_gradients(&model, &x, &[0, 1, 1], 1e-4);
}

#[test]
fn sgd_step_zero_learning_rate_is_identity() {
    // sgd_step itself accepts any rate; the training loop is what requires a
    // positive one.
    let model = small_model(8);
    let mut stepped = model.clone();
    let x = Tensor::zeros(&[1, 1, 8, 8]).unwrap();
    let (logits, cache) = stepped.forward_train(&x).unwrap();
    let (_, grad_logits) = cross_entropy(&logits, &[1]).unwrap();
    let grads = stepped.backward(&cache, &grad_logits).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 1,
        steps: 1,
        seed: 0,
        weight_decay: 0.0,
    };
    sgd_step(&mut stepped, &grads, &cfg).unwrap();
    assert_eq!(stepped, model);
}

#[test]
fn sgd_step_hand_case() {
    // w = 1.0, grad = 2.0, lr = 0.1, no decay: descent lands on 0.8.
    let mut model = Model {
        layers: vec![
            Layer::Flatten,
            Layer::dense(
                Tensor::new(&[1, 1], vec![1.0]).unwrap(),
                Tensor::zeros(&[1]).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (1, 1, 1),
        num_classes: 1,
    };
    let mut grads = Gradients::default();
    grads.insert("1.weight".into(), Tensor::new(&[1, 1], vec![2.0]).unwrap());
    grads.insert("1.bias".into(), Tensor::zeros(&[1]).unwrap());
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 1,
        steps: 1,
        seed: 0,
        weight_decay: 0.0,
    };
    sgd_step(&mut model, &grads, &cfg).unwrap();
    let Layer::Dense { weight, .. } = &model.layers[1] else {
        unreachable!()
    };
    assert!((weight.data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn sgd_step_key_mismatch_is_state_error() {
    let mut model = small_model(9);
    let grads = Gradients::default();
    assert!(matches!(
        sgd_step(&mut model, &grads, &TrainConfig {
            learning_rate: 0.1,
            batch_size: 1,
            steps: 1,
            seed: 0,
            weight_decay: 0.0,
        }),
        Err(Error::State(_))
    ));
}

#[test]
fn masked_entry_stays_zero_after_step() {
    use crate::prune::{apply_mask, magnitude_prune, PruneMask};
    let (data, _) = blob_data(10, 4, 0.3, 32, 8);
    let model = small_model(10);
    let mut mask = PruneMask::default();
    for (name, w) in model.weight_tensors() {
        mask.insert(name, magnitude_prune(w, 0.5, None).unwrap())
            .unwrap();
    }
    let mut pruned = model;
    apply_mask(&mut pruned, &mask).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        steps: 3,
        seed: 11,
        weight_decay: 0.0,
    };
    let mask_ref = &mask;
    let mut hook = |_: usize, m: &mut Model| apply_mask(m, mask_ref);
    let out = train(pruned, &data, &cfg, &mut [&mut hook]).unwrap();
    for (name, w) in out.model.weight_tensors() {
        let m = mask.get(&name).unwrap();
        for (&v, &keep) in w.data().iter().zip(m.data()) {
            if keep == 0.0 {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn train_runs_exactly_the_requested_steps() {
    let (data, _) = blob_data(12, 4, 0.3, 32, 8);
    let model = small_model(12);
    let before = model.clone();
    let mut hook_calls = 0usize;
    let mut hook = |step: usize, _: &mut Model| {
        hook_calls += 1;
        assert_eq!(step, hook_calls);
        Ok(())
    };
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        steps: 1,
        seed: 1,
        weight_decay: 0.0,
    };
    let out = train(model, &data, &cfg, &mut [&mut hook]).unwrap();
    assert_eq!(hook_calls, 1);
    assert_eq!(out.loss_trace.len(), 1);
    assert_ne!(out.model, before, "one step must change the weights");
}

#[test]
fn train_is_bit_deterministic() {
    let (data, _) = blob_data(13, 4, 0.5, 64, 8);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        steps: 25,
        seed: 99,
        weight_decay: 1e-4,
    };
    let a = train(small_model(13), &data, &cfg, &mut []).unwrap();
    let b = train(small_model(13), &data, &cfg, &mut []).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn train_loss_eventually_decreases() {
    let (data, _) = blob_data(14, 3, 0.4, 120, 8);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 16,
        steps: 200,
        seed: 3,
        weight_decay: 0.0,
    };
    let out = train(small_model(14), &data, &cfg, &mut []).unwrap();
    let k = out.loss_trace.len() / 10;
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let head = median(&out.loss_trace[..k]);
    let tail = median(&out.loss_trace[out.loss_trace.len() - k..]);
    assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
}

#[test]
fn hook_failure_aborts_with_context() {
    let (data, _) = blob_data(15, 3, 0.4, 24, 8);
    let mut hook = |step: usize, _: &mut Model| -> Result<()> {
        if step == 2 {
            Err(Error::Parameter("boom".into()))
        } else {
            Ok(())
        }
    };
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        steps: 5,
        seed: 3,
        weight_decay: 0.0,
    };
    let err = train(small_model(15), &data, &cfg, &mut [&mut hook]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("step 2") && msg.contains("boom"), "{msg}");
}

#[test]
fn empty_dataset_rejected_by_validation() {
    // Dataset construction refuses empty splits, which is what guarantees
    // train's non-empty precondition.
    let images = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
    assert!(Dataset::new(images, vec![], 2, Split::Train).is_err());
}

#[test]
fn evaluate_constant_predictor_on_single_class_data() {
    // Bias pins the argmax to class 0; all labels are 0.
    let model = Model {
        layers: vec![
            Layer::Flatten,
            Layer::dense(
                Tensor::zeros(&[4, 2]).unwrap(),
                Tensor::new(&[2], vec![1.0, 0.0]).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (1, 2, 2),
        num_classes: 2,
    };
    let mut rng = Rng::new(16);
    let images = rand_normal(&mut rng, &[20, 1, 2, 2], 0.5, 0.1).unwrap();
    let data = Dataset::new(images.map(|v| v.clamp(0.0, 1.0)), vec![0; 20], 2, Split::Test).unwrap();
    assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
}

#[test]
fn evaluate_random_labels_is_near_chance() {
    // With labels independent of the images, any fixed predictor is a
    // Bernoulli(1/10) guesser; 4 sigma over 10^4 samples is about +/- 0.012.
    let mut rng = Rng::new(17);
    let count = 10_000;
    let images = rand_normal(&mut rng, &[count, 1, 8, 8], 0.5, 0.25).unwrap();
    let labels: Vec<u32> = (0..count).map(|_| rng.next_below(10) as u32).collect();
    let data = Dataset::new(images.map(|v| v.clamp(0.0, 1.0)), labels, 10, Split::Test).unwrap();
    let mut init_rng = Rng::new(18);
    let model = snn_student((1, 8, 8), 10, 12, &mut init_rng).unwrap();
    let acc = evaluate(&model, &data).unwrap();
    assert!((0.06..=0.14).contains(&acc), "accuracy {acc} outside chance band");
}

#[test]
fn evaluate_perfect_memorizer() {
    // Noise-free blobs are trivially memorizable; train accuracy reaches 1.
    let (data, _) = blob_data(19, 2, 0.0, 8, 2);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 4,
        steps: 120,
        seed: 5,
        weight_decay: 0.0,
    };
    let out = train(small_model(19), &data, &cfg, &mut []).unwrap();
    assert_eq!(evaluate(&out.model, &data).unwrap(), 1.0);
}

#[test]
fn forward_is_batch_consistent() {
    // Evaluating a batch equals evaluating its rows independently (BatchNorm
    // in eval mode included).
    let mut rng = Rng::new(20);
    let model = Model {
        layers: vec![
            Layer::conv2d(
                rand_normal(&mut rng, &[1, 3, 3, 4], 0.0, 0.5).unwrap(),
                rand_normal(&mut rng, &[4], 0.0, 0.1).unwrap(),
            )
            .unwrap(),
            Layer::BatchNorm(BatchNormParams {
                scale: rand_normal(&mut rng, &[4], 1.0, 0.1).unwrap(),
                shift: rand_normal(&mut rng, &[4], 0.0, 0.1).unwrap(),
                running_mean: rand_normal(&mut rng, &[4], 0.0, 0.3).unwrap(),
                running_var: Tensor::full(&[4], 1.3).unwrap(),
                momentum: 0.1,
                epsilon: 1e-5,
            }),
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            Layer::dense(
                rand_normal(&mut rng, &[4 * 16, 3], 0.0, 0.5).unwrap(),
                rand_normal(&mut rng, &[3], 0.0, 0.1).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (1, 8, 8),
        num_classes: 3,
    };
    let x = rand_normal(&mut rng, &[5, 1, 8, 8], 0.0, 1.0).unwrap();
    let batched = model.forward(&x).unwrap();
    for row in 0..5 {
        let single = Tensor::new(
            &[1, 1, 8, 8],
            x.data()[row * 64..(row + 1) * 64].to_vec(),
        )
        .unwrap();
        let y = model.forward(&single).unwrap();
        for j in 0..3 {
            assert!(
                (batched.at2(row, j) - y.at2(0, j)).abs() < 1e-10,
                "row {row} logit {j}"
            );
        }
    }
}

#[test]
fn batchnorm_updates_running_stats_in_training() {
    let mut rng = Rng::new(21);
    let bn = BatchNormParams::identity(2).unwrap();
    let model = Model {
        layers: vec![
            Layer::BatchNorm(bn),
            Layer::Flatten,
            Layer::dense(
                rand_normal(&mut rng, &[2 * 4, 2], 0.0, 0.5).unwrap(),
                Tensor::zeros(&[2]).unwrap(),
            )
            .unwrap(),
        ],
        input_shape: (2, 2, 2),
        num_classes: 2,
    };
    let x = rand_normal(&mut rng, &[6, 2, 2, 2], 2.0, 1.0).unwrap();
    let (_, cache) = model.forward_train(&x).unwrap();
    let mut updated = model.clone();
    updated.apply_batch_stats(&cache).unwrap();
    let Layer::BatchNorm(bn) = &updated.layers[0] else {
        unreachable!()
    };
    // Batch mean is ~2, so running mean moves from 0 toward it by momentum.
    assert!(bn.running_mean.data().iter().all(|&m| m > 0.1));
    assert!(bn.running_var.data().iter().all(|&v| v > 0.0));
}
