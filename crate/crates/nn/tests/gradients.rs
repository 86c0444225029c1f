use amc_nn::{grad_check, projection_loss, LayerSpec, ParamStore, Tape, Tensor, TransformerBlock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check_single(spec: LayerSpec, input_shape: &[usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = spec.clone().build(&mut store, "layer", &mut rng).unwrap();
    // perturb biases/gains away from their init so every term is exercised
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let x = random_tensor(input_shape, &mut rng);
    let report = grad_check(&store, &x, TOL, |tape, s, xn| {
        let y = layer.forward(tape, s, xn)?;
        projection_loss(tape, y, 99)
    })
    .unwrap();
    assert!(report.pass, "{spec:?}: {report:?}");
    assert!(report.checked > 0);
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    check_single(LayerSpec::conv3x3(3), &[2, 3, 4, 5], 1);
    check_single(
        LayerSpec::Conv2D { in_channels: 2, out_channels: 3, kernel: (1, 3), padding: (0, 1) },
        &[2, 2, 1, 6],
        2,
    );
    check_single(LayerSpec::fc(4, 3), &[5, 4], 3);
    check_single(LayerSpec::ReLU, &[3, 7], 4);
    check_single(LayerSpec::Sigmoid, &[3, 7], 5);
    check_single(LayerSpec::GlobalAvgPool2D, &[2, 3, 2, 4], 6);
    check_single(LayerSpec::LayerNorm { features: 6, eps: 1e-5 }, &[4, 6], 7);
    check_single(LayerSpec::MultiHeadSelfAttention { d_model: 8, heads: 2 }, &[2, 3, 8], 8);
    check_single(LayerSpec::Softmax, &[3, 5], 9);
}

#[test]
fn fc_four_to_three() {
    check_single(LayerSpec::fc(4, 3), &[1, 4], 10);
}

#[test]
fn conv_se_fc_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let (c, h, w) = (4, 2, 5);
    let conv1 = LayerSpec::conv3x3(c).build(&mut store, "conv1", &mut rng).unwrap();
    let conv2 = LayerSpec::conv3x3(c).build(&mut store, "conv2", &mut rng).unwrap();
    let gap = LayerSpec::GlobalAvgPool2D.build(&mut store, "gap", &mut rng).unwrap();
    let se1 = LayerSpec::fc(c, 2).build(&mut store, "se1", &mut rng).unwrap();
    let se2 = LayerSpec::fc(2, c).build(&mut store, "se2", &mut rng).unwrap();
    let head = LayerSpec::fc(c * h * w, 3).build(&mut store, "head", &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let x = random_tensor(&[2, c, h, w], &mut rng);
    let report = grad_check(&store, &x, TOL, |tape, s, xn| {
        let f = conv1.forward(tape, s, xn)?;
        let f = tape.relu(f);
        let f = conv2.forward(tape, s, f)?;
        let g = gap.forward(tape, s, f)?;
        let g = se1.forward(tape, s, g)?;
        let g = tape.relu(g);
        let g = se2.forward(tape, s, g)?;
        let g = tape.sigmoid(g);
        let scaled = tape.mul_prefix(f, g)?;
        let res = tape.add(scaled, xn)?;
        let flat = tape.reshape(res, &[2, c * h * w])?;
        let y = head.forward(tape, s, flat)?;
        projection_loss(tape, y, 5)
    })
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn transformer_block_and_recurrent_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, &mut rng).unwrap();
    let x = random_tensor(&[2, 3, 8], &mut rng);
    let report = grad_check(&store, &x, TOL, |tape, s, xn| {
        let y = block.forward(tape, s, xn)?;
        projection_loss(tape, y, 1)
    })
    .unwrap();
    assert!(report.pass, "{report:?}");

    // gate-style arithmetic used by the recurrent baselines
    let mut store = ParamStore::new();
    let w = store.insert_uniform("w", &[3, 8], 0.5, &mut rng).unwrap();
    let x = random_tensor(&[2, 4, 3], &mut rng);
    let report = grad_check(&store, &x, TOL, |tape, s, xn| {
        let wn = tape.param(s, w);
        let mut h = None;
        for t in 0..4 {
            let xt = tape.select(xn, 1, t)?;
            let z = tape.linear(xt, wn, None)?;
            let a = tape.slice_last(z, 0, 4)?;
            let b = tape.slice_last(z, 4, 4)?;
            let a = tape.tanh(a);
            let b = tape.sigmoid(b);
            let one_minus = tape.affine(b, -1.0, 1.0);
            let cand = tape.mul(a, one_minus)?;
            h = Some(match h {
                None => cand,
                Some(prev) => {
                    let keep = tape.mul(prev, b)?;
                    tape.add(keep, cand)?
                }
            });
        }
        let h = h.unwrap();
        let per = tape.sum_last(h);
        let m = tape.mean(per);
        let sq = tape.mul(h, h)?;
        let s2 = tape.sum(sq);
        let both = tape.add(m, s2)?;
        Ok(both)
    })
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn frozen_parameters_are_skipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let fc = LayerSpec::fc(4, 3).build(&mut store, "fc", &mut rng).unwrap();
    let frozen = LayerSpec::fc(3, 2).build(&mut store, "frozen", &mut rng).unwrap();
    store.set_trainable_where(false, |n| n.starts_with("frozen"));
    let x = random_tensor(&[2, 4], &mut rng);
    let report = grad_check(&store, &x, TOL, |tape, s, xn| {
        let y = fc.forward(tape, s, xn)?;
        let y = frozen.forward(tape, s, y)?;
        projection_loss(tape, y, 2)
    })
    .unwrap();
    // 12 + 3 trainable values plus 8 inputs
    assert_eq!(report.checked, 15 + 8);
    assert!(report.pass);

    let before = store.clone();
    let mut tape = Tape::new();
    let xn = tape.input(x);
    let y = fc.forward(&mut tape, &store, xn).unwrap();
    let y = frozen.forward(&mut tape, &store, y).unwrap();
    let loss = projection_loss(&mut tape, y, 2).unwrap();
    tape.backward(loss, &mut store).unwrap();
    for (id, name, t) in store.iter() {
        if name.starts_with("frozen") {
            assert_eq!(t, before.get(id));
            assert!(t.grad().is_none());
        } else {
            assert!(t.grad().is_some());
        }
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 4, 32, &mut rng).unwrap();
        let x = random_tensor(&[3, 5, 8], &mut rng);
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let y = block.forward(&mut tape, &store, xn).unwrap();
        let loss = projection_loss(&mut tape, y, 3).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let grads: Vec<Vec<u64>> = store
            .iter()
            .map(|(_, _, t)| t.grad().unwrap().iter().map(|v| v.to_bits()).collect())
            .collect();
        (tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), grads)
    };
    assert_eq!(run(), run());
}
