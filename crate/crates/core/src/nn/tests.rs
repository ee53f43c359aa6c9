use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv_value(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(x, w, b, stride).unwrap();
    tape.value(y).clone()
}

/// Direct six-loop cross-correlation with zero padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [f, _, k, _] = w.shape().try_into().unwrap();
    let p = (k - 1) / 2;
    let (oh, ow) = ((h + 2 * p - k) / stride + 1, (wd + 2 * p - k) / stride + 1);
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - p as isize;
                                let ix = (ox * stride + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((fi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    t(&[n, f, oh, ow], &out)
}

#[test]
fn conv_of_ones_counts_in_bounds_taps() {
    let y = conv_value(
        &Tensor::full([1, 1, 3, 3], 1.0),
        &Tensor::full([1, 1, 3, 3], 1.0),
        &Tensor::zeros([1]),
        1,
    );
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn identity_kernel_copies_input() {
    let x = rand_t(&[2, 1, 5, 4], 1);
    let mut k = Tensor::zeros([1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv_value(&x, &k, &Tensor::scalar(0.0).reshape([1]).unwrap(), 1);
    assert_eq!(y, x);
}

#[test]
fn conv_matches_loop_oracle() {
    for stride in [1, 2] {
        for k in [1, 3, 5] {
            let x = rand_t(&[2, 3, 8, 8], 10 + k as u64);
            let w = rand_t(&[4, 3, k, k], 20 + k as u64);
            let b = rand_t(&[4], 30);
            let y = conv_value(&x, &w, &b, stride);
            let o = conv_oracle(&x, &w, &b, stride);
            assert_eq!(y.shape(), o.shape());
            for (a, e) in y.data().iter().zip(o.data()) {
                assert!((a - e).abs() < 1e-12, "stride {stride} k {k}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn conv_is_linear_in_input() {
    let (x1, x2) = (rand_t(&[1, 2, 6, 6], 1), rand_t(&[1, 2, 6, 6], 2));
    let w = rand_t(&[3, 2, 3, 3], 3);
    let b = Tensor::zeros([3]);
    let sum = t(
        x1.shape(),
        &x1.data()
            .iter()
            .zip(x2.data())
            .map(|(a, b)| a + 2.0 * b)
            .collect::<Vec<_>>(),
    );
    let lhs = conv_value(&sum, &w, &b, 1);
    let (y1, y2) = (conv_value(&x1, &w, &b, 1), conv_value(&x2, &w, &b, 1));
    for i in 0..lhs.numel() {
        assert!((lhs.data()[i] - y1.data()[i] - 2.0 * y2.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    let even = tape.constant(Tensor::zeros([1, 2, 2, 2]));
    let b = tape.constant(Tensor::zeros([1]));
    assert!(matches!(tape.conv2d(x, w, b, 1), Err(Error::Shape(_))));
    assert!(matches!(tape.conv2d(x, even, b, 1), Err(Error::Shape(_))));
}

#[test]
fn pool_takes_block_max() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn pool_ties_route_to_first_element() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full([1, 1, 4, 4], 7.0));
    let y = tape.max_pool2(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    let hot: Vec<usize> = (0..16).filter(|&i| g.data()[i] == 1.0).collect();
    assert_eq!(hot, vec![0, 2, 8, 10]);
    assert_eq!(g.sum(), 4.0);
}

#[test]
fn pool_matches_loop_oracle() {
    let x = rand_t(&[2, 3, 6, 8], 4);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.max_pool2(v).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[2, 3, 3, 4]);
    for plane in 0..6 {
        for r in 0..3 {
            for c in 0..4 {
                let at = |dr: usize, dc: usize| x.data()[plane * 48 + (2 * r + dr) * 8 + 2 * c + dc];
                let m = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                assert_eq!(y.data()[plane * 12 + r * 4 + c], m);
            }
        }
    }
}

#[test]
fn pool_rejects_odd_sides() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(tape.max_pool2(x).is_err());
}

#[test]
fn upsample_repeats_pixels() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 1, 1], &[3.0]));
    let y = tape.upsample2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0; 4]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn pool_inverts_upsample() {
    let x = rand_t(&[2, 2, 3, 5], 6);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let up = tape.upsample2(v).unwrap();
    assert_eq!(tape.shape(up), &[2, 2, 6, 10]);
    assert!((tape.value(up).sum() - 4.0 * x.sum()).abs() < 1e-12);
    let back = tape.max_pool2(up).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[-2.0, 0.0, 1.5, -0.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 1.5, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[1], 0.5);
    assert_eq!(sigmoid(-800.0), 0.0);
    assert_eq!(sigmoid(800.0), 1.0);
    assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-16);
}

#[test]
fn concat_stacks_channels() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full([2, 1, 2, 2], 1.0));
    let b = tape.constant(Tensor::full([2, 3, 2, 2], 2.0));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 4, 2, 2]);
    let v = tape.value(c).data();
    assert_eq!(&v[..4], &[1.0; 4]);
    assert_eq!(&v[4..16], &[2.0; 12]);
    assert_eq!(&v[16..20], &[1.0; 4]);
    let bad = tape.constant(Tensor::zeros([2, 1, 2, 3]));
    assert!(tape.concat_channels(a, bad).is_err());
}

fn lstm_params(tape: &mut Tape, hidden: usize, input: usize, fill: f64, bias: [f64; 4]) -> ConvLstmWeights {
    let mut gate = |b: f64| {
        (
            tape.param(Tensor::full([hidden, input + hidden, 3, 3], fill)),
            tape.param(Tensor::full([hidden], b)),
        )
    };
    ConvLstmWeights {
        input_gate: gate(bias[0]),
        forget_gate: gate(bias[1]),
        output_gate: gate(bias[2]),
        candidate: gate(bias[3]),
    }
}

#[test]
fn lstm_zero_weights_give_half_gates() {
    let mut tape = Tape::new();
    let w = lstm_params(&mut tape, 2, 3, 0.0, [0.0; 4]);
    let x = tape.constant(rand_t(&[1, 3, 4, 4], 1));
    let h = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let c = tape.constant(Tensor::full([1, 2, 4, 4], 0.8));
    let (h1, c1) = conv_lstm_step(&mut tape, x, h, c, &w).unwrap();
    // f = i = o = 0.5 and g = 0, so c' = 0.4 and h' = 0.5 tanh(0.4).
    assert!(tape.value(c1).data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    let expected = 0.5 * 0.4f64.tanh();
    assert!(tape.value(h1).data().iter().all(|v| (v - expected).abs() < 1e-15));
}

#[test]
fn lstm_saturated_forget_keeps_cell() {
    let mut tape = Tape::new();
    let w = lstm_params(&mut tape, 1, 1, 0.0, [-50.0, 50.0, 0.0, 0.0]);
    let x = tape.constant(rand_t(&[2, 1, 2, 2], 2));
    let h = tape.constant(Tensor::zeros([2, 1, 2, 2]));
    let cell = rand_t(&[2, 1, 2, 2], 3);
    let c = tape.constant(cell.clone());
    let (_, c1) = conv_lstm_step(&mut tape, x, h, c, &w).unwrap();
    for (a, e) in tape.value(c1).data().iter().zip(cell.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn lstm_rejects_mismatched_state() {
    let mut tape = Tape::new();
    let w = lstm_params(&mut tape, 2, 3, 0.0, [0.0; 4]);
    let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
    let h = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let c = tape.constant(Tensor::zeros([1, 2, 2, 2]));
    assert!(conv_lstm_step(&mut tape, x, h, c, &w).is_err());
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(rand_t(&[3, 2], 1));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::full([3, 2], 1.0));
}

#[test]
fn square_gradient_is_twice_value() {
    let v = rand_t(&[5], 2);
    let mut tape = Tape::new();
    let x = tape.param(v.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), v.map(|a| 2.0 * a));
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, -3.0]));
    let a = tape.add(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn constants_have_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let k = tape.constant(t(&[2], &[5.0, 6.0]));
    let y = tape.mul(x, k).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0]);
    assert!(tape.grad(k).is_none());
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

/// Central-difference check of every parameter entry.
fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item().unwrap()
    };
    let eps = 1e-5;
    for (k, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).unwrap();
        for i in 0..inputs[k].numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += eps;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * eps;
            let down = eval(&xs);
            let num = (up - down) / (2.0 * eps);
            let ana = g.data()[i];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
            assert!(err < 1e-4, "input {k} entry {i}: analytic {ana} vs numeric {num}");
        }
    }
}

#[test]
fn fd_conv_pool_upsample() {
    for stride in [1, 2] {
        let inputs = [
            rand_t(&[2, 2, 4, 4], 1),
            rand_t(&[3, 2, 3, 3], 2),
            rand_t(&[3], 3),
            rand_t(&[2, 3, 4, 4], 4),
        ];
        fd_check(&inputs, |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], stride).unwrap();
            let y = if stride == 1 { tape.max_pool2(y).unwrap() } else { y };
            let y = tape.upsample2(y).unwrap();
            let y = tape.tanh(y);
            let y = tape.mul(y, v[3]).unwrap();
            tape.sum(y)
        });
    }
}

#[test]
fn fd_elementwise_chain() {
    let inputs = [rand_t(&[1, 2, 2, 3], 5), rand_t(&[1, 1, 2, 3], 6)];
    fd_check(&inputs, |tape, v| {
        let c = tape.concat_channels(v[0], v[1]).unwrap();
        let s = tape.sigmoid(c);
        let r = tape.relu(c);
        let p = tape.mul(s, r).unwrap();
        let q = tape.add(p, c).unwrap();
        let q = tape.mul(q, q).unwrap();
        tape.sum(q)
    });
}

#[test]
fn fd_lstm_step() {
    let mut inputs = vec![
        rand_t(&[1, 2, 4, 4], 7),
        rand_t(&[1, 2, 4, 4], 8),
        rand_t(&[1, 2, 4, 4], 9),
    ];
    for g in 0..4 {
        inputs.push(rand_t(&[2, 4, 3, 3], 10 + g).map(|v| 0.3 * v));
        inputs.push(rand_t(&[2], 20 + g));
    }
    fd_check(&inputs, |tape, v| {
        let w = ConvLstmWeights {
            input_gate: (v[3], v[4]),
            forget_gate: (v[5], v[6]),
            output_gate: (v[7], v[8]),
            candidate: (v[9], v[10]),
        };
        let (h, c) = conv_lstm_step(tape, v[0], v[1], v[2], &w).unwrap();
        let (h, c) = conv_lstm_step(tape, v[0], h, c, &w).unwrap();
        let y = tape.add(h, c).unwrap();
        tape.sum(y)
    });
}

#[test]
fn checkpoint_round_trip() {
    let params = vec![
        ("enc0.conv1.weight".to_string(), rand_t(&[4, 3, 3, 3], 1)),
        ("head.bias".to_string(), t(&[1], &[f64::MIN_POSITIVE])),
        ("scalar".to_string(), Tensor::scalar(-0.0)),
    ];
    let bytes = encode_checkpoint(&params).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.len(), 3);
    for ((n1, t1), (n2, t2)) in params.iter().zip(&back) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_checkpoint(&trailing).is_err());
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(decode_checkpoint(b"WFDS\x01"), Err(Error::BadMagic { .. })));
}
