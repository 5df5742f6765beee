mod common;

use clinembed::encoder::{EncoderConfig, EncoderModel, IdBatch};
use clinembed::tensor::{clip_global_norm, load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, Graph, ParamStore, Tensor};
use clinembed::Error;
use common::*;
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 2..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-20.0f64..20.0, n))
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((shape, data) in tensor_strategy(), axis_pick in 0usize..4) {
        let axis = axis_pick % shape.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(shape.clone(), data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y);
        prop_assert!(v.is_finite());
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| v.data()[(o * len + j) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..6, d in 2usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[rows, d], |_| rand::Rng::random_range(&mut r, -5.0..5.0)));
        let gain = g.constant(Tensor::full(&[d], 1.0));
        let bias = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for row in g.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn shape_product_matches_length((shape, data) in tensor_strategy()) {
        let t = Tensor::new(shape.clone(), data.clone()).unwrap();
        prop_assert_eq!(t.len(), shape.iter().product::<usize>());
        let mut bad = shape.clone();
        bad[0] += 1;
        prop_assert!(Tensor::new(bad, data).is_err());
    }
}

#[test]
fn forward_is_bit_identical_for_a_fixed_mask_stream() {
    let cfg = EncoderConfig { vocab_size: 20, d_model: 16, n_layers: 2, n_heads: 4, d_ffn: 32, max_seq_len: 10, dropout_rate: 0.3 };
    let model = EncoderModel::<f32>::new(cfg, 3).unwrap();
    let batch = IdBatch::pad(&[vec![2, 5, 6, 3], vec![2, 7, 3]]).unwrap();
    let a = model.forward(&batch, true, 11).unwrap();
    let b = model.forward(&batch, true, 11).unwrap();
    let c = model.forward(&batch, true, 12).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    assert!(a.is_finite());
}

#[test]
fn adam_counts_steps_and_keeps_shapes() {
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::full(&[2, 3], 0.5)).unwrap();
    p.insert("b", Tensor::zeros(&[3])).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    for k in 1..=4u64 {
        let grads = vec![Tensor::full(&[2, 3], 1.0), Tensor::full(&[3], -1.0)];
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(opt.steps(), k);
    }
    assert_eq!(p.get("w").unwrap().shape(), &[2, 3]);
    // A constant gradient moves each value by about lr per step.
    assert!((p.get("w").unwrap().data()[0] - (0.5 - 4e-3)).abs() < 1e-6);
    assert!((p.get("b").unwrap().data()[0] - 4e-3).abs() < 1e-6);
    let wrong = vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[3])];
    assert!(opt.step(&mut p, &wrong).is_err());
}

#[test]
fn global_norm_clipping() {
    let mut grads = vec![Tensor::<f64>::new(vec![2], vec![3.0, 0.0]).unwrap(), Tensor::new(vec![1], vec![4.0]).unwrap()];
    let norm = clip_global_norm(&mut grads, 1.0);
    assert!((norm - 5.0).abs() < 1e-12);
    let total: f64 = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    assert!((total.sqrt() - 1.0).abs() < 1e-12);
}

#[test]
fn unreachable_leaf_gets_no_gradient_and_cycles_cannot_exist() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[2], 1.0), true);
    let b = g.leaf(Tensor::full(&[2], 2.0), true);
    let s = g.scale(a, 3.0);
    let loss = g.mean(s, 0).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.5, 1.5]);
    assert!(grads.get(b).is_none());
    // Every op only refers to earlier nodes, so the tape is a DAG by construction.
    assert!(loss.index() > s.index() && s.index() > a.index());
}

#[test]
fn checkpoint_round_trips_and_rejects_truncation() {
    let mut p = ParamStore::<f32>::new();
    p.insert("x", Tensor::new(vec![2, 2], vec![1.5, -0.25, f32::MIN_POSITIVE, 3.0e7]).unwrap()).unwrap();
    let ck = Checkpoint { config: [("model".to_string(), "test".to_string())].into(), params: p };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err:?}");
    }
}
