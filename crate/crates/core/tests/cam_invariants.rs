use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribcam::network::{activation_map, cam_gate, classify_patch, gap_channelwise, init_params};
use ribcam::tensor::Tensor;
use ribcam::Shape3;

mod common;

fn random_features(rng: &mut ChaCha8Rng, c: usize, edge: usize) -> Tensor {
    let n = c * edge * edge * edge;
    Tensor::from_vec(c, Shape3::cube(edge), (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect())
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[test]
fn zero_weights_halve_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let e = random_features(&mut rng, 8, 4);
        let (d0, a) = cam_gate(&e, &[0.0; 8]).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        for (x, y) in d0.data.iter().zip(&e.data) {
            assert_eq!(*x, 0.5 * y);
        }
    }
}

#[test]
fn positive_rescaling_keeps_the_peak() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let e = random_features(&mut rng, 16, 4);
        let w: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let k = rng.random_range(0.1f32..10.0);
        let scaled: Vec<f32> = w.iter().map(|v| v * k).collect();
        let a = activation_map(&e, &w).unwrap();
        let b = activation_map(&e, &scaled).unwrap();
        assert_eq!(argmax(&a), argmax(&b));
    }
}

#[test]
fn gate_lies_between_zero_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = random_features(&mut rng, 4, 4);
    let w = [0.5, -1.0, 2.0, 0.1];
    let (d0, _) = cam_gate(&e, &w).unwrap();
    for (g, x) in d0.data.iter().zip(&e.data) {
        assert!(g.abs() <= x.abs() && g * x >= 0.0);
    }
}

#[test]
fn classifier_is_logistic_on_pooled_features() {
    let e = Tensor::from_vec(2, Shape3::cube(2), vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0]);
    let f = gap_channelwise(&e).unwrap();
    assert_eq!(f, vec![2.0, 1.0]);
    let p = classify_patch(&f, &[1.0, -2.0], 0.0).unwrap();
    assert!((p - 0.5).abs() < 1e-7);
    assert!(classify_patch(&f, &[1.0], 0.0).is_err());
}

#[test]
fn network_gate_uses_classifier_weights() {
    let mut params = init_params(&common::tiny_model(16, true), 9).unwrap();
    params.get_mut("cam.weight").unwrap().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_features(&mut rng, 1, 16);
    let out = params.forward(&x).unwrap();
    for (g, e) in out.gated.data.iter().zip(&out.bottleneck.data) {
        assert_eq!(*g, 0.5 * e);
    }
}
