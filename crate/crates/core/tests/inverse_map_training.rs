use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tendon_leg::inverse_map::{self, InverseMap, SampleSet, SampleSource, TrainConfig};

/// Targets from a clamped affine map of the inputs: exactly the kind of
/// function the network can represent well.
fn affine_toy(n: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: [[f64; 6]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-0.15..0.15)));
    let b = [0.5, 0.4, 0.6];
    let mut set = SampleSet::new();
    for _ in 0..n {
        let x: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let a: [f64; 3] = std::array::from_fn(|o| {
            (b[o] + (0..6).map(|d| w[o][d] * x[d]).sum::<f64>()).clamp(0.0, 1.0)
        });
        set.push(x, a, SampleSource::Babbling).unwrap();
    }
    set
}

#[test]
fn learns_a_representable_function() {
    let data = affine_toy(500, 1);
    let map = inverse_map::train(&data, 42, 2000).unwrap();
    assert!(map.meta.final_loss < 1e-3, "final MSE {}", map.meta.final_loss);
    assert_eq!(map.meta.epochs, 2000);
}

#[test]
fn training_is_deterministic() {
    let data = affine_toy(200, 2);
    let a = inverse_map::train(&data, 7, 50).unwrap();
    let b = inverse_map::train(&data, 7, 50).unwrap();
    let c = inverse_map::train(&data, 8, 50).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn windowed_loss_decreases() {
    let data = affine_toy(500, 3);
    let (_, history) = inverse_map::train_with(&data, 5, &TrainConfig::with_epochs(300)).unwrap();
    let windows: Vec<f64> = history.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "window loss rose: {pair:?}");
    }
}

#[test]
fn refinement_reduces_loss_on_new_data() {
    let base = affine_toy(300, 4);
    let map = inverse_map::train(&base, 1, 200).unwrap();
    let mut cumulative = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        cumulative.push(x, [0.2, 0.8, 0.5], SampleSource::Experience { run: 0 }).unwrap();
    }
    let before = map.loss(&cumulative);
    let refined = inverse_map::refine(&map, &cumulative, 2, 100).unwrap();
    assert!(refined.loss(&cumulative) < before);
    assert_eq!(refined.meta.epochs, 300);
    assert_eq!(refined.bounds(), map.bounds());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = affine_toy(50, 5);
    let map = inverse_map::train(&data, 3, 5).unwrap();
    let mp = dir.path().join("map.txt");
    map.save(&mp).unwrap();
    assert_eq!(InverseMap::load(&mp).unwrap(), map);

    let mut mixed = data.clone();
    mixed.push([0.1; 6], [0.3; 3], SampleSource::Experience { run: 12 }).unwrap();
    let sp = dir.path().join("samples.csv");
    mixed.save_csv(&sp).unwrap();
    let back = SampleSet::load_csv(&sp).unwrap();
    assert_eq!(back, mixed);
    assert_eq!(back.babbling_fingerprint(), data.babbling_fingerprint());
}
