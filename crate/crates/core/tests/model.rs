use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uninet::model::{Model, ModelConfig};
use uninet::runner::{train_on, RunConfig};
use uninet::scenegen::{generate_scene, SceneSpec};
use uninet::tensor::Graph;
use uninet::TaskSet;

fn small() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        encoder_channels: [4, 6, 6, 8, 8, 8],
        decoder_channels: 6,
        head_channels: 6,
        head_fuse_channels: 4,
        fpn_channels: 6,
        tower_depth: 1,
        mask_code_dim: 4,
        ..ModelConfig::default()
    }
}

fn field_sums(model: &Model, image: &ArrayD<f64>) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(image.clone());
    let pass = model.forward(&mut g, x, TaskSet::all(), false).unwrap();
    pass.dense.all_nodes().iter().map(|&(_, n)| g.value(n).sum()).collect()
}

/// Gradient of every output field's sum with respect to the image, against
/// central differences in 64-bit arithmetic.
#[test]
fn every_output_field_is_differentiable_in_the_image() {
    let model = Model::new(small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = ArrayD::from_shape_fn(IxDyn(&[3, 128, 128]), |_| rng.gen_range(0.05..0.95));

    let mut g = Graph::<f64>::new();
    let x = g.leaf(image.clone());
    let pass = model.forward(&mut g, x, TaskSet::all(), false).unwrap();
    let fields = pass.dense.all_nodes();
    assert_eq!(fields.len(), 3 * 5 + 2);
    let analytic: Vec<ArrayD<f64>> = fields
        .iter()
        .map(|&(_, n)| {
            let s = g.sum(n);
            g.backward(s).get(x).expect("image gradient").clone()
        })
        .collect();

    // Directional differences along random unit directions: a coordinate
    // step of 1e-3 can straddle a ReLU kink, a spread one rarely does.
    let step = 1e-3;
    let mut worst = vec![0.0f64; fields.len()];
    for _ in 0..6 {
        let mut v = ArrayD::from_shape_fn(IxDyn(&[3, 128, 128]), |_| rng.gen_range(-1.0..1.0f64));
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.mapv_inplace(|a| a / norm);
        let (fu, fd) = (field_sums(&model, &(&image + &(&v * step))), field_sums(&model, &(&image - &(&v * step))));
        for (k, a) in analytic.iter().enumerate() {
            let numeric = (fu[k] - fd[k]) / (2.0 * step);
            let a = (a * &v).sum();
            worst[k] = worst[k].max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    for ((name, _), w) in fields.iter().zip(&worst) {
        assert!(*w < 1e-3, "{name}: relative error {w}");
    }
}

#[test]
fn zeroing_the_decoder_leaves_instance_outputs_unchanged() {
    let model = Model::new(small()).unwrap();
    let image = Array3::from_shape_fn((3, 128, 128), |(c, y, x)| ((c * 7 + y * 3 + x) % 11) as f32 / 11.0);
    let before = model.predict(&image, TaskSet::all()).unwrap();
    let mut zeroed = model.clone();
    let mut touched = 0;
    for p in zeroed.params_mut() {
        if p.name.starts_with("decoder.") || p.name.starts_with("seg_head.") || p.name.starts_with("depth_head.") {
            p.value.fill(0.0);
            touched += 1;
        }
    }
    assert!(touched > 0);
    let after = zeroed.predict(&image, TaskSet::all()).unwrap();
    assert_eq!(before.levels, after.levels);
    assert_ne!(before.seg_logits, after.seg_logits);
}

#[test]
fn dense_training_leaves_the_instance_head_alone_and_is_repeatable() {
    let spec = SceneSpec::default();
    let samples: Vec<_> = (0..3).map(|i| generate_scene(&spec, i)).collect();
    let cfg = RunConfig { tasks: TaskSet::parse_list("ss,d").unwrap(), epochs: 1, batch_size: 2, model: small(), ..Default::default() };
    let a = train_on(&cfg, &spec, &samples, |_, _| {}).unwrap().checkpoint.model;
    let b = train_on(&cfg, &spec, &samples, |_, _| {}).unwrap().checkpoint.model;
    assert_eq!(a.checksum(), b.checksum());

    let fresh = Model::new(a.config.clone()).unwrap();
    assert_ne!(fresh.checksum(), a.checksum());
    let used = a.parameter_names(cfg.tasks).unwrap();
    for (p, q) in a.params().iter().zip(fresh.params()) {
        if used.contains(&p.name) {
            continue;
        }
        assert_eq!(p.value, q.value, "{} moved", p.name);
    }
    assert!(a.params().iter().any(|p| p.name.starts_with("inst.") && !used.contains(&p.name)));
}

#[test]
fn parameter_footprint_is_monotone_over_every_task_set() {
    let model = Model::new(small()).unwrap();
    let sets: Vec<TaskSet> =
        ["od", "ss", "d", "ss,d", "od,ss", "od,is", "od,id", "od,ss,d", "od,is,id", "od,ss,is,d,id"].iter().map(|s| TaskSet::parse_list(s).unwrap()).collect();
    for a in &sets {
        for b in &sets {
            if a.iter().all(|t| b.contains(t)) {
                let (na, nb) = (model.parameter_names(*a).unwrap(), model.parameter_names(*b).unwrap());
                assert!(na.iter().all(|n| nb.contains(n)), "{a:?} ⊄ {b:?}");
            }
        }
    }
}
