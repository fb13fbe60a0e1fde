use dnsd::benchmark::{generate, DatasetBundle, Split, SyntheticConfig};
use dnsd::error::Error;
use dnsd::layers::{Checkpoint, Family, Flags, GraphContext, MapKind, Model, ModelConfig};
use dnsd::param::ParamStore;
use dnsd::sheaf::Graph;
use dnsd::tensor::Tensor;
use dnsd::training::{
    accuracy, cross_entropy, evaluate, train, Adam, EarlyStopping, Plateau, TrainConfig, TrainReport,
};

fn naive_ce(logits: &Tensor, labels: &[usize], mask: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for &i in mask {
        let row = &logits.data()[i * c..(i + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[labels[i]].exp() / z).ln();
    }
    total / mask.len() as f64
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros(&[4, 3]);
    let ce = cross_entropy(&uniform, &[0, 1, 2, 0], &[0, 1, 2, 3]).unwrap();
    assert!((ce - 3f64.ln()).abs() < 1e-15);

    let confident = Tensor::matrix(&[&[60.0, 0.0, 0.0]]);
    assert!(cross_entropy(&confident, &[0], &[0]).unwrap() < 1e-25);

    let random = Tensor::from_fn(&[5, 3], |i| (i as f64 * 1.37).sin() * 2.0);
    let labels = [2, 0, 1, 1, 0];
    let mask = [0, 2, 3, 4];
    let ce = cross_entropy(&random, &labels, &mask).unwrap();
    assert!((ce - naive_ce(&random, &labels, &mask)).abs() < 1e-12);

    assert!(cross_entropy(&random, &labels, &[]).is_err());
}

fn scalar_store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, &v) in values.iter().enumerate() {
        s.add(format!("p{i}"), Tensor::scalar(v)).unwrap();
    }
    s
}

#[test]
fn adam_zero_gradient_without_decay_is_a_no_op() {
    let mut s = scalar_store(&[0.3, -2.0]);
    let mut adam = Adam::new(&s);
    for _ in 0..5 {
        adam.step(&mut s, &[Some(Tensor::scalar(0.0)), None], 0.1, 0.0);
    }
    assert_eq!(s.snapshot(), scalar_store(&[0.3, -2.0]).snapshot());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut s = scalar_store(&[1.0]);
    let mut adam = Adam::new(&s);
    adam.step(&mut s, &[Some(Tensor::scalar(1.0))], 0.01, 0.0);
    let expected = 1.0 - 0.01 / (1.0 + 1e-8);
    assert!((s.snapshot()[0].data()[0] - expected).abs() < 1e-16);
}

#[test]
fn adam_moments_reach_their_limits() {
    let mut s = scalar_store(&[0.0]);
    let mut adam = Adam::new(&s);
    let g = 0.7;
    for _ in 0..30_000 {
        adam.step(&mut s, &[Some(Tensor::scalar(g))], 1e-9, 0.0);
    }
    assert!((adam.first_moment(0)[0] - g).abs() < 1e-12);
    assert!((adam.second_moment(0)[0] - g * g).abs() < 1e-9);
    assert_eq!(adam.steps(), 30_000);
}

#[test]
fn adam_matches_scalar_oracle_with_coupled_decay() {
    let (lr, wd) = (0.05, 0.1);
    let grads = [0.4, -1.3, 0.2, 2.5];
    let mut s = scalar_store(&[0.8]);
    let mut adam = Adam::new(&s);

    let (mut theta, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        adam.step(&mut s, &[Some(Tensor::scalar(g))], lr, wd);
        let g = g + wd * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = t as i32 + 1;
        theta -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        assert!((s.snapshot()[0].data()[0] - theta).abs() < 1e-15);
    }
}

#[test]
fn plateau_schedule_on_scripted_sequences() {
    let mut p = Plateau::new(0.01, 0.5, 20, 1e-6);
    for i in 0..200 {
        assert_eq!(p.observe(i as f64 * 0.001), 0.01);
    }

    // first observation sets the reference; the 21st flat one after it halves
    let mut p = Plateau::new(0.01, 0.5, 20, 1e-6);
    p.observe(0.5);
    for _ in 0..20 {
        assert_eq!(p.observe(0.5), 0.01);
    }
    assert_eq!(p.observe(0.5), 0.005);

    let mut p = Plateau::new(0.01, 0.5, 20, 1e-6);
    p.observe(0.5);
    let mut halvings = Vec::new();
    let mut lr = 0.01;
    for epoch in 1..=105 {
        let next = p.observe(0.5);
        if next < lr {
            halvings.push(epoch);
        }
        lr = next;
    }
    assert_eq!(halvings, vec![21, 42, 63, 84, 105]);

    // improvements below the tolerance do not count
    let mut p = Plateau::new(0.01, 0.5, 2, 1e-6);
    p.observe(0.5);
    p.observe(0.5 + 1e-13);
    p.observe(0.5 + 2e-13);
    assert_eq!(p.observe(0.5 + 3e-13), 0.005);
}

#[test]
fn plateau_respects_the_floor() {
    let mut p = Plateau::new(3e-6, 0.5, 1, 1e-6);
    for _ in 0..50 {
        p.observe(0.0);
    }
    assert_eq!(p.lr(), 1e-6);
}

#[test]
fn early_stopping_counts_from_the_best_epoch() {
    let mut s = EarlyStopping::new(100);
    assert!(s.observe(0, 0.2));
    assert!(s.observe(7, 0.4));
    for e in 8..107 {
        assert!(!s.observe(e, 0.3));
        assert!(!s.should_stop(e));
    }
    assert!(s.should_stop(107));
    assert_eq!(s.best(), Some((7, 0.4)));
}

fn cluster_bundle(per_class: usize, spread: f64, seed: u64) -> DatasetBundle {
    let mut rng = dnsd::rng::SplitMix64::new(seed);
    let centers = [[6.0, 0.0], [-3.0, 5.0], [-3.0, -5.0]];
    let n = 3 * per_class;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let (a, b) = rng.normal_pair();
            features.extend([center[0] + spread * a, center[1] + spread * b]);
            labels.push(c);
        }
    }
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let cut = n * 4 / 5;
    DatasetBundle {
        name: "clusters".into(),
        graph: Graph::new(n, edges).unwrap(),
        features: Tensor::new(vec![n, 2], features).unwrap(),
        labels,
        classes: 3,
        split: Split {
            train: order[..cut].to_vec(),
            val: order[cut..].to_vec(),
            test: Vec::new(),
        },
        provenance: None,
    }
}

fn short(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        early_stop_patience: max_epochs - 1,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_layer_model_separates_separable_data() {
    let bundle = cluster_bundle(30, 0.5, 3);
    let mut model = Model::new(ModelConfig::synthetic(
        Family::Dnsd,
        MapKind::Diag,
        Flags::default(),
        0,
        1,
    ))
    .unwrap();
    let report = train(&mut model, &bundle, &short(200)).unwrap();
    assert!(report.epochs.iter().any(|e| e.train_acc == 1.0));
}

#[test]
fn report_invariants_and_restore() {
    let bundle = cluster_bundle(30, 4.0, 5);
    let cfg = ModelConfig::synthetic(Family::Dnsd, MapKind::Orthogonal, Flags::default(), 2, 9);
    let mut model = Model::new(cfg).unwrap();
    let report = train(&mut model, &bundle, &short(60)).unwrap();
    let max = report.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    assert_eq!(report.best_val_acc, max);
    assert_eq!(report.epochs[report.best_epoch].val_acc, max);
    assert!(report.restored);
    let logits = model
        .predict(&bundle.features, &GraphContext::new(&bundle.graph))
        .unwrap();
    assert_eq!(accuracy(&logits, &bundle.labels, &bundle.split.val), max);
}

#[test]
fn frozen_validation_stops_one_patience_after_the_best() {
    let bundle = cluster_bundle(20, 4.0, 8);
    let cfg = ModelConfig::synthetic(Family::Dnsd, MapKind::Diag, Flags::default(), 1, 2);
    let mut model = Model::new(cfg).unwrap();
    let config = TrainConfig {
        lr: 1e-12,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &bundle, &config).unwrap();
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.epochs.len(), 101);
    assert!(report.stopped_early);
}

fn without_time(mut r: TrainReport) -> TrainReport {
    r.wall_time_s = 0.0;
    r
}

#[test]
fn training_is_deterministic() {
    let bundle = generate(&SyntheticConfig {
        nodes_per_community: 40,
        k: 4,
        ..SyntheticConfig::new(3, 42)
    })
    .unwrap();
    let cfg = ModelConfig::synthetic(
        Family::Dnsd,
        MapKind::Full,
        Flags {
            adj: true,
            odd: false,
            gate: true,
        },
        2,
        42,
    );
    let run = || {
        let mut m = Model::new(cfg.clone()).unwrap();
        let r = train(&mut m, &bundle, &short(30)).unwrap();
        (without_time(r), m.params().snapshot())
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
}

#[test]
fn non_finite_input_reports_the_epoch() {
    let mut bundle = cluster_bundle(10, 1.0, 1);
    bundle.features.data_mut()[3] = f64::NAN;
    let mut model = Model::new(ModelConfig::synthetic(
        Family::Dnsd,
        MapKind::Diag,
        Flags::default(),
        1,
        0,
    ))
    .unwrap();
    match train(&mut model, &bundle, &short(10)) {
        Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn linear_model(weight: [[f64; 3]; 3], bias: [f64; 3]) -> Model {
    let mut cfg = ModelConfig::synthetic(Family::Mlp, MapKind::Diag, Flags::default(), 1, 0);
    cfg.in_dim = 3;
    let mut model = Model::new(cfg).unwrap();
    let params = model.params_mut();
    let w = params.id("output.weight").unwrap();
    *params.value_mut(w) = Tensor::new(vec![3, 3], weight.iter().flatten().copied().collect()).unwrap();
    let b = params.id("output.bias").unwrap();
    *params.value_mut(b) = Tensor::new(vec![3], bias.to_vec()).unwrap();
    model
}

fn one_hot_bundle(name: &str, labels: Vec<usize>) -> DatasetBundle {
    let n = labels.len();
    let features = Tensor::from_fn(&[n, 3], |i| if labels[i / 3] == i % 3 { 1.0 } else { 0.0 });
    DatasetBundle {
        name: name.into(),
        graph: Graph::new(n, (1..n).map(|i| (i - 1, i))).unwrap(),
        features,
        labels,
        classes: 3,
        split: Split::all_test(n),
        provenance: None,
    }
}

#[test]
fn evaluation_examples() {
    let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let perfect = linear_model(eye, [0.0; 3]);
    let a = one_hot_bundle("a", (0..30).map(|i| i % 3).collect());
    let b = one_hot_bundle("b", vec![0, 0, 1, 2, 2, 2, 1]);
    let r = evaluate(&perfect, &[&a, &b]).unwrap();
    assert_eq!(r.pooled, 1.0);

    let constant = linear_model([[0.0; 3]; 3], [1.0, 0.0, 0.0]);
    let r = evaluate(&constant, &[&a, &b]).unwrap();
    assert!((r.per_graph[0].accuracy - 1.0 / 3.0).abs() < 1e-15);
    let weighted = (r.per_graph[0].accuracy * 30.0 + r.per_graph[1].accuracy * 7.0) / 37.0;
    assert!((r.pooled - weighted).abs() < 1e-15);
    assert_eq!(r.per_graph[1].correct, 2);

    let wrong_width = cluster_bundle(5, 1.0, 0);
    assert!(matches!(evaluate(&perfect, &[&wrong_width]), Err(Error::Config(_))));
}

fn norm(model: &Model) -> f64 {
    model
        .params()
        .iter()
        .map(|p| p.value.frobenius_norm().powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn weight_decay_is_live() {
    let bundle = cluster_bundle(20, 3.0, 4);
    let cfg = ModelConfig::synthetic(Family::Dnsd, MapKind::Diag, Flags::default(), 1, 3);
    let run = |wd| {
        let mut m = Model::new(cfg.clone()).unwrap();
        let config = TrainConfig {
            weight_decay: wd,
            max_epochs: 50,
            early_stop_patience: 49,
            ..TrainConfig::default()
        };
        train(&mut m, &bundle, &config).unwrap();
        // compare the final iterate, not the restored best
        m
    };
    let (a, b) = (run(0.0), run(5e-4));
    assert_ne!(norm(&a), norm(&b));
}

#[test]
fn loss_falls_during_the_first_epochs_on_generated_levels() {
    for level in [0, 5, 10] {
        let mut first = 0.0;
        let mut tenth = 0.0;
        for seed in [42, 43] {
            let bundle = generate(&SyntheticConfig {
                nodes_per_community: 80,
                ..SyntheticConfig::new(level, seed)
            })
            .unwrap();
            let cfg = ModelConfig::synthetic(Family::Dnsd, MapKind::Orthogonal, Flags::default(), 4, seed);
            let mut m = Model::new(cfg).unwrap();
            let r = train(&mut m, &bundle, &short(10)).unwrap();
            first += r.epochs[0].train_loss;
            tenth += r.epochs[9].train_loss;
        }
        assert!(tenth < first, "level {level}: {first} -> {tenth}");
    }
}

#[test]
fn trained_checkpoint_reproduces_logits() {
    let bundle = cluster_bundle(15, 3.0, 6);
    let cfg = ModelConfig::synthetic(
        Family::Dnsd,
        MapKind::Full,
        Flags {
            adj: false,
            odd: true,
            gate: true,
        },
        2,
        6,
    );
    let mut model = Model::new(cfg).unwrap();
    train(&mut model, &bundle, &short(20)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_model(&model).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
    let ctx = GraphContext::new(&bundle.graph);
    let (l1, l2) = (
        model.predict(&bundle.features, &ctx).unwrap(),
        back.predict(&bundle.features, &ctx).unwrap(),
    );
    assert!(l1.data().iter().zip(l2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(
        evaluate(&model, &[&bundle]).unwrap(),
        evaluate(&back, &[&bundle]).unwrap()
    );
}
