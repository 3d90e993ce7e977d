use svgan_core::data::{generate_phantoms, phantom_regions, Dataset, PhantomConfig};
use svgan_core::models::{DiscriminatorConfig, GeneratorConfig};
use svgan_core::trainer::{evaluate, evaluate_oracle, NoObserver, TrainConfig, Trainer};
use svgan_core::weighting::{compute_stats, compute_weights};

fn data() -> Dataset {
    generate_phantoms(&PhantomConfig {
        num_patients: 6,
        slices: 3,
        height: 16,
        width: 16,
        seed: 11,
        ..PhantomConfig::default()
    })
    .unwrap()
    .normalized()
}

fn configs() -> (GeneratorConfig, DiscriminatorConfig) {
    let g = GeneratorConfig {
        height: 16,
        width: 16,
        ..GeneratorConfig::default()
    };
    let d = DiscriminatorConfig::matching(&g);
    (g, d)
}

#[test]
fn phantom_weights_favour_the_lesion() {
    let d = data();
    let w = compute_weights(&compute_stats(d.label_volumes(), d.num_seg_classes).unwrap());
    assert!(w.w[0] < 1.0);
    assert!(w.w[2] > w.w[1] && w.w[1] > w.w[0]);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = data();
    let regions = phantom_regions(&d.class_names);
    let (g, dc) = configs();
    let cfg = TrainConfig {
        max_epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut full = Trainer::<f32>::new(g.clone(), dc.clone(), cfg.clone(), &d, regions.clone()).unwrap();
    let full_log = full.run(&d, None, &mut NoObserver).unwrap();

    let mut first = Trainer::<f32>::new(
        g,
        dc,
        TrainConfig {
            max_epochs: 1,
            ..cfg.clone()
        },
        &d,
        regions.clone(),
    )
    .unwrap();
    let head = first.run(&d, None, &mut NoObserver).unwrap();
    let mut rest = Trainer::resume(first.state, cfg, &d, regions.clone()).unwrap();
    let tail = rest.run(&d, None, &mut NoObserver).unwrap();

    let joined: Vec<_> = head.steps.iter().chain(&tail.steps).cloned().collect();
    assert_eq!(joined, full_log.steps);
    assert_eq!(rest.state.gen.params, full.state.gen.params);
    assert_eq!(
        evaluate(&rest.state.gen, &d, &regions).unwrap(),
        evaluate(&full.state.gen, &d, &regions).unwrap()
    );
}

#[test]
fn trained_model_reports_every_region() {
    let d = data();
    let regions = phantom_regions(&d.class_names);
    let (g, dc) = configs();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::new(g, dc, cfg, &d, regions.clone()).unwrap();
    let log = t.run(&d, Some(&d), &mut NoObserver).unwrap();
    assert_eq!(log.steps.len(), d.patients.len());
    assert_eq!(log.evals.len(), 1);
    let report = evaluate(&t.state.gen, &d, &regions).unwrap();
    assert_eq!(report.regions.len(), regions.len());
    assert_eq!(report.patients.len(), d.patients.len());
    assert!((0.0..=1.0).contains(&report.accuracy));

    let perfect = evaluate_oracle(&d, &regions).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert!(perfect
        .regions
        .iter()
        .all(|r| r.dice == 1.0 && r.hausdorff == Some(0.0)));
}

#[test]
fn double_precision_copy_predicts_like_single() {
    let d = data();
    let (g, _) = configs();
    let single = svgan_core::models::Generator::<f32>::new(g, 3).unwrap();
    let double = single.cast::<f64>();
    let slices: Vec<_> = (0..d.patients[0].slices)
        .map(|s| d.patients[0].slice_input::<f32>(s))
        .collect();
    let slices64: Vec<_> = (0..d.patients[0].slices)
        .map(|s| d.patients[0].slice_input::<f64>(s))
        .collect();
    let (a, _) = single.predict(&slices).unwrap();
    let (b, _) = double.predict(&slices64).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((*p as f64 - q).abs() < 1e-4);
        }
    }
}
