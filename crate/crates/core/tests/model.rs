use dbgl::data::{Dataset, Episode};
use dbgl::diffcore::GradcheckOptions;
use dbgl::model::{AblationFlags, Dbgl, DbglConfig};
use dbgl::temporal::DecayKernel;
use dbgl::{Tape, Tensor};

const V: usize = 3;

fn tiny_config() -> DbglConfig {
    DbglConfig {
        d: 8,
        codebook_size: 8,
        layers: 2,
        batch_size: 4,
        epochs: 3,
        seed: 11,
        ..Default::default()
    }
}

/// Four steps with irregular masks and heterogeneous gaps.
fn episode(id: &str, shift: f64, scale: f64, label: usize) -> Episode {
    let raw = [
        (0.5, 0, 0.3),
        (0.5, 2, -1.1),
        (1.0, 1, 0.7),
        (2.5, 0, 0.9),
        (2.5, 1, -0.2),
        (6.0, 2, 1.4),
        (6.0, 0, -0.5),
    ];
    let triples: Vec<_> = raw.iter().map(|&(t, v, x)| (t + shift, v, x * scale)).collect();
    Episode::from_triples(id, &triples, V, label, 40.0).unwrap()
}

fn batch() -> Vec<Episode> {
    vec![
        episode("a", 0.0, 1.0, 1),
        episode("b", 0.3, -0.8, 0),
        episode("c", 1.0, 1.7, 1),
    ]
}

fn logits(model: &Dbgl<f64>, eps: &[Episode]) -> Vec<f64> {
    let refs: Vec<&Episode> = eps.iter().collect();
    model.logits(&refs).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn perturb(model: &mut Dbgl<f64>, prefix: &str) {
    let names: Vec<String> = model.params.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    assert!(!names.is_empty(), "no parameters under {prefix}");
    for n in names {
        for x in model.params.get_mut(&n).unwrap().data_mut() {
            *x += 0.37;
        }
    }
}

#[test]
fn logits_have_batch_by_class_shape() {
    let model = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let eps = batch();
    assert_eq!(logits(&model, &eps[..2]).len(), 2 * 2);
}

#[test]
fn empty_episodes_give_finite_logits_and_a_zero_bank() {
    let model = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let eps = [
        Episode::from_triples("x", &[], V, 0, 1.0).unwrap(),
        Episode::from_triples("y", &[], V, 1, 1.0).unwrap(),
    ];
    let refs: Vec<&Episode> = eps.iter().collect();
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let out = model.forward_on(&tape, &bound, &refs).unwrap();
    assert!(tape.data(out.logits).iter().all(|x| x.is_finite()));
    assert!(tape.data(out.bank).iter().all(|&x| x == 0.0));
    assert_eq!(out.active_steps, 0);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for kernel in DecayKernel::ALL {
        let config = DbglConfig { kernel, ..tiny_config() };
        let model = Dbgl::<f64>::new(config, AblationFlags::default(), V).unwrap();
        let eps = batch();
        let refs: Vec<&Episode> = eps[..2].iter().collect();
        let report = model.gradcheck(&refs, &GradcheckOptions::default()).unwrap();
        for b in &report.blocks {
            assert!(b.passed, "{kernel:?} {}: {}", b.name, b.max_rel_err);
        }
        assert!(report.max_rel_err() < 1e-4);
    }
}

#[test]
fn corrupted_block_fails_the_check() {
    let model = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let eps = batch();
    let refs: Vec<&Episode> = eps[..2].iter().collect();
    let opts = GradcheckOptions {
        corrupt_block: Some("head.w2".into()),
        ..Default::default()
    };
    let report = model.gradcheck(&refs, &opts).unwrap();
    assert!(!report.passed());
    let failed: Vec<_> = report.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect();
    assert_eq!(failed, ["head.w2"]);
}

#[test]
fn permuting_patients_permutes_logits() {
    let model = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let eps = batch();
    let base = logits(&model, &eps);
    let perm = [2, 0, 1];
    let shuffled: Vec<Episode> = perm.iter().map(|&i| eps[i].clone()).collect();
    let out = logits(&model, &shuffled);
    for (row, &src) in perm.iter().enumerate() {
        assert!(max_diff(&out[row * 2..row * 2 + 2], &base[src * 2..src * 2 + 2]) < 1e-9);
    }
}

#[test]
fn time_shift_is_invisible_without_time_embedding() {
    let mut flags = AblationFlags::default();
    flags.disable("te").unwrap();
    let model = Dbgl::<f64>::new(tiny_config(), flags, V).unwrap();
    let eps = batch();
    let shifted: Vec<Episode> = eps
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.steps.iter_mut().for_each(|s| s.time += 13.25);
            e
        })
        .collect();
    assert!(max_diff(&logits(&model, &eps), &logits(&model, &shifted)) < 1e-9);

    let with_te = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    assert!(max_diff(&logits(&with_te, &eps), &logits(&with_te, &shifted)) > 1e-9);
}

#[test]
fn disabled_components_ignore_their_parameters() {
    let eps = batch();
    for (flag, prefix) in [("tde", "decay."), ("sna", "attn."), ("te", "edge.time_")] {
        let mut flags = AblationFlags::default();
        flags.disable(flag).unwrap();
        let mut model = Dbgl::<f64>::new(tiny_config(), flags, V).unwrap();
        let before = logits(&model, &eps);
        perturb(&mut model, prefix);
        assert_eq!(before, logits(&model, &eps), "{flag}");

        let mut full = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
        let before = logits(&full, &eps);
        perturb(&mut full, prefix);
        assert!(max_diff(&before, &logits(&full, &eps)) > 0.0, "{flag} has no effect when on");
    }

    // Without the hidden-state input or attention, nothing reads the bank.
    let mut flags = AblationFlags::default();
    flags.disable("hvs").unwrap();
    flags.disable("sna").unwrap();
    let mut model = Dbgl::<f64>::new(tiny_config(), flags, V).unwrap();
    let before = logits(&model, &eps);
    perturb(&mut model, "gate.");
    assert_eq!(before, logits(&model, &eps));
}

#[test]
fn codebook_off_means_no_codebook() {
    let eps = batch();
    let mut flags = AblationFlags::default();
    flags.disable("cb").unwrap();
    let mut model = Dbgl::<f64>::new(tiny_config(), flags, V).unwrap();
    assert!(!model.flags.use_mcv);
    assert!(model.params.names().iter().all(|n| !n.starts_with("codebook.")));
    // A stray codebook tensor is never read.
    let mut rng = dbgl::rng::seeded(5);
    dbgl::codebook::register_params(&mut model.params, &mut rng, 8, 8).unwrap();
    let before = logits(&model, &eps);
    perturb(&mut model, "codebook.");
    assert_eq!(before, logits(&model, &eps));

    let mut full = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let before = logits(&full, &eps);
    perturb(&mut full, "codebook.entries");
    assert!(max_diff(&before, &logits(&full, &eps)) > 0.0);
}

#[test]
fn retrieval_off_drops_the_code_vector() {
    let mut flags = AblationFlags::default();
    flags.disable("mcv").unwrap();
    let model = Dbgl::<f64>::new(tiny_config(), flags, V).unwrap();
    assert_eq!(model.params.get("head.w1").unwrap().shape(), &[8 + 3 * 8, 16]);
    let eps = batch();
    let refs: Vec<&Episode> = eps.iter().collect();
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    assert!(model.forward_on(&tape, &bound, &refs).unwrap().retrieved.is_none());
}

#[test]
fn decay_changes_outputs_on_uneven_gaps() {
    let model = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let mut off = model.clone();
    off.flags.use_tde = false;
    let eps = batch();
    assert!(max_diff(&logits(&model, &eps), &logits(&off, &eps)) > 1e-6);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let vars: Vec<String> = (0..V).map(|i| format!("v{i}")).collect();
    let mut model = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    for t in model.params.tensors_mut() {
        for x in t.data_mut() {
            *x = (*x * 1e3).sin() / 3.0;
        }
    }
    model.t_max = Some(40.0);
    model.save(&path, &vars).unwrap();
    let (back, names) = Dbgl::<f64>::load(&path).unwrap();
    assert_eq!(names, vars);
    assert_eq!(back, model);

    let small = Dbgl::<f32>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    small.save(&path, &vars).unwrap();
    assert_eq!(Dbgl::<f32>::load(&path).unwrap().0, small);
}

#[test]
fn f32_and_f64_agree_roughly() {
    let wide = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let narrow = Dbgl::<f32>::new(tiny_config(), AblationFlags::default(), V).unwrap();
    let eps = batch();
    let refs: Vec<&Episode> = eps.iter().collect();
    let a = wide.logits(&refs).unwrap();
    let b = narrow.logits(&refs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}

#[test]
fn training_is_deterministic() {
    let eps: Vec<Episode> = (0..12)
        .map(|i| episode(&format!("p{i}"), i as f64 * 0.1, if i % 2 == 0 { 1.0 } else { -1.0 }, i % 2))
        .collect();
    let data = Dataset::new((0..V).map(|i| format!("v{i}")).collect(), eps, 40.0, 2).unwrap();
    let run = || {
        let mut m = Dbgl::<f64>::new(tiny_config(), AblationFlags::default(), V).unwrap();
        let h = m.fit(&data, &data).unwrap();
        (serde_json::to_string(&h).unwrap(), m)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
}

#[test]
fn constant_half_predictor_has_quarter_brier() {
    let tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(&[2, 2]));
    let loss = tape.cross_entropy(l, &[0, 1]).unwrap();
    assert!((tape.item(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let r = dbgl::metrics::report(&[0.5, 0.5, 0.5, 0.5], &[0, 1], 2).unwrap();
    assert_eq!(r.brier, Some(0.25));
}

#[test]
fn loss_falls_over_the_first_five_epochs() {
    use dbgl::data::{synthesize, LabelRule, NormStats, SyntheticConfig};
    let mut falling = 0;
    for seed in 0..5 {
        let data = synthesize(&SyntheticConfig {
            n_episodes: 64,
            lambdas: vec![0.1, 1.0, 0.5, 2.0],
            label: LabelRule {
                coefficients: vec![vec![4.0, 0.0, 0.0, 0.0]],
                intercepts: vec![0.0],
                deterministic: true,
                ..Default::default()
            },
            seed,
            ..Default::default()
        })
        .unwrap();
        let data = data.normalized(&NormStats::fit(&data));
        let config = DbglConfig {
            d: 16,
            codebook_size: 64,
            epochs: 5,
            patience: 5,
            seed,
            ..Default::default()
        };
        let mut model = Dbgl::<f64>::new(config, AblationFlags::default(), 4).unwrap();
        let h = model.fit(&data, &data).unwrap();
        // One full batch per epoch: the first training loss is the initial
        // loss, and the fifth validation loss is the loss after five updates.
        falling += (h.epochs[4].val_loss < h.epochs[0].train_loss) as usize;
    }
    assert!(falling >= 4, "{falling}/5");
}
