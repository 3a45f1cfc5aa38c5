use alc_core::datamodel::LabeledExample;
use alc_core::linkage::{classifiable_newborns, match_newborns};
use alc_core::net::{forward, init_params, Batch, Dims};
use alc_core::noise::estimate_corruption_matrix;
use alc_core::synth::{build_datasets, generate_cohort, Datasets, SynthConfig};
use alc_core::train::{train, Method, TrainConfig};
use alc_core::Error;

fn corpus(n_mothers: usize) -> (Datasets, usize) {
    let cfg = SynthConfig {
        n_mothers,
        ..SynthConfig::default()
    };
    let c = generate_cohort(&cfg).unwrap();
    let eligible = classifiable_newborns(&c.newborns, &c.vocab).unwrap();
    let links = match_newborns(&c.mothers, &eligible, 3, 1440);
    (build_datasets(&c.mothers, &c.newborns, &links, &c.vocab, &cfg).unwrap(), c.vocab.size())
}

fn small_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        n_epochs: 2,
        d_emb: 8,
        d_hidden: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible_and_seed_dependent() {
    let (d, v) = corpus(800);
    let c = estimate_corruption_matrix(&d.d_prime).unwrap();
    let run = |seed| {
        let cfg = small_config(Method::Alc, seed);
        let p = init_params(Dims::new(v, 8, 8).unwrap(), 1);
        train(p, &d.d_star, &d.d_tilde, Some(&c), &cfg).unwrap()
    };
    let (a, b, other) = (run(3), run(3), run(4));
    assert_eq!(a.params, b.params);
    assert_eq!(a.log_csv(), b.log_csv());
    assert_ne!(a.params, other.params);
    let threaded = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run(3));
    assert_eq!(threaded.params, a.params);
}

#[test]
fn glc_orders_reach_different_parameters() {
    let (d, v) = corpus(800);
    let c = estimate_corruption_matrix(&d.d_prime).unwrap();
    let p = init_params(Dims::new(v, 8, 8).unwrap(), 2);
    let a = train(p.clone(), &d.d_star, &d.d_tilde, Some(&c), &small_config(Method::GlcNoisyThenClean, 1)).unwrap();
    let b = train(p, &d.d_star, &d.d_tilde, Some(&c), &small_config(Method::GlcCleanThenNoisy, 1)).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn empty_required_dataset_names_the_epoch() {
    let (d, v) = corpus(800);
    let p = init_params(Dims::new(v, 8, 8).unwrap(), 2);
    let err = train(p, &d.d_star, &[], None, &small_config(Method::NoLcNoisy, 1)).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset(_)), "{err}");
    assert!(err.to_string().contains("epoch 0"), "{err}");
}

#[test]
fn corrected_methods_require_a_matrix() {
    let (d, v) = corpus(800);
    let p = init_params(Dims::new(v, 8, 8).unwrap(), 2);
    assert!(train(p, &d.d_star, &d.d_tilde, None, &small_config(Method::Alc, 1)).is_err());
}

#[test]
fn fresh_models_give_finite_probabilities() {
    let (d, v) = corpus(500);
    let batch = Batch::from_examples(d.d_star.iter().take(16).map(|e: &LabeledExample| (e, e.clean_label.unwrap())));
    for seed in 0..100 {
        let p = init_params(Dims::new(v, 16, 16).unwrap(), seed);
        for t in forward(&batch, &p).unwrap() {
            assert!(t.probs.iter().all(|x| x.is_finite() && *x > 0.0));
            assert!((t.probs[0] + t.probs[1] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn alc_training_loss_decreases_on_default_corpus() {
    let (d, v) = corpus(SynthConfig::default().n_mothers);
    let c = estimate_corruption_matrix(&d.d_prime).unwrap();
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let p = init_params(Dims::new(v, cfg.d_emb, cfg.d_hidden).unwrap(), seed);
        let out = train(p, &d.d_star, &d.d_tilde, Some(&c), &cfg).unwrap();
        let first = out.log.first().unwrap().mean_loss;
        let last = out.log.last().unwrap().mean_loss;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}
