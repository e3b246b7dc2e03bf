mod common;

use userbert::checkpoint::Checkpoint;
use userbert::config::TrainConfig;
use userbert::datagen::{generate_dataset, GeneratorConfig, Label, TaskSpec};
use userbert::encoder::encoder_forward;
use userbert::experiment::{prepare_run, pretrain_fresh};
use userbert::gradients::compute_gradients;
use userbert::input::assemble_input_sequence;
use userbert::metrics::roc_auc;
use userbert::optim::adam_step;
use userbert::params::VocabLayout;
use userbert::tokenizer::segment_short_term;
use userbert::training::{
    eligible_users, finetune, finetune_start, pretrain, pretrain_batch, FinetuneData,
    FinetuneOptions, PretrainState,
};

#[test]
fn generator_is_reproducible() {
    let cfg = GeneratorConfig {
        num_users: 40,
        ..GeneratorConfig::default()
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&GeneratorConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn generated_sessions_match_planted_counts() {
    let prep = prepare_run(&common::small_run(300)).unwrap();
    for (user, profile) in prep.users.iter().zip(&prep.profiles) {
        assert_eq!(user.user_id, profile.user_id);
        let words = segment_short_term(&user.short_term_events, &prep.windows).unwrap();
        assert_eq!(words.len(), profile.session_count, "{}", user.user_id);
    }
}

/// Logistic regression on normalized genre histograms; the planted latent
/// must be linearly visible in behavior for any model to learn it.
#[test]
fn behavior_carries_the_targeting_signal() {
    let prep = prepare_run(&common::small_run(800)).unwrap();
    let labels = prep
        .labels(&TaskSpec::default_targeting(prep.generator.latent_dim))
        .unwrap();
    let genre = prep.registry.schemas().long_term.position("genre").unwrap();
    let dim = prep
        .registry
        .vocab_size_at(userbert::vocab::SegmentKind::LongTerm, genre);
    let by_id: std::collections::HashMap<&str, &userbert::tokenizer::TokenizedUser> = prep
        .tokens
        .iter()
        .map(|u| (u.user_id.as_str(), u))
        .collect();
    let features = |i: usize| -> Vec<f64> {
        let u = by_id[labels.examples[i].user_id.as_str()];
        let mut x = vec![0.0; dim];
        let mut n = 0.0;
        for a in u.long_words.iter().flat_map(|w| &w.actions) {
            x[a[genre] as usize] += 1.0;
            n += 1.0;
        }
        x.iter_mut().for_each(|v| *v /= f64::max(n, 1.0));
        x
    };
    let label = |i: usize| match labels.examples[i].label {
        Label::Binary(b) => b,
        _ => unreachable!(),
    };
    let train: Vec<(Vec<f64>, u8)> = labels
        .train
        .iter()
        .map(|&i| (features(i), label(i)))
        .collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..300 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let d = 1.0 / (1.0 + (-z).exp()) - *y as f64;
            gb += d;
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += d * a);
        }
        let n = train.len() as f64;
        b -= gb / n;
        w.iter_mut()
            .zip(&gw)
            .for_each(|(wi, g)| *wi -= 50.0 * g / n + 1e-3 * *wi);
    }
    let (scores, ys): (Vec<f64>, Vec<u8>) = labels
        .test
        .iter()
        .map(|&i| {
            (
                b + features(i).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>(),
                label(i),
            )
        })
        .unzip();
    let auc = roc_auc(&scores, &ys).unwrap();
    assert!(auc > 0.6, "probe auc {auc}");
}

#[test]
fn checkpoint_preserves_forward_and_next_step() {
    let cfg = common::small_run(60);
    let prep = prepare_run(&cfg).unwrap();
    let (state, _) =
        pretrain_fresh(&prep.tokens, &prep.registry, &cfg.model, &cfg.train, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint::new(
        cfg.model.clone(),
        &prep.registry,
        state.params.clone(),
        Some(state.optimizer.clone()),
        state.step,
        cfg.train.seed,
    );
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load_for(&path, &prep.registry).unwrap();
    assert_eq!(loaded.params, state.params);

    let user = &prep.tokens[0];
    let forward = |p| {
        let seq = assemble_input_sequence(user, p, &cfg.model).unwrap();
        encoder_forward(&seq.embeddings, p, &cfg.model, None)
            .unwrap()
            .hidden
    };
    let (a, b) = (forward(&state.params), forward(&loaded.params));
    assert!(a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| x.to_bits() == y.to_bits()));

    let eligible = eligible_users(&prep.tokens);
    let (batch, mut rngs) = pretrain_batch(
        &prep.tokens,
        &eligible,
        &state.params,
        &cfg.model,
        &cfg.train,
        state.step,
    )
    .unwrap();
    let (_, grads) =
        compute_gradients(&batch, &state.params, &cfg.model, &mut rngs, 1.0, 0).unwrap();
    let (mut p1, mut o1) = (state.params.clone(), state.optimizer.clone());
    let (mut p2, mut o2) = (loaded.params.clone(), loaded.optimizer.clone().unwrap());
    adam_step(&mut p1, &grads, &mut o1).unwrap();
    adam_step(&mut p2, &grads, &mut o2).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(o1, o2);
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let cfg = common::small_run(60);
    let prep = prepare_run(&cfg).unwrap();
    let (straight, log) =
        pretrain_fresh(&prep.tokens, &prep.registry, &cfg.model, &cfg.train, 6).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let (half, first) =
        pretrain_fresh(&prep.tokens, &prep.registry, &cfg.model, &cfg.train, 3).unwrap();
    Checkpoint::new(
        cfg.model.clone(),
        &prep.registry,
        half.params,
        Some(half.optimizer),
        half.step,
        0,
    )
    .save(&path)
    .unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut state = PretrainState {
        params: ckpt.params,
        optimizer: ckpt.optimizer.unwrap(),
        step: ckpt.step,
    };
    let second = pretrain(
        &prep.tokens,
        &prep.registry,
        &cfg.model,
        &cfg.train,
        &mut state,
        3,
        |_, _| Ok(()),
    )
    .unwrap();
    let resumed: Vec<f64> = first.losses().into_iter().chain(second.losses()).collect();
    assert_eq!(resumed, log.losses());
    assert_eq!(state.params, straight.params);
}

#[test]
fn small_finetune_runs_end_to_end() {
    let cfg = common::small_run(100);
    let prep = prepare_run(&cfg).unwrap();
    let (state, log) =
        pretrain_fresh(&prep.tokens, &prep.registry, &cfg.model, &cfg.train, 4).unwrap();
    assert!(log.losses().iter().all(|l| l.is_finite() && *l > 0.0));
    let labels = prep
        .labels(&TaskSpec::default_targeting(prep.generator.latent_dim))
        .unwrap();
    let data = FinetuneData::build(&labels, &prep.tokens, &prep.registry, Some(40), 0).unwrap();
    assert_eq!(data.train.len(), 40);
    let train = TrainConfig {
        finetune_epochs: 2,
        ..cfg.train.clone()
    };
    let vocab = VocabLayout::from_registry(&prep.registry);
    let start = finetune_start(Some(&state.params), &cfg.model, &vocab, 0).unwrap();
    let options = FinetuneOptions {
        epochs: 2,
        eval_train: true,
    };
    let out = finetune(start, &data, &cfg.model, &train, options).unwrap();
    assert_eq!(out.epochs.len(), 3);
    for e in &out.epochs {
        let auc = e.metric("roc_auc").unwrap();
        assert!((0.0..=1.0).contains(&auc));
        assert!(e.test_loss.is_finite() && e.train_loss.is_finite());
    }
}
