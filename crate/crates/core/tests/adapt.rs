use nasda::adapt::{
    adapt_step, adversarial_loss, argmax_rows, average_probs, run_adapt, AdaptConfig, AdaptState, ClassifierBank,
};
use nasda::autodiff::Tape;
use nasda::checkpoint::Checkpoint;
use nasda::data::{gather, gen_two_moons_shift, BatchPlan, DomainPair, MoonsParams};
use nasda::search_space::{ArchParams, CandidateOpSet, Genotype, NetworkConfig};
use nasda::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(n: usize) -> DomainPair {
    gen_two_moons_shift(&MoonsParams {
        n,
        rotation_deg: 45.0,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

fn genotype() -> Genotype {
    let ops = CandidateOpSet::standard();
    Genotype::discretize(&ArchParams::zeros(4, ops.len()), &ops, 2, 3).unwrap()
}

fn config(heads: usize, lr: f64) -> AdaptConfig {
    AdaptConfig {
        network: NetworkConfig::new(2, 2, 3, 0),
        heads,
        hidden: 16,
        repeats: 2,
        lr_step1: lr,
        lr_step2: lr,
        lr_step3: lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        grad_clip: None,
        epochs: 1,
        batch: BatchPlan {
            batch_size: 16,
            seed: 2,
            split: 0.5,
        },
        eval_batch: 32,
        seed: 9,
        source_only: false,
    }
}

fn batches(p: &DomainPair) -> (Tensor, Vec<usize>, Tensor) {
    let idx: Vec<usize> = (0..16).collect();
    let (xs, ys) = gather(&p.source, &idx);
    (xs, ys, p.target.x.select(&idx))
}

fn random_probs(n: usize, k: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::randn(&[n, k], 1.0, &mut rng));
    let p = tape.softmax(z).unwrap();
    tape.value(p).clone()
}

#[test]
fn four_heads_match_brute_force_pairs() {
    let heads: Vec<Tensor> = (0..4).map(|s| random_probs(5, 3, s)).collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = heads.iter().map(|h| tape.constant(h.clone())).collect();
    let loss = adversarial_loss(&mut tape, &vars).unwrap();
    let (mut sum, mut pairs) = (0.0, 0);
    for i in 0..4 {
        for j in 0..4 {
            if i < j {
                pairs += 1;
                for (a, b) in heads[i].data().iter().zip(heads[j].data()) {
                    sum += (a - b).abs();
                }
            }
        }
    }
    assert_eq!(pairs, 6);
    assert!((tape.value(loss).item() - sum / 5.0).abs() < 1e-12);
}

/// Heads on the corners of a simplex are pairwise equidistant (d = 2).
#[test]
fn equidistant_heads_scale_with_pair_count() {
    for n in 2..=5 {
        let mut tape = Tape::new();
        let vars: Vec<_> = (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[i] = 1.0;
                tape.constant(Tensor::new(vec![1, n], row).unwrap())
            })
            .collect();
        let loss = adversarial_loss(&mut tape, &vars).unwrap();
        assert_eq!(tape.value(loss).item(), 2.0 * (n * (n - 1) / 2) as f64);
    }
}

#[test]
fn averaged_prediction_is_a_distribution() {
    let heads: Vec<Tensor> = (0..3).map(|s| random_probs(8, 4, 10 + s)).collect();
    let avg = average_probs(&heads).unwrap();
    for r in 0..8 {
        assert!((avg.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let same = average_probs(&[heads[0].clone(), heads[0].clone()]).unwrap();
    assert_eq!(argmax_rows(&same), argmax_rows(&heads[0]));
}

#[test]
fn bank_rejects_degenerate_sizes() {
    assert!(ClassifierBank::new(0, 4, 8, 2).is_err());
    assert!(ClassifierBank::new(2, 4, 8, 1).is_err());
    let mut tape = Tape::new();
    let p = tape.constant(random_probs(2, 2, 0));
    assert!(matches!(adversarial_loss(&mut tape, &[p]), Err(Error::InvalidArgument(_))));
}

#[test]
fn zero_learning_rates_change_nothing() {
    let p = pair(64);
    let cfg = config(3, 0.0);
    let mut state = AdaptState::init(&cfg, &genotype(), 2).unwrap();
    let (g0, c0) = (state.g.clone(), state.c.clone());
    let (xs, ys, xt) = batches(&p);
    adapt_step(&mut state, &cfg, &xs, &ys, &xt).unwrap();
    assert_eq!(state.g, g0);
    assert_eq!(state.c, c0);
}

#[test]
fn frozen_partitions_stay_bitwise_fixed() {
    let p = pair(64);
    let cfg = config(4, 0.05);
    let mut state = AdaptState::init(&cfg, &genotype(), 2).unwrap();
    let (xs, ys, xt) = batches(&p);
    state.step_one(&xs, &ys).unwrap();

    let (g, c) = (state.g.clone(), state.c.clone());
    state.step_two(&xs, &ys, &xt).unwrap();
    assert_eq!(state.g.flatten(), g.flatten(), "step two touched the generator");
    assert_ne!(state.c, c);

    let c = state.c.clone();
    state.step_three(&xt).unwrap();
    assert_eq!(state.c.flatten(), c.flatten(), "step three touched the classifiers");
    assert_ne!(state.g, g);
}

/// A single small step of each adversarial update moves the disagreement on
/// the batch it was computed from in the intended direction.
#[test]
fn single_steps_move_disagreement_the_right_way() {
    let p = pair(64);
    for seed in 0..5 {
        let mut cfg = config(4, 1e-3);
        cfg.momentum = 0.0;
        cfg.weight_decay = 0.0;
        cfg.seed = seed;
        let mut state = AdaptState::init(&cfg, &genotype(), 2).unwrap();
        let (xs, ys, xt) = batches(&p);
        let before = state.adversarial_value(&xt).unwrap();
        state.step_two(&xs, &ys, &xt).unwrap();
        let after2 = state.adversarial_value(&xt).unwrap();
        assert!(after2 >= before - 1e-6, "seed {seed}: step two {before} -> {after2}");
        state.step_three(&xt).unwrap();
        let after3 = state.adversarial_value(&xt).unwrap();
        assert!(after3 <= after2 + 1e-6, "seed {seed}: step three {after2} -> {after3}");
    }
}

#[test]
fn target_labels_do_not_reach_training() {
    let p = pair(64);
    let cfg = config(2, 0.05);
    let mut shuffled = p.clone();
    shuffled.target.labels = p.target.labels.permuted(17);
    assert_ne!(shuffled.target.labels, p.target.labels);
    let a = run_adapt(&cfg, &genotype(), &p, &mut |_, _| Ok(())).unwrap();
    let b = run_adapt(&cfg, &genotype(), &shuffled, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a.state.g, b.state.g);
    assert_eq!(a.state.c, b.state.c);
    assert_eq!(a.report.source_accuracy, b.report.source_accuracy);
}

#[test]
fn zero_epochs_reports_untrained_ensemble() {
    let p = pair(64);
    let mut cfg = config(4, 0.05);
    cfg.epochs = 0;
    let out = run_adapt(&cfg, &genotype(), &p, &mut |_, _| panic!("no epochs expected")).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.report.epoch, 0);
    assert!((0.0..=1.0).contains(&out.report.target_accuracy));
    assert!((0.0..=1.0).contains(&out.report.disagreement));
}

#[test]
fn class_mismatch_is_rejected_before_training() {
    let p = pair(64);
    let mut cfg = config(2, 0.05);
    cfg.network.num_classes = 3;
    let err = run_adapt(&cfg, &genotype(), &p, &mut |_, _| panic!("must not train")).unwrap_err();
    assert!(matches!(err, Error::ClassMismatch(_)), "{err}");
}

#[test]
fn source_only_skips_adversarial_steps() {
    let p = pair(64);
    let mut cfg = config(2, 0.05);
    cfg.source_only = true;
    let mut state = AdaptState::init(&cfg, &genotype(), 2).unwrap();
    let (xs, ys, xt) = batches(&p);
    let m = adapt_step(&mut state, &cfg, &xs, &ys, &xt).unwrap();
    assert!(m.ce > 0.0);
    assert!(m.adv_after_step2.is_nan() && m.adv_after_step3.is_nan());
    // Momentum buffers of steps two and three never move.
    assert!(state.step2_c.momentum.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(state.step3_g.momentum.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn checkpoint_restores_adapt_state_exactly() {
    let p = pair(64);
    let cfg = config(2, 0.05);
    let mut seen = Vec::new();
    let out = run_adapt(&cfg, &genotype(), &p, &mut |s, _| {
        seen.push(Checkpoint::head_snapshot(s));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].epoch, 1);
    assert_eq!(seen[0].get_all("head").len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapt.ckpt");
    Checkpoint::from_adapt(&out.state).save(&path).unwrap();
    let mut fresh = AdaptState::init(&cfg, &genotype(), 2).unwrap();
    Checkpoint::load(&path).unwrap().restore_adapt(&mut fresh).unwrap();
    assert_eq!(fresh.g, out.state.g);
    assert_eq!(fresh.c, out.state.c);
    assert_eq!(fresh.step3_g, out.state.step3_g);
    assert_eq!(fresh.epoch, 1);
}
