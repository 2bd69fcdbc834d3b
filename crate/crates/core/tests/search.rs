use nasda::autodiff::{Tape, Var};
use nasda::data::{gen_two_moons_shift, BatchPlan, BatchStream, DomainPair, MoonsParams};
use nasda::optim::{AdamConfig, SgdConfig, SgdState};
use nasda::search::{
    arch_gradient, discrepancy_grad, hvp_central_difference, run_search, search_epoch, source_loss_grads,
    virtual_step, ArchGradConfig, EtaMode, SearchConfig, SearchModel, SearchState, SourceBatch, StepBatch,
    ToySupernet,
};
use nasda::search_space::{CandidateOpSet, NetworkConfig};
use nasda::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gaussian clusters in `dim` dimensions, one per class, centred at `±sep·e_k`.
fn clusters(n: usize, dim: usize, classes: usize, sep: f64, rng: &mut ChaCha8Rng) -> SourceBatch {
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = Tensor::randn(&[n, dim], 1.0, rng);
    for (i, &c) in y.iter().enumerate() {
        x.data_mut()[i * dim + c % dim] += if c < dim { sep } else { -sep };
    }
    SourceBatch { x, y }
}

fn toy_batch(seed: u64) -> (ToySupernet, Vec<Tensor>, Vec<Tensor>, StepBatch) {
    let toy = ToySupernet::new(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = toy.init_weights(&mut rng);
    let alpha = toy.init_alpha(&mut rng);
    let train = clusters(16, 4, 3, 1.5, &mut rng);
    let val = clusters(16, 4, 3, 1.5, &mut rng);
    let mut target = Tensor::randn(&[16, 4], 1.0, &mut rng);
    for v in target.data_mut().iter_mut().step_by(4) {
        *v += 1.0;
    }
    (toy, w, alpha, StepBatch { train, val, target })
}

fn cosine(a: &[Tensor], b: &[Tensor]) -> f64 {
    let flat = |t: &[Tensor]| t.iter().flat_map(|x| x.data().to_vec()).collect::<Vec<f64>>();
    let (a, b) = (flat(a), flat(b));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `F(α) = L_val(w − ξ ∇_w L_train(w, α), α) + λ · D(w, α)`, differentiated
/// by central differences in every component of `α`.
fn unrolled_oracle<M: SearchModel>(model: &M, w: &[Tensor], alpha: &[Tensor], b: &StepBatch, xi: f64, lambda: f64) -> Vec<Tensor> {
    let f = |a: &[Tensor]| -> f64 {
        let w_prime = virtual_step(model, w, a, &b.train, xi).unwrap();
        let val = source_loss_grads(model, &w_prime, a, &b.val, false, false).unwrap().loss;
        let (d, _) = discrepancy_grad(model, w, a, &b.val.x, &b.target).unwrap();
        val + lambda * d
    };
    let h = 1e-5;
    let mut out: Vec<Tensor> = alpha.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut work = alpha.to_vec();
    for i in 0..alpha.len() {
        for k in 0..alpha[i].numel() {
            let orig = alpha[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[k] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[k] = orig;
            out[i].data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

#[test]
fn approximate_gradient_tracks_unrolled_oracle() {
    for seed in 0..5 {
        let (toy, w, alpha, batch) = toy_batch(seed);
        let cfg = ArchGradConfig {
            xi: 0.1,
            lambda: 1.0,
            eta: EtaMode::default(),
        };
        let approx = arch_gradient(&toy, &w, &alpha, &batch, &cfg).unwrap();
        let exact = unrolled_oracle(&toy, &w, &alpha, &batch, cfg.xi, cfg.lambda);
        let c = cosine(&approx.grad, &exact);
        assert!(c > 0.99, "seed {seed}: cosine {c}");
    }
}

/// `L(w, α) = αᵀ A w`: the mixed second derivative is `A` itself.
struct Bilinear {
    a: Tensor,
}

impl SearchModel for Bilinear {
    fn source_loss(&self, tape: &mut Tape, w: &[Var], alpha: &[Var], _: &SourceBatch) -> Result<Var> {
        let a = tape.constant(self.a.clone());
        let wa = tape.linear(w[0], a, None)?;
        let prod = tape.mul(wa, alpha[0])?;
        Ok(tape.sum(prod))
    }

    fn discrepancy(&self, tape: &mut Tape, _: &[Var], _: &[Var], _: &Tensor, _: &Tensor) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }
}

#[test]
fn bilinear_hvp_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Bilinear {
        a: Tensor::randn(&[3, 4], 1.0, &mut rng),
    };
    let w = vec![Tensor::randn(&[1, 4], 1.0, &mut rng)];
    let alpha = vec![Tensor::randn(&[1, 3], 1.0, &mut rng)];
    let v = vec![Tensor::randn(&[1, 4], 1.0, &mut rng)];
    let batch = SourceBatch {
        x: Tensor::zeros(&[1, 1]),
        y: vec![0],
    };
    let norm = v[0].norm_sq().sqrt();
    let hvp = hvp_central_difference(&model, &w, &alpha, &batch, &v, 0.01 / norm).unwrap();
    for r in 0..3 {
        let expect: f64 = (0..4).map(|c| model.a.data()[r * 4 + c] * v[0].data()[c]).sum();
        assert!((hvp[0].data()[r] - expect).abs() < 1e-10, "row {r}: {} vs {expect}", hvp[0].data()[r]);
    }
}

#[test]
fn hvp_is_stable_across_eta() {
    let (toy, w, alpha, batch) = toy_batch(7);
    let w_prime = virtual_step(&toy, &w, &alpha, &batch.train, 0.1).unwrap();
    let v = source_loss_grads(&toy, &w_prime, &alpha, &batch.val, true, false).unwrap().w.unwrap();
    let norm = v.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    let coarse = hvp_central_difference(&toy, &w, &alpha, &batch.train, &v, 1e-2 / norm).unwrap();
    let fine = hvp_central_difference(&toy, &w, &alpha, &batch.train, &v, 1e-3 / norm).unwrap();
    for (a, b) in coarse[0].data().iter().zip(fine[0].data()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn identical_domains_give_zero_discrepancy_gradient() {
    let (toy, w, alpha, batch) = toy_batch(2);
    let (d, g) = discrepancy_grad(&toy, &w, &alpha, &batch.val.x, &batch.val.x).unwrap();
    assert_eq!(d, 0.0);
    assert!(g[0].data().iter().all(|&v| v == 0.0));
}

fn tiny_pair(n: usize, size: usize, seed: u64) -> DomainPair {
    gen_two_moons_shift(&MoonsParams {
        n,
        size,
        rotation_deg: 45.0,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_search(seed: u64) -> SearchConfig {
    SearchConfig {
        network: NetworkConfig::new(2, 2, 3, 2),
        grad: ArchGradConfig::default(),
        weight_lr: 0.025,
        momentum: 0.9,
        weight_decay: 3e-4,
        grad_clip: Some(5.0),
        arch_optimizer: AdamConfig::default(),
        epochs: 1,
        batch: BatchPlan {
            batch_size: 16,
            seed,
            split: 0.5,
        },
        seed,
    }
}

#[test]
fn supernet_weights_survive_arch_gradient_bitwise() {
    let pair = tiny_pair(32, 8, 1);
    let cfg = tiny_search(1);
    let ops = CandidateOpSet::standard();
    let (model, state) = SearchState::init(&cfg, &ops).unwrap();
    let stream = BatchStream::for_pair(&pair, cfg.batch).unwrap();
    let b = &stream.search_epoch(0).batches[0];
    let idx = |v: &[usize]| nasda::data::gather(&pair.source, v);
    let (xt, yt) = idx(&b.train);
    let (xv, yv) = idx(&b.val);
    let batch = StepBatch {
        train: SourceBatch { x: xt, y: yt },
        val: SourceBatch { x: xv, y: yv },
        target: pair.target.x.select(&b.target),
    };
    let before: Vec<u64> = state.weights.flatten().iter().map(|v| v.to_bits()).collect();
    let g = arch_gradient(&model, state.weights.tensors(), state.alpha.tensors(), &batch, &cfg.grad).unwrap();
    let after: Vec<u64> = state.weights.flatten().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert!(g.eta.is_some() && g.discrepancy.is_finite());
}

#[test]
fn zero_learning_rates_freeze_the_search_state() {
    let pair = tiny_pair(32, 8, 2);
    let mut cfg = tiny_search(2);
    cfg.weight_lr = 0.0;
    cfg.arch_optimizer.learning_rate = 0.0;
    let ops = CandidateOpSet::standard();
    let (model, mut state) = SearchState::init(&cfg, &ops).unwrap();
    let (w0, a0) = (state.weights.clone(), state.alpha.clone());
    let stream = BatchStream::for_pair(&pair, cfg.batch).unwrap();
    let m = search_epoch(&model, &mut state, &cfg, &pair, &stream).unwrap();
    assert_eq!(m.steps, 1);
    assert_eq!(state.weights, w0);
    assert_eq!(state.alpha, a0);
}

#[test]
fn identical_seeded_searches_agree() {
    let pair = tiny_pair(64, 8, 3);
    let cfg = tiny_search(3);
    let ops = CandidateOpSet::standard();
    let a = run_search(&cfg, &ops, &pair, &mut |_, _| Ok(())).unwrap();
    let b = run_search(&cfg, &ops, &pair, &mut |_, _| Ok(())).unwrap();
    let ga = a.genotype.expect("completed");
    ga.validate().unwrap();
    assert_eq!(Some(ga), b.genotype);
    assert_eq!(a.state.alpha, b.state.alpha);
    assert_eq!(a.history, b.history);
}

/// Median of pooled pairwise squared distances, five scales around it.
fn oracle_bank(f: &[Vec<f64>]) -> Vec<f64> {
    let mut d = Vec::new();
    for i in 0..f.len() {
        for j in (i + 1)..f.len() {
            d.push(f[i].iter().zip(&f[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    d.sort_by(f64::total_cmp);
    let med = if d.len() % 2 == 1 { d[d.len() / 2] } else { 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]) };
    [-2, -1, 0, 1, 2].iter().map(|&u| 1.0 / (2.0 * med * 2f64.powi(u))).collect()
}

fn oracle_quadratic(s: &[Vec<f64>], t: &[Vec<f64>], gammas: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        gammas.iter().map(|g| (-g * d2).exp()).sum::<f64>() / gammas.len() as f64
    };
    let m = s.len();
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(&s[i], &s[j]);
                yy += k(&t[i], &t[j]);
                xy += k(&s[i], &t[j]);
            }
        }
    }
    (xx + yy - 2.0 * xy) / (m * (m - 1)) as f64
}

#[test]
fn step_discrepancy_matches_quadratic_oracle() {
    let pair = tiny_pair(256, 8, 4);
    let mut cfg = tiny_search(4);
    cfg.network = NetworkConfig::new(2, 1, 3, 2);
    let ops = CandidateOpSet::standard();
    let (model, state) = SearchState::init(&cfg, &ops).unwrap();
    let (xs, xt) = (&pair.source.x, &pair.target.x);

    let mut tape = Tape::new();
    let w = state.weights.bind_frozen(&mut tape);
    let a = state.alpha.bind_frozen(&mut tape);
    let d = model.discrepancy(&mut tape, &w, &a, xs, xt).unwrap();
    let linear = tape.value(d).item();
    drop(tape);

    let (fs, ft) = model.features(state.weights.tensors(), state.alpha.tensors(), xs, xt).unwrap();
    let rows = |t: &Tensor| (0..t.len0()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let (s, t) = (rows(&fs), rows(&ft));
    let pooled: Vec<Vec<f64>> = s.iter().chain(&t).cloned().collect();
    let quad = oracle_quadratic(&s, &t, &oracle_bank(&pooled));
    assert!((linear - quad).abs() < 0.05, "linear {linear} vs quadratic {quad}");
}

/// With `λ = 0` and `ξ = 0` the search is alternating first-order descent;
/// on separable clusters the validation loss falls every epoch.
#[test]
fn degenerate_search_descends_on_separable_data() {
    let toy = ToySupernet::new(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut w = toy.init_weights(&mut rng);
    let mut alpha = toy.init_alpha(&mut rng);
    let train: Vec<SourceBatch> = (0..4).map(|_| clusters(16, 4, 3, 3.0, &mut rng)).collect();
    let val: Vec<SourceBatch> = (0..4).map(|_| clusters(16, 4, 3, 3.0, &mut rng)).collect();
    let cfg = ArchGradConfig {
        xi: 0.0,
        lambda: 0.0,
        eta: EtaMode::default(),
    };
    let sgd = |lr| SgdConfig {
        learning_rate: lr,
        momentum: 0.0,
        weight_decay: 0.0,
        grad_clip: None,
    };
    let mut w_opt = SgdState::new(sgd(0.05), &w);
    let mut a_opt = SgdState::new(sgd(0.05), &alpha);
    let val_loss = |w: &[Tensor], a: &[Tensor]| -> f64 {
        val.iter().map(|b| source_loss_grads(&toy, w, a, b, false, false).unwrap().loss).sum::<f64>() / 4.0
    };
    let mut last = val_loss(&w, &alpha);
    for epoch in 0..10 {
        for (t, v) in train.iter().zip(&val) {
            let batch = StepBatch {
                train: t.clone(),
                val: v.clone(),
                target: v.x.clone(),
            };
            let g = arch_gradient(&toy, &w, &alpha, &batch, &cfg).unwrap();
            assert!(g.eta.is_none());
            a_opt.step(&mut alpha, &g.grad).unwrap();
            let gw = source_loss_grads(&toy, &w, &alpha, t, true, false).unwrap().w.unwrap();
            w_opt.step(&mut w, &gw).unwrap();
        }
        let now = val_loss(&w, &alpha);
        assert!(now < last, "epoch {epoch}: {last} -> {now}");
        last = now;
    }
}
