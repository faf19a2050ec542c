use paf_core::activations::{ActivationSpec, Family};
use paf_core::attacks::{robust_accuracy, AttackSpec};
use paf_core::data::{separable_halfspace, two_moons, two_moons_margin};
use paf_core::training::{cosine_lr, run_epoch, train, Method, TrainConfig};
use paf_core::{Graph, Model, Network};

fn small_cfg(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 4,
        batch_size: 16,
        lr0: 0.1,
        attack: AttackSpec::pgd_linf().with_epsilon(0.05),
        ..TrainConfig::default()
    }
}

fn net(family: Family, seed: u64) -> Network {
    Network::mlp(&[2, 16, 2], ActivationSpec::at_anchor(family), seed).unwrap()
}

fn params_of(net: &Network) -> Vec<f64> {
    let mut v: Vec<f64> = net.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    v.extend([net.paf_alpha().item(), net.paf_beta().item()]);
    v
}

fn run(net: &mut Network, cfg: &TrainConfig) -> Vec<f64> {
    let data = two_moons(64, 0.1, 3).unwrap();
    let mut losses = Vec::new();
    for e in 0..cfg.epochs {
        let lr = cosine_lr(e, cfg.epochs, cfg.lr0).unwrap();
        losses.push(run_epoch(net, &data, cfg, e, lr).unwrap().loss);
    }
    losses
}

#[test]
fn zero_budget_pgd_at_is_standard_training() {
    for family in [Family::Relu, Family::Pssilu] {
        let mut a = net(family, 1);
        let mut b = a.clone();
        let std_cfg = small_cfg(Method::Standard);
        let at_cfg = TrainConfig {
            attack: std_cfg.attack.clone().with_epsilon(0.0),
            ..small_cfg(Method::PgdAt)
        };
        let la = run(&mut a, &std_cfg);
        let lb = run(&mut b, &at_cfg);
        assert_eq!(la, lb);
        assert_eq!(params_of(&a), params_of(&b));
    }
}

#[test]
fn trades_without_kl_weight_is_standard_training() {
    let mut a = net(Family::Psilu, 2);
    let mut b = a.clone();
    run(&mut a, &small_cfg(Method::Standard));
    run(
        &mut b,
        &TrainConfig {
            trades_beta: 0.0,
            ..small_cfg(Method::Trades)
        },
    );
    assert_eq!(params_of(&a), params_of(&b));
}

#[test]
fn trades_with_zero_budget_adds_nothing_to_the_loss() {
    let mut a = net(Family::Relu, 4);
    let mut b = a.clone();
    let cfg = small_cfg(Method::Trades);
    let la = run(&mut a, &TrainConfig { attack: cfg.attack.clone().with_epsilon(0.0), ..cfg });
    let lb = run(&mut b, &small_cfg(Method::Standard));
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut a = net(Family::Pssilu, 3);
    let before = params_of(&a);
    run(&mut a, &TrainConfig { lr0: 0.0, ..small_cfg(Method::PgdAt) });
    assert_eq!(before, params_of(&a));
}

#[test]
fn full_batch_descent_on_logistic_loss_is_monotone() {
    let data = separable_halfspace(80, 2, 0.05, 1).unwrap();
    let mut lin = Network::mlp(&[2, 2], ActivationSpec::nonparametric(Family::Relu), 0).unwrap();
    let cfg = TrainConfig {
        method: Method::Standard,
        batch_size: 80,
        ..TrainConfig::default()
    };
    let mut last = f64::INFINITY;
    for e in 0..200 {
        let loss = run_epoch(&mut lin, &data, &cfg, e, 0.5).unwrap().loss;
        assert!(loss <= last + 1e-12, "epoch {e}: {loss} > {last}");
        last = loss;
    }
    assert!(last < 0.3, "{last}");
}

#[test]
fn beta_moves_at_most_lr_times_clip_per_step() {
    let data = two_moons(64, 0.1, 5).unwrap();
    let mut n = Network::mlp(&[2, 8, 2], ActivationSpec::new(Family::Pssilu, 1.0, 0.5).unwrap(), 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        ..small_cfg(Method::PgdAt)
    };
    for e in 0..5 {
        let before = n.paf_beta().item();
        run_epoch(&mut n, &data, &cfg, e, 0.3).unwrap();
        let step = (n.paf_beta().item() - before).abs();
        assert!(step <= 0.3 * cfg.beta_grad_clip + 1e-15, "{step}");
    }
}

#[test]
fn adversarial_loss_dominates_clean_loss_on_a_linear_model() {
    let data = two_moons(64, 0.1, 2).unwrap();
    let lin = Network::mlp(&[2, 2], ActivationSpec::nonparametric(Family::Relu), 3).unwrap();
    let ce = |x: &paf_core::Tensor| {
        let mut g = Graph::new();
        let z = g.constant(&lin.logits(x).unwrap());
        let l = g.softmax_cross_entropy(z, &data.y).unwrap();
        g.item(l)
    };
    let adv = paf_core::attacks::pgd(&lin, &data.x, &data.y, &AttackSpec::pgd_linf().with_epsilon(0.05)).unwrap();
    assert!(ce(&adv.x) >= ce(&data.x));
}

#[test]
fn history_and_best_checkpoint() {
    let train_data = two_moons(64, 0.1, 1).unwrap();
    let test = two_moons(32, 0.1, 2).unwrap();
    for method in [Method::Standard, Method::PgdAt] {
        let cfg = TrainConfig {
            epochs: 5,
            ..small_cfg(method)
        };
        let out = train(net(Family::Psilu, 7), &train_data, &test, &cfg).unwrap();
        assert_eq!(out.history.0.len(), 5);
        let score = |r: &paf_core::training::EpochRecord| if method == Method::Standard { r.clean_acc } else { r.pgd_acc };
        let max = out.history.0.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
        let first = out.history.0.iter().position(|r| score(r) == max).unwrap();
        assert_eq!(out.best.epoch, first);
        assert_eq!(score(&out.history.0[first]), max);
        assert!(out.history.0.iter().all(|r| r.lr >= 0.0 && r.lr <= cfg.lr0));
    }
}

#[test]
fn training_is_bit_reproducible() {
    let train_data = two_moons(64, 0.1, 1).unwrap();
    let test = two_moons(32, 0.1, 2).unwrap();
    let cfg = small_cfg(Method::Trades);
    let a = train(net(Family::Pssilu, 7), &train_data, &test, &cfg).unwrap();
    let b = train(net(Family::Pssilu, 7), &train_data, &test, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(params_of(&a.net), params_of(&b.net));
    let other = train(net(Family::Pssilu, 7), &train_data, &test, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(params_of(&a.net), params_of(&other.net));
}

#[test]
fn pgd_at_reaches_high_robust_train_accuracy_on_clean_moons() {
    let data = two_moons(1000, 0.0, 11).unwrap();
    let eps = two_moons_margin() / 2.0;
    let attack = AttackSpec {
        epsilon: eps,
        step_size: eps / 4.0,
        ..AttackSpec::pgd_linf()
    };
    let cfg = TrainConfig {
        method: Method::PgdAt,
        epochs: 150,
        batch_size: 8,
        lr0: 0.1,
        attack: attack.clone(),
        ..TrainConfig::default()
    };
    let out = train(
        Network::mlp(&[2, 32, 32, 2], ActivationSpec::nonparametric(Family::Relu), 11).unwrap(),
        &data,
        &data,
        &cfg,
    )
    .unwrap();
    let eval = AttackSpec { steps: 20, ..attack };
    let acc = robust_accuracy(&out.net, &data, &eval).unwrap().robust_accuracy;
    assert!(acc >= 0.95, "robust train accuracy {acc}");
}
