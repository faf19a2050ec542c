//! Standard, PGD adversarial and TRADES training with shared PAF parameters.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationSpec, Family};
use crate::attacks::{self, Ascent, AttackSpec, Objective, Start};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{argmax_rows, Model, Network};
use crate::rng::{self, Stream};
use crate::tensor::{sign, Graph};

/// Standard deviation of the TRADES inner-maximization start.
pub const TRADES_START_SIGMA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    PgdAt,
    Trades,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::PgdAt => "pgd_at",
            Method::Trades => "trades",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Inner maximization, also used for the per-epoch PGD test accuracy.
    pub attack: AttackSpec,
    pub trades_beta: f64,
    pub lambda_beta: f64,
    pub beta_grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::PgdAt,
            epochs: 10,
            batch_size: 128,
            lr0: 0.1,
            attack: AttackSpec::pgd_linf(),
            trades_beta: 0.6,
            lambda_beta: 10.0,
            beta_grad_clip: 0.01,
            seed: 12345,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTraining(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be finite and >= 0");
        }
        if !(self.trades_beta >= 0.0) || !(self.lambda_beta >= 0.0) {
            return bad("trades_beta and lambda_beta must be >= 0");
        }
        if !(self.beta_grad_clip > 0.0) {
            return bad("beta_grad_clip must be > 0");
        }
        self.attack.validate()
    }
}

/// `lr0 · (1 + cos(πt/T)) / 2`.
pub fn cosine_lr(t: usize, horizon: usize, lr0: f64) -> Result<f64> {
    if t > horizon || horizon == 0 {
        return Err(Error::ScheduleOutOfRange { step: t, horizon });
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t as f64 / horizon as f64).cos()) / 2.0)
}

/// `λ|β|` for PSSiLU and 0 otherwise, returned with its derivative in β.
/// The derivative at β = 0 is 0.
pub fn paf_regularizer(spec: &ActivationSpec, lambda_beta: f64) -> (f64, f64) {
    if spec.family() != Family::Pssilu {
        return (0.0, 0.0);
    }
    let b = spec.beta();
    (lambda_beta * b.abs(), lambda_beta * sign(b))
}

/// Rescales a scalar gradient to magnitude at most `max_norm`.
pub fn clip_beta_grad(grad: f64, max_norm: f64) -> f64 {
    if grad.abs() > max_norm {
        grad * (max_norm / grad.abs())
    } else {
        grad
    }
}

/// Plain SGD on every learnable tensor, followed by the PAF domain clamp.
pub fn sgd_step(net: &mut Network, lr: f64) -> Result<()> {
    for (name, t) in net.params_mut() {
        if t.is_learnable() {
            let g = t
                .grad()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?
                .to_vec();
            t.data_mut().iter_mut().zip(&g).for_each(|(w, d)| *w -= lr * d);
        }
    }
    for name in ["paf.alpha", "paf.beta"] {
        let t = if name == "paf.alpha" { net.paf_alpha_mut() } else { net.paf_beta_mut() };
        if t.is_learnable() {
            let g = t.grad().ok_or_else(|| Error::MissingGradient(name.into()))?[0];
            t.data_mut()[0] -= lr * g;
        }
    }
    let (a, b) = (net.paf_alpha().item(), net.paf_beta().item());
    net.set_paf_params(a, b);
    debug_assert!(net.activation().validate().is_ok());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Mean training objective, regularizer included.
    pub loss: f64,
    /// Accuracy on the inputs the network was trained on (adversarial for PGD-AT).
    pub accuracy: f64,
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    rng::mix(rng::stream_seed(seed, Stream::Attack), ((epoch as u64) << 32) | batch as u64)
}

/// One pass over `data` with the configured method. `epoch` selects the
/// shuffle and attack streams.
pub fn run_epoch(net: &mut Network, data: &Dataset, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("cannot train on an empty dataset".into()));
    }
    let mut shuffle = rng::from_seed(rng::mix(rng::stream_seed(cfg.seed, Stream::Shuffle), epoch as u64));
    let order = data.shuffled_indices(&mut shuffle);
    let k = net.num_classes();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = data.batch(idx);
        let seed = batch_seed(cfg.seed, epoch, b);
        let n = y.len();
        let trades = cfg.method == Method::Trades && cfg.trades_beta > 0.0;
        let x_in = match cfg.method {
            Method::Standard | Method::Trades => x.clone(),
            Method::PgdAt => attacks::pgd(net, &x, &y, &cfg.attack.clone().with_seed(seed))?.x,
        };
        let x_adv = if trades {
            let nat = net.logits(&x)?;
            let a = Ascent {
                start: Start::Gaussian(TRADES_START_SIGMA),
                seed,
                ..Ascent::from_spec(&cfg.attack)
            };
            Some(attacks::projected_ascent(net, &x, Objective::Kl(nat.data()), None, &a, 0)?.x)
        } else {
            None
        };

        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let xv = g.constant(&x_in);
        let logits = net.forward_bound(&mut g, &bound, xv)?;
        let mut loss = g.softmax_cross_entropy(logits, &y)?;
        if let Some(xa) = &x_adv {
            let av = g.constant(xa);
            let adv_logits = net.forward_bound(&mut g, &bound, av)?;
            let kl = g.kl_divergence(logits, adv_logits)?;
            let kl = g.scale(kl, cfg.trades_beta);
            loss = g.add(loss, kl)?;
        }
        g.backward(loss)?;
        net.zero_grad();
        net.accumulate_grads(&g, &bound)?;

        let (reg, dreg) = paf_regularizer(&net.activation(), cfg.lambda_beta);
        if net.paf_beta().is_learnable() {
            let clip = cfg.beta_grad_clip;
            let beta = net.paf_beta_mut();
            if beta.grad().is_none() {
                beta.accumulate_grad(&[0.0])?;
            }
            let gb = beta.grad_mut().expect("allocated above");
            gb[0] = clip_beta_grad(gb[0] + dreg, clip);
        }

        loss_sum += (g.item(loss) + reg) * n as f64;
        correct += argmax_rows(g.value(logits), k)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
        sgd_step(net, lr)?;
    }
    Ok(EpochMetrics {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

pub fn standard_epoch(net: &mut Network, data: &Dataset, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<EpochMetrics> {
    run_epoch(net, data, &TrainConfig { method: Method::Standard, ..cfg.clone() }, epoch, lr)
}

pub fn pgd_at_epoch(net: &mut Network, data: &Dataset, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<EpochMetrics> {
    if cfg.method != Method::PgdAt {
        return Err(Error::InvalidTraining(format!("pgd_at_epoch called with method {}", cfg.method.name())));
    }
    run_epoch(net, data, cfg, epoch, lr)
}

pub fn trades_epoch(net: &mut Network, data: &Dataset, cfg: &TrainConfig, epoch: usize, lr: f64) -> Result<EpochMetrics> {
    if cfg.method != Method::Trades {
        return Err(Error::InvalidTraining(format!("trades_epoch called with method {}", cfg.method.name())));
    }
    run_epoch(net, data, cfg, epoch, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub loss: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History(pub Vec<EpochRecord>);

impl History {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.0 {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub net: Network,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: History,
    pub best: BestCheckpoint,
}

/// Clean and PGD accuracy of `net` on `test` under `cfg.attack`.
pub fn evaluate(net: &Network, test: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let spec = cfg.attack.clone().with_seed(rng::stream_seed(cfg.seed, Stream::Eval));
    let eval = attacks::robust_accuracy(net, test, &spec)?;
    Ok((eval.clean_accuracy, eval.robust_accuracy))
}

/// Trains for `cfg.epochs` with a per-epoch cosine schedule. The best
/// checkpoint maximizes PGD test accuracy (clean accuracy for standard
/// training); ties keep the earlier epoch.
pub fn train(mut net: Network, train_data: &Dataset, test_data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestCheckpoint> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let m = run_epoch(&mut net, train_data, cfg, epoch, lr)?;
        let (clean_acc, pgd_acc) = evaluate(&net, test_data, cfg)?;
        history.push(EpochRecord {
            epoch,
            lr,
            clean_acc,
            pgd_acc,
            loss: m.loss,
            alpha: net.activation().alpha(),
            beta: net.activation().beta(),
        });
        let score = |c: f64, p: f64| if cfg.method == Method::Standard { c } else { p };
        if best.as_ref().is_none_or(|b| score(clean_acc, pgd_acc) > score(b.clean_acc, b.pgd_acc)) {
            best = Some(BestCheckpoint {
                epoch,
                clean_acc,
                pgd_acc,
                net: net.clone(),
            });
        }
    }
    net.zero_grad();
    Ok(TrainOutcome {
        net,
        history: History(history),
        best: best.expect("epochs >= 1"),
    })
}
