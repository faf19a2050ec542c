//! White-box and black-box adversaries.
//!
//! All gradient attacks share one projected-ascent engine parameterised by
//! norm, objective and start distribution. Each sample owns an RNG stream
//! seeded with `seed ⊕ sample_index`, so results do not depend on batching.

use std::cell::Cell;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{argmax_rows, Model};
use crate::rng::{self, Rng};
use crate::tensor::{log_softmax_parts, sign, Graph, Tensor, Var};

/// Fraction of the shorter image side used for the first square patch.
pub const SQUARE_INITIAL_FRACTION: f64 = 0.3;

const DEFAULT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    PgdLinf,
    PgdL2,
    SquareSearch,
    MinRadius,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 5] = [
        AttackFamily::Fgsm,
        AttackFamily::PgdLinf,
        AttackFamily::PgdL2,
        AttackFamily::SquareSearch,
        AttackFamily::MinRadius,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::PgdLinf => "pgd_linf",
            AttackFamily::PgdL2 => "pgd_l2",
            AttackFamily::SquareSearch => "square_search",
            AttackFamily::MinRadius => "min_radius",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn norm(self) -> Norm {
        match self {
            AttackFamily::PgdL2 => Norm::L2,
            _ => Norm::Linf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.of(&d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub query_budget: usize,
    pub clip_range: [f64; 2],
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self::pgd_linf()
    }
}

impl AttackSpec {
    /// 10-step L∞ PGD, budget 0.031, step 0.0078.
    pub fn pgd_linf() -> Self {
        Self {
            family: AttackFamily::PgdLinf,
            epsilon: 0.031,
            step_size: 0.0078,
            steps: 10,
            restarts: 1,
            query_budget: 1000,
            clip_range: [0.0, 1.0],
            random_start: true,
            seed: 0,
        }
    }

    /// 10-step L2 PGD, budget 0.5, step 0.075.
    pub fn pgd_l2() -> Self {
        Self {
            family: AttackFamily::PgdL2,
            epsilon: 0.5,
            step_size: 0.075,
            ..Self::pgd_linf()
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            ..Self::pgd_linf()
        }
    }

    /// Score-based square search with budget 0.031 and 1000 queries.
    pub fn square() -> Self {
        Self {
            family: AttackFamily::SquareSearch,
            query_budget: 1000,
            ..Self::pgd_linf()
        }
    }

    /// PGD with 5 restarts of 50 steps (the white-box half of the ensemble).
    pub fn strong_pgd(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: 2.5 * epsilon / 50.0,
            steps: 50,
            restarts: 5,
            ..Self::pgd_linf()
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAttack(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.step_size >= 0.0) {
            return bad(format!("step_size must be >= 0, got {}", self.step_size));
        }
        if self.steps == 0 || self.restarts == 0 {
            return bad("steps and restarts must be at least 1".into());
        }
        if !(self.clip_range[0] < self.clip_range[1]) {
            return bad(format!("clip range {:?} is empty", self.clip_range));
        }
        if self.family == AttackFamily::SquareSearch && self.query_budget == 0 {
            return bad("query_budget must be at least 1".into());
        }
        Ok(())
    }
}

/// What the projected ascent maximizes.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Cross-entropy against the given labels.
    CrossEntropy(&'a [usize]),
    /// `KL(softmax(reference) || softmax(f(x)))`, reference held fixed.
    Kl(&'a [f64]),
    /// `‖f(x) − reference‖₁`.
    L1(&'a [f64]),
}

impl Objective<'_> {
    fn graph_loss(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        let n = g.shape(logits)[0] as f64;
        match *self {
            Objective::CrossEntropy(labels) => {
                let l = g.softmax_cross_entropy(logits, labels)?;
                Ok(g.scale(l, n))
            }
            Objective::Kl(reference) => {
                let r = g.input(g.shape(logits).to_vec(), reference.to_vec(), false)?;
                let l = g.kl_divergence(r, logits)?;
                Ok(g.scale(l, n))
            }
            Objective::L1(reference) => {
                let r = g.input(g.shape(logits).to_vec(), reference.to_vec(), false)?;
                let d = g.sub(logits, r)?;
                let a = g.abs(d);
                Ok(g.sum(a))
            }
        }
    }

    /// Per-sample objective values from a batch of logits.
    pub fn per_sample(&self, logits: &[f64], k: usize) -> Vec<f64> {
        match *self {
            Objective::CrossEntropy(labels) => logits
                .chunks(k)
                .zip(labels)
                .map(|(row, &y)| log_softmax_parts(row).0 - row[y])
                .collect(),
            Objective::Kl(reference) => logits
                .chunks(k)
                .zip(reference.chunks(k))
                .map(|(q, p)| {
                    let (lp, pp) = log_softmax_parts(p);
                    let (lq, _) = log_softmax_parts(q);
                    (0..k).map(|j| pp[j] * ((p[j] - lp) - (q[j] - lq))).sum()
                })
                .collect(),
            Objective::L1(reference) => logits
                .chunks(k)
                .zip(reference.chunks(k))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
                .collect(),
        }
    }
}

/// Gradient of the summed objective with respect to the input batch, plus
/// the logits at `x`.
pub fn input_gradient<M: Model + ?Sized>(model: &M, x: &Tensor, objective: Objective) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().requires_grad(true));
    let logits = model.logits_graph(&mut g, xv)?;
    let loss = objective.graph_loss(&mut g, logits)?;
    g.backward(loss)?;
    let grad = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((grad, g.value(logits).to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Start {
    /// Begin at the clean point.
    Clean,
    /// Uniform in the ε-ball of the attack norm.
    Uniform,
    /// Clean point plus `N(0, σ²)` noise, projected into the ball.
    Gaussian(f64),
}

/// Parameters of one projected-ascent run.
#[derive(Debug, Clone, Copy)]
pub struct Ascent {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub start: Start,
    pub clip: [f64; 2],
    pub seed: u64,
}

impl Ascent {
    pub fn from_spec(spec: &AttackSpec) -> Self {
        Self {
            norm: spec.family.norm(),
            epsilon: spec.epsilon,
            step_size: spec.step_size,
            steps: spec.steps,
            restarts: spec.restarts,
            start: if spec.random_start { Start::Uniform } else { Start::Clean },
            clip: spec.clip_range,
            seed: spec.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub x: Tensor,
    /// Objective value of each sample at the returned point.
    pub value: Vec<f64>,
    /// Misclassification at the returned point (CE objectives only).
    pub success: Vec<bool>,
}

/// Projects `x` into the `norm`-ball of radius `eps` around `x0`, then into `clip`.
pub fn project(x: &mut [f64], x0: &[f64], norm: Norm, eps: f64, clip: [f64; 2]) {
    match norm {
        Norm::Linf => {
            for (v, &c) in x.iter_mut().zip(x0) {
                *v = v.clamp(c - eps, c + eps);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.distance(x, x0);
            if n > eps {
                let s = if n > 0.0 { eps / n } else { 0.0 };
                for (v, &c) in x.iter_mut().zip(x0) {
                    *v = c + (*v - c) * s;
                }
            }
        }
    }
    for v in x.iter_mut() {
        *v = v.clamp(clip[0], clip[1]);
    }
}

fn random_start(rng: &mut Rng, x0: &[f64], a: &Ascent) -> Vec<f64> {
    let d = x0.len();
    let delta: Vec<f64> = match (a.start, a.norm) {
        (Start::Clean, _) => vec![0.0; d],
        (Start::Gaussian(s), _) => (0..d)
            .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
        (Start::Uniform, Norm::Linf) => (0..d).map(|_| a.epsilon * (2.0 * rng.random::<f64>() - 1.0)).collect(),
        (Start::Uniform, Norm::L2) => {
            let dir: Vec<f64> = (0..d)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            let n = Norm::L2.of(&dir);
            let r = a.epsilon * rng.random::<f64>().powf(1.0 / d as f64);
            dir.iter().map(|v| if n > 0.0 { v / n * r } else { 0.0 }).collect()
        }
    };
    let mut x: Vec<f64> = x0.iter().zip(&delta).map(|(a, b)| a + b).collect();
    project(&mut x, x0, a.norm, a.epsilon, a.clip);
    x
}

/// Multi-restart projected gradient ascent on a batch.
///
/// Sample `i` of the batch draws its starts from `seed ⊕ (first_index + i)`.
/// Across restarts, a misclassifying restart is preferred (when `labels` is
/// given), then the larger objective; ties keep the earlier restart.
pub fn projected_ascent<M: Model + ?Sized>(
    model: &M,
    x0: &Tensor,
    objective: Objective,
    labels: Option<&[usize]>,
    a: &Ascent,
    first_index: usize,
) -> Result<AscentResult> {
    let n = x0.shape()[0];
    let d = x0.numel() / n;
    let k = model.num_classes();
    let mut rngs: Vec<Rng> = (0..n)
        .map(|i| rng::sample_rng(a.seed, (first_index + i) as u64))
        .collect();
    let mut best: Option<AscentResult> = None;
    for _ in 0..a.restarts {
        let mut x = Vec::with_capacity(x0.numel());
        for (i, row) in x0.data().chunks(d).enumerate() {
            x.extend(random_start(&mut rngs[i], row, a));
        }
        let mut xt = Tensor::new(x0.shape().to_vec(), x)?;
        for _ in 0..a.steps {
            let (grad, _) = input_gradient(model, &xt, objective)?;
            let xs = xt.data_mut();
            for i in 0..n {
                let gi = &grad[i * d..(i + 1) * d];
                let xi = &mut xs[i * d..(i + 1) * d];
                match a.norm {
                    Norm::Linf => {
                        for (v, &gv) in xi.iter_mut().zip(gi) {
                            *v += a.step_size * sign(gv);
                        }
                    }
                    Norm::L2 => {
                        let gn = Norm::L2.of(gi);
                        if gn > 0.0 {
                            for (v, &gv) in xi.iter_mut().zip(gi) {
                                *v += a.step_size * gv / gn;
                            }
                        }
                    }
                }
                project(xi, &x0.data()[i * d..(i + 1) * d], a.norm, a.epsilon, a.clip);
            }
        }
        let logits = model.logits(&xt)?;
        let value = objective.per_sample(logits.data(), k);
        let success = match labels {
            Some(y) => argmax_rows(logits.data(), k)
                .iter()
                .zip(y)
                .map(|(p, t)| p != t)
                .collect(),
            None => vec![false; n],
        };
        let cand = AscentResult { x: xt, value, success };
        best = Some(match best {
            None => cand,
            Some(mut cur) => {
                for i in 0..n {
                    let better = (cand.success[i] && !cur.success[i])
                        || (cand.success[i] == cur.success[i] && cand.value[i] > cur.value[i]);
                    if better {
                        cur.x.data_mut()[i * d..(i + 1) * d].copy_from_slice(&cand.x.data()[i * d..(i + 1) * d]);
                        cur.value[i] = cand.value[i];
                        cur.success[i] = cand.success[i];
                    }
                }
                cur
            }
        });
    }
    Ok(best.expect("restarts >= 1"))
}

/// Single signed-gradient step of size ε from the clean point.
pub fn fgsm<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize], epsilon: f64, clip: [f64; 2]) -> Result<Tensor> {
    let spec = AttackSpec {
        clip_range: clip,
        ..AttackSpec::fgsm(epsilon)
    };
    spec.validate()?;
    Ok(projected_ascent(model, x, Objective::CrossEntropy(y), Some(y), &Ascent::from_spec(&spec), 0)?.x)
}

/// L∞ or L2 PGD on cross-entropy with uniform random starts.
pub fn pgd<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AscentResult> {
    pgd_indexed(model, x, y, spec, 0)
}

/// As [`pgd`], with sample RNG streams offset by `first_index`.
pub fn pgd_indexed<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    first_index: usize,
) -> Result<AscentResult> {
    spec.validate()?;
    match spec.family {
        AttackFamily::PgdLinf | AttackFamily::PgdL2 | AttackFamily::Fgsm => {}
        other => return Err(Error::InvalidAttack(format!("pgd cannot run family {}", other.name()))),
    }
    projected_ascent(
        model,
        x,
        Objective::CrossEntropy(y),
        Some(y),
        &Ascent::from_spec(spec),
        first_index,
    )
}

/// `z_y − max_{j≠y} z_j`; negative means misclassified.
pub fn margin(logits: &[f64], y: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[y] - other
}

#[derive(Debug, Clone)]
pub struct SquareResult {
    pub x_adv: Tensor,
    pub queries: usize,
    pub success: bool,
    /// Margin after initialization followed by every accepted proposal.
    pub accepted: Vec<f64>,
}

/// Patch side for the square search after `queries` model calls.
pub fn square_side(queries: usize, budget: usize, h: usize, w: usize) -> usize {
    let short = h.min(w);
    let initial = ((SQUARE_INITIAL_FRACTION * short as f64).ceil() as usize).clamp(1, short);
    let period = (budget / 5).max(1);
    let halvings = (queries / period).min(usize::BITS as usize - 1);
    (initial >> halvings).max(1)
}

/// Views a per-sample shape as `(channels, height, width)`.
fn image_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        2 => (1, shape[0], shape[1]),
        _ => {
            let w = shape[shape.len() - 1];
            let h = shape[shape.len() - 2];
            (shape[..shape.len() - 2].iter().product(), h, w)
        }
    }
}

/// Score-based L∞ random search with square patches. `x` is a single
/// sample with a leading batch dimension of 1. Only forward passes are used
/// and at most `budget` are made.
pub fn square_search<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    epsilon: f64,
    budget: usize,
    clip: [f64; 2],
    seed: u64,
) -> Result<SquareResult> {
    if budget == 0 {
        return Err(Error::InvalidAttack("query_budget must be at least 1".into()));
    }
    let (c, h, w) = image_dims(&x.shape()[1..]);
    let x0 = x.data();
    let mut rng = rng::from_seed(seed);
    let at = |ch: usize, r: usize, col: usize| (ch * h + r) * w + col;

    let mut best = x0.to_vec();
    for ch in 0..c {
        for col in 0..w {
            let s = if rng.random::<bool>() { epsilon } else { -epsilon };
            for r in 0..h {
                let i = at(ch, r, col);
                best[i] = (x0[i] + s).clamp(clip[0], clip[1]);
            }
        }
    }
    let query = |v: &[f64]| -> Result<f64> {
        let z = model.logits(&Tensor::new(x.shape().to_vec(), v.to_vec())?)?;
        Ok(margin(z.data(), y))
    };
    let mut best_margin = query(&best)?;
    let mut queries = 1;
    let mut accepted = vec![best_margin];
    while queries < budget && best_margin >= 0.0 {
        let side = square_side(queries, budget, h, w);
        let r0 = rng.random_range(0..=h - side);
        let c0 = rng.random_range(0..=w - side);
        let mut cand = best.clone();
        for ch in 0..c {
            let s = if rng.random::<bool>() { epsilon } else { -epsilon };
            for r in r0..r0 + side {
                for col in c0..c0 + side {
                    let i = at(ch, r, col);
                    cand[i] = (x0[i] + s).clamp(clip[0], clip[1]);
                }
            }
        }
        let m = query(&cand)?;
        queries += 1;
        if m < best_margin {
            best = cand;
            best_margin = m;
            accepted.push(m);
        }
    }
    Ok(SquareResult {
        x_adv: Tensor::new(x.shape().to_vec(), best)?,
        queries,
        success: best_margin < 0.0,
        accepted,
    })
}

/// Wraps a model and counts calls to its forward pass.
pub struct CountingModel<'a, M: Model + ?Sized> {
    inner: &'a M,
    calls: Cell<usize>,
}

impl<'a, M: Model + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: Model + ?Sized> Model for CountingModel<'_, M> {
    fn input_shape(&self) -> &[usize] {
        self.inner.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.calls.set(self.calls.get() + 1);
        self.inner.logits_graph(g, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinRadiusConfig {
    pub steps: usize,
    pub step_size: f64,
    /// When set, the step is `step_size × radius` instead of a fixed length.
    pub relative_step: bool,
    pub r_max: f64,
    pub tol: f64,
    pub random_start: bool,
    pub clip_range: [f64; 2],
    pub seed: u64,
}

impl Default for MinRadiusConfig {
    /// 4-step PGD with step 0.0078, searched over [0, 0.25] to 1e-3.
    fn default() -> Self {
        Self {
            steps: 4,
            step_size: 0.0078,
            relative_step: false,
            r_max: 0.25,
            tol: 1e-3,
            random_start: true,
            clip_range: [0.0, 1.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinRadius {
    pub r_min: f64,
    pub censored: bool,
    /// Every radius probed, with the attack outcome.
    pub probes: Vec<(f64, bool)>,
}

/// Whether the fixed-seed L∞ PGD at radius `r` flips the sample.
pub fn pgd_succeeds<M: Model + ?Sized>(model: &M, x: &Tensor, y: usize, r: f64, cfg: &MinRadiusConfig) -> Result<bool> {
    let a = Ascent {
        norm: Norm::Linf,
        epsilon: r,
        step_size: if cfg.relative_step { cfg.step_size * r } else { cfg.step_size },
        steps: cfg.steps,
        restarts: 1,
        start: if cfg.random_start { Start::Uniform } else { Start::Clean },
        clip: cfg.clip_range,
        seed: cfg.seed,
    };
    let labels = [y];
    Ok(projected_ascent(model, x, Objective::CrossEntropy(&labels), Some(&labels), &a, 0)?.success[0])
}

/// Binary search for the smallest radius at which the fixed-seed PGD
/// succeeds, keeping `attack(lo)` failing and `attack(hi)` succeeding.
/// `index` only labels the error for misclassified inputs.
pub fn min_radius_search<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    cfg: &MinRadiusConfig,
    index: usize,
) -> Result<MinRadius> {
    if cfg.steps == 0 || !(cfg.r_max > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::InvalidAttack("min-radius search needs steps >= 1, r_max > 0, tol > 0".into()));
    }
    if model.predict(x)?[0] != y {
        return Err(Error::Misclassified { index });
    }
    let mut probes = Vec::new();
    let top = pgd_succeeds(model, x, y, cfg.r_max, cfg)?;
    probes.push((cfg.r_max, top));
    if !top {
        return Ok(MinRadius {
            r_min: cfg.r_max,
            censored: true,
            probes,
        });
    }
    let (mut lo, mut hi) = (0.0, cfg.r_max);
    while hi - lo > cfg.tol {
        let mid = 0.5 * (lo + hi);
        let ok = pgd_succeeds(model, x, y, mid, cfg)?;
        probes.push((mid, ok));
        if ok {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(MinRadius {
        r_min: hi,
        censored: false,
        probes,
    })
}

/// One line of the per-sample attack export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub clean_correct: bool,
    pub success: bool,
    pub queries: usize,
    pub r_min: Option<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustEval {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub records: Vec<AttackRecord>,
}

impl RobustEval {
    /// Per-sample flag: correct before and after the attack.
    pub fn robust_mask(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.clean_correct && !r.success).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn fraction(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    flags.filter(|&b| b).count() as f64 / n as f64
}

/// Fraction of samples still classified correctly after the attack.
/// Samples misclassified to begin with count as non-robust and are not attacked.
pub fn robust_accuracy<M: Model + ?Sized>(model: &M, data: &Dataset, spec: &AttackSpec) -> Result<RobustEval> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidDataset("robust accuracy needs a nonempty dataset".into()));
    }
    let norm = spec.family.norm();
    let mut records = Vec::with_capacity(data.len());
    let d: usize = data.sample_shape().iter().product();
    for start in (0..data.len()).step_by(DEFAULT_BATCH) {
        let end = (start + DEFAULT_BATCH).min(data.len());
        let x = data.x.slice_rows(start, end);
        let y = &data.y[start..end];
        let clean = model.predict(&x)?;
        match spec.family {
            AttackFamily::Fgsm | AttackFamily::PgdLinf | AttackFamily::PgdL2 => {
                let res = pgd_indexed(model, &x, y, spec, start)?;
                for i in 0..end - start {
                    let ok = clean[i] == y[i];
                    records.push(AttackRecord {
                        index: start + i,
                        clean_correct: ok,
                        success: ok && res.success[i],
                        queries: 0,
                        r_min: None,
                        norm: norm.distance(&res.x.data()[i * d..(i + 1) * d], &x.data()[i * d..(i + 1) * d]),
                    });
                }
            }
            AttackFamily::SquareSearch => {
                for i in 0..end - start {
                    let idx = start + i;
                    let ok = clean[i] == y[i];
                    let (success, queries, dist) = if ok {
                        let xi = x.slice_rows(i, i + 1);
                        let r = square_search(
                            model,
                            &xi,
                            y[i],
                            spec.epsilon,
                            spec.query_budget,
                            spec.clip_range,
                            spec.seed ^ idx as u64,
                        )?;
                        (r.success, r.queries, Norm::Linf.distance(r.x_adv.data(), xi.data()))
                    } else {
                        (false, 0, 0.0)
                    };
                    records.push(AttackRecord {
                        index: idx,
                        clean_correct: ok,
                        success,
                        queries,
                        r_min: None,
                        norm: dist,
                    });
                }
            }
            AttackFamily::MinRadius => {
                return Err(Error::InvalidAttack(
                    "min_radius yields radii, not robust accuracy; use min_radius_search".into(),
                ))
            }
        }
    }
    let n = records.len();
    let clean_accuracy = fraction(records.iter().map(|r| r.clean_correct), n);
    let robust_accuracy = fraction(records.iter().map(|r| r.clean_correct && !r.success), n);
    Ok(RobustEval {
        clean_accuracy,
        robust_accuracy,
        records,
    })
}

/// Robust accuracy at increasing budgets. A sample broken at a smaller
/// budget stays broken at every larger one, since the balls are nested.
pub fn nested_robust_accuracy<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &AttackSpec,
    epsilons: &[f64],
) -> Result<Vec<f64>> {
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidAttack("epsilons must be non-decreasing".into()));
    }
    let mut broken = vec![false; data.len()];
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let eval = robust_accuracy(model, data, &spec.clone().with_epsilon(eps))?;
        for (b, r) in broken.iter_mut().zip(eval.robust_mask()) {
            *b |= !r;
        }
        out.push(fraction(broken.iter().map(|b| !b), data.len()));
    }
    Ok(out)
}

/// Union of a strong multi-restart PGD and the square search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub pgd: AttackSpec,
    pub square: AttackSpec,
}

impl Ensemble {
    pub const LABEL: &'static str = "ensemble(pgd-5x50 + square)";

    pub fn new(epsilon: f64, query_budget: usize, seed: u64) -> Self {
        Self {
            pgd: AttackSpec::strong_pgd(epsilon).with_seed(seed),
            square: AttackSpec {
                query_budget,
                ..AttackSpec::square().with_epsilon(epsilon).with_seed(seed)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEval {
    pub pgd: RobustEval,
    pub square: RobustEval,
    pub robust_accuracy: f64,
    pub robust_mask: Vec<bool>,
}

pub fn ensemble_robust_accuracy<M: Model + ?Sized>(model: &M, data: &Dataset, ens: &Ensemble) -> Result<EnsembleEval> {
    let pgd = robust_accuracy(model, data, &ens.pgd)?;
    let square = robust_accuracy(model, data, &ens.square)?;
    let robust_mask: Vec<bool> = pgd
        .robust_mask()
        .into_iter()
        .zip(square.robust_mask())
        .map(|(a, b)| a && b)
        .collect();
    let robust_accuracy = fraction(robust_mask.iter().copied(), data.len());
    Ok(EnsembleEval {
        pgd,
        square,
        robust_accuracy,
        robust_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{ActivationSpec, Family};
    use crate::nnet::Network;

    /// Two-class logistic threshold in one dimension: logits `[0, w(x − t)]`.
    struct Threshold {
        w: f64,
        t: f64,
    }

    impl Model for Threshold {
        fn input_shape(&self) -> &[usize] {
            &[1]
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
            let n = g.shape(x)[0];
            let t = g.scalar(self.t);
            let s = g.sub(x, t)?;
            let z1 = g.scale(s, self.w);
            let zeros = g.input(vec![n, 1], vec![0.0; n], false)?;
            // [0, z1] laid out row-major via a 2x? trick: concatenate with matmul
            let a = g.input(vec![1, 2], vec![1.0, 0.0], false)?;
            let b = g.input(vec![1, 2], vec![0.0, 1.0], false)?;
            let left = g.matmul(zeros, a)?;
            let right = g.matmul(z1, b)?;
            g.add(left, right)
        }
    }

    fn one(x: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![x]).unwrap()
    }

    #[test]
    fn spec_defaults() {
        let s = AttackSpec::pgd_linf();
        assert_eq!((s.epsilon, s.step_size, s.steps), (0.031, 0.0078, 10));
        let l2 = AttackSpec::pgd_l2();
        assert_eq!((l2.epsilon, l2.step_size), (0.5, 0.075));
        assert_eq!(AttackSpec::square().query_budget, 1000);
        let bad = AttackSpec {
            clip_range: [1.0, 0.0],
            ..AttackSpec::pgd_linf()
        };
        assert!(bad.validate().is_err());
        assert!(AttackSpec { steps: 0, ..AttackSpec::pgd_linf() }.validate().is_err());
    }

    #[test]
    fn projection_pulls_far_point_to_boundary() {
        let x0 = [0.5, 0.5];
        let mut x = [0.5 + 0.2, 0.5 - 0.05];
        project(&mut x, &x0, Norm::Linf, 0.1, [0.0, 1.0]);
        assert!((x[0] - 0.6).abs() < 1e-15);
        assert!((x[1] - 0.45).abs() < 1e-15);
        let mut y = [0.5 + 0.6, 0.5 + 0.8];
        project(&mut y, &x0, Norm::L2, 0.5, [-10.0, 10.0]);
        assert!((Norm::L2.distance(&y, &x0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fgsm_zero_budget_and_zero_gradient() {
        let m = Threshold { w: 3.0, t: 0.5 };
        let x = one(0.7);
        assert_eq!(fgsm(&m, &x, &[1], 0.0, [0.0, 1.0]).unwrap(), x);
        let flat = Threshold { w: 0.0, t: 0.5 };
        assert_eq!(fgsm(&flat, &x, &[1], 0.1, [0.0, 1.0]).unwrap(), x);
    }

    #[test]
    fn pgd_rejects_non_gradient_family() {
        let m = Threshold { w: 1.0, t: 0.5 };
        assert!(pgd(&m, &one(0.6), &[1], &AttackSpec::square()).is_err());
    }

    #[test]
    fn square_side_schedule() {
        assert_eq!(square_side(0, 1000, 28, 28), 9);
        assert_eq!(square_side(199, 1000, 28, 28), 9);
        assert_eq!(square_side(200, 1000, 28, 28), 4);
        assert_eq!(square_side(400, 1000, 28, 28), 2);
        assert_eq!(square_side(999, 1000, 28, 28), 1);
        assert_eq!(square_side(0, 1000, 1, 2), 1);
    }

    #[test]
    fn square_on_constant_classifier_spends_budget() {
        let net = Network::mlp(&[2, 3], ActivationSpec::nonparametric(Family::Relu), 0).unwrap();
        let mut net = net;
        for (_, t) in net.params_mut() {
            t.data_mut().fill(0.0);
        }
        let counter = CountingModel::new(&net);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let r = square_search(&counter, &x, 0, 0.1, 57, [0.0, 1.0], 3).unwrap();
        assert!(!r.success);
        assert_eq!(r.queries, 57);
        assert_eq!(counter.calls(), 57);
        assert_eq!(r.accepted.len(), 1);
    }

    #[test]
    fn min_radius_rejects_misclassified() {
        let m = Threshold { w: 5.0, t: 0.5 };
        let err = min_radius_search(&m, &one(0.3), 1, &MinRadiusConfig::default(), 4).unwrap_err();
        assert!(matches!(err, Error::Misclassified { index: 4 }));
    }

    #[test]
    fn robust_accuracy_rejects_min_radius_family() {
        let m = Threshold { w: 5.0, t: 0.5 };
        let data = crate::data::separable_halfspace(4, 1, 0.1, 0).unwrap();
        let spec = AttackSpec {
            family: AttackFamily::MinRadius,
            ..AttackSpec::pgd_linf()
        };
        assert!(robust_accuracy(&m, &data, &spec).is_err());
    }

    #[test]
    fn records_serialize_as_json_lines() {
        let eval = RobustEval {
            clean_accuracy: 1.0,
            robust_accuracy: 0.0,
            records: vec![AttackRecord {
                index: 0,
                clean_correct: true,
                success: true,
                queries: 12,
                r_min: Some(0.25),
                norm: 0.031,
            }],
        };
        let mut buf = Vec::new();
        eval.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"index\":0,\"clean_correct\":true,\"success\":true,\"queries\":12,\"r_min\":0.25,\"norm\":0.031}\n"
        );
    }
}
