//! Robustness measurements: minimum radii, empirical Lipschitz constant,
//! shape sweeps, learned-shape export and the aggregated report.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::activations::{self, ActivationSpec, Family, Grid};
use crate::attacks::{self, Ascent, AttackFamily, AttackSpec, Ensemble, MinRadiusConfig, Norm, Objective};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{Model, Network};
use crate::training::{self, Method, TrainConfig};

const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    /// Samples that entered the mean.
    pub used: usize,
    /// Samples skipped because the attack returned the clean point.
    pub skipped: usize,
}

/// Mean over samples of `‖f(x) − f(x̂)‖₁ / ‖x − x̂‖∞`, where `x̂` is found by
/// L∞ PGD on the numerator.
pub fn empirical_lipschitz<M: Model + ?Sized>(model: &M, data: &Dataset, spec: &AttackSpec) -> Result<LipschitzEstimate> {
    spec.validate()?;
    if spec.family != AttackFamily::PgdLinf {
        return Err(Error::InvalidAttack(format!(
            "empirical Lipschitz needs pgd_linf, got {}",
            spec.family.name()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidDataset("empirical Lipschitz needs a nonempty dataset".into()));
    }
    let k = model.num_classes();
    let d: usize = data.sample_shape().iter().product();
    let a = Ascent::from_spec(spec);
    let (mut total, mut used, mut skipped) = (0.0, 0, 0);
    for start in (0..data.len()).step_by(BATCH) {
        let end = (start + BATCH).min(data.len());
        let x = data.x.slice_rows(start, end);
        let fx = model.logits(&x)?;
        let res = attacks::projected_ascent(model, &x, Objective::L1(fx.data()), None, &a, start)?;
        for i in 0..end - start {
            let dx = Norm::Linf.distance(&res.x.data()[i * d..(i + 1) * d], &x.data()[i * d..(i + 1) * d]);
            if dx == 0.0 {
                skipped += 1;
                continue;
            }
            total += res.value[i] / dx;
            used += 1;
        }
        debug_assert_eq!(fx.numel(), (end - start) * k);
    }
    if used == 0 {
        return Err(Error::DegenerateLipschitz(skipped));
    }
    Ok(LipschitzEstimate {
        value: total / used as f64,
        used,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    /// Mean over correctly classified samples; censored ones count as `r_max`.
    pub mean: f64,
    pub censored: usize,
    pub evaluated: usize,
    /// `(index, r_min, censored)` for each evaluated sample.
    pub per_sample: Vec<(usize, f64, bool)>,
}

/// Minimum PGD radius of every correctly classified sample. Sample `i`
/// searches with seed `cfg.seed ⊕ i`.
pub fn mean_min_radius<M: Model + ?Sized>(model: &M, data: &Dataset, cfg: &MinRadiusConfig) -> Result<RadiusSummary> {
    let pred = model.predict(&data.x)?;
    let mut per_sample = Vec::new();
    for (i, (&p, &y)) in pred.iter().zip(&data.y).enumerate() {
        if p != y {
            continue;
        }
        let c = MinRadiusConfig {
            seed: cfg.seed ^ i as u64,
            ..*cfg
        };
        let r = attacks::min_radius_search(model, &data.x.slice_rows(i, i + 1), y, &c, i)?;
        per_sample.push((i, r.r_min, r.censored));
    }
    let evaluated = per_sample.len();
    let mean = if evaluated == 0 {
        0.0
    } else {
        per_sample.iter().map(|s| s.1).sum::<f64>() / evaluated as f64
    };
    Ok(RadiusSummary {
        mean,
        censored: per_sample.iter().filter(|s| s.2).count(),
        evaluated,
        per_sample,
    })
}

/// Which PAF parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub family: Family,
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Value of the parameter not being swept.
    pub fixed_alpha: f64,
    pub fixed_beta: f64,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn activation(&self, value: f64) -> Result<ActivationSpec> {
        let (a, b) = match self.param {
            SweepParam::Alpha => (value, self.fixed_beta),
            SweepParam::Beta => (self.fixed_alpha, value),
        };
        ActivationSpec::fixed(self.family, a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub seed: u64,
    pub square_acc: f64,
    pub mean_min_radius: f64,
    pub censored: usize,
}

pub fn write_rows<W: Write, R: Serialize>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Standard-trains one network per (value, seed) with the activation
/// parameter frozen, then records square-search accuracy and mean minimum
/// radius on `test`. `build` makes the architecture for an activation and seed.
pub fn shape_sweep(
    sweep: &SweepSpec,
    build: &dyn Fn(ActivationSpec, u64) -> Result<Network>,
    train_data: &Dataset,
    test_data: &Dataset,
    train_cfg: &TrainConfig,
    square: &AttackSpec,
    radius: &MinRadiusConfig,
) -> Result<Vec<SweepRow>> {
    if sweep.values.is_empty() || sweep.seeds.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(sweep.values.len() * sweep.seeds.len());
    for &v in &sweep.values {
        let act = sweep.activation(v)?;
        for &seed in &sweep.seeds {
            let cfg = TrainConfig {
                method: Method::Standard,
                seed,
                ..train_cfg.clone()
            };
            let net = build(act, seed)?;
            let out = training::train(net, train_data, test_data, &cfg)?;
            let sq = attacks::robust_accuracy(&out.net, test_data, &square.clone().with_seed(seed))?;
            let r = mean_min_radius(&out.net, test_data, &MinRadiusConfig { seed, ..*radius })?;
            rows.push(SweepRow {
                param: v,
                seed,
                square_acc: sq.robust_accuracy,
                mean_min_radius: r.mean,
                censored: r.censored,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub param: f64,
    pub seed: u64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Trains one network per (λ, seed) with `train_cfg` and records final
/// accuracies and PAF parameters.
pub fn lambda_sweep(
    lambdas: &[f64],
    seeds: &[u64],
    build: &dyn Fn(u64) -> Result<Network>,
    train_data: &Dataset,
    test_data: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<Vec<LambdaRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::new();
    for &l in lambdas {
        for &seed in seeds {
            let cfg = TrainConfig {
                lambda_beta: l,
                seed,
                ..train_cfg.clone()
            };
            let out = training::train(build(seed)?, train_data, test_data, &cfg)?;
            let last = out.history.0.last().expect("epochs >= 1");
            rows.push(LambdaRow {
                param: l,
                seed,
                clean_acc: last.clean_acc,
                pgd_acc: last.pgd_acc,
                alpha: last.alpha,
                beta: last.beta,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeExport {
    pub family: Family,
    pub alpha: f64,
    pub beta: f64,
    pub points: Vec<(f64, f64)>,
}

impl ShapeExport {
    /// CSV with columns `x,y,alpha,beta`; the parameters repeat on every row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "alpha", "beta"])?;
        for &(x, y) in &self.points {
            w.serialize((x, y, self.alpha, self.beta))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn shape_export(spec: &ActivationSpec, grid: &Grid) -> ShapeExport {
    ShapeExport {
        family: spec.family(),
        alpha: spec.alpha(),
        beta: spec.beta(),
        points: activations::sample_shape(spec, grid),
    }
}

/// The network's shared activation at its current parameters.
pub fn learned_shape_export(net: &Network, grid: &Grid) -> ShapeExport {
    shape_export(&net.activation(), grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub pgd: AttackSpec,
    pub ensemble: Ensemble,
    pub radius: MinRadiusConfig,
    pub lipschitz: AttackSpec,
    pub curvature_grid: Grid,
}

impl ReportConfig {
    pub fn with_seed(seed: u64) -> Self {
        let pgd = AttackSpec::pgd_linf().with_seed(seed);
        Self {
            ensemble: Ensemble::new(pgd.epsilon, 1000, seed),
            radius: MinRadiusConfig {
                seed,
                ..MinRadiusConfig::default()
            },
            lipschitz: pgd.clone(),
            pgd,
            curvature_grid: Grid::default(),
        }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self::with_seed(12345)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model_id: String,
    pub family: Family,
    pub clean_acc: f64,
    pub robust_acc: BTreeMap<String, f64>,
    pub mean_min_radius: f64,
    pub censored: usize,
    pub radius_evaluated: usize,
    pub empirical_lipschitz: Option<f64>,
    pub lipschitz_skipped: usize,
    pub alpha_final: f64,
    pub beta_final: f64,
    /// `None` for piecewise families, whose second derivative is undefined at the kink.
    pub curvature_final: Option<f64>,
}

impl RobustnessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn full_report(model_id: &str, net: &Network, data: &Dataset, cfg: &ReportConfig) -> Result<RobustnessReport> {
    let pgd = attacks::robust_accuracy(net, data, &cfg.pgd)?;
    let ens = attacks::ensemble_robust_accuracy(net, data, &cfg.ensemble)?;
    let mut robust_acc = BTreeMap::new();
    robust_acc.insert(format!("pgd_linf-{}", cfg.pgd.steps), pgd.robust_accuracy);
    robust_acc.insert(
        format!("pgd_linf-{}x{}", cfg.ensemble.pgd.restarts, cfg.ensemble.pgd.steps),
        ens.pgd.robust_accuracy,
    );
    robust_acc.insert(
        format!("square-{}", cfg.ensemble.square.query_budget),
        ens.square.robust_accuracy,
    );
    robust_acc.insert(Ensemble::LABEL.to_string(), ens.robust_accuracy);
    let radius = mean_min_radius(net, data, &cfg.radius)?;
    let (empirical_lipschitz, lipschitz_skipped) = match empirical_lipschitz(net, data, &cfg.lipschitz) {
        Ok(l) => (Some(l.value), l.skipped),
        Err(Error::DegenerateLipschitz(n)) => (None, n),
        Err(e) => return Err(e),
    };
    let act = net.activation();
    let curvature_final = if act.family().is_piecewise() {
        None
    } else {
        Some(activations::curvature(&act, &cfg.curvature_grid)?)
    };
    Ok(RobustnessReport {
        model_id: model_id.to_string(),
        family: act.family(),
        clean_acc: pgd.clean_accuracy,
        robust_acc,
        mean_min_radius: radius.mean,
        censored: radius.censored,
        radius_evaluated: radius.evaluated,
        empirical_lipschitz,
        lipschitz_skipped,
        alpha_final: act.alpha(),
        beta_final: act.beta(),
        curvature_final,
    })
}
