use std::fs;
use std::path::{Path, PathBuf};

use paf_core::activations::{ActivationSpec, Family, Grid};
use paf_core::attacks::{self, AttackFamily, AttackRecord, AttackSpec, Ensemble, RobustEval};
use paf_core::data::Dataset;
use paf_core::eval::{self, SweepParam, SweepSpec};
use paf_core::training;
use paf_core::{Error, Network};
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepKind};
use crate::{AttackArgs, AttackName, Common, ShapeArgs};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

/// Configuration problems exit with 2, unreadable checkpoints with 3 and
/// everything else with 1.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidParameter(_)
            | Error::EmptyGrid
            | Error::InvalidAttack(_)
            | Error::InvalidTraining(_)
            | Error::InvalidNetwork(_) => 2,
            Error::Checkpoint(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config(common: &Common) -> Outcome<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.resolve(common.seed, common.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Outcome<Network> {
    Network::load(path).map_err(|e| Failure {
        code: 3,
        message: format!("checkpoint {}: {e}", path.display()),
    })
}

/// Test split, truncated to the report limit.
fn eval_split(cfg: &ExperimentConfig) -> Outcome<Dataset> {
    let (_, test) = cfg.datasets()?;
    Ok(match cfg.report.limit {
        Some(n) => test.take(n),
        None => test,
    })
}

/// Collects output files and writes them only once everything succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new(cfg: &ExperimentConfig) -> Outcome<Self> {
        let mut o = Self {
            dir: cfg.out.clone(),
            files: Vec::new(),
        };
        o.add("config.toml", cfg.to_toml().map_err(usage)?.into_bytes());
        Ok(o)
    }

    fn add(&mut self, name: impl AsRef<Path>, bytes: Vec<u8>) {
        self.files.push((name.as_ref().to_path_buf(), bytes));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))?;
        s.push('\n');
        self.add(name, s.into_bytes());
        Ok(())
    }

    fn commit(self) -> Outcome {
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

fn buffer(f: impl FnOnce(&mut Vec<u8>) -> paf_core::Result<()>) -> Outcome<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn train(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let (train_data, test_data) = cfg.datasets()?;
    let classes = train_data.classes.max(test_data.classes);
    let act = cfg.activation.spec()?;
    let net = cfg.build_network(act, train_data.sample_shape(), classes, cfg.seed)?;
    let out = training::train(net, &train_data, &test_data, &cfg.train)?;
    let eval_data = match cfg.report.limit {
        Some(n) => test_data.take(n),
        None => test_data,
    };
    let id = format!("{}-{}-seed{}", act.family(), cfg.train.method.name(), cfg.seed);
    let report = eval::full_report(&id, &out.best.net, &eval_data, &cfg.report_config())?;

    let mut files = Outputs::new(&cfg)?;
    files.add("checkpoint.json", serde_json::to_vec(&out.net.to_checkpoint()).map_err(Error::from)?);
    files.add("best.json", serde_json::to_vec(&out.best.net.to_checkpoint()).map_err(Error::from)?);
    files.add("history.csv", buffer(|b| out.history.write_csv(b))?);
    files.json("report.json", &report)?;
    let shape = eval::learned_shape_export(&out.best.net, &cfg.report.grid);
    files.add("shape.csv", buffer(|b| shape.write_csv(b))?);
    files.commit()?;

    println!("model: {id}");
    println!("best epoch: {}", out.best.epoch);
    println!("clean accuracy: {:.4}", report.clean_acc);
    for (k, v) in &report.robust_acc {
        println!("robust accuracy [{k}]: {v:.4}");
    }
    println!("alpha: {} beta: {}", report.alpha_final, report.beta_final);
    Ok(())
}

pub fn sweep(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let (train_data, test_data) = cfg.datasets()?;
    let classes = train_data.classes.max(test_data.classes);
    let shape = train_data.sample_shape().to_vec();
    let s = &cfg.sweep;
    if s.values.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::EmptyGrid.into());
    }
    let csv = match s.kind {
        SweepKind::Shape => {
            let spec = SweepSpec {
                family: cfg.activation.family,
                param: s.param,
                values: s.values.clone(),
                fixed_alpha: s.fixed_alpha,
                fixed_beta: s.fixed_beta,
                seeds: cfg.seeds.clone(),
            };
            let build = |a: ActivationSpec, seed: u64| cfg.build_network(a, &shape, classes, seed);
            let square = AttackSpec {
                query_budget: cfg.report.square_queries,
                ..AttackSpec::square().with_epsilon(cfg.attack.epsilon)
            };
            let rows = eval::shape_sweep(&spec, &build, &train_data, &test_data, &cfg.train, &square, &cfg.radius)?;
            buffer(|b| eval::write_rows(&rows, b))?
        }
        SweepKind::Lambda => {
            let act = cfg.activation.spec()?;
            let build = |seed: u64| cfg.build_network(act, &shape, classes, seed);
            let rows = eval::lambda_sweep(&s.values, &cfg.seeds, &build, &train_data, &test_data, &cfg.train)?;
            buffer(|b| eval::write_rows(&rows, b))?
        }
    };
    let rows = csv.iter().filter(|&&c| c == b'\n').count() - 1;
    let mut files = Outputs::new(&cfg)?;
    files.add("sweep.csv", csv);
    files.commit()?;
    println!("sweep rows: {rows}");
    Ok(())
}

fn family_of(name: AttackName) -> Option<AttackFamily> {
    match name {
        AttackName::Fgsm => Some(AttackFamily::Fgsm),
        AttackName::PgdLinf => Some(AttackFamily::PgdLinf),
        AttackName::PgdL2 => Some(AttackFamily::PgdL2),
        AttackName::SquareSearch => Some(AttackFamily::SquareSearch),
        AttackName::MinRadius => Some(AttackFamily::MinRadius),
        AttackName::Ensemble => None,
    }
}

fn attack_spec(cfg: &ExperimentConfig, args: &AttackArgs, family: AttackFamily) -> AttackSpec {
    let base = match family {
        AttackFamily::PgdL2 => AttackSpec::pgd_l2().with_seed(cfg.seed),
        AttackFamily::Fgsm => AttackSpec::fgsm(cfg.attack.epsilon).with_seed(cfg.seed),
        AttackFamily::SquareSearch => AttackSpec {
            query_budget: cfg.report.square_queries,
            ..AttackSpec::square().with_epsilon(cfg.attack.epsilon).with_seed(cfg.seed)
        },
        _ => AttackSpec {
            family,
            ..cfg.attack.clone()
        },
    };
    let mut spec = AttackSpec {
        epsilon: args.epsilon.unwrap_or(base.epsilon),
        step_size: args.step_size.unwrap_or(base.step_size),
        steps: args.steps.unwrap_or(base.steps),
        restarts: args.restarts.unwrap_or(base.restarts),
        query_budget: args.queries.unwrap_or(base.query_budget),
        ..base
    };
    if family == AttackFamily::Fgsm {
        spec.step_size = spec.epsilon;
    }
    spec
}

fn union_records(e: &attacks::EnsembleEval) -> RobustEval {
    let records: Vec<AttackRecord> = e
        .pgd
        .records
        .iter()
        .zip(&e.square.records)
        .map(|(p, s)| AttackRecord {
            index: p.index,
            clean_correct: p.clean_correct,
            success: p.success || s.success,
            queries: s.queries,
            r_min: None,
            norm: if p.success || !s.success { p.norm } else { s.norm },
        })
        .collect();
    RobustEval {
        clean_accuracy: e.pgd.clean_accuracy,
        robust_accuracy: e.robust_accuracy,
        records,
    }
}

pub fn attack(common: &Common, args: &AttackArgs) -> Outcome {
    let cfg = load_config(common)?;
    let net = load_checkpoint(&args.checkpoint)?;
    let data = eval_split(&cfg)?;
    let result = match family_of(args.attack) {
        None => {
            let mut ens = Ensemble::new(
                args.epsilon.unwrap_or(cfg.attack.epsilon),
                args.queries.unwrap_or(cfg.report.square_queries),
                cfg.seed,
            );
            if let Some(s) = args.steps {
                ens.pgd.steps = s;
            }
            if let Some(r) = args.restarts {
                ens.pgd.restarts = r;
            }
            if let Some(s) = args.step_size {
                ens.pgd.step_size = s;
            }
            let e = attacks::ensemble_robust_accuracy(&net, &data, &ens)?;
            union_records(&e)
        }
        Some(AttackFamily::MinRadius) => {
            let mut rc = cfg.radius;
            if let Some(s) = args.steps {
                rc.steps = s;
            }
            if let Some(s) = args.step_size {
                rc.step_size = s;
            }
            let summary = eval::mean_min_radius(&net, &data, &rc)?;
            let radii: std::collections::BTreeMap<usize, (f64, bool)> =
                summary.per_sample.iter().map(|&(i, r, c)| (i, (r, c))).collect();
            let records: Vec<AttackRecord> = (0..data.len())
                .map(|i| {
                    let r = radii.get(&i);
                    AttackRecord {
                        index: i,
                        clean_correct: r.is_some(),
                        success: r.is_some_and(|&(_, c)| !c),
                        queries: 0,
                        r_min: r.map(|&(v, _)| v),
                        norm: r.map_or(0.0, |&(v, _)| v),
                    }
                })
                .collect();
            println!("mean minimum radius: {:.6}", summary.mean);
            println!("censored: {} of {}", summary.censored, summary.evaluated);
            let clean = summary.evaluated as f64 / data.len() as f64;
            RobustEval {
                clean_accuracy: clean,
                robust_accuracy: clean,
                records,
            }
        }
        Some(family) => {
            let spec = attack_spec(&cfg, args, family);
            attacks::robust_accuracy(&net, &data, &spec)?
        }
    };
    let mut files = Outputs::new(&cfg)?;
    files.add("attack.jsonl", buffer(|b| result.write_jsonl(b))?);
    files.commit()?;
    println!("clean accuracy: {:.4}", result.clean_accuracy);
    if args.attack != AttackName::MinRadius {
        println!("robust accuracy: {:.4}", result.robust_accuracy);
    }
    Ok(())
}

fn fmt_value(v: f64) -> String {
    format!("{v}").replace('-', "m")
}

pub fn shapes(common: &Common, args: &ShapeArgs) -> Outcome {
    let cfg = load_config(common)?;
    let g = cfg.shapes.grid;
    let grid = Grid::new(args.lo.unwrap_or(g.lo), args.hi.unwrap_or(g.hi), args.points.unwrap_or(g.n))?;
    let mut files = Outputs::new(&cfg)?;
    let relu = ActivationSpec::nonparametric(Family::Relu);
    files.add("shapes/relu.csv", buffer(|b| eval::shape_export(&relu, &grid).write_csv(b))?);
    if let Some(ck) = &args.checkpoint {
        let net = load_checkpoint(ck)?;
        let e = eval::learned_shape_export(&net, &grid);
        files.add("shapes/learned.csv", buffer(|b| e.write_csv(b))?);
        println!("{}: alpha {} beta {}", e.family, e.alpha, e.beta);
    } else {
        let family = match &args.family {
            Some(name) => Family::parse(name).ok_or_else(|| {
                let known: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
                usage(format!("unknown family `{name}`; expected one of {}", known.join(", ")))
            })?,
            None => cfg.activation.family,
        };
        let param = match args.param.as_deref() {
            None => cfg.shapes.param,
            Some("alpha") => SweepParam::Alpha,
            Some("beta") => SweepParam::Beta,
            Some(other) => return Err(usage(format!("unknown parameter `{other}`; expected alpha or beta"))),
        };
        let values = args.values.clone().unwrap_or_else(|| cfg.shapes.values.clone());
        if values.is_empty() {
            return Err(Error::EmptyGrid.into());
        }
        let (_, a0, b0) = family.anchor();
        let (fa, fb) = (args.alpha.unwrap_or(a0), args.beta.unwrap_or(b0));
        let pname = match param {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
        };
        for &v in &values {
            let spec = match param {
                SweepParam::Alpha => ActivationSpec::fixed(family, v, fb)?,
                SweepParam::Beta => ActivationSpec::fixed(family, fa, v)?,
            };
            let name = format!("shapes/{family}_{pname}_{}.csv", fmt_value(v));
            files.add(name, buffer(|b| eval::shape_export(&spec, &grid).write_csv(b))?);
        }
        println!("{} curves for {family} over {pname}", values.len());
    }
    files.commit()
}

#[derive(Serialize)]
struct LipschitzOut {
    empirical_lipschitz: f64,
    used: usize,
    skipped: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
}

pub fn lipschitz(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let net = load_checkpoint(checkpoint)?;
    let data = eval_split(&cfg)?;
    let spec = &cfg.report.lipschitz;
    let l = eval::empirical_lipschitz(&net, &data, spec)?;
    let mut files = Outputs::new(&cfg)?;
    files.json(
        "lipschitz.json",
        &LipschitzOut {
            empirical_lipschitz: l.value,
            used: l.used,
            skipped: l.skipped,
            epsilon: spec.epsilon,
            steps: spec.steps,
            step_size: spec.step_size,
        },
    )?;
    files.commit()?;
    println!("empirical lipschitz: {:.6} ({} samples, {} skipped)", l.value, l.used, l.skipped);
    Ok(())
}

pub fn report(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let net = load_checkpoint(checkpoint)?;
    let data = eval_split(&cfg)?;
    let id = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let report = eval::full_report(&id, &net, &data, &cfg.report_config())?;
    let mut files = Outputs::new(&cfg)?;
    files.json("report.json", &report)?;
    files.commit()?;
    println!("clean accuracy: {:.4}", report.clean_acc);
    for (k, v) in &report.robust_acc {
        println!("robust accuracy [{k}]: {v:.4}");
    }
    Ok(())
}
