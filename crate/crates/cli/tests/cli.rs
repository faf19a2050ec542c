use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7
seeds = [1, 2]

[dataset]
n_train = 60
n_test = 30

[model]
hidden = [8]

[activation]
family = "pssilu"

[train]
epochs = 2
batch_size = 16

[report]
square_queries = 30
limit = 20
"#;

fn paf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn train_into(cfg: &Path, out: &Path) {
    let o = paf(&["train", "--config", s(cfg), "--out", s(out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn train_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_into(&cfg, &a);
    train_into(&cfg, &b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let names: Vec<&str> = sa.keys().map(String::as_str).collect();
    assert_eq!(
        names,
        ["best.json", "checkpoint.json", "config.toml", "history.csv", "report.json", "shape.csv"]
    );
    for (name, bytes) in &sa {
        if name != "config.toml" {
            assert_eq!(bytes, &sb[name], "{name}");
        }
    }
    let history = String::from_utf8(sa["history.csv"].clone()).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,lr,clean_acc,pgd_acc,loss,alpha,beta"));
}

#[test]
fn written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_into(&cfg, &a);
    train_into(&a.join("config.toml"), &b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    for name in ["best.json", "checkpoint.json", "history.csv", "report.json", "shape.csv"] {
        assert_eq!(sa[name], sb[name], "{name}");
    }
    let text = String::from_utf8(sa["config.toml"].clone()).unwrap();
    assert!(text.contains("epsilon = 0.031"));
    assert!(text.contains("lambda_beta = 10.0"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_into(&cfg, &a);
    let o = paf(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "[dataset]\nkind = \"idx\"\ntrain_images = \"{0}/none-i\"\ntrain_labels = \"{0}/none-l\"\ntest_images = \"{0}/none-i\"\ntest_labels = \"{0}/none-l\"\n",
        dir.path().display()
    );
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("out");
    let o = paf(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("none-"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochs = 0\n");
    let o = paf(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    let o = paf(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_attack_lists_families() {
    let o = paf(&["attack", "--checkpoint", "x.json", "--attack", "deepfool"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["fgsm", "pgd_linf", "pgd_l2", "square_search", "min_radius", "ensemble"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn unreadable_checkpoint_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    fs::write(&ck, "{not json").unwrap();
    let out = dir.path().join("o");
    let o = paf(&["attack", "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn attacks_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    train_into(&cfg, &run);
    let ck = run.join("checkpoint.json");

    let o = paf(&["attack", "--config", s(&cfg), "--checkpoint", s(&ck), "--epsilon", "0", "--out", s(&dir.path().join("z"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let grab = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap_or_else(|| panic!("no `{key}` in {text}"))
            .trim()
            .to_string()
    };
    assert_eq!(grab("clean accuracy:"), grab("robust accuracy:"));

    for attack in ["fgsm", "pgd_linf", "pgd_l2", "square_search", "min_radius", "ensemble"] {
        let mut outs = Vec::new();
        for tag in ["1", "2"] {
            let out = dir.path().join(format!("{attack}{tag}"));
            let o = paf(&["attack", "--config", s(&cfg), "--checkpoint", s(&ck), "--attack", attack, "--out", s(&out)]);
            assert!(o.status.success(), "{attack}: {}", stderr(&o));
            outs.push(fs::read(out.join("attack.jsonl")).unwrap());
        }
        assert_eq!(outs[0], outs[1], "{attack}");
        let lines = String::from_utf8(outs[0].clone()).unwrap();
        assert_eq!(lines.lines().count(), 20, "{attack}");
        for l in lines.lines() {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
    }
}

#[test]
fn lipschitz_and_report_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    train_into(&cfg, &run);
    let ck = run.join("best.json");
    for cmd in ["lipschitz", "report"] {
        let mut bytes = Vec::new();
        for tag in ["1", "2"] {
            let out = dir.path().join(format!("{cmd}{tag}"));
            let o = paf(&[cmd, "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&out)]);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
            bytes.push(fs::read(out.join(format!("{cmd}.json"))).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        serde_json::from_slice::<serde_json::Value>(&bytes[0]).unwrap();
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["family"], "pssilu");
    assert!(report["curvature_final"].is_number());
}

#[test]
fn shapes_grids_and_learned_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = paf(&["shapes", "--family", "psilu", "--param", "alpha", "--values", "0.25,0.5,1,2,4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<String> = snapshot(&out).into_keys().collect();
    assert_eq!(
        files,
        [
            "config.toml",
            "shapes/psilu_alpha_0.25.csv",
            "shapes/psilu_alpha_0.5.csv",
            "shapes/psilu_alpha_1.csv",
            "shapes/psilu_alpha_2.csv",
            "shapes/psilu_alpha_4.csv",
            "shapes/relu.csv",
        ]
    );

    let out = dir.path().join("b");
    let values = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    let o = paf(&["shapes", "--family", "pssilu", "--param", "beta", "--alpha", "1", "--values", values, "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = snapshot(&out);
    assert_eq!(snap.len(), 11);
    let curve = String::from_utf8(snap["shapes/pssilu_beta_0.5.csv"].clone()).unwrap();
    assert!(curve.lines().nth(1).unwrap().ends_with(",1.0,0.5"));

    let o = paf(&["shapes", "--family", "nope", "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pssilu"));

    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    train_into(&cfg, &run);
    let out = dir.path().join("d");
    let o = paf(&["shapes", "--checkpoint", s(&run.join("best.json")), "--out", s(&out)]);
    assert!(o.status.success());
    assert!(out.join("shapes/learned.csv").exists());
}

#[test]
fn sweeps_write_grid_times_seeds_rows() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{SMALL}\n[sweep]\nkind = \"lambda\"\nvalues = [0.0, 10.0]\n[radius]\nr_max = 0.1\n"
    );
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("l");
    let o = paf(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let body = format!("{}\n[sweep]\nkind = \"shape\"\nvalues = []\n", SMALL.replace("pssilu", "prelu"));
    let cfg = write_config(dir.path(), &body);
    let o = paf(&["sweep", "--config", s(&cfg), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
}
