use std::collections::BTreeSet;
use std::path::Path;

use fewshot::data::standin_cifar100;
use fewshot_cli::{run, RunConfig};

const TINY: &str = "\
[task]
ways = 3
shots = 2
tasks_per_batch = 1
queries_per_task = 6

[train]
episodes = 20
val_interval = 10
val_tasks = 5
val_queries = 6
seed = 3

[model]
hidden = 8
embed_dim = 4

[synth]
classes = 20
superclasses = 4
split = 2,1,1
input_dim = 6
samples_per_class = 10

[eval]
tasks = 10
queries = 6

[sweep]
grid = 0.1,0.5
";

fn fewshot(args: &[&str]) -> i32 {
    run(std::iter::once("fewshot").chain(args.iter().copied()))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn empty_config_resolves_to_defaults() {
    let cfg = RunConfig::parse("").unwrap();
    let t = cfg.train_config();
    assert_eq!((t.ways, t.shots, t.tasks_per_batch, t.queries_per_task), (5, 5, 2, 32));
    assert_eq!((t.momentum, t.lr0), (0.9, 0.1));
    let text = cfg.to_text();
    for line in ["ways = 5", "shots = 5", "tasks_per_batch = 2", "queries_per_task = 32", "momentum = 0.9", "lr0 = 0.1"] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn one_shot_changes_batch_defaults() {
    let t = RunConfig::parse("[task]\nshots = 1\n").unwrap().train_config();
    assert_eq!((t.tasks_per_batch, t.queries_per_task), (5, 12));
    let t = RunConfig::parse("[task]\nshots = 1\ntasks_per_batch = 3\n").unwrap().train_config();
    assert_eq!((t.tasks_per_batch, t.queries_per_task), (3, 12));
}

#[test]
fn bad_values_name_the_key_and_line() {
    let e = RunConfig::parse("[model]\nalpha = -2\n").unwrap_err();
    assert_eq!(e.line, Some(2));
    assert!(e.message.contains("`alpha`"), "{e}");
    let e = RunConfig::parse("# comment\n[train]\nepisodes = many\n").unwrap_err();
    assert_eq!(e.line, Some(3));
    assert!(e.message.contains("`episodes`"), "{e}");
    let e = RunConfig::parse("[train]\nepochs = 3\n").unwrap_err();
    assert_eq!(e.line, Some(2));
    assert!(e.message.contains("unknown key `epochs`"), "{e}");
    assert_eq!(RunConfig::parse("[training]\n").unwrap_err().line, Some(1));
    assert_eq!(RunConfig::parse("ways = 5\n").unwrap_err().line, Some(1));
    assert_eq!(RunConfig::parse("[task]\nways = 5\nways = 6\n").unwrap_err().line, Some(3));
    assert_eq!(RunConfig::parse("[task]\nways 5\n").unwrap_err().line, Some(2));
    assert!(RunConfig::parse("[task]\nways = 1\n").is_err());
    assert!(RunConfig::parse("[aux]\nenabled = yes\n").is_err());
    assert!(RunConfig::parse("[sweep]\ngrid = 1,-1\n").is_err());
}

#[test]
fn echoed_config_parses_back() {
    for text in ["", TINY, "[task]\nshots = 1\n[model]\nmetric = cosine\nalpha_mode = fixed\nfilm = pre-pool\n"] {
        let cfg = RunConfig::parse(text).unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.train_config(), cfg.train_config());
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.model_config(&[6], 10), cfg.model_config(&[6], 10));
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(fewshot(&["train", "--config", "missing.cfg"]), 1);
    assert_eq!(fewshot(&["train", "--bogus"]), 1);
    assert_eq!(fewshot(&[]), 1);
    assert_eq!(fewshot(&["frobnicate"]), 1);
    assert_eq!(fewshot(&["--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "[model]\nalpha = -2\n");
    assert_eq!(fewshot(&["train", "--config", &cfg]), 1);
}

#[test]
fn fc100_without_a_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.cfg", "[data]\nsource = fc100\n");
    if std::env::var_os(fewshot_cli::DATA_DIR_ENV).is_none() {
        assert_eq!(fewshot(&["train", "--config", &cfg, "--out-dir", s(dir.path())]), 1);
        assert_eq!(fewshot(&["split-fc100"]), 1);
    }
}

#[test]
fn verify_lemma_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lemma_report.csv");
    assert_eq!(fewshot(&["verify-lemma", "--trials", "20", "--seed", "7", "--out", s(&out)]), 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "trial,alpha,side,rel_error");
    assert_eq!(lines.len(), 1 + 20 * 6);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 4);
        assert!(f[2] == "small" || f[2] == "large");
        let e: f64 = f[3].parse().unwrap();
        if f[1] == "0.0001" || f[1] == "1000" {
            assert!(e < 1e-3, "{l}");
        }
    }
    let again = dir.path().join("again.csv");
    assert_eq!(fewshot(&["verify-lemma", "--trials", "20", "--seed", "7", "--out", s(&again)]), 0);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(fewshot(&["verify-lemma", "--trials", "0"]), 1);
}

#[test]
fn split_fc100_writes_the_manifest() {
    let data = tempfile::tempdir().unwrap();
    standin_cifar100(data.path(), 2, 1, 3).unwrap();
    let out = data.path().join("manifest.csv");
    assert_eq!(fewshot(&["split-fc100", "--data", s(data.path()), "--out", s(&out)]), 0);
    let m = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = m.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(m.lines().next(), Some("split_name,coarse_label,fine_label"));
    assert_eq!(rows.len(), 100);
    let test: BTreeSet<u32> = rows.iter().filter(|r| r[0] == "test").map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(test, BTreeSet::from([0, 7, 12, 14]));
    let fine: BTreeSet<u32> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(fine.len(), 100);
}

#[test]
fn train_eval_sweep_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(fewshot(&["train", "--config", &cfg, "--out-dir", s(&a)]), 0);
    assert_eq!(fewshot(&["train", "--config", &cfg, "--out-dir", s(&b)]), 0);
    for f in ["metrics.csv", "model.ckpt", "config.cfg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("t,train_loss,val_acc,val_ci,lr,aux_p"));
    assert_eq!(metrics.lines().count(), 3);
    let echoed = std::fs::read_to_string(a.join("config.cfg")).unwrap();
    assert_eq!(RunConfig::parse(&echoed).unwrap(), RunConfig::parse(TINY).unwrap());

    let ckpt = a.join("model.ckpt");
    let eval = dir.path().join("eval.csv");
    assert_eq!(fewshot(&["eval", "--checkpoint", s(&ckpt), "--out", s(&eval)]), 0);
    let e = std::fs::read_to_string(&eval).unwrap();
    assert!(e.starts_with("split,ways,shots,tasks,queries,accuracy,ci95\ntest,3,2,10,6,"), "{e}");
    assert_eq!(fewshot(&["eval", "--checkpoint", s(&ckpt), "--split", "nowhere"]), 1);

    let ten = dir.path().join("ten.csv");
    assert_eq!(fewshot(&["report-ten", "--checkpoint", s(&ckpt), "--out", s(&ten)]), 0);
    let t = std::fs::read_to_string(&ten).unwrap();
    assert_eq!(t.lines().next(), Some("layer,gamma0_abs,beta0_abs"));
    assert_eq!(t.lines().count(), 2);

    let sweep = dir.path().join("sweep.csv");
    assert_eq!(fewshot(&["sweep-alpha", "--config", &cfg, "--out", s(&sweep)]), 0);
    let sw = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(sw.lines().next(), Some("alpha,val_acc,val_ci"));
    assert_eq!(sw.lines().count(), 3);
    let fixed = dir.path().join("fixed.csv");
    let args = ["sweep-alpha", "--config", &cfg, "--mode", "fixed", "--checkpoint", s(&ckpt), "--grid", "1,1", "--out", s(&fixed)];
    assert_eq!(fewshot(&args), 0);
    let rows: Vec<String> = std::fs::read_to_string(&fixed).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(fewshot(&["sweep-alpha", "--config", &cfg, "--mode", "fixed"]), 1);
    assert_eq!(fewshot(&["sweep-alpha", "--config", &cfg, "--grid", "0,1"]), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "hot.cfg", &TINY.replace("seed = 3", "seed = 3\nlr0 = 1e200"));
    assert_eq!(fewshot(&["train", "--config", &cfg, "--out-dir", s(dir.path())]), 2);
    let junk = write(dir.path(), "junk.ckpt", "not a checkpoint");
    assert_eq!(fewshot(&["eval", "--checkpoint", &junk]), 2);
    assert_eq!(fewshot(&["report-ten", "--checkpoint", s(&dir.path().join("absent.ckpt"))]), 2);
}
