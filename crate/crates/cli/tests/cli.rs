use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed=3
num_classes=6
train_per_class=60
val_per_class=10
test_per_class=10
n_combos=6
test_per_combo=10
con_experiences=3
con_train_per_combo=5
sys_experiences=4
sys_n_way=3
sys_shots=2
sys_queries=2
fewshot_k=1,2
fewshot_seeds=1
expert_epochs=2
baseline_epochs=1
methods=finetune
";

fn ec(args: &[&str], dir: &Path, env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ec"));
    cmd.args(args).current_dir(dir).env_remove("EC_SEED");
    if let Some(s) = env_seed {
        cmd.env("EC_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn verbs_chain_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.conf"), TINY).unwrap();

    let out = ec(&["compose-eval", "--experts", "experts", "--pack", "pack"], d, None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("datagen"));

    ok(ec(&["datagen", "--config", "tiny.conf", "--out", "pack"], d, None));
    let out = ec(&["compose-eval", "--experts", "experts", "--pack", "pack"], d, None);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-experts"));

    ok(ec(&["train-experts", "--pack", "pack", "--out", "experts", "--config", "tiny.conf"], d, None));
    assert!(ok(ec(&["compose-eval", "--experts", "experts", "--pack", "pack"], d, None)).contains("overall accuracy"));
    ok(ec(&["fewshot-eval", "--experts", "experts", "--pack", "pack", "--k", "1,2", "--seeds", "1"], d, None));
    ok(ec(&["baseline-eval", "--method", "er", "--pack", "pack", "--config", "tiny.conf"], d, None));
    let summary = ok(ec(&["report", "--dir", "."], d, None));
    assert!(summary.contains("ec / best continual baseline (er"));
    for f in ["results_ec.csv", "results_fewshot.csv", "results_er.csv", "plot_con.csv", "summary.txt"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let out = ec(&["baseline-eval", "--method", "sgd", "--pack", "pack"], d, None);
    assert!(!out.status.success());
}

#[test]
fn run_all_honours_the_seed_variable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.conf"), TINY).unwrap();
    let first = ok(ec(&["run-all", "--config", "tiny.conf", "--out", "a"], d, Some("11")));
    assert!(first.contains("ran: datagen"));
    assert!(fs::read_to_string(d.join("a/config.txt")).unwrap().contains("seed = 11"));
    assert!(ok(ec(&["run-all", "--config", "tiny.conf", "--out", "a"], d, Some("11"))).contains("all stages up to date"));
    assert!(ok(ec(&["run-all", "--config", "tiny.conf", "--out", "a"], d, None)).contains("ran: datagen"));
}
