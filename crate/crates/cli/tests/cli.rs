use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dapc(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dapc"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dapc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = "\
epochs = 2
n_input = 32
n_proxies = 8
n_queries = 8
embed_dim = 8
knn_k = 4
edge_dim = 8
heads = 2
ffn_dim = 16
enc_layers = 1
dec_layers = 1
up_factor = 4
head_hidden = 8
";

#[test]
fn generate_train_evaluate_probe_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("toy.toml");
    fs::write(&cfg, TOY).unwrap();

    dapc(&[
        "gen-data",
        "--out",
        s(&data),
        "--per-category",
        "2",
        "--n-complete",
        "128",
        "--seed",
        "3",
    ]);
    assert!(data.join("manifest.json").is_file());

    let out = dapc(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--config",
        s(&cfg),
        "--ablate",
        "vpc",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("target CD"));
    let ckpt = run.join("final.json");
    assert!(ckpt.is_file() && run.join("last.ckpt.json").is_file());

    let table = tmp.path().join("table.csv");
    dapc(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&table),
    ]);
    let csv = fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("category,count,cd,ucd,uhd"));
    assert_eq!(csv.lines().count(), 1 + 5 + 1);

    let probe = tmp.path().join("probe.csv");
    dapc(&[
        "probe",
        "--ckpt",
        s(&run.join("last.ckpt.json")),
        "--source",
        s(&data),
        "--target",
        s(&data),
        "--out",
        s(&probe),
    ]);
    let rows = fs::read_to_string(&probe).unwrap();
    assert_eq!(rows.lines().next(), Some("x,y,lambda"));
    assert_eq!(rows.lines().count(), 1 + 10 + 10);

    let input = fs::read_dir(data.join("target/eval/partial"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let done = tmp.path().join("done.ply");
    dapc(&[
        "complete",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&input),
        "--out",
        s(&done),
    ]);
    let again = tmp.path().join("again.ply");
    dapc(&[
        "complete",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&input),
        "--out",
        s(&again),
    ]);
    assert_eq!(fs::read(&done).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn resume_continues_to_more_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    dapc(&[
        "gen-data",
        "--out",
        s(&data),
        "--per-category",
        "1",
        "--n-complete",
        "128",
    ]);
    dapc(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--config",
        s(&cfg),
        "--epochs",
        "1",
    ]);
    dapc(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--config",
        s(&cfg),
        "--epochs",
        "2",
        "--resume",
    ]);
    let epochs = fs::read_to_string(run.join("epochs.tsv")).unwrap();
    assert_eq!(epochs.lines().count(), 1 + 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dapc"))
        .args([
            "train",
            "--data",
            s(tmp.path()),
            "--out",
            s(&tmp.path().join("r")),
            "--config",
            s(&cfg),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = Command::new(env!("CARGO_BIN_EXE_dapc"))
        .args([
            "gen-data",
            "--out",
            s(tmp.path()),
            "--source-occlusion",
            "sideways",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
