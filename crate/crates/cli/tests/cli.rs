use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vqc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqc"))
        .args(args)
        .output()
        .expect("spawn vqc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path, seed: &str) -> Output {
    vqc(&[
        "--seed",
        seed,
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--n-train",
        "6",
        "--n-val",
        "3",
        "--n-test",
        "3",
    ])
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = small_dataset(dir, seed);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key("manifest.json"));
    assert_eq!(ta, tb);
    assert_ne!(ta, tree(&c));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&vqc(&["--help"])), 0);
    assert_eq!(code(&vqc(&["train", "--help"])), 0);
    assert_eq!(code(&vqc(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_1() {
    let o = vqc(&["--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--no-such-flag"));
    assert_eq!(code(&vqc(&[])), 1);
    let o = vqc(&["--set", "bogus_key=1", "--dump-config"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
    let o = vqc(&["--set", "consistency_ramp=[10,5]", "--dump-config"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn dump_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vqc(&["--set", "model.num_codes=16", "--seed", "9", "--dump-config"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = String::from_utf8(o.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["model"]["num_codes"], 16);
    assert_eq!(v["seed"], 9);
    let path = tmp.path().join("c.json");
    fs::write(&path, &first).unwrap();
    let o = vqc(&["--config", path.to_str().unwrap(), "--dump-config"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), first);
}

#[test]
fn data_errors_exit_2_and_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.vqcm");
    let o = vqc(&[
        "translate",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--input",
        "x.vqt",
        "--out",
        "y.vqt",
        "--source",
        "1",
        "--target",
        "2",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.vqcm"));

    let bad = tmp.path().join("bad.vqcm");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = vqc(&[
        "probe",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("p").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.vqcm"), "{}", stderr(&o));
}

#[test]
fn train_translate_and_augment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&small_dataset(&data, "1")), 0);
    let run = tmp.path().join("r");
    let o = vqc(&[
        "--set",
        "total_steps=20",
        "--set",
        "log_every=10",
        "--set",
        "checkpoint_every=10",
        "--set",
        "model.base_channels=8",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--plot",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["final.vqcm", "loss.csv", "val.csv", "loss.svg", "val.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("final.vqcm");
    let input = data.join("test000").join("seq1.vqt");
    let out = tmp.path().join("t.vqt");
    let translate = |extra: &[&str]| {
        let mut args = vec![
            "translate",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        vqc(&args)
    };
    assert_eq!(code(&translate(&["--source", "1", "--target", "4"])), 0);
    assert!(out.exists());
    assert_eq!(code(&translate(&["--source", "1", "--target", "4", "--steps", "multi"])), 0);
    let o = translate(&["--source", "5", "--target", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--source"));
    let o = translate(&["--source", "1", "--target", "4", "--steps", "multi", "--chain", "2,4"]);
    assert_eq!(code(&o), 1);

    let aug = tmp.path().join("g.vqt");
    let o = vqc(&[
        "augment",
        "--input",
        input.to_str().unwrap(),
        "--out",
        aug.to_str().unwrap(),
        "--transform",
        "gamma",
        "--gamma",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&aug).unwrap(), fs::read(&input).unwrap());
}
