use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn s2r(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2r"))
        .current_dir(dir)
        .env_remove("S2R_JOBS")
        .args(args)
        .output()
        .expect("spawn s2r")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = s2r(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary")
}

fn write_config(dir: &Path, json: &str) {
    fs::write(dir.join("cfg.json"), json).unwrap();
}

const SMALL: &str = r#"{"scene": {"width": 24, "height": 24, "num_frames": 3},
    "model": {"train": {"epochs": 2, "patch_size": null}, "finetune": {"epochs": 1, "patch_size": null}},
    "adapter": {"train": {"epochs": 1, "patch_size": null}}}"#;

/// Files under `dir`, relative, sorted.
fn tree(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = s2r(dir.path(), &["--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen", "synth", "analyze", "train", "finetune", "adapt", "predict", "tta", "eval", "merge", "ablate"] {
        assert!(help.lines().any(|l| l.trim_start().starts_with(cmd)), "missing {cmd} in\n{help}");
    }
    assert!(help.contains("S2R_JOBS"));
    assert!(help.contains("--config"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, r#"{"sead": 3}"#);
    assert_eq!(s2r(d, &["-c", "cfg.json", "gen", "-n", "1", "-o", "x"]).status.code(), Some(2));
    write_config(d, r#"{"scene": {"num_frames": 1}}"#);
    assert_eq!(s2r(d, &["-c", "cfg.json", "gen", "-n", "1", "-o", "x"]).status.code(), Some(2));
    write_config(d, "{}");
    assert_eq!(s2r(d, &["-c", "cfg.json", "synth", "missing.json", "-o", "x"]).status.code(), Some(3));
    assert_eq!(s2r(d, &["-c", "cfg.json", "gen", "-n", "0", "-o", "x"]).status.code(), Some(2));
    assert_eq!(s2r(d, &["-c", "cfg.json", "--jobs", "0", "gen", "-n", "1", "-o", "x"]).status.code(), Some(2));
}

#[test]
fn gen_counts_split_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, r#"{"scene": {"width": 16, "height": 16, "num_frames": 3, "target_fraction": 0.25}}"#);
    let one = ok(d, &["-c", "cfg.json", "gen", "-n", "1", "-o", "one"]);
    assert_eq!(one["sequences"], 1);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("one/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 1);

    let s = ok(d, &["-c", "cfg.json", "gen", "-n", "8", "-o", "a"]);
    assert_eq!((s["domain_a"].as_u64(), s["domain_b"].as_u64()), (Some(6), Some(2)));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("a/manifest.json")).unwrap()).unwrap();
    let b = manifest["entries"].as_array().unwrap().iter().filter(|e| e["domain"] == "B").count();
    assert_eq!(b, 2);

    ok(d, &["-c", "cfg.json", "gen", "-n", "8", "-o", "b"]);
    let (ta, tb) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(ta, tb);
    for f in &ta {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f:?}");
    }
    ok(d, &["-c", "cfg.json", "--seed", "9", "gen", "-n", "8", "-o", "c"]);
    assert_ne!(
        fs::read(d.join("a/seq_000/frame_000.pfm")).ok(),
        fs::read(d.join("c/seq_000/frame_000.pfm")).ok()
    );
}

#[test]
fn pipeline_outputs_are_reproducible_and_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, SMALL);
    ok(d, &["-c", "cfg.json", "gen", "-n", "4", "-o", "data"]);
    let before: Vec<Vec<u8>> = tree(&d.join("data")).iter().map(|f| fs::read(d.join("data").join(f)).unwrap()).collect();

    let s = ok(d, &["-c", "cfg.json", "synth", "data/manifest.json", "-o", "br"]);
    assert_eq!(s["brackets"], 4);
    for f in ["br/manifest.json", "br/bracket_000/gt.pfm", "br/bracket_000/mid.png", "br/bracket_000/meta.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let a = ok(d, &["-c", "cfg.json", "analyze", "data/manifest.json", "-o", "an"]);
    assert_eq!(a["images"], 4);
    let csv = fs::read_to_string(d.join("an/report.csv")).unwrap();
    assert!(csv.starts_with("dataset,FHLP,EHL,SI,CF,stdL,ALL,DR"));

    let t1 = ok(d, &["-c", "cfg.json", "train", "data/manifest.json", "-o", "m1.ckpt"]);
    ok(d, &["-c", "cfg.json", "train", "data/manifest.json", "-o", "m2.ckpt"]);
    assert_eq!(fs::read(d.join("m1.ckpt")).unwrap(), fs::read(d.join("m2.ckpt")).unwrap());
    assert!(t1["uncertainty_scale"].as_f64().unwrap() > 0.0);
    assert!(d.join("m1.ckpt.config.json").exists());

    ok(d, &["-c", "cfg.json", "finetune", "m1.ckpt", "data/manifest.json", "-o", "ft.ckpt"]);
    let ad = ok(d, &["-c", "cfg.json", "adapt", "m1.ckpt", "data/manifest.json", "-o", "ad.ckpt"]);
    assert!(ad["adapter_params"].as_u64().unwrap() > 0);
    ok(d, &["-c", "cfg.json", "predict", "ad.ckpt", "data/manifest.json", "-o", "pred"]);
    let e = ok(d, &["-c", "cfg.json", "eval", "pred", "data/manifest.json", "-o", "ev"]);
    assert!(e["psnr_mu"].as_f64().unwrap() > 0.0);
    let header = fs::read_to_string(d.join("ev/eval.csv")).unwrap();
    assert!(header.starts_with("name,PSNR-mu,PSNR-l,SSIM-mu,SSIM-l"));

    let tta = ok(d, &["-c", "cfg.json", "tta", "ad.ckpt", "data/manifest.json", "-o", "tta"]);
    assert_eq!(tta["samples"], 4);
    let diag = fs::read_to_string(d.join("tta/diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 4);
    for line in diag.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let (s, t) = (v["alpha_s"].as_f64().unwrap(), v["alpha_t"].as_f64().unwrap());
        assert_eq!(s + t, 2.0);
    }
    let m = ok(d, &["-c", "cfg.json", "merge", "ad.ckpt", "-o", "merged.ckpt"]);
    assert!(m["max_abs_diff"].as_f64().unwrap() < 1e-3);
    assert!(m["params_after"].as_u64() < m["params_before"].as_u64());
    // merging a plain checkpoint is a configuration error
    assert_eq!(s2r(d, &["-c", "cfg.json", "merge", "m1.ckpt", "-o", "x.ckpt"]).status.code(), Some(2));

    let after: Vec<Vec<u8>> = tree(&d.join("data")).iter().map(|f| fs::read(d.join("data").join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn ablate_single_cell_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let matrix = r#"{
        "seeds": [0],
        "adaptation": {"image_size": 16, "source_train": 4, "source_test": 2, "target_train": 2, "target_test": 2,
                       "pretrain": {"epochs": 1, "patch_size": null}, "adapt": {"epochs": 1, "patch_size": null}},
        "methods": ["fine_tune"],
        "tta": {"image_size": 16, "source_train": 4, "calibration": 2, "stream_len": 2,
                "pretrain": {"epochs": 1, "patch_size": null}},
        "variants": ["ts_adapter_unc"]
    }"#;
    fs::write(d.join("matrix.json"), matrix).unwrap();
    let s = ok(d, &["ablate", "matrix.json", "-o", "abl"]);
    assert_eq!((s["adaptation_rows"].as_u64(), s["tta_rows"].as_u64()), (Some(1), Some(1)));
    let csv = fs::read_to_string(d.join("abl/adaptation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,method,PSNR-mu,PSNR-l,SSIM-mu,SSIM-l,source PSNR-mu,trained params");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,Fine-tune,"));
    let tta = fs::read_to_string(d.join("abl/tta.csv")).unwrap();
    assert!(tta.starts_with("seed,method,PSNR-mu,PSNR-l,SSIM-mu,SSIM-l,mean u\n0,TS+Adapter+Unc,"));

    ok(d, &["ablate", "matrix.json", "-o", "abl2"]);
    assert_eq!(csv, fs::read_to_string(d.join("abl2/adaptation.csv")).unwrap());
    assert_eq!(tta, fs::read_to_string(d.join("abl2/tta.csv")).unwrap());

    fs::write(d.join("bad.json"), r#"{"seeds": [], "methods": []}"#).unwrap();
    assert_eq!(s2r(d, &["ablate", "bad.json", "-o", "x"]).status.code(), Some(2));
    fs::write(d.join("bad.json"), r#"{"sedes": [1]}"#).unwrap();
    assert_eq!(s2r(d, &["ablate", "bad.json", "-o", "x"]).status.code(), Some(2));
}
