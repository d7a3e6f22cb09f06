use std::path::Path;
use std::process::{Command, Output};

use revdarts::profiler::CSV_HEADER;
use revdarts::search::{AlphaFile, Architecture, Dims, ModelOptions, Seq2Seq, Strategy};
use revdarts::tensor::Tensor;

fn revdarts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revdarts"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let o = revdarts(&["bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = revdarts(&["search", "--out", path(&out), "--set", "model.dims.d=100"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.dims.d"), "{}", stderr(&o));

    let o = revdarts(&["search", "--out", path(&out), "--set", "search.no_such_field=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("search.no_such_field"));
}

#[test]
fn malformed_config_file_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"budget": "many"}}"#).unwrap();
    let o = revdarts(&["train", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.budget"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_the_linear_example() {
    let dir = tempfile::tempdir().unwrap();
    let o = revdarts(&[
        "gradcheck",
        "--out",
        path(dir.path()),
        "--set",
        "gradcheck.depths=[1,2]",
        "--set",
        "gradcheck.splits=[2]",
    ]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.contains("PASS linear example: dX = (0, 1)"), "{text}");
    assert!(!text.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["linear_example"]["dx"], serde_json::json!([0.0, 1.0]));
}

#[test]
fn derive_discretizes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Seq2Seq::<f32>::supernet(&Dims::default(), &ModelOptions::default(), 1).unwrap();
    // Encoder: glu, ffn. Decoder: dyn_conv_7, cross_attn, identity.
    let picks = [9, 10, 5, 9, 13];
    for (slot, &p) in picks.iter().enumerate() {
        let id = net.alphas[slot];
        let k = net.params.value(id).numel();
        let v: Vec<f64> = (0..k).map(|i| if i == p { 1.0 } else { 0.0 }).collect();
        *net.params.value_mut(id) = Tensor::from_f64(vec![k], &v).unwrap();
    }
    let ckpt = dir.path().join("ckpt");
    std::fs::create_dir_all(&ckpt).unwrap();
    let alpha = AlphaFile::from_net(&net, 0, 1, Strategy::Darts);
    std::fs::write(ckpt.join("alpha.json"), serde_json::to_string(&alpha).unwrap()).unwrap();

    let out = dir.path().join("out");
    let o = revdarts(&[
        "derive",
        "--out",
        path(&out),
        "--set",
        &format!("paths.checkpoint=\"{}\"", path(&ckpt)),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("encoder layer 0: glu ffn"), "{}", stdout(&o));
    assert!(stdout(&o).contains("decoder layer 0: dyn_conv_7 cross_attn identity | cross_attn"));
    let arch = Architecture::read(&out.join("arch.json")).unwrap();
    assert_eq!(
        arch.encoder[0].iter().map(|k| k.tag()).collect::<Vec<_>>(),
        ["glu", "ffn"]
    );
    assert!(out.join("config.json").exists());
}

#[test]
fn derive_without_a_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = revdarts(&["derive", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.checkpoint"));
}

#[test]
fn runtime_failures_write_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("alpha.json");
    std::fs::write(&bad, r#"{"version": 7}"#).unwrap();
    let out = dir.path().join("out");
    let o = revdarts(&[
        "derive",
        "--out",
        path(&out),
        "--set",
        &format!("paths.checkpoint=\"{}\"", path(&bad)),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "derive");
    assert!(report["error"].as_str().unwrap().contains('7'));
}

#[test]
fn memprofile_writes_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = revdarts(&[
        "memprofile",
        "--out",
        path(dir.path()),
        "--set",
        "memprofile.d_values=[64]",
        "--set",
        "memprofile.depths=[1,2]",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("memprofile.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let rev: Vec<&str> = rows.iter().filter(|r| r[2] == "reversible").map(|r| r[3]).collect();
    assert_eq!(rev[0], rev[1]);
    assert!(dir.path().join("memprofile.json").exists());
}

#[test]
fn short_search_then_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let search = dir.path().join("search");
    let small = [
        "--set",
        "model.dims={\"vocab\":16,\"e\":8,\"d\":48,\"m\":2,\"n\":2,\"s\":1,\"blocks\":1,\"max_positions\":24}",
        "--set",
        "data={\"task\":\"copy\",\"vocab\":16,\"min_len\":2,\"max_len\":6,\"shards\":{\"theta_train\":100,\"alpha_val\":50,\"retrain_train\":100,\"retrain_val\":20,\"test\":20}}",
    ];
    let mut args = vec![
        "search",
        "--out",
        path(&search),
        "--set",
        "search.budget=3",
        "--set",
        "search.batch_size=4",
        "--set",
        "search.checkpoint_interval=3",
    ];
    args.extend(small);
    let o = revdarts(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let arch = search.join("arch.json");
    assert!(arch.exists());

    let derive = dir.path().join("derive");
    let run_set = format!("paths.checkpoint=\"{}\"", path(&search));
    let mut args = vec![
        "derive",
        "--out",
        path(&derive),
        "--set",
        &run_set,
        "--set",
        "select.finetune_steps=2",
    ];
    args.extend(small);
    let o = revdarts(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("selected"));
    let selection: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(derive.join("selection.json")).unwrap()).unwrap();
    assert_eq!(selection["scores"].as_array().unwrap().len(), 2);
    assert!(derive.join("arch.json").exists());

    let train = dir.path().join("train");
    let arch_set = format!("paths.arch=\"{}\"", path(&arch));
    let mut args = vec![
        "train",
        "--out",
        path(&train),
        "--set",
        &arch_set,
        "--set",
        "train.budget=3",
        "--set",
        "train.batch_size=4",
    ];
    args.extend(small);
    let o = revdarts(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(train.join("model/theta.bin").exists());
    assert!(train.join("train_eval.json").exists());

    let eval = dir.path().join("eval");
    let model_set = format!("paths.model=\"{}\"", path(&train.join("model")));
    let mut args = vec!["eval", "--out", path(&eval), "--set", &arch_set, "--set", &model_set];
    args.extend(small);
    let o = revdarts(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    assert!(report["token_accuracy"].as_f64().is_some());
}
