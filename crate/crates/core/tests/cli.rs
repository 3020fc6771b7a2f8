use std::path::Path;
use std::process::{Command, Output};

use apgmos::metrics::read_predictions;
use apgmos::numerics::load_checkpoint;

const CONFIG: &str = "\
channels = 8
tdnn_channels = 12
attention_hidden = 4
apm.head_hidden = 8
apm.epochs = 2
rvq.codebook_size = 8
rvq.iterations = 5
fusion.epochs = 2
fusion.n_a = 2
decoder.hidden = 8
";

fn apgmos(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_apgmos"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn apgmos");
    assert!(
        out.status.success(),
        "apgmos {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn progressive_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.cfg"), CONFIG).unwrap();
    let cfg = ["--config", "small.cfg", "--seed", "5"];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(cfg.iter()).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        apgmos(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["synth-data", "--out-dir", "data", "--systems", "3", "--utts", "4"]);
    assert!(d.join("data/manifest.csv").is_file() && d.join("data/clean_manifest.csv").is_file());

    run(&["train-apm", "--manifest", "data/manifest.csv", "--out", "apm.apgw", "--log", "apm.csv"]);
    let log = std::fs::read_to_string(d.join("apm.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    run(&[
        "train-rvq",
        "--manifest",
        "data/manifest.csv",
        "--pool",
        "data/clean_manifest.csv",
        "--checkpoint",
        "apm.apgw",
        "--out",
        "rvq.apgw",
    ]);
    run(&["train-fusion", "--manifest", "data/manifest.csv", "--checkpoint", "rvq.apgw", "--out", "model.apgw"]);
    let model = load_checkpoint(d.join("model.apgw")).unwrap();
    let frozen = load_checkpoint(d.join("rvq.apgw")).unwrap();
    assert_eq!(model.digest(&["apm.", "rvq."]), frozen.digest(&["apm.", "rvq."]));

    for (mode, model_kind, file) in [("pruned", "fusion", "p.csv"), ("full", "fusion", "f.csv"), ("full", "apm", "a.csv")] {
        run(&[
            "predict",
            "--manifest",
            "data/manifest.csv",
            "--checkpoint",
            "model.apgw",
            "--mode",
            mode,
            "--model",
            model_kind,
            "--split",
            "all",
            "--output",
            file,
        ]);
        let recs = read_predictions(d.join(file)).unwrap();
        assert_eq!(recs.len(), 12);
        assert!(recs.iter().all(|r| r.predicted > 1.0 && r.predicted < 5.0));
    }
    let eval = run(&["evaluate", "--predictions", "p.csv", "a.csv"]);
    let text = String::from_utf8(eval.stdout).unwrap();
    assert_eq!(text.matches("system").count(), 2);
    assert!(text.contains("SRCC"));

    let dump = run(&[
        "dump-attention",
        "--checkpoint",
        "model.apgw",
        "--wav",
        "data/wav/sys000_utt000.wav",
        "--w2v",
        "data/w2v/sys000_utt000.apge",
        "--h",
        "data/h/sys000_utt000.apge",
    ]);
    let csv = String::from_utf8(dump.stdout).unwrap();
    assert!(csv.starts_with("layer,query_index,key_index,weight"));

    run(&["cochleagram", "--input", "data/wav/sys000_utt000.wav", "--output", "c.apgc", "--channels", "8", "--pooled"]);
    let c = apgmos::cochlea::decode_apgc(&std::fs::read(d.join("c.apgc")).unwrap()).unwrap();
    assert_eq!(c.shape(), &[40, 8]);
}

#[test]
fn bad_inputs_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_apgmos"))
        .current_dir(tmp.path())
        .args(["--config", "bad.cfg", "gradcheck", "--instances", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = Command::new(env!("CARGO_BIN_EXE_apgmos"))
        .current_dir(tmp.path())
        .args(["predict", "--manifest", "m.csv", "--output", "o.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}
