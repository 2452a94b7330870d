use std::path::Path;
use std::process::{Command, Output};

fn srnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srnn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(srnn(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(srnn(dir.path(), &["train", "--variant"]).status.code(), Some(1));
    assert_eq!(srnn(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn commands_without_a_manifest_point_at_prepare() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("work")).unwrap();
    let o = srnn(dir.path(), &["train", "--manifest", "work"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("srnn prepare"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), "split_scale = 0.05\nmax_test_utterances = 1\n").unwrap();
    let ok = |o: Output| assert!(o.status.success(), "{}", stderr(&o));
    ok(srnn(d, &["synth-corpus", "--out", "corpus", "--seconds", "30", "--extra-seconds", "24"]));
    ok(srnn(d, &["prepare", "--corpus", "corpus", "--out", "work", "--config", "tiny.toml", "--desk-scale"]));

    let cases: [(&[&str], &str); 4] = [
        (&["extract-embeddings", "--manifest", "work"], "srnn train-encoder"),
        (&["train", "--manifest", "work", "--variant", "encoder-f0uv"], "srnn extract-embeddings"),
        (&["evaluate", "--manifest", "work", "--run", "work/runs/onehot-f0uv"], "srnn train"),
        (&["synthesize", "--manifest", "work", "--checkpoint", "nope.ckpt"], "srnn train"),
    ];
    for (args, producer) in cases {
        let o = srnn(d, args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(producer), "{args:?}: {}", stderr(&o));
    }

    let o = srnn(d, &["extract-embeddings", "--manifest", "work", "--encoder", "mfcc", "--T", "0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
