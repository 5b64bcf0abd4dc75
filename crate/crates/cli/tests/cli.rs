use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmlm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmlm")).args(args).current_dir(dir).output().expect("spawn gmlm")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// World spec, 12-utterance corpus and a tiny trained model.
fn setup(dir: &Path) {
    fs::write(dir.join("world.txt"), "groups = 2\nlevels = 2\ncodebook_size = 8\nsemantic_vocab = 8\nspeakers = 3\nseed = 5\n").unwrap();
    ok(gmlm(&["gen-data", "--spec", "world.txt", "--n", "12", "--out", "corpus", "--t-min", "10", "--t-max", "14", "--seed", "2"], dir));
    fs::write(dir.join("train.txt"), "d_model = 8\nheads = 2\nlayers = 1\nff_dim = 16\nencoder_layers = 1\nsteps = 5\nbatch_size = 2\n").unwrap();
    ok(gmlm(&["train", "--corpus", "corpus", "--config", "train.txt", "--out", "m.bin", "--stats", "stats.csv"], dir));
}

#[test]
fn gen_data_writes_manifest_and_files() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path());
    let corpus = tmp.path().join("corpus");
    let gact = fs::read_dir(&corpus).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gact")).count();
    assert_eq!(gact, 12);
    assert!(corpus.join("manifest.txt").exists());
    let stats = fs::read_to_string(tmp.path().join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 6);
    assert!(stats.starts_with("step,loss,"));
}

#[test]
fn decode_is_deterministic_and_evaluable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let utt = "corpus/utt_00000.gact";
    for out in ["a.gact", "b.gact"] {
        ok(gmlm(&["decode", "--model", "m.bin", "--prompt", utt, "--sem", utt, "--nc", "4", "--seed", "9", "--out", out, "--trace", "t.csv"], dir));
    }
    assert_eq!(fs::read(dir.join("a.gact")).unwrap(), fs::read(dir.join("b.gact")).unwrap());
    assert!(fs::read_to_string(dir.join("t.csv")).unwrap().starts_with("phase,iteration,frame,group,level,token,confidence,action"));

    fs::write(dir.join("sem.txt"), "1 2 3, 4 5\n").unwrap();
    ok(gmlm(&["decode", "--model", "m.bin", "--prompt", utt, "--sem", "sem.txt", "--baseline", "2,1,1,1", "--out", "c.gact"], dir));

    let out = ok(gmlm(&["eval", "--pred", "a.gact", "--ref", utt], dir));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["g0j0,", "g1j1,", "overall,", "coarse,", "fine,", "frame_match,"] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
    // Mismatched frame counts are a runtime error.
    let bad = gmlm(&["eval", "--pred", "c.gact", "--ref", utt], dir);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bench_writes_rows_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(gmlm(
        &[
            "bench", "--model", "m.bin", "--world", "world.txt", "--prompt-lengths", "4,8", "--target-lengths", "6", "--iterations", "3",
            "--repetitions", "3", "--out", "bench.csv", "--plot", "bench.svg",
        ],
        dir,
    ));
    let rows = fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    assert!(fs::read_to_string(dir.join("bench.svg")).unwrap().starts_with("<svg"));
    ok(gmlm(&["plot", "--rows", "bench.csv", "--out", "again.svg"], dir));
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let empty = gmlm(&["bench", "--model", "m.bin", "--prompt-lengths", "--out", "x.csv"], dir);
    assert_eq!(empty.status.code(), Some(2));
    let err = String::from_utf8_lossy(&empty.stderr);
    assert!(err.contains("prompt_lengths") && err.contains("Usage"), "{err}");
    assert!(!dir.join("x.csv").exists());

    assert_eq!(gmlm(&["decode", "--frob"], dir).status.code(), Some(2));
    assert_eq!(gmlm(&["nonsense"], dir).status.code(), Some(2));
    let missing = gmlm(&["decode", "--model", "nope.bin", "--prompt", "p", "--sem", "s", "--out", "o"], dir);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}
