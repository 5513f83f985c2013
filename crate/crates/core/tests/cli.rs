use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sbnmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbnmt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sbnmt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "\
# tiny settings for a fast end-to-end run
d_model = 16
num_heads = 2
d_ff = 32
num_layers = 1
max_len = 8
batch_size = 8
warmup_steps = 10
checkpoint_every = 10
vocab_size = 6
task_min_len = 2
train_size = 40
dev_size = 5
test_size = 6
";

#[test]
fn pipeline_runs_from_the_command_line_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let c = ["--config", "tiny.cfg"];
    let base = [
        &c[..],
        &[
            "--set",
            "fusion=linear",
            "--set",
            "lambda=0",
            "--steps",
            "20",
        ],
    ]
    .concat();

    ok(
        d,
        &[
            &["gen-data"][..],
            &c,
            &[
                "--task",
                "reverse",
                "--seed",
                "3",
                "--set",
                "task_max_len=5",
            ],
        ]
        .concat(),
    );
    for dir in ["l2r", "r2l"] {
        ok(
            d,
            &[
                &[
                    "train",
                    "--corpus",
                    "data/train.tsv",
                    "--out",
                    dir,
                    "--direction",
                    dir,
                ][..],
                &base,
            ]
            .concat(),
        );
        assert!(d.join(dir).join("final.sbck").exists());
        assert!(d.join(dir).join("ckpt-00000020.sbck").exists());
        assert_eq!(
            fs::read_to_string(d.join(dir).join("loss.tsv"))
                .unwrap()
                .lines()
                .count(),
            20
        );
    }
    let triples = ok(
        d,
        &[
            &[
                "build-triples",
                "--l2r",
                "l2r/final.sbck",
                "--r2l",
                "r2l/final.sbck",
            ][..],
            &c,
            &["--corpus", "data/train.tsv", "--out", "tri.tsv"],
        ]
        .concat(),
    );
    assert!(triples.starts_with("wrote 80 triples"));
    ok(
        d,
        &[
            &[
                "train",
                "--triples",
                "tri.tsv",
                "--out",
                "sb",
                "--steps",
                "20",
            ][..],
            &c,
        ]
        .concat(),
    );

    let test = fs::read_to_string(d.join("data/test.tsv")).unwrap();
    let src: String = test
        .lines()
        .map(|l| format!("{}\n", l.split('\t').next().unwrap()))
        .collect();
    let refs: String = test
        .lines()
        .map(|l| format!("{}\n", l.split('\t').nth(1).unwrap()))
        .collect();
    fs::write(d.join("src.txt"), &src).unwrap();
    fs::write(d.join("ref.txt"), &refs).unwrap();
    ok(
        d,
        &[
            "translate",
            "--ckpt",
            "sb/final.sbck",
            "--input",
            "src.txt",
            "--beam",
            "4",
            "--output",
            "hyp.txt",
            "--records",
            "rec.txt",
            "--trace",
            "trace.txt",
        ],
    );
    let hyp = fs::read_to_string(d.join("hyp.txt")).unwrap();
    assert_eq!(hyp.lines().count(), src.lines().count());
    let rec = fs::read_to_string(d.join("rec.txt")).unwrap();
    assert_eq!(rec.lines().count(), 6);
    assert!(rec
        .lines()
        .all(|l| l.contains("direction=") && l.contains("score=")));
    assert!(fs::read_to_string(d.join("trace.txt"))
        .unwrap()
        .contains("step=0"));

    let score = ok(d, &["score", "--cand", "hyp.txt", "--ref", "ref.txt"]);
    assert!(score.starts_with("BLEU "));
    let same = ok(d, &["score", "--cand", "ref.txt", "--ref", "ref.txt"]);
    assert!(same.starts_with("BLEU 100.00\n"));

    ok(
        d,
        &[
            "analyze",
            "--ckpt",
            "sb/final.sbck",
            "--corpus",
            "data/test.tsv",
            "--report",
            "rep.kv",
        ],
    );
    let kv = fs::read_to_string(d.join("rep.kv")).unwrap();
    assert!(kv.contains("bleu=") && kv.contains("first_4=") && kv.contains("l2r_win_rate="));
    ok(
        d,
        &[
            "analyze",
            "--ckpt",
            "sb/final.sbck",
            "--corpus",
            "data/test.tsv",
            "--report",
            "rep2.kv",
        ],
    );
    assert_eq!(kv, fs::read_to_string(d.join("rep2.kv")).unwrap());

    let sweep = ok(
        d,
        &[
            "sweep-beam",
            "--ckpt",
            "sb/final.sbck",
            "--corpus",
            "data/test.tsv",
            "--sizes",
            "2,4,2",
        ],
    );
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(
        rows[0].split_whitespace().nth(1),
        rows[2].split_whitespace().nth(1)
    );

    ok(d, &["avg-ckpt", "--out", "avg/avg.sbck", "--k", "2", "sb"]);
    ok(
        d,
        &[
            "translate",
            "--ckpt",
            "avg/avg.sbck",
            "--input",
            "src.txt",
            "--mode",
            "greedy",
        ],
    );
}

#[test]
fn resume_continues_the_loss_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(
        d,
        &[
            "gen-data",
            "--config",
            "tiny.cfg",
            "--task",
            "copy",
            "--set",
            "task_max_len=4",
        ],
    );
    let train = |extra: &[&str]| {
        ok(
            d,
            &[
                &[
                    "train",
                    "--config",
                    "tiny.cfg",
                    "--corpus",
                    "data/train.tsv",
                ][..],
                extra,
            ]
            .concat(),
        )
    };
    train(&["--out", "full", "--steps", "20"]);
    train(&["--out", "part", "--steps", "10"]);
    let out = train(&["--out", "part", "--steps", "20", "--resume"]);
    assert!(out.contains("resumed from"));
    assert_eq!(
        fs::read(d.join("full/loss.tsv")).unwrap(),
        fs::read(d.join("part/loss.tsv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("full/final.sbck")).unwrap(),
        fs::read(d.join("part/final.sbck")).unwrap()
    );
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(
            d,
            &["gen-data", "--task", "copy", "--seed", "7", "--out", out],
        );
    }
    for split in ["train.tsv", "dev.tsv", "test.tsv"] {
        let a = fs::read(d.join("a").join(split)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(split)).unwrap());
    }
    let line = fs::read_to_string(d.join("a/train.tsv")).unwrap();
    let (s, t) = line.lines().next().unwrap().split_once('\t').unwrap();
    assert_eq!(s, t);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(sbnmt(d, &["--help"]).status.code(), Some(0));
    assert_eq!(sbnmt(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(sbnmt(d, &["score", "--cand", "x"]).status.code(), Some(1));
    assert_eq!(sbnmt(d, &["score", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(
        sbnmt(d, &["score", "--cand", "missing", "--ref", "missing"])
            .status
            .code(),
        Some(2)
    );
    fs::write(d.join("bad.cfg"), "no equals sign here\n").unwrap();
    assert_eq!(
        sbnmt(d, &["gen-data", "--config", "bad.cfg"]).status.code(),
        Some(2)
    );
    assert_eq!(
        sbnmt(d, &["gen-data", "--task", "nope"]).status.code(),
        Some(1)
    );
    fs::write(d.join("c.txt"), "a b\n").unwrap();
    fs::write(d.join("r.txt"), "a b\nc\n").unwrap();
    assert_eq!(
        sbnmt(d, &["score", "--cand", "c.txt", "--ref", "r.txt"])
            .status
            .code(),
        Some(2)
    );
}
