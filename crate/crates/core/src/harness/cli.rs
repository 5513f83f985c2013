//! The `sbnmt` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{
    model_config, model_config_settings, search_config, training_config, Settings,
};
use super::data::{generate_task, read_corpus, read_lines, write_corpus, TaskKind, TaskSpec};
use super::metrics::{corpus_bleu, corpus_bleu_smoothed, sweep_table, EvalReport};
use super::pipeline::{beam_sweep, encode_pairs, gold_triples, translate, Decoder};
use crate::decoding::{standard_beam_search, sync_bidirectional_beam_search, Direction};
use crate::model::{Model, Vocabulary};
use crate::training::{
    average_checkpoints, build_pseudo_triples, expand_six_triples, list_checkpoints,
    load_checkpoint, save_checkpoint, LossCurve, Provenance, Trainer, TrainingTriple, OPTIM_PREFIX,
};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "sbnmt",
    about = "Synchronous bidirectional sequence transduction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Text config of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        s.apply_overrides(&self.set)?;
        Ok(s)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/dev/test corpora of a synthetic task.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model on a corpus or a triples file.
    Train {
        #[command(flatten)]
        common: Common,
        /// `source<TAB>target` corpus.
        #[arg(long, conflicts_with = "triples")]
        corpus: Option<PathBuf>,
        /// Triples written by `build-triples`.
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// both, l2r or r2l.
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the newest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode pseudo references with two unidirectional models.
    BuildTriples {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        l2r: PathBuf,
        #[arg(long)]
        r2l: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit the six-combination set instead of two triples per pair.
        #[arg(long)]
        six: bool,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
    /// Translate one tokenized sentence per line.
    Translate {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-sentence decode records.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Per-step search trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Corpus BLEU of candidates against references.
    Score {
        #[arg(long)]
        cand: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Evaluation report on a `source<TAB>target` corpus.
    Analyze {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Write the `key=value` report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        bucket_width: usize,
    },
    /// BLEU at several beam sizes.
    SweepBeam {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        sizes: Vec<usize>,
    },
    /// Average the last k checkpoints.
    AvgCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: usize,
        /// Checkpoint files, oldest first, or one directory.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// sb, l2r, r2l or greedy.
    #[arg(long, default_value = "sb")]
    mode: String,
    #[arg(long)]
    max_len: Option<usize>,
}

struct Loaded {
    model: Model,
    src: Vocabulary,
    tgt: Vocabulary,
}

fn sidecar_dir(ckpt: &Path) -> &Path {
    match ckpt.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn write_sidecars(dir: &Path, model: &Model, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
    let cfg = dir.join("model.config");
    fs::write(&cfg, model_config_settings(&model.config).render())
        .map_err(|e| Error::io(cfg, e))?;
    src.save(&dir.join("src.vocab"))?;
    tgt.save(&dir.join("tgt.vocab"))
}

/// A checkpoint plus `model.config`, `src.vocab` and `tgt.vocab` from its
/// directory.
fn load_model(ckpt: &Path) -> Result<Loaded> {
    let dir = sidecar_dir(ckpt);
    let src = Vocabulary::load(&dir.join("src.vocab"))?;
    let tgt = Vocabulary::load(&dir.join("tgt.vocab"))?;
    let cfg = model_config(
        &Settings::load(&dir.join("model.config"))?,
        src.len(),
        tgt.len(),
    )?;
    let mut params = load_checkpoint(ckpt)?;
    params.split_off_prefix(OPTIM_PREFIX);
    Ok(Loaded {
        model: Model::from_params(cfg, params)?,
        src,
        tgt,
    })
}

fn decoder_for(args: &DecodeArgs, s: &Settings, max_len: usize) -> Result<Decoder> {
    let cfg = search_config(s, args.beam, max_len)?;
    Ok(match args.mode.as_str() {
        "sb" => Decoder::Bidirectional(cfg),
        "l2r" => Decoder::Beam(Direction::L2R, cfg),
        "r2l" => Decoder::Beam(Direction::R2L, cfg),
        "greedy" => Decoder::Greedy(Direction::L2R),
        other => return Err(Error::Config(format!("unknown decode mode {other:?}"))),
    })
}

fn decode_max_len(args: &DecodeArgs, model: &Model) -> usize {
    args.max_len.unwrap_or(model.config.max_len)
}

fn words(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn provenance(p: Provenance) -> &'static str {
    match p {
        Provenance::Gold => "gold",
        Provenance::Pseudo => "pseudo",
    }
}

/// `src<TAB>fwd<TAB>bwd<TAB>fwd_prov,bwd_prov`, target sides in natural order.
fn format_triples(triples: &[TrainingTriple], src: &Vocabulary, tgt: &Vocabulary) -> String {
    let side = |ids: &[usize], rev: bool| {
        let mut w = tgt.decode(ids);
        if rev {
            w.reverse();
        }
        w.join(" ")
    };
    triples
        .iter()
        .map(|t| {
            format!(
                "{}\t{}\t{}\t{},{}\n",
                src.decode(&t.src).join(" "),
                side(&t.y_fwd, false),
                side(&t.y_bwd, true),
                provenance(t.fwd),
                provenance(t.bwd)
            )
        })
        .collect()
}

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn read_triples(path: &Path, src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<TrainingTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prov = |p: &str| match p {
        "gold" => Ok(Provenance::Gold),
        "pseudo" => Ok(Provenance::Pseudo),
        _ => Err(Error::format(path, format!("bad provenance {p:?}"))),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::format(path, format!("expected 4 columns in {l:?}")));
            }
            let (pf, pb) = cols[3].split_once(',').ok_or_else(|| {
                Error::format(path, format!("bad provenance column {:?}", cols[3]))
            })?;
            Ok(TrainingTriple::new(
                src.encode(&toks(cols[0]))?,
                &tgt.encode(&toks(cols[1]))?,
                &tgt.encode(&toks(cols[2]))?,
                (prov(pf)?, prov(pb)?),
            ))
        })
        .collect()
}

fn vocab_from_pairs<'a>(it: impl Iterator<Item = &'a Vec<String>>) -> Vocabulary {
    let all: Vec<&str> = it.flat_map(|v| v.iter().map(String::as_str)).collect();
    Vocabulary::from_tokens(all)
}

fn cmd_gen_data(
    common: &Common,
    task: Option<String>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let s = common.settings()?;
    let kind = TaskKind::parse(task.as_deref().or(s.get_str("task")).unwrap_or("copy"))?;
    let spec = TaskSpec {
        kind,
        vocab_size: s.get("vocab_size", 20)?,
        min_len: s.get("task_min_len", 3)?,
        max_len: s.get("task_max_len", 12)?,
        train: s.get("train_size", 10_000)?,
        dev: s.get("dev_size", 500)?,
        test: s.get("test_size", 1000)?,
        seed: seed.map_or_else(|| s.get("seed", 1), Ok)?,
    };
    let data = generate_task(&spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_corpus(&out.join("train.tsv"), &data.train)?;
    write_corpus(&out.join("dev.tsv"), &data.dev)?;
    write_corpus(&out.join("test.tsv"), &data.test)?;
    println!(
        "wrote {} / {} / {} pairs to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    corpus: Option<&Path>,
    triples_path: Option<&Path>,
    out: &Path,
    direction: Option<String>,
    steps: Option<u64>,
    resume: bool,
) -> Result<()> {
    let mut s = common.settings()?;
    if let Some(d) = direction {
        s.set("direction", d);
    }
    if let Some(n) = steps {
        s.set("total_steps", n);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (src, tgt, data) = match (corpus, triples_path) {
        (Some(c), None) => {
            let pairs = read_corpus(c)?;
            let src = vocab_from_pairs(pairs.iter().map(|p| &p.0));
            let tgt = vocab_from_pairs(pairs.iter().map(|p| &p.1));
            let ids = encode_pairs(&pairs, &src, &tgt)?;
            (src, tgt, gold_triples(&ids))
        }
        (None, Some(t)) => {
            let text = fs::read_to_string(t).map_err(|e| Error::io(t, e))?;
            let mut srcw: Vec<String> = Vec::new();
            let mut tgtw: Vec<String> = Vec::new();
            for l in text.lines() {
                let cols: Vec<&str> = l.split('\t').collect();
                if cols.len() == 4 {
                    srcw.extend(cols[0].split_whitespace().map(str::to_string));
                    tgtw.extend(
                        cols[1]
                            .split_whitespace()
                            .chain(cols[2].split_whitespace())
                            .map(str::to_string),
                    );
                }
            }
            let src = Vocabulary::from_tokens(srcw.iter().map(String::as_str));
            let tgt = Vocabulary::from_tokens(tgtw.iter().map(String::as_str));
            let data = read_triples(t, &src, &tgt)?;
            (src, tgt, data)
        }
        _ => {
            return Err(Error::Config(
                "train needs exactly one of --corpus or --triples".into(),
            ))
        }
    };
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mcfg = model_config(&s, src.len(), tgt.len())?;
    let tcfg = training_config(&s)?;
    let latest = if resume {
        list_checkpoints(out)?.pop()
    } else {
        None
    };
    let mut trainer = match latest {
        Some(p) => {
            let t = Trainer::resume(mcfg, tcfg.clone(), &p)?;
            LossCurve::truncate_after(&out.join("loss.tsv"), t.step())?;
            println!("resumed from {} at step {}", p.display(), t.step());
            t
        }
        None => {
            let _ = fs::remove_file(out.join("loss.tsv"));
            Trainer::new(Model::new(mcfg, tcfg.seed)?, tcfg.clone())?
        }
    };
    write_sidecars(out, &trainer.model, &src, &tgt)?;
    let curve = trainer.run(&data, tcfg.total_steps, Some(out), |_, _| Ok(true))?;
    let final_path = out.join("final.sbck");
    save_checkpoint(&final_path, &trainer.model.params)?;
    if let Some((step, loss)) = curve.last() {
        println!("step {step} loss {loss:.6}");
    }
    println!("saved {}", final_path.display());
    Ok(())
}

fn cmd_build_triples(
    common: &Common,
    l2r: &Path,
    r2l: &Path,
    corpus: &Path,
    out: &Path,
    six: bool,
    beam: usize,
) -> Result<()> {
    let s = common.settings()?;
    let a = load_model(l2r)?;
    let b = load_model(r2l)?;
    if a.src != b.src || a.tgt != b.tgt {
        return Err(Error::Config(
            "the two models use different vocabularies".into(),
        ));
    }
    let pairs = read_corpus(corpus)?;
    let ids = encode_pairs(&pairs, &a.src, &a.tgt)?;
    let search = search_config(&s, beam, a.model.config.max_len)?;
    let triples = if six {
        expand_six_triples(&ids, &a.model, &b.model, &search)?
    } else {
        build_pseudo_triples(&ids, &a.model, &b.model, &search)?
    };
    fs::write(out, format_triples(&triples, &a.src, &a.tgt)).map_err(|e| Error::io(out, e))?;
    let truncated = triples.iter().filter(|t| t.truncated).count();
    println!(
        "wrote {} triples ({truncated} truncated) to {}",
        triples.len(),
        out.display()
    );
    Ok(())
}

fn cmd_translate(
    args: &DecodeArgs,
    input: &Path,
    output: Option<&Path>,
    records: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let s = args.common.settings()?;
    let m = load_model(&args.ckpt)?;
    let max_len = decode_max_len(args, &m.model);
    let how = decoder_for(args, &s, max_len)?;
    let mut out = String::new();
    let mut rec = String::new();
    let mut tr = String::new();
    for (i, line) in read_lines(input)?.iter().enumerate() {
        let src = m.src.encode(&words(line))?;
        let result = match &how {
            Decoder::Bidirectional(c) => {
                let mut c = c.clone();
                c.trace = trace.is_some();
                Some(sync_bidirectional_beam_search(&m.model, &src, &c)?)
            }
            Decoder::Beam(d, c) => {
                let mut c = c.clone();
                c.trace = trace.is_some();
                Some(standard_beam_search(&m.model, &src, &c, *d)?)
            }
            Decoder::Greedy(_) => None,
        };
        let ids = match &result {
            Some(r) => r.output(),
            None => translate(&m.model, &src, &how, max_len)?.0,
        };
        out.push_str(&m.tgt.decode(&ids).join(" "));
        out.push('\n');
        if let Some(r) = &result {
            rec.push_str(&format!("line={} {}\n", i + 1, r.record_line()));
            for t in &r.trace {
                tr.push_str(&format!("line={} {t}\n", i + 1));
            }
        }
    }
    write_or_print(output, &out)?;
    if let Some(p) = records {
        fs::write(p, rec).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = trace {
        fs::write(p, tr).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn cmd_score(cand: &Path, reference: &Path) -> Result<()> {
    let c = read_lines(cand)?;
    let r = read_lines(reference)?;
    if c.len() != r.len() {
        return Err(Error::format(
            cand,
            format!("{} candidate lines vs {} reference lines", c.len(), r.len()),
        ));
    }
    println!("BLEU {:.2}", corpus_bleu(&c, &r, 4)?);
    println!("BLEU_smoothed {:.2}", corpus_bleu_smoothed(&c, &r, 4)?);
    Ok(())
}

fn cmd_analyze(
    args: &DecodeArgs,
    corpus: &Path,
    report: Option<&Path>,
    k: usize,
    width: usize,
) -> Result<()> {
    let s = args.common.settings()?;
    let m = load_model(&args.ckpt)?;
    let max_len = decode_max_len(args, &m.model);
    let how = decoder_for(args, &s, max_len)?;
    let pairs = read_corpus(corpus)?;
    let ids = encode_pairs(&pairs, &m.src, &m.tgt)?;
    let mut cands = Vec::new();
    let mut wins = Vec::new();
    for (src, _) in &ids {
        let (out, dir) = translate(&m.model, src, &how, max_len)?;
        cands.push(out);
        wins.push(dir == Direction::L2R);
    }
    let refs: Vec<Vec<usize>> = ids.iter().map(|p| p.1.clone()).collect();
    let srcs: Vec<Vec<usize>> = ids.iter().map(|p| p.0.clone()).collect();
    let bidir = matches!(how, Decoder::Bidirectional(_));
    let r = EvalReport::compute(&cands, &refs, &srcs, bidir.then_some(&wins[..]), k, width)?;
    print!("{}", r.to_table(&args.mode));
    if let Some(p) = report {
        fs::write(p, r.to_kv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn cmd_sweep(args: &DecodeArgs, corpus: &Path, sizes: &[usize]) -> Result<()> {
    let s = args.common.settings()?;
    let m = load_model(&args.ckpt)?;
    let max_len = decode_max_len(args, &m.model);
    let how = decoder_for(args, &s, max_len)?;
    let pairs = read_corpus(corpus)?;
    let ids = encode_pairs(&pairs, &m.src, &m.tgt)?;
    let rows = beam_sweep(&m.model, &ids, sizes, &how)?;
    print!("{}", sweep_table(&rows));
    Ok(())
}

fn cmd_avg(out: &Path, k: usize, inputs: &[PathBuf]) -> Result<()> {
    let paths = if inputs.len() == 1 && inputs[0].is_dir() {
        list_checkpoints(&inputs[0])?
    } else {
        inputs.to_vec()
    };
    let avg = average_checkpoints(&paths, k)?;
    let to = sidecar_dir(out);
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    save_checkpoint(out, &avg)?;
    let from = sidecar_dir(&paths[paths.len() - 1]);
    if from != to {
        for name in ["model.config", "src.vocab", "tgt.vocab"] {
            if from.join(name).exists() {
                fs::copy(from.join(name), to.join(name))
                    .map_err(|e| Error::io(to.join(name), e))?;
            }
        }
    }
    println!("averaged {k} checkpoints into {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            task,
            seed,
            out,
        } => cmd_gen_data(&common, task, seed, &out),
        Command::Train {
            common,
            corpus,
            triples,
            out,
            direction,
            steps,
            resume,
        } => cmd_train(
            &common,
            corpus.as_deref(),
            triples.as_deref(),
            &out,
            direction,
            steps,
            resume,
        ),
        Command::BuildTriples {
            common,
            l2r,
            r2l,
            corpus,
            out,
            six,
            beam,
        } => cmd_build_triples(&common, &l2r, &r2l, &corpus, &out, six, beam),
        Command::Translate {
            decode,
            input,
            output,
            records,
            trace,
        } => cmd_translate(
            &decode,
            &input,
            output.as_deref(),
            records.as_deref(),
            trace.as_deref(),
        ),
        Command::Score { cand, reference } => cmd_score(&cand, &reference),
        Command::Analyze {
            decode,
            corpus,
            report,
            k,
            bucket_width,
        } => cmd_analyze(&decode, &corpus, report.as_deref(), k, bucket_width),
        Command::SweepBeam {
            decode,
            corpus,
            sizes,
        } => cmd_sweep(&decode, &corpus, &sizes),
        Command::AvgCkpt { out, k, inputs } => cmd_avg(&out, k, &inputs),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
