//! Baseline-versus-bidirectional comparison on a synthetic task.

use std::time::Instant;

use super::data::{generate_task, task_vocabulary, TaskSpec};
use super::metrics::prefix_suffix_accuracy;
use super::pipeline::{encode_pairs, gold_triples, translate, Decoder, IdPair};
use crate::attention::FusionConfig;
use crate::decoding::{Direction, SearchConfig};
use crate::model::{Model, ModelConfig};
use crate::training::{build_pseudo_triples, Directions, Trainer, TrainingConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismConfig {
    pub task: TaskSpec,
    /// Vocabulary sizes are filled in from the task.
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub baseline_steps: u64,
    pub sb_steps: u64,
    pub beam: usize,
    /// Prefix / suffix window.
    pub k: usize,
    pub seed: u64,
}

impl MechanismConfig {
    /// Small model and short runs sized for one core.
    pub fn small(task: TaskSpec, seed: u64) -> Self {
        let mut model = ModelConfig::desk(0, 0);
        model.d_model = 32;
        model.num_heads = 4;
        model.d_ff = 128;
        model.max_len = 32;
        let mut training = TrainingConfig::desk();
        training.batch_size = 32;
        training.warmup_steps = 200;
        training.checkpoint_every = 0;
        training.seed = seed;
        // Pseudo sides only serve as partner history.
        training.loss.supervise_pseudo = false;
        MechanismConfig {
            task,
            model,
            training,
            baseline_steps: 3000,
            sb_steps: 3000,
            beam: 4,
            k: 4,
            seed,
        }
    }
}

/// First-k and last-k accuracy of one system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndAccuracy {
    pub first: f64,
    pub last: f64,
}

impl EndAccuracy {
    pub fn min(&self) -> f64 {
        self.first.min(self.last)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismReport {
    pub l2r: EndAccuracy,
    pub r2l: EndAccuracy,
    pub sb: EndAccuracy,
    pub seconds: f64,
}

impl MechanismReport {
    /// L2R is better at the start, R2L better at the end.
    pub fn baselines_unbalanced(&self) -> bool {
        self.l2r.last < self.l2r.first && self.r2l.first < self.r2l.last
    }

    /// The joint model's weaker end is no worse than either baseline's.
    pub fn sb_balanced(&self) -> bool {
        self.sb.min() >= self.l2r.min() && self.sb.min() >= self.r2l.min()
    }

    pub fn summary(&self) -> String {
        let row =
            |n: &str, a: &EndAccuracy| format!("{n:<4} first {:.4} last {:.4}", a.first, a.last);
        format!(
            "{} | {} | {} | {:.0}s",
            row("L2R", &self.l2r),
            row("R2L", &self.r2l),
            row("SB", &self.sb),
            self.seconds
        )
    }
}

fn end_accuracy(model: &Model, pairs: &[IdPair], how: &Decoder, k: usize) -> Result<EndAccuracy> {
    let mut cands = Vec::with_capacity(pairs.len());
    for (s, _) in pairs {
        cands.push(translate(model, s, how, model.config.max_len)?.0);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    let (first, last) = prefix_suffix_accuracy(&cands, &refs, k);
    Ok(EndAccuracy { first, last })
}

/// Trains L2R and R2L baselines on gold data, builds pseudo triples with
/// them, trains a bidirectional model on those triples and scores all
/// three on the test split. `log` receives progress lines.
pub fn mechanism_experiment(
    cfg: &MechanismConfig,
    mut log: impl FnMut(&str),
) -> Result<MechanismReport> {
    let t0 = Instant::now();
    let data = generate_task(&cfg.task)?;
    let vocab = task_vocabulary(cfg.task.vocab_size);
    let train = encode_pairs(&data.train, &vocab, &vocab)?;
    let test = encode_pairs(&data.test, &vocab, &vocab)?;
    let model_cfg = ModelConfig {
        src_vocab: vocab.len(),
        tgt_vocab: vocab.len(),
        ..cfg.model.clone()
    };
    let gold = gold_triples(&train);
    let search = SearchConfig::new(cfg.beam, model_cfg.max_len);

    let mut baseline = |dir: Directions, seed: u64| -> Result<Model> {
        let mut base_cfg = model_cfg.clone();
        base_cfg.fusion = FusionConfig::linear(0.0);
        let mut tc = cfg.training.clone();
        tc.loss.directions = dir;
        tc.seed = seed;
        let mut tr = Trainer::new(Model::new(base_cfg, seed)?, tc)?;
        let curve = tr.run(&gold, cfg.baseline_steps, None, |_, _| Ok(true))?;
        log(&format!(
            "{dir:?} baseline: loss {:.4} after {} steps ({:.0}s)",
            curve.last().map_or(f64::NAN, |c| c.1),
            tr.step(),
            t0.elapsed().as_secs_f64()
        ));
        Ok(tr.model)
    };
    let l2r = baseline(Directions::L2R, cfg.seed)?;
    let r2l = baseline(Directions::R2L, cfg.seed.wrapping_add(1))?;
    let l2r_acc = end_accuracy(
        &l2r,
        &test,
        &Decoder::Beam(Direction::L2R, search.clone()),
        cfg.k,
    )?;
    let r2l_acc = end_accuracy(
        &r2l,
        &test,
        &Decoder::Beam(Direction::R2L, search.clone()),
        cfg.k,
    )?;

    let triples = build_pseudo_triples(&train, &l2r, &r2l, &search)?;
    log(&format!(
        "{} pseudo triples ({:.0}s)",
        triples.len(),
        t0.elapsed().as_secs_f64()
    ));
    let mut tc = cfg.training.clone();
    tc.loss.directions = Directions::Both;
    tc.seed = cfg.seed.wrapping_add(2);
    let mut tr = Trainer::new(Model::new(model_cfg, tc.seed)?, tc)?;
    let curve = tr.run(&triples, cfg.sb_steps, None, |_, _| Ok(true))?;
    log(&format!(
        "SB model: loss {:.4} after {} steps ({:.0}s)",
        curve.last().map_or(f64::NAN, |c| c.1),
        tr.step(),
        t0.elapsed().as_secs_f64()
    ));
    let sb_acc = end_accuracy(&tr.model, &test, &Decoder::Bidirectional(search), cfg.k)?;
    Ok(MechanismReport {
        l2r: l2r_acc,
        r2l: r2l_acc,
        sb: sb_acc,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
