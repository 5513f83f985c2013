use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, joint_loss, load_checkpoint, noam_lr, save_checkpoint, AdamConfig, AdamState,
    LossConfig, TrainingTriple, OPTIM_PREFIX,
};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::{Graph, Mode, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    /// Multiplier on the warmup schedule.
    pub lr_factor: f64,
    /// Fixed learning rate replacing the schedule.
    pub lr_override: Option<f64>,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub avg_last_k: usize,
    pub seed: u64,
}

impl TrainingConfig {
    /// Desk-scale defaults: warmup 400, batch 64, at most 20k steps.
    pub fn desk() -> Self {
        TrainingConfig {
            adam: AdamConfig::default(),
            warmup_steps: 400,
            lr_factor: 1.0,
            lr_override: None,
            loss: LossConfig::default(),
            batch_size: 64,
            total_steps: 20_000,
            checkpoint_every: 1000,
            avg_last_k: 5,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.loss.label_smoothing
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `step<TAB>loss` records.
pub struct LossCurve;

impl LossCurve {
    pub fn line(step: u64, loss: f64) -> String {
        format!("{step}\t{loss}\n")
    }

    pub fn append(path: &Path, step: u64, loss: f64) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(Self::line(step, loss).as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<(u64, f64)>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (s, v) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::format(path, format!("bad loss line {l:?}")))?;
                let s = s
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad step {s:?}")))?;
                let v = v
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad loss {v:?}")))?;
                Ok((s, v))
            })
            .collect()
    }

    /// Drops records after `step`, e.g. before resuming from a checkpoint.
    pub fn truncate_after(path: &Path, step: u64) -> Result<()> {
        if !path.exists() {
            return Ok(());
        }
        let kept: String = Self::read(path)?
            .into_iter()
            .filter(|&(s, _)| s <= step)
            .map(|(s, v)| Self::line(s, v))
            .collect();
        super::write_atomic(path, kept.as_bytes())
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model, optimizer state and data order. Everything a step depends on is
/// a function of the seed and the step number, so a run restored from a
/// checkpoint continues exactly as the uninterrupted run would.
pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    adam: AdamState,
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            adam: AdamState::default(),
        })
    }

    /// Updates taken so far.
    pub fn step(&self) -> u64 {
        self.adam.t
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        match self.config.lr_override {
            Some(lr) => lr,
            None => {
                self.config.lr_factor
                    * noam_lr(self.model.config.d_model, step, self.config.warmup_steps)
            }
        }
    }

    /// Example indices of the batch used at `step` (1-based): epochs are
    /// seeded permutations, batches consecutive slices of them.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let bs = self.config.batch_size.min(n);
        let per_epoch = n.div_ceil(bs) as u64;
        let i = step.saturating_sub(1);
        let (epoch, slot) = (i / per_epoch, (i % per_epoch) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch)));
        let start = slot * bs;
        perm[start..(start + bs).min(n)].to_vec()
    }

    /// Gradient of the loss on `batch` for every parameter, plus the loss.
    pub fn gradients(&self, batch: &[&TrainingTriple], seed: u64) -> Result<(f64, ParamStore)> {
        let mode = if self.model.config.dropout > 0.0 {
            Mode::Train { seed }
        } else {
            Mode::Eval
        };
        let mut g = Graph::new(mode);
        let b = self.model.bind(&mut g, true);
        let loss = joint_loss(&mut g, &self.model, &b, batch, &self.config.loss)?;
        g.backward(loss)?;
        let mut grads = ParamStore::new();
        for (name, var) in b.iter() {
            grads.insert(name, g.grad_or_zeros(var));
        }
        Ok((g.value(loss).data()[0], grads))
    }

    /// One optimizer step on the batch scheduled for the next step.
    pub fn train_step(&mut self, data: &[TrainingTriple]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let step = self.step() + 1;
        let batch: Vec<&TrainingTriple> = self
            .batch_indices(data.len(), step)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let (loss, grads) = self.gradients(&batch, mix(self.config.seed ^ 0xD5, step))?;
        let lr = self.learning_rate(step);
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            lr,
            &self.config.adam,
        )?;
        Ok(loss)
    }

    /// Trains until `until` steps have been taken, or until `on_step`
    /// returns false. With `out_dir`, appends to `loss.tsv` and saves
    /// `ckpt-<step>.sbck` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        data: &[TrainingTriple],
        until: u64,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&Trainer, f64) -> Result<bool>,
    ) -> Result<Vec<(u64, f64)>> {
        let mut curve = Vec::new();
        while self.step() < until {
            let loss = self.train_step(data)?;
            let step = self.step();
            curve.push((step, loss));
            if let Some(dir) = out_dir {
                LossCurve::append(&dir.join("loss.tsv"), step, loss)?;
                if self.config.checkpoint_every > 0
                    && step.is_multiple_of(self.config.checkpoint_every)
                {
                    self.save(&checkpoint_path(dir, step))?;
                }
            }
            if !on_step(self, loss)? {
                break;
            }
        }
        Ok(curve)
    }

    /// Parameters plus optimizer state.
    pub fn checkpoint_store(&self) -> ParamStore {
        let mut s = self.model.params.clone();
        for (name, t) in self.adam.m.iter() {
            s.insert(format!("{OPTIM_PREFIX}m/{name}"), t.clone());
        }
        for (name, t) in self.adam.v.iter() {
            s.insert(format!("{OPTIM_PREFIX}v/{name}"), t.clone());
        }
        s.insert(
            format!("{OPTIM_PREFIX}step"),
            Tensor::scalar(self.adam.t as f64),
        );
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_store())
    }

    /// Restores parameters and optimizer state written by [`Trainer::save`].
    pub fn resume(model_config: ModelConfig, config: TrainingConfig, path: &Path) -> Result<Self> {
        let mut params = load_checkpoint(path)?;
        let mut optim = params.split_off_prefix(OPTIM_PREFIX);
        let model = Model::from_params(model_config, params)?;
        let mut adam = AdamState::default();
        if let Some(t) = optim.get(&format!("{OPTIM_PREFIX}step")) {
            adam.t = t.data()[0] as u64;
        }
        let m = optim.split_off_prefix(&format!("{OPTIM_PREFIX}m/"));
        let v = optim.split_off_prefix(&format!("{OPTIM_PREFIX}v/"));
        for (name, t) in m.iter() {
            adam.m.insert(&name[OPTIM_PREFIX.len() + 2..], t.clone());
        }
        for (name, t) in v.iter() {
            adam.v.insert(&name[OPTIM_PREFIX.len() + 2..], t.clone());
        }
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            adam,
        })
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.sbck"))
}

/// Checkpoints in `dir` written by [`Trainer::run`], oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".sbck"))
        })
        .collect();
    out.sort();
    Ok(out)
}
