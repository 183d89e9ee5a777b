//! The alternating critic / translator optimisation loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::checkpoint::{self, CheckpointMeta};
use crate::datasets::{make_semi_split, BatchSampler, Corpus, SemiBatch, SemiSplit};
use crate::error::{Error, Result};
use crate::losses::{
    content_adversarial_loss, content_separating_loss, critic_objective, cycle_consistency_loss,
    feature_consistency_loss, image_adversarial_loss, image_classifying_loss,
    image_reconstruction_loss, style_classifying_loss, translator_objective, CriticTerms,
    LossReport, LossWeights, Side, TranslatorTerms,
};
use crate::networks::{make_random_style, NetConfig, NetworkBundle, CRITIC_GROUPS, TRANSLATOR_GROUPS};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Start,
    CriticUpdated,
    TranslatorUpdated,
}

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub net: NetConfig,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    pub labeled_fraction: f64,
    /// Attribute columns to train on; empty selects every column.
    pub attributes: Vec<String>,
    /// When false the unlabeled stream draws from the labeled pool with its
    /// labels stripped, so only labeled images are ever seen.
    pub use_unlabeled: bool,
    /// Stop once the smoothed reconstruction loss has not improved for this
    /// many log intervals. Zero disables early stopping.
    pub early_stop_patience: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            net: NetConfig::default(),
            weights: LossWeights::default(),
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            batch_size: 8,
            total_iterations: 100_000,
            checkpoint_interval: 10_000,
            log_interval: 100,
            seed: 0,
            labeled_fraction: 1.0,
            attributes: Vec::new(),
            use_unlabeled: true,
            early_stop_patience: 0,
        }
    }
}

impl TrainingConfig {
    /// 32x32 synthetic-shapes setup with reduced widths.
    pub fn desk() -> Self {
        Self {
            net: NetConfig::desk(3),
            total_iterations: 20_000,
            checkpoint_interval: 5_000,
            log_interval: 50,
            labeled_fraction: 0.1,
            learning_rate: 3e-4,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return Err(Error::Config("checkpoint_interval and log_interval must be >= 1".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }

    /// Reads a flat TOML document; absent keys keep their defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Settings that must match between a checkpoint and the run resuming it.
    fn resume_key(&self) -> Self {
        Self {
            total_iterations: 0,
            checkpoint_interval: 0,
            log_interval: 0,
            early_stop_patience: 0,
            ..self.clone()
        }
    }
}

/// Networks, both optimizers, the iteration counter and every RNG stream.
pub struct Trainer {
    pub config: TrainingConfig,
    pub nets: NetworkBundle,
    translator_opt: Adam,
    critic_opt: Adam,
    pub iteration: u64,
    noise_rng: ChaCha8Rng,
    pub sampler: BatchSampler,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("iteration", &self.iteration)
            .field("nets", &self.nets)
            .finish()
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let nets = NetworkBundle::new(&config.net, config.seed)?;
        let translator_opt = Adam::new(config.adam(), nets.named_parameters(&TRANSLATOR_GROUPS));
        let critic_opt = Adam::new(config.adam(), nets.named_parameters(&CRITIC_GROUPS));
        Ok(Self {
            noise_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            sampler: BatchSampler::new(config.seed.wrapping_add(2), config.batch_size)?,
            config,
            nets,
            translator_opt,
            critic_opt,
            iteration: 0,
        })
    }

    fn check_terms(&self, terms: &[(&str, &Tensor)]) -> Result<()> {
        for (name, t) in terms {
            if !scalar(t).is_finite() {
                return Err(Error::NonFinite {
                    term: name.to_string(),
                    iteration: self.iteration,
                });
            }
        }
        Ok(())
    }

    /// One iteration: encode, reconstruct, translate, re-encode and cycle,
    /// then a critic update with the translator fixed followed by a
    /// translator update with the critics fixed.
    pub fn train_step(&mut self, batch: &SemiBatch) -> Result<LossReport> {
        self.train_step_observed(batch, |_, _| {})
    }

    /// [`Trainer::train_step`] with `observe` called on the networks at the
    /// start of the step and after each of the two updates.
    pub fn train_step_observed<F>(&mut self, batch: &SemiBatch, mut observe: F) -> Result<LossReport>
    where
        F: FnMut(StepPhase, &NetworkBundle),
    {
        observe(StepPhase::Start, &self.nets);
        let nets = &self.nets;
        let w = &self.config.weights;
        let b = batch.batch_size();
        let labels = &batch.labels;
        if labels.size() != [b, nets.config().nd] || batch.unlabeled.size()[0] != b {
            return Err(Error::Shape(format!(
                "batch has {b} labeled images, labels {:?}, {} unlabeled images",
                labels.size(),
                batch.unlabeled.size()[0]
            )));
        }

        // representation decomposition
        let x_all = Tensor::cat(&[&batch.labeled, &batch.unlabeled], 0);
        let s_all = nets.encode_style(&x_all)?;
        let c_all = nets.encode_content(&x_all)?;
        let s_l = s_all.narrow(0, 0, b);
        let s_u = s_all.narrow(0, b, b);
        let c_l = c_all.narrow(0, 0, b);
        let c_u = c_all.narrow(0, b, b);

        // reconstruction and translation share one generator pass
        let s_r = make_random_style(labels, nets.config().nz, &mut self.noise_rng);
        let decoded = nets.generate(&Tensor::cat(&[&c_u, &c_u], 0), &Tensor::cat(&[&s_u, &s_r], 0))?;
        let x_uu = decoded.narrow(0, 0, b);
        let x_ul = decoded.narrow(0, b, b);

        // consistency reconstruction
        let s_ul = nets.encode_style(&x_ul)?;
        let c_ul = nets.encode_content(&x_ul)?;
        let x_ulu = nets.generate(&c_ul, &s_u)?;

        // critic update, translator outputs detached
        let real = nets.critique_image(&x_all)?;
        let fake = nets.critique_image(&x_ul.detach())?;
        let c_l_fixed = c_l.detach();
        let critic = CriticTerms {
            adv_c: content_adversarial_loss(
                &nets.critic_content(&c_u.detach())?,
                &nets.critic_content(&c_l_fixed)?,
                Side::Critic,
            ),
            pre_c: content_separating_loss(&nets.predict_label_from_content(&c_l_fixed)?, labels)?,
            adv_x: image_adversarial_loss(&real.scores, &fake.scores, Side::Critic)?,
            pre_x_d: image_classifying_loss(&real.labels.narrow(0, 0, b), labels, Side::Critic)?,
        };
        let critic_total = critic_objective(&critic, w);
        self.check_terms(&[
            ("adv_c_critic", &critic.adv_c),
            ("pre_c_critic", &critic.pre_c),
            ("adv_x_critic", &critic.adv_x),
            ("pre_x_d", &critic.pre_x_d),
        ])?;
        self.critic_opt.backward_step(&critic_total);
        observe(StepPhase::CriticUpdated, &self.nets);

        // translator update against the refreshed critics
        let nets = &self.nets;
        let fake = nets.critique_image(&x_ul)?;
        let (_, attr_l) = nets.split_style(&s_l);
        let lat = feature_consistency_loss(&c_u, &s_r, &c_ul, &s_ul)?;
        let translator = TranslatorTerms {
            cla_s: style_classifying_loss(&attr_l, labels, w.squared_style_norm)?,
            adv_c: content_adversarial_loss(&Tensor::new(), &nets.critic_content(&c_l)?, Side::Translator),
            pre_c: content_separating_loss(&nets.predict_label_from_content(&c_l)?, labels)?,
            rec_x: image_reconstruction_loss(&batch.unlabeled, &x_uu)?,
            adv_x: image_adversarial_loss(&[], &fake.scores, Side::Translator)?,
            pre_x_g: image_classifying_loss(&fake.labels, labels, Side::Translator)?,
            cyc_x: cycle_consistency_loss(&batch.unlabeled, &x_ulu)?,
            lat: lat.total(),
        };
        let translator_total = translator_objective(&translator, w);
        self.check_terms(&[
            ("cla_s", &translator.cla_s),
            ("adv_c_translator", &translator.adv_c),
            ("pre_c_translator", &translator.pre_c),
            ("rec_x", &translator.rec_x),
            ("adv_x_translator", &translator.adv_x),
            ("pre_x_g", &translator.pre_x_g),
            ("cyc_x", &translator.cyc_x),
            ("lat", &translator.lat),
        ])?;
        self.translator_opt.backward_step(&translator_total);
        observe(StepPhase::TranslatorUpdated, &self.nets);

        self.iteration += 1;
        let report = LossReport {
            iteration: self.iteration,
            cla_s: scalar(&translator.cla_s),
            adv_c_critic: scalar(&critic.adv_c),
            adv_c_translator: scalar(&translator.adv_c),
            pre_c_critic: scalar(&critic.pre_c),
            pre_c_translator: scalar(&translator.pre_c),
            rec_x: scalar(&translator.rec_x),
            adv_x_critic: scalar(&critic.adv_x),
            adv_x_translator: scalar(&translator.adv_x),
            pre_x_d: scalar(&critic.pre_x_d),
            pre_x_g: scalar(&translator.pre_x_g),
            cyc_x: scalar(&translator.cyc_x),
            rec_c: scalar(&lat.content),
            rec_s: scalar(&lat.style),
            lat: scalar(&translator.lat),
            critic_objective: scalar(&critic_total),
            translator_objective: scalar(&translator_total),
        };
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                iteration: self.iteration,
            });
        }
        Ok(report)
    }

    /// Draws the next batch from this trainer's sampler and trains on it.
    pub fn step_on(&mut self, corpus: &Corpus, split: &SemiSplit) -> Result<LossReport> {
        let batch = self.sampler.next_semi_batch(corpus, split)?;
        self.train_step(&batch)
    }

    pub fn translator_parameters(&self) -> Vec<(String, Tensor)> {
        self.nets.named_parameters(&TRANSLATOR_GROUPS)
    }

    pub fn critic_parameters(&self) -> Vec<(String, Tensor)> {
        self.nets.named_parameters(&CRITIC_GROUPS)
    }

    pub fn meta(&self, attribute_names: &[String]) -> CheckpointMeta {
        CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            attribute_names: attribute_names.to_vec(),
            optimizer: self.config.adam(),
            noise_rng: self.noise_rng.clone(),
            sampler: self.sampler.clone(),
        }
    }

    pub fn save(&self, dir: &Path, attribute_names: &[String]) -> Result<()> {
        let mut optimizer = self.translator_opt.state("translator");
        optimizer.extend(self.critic_opt.state("critic"));
        checkpoint::save(dir, &self.meta(attribute_names), &self.nets, &optimizer)
    }

    /// Restores a trainer from a checkpoint directory. `expected`, when
    /// given, must agree with the stored configuration on everything except
    /// schedule lengths and intervals.
    pub fn resume(dir: &Path, expected: Option<&TrainingConfig>) -> Result<Self> {
        let loaded = checkpoint::load(dir)?;
        let mut config = loaded.meta.config.clone();
        if let Some(exp) = expected {
            if exp.resume_key() != config.resume_key() {
                return Err(Error::Config(format!(
                    "configuration does not match checkpoint {}",
                    dir.display()
                )));
            }
            config.total_iterations = exp.total_iterations;
            config.checkpoint_interval = exp.checkpoint_interval;
            config.log_interval = exp.log_interval;
            config.early_stop_patience = exp.early_stop_patience;
        }
        let mut trainer = Trainer::new(config)?;
        trainer.nets.load_parameters(&crate::networks::GROUPS, &loaded.parameters)?;
        trainer.translator_opt.load_state("translator", &loaded.optimizer)?;
        trainer.critic_opt.load_state("critic", &loaded.optimizer)?;
        trainer.iteration = loaded.meta.iteration;
        trainer.noise_rng = loaded.meta.noise_rng;
        trainer.sampler = loaded.meta.sampler;
        Ok(trainer)
    }
}

/// Exponential moving average used for loss smoothing.
#[derive(Debug, Clone, Copy)]
pub struct Smoother {
    alpha: f64,
    value: Option<f64>,
}

impl Smoother {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, value: None }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => prev + self.alpha * (x - prev),
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Summary of a completed [`fit`] run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub iterations: u64,
    pub smoothed_rec_x: f64,
    pub stopped_early: bool,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:07}")
}

/// Trains on the dataset under `data_root`, writing checkpoints and the
/// loss log into `out_dir`. With `resume` the run continues from that
/// checkpoint's iteration and RNG state.
pub fn fit(
    config: &TrainingConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    let corpus = Corpus::load(data_root, &config.attributes, config.net.image_size)?;
    fit_corpus(config, &corpus, out_dir, resume)
}

pub fn semi_split_for(config: &TrainingConfig, corpus: &Corpus) -> Result<SemiSplit> {
    let mut split = make_semi_split(corpus, config.labeled_fraction, config.seed)?;
    if !config.use_unlabeled {
        split.unlabeled = split.labeled.clone();
    }
    Ok(split)
}

pub fn fit_corpus(
    config: &TrainingConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    if corpus.nd() as i64 != config.net.nd {
        return Err(Error::Config(format!(
            "dataset has {} attributes but nd = {}",
            corpus.nd(),
            config.net.nd
        )));
    }
    let split = semi_split_for(config, corpus)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, Some(config))?,
        None => Trainer::new(config.clone())?,
    };
    let ckpt_root = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut smoother = Smoother::new(0.02);
    let mut best = f64::INFINITY;
    let mut stale = 0u64;
    let mut stopped_early = false;
    while trainer.iteration < config.total_iterations {
        let report = trainer.step_on(corpus, &split)?;
        let smoothed = smoother.update(report.rec_x);
        let it = trainer.iteration;
        if it % config.log_interval == 0 {
            writeln!(log, "{}", report.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
            log::info!(
                "iter {it}: rec_x {:.4} (smoothed {smoothed:.4}) cyc_x {:.4} critic {:.4} translator {:.4}",
                report.rec_x,
                report.cyc_x,
                report.critic_objective,
                report.translator_objective
            );
            if config.early_stop_patience > 0 {
                if smoothed < best * 0.999 {
                    best = smoothed;
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        if it % config.checkpoint_interval == 0 {
            trainer.save(&ckpt_root.join(checkpoint_name(it)), &corpus.names)?;
        }
        if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let final_dir = ckpt_root.join(FINAL_CHECKPOINT);
    trainer.save(&final_dir, &corpus.names)?;
    Ok(FitOutcome {
        final_checkpoint: final_dir,
        iterations: trainer.iteration,
        smoothed_rec_x: smoother.value().unwrap_or(f64::NAN),
        stopped_early,
    })
}

/// Reads a loss log written by [`fit`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
