//! Trainer invariants, shared by the invariant tests and the acceptance run.
//! Each check returns a description of the first violation.

use std::path::Path;

use aguit::checkpoint;
use aguit::datasets::Corpus;
use aguit::losses::{LossReport, LossWeights};
use aguit::networks::{NetworkBundle, CRITIC_GROUPS, TRANSLATOR_GROUPS};
use aguit::synthetic::Shape;
use aguit::trainer::{fit_corpus, read_loss_log, semi_split_for, StepPhase, Trainer, CHECKPOINT_DIR};
use tch::{Kind, Tensor};

use super::{bitwise_equal, small_config, snapshot, synthetic_corpus};

pub type Check = std::result::Result<(), String>;

type Params = Vec<(String, Tensor)>;

pub fn corpus() -> Corpus {
    synthetic_corpus(64, 11, &Shape::TRAINING)
}

fn group_snapshot(nets: &NetworkBundle, groups: &[&str]) -> Params {
    nets.named_parameters(groups)
        .into_iter()
        .map(|(n, t)| (n, t.detach().copy()))
        .collect()
}

/// The critic update leaves every translator parameter bitwise unchanged and
/// the translator update leaves every critic parameter unchanged.
pub fn ab_isolation(steps: usize) -> Check {
    let corpus = corpus();
    let cfg = small_config(3);
    let split = semi_split_for(&cfg, &corpus).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    for step in 0..steps {
        let batch = trainer.sampler.next_semi_batch(&corpus, &split).map_err(|e| e.to_string())?;
        let mut seen: Vec<(StepPhase, Params, Params)> = Vec::new();
        trainer
            .train_step_observed(&batch, |phase, nets| {
                seen.push((
                    phase,
                    group_snapshot(nets, &TRANSLATOR_GROUPS),
                    group_snapshot(nets, &CRITIC_GROUPS),
                ))
            })
            .map_err(|e| e.to_string())?;
        let [(_, a0, b0), (_, a1, b1), (_, a2, b2)] = &seen[..] else {
            return Err(format!("expected three phases, saw {}", seen.len()));
        };
        if !bitwise_equal(a0, a1) {
            return Err(format!("step {step}: critic update changed translator parameters"));
        }
        if bitwise_equal(b0, b1) {
            return Err(format!("step {step}: critic update left the critics unchanged"));
        }
        if !bitwise_equal(b1, b2) {
            return Err(format!("step {step}: translator update changed critic parameters"));
        }
        if bitwise_equal(a1, a2) {
            return Err(format!("step {step}: translator update left the translator unchanged"));
        }
    }
    Ok(())
}

fn reports_equal(a: &LossReport, b: &LossReport) -> bool {
    a.iteration == b.iteration
        && a.named()
            .iter()
            .zip(b.named().iter())
            .all(|((_, x), (_, y))| x.to_bits() == y.to_bits())
}

fn run_steps(trainer: &mut Trainer, corpus: &Corpus, steps: usize) -> std::result::Result<Vec<LossReport>, String> {
    let split = semi_split_for(&trainer.config, corpus).map_err(|e| e.to_string())?;
    (0..steps)
        .map(|_| trainer.step_on(corpus, &split).map_err(|e| e.to_string()))
        .collect()
}

/// Two trainers with the same seed produce bitwise-identical reports and
/// parameters.
pub fn deterministic_replay(steps: usize) -> Check {
    let corpus = corpus();
    let mut a = Trainer::new(small_config(5)).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(small_config(5)).map_err(|e| e.to_string())?;
    let ra = run_steps(&mut a, &corpus, steps)?;
    let rb = run_steps(&mut b, &corpus, steps)?;
    for (i, (x, y)) in ra.iter().zip(&rb).enumerate() {
        if !reports_equal(x, y) {
            return Err(format!("reports diverge at step {}", i + 1));
        }
    }
    if !bitwise_equal(&snapshot(&a.nets), &snapshot(&b.nets)) {
        return Err("parameters differ after replay".into());
    }
    Ok(())
}

/// Save, reload, train one step: identical to training one step directly.
pub fn checkpoint_round_trip(dir: &Path) -> Check {
    let corpus = corpus();
    let mut direct = Trainer::new(small_config(7)).map_err(|e| e.to_string())?;
    run_steps(&mut direct, &corpus, 2)?;
    let ckpt = dir.join("round_trip");
    direct.save(&ckpt, &corpus.names).map_err(|e| e.to_string())?;
    let mut restored = Trainer::resume(&ckpt, None).map_err(|e| e.to_string())?;
    if restored.iteration != direct.iteration {
        return Err(format!("iteration {} restored as {}", direct.iteration, restored.iteration));
    }
    if !bitwise_equal(&snapshot(&direct.nets), &snapshot(&restored.nets)) {
        return Err("restored parameters differ".into());
    }
    let x = run_steps(&mut direct, &corpus, 1)?;
    let y = run_steps(&mut restored, &corpus, 1)?;
    if !reports_equal(&x[0], &y[0]) {
        return Err("next report differs after the round trip".into());
    }
    if !bitwise_equal(&snapshot(&direct.nets), &snapshot(&restored.nets)) {
        return Err("parameters differ one step after the round trip".into());
    }
    let (_, nets) = checkpoint::load_networks(&ckpt).map_err(|e| e.to_string())?;
    let probe = corpus.images.narrow(0, 0, 2);
    let enc = |n: &NetworkBundle| -> std::result::Result<Tensor, String> {
        let s = n.encode_style(&probe).map_err(|e| e.to_string())?;
        let c = n.encode_content(&probe).map_err(|e| e.to_string())?;
        n.generate(&c, &s).map_err(|e| e.to_string())
    };
    let reloaded = Trainer::resume(&ckpt, None).map_err(|e| e.to_string())?;
    if !enc(&nets)?.equal(&enc(&reloaded.nets)?) {
        return Err("loaded networks give different outputs".into());
    }
    Ok(())
}

/// All loss weights zero: a step changes no parameter.
pub fn zero_weights_freeze() -> Check {
    let corpus = corpus();
    let mut cfg = small_config(9);
    cfg.weights = LossWeights::zero();
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let before = snapshot(&trainer.nets);
    run_steps(&mut trainer, &corpus, 2)?;
    if !bitwise_equal(&before, &snapshot(&trainer.nets)) {
        return Err("parameters moved with all weights zero".into());
    }
    Ok(())
}

/// `total_iterations == checkpoint_interval` gives the intermediate and the
/// final checkpoint.
pub fn checkpoint_schedule(dir: &Path) -> Check {
    let corpus = corpus();
    let mut cfg = small_config(1);
    cfg.total_iterations = 2;
    cfg.checkpoint_interval = 2;
    let out = dir.join("schedule");
    fit_corpus(&cfg, &corpus, &out, None).map_err(|e| e.to_string())?;
    let mut names: Vec<String> = std::fs::read_dir(out.join(CHECKPOINT_DIR))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names != ["final", "iter_0000002"] {
        return Err(format!("checkpoints {names:?}"));
    }
    Ok(())
}

/// Interrupting at k and resuming continues the loss curve exactly.
pub fn resume_continuity(dir: &Path) -> Check {
    let corpus = corpus();
    let cfg = small_config(13);
    let full = dir.join("full");
    fit_corpus(&cfg, &corpus, &full, None).map_err(|e| e.to_string())?;
    let mut short = cfg.clone();
    short.total_iterations = 2;
    let part = dir.join("part");
    fit_corpus(&short, &corpus, &part, None).map_err(|e| e.to_string())?;
    let ckpt = part.join(CHECKPOINT_DIR).join("iter_0000002");
    fit_corpus(&cfg, &corpus, &part, Some(&ckpt)).map_err(|e| e.to_string())?;
    let a = read_loss_log(&full.join(aguit::trainer::LOSS_LOG)).map_err(|e| e.to_string())?;
    let b = read_loss_log(&part.join(aguit::trainer::LOSS_LOG)).map_err(|e| e.to_string())?;
    if a.len() != 4 || b.len() != 4 {
        return Err(format!("log lengths {} and {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(&b) {
        if !reports_equal(x, y) {
            return Err(format!("resumed curve differs at iteration {}", x.iteration));
        }
    }
    Ok(())
}

pub fn finite_weights(nets: &NetworkBundle) -> bool {
    snapshot(nets)
        .iter()
        .all(|(_, t)| t.isfinite().all().int64_value(&[]) == 1 && t.kind() == Kind::Float)
}
