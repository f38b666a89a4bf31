//! Optimization loops for the three supervision regimes, run logging,
//! two-stage dynamics detection, and the depth-ceiling search.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoding::{make_target, Mode, Vocabulary};
use crate::error::{Error, Result};
use crate::evalstats::{lpc, SkillScore, ALPHA, K_SET};
use crate::model::{
    batch_greedy_decode, batch_last_argmax, batch_loss, batch_token_accuracy, loss_and_grad,
    DropoutSpec, Parameters, Scalar, TrainBatch,
};
use crate::rng::{derive_seed, stream_rng, tag};
use crate::stargraph::{DatasetBundle, TaskInstance};

/// Training hyperparameters. Optimizer is Adam with beta1 = 0.9,
/// beta2 = 0.999, eps = 1e-8 and no weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Evaluate every this many epochs.
    pub eval_cadence: usize,
    /// Validation instances used at each in-training eval point; 0 = full split.
    pub eval_subset: usize,
    /// Stop early on a sustained success or overfit signature.
    pub early_stop: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference hyperparameters: 500 epochs for latent/CoT, 1000 for ICoT,
    /// lr 1e-4, batch 1024.
    pub fn reference(mode: Mode, seed: u64) -> Self {
        let epochs = match mode {
            Mode::Icot(_) => 1000,
            _ => 500,
        };
        TrainConfig {
            mode,
            epochs,
            batch_size: 1024,
            lr: 1e-4,
            eval_cadence: 1,
            eval_subset: 512,
            early_stop: true,
            seed,
        }
    }

    /// Desk-scale variant: smaller batches suit the smaller datasets.
    pub fn desk(mode: Mode, seed: u64) -> Self {
        TrainConfig {
            batch_size: 256,
            ..Self::reference(mode, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_cadence == 0 {
            return Err(Error::Config(
                "epochs, batch size and eval cadence must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub update: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Task accuracy: first emitted token vs ground truth.
    pub val_acc: f64,
    /// Teacher-forced next-token accuracy over supervised positions.
    pub token_acc: f64,
    /// ICoT stage; 0 for latent and CoT runs.
    pub stage: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EvalRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,train_loss,val_loss,val_acc,token_acc,stage\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.update, r.train_loss, r.val_loss, r.val_acc, r.token_acc, r.stage
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// How a finished run's dynamics classify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTwoOutcome {
    Success,
    Overfit,
    Incomplete,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage1_reached: bool,
    /// Eval-record index where accuracy first entered the chance band.
    pub stage1_index: Option<usize>,
    pub stage2_outcome: StageTwoOutcome,
    /// Eval-record indices supporting the stage-2 call.
    pub evidence: Vec<usize>,
}

/// Stage-1 chance band half-width as a fraction of 1/k.
pub const STAGE1_DELTA_FRACTION: f64 = 0.05;
/// Eval points a signature must persist to count.
pub const STAGE_WINDOW: usize = 10;
const SUCCESS_ACC: f64 = 0.95;
const SUCCESS_WINDOW: usize = 3;
/// Minimum eval points without accuracy escaping the chance band before an
/// overfit signature can stop a run early. Generalization can arrive long
/// after train/val losses diverge, so the effective patience also scales
/// with the stage budget (see `run_stage`): the abort only fires once most
/// of the budget is spent without accuracy ever leaving the chance band.
const OVERFIT_PATIENCE: usize = 40;

/// Two-stage classification of a run log.
///
/// Stage 1 is reached when smoothed validation accuracy enters the band
/// `[1/k - delta, 1/k + delta]` (or crosses above it). Stage 2 is `Success`
/// when raw accuracy holds at or above 0.95 for a window, `Overfit` when the
/// train loss falls while the val loss rises over a window with accuracy
/// stuck in the band, else `Incomplete`.
pub fn detect_stages(log: &RunLog, k: usize, delta: f64, window: usize) -> StageReport {
    let n = log.records.len();
    let base = 1.0 / k as f64;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(window.saturating_sub(1) / 2);
            let hi = (i + window / 2 + 1).min(n);
            log.records[lo..hi].iter().map(|r| r.val_acc).sum::<f64>() / (hi - lo) as f64
        })
        .collect();

    let stage1_index = smooth.iter().position(|&a| a >= base - delta);
    let stage1_reached = stage1_index.is_some();

    // Success: a run of `SUCCESS_WINDOW.max(window min for short logs)` raw
    // accuracies at or above the threshold.
    let need = SUCCESS_WINDOW.min(n.max(1));
    let mut success_at = None;
    if n >= need && need > 0 {
        for i in 0..=n - need {
            if log.records[i..i + need]
                .iter()
                .all(|r| r.val_acc >= SUCCESS_ACC)
            {
                success_at = Some(i);
                break;
            }
        }
    }
    if let (Some(i), true) = (success_at, stage1_reached) {
        return StageReport {
            stage1_reached,
            stage1_index,
            stage2_outcome: StageTwoOutcome::Success,
            evidence: (i..(i + need).min(n)).collect(),
        };
    }

    // Overfit: some window with falling train loss, rising val loss, and
    // accuracy inside the chance band throughout.
    if stage1_reached && n >= window && window >= 2 {
        for i in 0..=n - window {
            let w = &log.records[i..i + window];
            let train_falls = w[window - 1].train_loss < w[0].train_loss - 1e-6;
            let val_rises = w[window - 1].val_loss > w[0].val_loss + 1e-6;
            let stuck = w.iter().all(|r| (r.val_acc - base).abs() <= delta);
            if train_falls && val_rises && stuck {
                return StageReport {
                    stage1_reached,
                    stage1_index,
                    stage2_outcome: StageTwoOutcome::Overfit,
                    evidence: (i..i + window).collect(),
                };
            }
        }
    }

    StageReport {
        stage1_reached,
        stage1_index,
        stage2_outcome: StageTwoOutcome::Incomplete,
        evidence: Vec::new(),
    }
}

/// Builds full training sequences (input followed by target) with the loss
/// confined to target positions.
pub fn encode_batch(
    instances: &[TaskInstance],
    mode: Mode,
    vocab: &Vocabulary,
) -> Result<TrainBatch> {
    let mut seqs = Vec::with_capacity(instances.len());
    let mut masks = Vec::with_capacity(instances.len());
    for inst in instances {
        let ex = make_target(inst, mode, vocab)?;
        let mut seq = ex.input;
        let input_len = seq.len();
        seq.extend_from_slice(&ex.target);
        // Position t predicts token t+1; the first supervised prediction is
        // made at the last input position.
        let mut mask = vec![false; seq.len() - 1];
        for (j, &on) in ex.loss_mask.iter().enumerate() {
            mask[input_len - 1 + j] = on;
        }
        seqs.push(seq);
        masks.push(mask);
    }
    Ok(TrainBatch { seqs, masks })
}

/// Task accuracy in latent terms: greedy first token vs ground, over a set
/// of instances. Returns (correct, total).
pub fn first_hop_accuracy<S: Scalar>(
    params: &Parameters<S>,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
) -> Result<(usize, usize)> {
    if instances.is_empty() {
        return Ok((0, 0));
    }
    let inputs: Vec<Vec<u32>> = instances
        .iter()
        .map(|i| crate::encoding::encode_input(i, vocab))
        .collect::<Result<_>>()?;
    let preds = batch_last_argmax(params, &inputs)?;
    let correct = preds
        .iter()
        .zip(instances)
        .filter(|(&p, inst)| p == inst.ground)
        .count();
    Ok((correct, instances.len()))
}

/// Exact-match accuracy of the full greedy continuation against the mode's
/// target (path plus eos). Returns (correct, total).
pub fn exact_path_accuracy<S: Scalar>(
    params: &Parameters<S>,
    instances: &[TaskInstance],
    mode: Mode,
    vocab: &Vocabulary,
) -> Result<(usize, usize)> {
    if instances.is_empty() {
        return Ok((0, 0));
    }
    let mut inputs = Vec::with_capacity(instances.len());
    let mut targets = Vec::with_capacity(instances.len());
    let mut max_new = 0usize;
    for inst in instances {
        let ex = make_target(inst, mode, vocab)?;
        max_new = max_new.max(ex.target.len());
        inputs.push(ex.input);
        targets.push(ex.target);
    }
    let outs = batch_greedy_decode(params, &inputs, max_new, vocab.eos())?;
    let correct = outs.iter().zip(&targets).filter(|(o, t)| o == t).count();
    Ok((correct, instances.len()))
}

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
    lr: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> Adam<S> {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![S::ZERO; n],
            v: vec![S::ZERO; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [S], grads: &[S]) {
        self.t += 1;
        let b1 = S::from_f64(ADAM_B1);
        let b2 = S::from_f64(ADAM_B2);
        let one_m_b1 = S::from_f64(1.0 - ADAM_B1);
        let one_m_b2 = S::from_f64(1.0 - ADAM_B2);
        let eps = S::from_f64(ADAM_EPS);
        // Bias-corrected step size folded into alpha.
        let alpha = S::from_f64(
            self.lr * (1.0 - ADAM_B2.powi(self.t as i32)).sqrt()
                / (1.0 - ADAM_B1.powi(self.t as i32)),
        );
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + one_m_b1 * g;
            self.v[i] = b2 * self.v[i] + one_m_b2 * g * g;
            params[i] -= alpha * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

fn chance_rate(k: usize) -> f64 {
    1.0 / k as f64
}

struct Trainer<'a, S: Scalar> {
    params: Parameters<S>,
    adam: Adam<S>,
    cfg: &'a TrainConfig,
    bundle: &'a DatasetBundle,
    vocab: Vocabulary,
    update: usize,
    log: RunLog,
    val_subset: Vec<TaskInstance>,
}

enum StageExit {
    /// Sustained success signature.
    Success,
    /// Sustained overfit signature.
    Overfit,
    /// ICoT advancement condition met.
    Advance,
    /// Epoch budget for this call consumed.
    Budget,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    fn new(params: Parameters<S>, bundle: &'a DatasetBundle, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        bundle.config.validate()?;
        let vocab = bundle.config.vocabulary();
        let n = params.data.len();
        let lr = cfg.lr;
        // Fixed in-training validation subset, drawn once per run.
        let val_subset = if cfg.eval_subset == 0 || cfg.eval_subset >= bundle.val.len() {
            bundle.val.clone()
        } else {
            let mut idx: Vec<usize> = (0..bundle.val.len()).collect();
            idx.shuffle(&mut stream_rng(cfg.seed, &[tag::VAL]));
            idx.truncate(cfg.eval_subset);
            idx.into_iter().map(|i| bundle.val[i].clone()).collect()
        };
        Ok(Trainer {
            params,
            adam: Adam::new(n, lr),
            cfg,
            bundle,
            vocab,
            update: 0,
            log: RunLog::default(),
            val_subset,
        })
    }

    fn evaluate(&mut self, mode: Mode, stage: usize, train_loss: f64) -> Result<EvalRecord> {
        let val_batch = encode_batch(&self.val_subset, mode, &self.vocab)?;
        let val_loss = batch_loss(&self.params, &val_batch)?;
        let (tc, tt) = batch_token_accuracy(&self.params, &val_batch)?;
        // In latent mode the answer is the next token, so val_acc is first-hop
        // accuracy. With chain-of-thought tokens in play the next token is the
        // start of the path, not the answer, so val_acc is instead the exact
        // match of the free-running continuation against the stage's target.
        let (c, t) = match mode {
            Mode::Latent => first_hop_accuracy(&self.params, &self.val_subset, &self.vocab)?,
            _ => exact_path_accuracy(&self.params, &self.val_subset, mode, &self.vocab)?,
        };
        let rec = EvalRecord {
            update: self.update,
            train_loss,
            val_loss,
            val_acc: c as f64 / t.max(1) as f64,
            token_acc: tc as f64 / tt.max(1) as f64,
            stage,
        };
        self.log.records.push(rec);
        // Long runs are opaque until the log is written; opt into live
        // progress lines with STARPLAN_PROGRESS=1.
        if std::env::var_os("STARPLAN_PROGRESS").is_some_and(|v| v == "1") {
            eprintln!(
                "update {:>7} stage {} train_loss {:.4} val_loss {:.4} val_acc {:.4} token_acc {:.4}",
                rec.update, rec.stage, rec.train_loss, rec.val_loss, rec.val_acc, rec.token_acc
            );
        }
        Ok(rec)
    }

    /// Runs up to `max_epochs` on `mode` targets. `advance_token_acc`, when
    /// set, exits as soon as val token accuracy reaches it (ICoT schedule).
    fn run_stage(
        &mut self,
        mode: Mode,
        stage: usize,
        max_epochs: usize,
        advance_token_acc: Option<f64>,
    ) -> Result<StageExit> {
        let encoded = encode_batch(&self.bundle.train, mode, &self.vocab)?;
        let n = encoded.seqs.len();
        let k = self.bundle.config.k;
        let delta = STAGE1_DELTA_FRACTION * chance_rate(k);
        let stage_log_start = self.log.records.len();
        let mut best_escape = false; // ever saw acc above the chance band
        let mut evals_since_escape = 0usize;
        // Breakthroughs routinely follow a long apparent-overfit plateau, so
        // only abort after ~3/4 of the stage's eval budget shows no escape.
        let total_evals = max_epochs / self.cfg.eval_cadence.max(1);
        let patience = OVERFIT_PATIENCE.max(total_evals * 3 / 4);

        for epoch in 0..max_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(
                self.cfg.seed,
                &[tag::SHUFFLE, stage as u64, epoch as u64],
            ));
            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch = TrainBatch {
                    seqs: chunk.iter().map(|&i| encoded.seqs[i].clone()).collect(),
                    masks: chunk.iter().map(|&i| encoded.masks[i].clone()).collect(),
                };
                let dropout = if self.params.config.dropout > 0.0 {
                    Some(DropoutSpec {
                        seed: derive_seed(self.cfg.seed, &[tag::DROPOUT, self.update as u64]),
                    })
                } else {
                    None
                };
                let (loss, grads) = loss_and_grad(&self.params, &batch, dropout)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        update: self.update,
                    });
                }
                self.adam.step(&mut self.params.data, &grads);
                if !self.params.all_finite() {
                    return Err(Error::Divergence {
                        update: self.update,
                    });
                }
                epoch_loss += loss;
                batches += 1;
                self.update += 1;
            }

            if (epoch + 1) % self.cfg.eval_cadence != 0 && epoch + 1 != max_epochs {
                continue;
            }
            let rec = self.evaluate(mode, stage, epoch_loss / batches.max(1) as f64)?;

            if let Some(thresh) = advance_token_acc {
                if rec.token_acc >= thresh {
                    return Ok(StageExit::Advance);
                }
            }
            if !self.cfg.early_stop {
                continue;
            }
            let stage_records = &self.log.records[stage_log_start..];
            if stage_records.len() >= SUCCESS_WINDOW
                && stage_records[stage_records.len() - SUCCESS_WINDOW..]
                    .iter()
                    .all(|r| r.val_acc >= SUCCESS_ACC)
            {
                return Ok(StageExit::Success);
            }
            if rec.val_acc > chance_rate(k) + delta {
                best_escape = true;
                evals_since_escape = 0;
            } else if !best_escape {
                evals_since_escape += 1;
            }
            if advance_token_acc.is_none()
                && !best_escape
                && evals_since_escape >= patience
                && stage_records.len() >= STAGE_WINDOW
            {
                let w = &stage_records[stage_records.len() - STAGE_WINDOW..];
                let train_falls = w[STAGE_WINDOW - 1].train_loss < w[0].train_loss - 1e-6;
                let val_rises = w[STAGE_WINDOW - 1].val_loss > w[0].val_loss + 1e-3;
                if train_falls && val_rises {
                    return Ok(StageExit::Overfit);
                }
            }
        }
        Ok(StageExit::Budget)
    }
}

/// Latent or CoT training. Returns trained parameters and the run log.
pub fn train<S: Scalar>(
    params: Parameters<S>,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(Parameters<S>, RunLog)> {
    let mode = match cfg.mode {
        Mode::Icot(_) => {
            return Err(Error::Config("use train_icot for the icot regime".into()));
        }
        m => m,
    };
    let mut tr = Trainer::new(params, bundle, cfg)?;
    tr.run_stage(mode, 0, cfg.epochs, None)?;
    Ok((tr.params, tr.log))
}

/// ICoT stage-advancement policy: move to the next stage once validation
/// token accuracy reaches `advance_token_acc`, or after `max_epochs_per_stage`
/// epochs, whichever comes first.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageSchedule {
    pub advance_token_acc: f64,
    pub max_epochs_per_stage: usize,
}

impl StageSchedule {
    pub fn default_for(epochs: usize, m: usize) -> Self {
        StageSchedule {
            advance_token_acc: 0.99,
            max_epochs_per_stage: (epochs / m).max(1),
        }
    }
}

/// Staged internalization: stage s trains on the CoT target with its first
/// `s` node tokens removed; the final stage `m-1` is the latent target.
pub fn train_icot<S: Scalar>(
    params: Parameters<S>,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    schedule: StageSchedule,
) -> Result<(Parameters<S>, RunLog)> {
    let m = bundle.config.m;
    let mut tr = Trainer::new(params, bundle, cfg)?;
    let mut epochs_left = cfg.epochs;
    for stage in 0..m {
        if epochs_left == 0 {
            return Err(Error::ScheduleExhausted);
        }
        let is_final = stage == m - 1;
        let cap = if is_final {
            epochs_left
        } else {
            schedule.max_epochs_per_stage.min(epochs_left)
        };
        let advance = if is_final {
            None
        } else {
            Some(schedule.advance_token_acc)
        };
        let epochs_before = tr.update;
        let exit = tr.run_stage(Mode::Icot(stage), stage, cap, advance)?;
        // Count epochs actually used (updates / batches-per-epoch).
        let batches_per_epoch = bundle.train.len().div_ceil(cfg.batch_size);
        let used = (tr.update - epochs_before).div_ceil(batches_per_epoch.max(1));
        epochs_left = epochs_left.saturating_sub(used.max(1));
        match exit {
            StageExit::Success if is_final => break,
            StageExit::Overfit if is_final => break,
            _ => {}
        }
    }
    Ok((tr.params, tr.log))
}

/// Result of one evaluated (k, m) cell in the ceiling search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CeilingCell {
    pub k: usize,
    pub m: usize,
    pub correct: usize,
    pub total: usize,
    pub skill: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CeilingResult {
    /// Highest m with LPC = 1; None if even start_m fails.
    pub ceiling: Option<usize>,
    pub cells: Vec<CeilingCell>,
}

/// Progressive depth search: for m = start_m, start_m+1, ... the closure
/// trains and evaluates a fresh model on G(k, m) for each k in the
/// significance set, returning (correct, total) on the test split. The
/// search advances while LPC(m) = 1. `max_runs` bounds the number of
/// closure invocations; exceeding it mid-decision is an error carrying the
/// best fully-decided ceiling.
pub fn depth_ceiling_search<F>(
    start_m: usize,
    max_m: usize,
    max_runs: usize,
    mut run_cell: F,
) -> Result<CeilingResult>
where
    F: FnMut(usize, usize) -> Result<(usize, usize)>,
{
    if start_m < 3 {
        return Err(Error::Config(format!(
            "start_m {start_m} below the minimum lookahead depth 3"
        )));
    }
    let mut ceiling = None;
    let mut cells = Vec::new();
    let mut runs = 0usize;
    for m in start_m..=max_m {
        let mut scores = Vec::new();
        let mut n_samples = 0usize;
        for &k in K_SET.iter() {
            if runs >= max_runs {
                return Err(Error::BudgetExceeded { partial: ceiling });
            }
            runs += 1;
            let (correct, total) = run_cell(k, m)?;
            let score = SkillScore::from_counts(correct, total, k);
            cells.push(CeilingCell {
                k,
                m,
                correct,
                total,
                skill: score.skill,
            });
            n_samples = total;
            scores.push(score);
        }
        let decision = lpc(m, &scores, n_samples, ALPHA, &K_SET)?;
        if !decision.decision {
            break;
        }
        ceiling = Some(m);
    }
    Ok(CeilingResult { ceiling, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Parameters};
    use crate::stargraph::{build_dataset, DatasetConfig};

    fn synthetic_log(accs: &[f64], train_loss: &[f64], val_loss: &[f64]) -> RunLog {
        RunLog {
            records: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| EvalRecord {
                    update: i,
                    train_loss: train_loss[i],
                    val_loss: val_loss[i],
                    val_acc: a,
                    token_acc: a,
                    stage: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn stage_detection_ramp_to_success() {
        let accs: Vec<f64> = (0..20)
            .map(|i| match i {
                0..=4 => 0.05 * i as f64, // ramp toward chance
                5..=9 => 0.5,             // chance plateau at 1/k, k=2
                _ => 1.0,                 // breakthrough
            })
            .collect();
        let tl: Vec<f64> = (0..20).map(|i| 3.0 - 0.1 * i as f64).collect();
        let vl = tl.clone();
        let log = synthetic_log(&accs, &tl, &vl);
        let rep = detect_stages(&log, 2, 0.05 * 0.5, 5);
        assert!(rep.stage1_reached);
        assert_eq!(rep.stage2_outcome, StageTwoOutcome::Success);
    }

    #[test]
    fn stage_detection_overfit_plateau() {
        let accs = vec![0.5f64; 30];
        let tl: Vec<f64> = (0..30).map(|i| 2.0 - 0.05 * i as f64).collect();
        let vl: Vec<f64> = (0..30).map(|i| 1.0 + 0.05 * i as f64).collect();
        let log = synthetic_log(&accs, &tl, &vl);
        let rep = detect_stages(&log, 2, 0.05 * 0.5, 10);
        assert!(rep.stage1_reached);
        assert_eq!(rep.stage2_outcome, StageTwoOutcome::Overfit);
        assert!(!rep.evidence.is_empty());
    }

    #[test]
    fn stage_detection_never_reaches_band() {
        // The k=10 failure shape: accuracy never approaches 1/k.
        let accs = vec![0.01f64; 20];
        let tl: Vec<f64> = (0..20).map(|i| 2.0 - 0.05 * i as f64).collect();
        let vl = vec![2.0f64; 20];
        let log = synthetic_log(&accs, &tl, &vl);
        let rep = detect_stages(&log, 10, 0.05 * 0.1, 10);
        assert!(!rep.stage1_reached);
        assert_eq!(rep.stage2_outcome, StageTwoOutcome::Incomplete);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // Sanity: Adam on f(x) = sum x_i^2 heads to zero.
        let mut x = vec![1.0f64, -2.0, 3.0];
        let mut opt = Adam::new(3, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|&v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    fn tiny_setup(mode: Mode) -> (Parameters<f32>, DatasetBundle, TrainConfig) {
        let dcfg = DatasetConfig::new(2, 2, 12, 8, 8, 5);
        let bundle = build_dataset(&dcfg).unwrap();
        let vocab = dcfg.vocabulary();
        let max_len = crate::encoding::input_len(2, 2) + 4;
        let mcfg = ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 64,
            vocab_size: vocab.size(),
            max_seq_len: max_len,
            dropout: 0.0,
        };
        let params = Parameters::init(mcfg, 1).unwrap();
        let cfg = TrainConfig {
            mode,
            epochs: 60,
            batch_size: 12,
            lr: 3e-3,
            eval_cadence: 5,
            eval_subset: 0,
            early_stop: true,
            seed: 7,
        };
        (params, bundle, cfg)
    }

    #[test]
    fn memorization_smoke_reaches_train_accuracy_one() {
        let (params, bundle, cfg) = tiny_setup(Mode::Latent);
        let (trained, log) = train(params, &bundle, &cfg).unwrap();
        let (c, t) =
            first_hop_accuracy(&trained, &bundle.train, &bundle.config.vocabulary()).unwrap();
        assert_eq!(
            (c, t),
            (bundle.train.len(), bundle.train.len()),
            "log: {}",
            log.to_csv()
        );
        // Train loss roughly non-increasing: no 0.5-nat jump between evals.
        for w in log.records.windows(2) {
            assert!(w[1].train_loss < w[0].train_loss + 0.5);
        }
    }

    #[test]
    fn run_is_bit_reproducible() {
        let (params, bundle, cfg) = tiny_setup(Mode::Latent);
        let (p1, l1) = train(params.clone(), &bundle, &cfg).unwrap();
        let (p2, l2) = train(params, &bundle, &cfg).unwrap();
        assert_eq!(p1.data, p2.data);
        assert_eq!(l1.to_csv(), l2.to_csv());
    }

    #[test]
    fn icot_schedule_advances_and_ends_latent() {
        let (params, bundle, mut cfg) = tiny_setup(Mode::Icot(0));
        cfg.epochs = 60;
        let schedule = StageSchedule {
            advance_token_acc: 0.5,
            max_epochs_per_stage: 10,
        };
        let (_, log) = train_icot(params, &bundle, &cfg, schedule).unwrap();
        let stages: Vec<usize> = log.records.iter().map(|r| r.stage).collect();
        assert!(stages.windows(2).all(|w| w[1] >= w[0]), "{stages:?}");
        assert_eq!(*stages.last().unwrap(), bundle.config.m - 1);
    }

    #[test]
    fn icot_budget_too_small_errors() {
        let (params, bundle, mut cfg) = tiny_setup(Mode::Icot(0));
        cfg.epochs = 1; // one stage's worth at most
        let schedule = StageSchedule {
            advance_token_acc: 2.0,
            max_epochs_per_stage: 1,
        };
        let err = train_icot(params, &bundle, &cfg, schedule).unwrap_err();
        assert!(matches!(err, Error::ScheduleExhausted), "{err:?}");
    }

    #[test]
    fn train_rejects_icot_mode() {
        let (params, bundle, mut cfg) = tiny_setup(Mode::Latent);
        cfg.mode = Mode::Icot(0);
        assert!(train(params, &bundle, &cfg).is_err());
    }

    #[test]
    fn ceiling_search_oracle_runs_to_max() {
        let res = depth_ceiling_search(3, 5, 100, |_k, _m| Ok((64, 64))).unwrap();
        assert_eq!(res.ceiling, Some(5));
    }

    #[test]
    fn ceiling_search_random_model_returns_none() {
        // Chance-level counts: exactly total/k correct.
        let res = depth_ceiling_search(3, 5, 100, |k, _m| Ok((64 / k, 64))).unwrap();
        assert_eq!(res.ceiling, None);
        assert_eq!(res.cells.len(), K_SET.len());
    }

    #[test]
    fn ceiling_search_budget_exceeded() {
        let err = depth_ceiling_search(3, 5, 3, |_k, _m| Ok((64, 64))).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }), "{err:?}");
    }

    #[test]
    fn ceiling_search_rejects_shallow_start() {
        assert!(depth_ceiling_search(2, 5, 10, |_k, _m| Ok((64, 64))).is_err());
    }
}
