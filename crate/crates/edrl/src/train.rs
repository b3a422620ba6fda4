//! Training orchestration: RNN-T pretraining, RL or MWER fine-tuning from a
//! converged checkpoint, evaluation with oracle WER, and the discount-factor
//! sweep harness.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, rescore_with_enc, BeamConfig, Trajectory};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::{encode, joint, predict, BoundParams, ModelConfig, ModelParameters};
use crate::objectives::{edrl_loss, mwer_loss, total_loss, LossWeights, TrajectoryTerms};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::reward::{reward_trace, EdrlConfig, ScatterMap};
use crate::rnnt::rnnt_nll;
use crate::tensor::{Eager, Ops, Tape};
use crate::wer::{word_errors, words, WerTally};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rnnt,
    Edrl,
    Mwer,
}

impl Method {
    pub fn needs_init_checkpoint(&self) -> bool {
        matches!(self, Method::Edrl | Method::Mwer)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnnt" => Ok(Method::Rnnt),
            "edrl" => Ok(Method::Edrl),
            "mwer" => Ok(Method::Mwer),
            other => Err(Error::Config(format!("unknown method {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub weights: LossWeights,
    pub edrl: EdrlConfig,
    pub beam: BeamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub optimizer: AdamConfig,
    pub clip_norm: f64,
    pub eval_interval: u64,
    pub seed: u64,
    /// Early stop once dev WER drops to this value or below.
    pub stop_below_wer: Option<f64>,
    /// Early stop once dev WER rises above this value (failure-mode runs).
    pub stop_above_wer: Option<f64>,
}

impl TrainConfig {
    pub fn defaults_for(method: Method) -> Self {
        TrainConfig {
            method,
            weights: LossWeights::default(),
            edrl: EdrlConfig::default(),
            beam: BeamConfig::default(),
            batch_size: match method {
                Method::Rnnt => 8,
                _ => 4,
            },
            steps: match method {
                Method::Rnnt => 3000,
                _ => 1000,
            },
            optimizer: AdamConfig {
                lr: match method {
                    Method::Rnnt => 1e-3,
                    _ => 1e-4,
                },
                ..AdamConfig::default()
            },
            clip_norm: 1.0,
            eval_interval: 100,
            seed: 17,
            stop_below_wer: None,
            stop_above_wer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.edrl.validate()?;
        self.beam.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be >= 1".into()));
        }
        if self.clip_norm <= 0.0 || self.optimizer.lr <= 0.0 {
            return Err(Error::Config("clip_norm and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub wer: f64,
    pub oracle_wer: f64,
    pub mean_loss: f64,
    pub utterances: usize,
}

/// Differentiable loss for one utterance on a fresh tape; returns the loss
/// value and parameter gradients.
fn utterance_loss(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    params: &ModelParameters,
    map: &ScatterMap,
    utt: &Utterance,
) -> Result<(f64, HashMap<String, Vec<f64>>)> {
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, params);
    let enc = encode(&tape, &bound, model_cfg, &utt.frames)?;

    // RNN-T lattice loss on ground-truth labels, reusing the encoder rows.
    let pred = predict(&tape, &bound, model_cfg, &utt.reference_tokens)?;
    let mut rows = Vec::with_capacity(enc.len());
    for e in &enc {
        let mut urow = Vec::with_capacity(pred.len());
        for q in &pred {
            urow.push(joint(&tape, &bound, model_cfg, e, q)?);
        }
        rows.push(urow);
    }
    let rnnt = rnnt_nll(&tape, &rows, &utt.reference_tokens, model_cfg.vocab_size)?;

    let loss = match cfg.method {
        Method::Rnnt => rnnt,
        Method::Edrl => {
            let trajs = beam_search(params, model_cfg, &utt.frames, &cfg.beam)?;
            let mut terms = Vec::with_capacity(trajs.len());
            for traj in &trajs {
                let trace = reward_trace(traj, &utt.reference_text, map, &cfg.edrl)?;
                let lps = rescore_with_enc(&tape, &bound, model_cfg, &enc, &traj.actions)?;
                terms.push(TrajectoryTerms::<Tape> {
                    logprobs: lps,
                    values: trace.action_values,
                });
            }
            let rl = edrl_loss(&tape, &terms)?;
            total_loss(&tape, &rl, &rnnt, &cfg.weights)?
        }
        Method::Mwer => {
            let trajs = beam_search(params, model_cfg, &utt.frames, &cfg.beam)?;
            if trajs.len() < 2 {
                // relative-to-average is undefined for a single hypothesis;
                // fall back to the RNN-T term for this utterance
                rnnt
            } else {
                let mut totals = Vec::with_capacity(trajs.len());
                let mut errs = Vec::with_capacity(trajs.len());
                for traj in &trajs {
                    let lps = rescore_with_enc(&tape, &bound, model_cfg, &enc, &traj.actions)?;
                    let stacked = tape.stack(&lps)?;
                    totals.push(tape.sum(&stacked));
                    let hyp_text = map.detokenize(&traj.tokens)?;
                    errs.push(word_errors(&hyp_text, &utt.reference_text) as f64);
                }
                let rl = mwer_loss(&tape, &totals, &errs)?;
                total_loss(&tape, &rl, &rnnt, &cfg.weights)?
            }
        }
    };

    let loss_val = tape.value(&loss).item();
    let grads = tape.backward(loss)?.into_map();
    Ok((loss_val, grads))
}

/// Run `cfg.steps` optimizer steps; appends an EvalReport (and an optional
/// metrics CSV line `step,split,loss,wer,oracle_wer`) every eval interval.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    params: &mut ModelParameters,
    opt: &mut Adam,
    start_step: u64,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    map: &ScatterMap,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if map.vocab_size() != model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary size {} does not match model vocab_size {}",
            map.vocab_size(),
            model_cfg.vocab_size
        )));
    }

    let mut reports = Vec::new();
    let mut interval_loss = 0.0f64;
    let mut interval_count = 0usize;

    for step in start_step..start_step + cfg.steps {
        // per-step stream keeps batch sampling reproducible across resume
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step.wrapping_add(0x9e3779b9));

        let mut grad_acc: HashMap<String, Vec<f64>> = HashMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..train_set.len());
            let utt = &train_set[idx];
            let (loss_val, grads) = utterance_loss(cfg, model_cfg, params, map, utt)?;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {step} on utterance {} (T={}, U={})",
                    utt.id,
                    utt.frames.shape()[0],
                    utt.reference_tokens.len()
                )));
            }
            batch_loss += loss_val;
            for (name, g) in grads {
                let slot = grad_acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v / cfg.batch_size as f64;
                }
            }
        }
        clip_global_norm(&mut grad_acc, cfg.clip_norm);
        opt.step(params, &grad_acc)?;
        interval_loss += batch_loss / cfg.batch_size as f64;
        interval_count += 1;

        let done = step + 1 == start_step + cfg.steps;
        if (step + 1) % cfg.eval_interval == 0 || done {
            let mut report = evaluate(model_cfg, params, dev_set, map, &cfg.beam)?;
            report.step = step + 1;
            report.mean_loss = interval_loss / interval_count.max(1) as f64;
            interval_loss = 0.0;
            interval_count = 0;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(
                    w,
                    "{},dev,{},{},{}",
                    report.step, report.mean_loss, report.wer, report.oracle_wer
                )?;
                w.flush()?;
            }
            let stop_low = cfg.stop_below_wer.map_or(false, |t| report.wer <= t);
            let stop_high = cfg.stop_above_wer.map_or(false, |t| report.wer > t);
            reports.push(report);
            if stop_low || stop_high {
                break;
            }
        }
    }
    Ok(reports)
}

/// Decode the dev set and measure top-1 WER plus the oracle WER over the
/// top-k hypotheses.
pub fn evaluate(
    model_cfg: &ModelConfig,
    params: &ModelParameters,
    dev_set: &[Utterance],
    map: &ScatterMap,
    beam: &BeamConfig,
) -> Result<EvalReport> {
    let mut top1 = WerTally::default();
    let mut oracle_errors = 0usize;
    let mut loss_sum = 0.0;
    let b = Eager;
    for utt in dev_set {
        let trajs = beam_search(params, model_cfg, &utt.frames, beam)?;
        let hyp = map.detokenize(&trajs[0].tokens)?;
        top1.add(&hyp, &utt.reference_text);
        oracle_errors += trajs
            .iter()
            .map(|t| {
                let h = map.detokenize(&t.tokens).unwrap_or_default();
                word_errors(&h, &utt.reference_text)
            })
            .min()
            .unwrap_or(0);
        let bound = BoundParams::new(&b, params);
        let rows = crate::model::lattice(&b, &bound, model_cfg, &utt.frames, &utt.reference_tokens)?;
        loss_sum += b
            .value(&rnnt_nll(&b, &rows, &utt.reference_tokens, model_cfg.vocab_size)?)
            .item();
    }
    let oracle_wer = if top1.ref_words == 0 {
        0.0
    } else {
        oracle_errors as f64 / top1.ref_words as f64
    };
    let report = EvalReport {
        step: 0,
        wer: top1.wer(),
        oracle_wer,
        mean_loss: if dev_set.is_empty() {
            0.0
        } else {
            loss_sum / dev_set.len() as f64
        },
        utterances: dev_set.len(),
    };
    debug_assert!(report.oracle_wer <= report.wer + 1e-12);
    Ok(report)
}

/// One fine-tune per discount factor from the same initial parameters and
/// seed; returns (gamma, final dev WER) rows.
#[allow(clippy::too_many_arguments)]
pub fn sweep_gamma(
    base_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    init_params: &ModelParameters,
    start_step: u64,
    gammas: &[f64],
    train_set: &[Utterance],
    dev_set: &[Utterance],
    map: &ScatterMap,
) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0,1]")));
        }
        let mut cfg = base_cfg.clone();
        cfg.edrl.gamma = gamma;
        let mut params = init_params.clone();
        let mut opt = Adam::new(cfg.optimizer);
        let reports = train(
            &cfg,
            model_cfg,
            &mut params,
            &mut opt,
            start_step,
            train_set,
            dev_set,
            map,
            None,
        )?;
        let wer = reports.last().map(|r| r.wer).unwrap_or(f64::NAN);
        rows.push((gamma, wer));
    }
    Ok(rows)
}

/// Decode output record for one utterance (JSON Lines).
#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub hyps: Vec<DecodeHyp>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeHyp {
    pub tokens: Vec<usize>,
    pub text: String,
    pub score: f64,
    pub actions: String,
}

pub fn decode_record(
    utt: &Utterance,
    trajs: &[Trajectory],
    map: &ScatterMap,
) -> Result<DecodeRecord> {
    let hyps = trajs
        .iter()
        .map(|t| {
            Ok(DecodeHyp {
                tokens: t.tokens.clone(),
                text: map.detokenize(&t.tokens)?,
                score: t.score,
                actions: t
                    .actions
                    .iter()
                    .map(|a| a.render())
                    .collect::<Vec<_>>()
                    .join(" "),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodeRecord {
        id: utt.id.clone(),
        hyps,
    })
}

/// Mean number of reference words per dev utterance; used by reports.
pub fn mean_ref_words(dev_set: &[Utterance]) -> f64 {
    if dev_set.is_empty() {
        return 0.0;
    }
    dev_set
        .iter()
        .map(|u| words(&u.reference_text).len() as f64)
        .sum::<f64>()
        / dev_set.len() as f64
}
