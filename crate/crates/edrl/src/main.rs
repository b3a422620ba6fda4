use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use edrl::beam::{beam_search, BeamConfig};
use edrl::checkpoint::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use edrl::data::{gen_utterance, gen_vocab, read_dataset, read_vocab, write_dataset, write_vocab, SynthConfig, Utterance};
use edrl::error::{Error, Result};
use edrl::model::{ModelConfig, ModelParameters};
use edrl::optim::Adam;
use edrl::reward::{EdrlConfig, NegativeMode, ScatterMap};
use edrl::trace::trace_report;
use edrl::train::{decode_record, evaluate, sweep_gamma, train, Method, TrainConfig};

#[derive(Parser)]
#[command(name = "edrl", version, about = "Transducer training with edit-distance RL fine-tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory (train.jsonl, dev.jsonl, vocab.txt).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
    },
    /// Train or fine-tune a model; writes a checkpoint and appends metrics.csv.
    Train {
        /// rnnt | edrl | mwer
        #[arg(long)]
        method: String,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Initial checkpoint (required for edrl/mwer).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        rp: Option<f64>,
        /// RL loss weight in the combined objective.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rnnt_weight: Option<f64>,
        #[arg(long)]
        beam_expand: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// raw | constant
        #[arg(long)]
        negative_mode: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_interval: Option<u64>,
        /// Stop early once dev WER reaches this value.
        #[arg(long)]
        target_wer: Option<f64>,
        /// Stop early once dev WER rises above this value (failure-mode runs).
        #[arg(long)]
        stop_above_wer: Option<f64>,
    },
    /// Decode a dataset to top-k hypotheses (JSON Lines).
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (uses dev.jsonl) or a .jsonl file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam_expand: usize,
        #[arg(long, default_value_t = 4)]
        topk: usize,
    },
    /// Report WER, oracle WER, and mean lattice loss on a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam_expand: usize,
        #[arg(long, default_value_t = 4)]
        topk: usize,
    },
    /// Fine-tune once per discount factor and report final dev WER per gamma.
    SweepGamma {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0,0.5,0.95,0.99")]
        values: String,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rp: Option<f64>,
    },
    /// Render the reward pipeline for a hypothesis/reference string pair.
    RewardTrace {
        #[arg(long)]
        hyp: String,
        #[arg(long = "ref")]
        reference: String,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long, default_value_t = 0.1)]
        rp: f64,
        /// raw | constant
        #[arg(long, default_value = "raw")]
        negative_mode: String,
    },
}

fn parse_negative_mode(s: &str) -> Result<NegativeMode> {
    match s {
        "raw" => Ok(NegativeMode::RawEditDistance),
        "constant" => Ok(NegativeMode::ConstantMinusOne),
        other => Err(Error::Config(format!(
            "unknown negative mode {other} (expected raw or constant)"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            train,
            dev,
            seed,
            sigma,
        } => {
            let synth = SynthConfig {
                seed,
                sigma,
                ..SynthConfig::default()
            };
            let map = gen_vocab(&synth)?;
            fs::create_dir_all(&out)?;
            let gen_range = |lo: usize, hi: usize| -> Result<Vec<Utterance>> {
                (lo..hi)
                    .map(|i| gen_utterance(&synth, &map, i as u64))
                    .collect()
            };
            write_dataset(&out.join("train.jsonl"), &gen_range(0, train)?)?;
            write_dataset(&out.join("dev.jsonl"), &gen_range(train, train + dev)?)?;
            write_vocab(&out.join("vocab.txt"), &map)?;
            println!(
                "wrote {train} train and {dev} dev utterances (seed {seed}, sigma {sigma}) to {}",
                out.display()
            );
        }

        Cmd::Train {
            method,
            data,
            out,
            init,
            gamma,
            rp,
            lambda,
            rnnt_weight,
            beam_expand,
            topk,
            steps,
            seed,
            negative_mode,
            batch_size,
            lr,
            eval_interval,
            target_wer,
            stop_above_wer,
        } => {
            let method: Method = method.parse()?;
            if method.needs_init_checkpoint() && init.is_none() {
                return Err(Error::Config(format!(
                    "method {method:?} fine-tunes a converged model; pass --init CKPT"
                )));
            }
            let map = read_vocab(&data.join("vocab.txt"))?;
            let train_set = read_dataset(&data.join("train.jsonl"))?;
            let dev_set = read_dataset(&data.join("dev.jsonl"))?;
            if train_set.is_empty() {
                return Err(Error::Config("empty training set".into()));
            }

            let (model_cfg, start_step, mut params) = match &init {
                Some(dir) => load_checkpoint(dir)?,
                None => {
                    let cfg = ModelConfig {
                        feature_dim: train_set[0].frames.shape()[1],
                        vocab_size: map.vocab_size(),
                        ..ModelConfig::default()
                    };
                    let params = ModelParameters::init(&cfg, seed.unwrap_or(17))?;
                    (cfg, 0, params)
                }
            };

            let mut cfg = TrainConfig::defaults_for(method);
            if let Some(v) = gamma {
                cfg.edrl.gamma = v;
            }
            if let Some(v) = rp {
                cfg.edrl.r_p = v;
            }
            if let Some(m) = &negative_mode {
                cfg.edrl.negative_mode = parse_negative_mode(m)?;
            }
            if let Some(v) = lambda {
                cfg.weights.rl_weight = v;
            }
            if let Some(v) = rnnt_weight {
                cfg.weights.rnnt_weight = v;
            }
            if let Some(v) = beam_expand {
                cfg.beam.expand = v;
            }
            if let Some(v) = topk {
                cfg.beam.topk = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.optimizer.lr = v;
            }
            if let Some(v) = eval_interval {
                cfg.eval_interval = v;
            }
            cfg.stop_below_wer = target_wer;
            cfg.stop_above_wer = stop_above_wer;

            let method_tag = format!("{method:?}").to_lowercase();
            let mut opt = match &init {
                Some(dir) => load_optimizer(dir, &method_tag)?
                    .unwrap_or_else(|| Adam::new(cfg.optimizer)),
                None => Adam::new(cfg.optimizer),
            };

            fs::create_dir_all(&out)?;
            let mut metrics = BufWriter::new(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(out.join("metrics.csv"))?,
            );
            let reports = train(
                &cfg,
                &model_cfg,
                &mut params,
                &mut opt,
                start_step,
                &train_set,
                &dev_set,
                &map,
                Some(&mut metrics),
            )?;
            metrics.flush()?;

            let end_step = reports.last().map_or(start_step, |r| r.step);
            save_checkpoint(&out, &model_cfg, end_step, &params)?;
            save_optimizer(&out, &method_tag, &opt)?;
            if let Some(r) = reports.last() {
                println!("{}", serde_json::to_string(r)?);
            }
        }

        Cmd::Decode {
            ckpt,
            data,
            out,
            beam_expand,
            topk,
        } => {
            let (cfg, params, map, utts) = load_decode_assets(&ckpt, &data)?;
            let beam = BeamConfig {
                expand: beam_expand,
                topk,
                ..BeamConfig::default()
            };
            let mut w = BufWriter::new(fs::File::create(&out)?);
            for utt in &utts {
                let trajs = beam_search(&params, &cfg, &utt.frames, &beam)?;
                let rec = decode_record(utt, &trajs, &map)?;
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            w.flush()?;
            println!("decoded {} utterances to {}", utts.len(), out.display());
        }

        Cmd::Evaluate {
            ckpt,
            data,
            beam_expand,
            topk,
        } => {
            let (cfg, params, map, utts) = load_decode_assets(&ckpt, &data)?;
            let beam = BeamConfig {
                expand: beam_expand,
                topk,
                ..BeamConfig::default()
            };
            let report = evaluate(&cfg, &params, &utts, &map, &beam)?;
            println!("{}", serde_json::to_string(&report)?);
        }

        Cmd::SweepGamma {
            init,
            data,
            values,
            steps,
            seed,
            rp,
        } => {
            let gammas: Vec<f64> = values
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad gamma {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            let map = read_vocab(&data.join("vocab.txt"))?;
            let train_set = read_dataset(&data.join("train.jsonl"))?;
            let dev_set = read_dataset(&data.join("dev.jsonl"))?;
            let (model_cfg, start_step, params) = load_checkpoint(&init)?;
            let mut cfg = TrainConfig::defaults_for(Method::Edrl);
            cfg.steps = steps;
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = rp {
                cfg.edrl.r_p = v;
            }
            let rows = sweep_gamma(
                &cfg, &model_cfg, &params, start_step, &gammas, &train_set, &dev_set, &map,
            )?;
            println!("gamma,dev_wer");
            for (gamma, wer) in rows {
                println!("{gamma},{wer}");
            }
        }

        Cmd::RewardTrace {
            hyp,
            reference,
            vocab,
            gamma,
            rp,
            negative_mode,
        } => {
            let map = read_vocab(&vocab)?;
            let cfg = EdrlConfig {
                gamma,
                r_p: rp,
                negative_mode: parse_negative_mode(&negative_mode)?,
            };
            print!("{}", trace_report(&hyp, &reference, &map, &cfg)?);
        }
    }
    Ok(())
}

/// Checkpoint plus dataset: `data` is a gen-data directory (vocab.txt +
/// dev.jsonl) or a .jsonl file next to a vocab.txt.
fn load_decode_assets(
    ckpt: &Path,
    data: &Path,
) -> Result<(ModelConfig, ModelParameters, ScatterMap, Vec<Utterance>)> {
    let (cfg, _, params) = load_checkpoint(ckpt)?;
    let (vocab_path, data_path) = if data.is_dir() {
        (data.join("vocab.txt"), data.join("dev.jsonl"))
    } else {
        let dir = data.parent().unwrap_or_else(|| Path::new("."));
        (dir.join("vocab.txt"), data.to_path_buf())
    };
    let map = read_vocab(&vocab_path)?;
    if map.vocab_size() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary size {} does not match checkpoint vocab_size {}",
            map.vocab_size(),
            cfg.vocab_size
        )));
    }
    let utts = read_dataset(&data_path)?;
    Ok((cfg, params, map, utts))
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
