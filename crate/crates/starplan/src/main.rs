//! Thin command-line front end over the starplan library.
//!
//! Exit codes: 0 success, 2 configuration error, 3 acceptance-check failure
//! (verification mismatch), 4 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use starplan::encoding::{input_len, Mode};
use starplan::error::Error;
use starplan::evalstats::{SkillScore, ThresholdTable, ALPHA, K_SET};
use starplan::experiment::RunDir;
use starplan::model::{load_checkpoint, save_checkpoint, ModelConfig, Parameters};
use starplan::probe::average_br;
use starplan::promptgen::{
    export_eval_set, read_eval_set, read_responses, score_responses, PromptMode,
};
use starplan::report::{accuracy_chart_svg, loss_chart_svg, skill_grid_csv, SkillGridRow};
use starplan::stargraph::{build_dataset, write_instances, DatasetConfig};
use starplan::taxonomy::error_breakdown;
use starplan::training::{
    depth_ceiling_search, detect_stages, exact_path_accuracy, first_hop_accuracy, train,
    train_icot, StageSchedule, TrainConfig, STAGE1_DELTA_FRACTION, STAGE_WINDOW,
};

#[derive(Parser)]
#[command(
    name = "starplan",
    version,
    about = "Star-graph latent planning laboratory"
)]
struct Cli {
    /// Output root; defaults to $STARPLAN_OUT or ./runs.
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 20000)]
    train_size: usize,
    #[arg(long, default_value_t = 2048)]
    val_size: usize,
    #[arg(long, default_value_t = 2048)]
    test_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn config(&self) -> DatasetConfig {
        DatasetConfig::new(
            self.k,
            self.m,
            self.train_size,
            self.val_size,
            self.test_size,
            self.seed,
        )
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a leakage-filtered dataset and write it as JSONL splits.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        /// Run directory name under the output root.
        #[arg(long, default_value = "dataset")]
        name: String,
        #[arg(long)]
        force: bool,
    },
    /// Train a transformer (latent, cot, or icot) and write a full run dir.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// latent | cot | icot
        #[arg(long, default_value = "latent")]
        mode: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 512)]
        eval_subset: usize,
        #[arg(long)]
        no_early_stop: bool,
        #[arg(long, default_value = "run")]
        name: String,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a freshly generated test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Backtracking-ratio probe over the test split.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the BR CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error-taxonomy breakdown over the test split.
    Errors {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Progressive depth-ceiling search (trains one model per (k, m) cell).
    Ceiling {
        #[arg(long, default_value_t = 3)]
        start_m: usize,
        #[arg(long, default_value_t = 6)]
        max_m: usize,
        /// Maximum number of (k, m) training runs.
        #[arg(long, default_value_t = 25)]
        max_runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20000)]
        train_size: usize,
        #[arg(long, default_value_t = 2048)]
        eval_size: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// Print the critical accuracy/skill threshold table as CSV.
    Thresholds {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export prompt JSONL for external models, or score a response file.
    Prompts {
        #[command(flatten)]
        data: DataArgs,
        /// direct | cot | zero_shot | few_shot
        #[arg(long, default_value = "direct")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score this JSONL of {id, text} responses against --eval-set.
        #[arg(long)]
        score: Option<PathBuf>,
        /// Previously exported eval set to score against.
        #[arg(long)]
        eval_set: Option<PathBuf>,
    },
    /// Render CSV/SVG reports from a run directory, or verify its manifest.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Re-hash every manifest entry and fail (exit 3) on mismatch.
        #[arg(long)]
        verify: bool,
    },
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out_root
        .clone()
        .or_else(|| std::env::var_os("STARPLAN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_mode(s: &str) -> Result<Mode, Error> {
    match s {
        "latent" => Ok(Mode::Latent),
        "cot" => Ok(Mode::Cot),
        "icot" => Ok(Mode::Icot(0)),
        other => Err(Error::Config(format!("unknown mode '{other}'"))),
    }
}

fn parse_prompt_mode(s: &str) -> Result<PromptMode, Error> {
    match s {
        "direct" => Ok(PromptMode::Direct),
        "cot" => Ok(PromptMode::Cot),
        "zero_shot" => Ok(PromptMode::ZeroShot),
        "few_shot" => Ok(PromptMode::FewShot),
        other => Err(Error::Config(format!("unknown prompt mode '{other}'"))),
    }
}

fn model_for(dcfg: &DatasetConfig) -> ModelConfig {
    let vocab = dcfg.vocabulary();
    // Longest sequence: input plus the full CoT target plus eos.
    let max_len = input_len(dcfg.k, dcfg.m) + dcfg.m + 1;
    ModelConfig::reference(vocab.size(), max_len)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(
    root: &PathBuf,
    data: &DataArgs,
    mode_s: &str,
    epochs: Option<usize>,
    batch: usize,
    lr: f64,
    eval_subset: usize,
    no_early_stop: bool,
    name: &str,
    force: bool,
) -> Result<(), Error> {
    let mode = parse_mode(mode_s)?;
    let dcfg = data.config();
    let mut tcfg = TrainConfig::desk(mode, data.seed);
    tcfg.batch_size = batch;
    tcfg.lr = lr;
    tcfg.eval_subset = eval_subset;
    tcfg.early_stop = !no_early_stop;
    if let Some(e) = epochs {
        tcfg.epochs = e;
    }
    let dir = root.join(name);
    let mut run = RunDir::create(
        &dir,
        data.seed,
        json!({"dataset": dcfg, "train": tcfg, "model": model_for(&dcfg)}),
        force,
    )?;
    eprintln!("building dataset G({}, {})...", dcfg.k, dcfg.m);
    let bundle = build_dataset(&dcfg)?;
    write_instances(&run.path.join("test.jsonl"), &bundle.test)?;
    run.record_file("test.jsonl")?;
    let params = Parameters::<f32>::init(model_for(&dcfg), data.seed)?;
    eprintln!(
        "training ({} params, {} epochs max)...",
        params.param_count(),
        tcfg.epochs
    );
    let (trained, log) = match mode {
        Mode::Icot(_) => {
            let schedule = StageSchedule::default_for(tcfg.epochs, dcfg.m);
            train_icot(params, &bundle, &tcfg, schedule)?
        }
        _ => train(params, &bundle, &tcfg)?,
    };
    run.write_file("runlog.csv", log.to_csv().as_bytes())?;
    run.write_file("loss.svg", loss_chart_svg(&log).as_bytes())?;
    run.write_file("accuracy.svg", accuracy_chart_svg(&log).as_bytes())?;
    save_checkpoint(&run.path.join("model.ckpt"), &trained, data.seed)?;
    run.record_file("model.ckpt")?;

    let vocab = dcfg.vocabulary();
    // A chain-of-thought model answers with a path, so grade the full greedy
    // continuation; exact-path accuracy lower-bounds first-hop accuracy.
    // Latent and internalized models answer in one token: grade the first hop.
    let (correct, total) = match mode {
        Mode::Cot => exact_path_accuracy(&trained, &bundle.test, mode, &vocab)?,
        _ => first_hop_accuracy(&trained, &bundle.test, &vocab)?,
    };
    let score = SkillScore::from_counts(correct, total, dcfg.k);
    let rows = vec![SkillGridRow {
        k: dcfg.k,
        m: dcfg.m,
        mode: mode_s.to_string(),
        seed: data.seed,
        accuracy: score.accuracy,
        skill: score.skill,
        n_samples: total,
    }];
    run.write_file("skill_grid.csv", skill_grid_csv(&rows).as_bytes())?;
    let delta = STAGE1_DELTA_FRACTION / dcfg.k as f64;
    let report = detect_stages(&log, dcfg.k, delta, STAGE_WINDOW);
    run.write_file(
        "stage_report.json",
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    println!(
        "test accuracy {:.4}, skill {:.4} ({} / {}); stages: {:?}",
        score.accuracy, score.skill, correct, total, report.stage2_outcome
    );
    Ok(())
}

fn run(cli: Cli) -> Result<i32, Error> {
    let root = out_root(&cli);
    match &cli.cmd {
        Cmd::Generate { data, name, force } => {
            let dcfg = data.config();
            let bundle = build_dataset(&dcfg)?;
            let dir = root.join(name);
            let mut run = RunDir::create(&dir, data.seed, json!({ "dataset": dcfg }), *force)?;
            for (split, instances) in [
                ("train", &bundle.train),
                ("val", &bundle.val),
                ("test", &bundle.test),
            ] {
                let file = format!("{split}.jsonl");
                write_instances(&run.path.join(&file), instances)?;
                run.record_file(&file)?;
            }
            println!(
                "wrote {} train / {} val / {} test instances to {}",
                bundle.train.len(),
                bundle.val.len(),
                bundle.test.len(),
                dir.display()
            );
        }
        Cmd::Train {
            data,
            mode,
            epochs,
            batch,
            lr,
            eval_subset,
            no_early_stop,
            name,
            force,
        } => {
            cmd_train(
                &root,
                data,
                mode,
                *epochs,
                *batch,
                *lr,
                *eval_subset,
                *no_early_stop,
                name,
                *force,
            )?;
        }
        Cmd::Eval { data, checkpoint } => {
            let dcfg = data.config();
            let (params, _) = load_checkpoint(checkpoint)?;
            let bundle = build_dataset(&dcfg)?;
            let vocab = dcfg.vocabulary();
            let (c, t) = first_hop_accuracy(&params, &bundle.test, &vocab)?;
            let score = SkillScore::from_counts(c, t, dcfg.k);
            let (pc, pt) = exact_path_accuracy(&params, &bundle.test, Mode::Cot, &vocab)
                .unwrap_or((0, bundle.test.len()));
            println!(
                "first-hop accuracy {:.4} skill {:.4} ({c}/{t}); exact-path accuracy {:.4} ({pc}/{pt})",
                score.accuracy,
                score.skill,
                pc as f64 / pt.max(1) as f64
            );
        }
        Cmd::Probe {
            data,
            checkpoint,
            out,
        } => {
            let dcfg = data.config();
            let (params, _) = load_checkpoint(checkpoint)?;
            let bundle = build_dataset(&dcfg)?;
            let rep = average_br(&params, &bundle.test, &dcfg.vocabulary())?;
            write_or_print(out, &rep.to_csv())?;
            eprintln!(
                "mean BR {:.4} over {} instances",
                rep.mean_all,
                rep.rows.len()
            );
        }
        Cmd::Errors {
            data,
            checkpoint,
            out,
        } => {
            let dcfg = data.config();
            let (params, _) = load_checkpoint(checkpoint)?;
            let bundle = build_dataset(&dcfg)?;
            let bd = error_breakdown(&params, &bundle.test, &dcfg.vocabulary())?;
            write_or_print(out, &bd.to_csv())?;
        }
        Cmd::Ceiling {
            start_m,
            max_m,
            max_runs,
            seed,
            train_size,
            eval_size,
            epochs,
            batch,
        } => {
            let result = depth_ceiling_search(*start_m, *max_m, *max_runs, |k, m| {
                eprintln!("ceiling cell: training G({k}, {m})");
                let dcfg = DatasetConfig::new(k, m, *train_size, *eval_size, *eval_size, *seed);
                let bundle = build_dataset(&dcfg)?;
                let mut tcfg = TrainConfig::desk(Mode::Latent, *seed);
                tcfg.epochs = *epochs;
                tcfg.batch_size = *batch;
                let params = Parameters::<f32>::init(model_for(&dcfg), *seed)?;
                let (trained, _) = train(params, &bundle, &tcfg)?;
                first_hop_accuracy(&trained, &bundle.test, &dcfg.vocabulary())
            })?;
            match result.ceiling {
                Some(m) => println!("depth ceiling: m = {m}"),
                None => println!("depth ceiling: none (LPC fails at m = {start_m})"),
            }
            for c in &result.cells {
                println!(
                    "  k={} m={}: {}/{} skill {:.4}",
                    c.k, c.m, c.correct, c.total, c.skill
                );
            }
        }
        Cmd::Thresholds { out } => {
            let table = ThresholdTable::build(&K_SET, &[100, 2048], ALPHA);
            write_or_print(out, &table.to_csv())?;
        }
        Cmd::Prompts {
            data,
            mode,
            out,
            score,
            eval_set,
        } => match (score, eval_set) {
            (Some(responses), Some(eval)) => {
                let records = read_eval_set(eval)?;
                let resp = read_responses(responses)?;
                let rep = score_responses(&records, &resp)?;
                println!(
                    "accuracy {:.4} skill {:.4} over {} prompts ({} malformed, {} unanswered)",
                    rep.score.accuracy,
                    rep.score.skill,
                    rep.score.n_samples,
                    rep.malformed,
                    rep.unanswered
                );
            }
            (Some(_), None) => {
                return Err(Error::Config("--score requires --eval-set".into()));
            }
            (None, _) => {
                let pmode = parse_prompt_mode(mode)?;
                let dcfg = data.config();
                let bundle = build_dataset(&dcfg)?;
                let path = out.clone().unwrap_or_else(|| {
                    root.join(format!("prompts_{}_k{}m{}.jsonl", mode, dcfg.k, dcfg.m))
                });
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let n = export_eval_set(&bundle, pmode, &path)?;
                println!("wrote {n} prompts to {}", path.display());
            }
        },
        Cmd::Report { run, verify } => {
            let dir = RunDir::open(run)?;
            if *verify {
                let bad = dir.verify()?;
                if !bad.is_empty() {
                    eprintln!("verification failed for: {}", bad.join(", "));
                    return Ok(3);
                }
                println!("manifest verifies: {} files", dir.manifest.files.len());
            } else {
                // Regenerate charts from the stored run log.
                let csv = std::fs::read_to_string(run.join("runlog.csv"))?;
                let log = parse_runlog(&csv)?;
                std::fs::write(run.join("loss.svg"), loss_chart_svg(&log))?;
                std::fs::write(run.join("accuracy.svg"), accuracy_chart_svg(&log))?;
                println!(
                    "wrote loss.svg and accuracy.svg with {} points",
                    log.records.len()
                );
            }
        }
    }
    Ok(0)
}

fn parse_runlog(csv: &str) -> Result<starplan::training::RunLog, Error> {
    let mut log = starplan::training::RunLog::default();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Config(format!(
                "runlog line {i} has {} fields",
                f.len()
            )));
        }
        let parse_err = |e: &str| Error::Config(format!("runlog line {i}: {e}"));
        log.records.push(starplan::training::EvalRecord {
            update: f[0].parse().map_err(|_| parse_err("bad update"))?,
            train_loss: f[1].parse().map_err(|_| parse_err("bad train_loss"))?,
            val_loss: f[2].parse().map_err(|_| parse_err("bad val_loss"))?,
            val_acc: f[3].parse().map_err(|_| parse_err("bad val_acc"))?,
            token_acc: f[4].parse().map_err(|_| parse_err("bad token_acc"))?,
            stage: f[5].parse().map_err(|_| parse_err("bad stage"))?,
        });
    }
    Ok(log)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::InvalidDimensions { .. } | Error::PoolTooSmall { .. } => {
                    2
                }
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
