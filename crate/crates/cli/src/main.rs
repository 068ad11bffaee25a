//! Command-line pipeline: corpus generation, two-stage training with the
//! baseline modes, beam-search evaluation, embedding export and the full
//! experiment matrix. Exit codes: 0 success, 2 usage or config problems,
//! 3 runtime failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clasr_core::config::ExperimentConfig;
use clasr_core::corpus::{manifest, CorpusSplit, Split};
use clasr_core::decode::{evaluate_split, ReportMeta};
use clasr_core::embed::{cluster_metrics, export_embeddings, pca2, pca2_csv};
use clasr_core::error::{Error, Result};
use clasr_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use clasr_core::seed;
use clasr_core::trainer::{
    evaluate_full_shot, history_to_csv, run_experiment_matrix, test_holdouts, train_stage,
    AugChoice, MatrixInputs, Stage, TrainMode,
};

#[derive(Parser)]
#[command(name = "clasr", version, about = "contrastive learning for accented character recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic accented corpus onto disk.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one training stage and write the best checkpoint plus history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// pretrain | finetune
        #[arg(long)]
        stage: String,
        /// proposed | joint | simclr_pretrain
        #[arg(long, default_value = "proposed")]
        mode: String,
        /// Checkpoint to start from (required for finetune).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Restrict augmentation: none | noise | specaug | altvoice | all
        #[arg(long, default_value = "all")]
        aug: String,
    },
    /// Evaluate a checkpoint with beam search and write WER reports.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | validation | test
        #[arg(long, default_value = "test")]
        split: String,
        /// zero | full (full adapts per test accent before scoring)
        #[arg(long, default_value = "zero")]
        shot: String,
    },
    /// Export per-character representations, their 2-D projection and
    /// cluster metrics.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        limit: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Run the configured mode x augmentation x shot comparison grid.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

fn load_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<CorpusSplit> {
    let dir = corpus_dir(out);
    if !manifest::manifest_path(&dir).exists() {
        return Err(Error::Contract(format!(
            "no corpus at {} (run `clasr gen-corpus` first)",
            dir.display()
        )));
    }
    manifest::load_corpus(&dir, &cfg.corpus)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { config } => cmd_gen_corpus(&config),
        Command::Train {
            config,
            stage,
            mode,
            init,
            aug,
        } => cmd_train(&config, &stage, &mode, init.as_deref(), &aug),
        Command::Eval {
            config,
            checkpoint,
            split,
            shot,
        } => cmd_eval(&config, &checkpoint, &split, &shot),
        Command::ExportEmbeddings {
            config,
            checkpoint,
            limit,
            split,
        } => cmd_export(&config, &checkpoint, limit, &split),
        Command::Matrix { config } => cmd_matrix(&config),
    }
}

fn cmd_gen_corpus(config_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = cfg.resolved_output_dir();
    let dir = corpus_dir(&out);
    fs::create_dir_all(&dir)?;
    let corpus = clasr_core::corpus::generate_corpus(&cfg.corpus)?;
    manifest::write_corpus(&dir, &corpus)?;
    cfg.write_resolved(&out)?;
    let counts: Vec<String> = [Split::Train, Split::Validation, Split::Test]
        .iter()
        .map(|&s| format!("{} {}", corpus.utterances(s).len(), s.name()))
        .collect();
    println!(
        "corpus written to {} ({})",
        dir.display(),
        counts.join(", ")
    );
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    stage: &str,
    mode: &str,
    init: Option<&Path>,
    aug: &str,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = cfg.resolved_output_dir();
    let stage = Stage::parse(stage)?;
    let mode = TrainMode::parse(mode)?;
    let aug_choice = AugChoice::parse(aug)?;
    let corpus = load_corpus(&cfg, &out)?;

    let init_params = match (stage, init) {
        (Stage::Finetune, None) => {
            return Err(Error::Usage(
                "--stage finetune requires --init <pretrain checkpoint>".into(),
            ))
        }
        (_, Some(path)) => {
            let (params, _) = load_checkpoint(path)?;
            if params.config != cfg.model {
                return Err(Error::CheckpointMismatch {
                    matrix: "config".into(),
                    expected: format!("{:?}", cfg.model),
                    found: format!("{:?}", params.config),
                });
            }
            params
        }
        (Stage::Pretrain, None) => ModelParams::init(
            &cfg.model,
            seed::derive(cfg.corpus.master_seed, &[seed::tag("model-init")]),
        )?,
    };

    let keys = match stage {
        Stage::Pretrain => &cfg.pretrain,
        Stage::Finetune => &cfg.finetune,
    };
    let train_seed = seed::derive(
        cfg.corpus.master_seed,
        &[seed::tag("train"), seed::tag(mode.name()), seed::tag(stage.name())],
    );
    let train_cfg = keys.to_train_config(mode, stage, train_seed);
    let aug_cfg = aug_choice.restrict(&cfg.augment);

    let (best, history) = train_stage(&corpus, &aug_cfg, &train_cfg, init_params)?;

    let run_dir = out.join("train");
    fs::create_dir_all(&run_dir)?;
    let base = format!("{}-{}-{}", mode.name(), aug_choice.name(), stage.name());
    let ckpt_path = run_dir.join(format!("{base}.ckpt"));
    save_checkpoint(&ckpt_path, &best, None)?;
    fs::write(run_dir.join(format!("{base}-history.csv")), history_to_csv(&history))?;
    cfg.write_resolved(&out)?;
    println!(
        "checkpoint written to {} ({} steps)",
        ckpt_path.display(),
        history.len()
    );
    Ok(())
}

fn cmd_eval(config_path: &Path, checkpoint: &Path, split: &str, shot: &str) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = cfg.resolved_output_dir();
    let split = Split::parse(split)?;
    let corpus = load_corpus(&cfg, &out)?;
    let (params, _) = load_checkpoint(checkpoint)?;
    if params.config != cfg.model {
        return Err(Error::CheckpointMismatch {
            matrix: "config".into(),
            expected: format!("{:?}", cfg.model),
            found: format!("{:?}", params.config),
        });
    }
    let ckpt_name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let report = match (shot, split) {
        ("zero", _) => {
            let utts = corpus.utterances(split);
            evaluate_split(
                &utts,
                &params,
                &cfg.decode,
                ReportMeta {
                    mode: String::new(),
                    augmentation: String::new(),
                    shot: "zero".into(),
                    checkpoint: ckpt_name.clone(),
                },
            )?
        }
        ("full", Split::Test) => {
            let holdouts = test_holdouts(
                &corpus,
                cfg.matrix.holdout_per_test_accent,
                cfg.corpus.master_seed,
            );
            let inputs = MatrixInputs {
                corpus: &corpus,
                model_config: cfg.model,
                base_augment: cfg.augment.clone(),
                pretrain: cfg.pretrain.to_train_config(
                    TrainMode::Proposed,
                    Stage::Pretrain,
                    0,
                ),
                finetune: cfg.finetune.to_train_config(
                    TrainMode::Proposed,
                    Stage::Finetune,
                    0,
                ),
                decode: cfg.decode,
                master_seed: cfg.corpus.master_seed,
            };
            let mut report = evaluate_full_shot(
                &inputs,
                &holdouts,
                &params,
                TrainMode::Proposed,
                AugChoice::All,
                cfg.matrix.full_shot_max_epochs,
            )?;
            report.meta.checkpoint = ckpt_name.clone();
            report.meta.mode = String::new();
            report.meta.augmentation = String::new();
            report
        }
        ("full", _) => {
            return Err(Error::Usage(
                "--shot full applies to --split test only".into(),
            ))
        }
        (other, _) => return Err(Error::Usage(format!("unknown shot `{other}`"))),
    };

    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir)?;
    let base = format!("{}-{}-{}", ckpt_name, split.name(), shot);
    fs::write(eval_dir.join(format!("{base}.csv")), report.to_csv())?;
    fs::write(eval_dir.join(format!("{base}.txt")), report.to_table())?;
    cfg.write_resolved(&out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_export(config_path: &Path, checkpoint: &Path, limit: usize, split: &str) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = cfg.resolved_output_dir();
    let split = Split::parse(split)?;
    let corpus = load_corpus(&cfg, &out)?;
    let (params, _) = load_checkpoint(checkpoint)?;
    let ckpt_name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let utts = corpus.utterances(split);
    let dump = export_embeddings(
        &utts,
        &params,
        limit,
        seed::derive(cfg.corpus.master_seed, &[seed::tag("embed-sample")]),
        &ckpt_name,
    )?;
    let dir = out.join("embeddings");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{ckpt_name}-dump.csv")), dump.to_csv())?;
    let points = pca2(&dump)?;
    fs::write(
        dir.join(format!("{ckpt_name}-pca2.csv")),
        pca2_csv(&dump, &points),
    )?;
    let metrics = cluster_metrics(&dump)?;
    let summary = format!(
        "rows = {}\nsilhouette = {:.6}\ncross_accent_same_letter = {:.6}\n",
        dump.rows.len(),
        metrics.silhouette,
        metrics.cross_accent_same_letter
    );
    fs::write(dir.join(format!("{ckpt_name}-metrics.txt")), &summary)?;
    cfg.write_resolved(&out)?;
    print!("{summary}");
    Ok(())
}

fn cmd_matrix(config_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = cfg.resolved_output_dir();
    let corpus = load_corpus(&cfg, &out)?;
    let master = cfg.corpus.master_seed;
    let inputs = MatrixInputs {
        corpus: &corpus,
        model_config: cfg.model,
        base_augment: cfg.augment.clone(),
        pretrain: cfg.pretrain.to_train_config(
            TrainMode::Proposed,
            Stage::Pretrain,
            seed::derive(master, &[seed::tag("train"), seed::tag("pretrain")]),
        ),
        finetune: cfg.finetune.to_train_config(
            TrainMode::Proposed,
            Stage::Finetune,
            seed::derive(master, &[seed::tag("train"), seed::tag("finetune")]),
        ),
        decode: cfg.decode,
        master_seed: master,
    };
    let report = run_experiment_matrix(&inputs, &cfg.matrix)?;
    let dir = out.join("matrix");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    cfg.write_resolved(&out)?;
    print!("{}", report.to_table());
    let failed = report
        .cells
        .iter()
        .filter(|c| c.outcome.is_err())
        .count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see report.csv");
    }
    Ok(())
}
