//! The mode x augmentation x shot comparison grid: pretrain + finetune per
//! cell, zero-shot evaluation on unseen-accent holdouts, and optional
//! per-accent full-shot adaptation on the held-in remainder.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::AugmentConfig;
use crate::corpus::{CorpusSplit, Split, Utterance};
use crate::decode::{evaluate_split, DecodeConfig, EvalReport, ReportMeta};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::seed;
use crate::trainer::stage::{train_stage, train_stage_on, Stage, TrainConfig, TrainMode};

/// Which augmentations a matrix column enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugChoice {
    None,
    Noise,
    SpecAug,
    AltVoice,
    All,
}

impl AugChoice {
    pub const ALL_CHOICES: [AugChoice; 5] = [
        AugChoice::None,
        AugChoice::Noise,
        AugChoice::SpecAug,
        AugChoice::AltVoice,
        AugChoice::All,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AugChoice::None => "none",
            AugChoice::Noise => "noise",
            AugChoice::SpecAug => "specaug",
            AugChoice::AltVoice => "altvoice",
            AugChoice::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugChoice::None),
            "noise" => Ok(AugChoice::Noise),
            "specaug" => Ok(AugChoice::SpecAug),
            "altvoice" => Ok(AugChoice::AltVoice),
            "all" => Ok(AugChoice::All),
            other => Err(Error::Config(format!("unknown augmentation `{other}`"))),
        }
    }

    /// Restrict a base augmentation config to this choice by zeroing the
    /// probabilities of everything else.
    pub fn restrict(&self, base: &AugmentConfig) -> AugmentConfig {
        let mut cfg = base.clone();
        match self {
            AugChoice::None => {
                cfg.noise_prob = 0.0;
                cfg.specaug_prob = 0.0;
                cfg.altvoice_prob = 0.0;
            }
            AugChoice::Noise => {
                cfg.specaug_prob = 0.0;
                cfg.altvoice_prob = 0.0;
            }
            AugChoice::SpecAug => {
                cfg.noise_prob = 0.0;
                cfg.altvoice_prob = 0.0;
            }
            AugChoice::AltVoice => {
                cfg.noise_prob = 0.0;
                cfg.specaug_prob = 0.0;
            }
            AugChoice::All => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shot {
    Zero,
    Full,
}

impl Shot {
    pub fn name(&self) -> &'static str {
        match self {
            Shot::Zero => "zero",
            Shot::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Shot::Zero),
            "full" => Ok(Shot::Full),
            other => Err(Error::Config(format!("unknown shot `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixConfig {
    pub modes: Vec<TrainMode>,
    pub augmentations: Vec<AugChoice>,
    pub shots: Vec<Shot>,
    /// Seeded holdout size per test accent, reserved for evaluation.
    pub holdout_per_test_accent: usize,
    /// Epoch budget of the per-accent full-shot adaptation.
    pub full_shot_max_epochs: usize,
    /// Run cells on a thread pool instead of sequentially.
    pub parallel: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            modes: vec![TrainMode::Joint, TrainMode::Proposed],
            augmentations: AugChoice::ALL_CHOICES.to_vec(),
            shots: vec![Shot::Zero, Shot::Full],
            holdout_per_test_accent: 100,
            full_shot_max_epochs: 3,
            parallel: false,
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.augmentations.is_empty() || self.shots.is_empty() {
            return Err(Error::Config(
                "matrix.modes, matrix.augmentations and matrix.shots must be non-empty".into(),
            ));
        }
        if self.holdout_per_test_accent == 0 {
            return Err(Error::Config(
                "matrix.holdout_per_test_accent must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One grid cell's result; errors are recorded, not propagated, so one
/// poisoned cell cannot take down the rest of the grid.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub mode: TrainMode,
    pub aug: AugChoice,
    pub shot: Shot,
    pub outcome: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub cells: Vec<CellResult>,
}

/// Per-test-accent split into a seeded evaluation holdout and the
/// held-in remainder used for full-shot adaptation.
pub struct TestHoldout<'a> {
    pub accent_id: String,
    pub eval: Vec<&'a Utterance>,
    pub held_in: Vec<&'a Utterance>,
}

pub fn test_holdouts<'a>(
    corpus: &'a CorpusSplit,
    holdout_per_accent: usize,
    master_seed: u64,
) -> Vec<TestHoldout<'a>> {
    corpus
        .accents(Split::Test)
        .iter()
        .map(|accent| {
            let mut idx: Vec<usize> = (0..accent.utterances.len()).collect();
            let mut rng = seed::rng(
                master_seed,
                &[seed::tag("holdout"), seed::tag(&accent.profile.id)],
            );
            idx.shuffle(&mut rng);
            let take = holdout_per_accent.min(idx.len());
            let mut eval_idx = idx[..take].to_vec();
            let mut held_idx = idx[take..].to_vec();
            eval_idx.sort_unstable();
            held_idx.sort_unstable();
            TestHoldout {
                accent_id: accent.profile.id.clone(),
                eval: eval_idx.iter().map(|&i| &accent.utterances[i]).collect(),
                held_in: held_idx.iter().map(|&i| &accent.utterances[i]).collect(),
            }
        })
        .collect()
}

/// Inputs shared by every cell.
pub struct MatrixInputs<'a> {
    pub corpus: &'a CorpusSplit,
    pub model_config: ModelConfig,
    pub base_augment: AugmentConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub decode: DecodeConfig,
    pub master_seed: u64,
}

struct CellTrained {
    zero_params: ModelParams,
}

fn run_cell_training(
    inputs: &MatrixInputs<'_>,
    mode: TrainMode,
    aug: AugChoice,
) -> Result<CellTrained> {
    let aug_cfg = aug.restrict(&inputs.base_augment);
    let init = ModelParams::init(
        &inputs.model_config,
        seed::derive(inputs.master_seed, &[seed::tag("model-init")]),
    )?;

    let mut pre_cfg = inputs.pretrain.clone();
    pre_cfg.stage = Stage::Pretrain;
    pre_cfg.mode = mode;
    pre_cfg.alpha = match mode {
        TrainMode::Proposed => 1.0,
        _ => 0.0,
    };
    let (pretrained, _) = train_stage(inputs.corpus, &aug_cfg, &pre_cfg, init)?;

    let mut fin_cfg = inputs.finetune.clone();
    fin_cfg.stage = Stage::Finetune;
    fin_cfg.mode = mode;
    fin_cfg.alpha = 0.0;
    let (zero_params, _) = train_stage(inputs.corpus, &aug_cfg, &fin_cfg, pretrained)?;

    Ok(CellTrained { zero_params })
}

fn zero_shot_report(
    inputs: &MatrixInputs<'_>,
    holdouts: &[TestHoldout<'_>],
    trained: &CellTrained,
    mode: TrainMode,
    aug: AugChoice,
) -> Result<EvalReport> {
    let utts: Vec<&Utterance> = holdouts.iter().flat_map(|h| h.eval.iter().copied()).collect();
    evaluate_split(
        &utts,
        &trained.zero_params,
        &inputs.decode,
        ReportMeta {
            mode: mode.name().into(),
            augmentation: aug.name().into(),
            shot: Shot::Zero.name().into(),
            checkpoint: format!("{}-{}-zero", mode.name(), aug.name()),
        },
    )
}

/// Per-accent full-shot evaluation: adapt the zero-shot weights on each
/// test accent's held-in utterances, then score that accent's holdout.
pub fn evaluate_full_shot(
    inputs: &MatrixInputs<'_>,
    holdouts: &[TestHoldout<'_>],
    zero_params: &ModelParams,
    mode: TrainMode,
    aug: AugChoice,
    full_shot_max_epochs: usize,
) -> Result<EvalReport> {
    let aug_cfg = aug.restrict(&inputs.base_augment);
    let mut per_accent = Vec::with_capacity(holdouts.len());
    for holdout in holdouts {
        let params = if holdout.held_in.is_empty() {
            zero_params.clone()
        } else {
            let mut cfg = inputs.finetune.clone();
            cfg.stage = Stage::Finetune;
            cfg.mode = mode;
            cfg.alpha = 0.0;
            cfg.max_epochs = full_shot_max_epochs;
            cfg.seed = seed::derive(
                inputs.master_seed,
                &[seed::tag("full-shot"), seed::tag(&holdout.accent_id)],
            );
            let (adapted, _) = train_stage_on(
                inputs.corpus,
                &holdout.held_in,
                &[],
                &aug_cfg,
                &cfg,
                zero_params.clone(),
            )?;
            adapted
        };
        let report = evaluate_split(
            &holdout.eval,
            &params,
            &inputs.decode,
            ReportMeta::default(),
        )?;
        debug_assert_eq!(report.per_accent.len(), 1);
        per_accent.push(report.per_accent[0].clone());
    }
    let macro_avg = per_accent.iter().map(|c| c.wer).sum::<f64>() / per_accent.len() as f64;
    Ok(EvalReport {
        meta: ReportMeta {
            mode: mode.name().into(),
            augmentation: aug.name().into(),
            shot: Shot::Full.name().into(),
            checkpoint: format!("{}-{}-full", mode.name(), aug.name()),
        },
        per_accent,
        macro_avg,
    })
}

/// Run the configured grid. Training happens once per (mode, augmentation)
/// column; shots reuse the column's checkpoints.
pub fn run_experiment_matrix(
    inputs: &MatrixInputs<'_>,
    matrix: &MatrixConfig,
) -> Result<MatrixReport> {
    matrix.validate()?;
    let holdouts = test_holdouts(
        inputs.corpus,
        matrix.holdout_per_test_accent,
        inputs.master_seed,
    );

    let columns: Vec<(TrainMode, AugChoice)> = matrix
        .modes
        .iter()
        .flat_map(|&m| matrix.augmentations.iter().map(move |&a| (m, a)))
        .collect();

    let run_column = |&(mode, aug): &(TrainMode, AugChoice)| -> Vec<CellResult> {
        let trained = run_cell_training(inputs, mode, aug);
        matrix
            .shots
            .iter()
            .map(|&shot| {
                let outcome = match &trained {
                    Err(e) => Err(e.to_string()),
                    Ok(trained) => match shot {
                        Shot::Zero => zero_shot_report(inputs, &holdouts, trained, mode, aug)
                            .map_err(|e| e.to_string()),
                        Shot::Full => evaluate_full_shot(
                            inputs,
                            &holdouts,
                            &trained.zero_params,
                            mode,
                            aug,
                            matrix.full_shot_max_epochs,
                        )
                        .map_err(|e| e.to_string()),
                    },
                };
                CellResult {
                    mode,
                    aug,
                    shot,
                    outcome,
                }
            })
            .collect()
    };

    let cells: Vec<CellResult> = if matrix.parallel {
        columns.par_iter().map(run_column).flatten().collect()
    } else {
        columns.iter().flat_map(run_column).collect()
    };

    Ok(MatrixReport { cells })
}

impl MatrixReport {
    /// One combined CSV keyed (mode, aug, shot, accent); failed cells get
    /// a row with the error in the last column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,aug,shot,accent,n_utts,wer,error\n");
        for cell in &self.cells {
            let key = format!(
                "{},{},{}",
                cell.mode.name(),
                cell.aug.name(),
                cell.shot.name()
            );
            match &cell.outcome {
                Ok(report) => {
                    for acc in &report.per_accent {
                        out.push_str(&format!(
                            "{key},{},{},{:.4},\n",
                            acc.accent, acc.n_utts, acc.wer
                        ));
                    }
                    let total: usize = report.per_accent.iter().map(|c| c.n_utts).sum();
                    out.push_str(&format!("{key},avg,{},{:.4},\n", total, report.macro_avg));
                }
                Err(message) => {
                    let clean = message.replace([',', '\n'], ";");
                    out.push_str(&format!("{key},failed,0,,{clean}\n"));
                }
            }
        }
        out
    }

    /// Text rendering with one block per shot: accents as rows, one
    /// column per (mode, augmentation) pair.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let shots: Vec<Shot> = {
            let mut seen = Vec::new();
            for c in &self.cells {
                if !seen.contains(&c.shot) {
                    seen.push(c.shot);
                }
            }
            seen
        };
        for shot in shots {
            let cells: Vec<&CellResult> =
                self.cells.iter().filter(|c| c.shot == shot).collect();
            if cells.is_empty() {
                continue;
            }
            out.push_str(&format!("== {}-shot WER (%) ==\n", shot.name()));
            let mut accents: Vec<String> = Vec::new();
            for cell in &cells {
                if let Ok(report) = &cell.outcome {
                    for acc in &report.per_accent {
                        if !accents.contains(&acc.accent) {
                            accents.push(acc.accent.clone());
                        }
                    }
                }
            }
            accents.sort();
            out.push_str(&format!("{:<10}", "accent"));
            for cell in &cells {
                out.push_str(&format!(
                    "{:>20}",
                    format!("{}+{}", cell.mode.name(), cell.aug.name())
                ));
            }
            out.push('\n');
            for accent in &accents {
                out.push_str(&format!("{accent:<10}"));
                for cell in &cells {
                    let text = match &cell.outcome {
                        Ok(report) => report
                            .per_accent
                            .iter()
                            .find(|c| &c.accent == accent)
                            .map(|c| format!("{:.2}", c.wer))
                            .unwrap_or_else(|| "-".into()),
                        Err(_) => "failed".into(),
                    };
                    out.push_str(&format!("{text:>20}"));
                }
                out.push('\n');
            }
            out.push_str(&format!("{:<10}", "avg"));
            for cell in &cells {
                let text = match &cell.outcome {
                    Ok(report) => format!("{:.2}", report.macro_avg),
                    Err(_) => "failed".into(),
                };
                out.push_str(&format!("{text:>20}"));
            }
            out.push_str("\n\n");
        }
        out
    }

    /// Macro-average WER of one cell, when it succeeded.
    pub fn cell_avg(&self, mode: TrainMode, aug: AugChoice, shot: Shot) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.aug == aug && c.shot == shot)
            .and_then(|c| c.outcome.as_ref().ok())
            .map(|r| r.macro_avg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::decode::AccentWer;

    #[test]
    fn holdout_and_held_in_are_disjoint_and_seeded() {
        let corpus = generate_corpus(&CorpusConfig {
            lexicon_size: 8,
            train_sentences: 2,
            val_sentences: 1,
            test_sentences: 10,
            master_seed: 4,
            ..CorpusConfig::default()
        })
        .unwrap();
        let a = test_holdouts(&corpus, 7, 42);
        let b = test_holdouts(&corpus, 7, 42);
        for (ha, hb) in a.iter().zip(&b) {
            assert_eq!(ha.eval.len(), 7);
            assert_eq!(ha.held_in.len(), 3);
            let eval_ids: Vec<&str> = ha.eval.iter().map(|u| u.id.as_str()).collect();
            for u in &ha.held_in {
                assert!(!eval_ids.contains(&u.id.as_str()));
            }
            let ids_b: Vec<&str> = hb.eval.iter().map(|u| u.id.as_str()).collect();
            assert_eq!(eval_ids, ids_b);
        }
        let c = test_holdouts(&corpus, 7, 43);
        let ids_a: Vec<&str> = a[0].eval.iter().map(|u| u.id.as_str()).collect();
        let ids_c: Vec<&str> = c[0].eval.iter().map(|u| u.id.as_str()).collect();
        assert_ne!(ids_a, ids_c);
    }

    #[test]
    fn aug_restriction_zeroes_other_probs() {
        let base = AugmentConfig::default();
        let noise_only = AugChoice::Noise.restrict(&base);
        assert_eq!(noise_only.noise_prob, base.noise_prob);
        assert_eq!(noise_only.specaug_prob, 0.0);
        assert_eq!(noise_only.altvoice_prob, 0.0);
        let none = AugChoice::None.restrict(&base);
        assert_eq!(none.noise_prob, 0.0);
        let all = AugChoice::All.restrict(&base);
        assert_eq!(all, base);
    }

    #[test]
    fn csv_row_count_matches_grid_arithmetic() {
        let report = MatrixReport {
            cells: vec![CellResult {
                mode: TrainMode::Joint,
                aug: AugChoice::None,
                shot: Shot::Zero,
                outcome: Ok(EvalReport {
                    meta: ReportMeta::default(),
                    per_accent: vec![
                        AccentWer {
                            accent: "te0".into(),
                            n_utts: 2,
                            wer: 50.0,
                        },
                        AccentWer {
                            accent: "te1".into(),
                            n_utts: 2,
                            wer: 25.0,
                        },
                    ],
                    macro_avg: 37.5,
                }),
            }],
        };
        let csv = report.to_csv();
        // header + 2 accents + 1 avg
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("joint,none,zero,avg,4,37.5000,"));
    }

    #[test]
    fn failed_cells_are_recorded_not_propagated() {
        let report = MatrixReport {
            cells: vec![CellResult {
                mode: TrainMode::Joint,
                aug: AugChoice::None,
                shot: Shot::Zero,
                outcome: Err("training diverged at step 3: loss value NaN".into()),
            }],
        };
        let csv = report.to_csv();
        assert!(csv.contains("joint,none,zero,failed,0,,"));
        assert!(csv.contains("diverged"));
    }
}
