//! The four user-facing commands. Each validates the whole config before it
//! touches the filesystem.

use std::fs;
use std::path::Path;

use crate::ablation::{run_ablation, AblationReport};
use crate::checkpoint::{load_state, save_state, Checkpoint};
use crate::config::{Command, RunConfig};
use crate::error::{config_err, Error, Result};
use crate::eval::{episodes_csv, run_meta_test, EvalMode, MetricsReport};
use crate::pipeline::{ModelConfig, PipelineState};
use crate::protocol::{Dataset, SplitManifest};
use crate::synth::generate_dataset;
use crate::train::{train_stage, StageReport};

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load(&cfg.manifest_path())?;
    if data.manifest.fold != cfg.eval.fold {
        return Err(config_err!("manifest was generated for fold {}, config asks for fold {}", data.manifest.fold, cfg.eval.fold));
    }
    Ok(data)
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::KWay => "k-way",
        EvalMode::OneWay => "one-way",
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<SplitManifest> {
    cfg.validate_for(Command::GenData)?;
    generate_dataset(&cfg.dataset_spec(), &cfg.paths.data_dir, cfg.eval.parallel)
}

pub struct TrainOutcome {
    pub state: PipelineState,
    /// Reports of the stages trained by this invocation.
    pub reports: Vec<StageReport>,
    /// Stages restored from checkpoints instead of trained.
    pub resumed: Vec<u8>,
}

/// Most advanced stage checkpoint that is intact, was written for the same
/// model config, and covers every stage up to its own.
fn resume_point(cfg: &RunConfig, stages: &[u8]) -> Option<(u8, PipelineState)> {
    let wanted = ModelConfig { init_seed: 0, ..cfg.model.clone() };
    for (i, &stage) in stages.iter().enumerate().rev() {
        let path = cfg.stage_checkpoint(stage);
        if !path.exists() {
            continue;
        }
        let state = match Checkpoint::load(&path).and_then(|ck| ck.to_state(&path)) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("ignoring checkpoint: {e}");
                continue;
            }
        };
        let covered = stages[..=i].iter().all(|&s| state.trained[s as usize - 1]);
        if state.config == wanted && covered {
            return Some((stage, state));
        }
        log::warn!("ignoring {}: written for a different model config", path.display());
    }
    None
}

/// Train every stage the model needs, writing a checkpoint and a loss CSV per
/// stage and `final.popc` at the end. With `resume`, stages already covered by
/// a valid stage checkpoint are skipped.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate_for(Command::Train)?;
    let data = load_data(cfg)?;
    let fold = cfg.fold()?;
    let stages = PipelineState::new(cfg.model.clone())?.required_stages();
    let (mut state, resumed) = match resume.then(|| resume_point(cfg, &stages)).flatten() {
        Some((upto, mut s)) => {
            log::info!("resuming after stage {upto}");
            s.config.init_seed = cfg.model.init_seed;
            (s, stages.iter().copied().take_while(|&st| st <= upto).collect())
        }
        None => (PipelineState::new(cfg.model.clone())?, Vec::new()),
    };
    let mut reports = Vec::new();
    for &stage in &stages {
        if resumed.contains(&stage) {
            continue;
        }
        log::info!("training stage {stage}");
        let report = train_stage(&mut state, stage, &data, &fold, &cfg.train)?;
        write(&cfg.paths.report_dir.join(format!("loss_stage{stage}.csv")), &report.to_csv())?;
        save_state(&state, &cfg.stage_checkpoint(stage))?;
        reports.push(report);
    }
    save_state(&state, &cfg.final_checkpoint())?;
    Ok(TrainOutcome { state, reports, resumed })
}

/// Evaluate `final.popc`, writing `metrics_<mode>.json` and `episodes_<mode>.csv`.
pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate_for(Command::Eval)?;
    let data = load_data(cfg)?;
    let fold = cfg.fold()?;
    let state = load_state(&cfg.final_checkpoint())?;
    let (report, records) = run_meta_test(&state, &data, &fold, cfg.eval.mode, cfg.eval.parallel)?;
    let mode = mode_name(cfg.eval.mode);
    write(&cfg.paths.report_dir.join(format!("metrics_{mode}.json")), &report.to_json()?)?;
    write(&cfg.paths.report_dir.join(format!("episodes_{mode}.csv")), &episodes_csv(&records))?;
    Ok(report)
}

/// Run the six-row ablation over `eval.ablation_seeds` seeds starting at the
/// run seed; writes `ablation.csv` and `ablation_verdict.txt`.
pub fn ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate_for(Command::Ablate)?;
    let data = load_data(cfg)?;
    let fold = cfg.fold()?;
    let seeds: Vec<u64> = (0..cfg.eval.ablation_seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let report = run_ablation(&data, &fold, &cfg.model, &cfg.train, &seeds, cfg.eval.parallel)?;
    write(&cfg.paths.report_dir.join("ablation.csv"), &report.to_csv())?;
    write(&cfg.paths.report_dir.join("ablation_verdict.txt"), &report.verdict())?;
    Ok(report)
}
