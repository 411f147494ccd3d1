//! The five commands as library functions. Each `run_*` computes without
//! touching the filesystem beyond its inputs; the `cmd_*` wrappers write the
//! outputs into `config.out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dbgl::analysis::{analyze_dataset, DecayReport};
use dbgl::data::{
    leave_variables_out, load_dir, read_split_manifest, save_dir, split, split_by_manifest, synthesize, Dataset,
    Episode, Splits, SPLITS_FILE,
};
use dbgl::diffcore::{GradcheckOptions, GradcheckReport};
use dbgl::model::{Dbgl, DbglConfig, Evaluation};
use dbgl::temporal::DecayKernel;
use log::info;

use crate::config::RunConfig;
use crate::report::{write_json, DatasetSummary, RunReport, SweepEntry, Timing, REPORT_FILE, REPORT_VERSION, TIMING_FILE};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const DECAY_TABLE_FILE: &str = "decay_table.csv";
pub const KW_FILE: &str = "kruskal_wallis.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

/// The full dataset named by the config: a directory when given, else the
/// synthetic generator.
pub fn load_source(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        Some(dir) => load_dir(dir, config.t_max).with_context(|| format!("loading dataset from {}", dir.display())),
        None => Ok(synthesize(&config.synthetic)?),
    }
}

/// Train/validation/test parts, following a `splits.csv` manifest when the
/// dataset directory has one, with the horizon fixed.
pub fn prepare_splits(config: &RunConfig) -> Result<Splits> {
    let data = load_source(config)?;
    let manifest = config.data.as_ref().map(|d| d.join(SPLITS_FILE)).filter(|p| p.exists());
    let mut splits = match manifest {
        Some(p) => split_by_manifest(&data, &read_split_manifest(&p)?)?,
        None => split(&data, &config.split, config.seed, config.split_unit)?,
    };
    match config.t_max {
        Some(t) => {
            splits.train.set_t_max(t)?;
            splits.val.set_t_max(t)?;
            splits.test.set_t_max(t)?;
        }
        None => splits.fit_t_max_to_train()?,
    }
    Ok(splits)
}

fn evaluate_splits(model: &Dbgl<f64>, parts: &[(&str, &Dataset)]) -> Result<BTreeMap<String, Evaluation>> {
    let mut out = BTreeMap::new();
    for (name, data) in parts {
        if !data.is_empty() {
            out.insert(name.to_string(), model.evaluate(data)?);
        }
    }
    Ok(out)
}

pub struct TrainRun {
    pub report: RunReport,
    pub model: Dbgl<f64>,
}

pub fn run_train(config: &RunConfig) -> Result<TrainRun> {
    let splits = prepare_splits(config)?;
    let summary = DatasetSummary::of(&splits);
    let (splits, stats) = if config.normalize {
        let (s, stats) = splits.normalized();
        (s, Some(stats))
    } else {
        (splits, None)
    };
    let (splits, leave_out) = match config.leave_out {
        Some(rate) => {
            let (s, lo) = leave_variables_out(&splits, rate, config.seed)?;
            (s, Some(lo))
        }
        None => (splits, None),
    };
    let model_config = DbglConfig {
        n_classes: config.model.n_classes.max(splits.train.n_classes),
        ..config.model.clone()
    };
    let flags = config.flags()?;
    let mut model = Dbgl::<f64>::new(model_config, flags, splits.train.n_vars())?;
    model.norm = stats;
    model.t_max = Some(splits.train.t_max);
    info!("training {} parameters on {} episodes", model.n_params(), splits.train.len());
    let history = model.fit(&splits.train, &splits.val)?;
    let metrics = evaluate_splits(
        &model,
        &[("train", &splits.train), ("val", &splits.val), ("test", &splits.test)],
    )?;
    let util_on = if splits.test.is_empty() { &splits.val } else { &splits.test };
    let report = RunReport {
        version: REPORT_VERSION,
        command: "train".into(),
        config: config.clone(),
        flags: model.flags,
        dataset: summary,
        leave_out,
        metrics,
        history: Some(history),
        codebook_utilization: model.codebook_utilization(util_on)?,
        sweep: Vec::new(),
    };
    Ok(TrainRun { report, model })
}

/// Checks that `config` asks for nothing the checkpoint cannot provide.
fn check_eval_flags(config: &RunConfig, model: &Dbgl<f64>) -> Result<()> {
    if !config.ablate.is_empty() && config.flags()? != model.flags {
        bail!(dbgl::Error::Compatibility(format!(
            "requested ablations {:?} differ from the checkpoint's {:?}",
            config.ablate, model.flags
        )));
    }
    Ok(())
}

/// Evaluates a trained model on every split, then once per leave-out rate.
pub fn run_eval(config: &RunConfig, model: &Dbgl<f64>, variables: &[String]) -> Result<RunReport> {
    check_eval_flags(config, model)?;
    let mut splits = prepare_splits(config)?;
    if splits.train.variables != variables {
        bail!(dbgl::Error::Compatibility(format!(
            "dataset variables {:?} differ from the checkpoint's {:?}",
            splits.train.variables, variables
        )));
    }
    if let Some(t) = model.t_max {
        splits.train.set_t_max(t)?;
        splits.val.set_t_max(t)?;
        splits.test.set_t_max(t)?;
    }
    let summary = DatasetSummary::of(&splits);
    let splits = match &model.norm {
        Some(stats) => Splits {
            train: splits.train.normalized(stats),
            val: splits.val.normalized(stats),
            test: splits.test.normalized(stats),
        },
        None => splits,
    };
    let metrics = evaluate_splits(
        model,
        &[("train", &splits.train), ("val", &splits.val), ("test", &splits.test)],
    )?;
    let mut sweep = Vec::new();
    for rate in config.leave_out_rates() {
        let (hidden, lo) = leave_variables_out(&splits, rate, config.seed)?;
        info!("leave-out {rate}: hiding {:?}", lo.hidden);
        sweep.push(SweepEntry {
            leave_out: lo,
            metrics: evaluate_splits(model, &[("val", &hidden.val), ("test", &hidden.test)])?,
        });
    }
    let util_on = if splits.test.is_empty() { &splits.val } else { &splits.test };
    Ok(RunReport {
        version: REPORT_VERSION,
        command: "eval".into(),
        config: config.clone(),
        flags: model.flags,
        dataset: summary,
        leave_out: None,
        metrics,
        history: None,
        codebook_utilization: model.codebook_utilization(util_on)?,
        sweep,
    })
}

pub fn run_analyze(config: &RunConfig) -> Result<DecayReport> {
    let data = load_source(config)?;
    Ok(analyze_dataset(&data, &config.analysis)?)
}

/// Two patients, three variables and four time steps each, with irregular
/// masks and uneven gaps.
pub fn gradcheck_batch() -> Result<Vec<Episode>> {
    let a = [
        (0.5, 0, 0.3),
        (0.5, 2, -1.1),
        (1.0, 1, 0.7),
        (2.5, 0, 0.9),
        (2.5, 1, -0.2),
        (6.0, 2, 1.4),
        (6.0, 0, -0.5),
    ];
    let b = [(0.2, 1, -0.4), (1.7, 0, 1.2), (1.7, 2, 0.1), (3.0, 1, 0.8), (4.5, 2, -0.9)];
    Ok(vec![
        Episode::from_triples("a", &a, 3, 1, 8.0)?,
        Episode::from_triples("b", &b, 3, 0, 8.0)?,
    ])
}

/// Finite-difference check of every parameter block at d = 8, K = 8, L = 2.
pub fn run_gradcheck(seed: u64, kernel: DecayKernel, corrupt_block: Option<String>) -> Result<GradcheckReport> {
    let config = DbglConfig {
        d: 8,
        codebook_size: 8,
        layers: 2,
        kernel,
        seed,
        ..Default::default()
    };
    let model = Dbgl::<f64>::new(config, Default::default(), 3)?;
    let batch = gradcheck_batch()?;
    let refs: Vec<&Episode> = batch.iter().collect();
    let opts = GradcheckOptions {
        corrupt_block,
        ..Default::default()
    };
    Ok(model.gradcheck(&refs, &opts)?)
}

fn ensure_out(config: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    Ok(&config.out)
}

fn write_timing(out: &Path, command: &str, start: Instant) -> Result<()> {
    write_json(
        &Timing {
            command: command.into(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
        &out.join(TIMING_FILE),
    )
}

/// Writes the generated dataset and a seeded split manifest.
pub fn cmd_synth(config: &RunConfig) -> Result<Dataset> {
    let data = synthesize(&config.synthetic)?;
    let splits = split(&data, &config.split, config.seed, config.split_unit)?;
    let out = ensure_out(config)?;
    save_dir(&data, Some(&splits), out)?;
    Ok(data)
}

pub fn cmd_train(config: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let run = run_train(config)?;
    let out = ensure_out(config)?;
    run.model.save(&out.join(CHECKPOINT_FILE), &run.report.dataset.variables)?;
    write_json(&run.report, &out.join(REPORT_FILE))?;
    write_timing(out, "train", start)?;
    Ok(run.report)
}

pub fn cmd_eval(config: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let Some(path) = &config.checkpoint else {
        bail!("eval needs a checkpoint");
    };
    let (model, variables) =
        Dbgl::<f64>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let report = run_eval(config, &model, &variables)?;
    let out = ensure_out(config)?;
    write_json(&report, &out.join(REPORT_FILE))?;
    write_timing(out, "eval", start)?;
    Ok(report)
}

pub fn cmd_analyze(config: &RunConfig) -> Result<DecayReport> {
    let report = run_analyze(config)?;
    let out = ensure_out(config)?;
    fs::write(out.join(DECAY_TABLE_FILE), report.table_csv())?;
    match report.kw_csv() {
        Some(kw) => fs::write(out.join(KW_FILE), kw)?,
        None => {
            let _ = fs::remove_file(out.join(KW_FILE));
        }
    }
    Ok(report)
}
