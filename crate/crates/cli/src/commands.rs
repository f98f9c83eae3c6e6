use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use evop_core::checkpoint::{load_checkpoint, load_operator, save_checkpoint, save_operator};
use evop_core::dynamics::{
    load_trajectory, lorenz63_trajectory, lorenz_initial_condition, make_pairs, ou_trajectory, save_trajectory,
    split_with_gaps, state_windows, TrajectoryFormat,
};
use evop_core::interpret::{build_descriptors, coefficient_report, default_lambda_grid, lasso_path};
use evop_core::objective::vamp2_score;
use evop_core::operator::DEFAULT_RIDGE;
use evop_core::spectral::{self, forecast_rmse, linls_baseline, write_eigenfunction_csv, write_spectrum_csv, ForecastMetrics};
use evop_core::training::{finalize_operator, FinalizeMode, PairSettings};
use evop_core::{Checkpoint, Covariances, Encoder, FeatureMap, InputScaling, PairDataset, Trainer, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, FileFormat, FinalizeSource, InterpretSection, ModelChoice, RunConfig, SpectralSection, System};

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub start: u64,
    pub len: usize,
}

/// Written next to generated data so later stages know what they are reading.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub system: System,
    pub seed: u64,
    pub n_steps: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub params: BTreeMap<String, f64>,
    pub burn_in: usize,
    pub gap: usize,
    pub format: FileFormat,
    pub trajectory: String,
    pub splits: Vec<SplitEntry>,
}

fn core_format(f: FileFormat) -> TrajectoryFormat {
    match f {
        FileFormat::Csv => TrajectoryFormat::Csv,
        FileFormat::Binary => TrajectoryFormat::Binary,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_traj(path: &Path) -> anyhow::Result<Trajectory> {
    load_trajectory(path, TrajectoryFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

pub fn generate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let d = &cfg.dynamics;
    let seed = cfg.dynamics_seed();
    let (traj, x0, params) = match d.system {
        System::Lorenz => {
            let x0 = match &d.x0 {
                Some(v) => [v[0], v[1], v[2]],
                None => lorenz_initial_condition(seed),
            };
            let p = d.lorenz;
            let params = BTreeMap::from([("sigma".into(), p.sigma), ("rho".into(), p.rho), ("beta".into(), p.beta)]);
            (lorenz63_trajectory(d.n_steps, d.dt, x0, p, seed)?, x0.to_vec(), params)
        }
        System::Ou => {
            let x0 = d.x0.as_ref().map_or(0.0, |v| v[0]);
            let p = d.ou;
            let params = BTreeMap::from([("theta".into(), p.theta), ("sigma".into(), p.sigma)]);
            (ou_trajectory(d.n_steps, d.dt, p, x0, seed)?, vec![x0], params)
        }
    };
    let ext = d.format.extension();
    let fmt = core_format(d.format);
    let traj_file = format!("trajectory.{ext}");
    save_trajectory(&traj, out.join(&traj_file), fmt)?;
    let parts = split_with_gaps(&traj, d.burn_in, &d.splits, d.gap)?;
    let mut splits = Vec::new();
    for (name, part) in SPLIT_NAMES.iter().zip(&parts) {
        let file = format!("{name}.{ext}");
        save_trajectory(part, out.join(&file), fmt)?;
        splits.push(SplitEntry {
            name: name.to_string(),
            file,
            start: part.start_index(),
            len: part.len(),
        });
    }
    let manifest = Manifest {
        system: d.system,
        seed,
        n_steps: d.n_steps,
        dt: d.dt,
        x0,
        params,
        burn_in: d.burn_in,
        gap: d.gap,
        format: d.format,
        trajectory: traj_file,
        splits,
    };
    write_json(&manifest, &out.join("manifest.json"))?;
    log::info!("wrote {} states and {} splits to {}", traj.len(), parts.len(), out.display());
    Ok(())
}

fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn split_path(dir: &Path, manifest: &Manifest, name: &str) -> anyhow::Result<PathBuf> {
    let entry = manifest
        .splits
        .iter()
        .find(|s| s.name == name)
        .with_context(|| format!("manifest in {} has no `{name}` split", dir.display()))?;
    Ok(dir.join(&entry.file))
}

/// A checkpoint holding the best-validation model in place of the last one.
fn best_checkpoint(last: &Checkpoint) -> Checkpoint {
    let mut ckpt = last.clone();
    if let Some(best) = &last.best {
        ckpt.encoder = best.encoder.clone();
        ckpt.predictor = best.predictor.clone();
        ckpt.buffers = best.buffers.clone();
    }
    ckpt
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    report: &'a evop_core::TrainReport,
    operator_model: ModelChoice,
    operator_source: FinalizeSource,
    operator_dim: usize,
    ridge: f64,
    lag_time: f64,
}

pub fn train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let manifest = read_manifest(data)?;
    let train_traj = load_traj(&split_path(data, &manifest, "train")?)?;
    let val_traj = load_traj(&split_path(data, &manifest, "val")?)?;

    let (mut trainer, settings) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let settings = ckpt.pairs.unwrap_or(PairSettings {
                lag: cfg.pairs.lag,
                history: cfg.pairs.history,
                dt: train_traj.dt(),
            });
            let trainer = Trainer::from_checkpoint(ckpt)?;
            log::info!("resuming after epoch {}", trainer.epoch());
            (trainer, settings)
        }
        None => {
            let settings = PairSettings {
                lag: cfg.pairs.lag,
                history: cfg.pairs.history,
                dt: train_traj.dt(),
            };
            let input_dim = train_traj.dim() * (settings.history + 1);
            let mut enc_cfg = cfg.encoder.build(input_dim, cfg.seed);
            if cfg.encoder.standardize {
                let (windows, _) = state_windows(&train_traj, settings.history)?;
                enc_cfg.input_scaling = Some(InputScaling::fit(&windows)?);
            }
            let n_train = train_traj.len().saturating_sub(settings.lag + settings.history);
            let (encoder, predictor) = Encoder::initialized(enc_cfg)?;
            let trainer = Trainer::new(encoder, predictor, cfg.training.clone(), n_train)?;
            (trainer, settings)
        }
    };
    trainer.pairs = Some(settings);
    let train_pairs = make_pairs(&train_traj, settings.lag, settings.history)?;
    let val_pairs = make_pairs(&val_traj, settings.lag, settings.history)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    let last_path = out.join("checkpoint_last.json");
    while !trainer.is_finished() {
        let record = trainer.run_epoch(&train_pairs, Some(&val_pairs))?.clone();
        serde_json::to_writer(&mut metrics, &record)?;
        writeln!(metrics)?;
        metrics.flush()?;
        save_checkpoint(&trainer.checkpoint(), &last_path)?;
        log::info!(
            "epoch {:>4}  loss {:.6}  val_vamp2 {}  lr {:.3e}",
            record.epoch,
            record.train_loss,
            record.val_vamp2.map_or("-".into(), |v| format!("{v:.5}")),
            record.lr
        );
    }

    let last = trainer.checkpoint();
    save_checkpoint(&last, &last_path)?;
    let best = best_checkpoint(&last);
    let best_path = out.join("checkpoint_best.json");
    save_checkpoint(&best, &best_path)?;

    let (chosen, chosen_path) = match cfg.operator.model {
        ModelChoice::Best => (&best, &best_path),
        ModelChoice::Last => (&last, &last_path),
    };
    let lag_time = settings.lag_time();
    if cfg.operator.source == FinalizeSource::Buffers
        && cfg.operator.model == ModelChoice::Best
        && last.report.best_epoch.is_some_and(|b| b < last.epoch)
    {
        // buffers average features over the steps before the snapshot, while the weights were still moving
        log::warn!("buffers of the epoch-{} snapshot lag its weights; full_pass is consistent", last.report.best_epoch.unwrap_or(0));
    }
    let mode = match cfg.operator.source {
        FinalizeSource::Buffers => FinalizeMode::Buffers,
        FinalizeSource::FullPass => FinalizeMode::FullPass {
            pairs: &train_pairs,
            encoder: &chosen.encoder,
        },
    };
    let model = finalize_operator(&chosen.buffers, cfg.operator.ridge, lag_time, mode)?;
    save_operator(&model, out.join("operator.json"))?;

    let mut report = last.report.clone();
    report.checkpoint_path = Some(chosen_path.display().to_string());
    write_json(
        &TrainSummary {
            report: &report,
            operator_model: cfg.operator.model,
            operator_source: cfg.operator.source,
            operator_dim: model.dim(),
            ridge: model.ridge,
            lag_time,
        },
        &out.join("report.json"),
    )?;
    log::info!("operator ({}x{}) written to {}", model.dim(), model.dim(), out.display());
    Ok(())
}

struct LoadedModel {
    operator: evop_core::EvolutionOperatorModel,
    encoder: Encoder,
    settings: PairSettings,
}

fn load_model(operator: &Path, checkpoint: &Path, data_dt: f64) -> anyhow::Result<LoadedModel> {
    let operator_model = load_operator(operator).with_context(|| format!("loading operator {}", operator.display()))?;
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let encoder = Encoder::new(ckpt.encoder.config, ckpt.encoder.params)?;
    if operator_model.dim() != encoder.output_dim() {
        bail!(
            "operator is {0}x{0} but the checkpoint encoder has {1} features",
            operator_model.dim(),
            encoder.output_dim()
        );
    }
    let settings = ckpt.pairs.context("checkpoint does not record its lag/history settings")?;
    if (settings.dt - data_dt).abs() > 1e-12 * settings.dt.abs() {
        log::warn!("data dt {data_dt} differs from the training dt {}", settings.dt);
    }
    Ok(LoadedModel {
        operator: operator_model,
        encoder,
        settings,
    })
}

#[derive(Debug, Serialize)]
struct BaselineMetrics {
    rmse: ForecastMetrics,
    /// Aggregate RMSE of the learned model divided by the baseline's.
    rmse_ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvaluationMetrics {
    n_pairs: usize,
    lag: usize,
    history: usize,
    lag_time: f64,
    /// Absent when the encoder has no raw-state passthrough to forecast.
    rmse: Option<ForecastMetrics>,
    vamp2: f64,
    linls: Option<BaselineMetrics>,
}

pub fn evaluate(
    cfg: &RunConfig,
    operator: &Path,
    checkpoint: &Path,
    data: &Path,
    baseline_data: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let traj = load_traj(data)?;
    let m = load_model(operator, checkpoint, traj.dt())?;
    let pairs = make_pairs(&traj, m.settings.lag, m.settings.history)?;
    let rmse = if m.encoder.state_slots().is_some() {
        Some(forecast_rmse(&m.operator, &m.encoder, &pairs)?)
    } else {
        log::warn!("encoder has no raw-state features; skipping state RMSE");
        None
    };
    let vamp2 = test_vamp2(&m.encoder, &pairs)?;
    let linls = match baseline_data {
        Some(path) => {
            let base_traj = load_traj(path)?;
            let base_pairs = make_pairs(&base_traj, m.settings.lag, m.settings.history)?;
            let (model, features) = linls_baseline(&base_pairs, cfg.operator.baseline_ridge)?;
            let base = forecast_rmse(&model, &features, &pairs)?;
            let rmse_ratio = rmse.as_ref().map(|r| r.aggregate / base.aggregate);
            Some(BaselineMetrics { rmse: base, rmse_ratio })
        }
        None => None,
    };
    let metrics = EvaluationMetrics {
        n_pairs: pairs.len(),
        lag: m.settings.lag,
        history: m.settings.history,
        lag_time: m.operator.lag_time,
        rmse,
        vamp2,
        linls,
    };
    write_json(&metrics, &out.join("metrics.json"))?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn test_vamp2(encoder: &Encoder, pairs: &PairDataset) -> anyhow::Result<f64> {
    let zx = encoder.embed_batch(&pairs.x_matrix())?;
    let zy = encoder.embed_batch(&pairs.y_matrix())?;
    let c = Covariances::from_features(&zx, &zy)?;
    Ok(vamp2_score(&c.cx, &c.cxy, &c.cy, DEFAULT_RIDGE)?)
}

pub fn spectrum(section: &SpectralSection, operator: &Path, checkpoint: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let traj = load_traj(data)?;
    let m = load_model(operator, checkpoint, traj.dt())?;
    let decomp = spectral::eig(&m.operator.matrix, m.operator.lag_time)?;
    let kept = decomp.filter(section.min_decorrelation)?;
    if kept.len() < decomp.len() {
        log::info!(
            "dropped {} modes with decorrelation time below {}",
            decomp.len() - kept.len(),
            section.min_decorrelation
        );
    }
    let rows = kept.spectrum_rows();
    let mut csv = BufWriter::new(File::create(out.join("spectrum.csv"))?);
    write_spectrum_csv(&rows, &mut csv)?;
    csv.flush()?;

    let n_modes = section.n_modes.unwrap_or(kept.len()).min(kept.len());
    if n_modes > 0 {
        let (windows, times) = state_windows(&traj, m.settings.history)?;
        let z = m.encoder.embed_batch(&windows)?;
        let psi = kept.select(&(0..n_modes).collect::<Vec<_>>()).eigenfunctions(&z)?;
        for (k, row) in rows.iter().take(n_modes).enumerate() {
            let values: Vec<_> = psi.column(k).iter().copied().collect();
            write_eigenfunction_csv(&times, &values, &out.join(format!("eigenfunction_{}.csv", row.idx)))?;
        }
    }
    log::info!("{} modes written to {}", rows.len(), out.display());
    Ok(())
}

/// Reads `time_index,re,im` rows.
fn read_eigenfunction(path: &Path) -> anyhow::Result<Vec<(u64, f64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("time_index,re,im") => {}
        other => bail!("{}: expected header `time_index,re,im`, found {other:?}", path.display()),
    }
    lines
        .enumerate()
        .map(|(r, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                bail!("{}: row {r}: expected 3 columns", path.display());
            }
            let parse = |s: &str| s.parse::<f64>().with_context(|| format!("{}: row {r}: bad number `{s}`", path.display()));
            Ok((f[0].parse()?, parse(f[1])?, parse(f[2])?))
        })
        .collect()
}

pub fn interpret(section: &InterpretSection, eigenfunction: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let traj = load_traj(data)?;
    let series = read_eigenfunction(eigenfunction)?;
    if series.is_empty() {
        bail!("{} holds no samples", eigenfunction.display());
    }
    let start = traj.start_index();
    let mut states = evop_core::DMatrix::zeros(series.len(), traj.dim());
    let mut target = Vec::with_capacity(series.len());
    for (r, (t, re, im)) in series.iter().enumerate() {
        let i = t
            .checked_sub(start)
            .map(|i| i as usize)
            .filter(|&i| i < traj.len())
            .with_context(|| format!("time index {t} is outside the trajectory ({start}..{})", start + traj.len() as u64))?;
        states.row_mut(r).copy_from_slice(traj.state(i));
        target.push(if section.modulus { re.hypot(*im) } else { *re });
    }
    if section.descriptors.is_empty() {
        return Err(ConfigError("key `interpret.descriptors`: at least one descriptor is required".into()).into());
    }
    let lib = build_descriptors(&states, &section.descriptors)?;
    let grid = default_lambda_grid(&lib, &target, section.n_lambdas, section.lambda_ratio)?;
    let lambdas = match section.lambda {
        Some(l) if !grid.iter().any(|g| (g - l).abs() <= 1e-12 * l.abs()) => {
            let mut all = grid.clone();
            all.push(l);
            all.sort_by(|a, b| b.total_cmp(a));
            all.dedup();
            all
        }
        _ => grid,
    };
    let path = lasso_path(&lib, &target, &lambdas)?;
    let mut csv = BufWriter::new(File::create(out.join("lasso_path.csv"))?);
    path.write_csv(&mut csv)?;
    csv.flush()?;
    let chosen = section.lambda.unwrap_or_else(|| path.select_lambda(0.05));
    let report = coefficient_report(&path, &lib, chosen)?;
    write_json(&report, &out.join("coefficients.json"))?;
    for c in &report.normalized {
        println!("{}, {:.3}", c.name, c.coefficient);
    }
    Ok(())
}
