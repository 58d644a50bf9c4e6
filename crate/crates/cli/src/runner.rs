//! The three experiment protocols and the gen/train/eval/report commands
//! behind the command line.
//!
//! Each experiment fixes a grid: training settings (what the model sees x
//! what the loss measures), evaluation conditions (what the test inputs
//! look like), a primary metric, and a seed list. The surrogate setting is
//! always named "ours"; baselines keep their protocol names. Hyperparameter
//! defaults are sized for a small CPU and can be overridden per run through
//! the config file.

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::Config;
use crate::dataset::{
    generate, load_split, read_manifest, spec_from_config, spec_to_config, DatasetSpec, Split,
    MANIFEST_KEYS,
};
use crate::report::{
    read_eval_dir, render_table, summarize, summary_svg, write_eval_csv, write_summary_csv,
    EvalRow, Metric, ReportSpec,
};
use crate::{parallel_map, CliError, CliResult};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srgd_core::losses::{LossConfig, Similarity};
use srgd_core::metrics::{mean_dice, mean_tre, ndv};
use srgd_core::model::{derive_seed, ArchConfig, RegNet};
use srgd_core::optim::AdamConfig;
use srgd_core::synth::{Background, BiasSpec, Pair, PairSpec, PhantomSpec};
use srgd_core::trainer::{
    apply_input_policy, predict, train, HistoryRow, InputPolicy, SurrogateMode, TrainConfig,
    ValMetric,
};
use srgd_core::warp::{warp_image, Interp};
use std::fs;
use std::path::Path;

pub const EXPERIMENTS: [&str; 3] = ["artifact", "mask", "multimodal"];

/// One training configuration of an experiment's grid.
#[derive(Debug, Clone)]
pub struct Setting {
    pub name: String,
    pub input_policy: InputPolicy,
    pub surrogates: SurrogateMode,
    /// Input policy for validation-time model selection.
    pub val_policy: InputPolicy,
    pub similarity: Similarity,
    pub lambda: f64,
    pub w_tre: f64,
}

/// One test-time input condition.
#[derive(Debug, Clone)]
pub struct EvalCond {
    pub name: String,
    pub policy: InputPolicy,
    /// Rebuild the test split at this artifact exponent instead of reading
    /// the stored one.
    pub bias_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub settings: Vec<Setting>,
    pub conds: Vec<EvalCond>,
    pub metric: Metric,
    /// Label-based score reported on the validation split after training,
    /// for comparing hyperparameters. Checkpoint selection never uses it.
    pub val_accuracy: ValMetric,
    pub arch: ArchConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    pub patience: usize,
    pub val_every: usize,
    pub seeds: Vec<u64>,
    pub hist_bins: usize,
}

/// Config keys shared by every command; per-setting loss weights come on
/// top as `lambda.<setting>`.
const RUN_KEYS: &[&str] =
    &["steps", "lr", "patience", "val_every", "widths", "seeds", "w_tre", "hist_bins"];

const LAMBDA_KEYS: &[&str] = &[
    "lambda.w_ic",
    "lambda.wo_ic",
    "lambda.ours",
    "lambda.masked",
    "lambda.unmasked",
    "lambda.random",
    "lambda.ncc",
    "lambda.cr",
    "lambda.mi",
];

/// Everything a config file may contain, across all commands.
pub fn known_config_keys() -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = MANIFEST_KEYS
        .iter()
        .copied()
        .filter(|k| *k != "experiment" && *k != "seed")
        .collect();
    keys.extend_from_slice(RUN_KEYS);
    keys.extend_from_slice(LAMBDA_KEYS);
    keys
}

fn setting(
    name: &str,
    input_policy: InputPolicy,
    surrogates: SurrogateMode,
    val_policy: InputPolicy,
    similarity: Similarity,
    lambda: f64,
    w_tre: f64,
) -> Setting {
    Setting {
        name: name.into(),
        input_policy,
        surrogates,
        val_policy,
        similarity,
        lambda,
        w_tre,
    }
}

fn cond(name: &str, policy: InputPolicy, bias_scale: Option<f64>) -> EvalCond {
    EvalCond { name: name.into(), policy, bias_scale }
}

/// Builds an experiment with its defaults, then applies config overrides.
pub fn experiment(name: &str, cfg: &Config) -> CliResult<Experiment> {
    cfg.validate_keys(&known_config_keys())?;
    use InputPolicy::{Clean, Masked, MixedPair, RandomMix, Raw};
    use Similarity::{Cr, Mi, Mse, Ncc};
    use SurrogateMode::{BiasCorrected, Identity, PairedModality};
    // Desk-scale defaults. The regularizer weights are calibrated to the
    // 32x32 phantoms: a diffusion term of the ground-truth field is ~0.04,
    // so MSE (gains ~0.01) needs a much smaller lambda than NCC (gains
    // ~0.3) for the image term to stay in charge.
    let (settings, conds, metric, val_metric, w_tre) = match name {
        "artifact" => (
            vec![
                setting("w_ic", Clean, Identity, Clean, Mse, 0.05, 0.0),
                setting("wo_ic", Raw, Identity, Raw, Mse, 0.05, 0.0),
                setting("ours", Raw, BiasCorrected, Raw, Mse, 0.05, 0.0),
            ],
            vec![
                cond("x0", Raw, Some(0.0)),
                cond("x1", Raw, Some(1.0)),
                cond("x2", Raw, Some(2.0)),
                cond("x3", Raw, Some(3.0)),
            ],
            Metric::Dsc,
            ValMetric::Dice,
            0.0,
        ),
        "mask" => (
            vec![
                setting("masked", Masked, Identity, Masked, Ncc, 1.0, 0.0),
                setting("unmasked", Raw, Identity, Raw, Ncc, 1.0, 0.0),
                setting("random", RandomMix, Identity, RandomMix, Ncc, 1.0, 0.0),
                setting("ours", RandomMix, SurrogateMode::Masked, RandomMix, Ncc, 1.0, 0.0),
            ],
            vec![
                cond("masked", Masked, None),
                cond("unmasked", Raw, None),
                cond("mixed", MixedPair, None),
            ],
            Metric::Tre,
            ValMetric::Tre,
            0.1,
        ),
        "multimodal" => (
            vec![
                setting("ncc", Raw, Identity, Raw, Ncc, 1.0, 0.0),
                setting("cr", Raw, Identity, Raw, Cr, 5.0, 0.0),
                setting("mi", Raw, Identity, Raw, Mi, 5.0, 0.0),
                setting("ours", Raw, PairedModality, Raw, Ncc, 1.0, 0.0),
            ],
            vec![cond("standard", Raw, None)],
            Metric::Dsc,
            ValMetric::Dice,
            0.0,
        ),
        other => {
            return Err(CliError::Usage(format!(
                "unknown experiment '{}' (expected one of {:?})",
                other, EXPERIMENTS
            )))
        }
    };
    let mut settings = settings;
    for s in &mut settings {
        s.lambda = cfg.get_f64(&format!("lambda.{}", s.name), s.lambda)?;
        s.w_tre = cfg.get_f64("w_tre", w_tre)?;
    }
    let widths = cfg.get_list("widths", &[8usize, 16])?;
    let seeds = cfg.get_list("seeds", &[0u64, 1, 2])?;
    if seeds.len() < 2 {
        return Err(CliError::Usage(
            "at least two seeds are required for significance testing".into(),
        ));
    }
    let steps = cfg.get_usize("steps", 600)?;
    Ok(Experiment {
        name: name.into(),
        settings,
        conds,
        metric,
        val_metric,
        arch: ArchConfig { levels: widths.len(), widths, leaky_slope: 0.2 },
        adam: AdamConfig::with_lr(cfg.get_f64("lr", 2e-3)?),
        steps,
        patience: cfg.get_usize("patience", steps)?,
        val_every: cfg.get_usize("val_every", 50)?,
        seeds,
        // 16 bins, not the library's 32: a 32x32 image feeds 1024 pixels
        // into the joint histogram, and 16x16 cells keep ~4 samples each.
        hist_bins: cfg.get_usize("hist_bins", 16)?,
    })
}

impl Experiment {
    pub fn setting(&self, name: &str) -> CliResult<&Setting> {
        self.settings.iter().find(|s| s.name == name).ok_or_else(|| {
            let names: Vec<&str> = self.settings.iter().map(|s| s.name.as_str()).collect();
            CliError::Usage(format!(
                "experiment '{}' has no setting '{}' (expected one of {:?})",
                self.name, name, names
            ))
        })
    }

    pub fn train_config(&self, setting: &Setting, seed: u64) -> TrainConfig {
        let mut loss = LossConfig::with_similarity(setting.similarity, setting.lambda);
        loss.mi_bins = self.hist_bins;
        loss.cr_bins = self.hist_bins;
        TrainConfig {
            arch: self.arch.clone(),
            loss,
            input_policy: setting.input_policy,
            surrogates: setting.surrogates,
            w_tre: setting.w_tre,
            adam: self.adam,
            max_steps: self.steps,
            patience: self.patience,
            val_every: self.val_every,
            val_metric: self.val_metric,
            val_policy: setting.val_policy,
            seed,
        }
    }

    pub fn report_spec(&self) -> ReportSpec {
        ReportSpec {
            experiment: self.name.clone(),
            settings: self.settings.iter().map(|s| s.name.clone()).collect(),
            ours: "ours".into(),
            conds: self.conds.iter().map(|c| c.name.clone()).collect(),
            metric: self.metric,
        }
    }
}

/// Default dataset of an experiment; `gen` overlays config keys on top.
pub fn default_dataset(experiment: &str, seed: u64) -> CliResult<DatasetSpec> {
    let pair = match experiment {
        "artifact" => PairSpec {
            bias: Some(BiasSpec::default()),
            bias_scale: 1.0,
            ..Default::default()
        },
        "mask" => PairSpec {
            phantom: PhantomSpec {
                background: Background::Texture { amplitude: 0.4 },
                ..Default::default()
            },
            ..Default::default()
        },
        "multimodal" => PairSpec { moving_modality: true, ..Default::default() },
        other => {
            return Err(CliError::Usage(format!(
                "unknown experiment '{}' (expected one of {:?})",
                other, EXPERIMENTS
            )))
        }
    };
    Ok(DatasetSpec {
        experiment: experiment.into(),
        pair,
        n_train: 40,
        n_val: 8,
        n_test: 16,
        seed,
    })
}

/// One (setting, seed) cell of the training grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunId {
    pub setting: String,
    pub seed: u64,
}

pub fn run_stem(experiment: &str, setting: &str, seed: u64) -> String {
    format!("{}_{}_s{}", experiment, setting, seed)
}

/// Expands optional setting/seed filters into the run list; filters must
/// name members of the experiment's grid.
pub fn resolve_runs(
    exp: &Experiment,
    settings: &[String],
    seeds: &[u64],
) -> CliResult<Vec<RunId>> {
    for s in settings {
        exp.setting(s)?;
    }
    for s in seeds {
        if !exp.seeds.contains(s) {
            return Err(CliError::Usage(format!(
                "seed {} is not in the experiment's seed list {:?}",
                s, exp.seeds
            )));
        }
    }
    let chosen_settings: Vec<String> = if settings.is_empty() {
        exp.settings.iter().map(|s| s.name.clone()).collect()
    } else {
        settings.to_vec()
    };
    let chosen_seeds: Vec<u64> = if seeds.is_empty() { exp.seeds.clone() } else { seeds.to_vec() };
    let mut runs = Vec::new();
    for setting in &chosen_settings {
        for &seed in &chosen_seeds {
            runs.push(RunId { setting: setting.clone(), seed });
        }
    }
    Ok(runs)
}

/// Writes a dataset built from the experiment default plus config
/// overrides of the manifest keys.
pub fn cmd_gen(
    experiment: &str,
    out: &Path,
    seed: u64,
    cfg: &Config,
    force: bool,
    workers: usize,
) -> CliResult<DatasetSpec> {
    cfg.validate_keys(&known_config_keys())?;
    let mut merged = spec_to_config(&default_dataset(experiment, seed)?);
    for (k, v) in cfg.entries() {
        if MANIFEST_KEYS.contains(&k) {
            merged.set(k, v);
        }
    }
    let spec = spec_from_config(&merged)?;
    generate(out, &spec, force, workers)?;
    Ok(spec)
}

fn write_history(path: &Path, history: &[HistoryRow]) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    wtr.write_record(["step", "train_loss", "val_metric"])?;
    for row in history {
        wtr.write_record([
            row.step.to_string(),
            row.loss.to_string(),
            row.val.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(CliError::from)?;
    Ok(())
}

/// Trains the requested grid cells in parallel; each run writes a
/// checkpoint and a history CSV. Returns one status line per run.
pub fn cmd_train(
    exp: &Experiment,
    data: &Path,
    out: &Path,
    runs: &[RunId],
    workers: usize,
) -> CliResult<Vec<String>> {
    let train_pairs = load_split(data, Split::Train)?;
    let val_pairs = load_split(data, Split::Val)?;
    fs::create_dir_all(out)?;
    parallel_map(runs.to_vec(), workers, |run| {
        let setting = exp.setting(&run.setting)?;
        let cfg = exp.train_config(setting, run.seed);
        let outcome = train(&train_pairs, &val_pairs, &cfg)?;
        let stem = run_stem(&exp.name, &setting.name, run.seed);
        let meta = CheckpointMeta {
            experiment: exp.name.clone(),
            setting: setting.name.clone(),
            seed: run.seed,
        };
        save_checkpoint(&out.join(format!("{}.ckpt", stem)), &outcome.net, &meta)?;
        write_history(&out.join(format!("{}_history.csv", stem)), &outcome.history)?;
        Ok(format!(
            "{}: best val {} {:.4} at step {} of {}",
            stem,
            match cfg.val_metric {
                ValMetric::Dice => "dice",
                ValMetric::Tre => "tre",
            },
            outcome.best_val,
            outcome.best_step,
            outcome.steps_run
        ))
    })
}

fn eval_pair(
    net: &RegNet,
    meta: &CheckpointMeta,
    cond: &EvalCond,
    pair: &Pair,
    pair_index: usize,
) -> CliResult<EvalRow> {
    // Eval conditions are deterministic policies; the rng is only consumed
    // by RandomMix, which never appears at test time.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(meta.seed, 0xE7A1));
    let (fixed, moving) = apply_input_policy(pair, cond.policy, &mut rng)?;
    let disp = predict(net, &fixed, &moving)?;
    let warped_labels = warp_image(&pair.moving.labels, &disp, Interp::Nearest)?;
    Ok(EvalRow {
        experiment: meta.experiment.clone(),
        setting: meta.setting.clone(),
        seed: meta.seed,
        cond: cond.name.clone(),
        pair: pair_index,
        dsc: mean_dice(&pair.fixed.labels, &warped_labels, pair.num_labels)?,
        tre: mean_tre(&disp, &pair.fixed_landmarks, &pair.moving_landmarks, (1.0, 1.0))?,
        ndv: ndv(&disp)?,
    })
}

/// Scores each requested checkpoint on every evaluation condition of the
/// experiment, one eval CSV per checkpoint, pairs in parallel.
pub fn cmd_eval(
    exp: &Experiment,
    data: &Path,
    out: &Path,
    runs: &[RunId],
    workers: usize,
) -> CliResult<Vec<String>> {
    let spec = read_manifest(data)?;
    let mut cond_pairs: Vec<Vec<Pair>> = Vec::with_capacity(exp.conds.len());
    for cond in &exp.conds {
        cond_pairs.push(match cond.bias_scale {
            Some(s) => spec.build_split(Split::Test, Some(s))?,
            None => load_split(data, Split::Test)?,
        });
    }
    let mut logs = Vec::new();
    for run in runs {
        let stem = run_stem(&exp.name, &run.setting, run.seed);
        let path = out.join(format!("{}.ckpt", stem));
        let (net, meta) = load_checkpoint(&path)?;
        if meta.experiment != exp.name || meta.setting != run.setting || meta.seed != run.seed {
            return Err(CliError::Data(format!(
                "{}: checkpoint labeled {}/{}/s{}, expected {}/{}/s{}",
                path.display(),
                meta.experiment,
                meta.setting,
                meta.seed,
                exp.name,
                run.setting,
                run.seed
            )));
        }
        let mut items = Vec::new();
        for (ci, pairs) in cond_pairs.iter().enumerate() {
            for pi in 0..pairs.len() {
                items.push((ci, pi));
            }
        }
        let rows = parallel_map(items, workers, |(ci, pi)| {
            eval_pair(&net, &meta, &exp.conds[ci], &cond_pairs[ci][pi], pi)
        })?;
        write_eval_csv(&out.join(format!("{}_eval.csv", stem)), &rows)?;
        logs.push(format!("{}: {} rows over {} conditions", stem, rows.len(), exp.conds.len()));
    }
    Ok(logs)
}

/// Builds the summary CSV, the box-plot SVG, and a printable table from
/// the eval CSVs in `dir`. Missing settings reduce to warnings.
pub fn cmd_report(exp: &Experiment, dir: &Path) -> CliResult<(String, Vec<String>)> {
    let rows = read_eval_dir(dir, &exp.name)?;
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "no '{}' eval rows found under {}",
            exp.name,
            dir.display()
        )));
    }
    let rspec = exp.report_spec();
    let (summary, warnings) = summarize(&rspec, &rows)?;
    write_summary_csv(&dir.join(format!("{}_summary.csv", exp.name)), &summary)?;
    fs::write(
        dir.join(format!("{}_boxplot.svg", exp.name)),
        summary_svg(&rspec, &rows, &summary),
    )?;
    Ok((render_table(&summary), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiments_construct_with_defaults() {
        let cfg = Config::default();
        for name in EXPERIMENTS {
            let exp = experiment(name, &cfg).unwrap();
            assert_eq!(exp.seeds, vec![0, 1, 2]);
            assert!(exp.settings.iter().any(|s| s.name == "ours"));
            assert!(!exp.conds.is_empty());
        }
        assert!(experiment("nope", &cfg).is_err());
    }

    #[test]
    fn ours_settings_wire_surrogates_to_the_protocol() {
        let cfg = Config::default();
        let artifact = experiment("artifact", &cfg).unwrap();
        let ours = artifact.setting("ours").unwrap();
        assert_eq!(ours.input_policy, InputPolicy::Raw);
        assert_eq!(ours.surrogates, SurrogateMode::BiasCorrected);

        let mask = experiment("mask", &cfg).unwrap();
        let ours = mask.setting("ours").unwrap();
        assert_eq!(ours.input_policy, InputPolicy::RandomMix);
        assert_eq!(ours.surrogates, SurrogateMode::Masked);
        assert!(ours.w_tre > 0.0);

        let multi = experiment("multimodal", &cfg).unwrap();
        let ours = multi.setting("ours").unwrap();
        assert_eq!(ours.surrogates, SurrogateMode::PairedModality);
        assert_eq!(ours.similarity, Similarity::Ncc);
        assert_eq!(multi.setting("mi").unwrap().similarity, Similarity::Mi);
    }

    #[test]
    fn config_overrides_apply_and_bad_keys_fail() {
        let mut cfg = Config::default();
        cfg.set("steps", "12");
        cfg.set("lambda.ncc", "2.5");
        cfg.set("widths", "4");
        let exp = experiment("multimodal", &cfg).unwrap();
        assert_eq!(exp.steps, 12);
        assert_eq!(exp.setting("ncc").unwrap().lambda, 2.5);
        assert_eq!(exp.arch.widths, vec![4]);
        assert_eq!(exp.arch.levels, 1);

        let mut bad = Config::default();
        bad.set("step", "12");
        assert!(experiment("multimodal", &bad).is_err());

        let mut one_seed = Config::default();
        one_seed.set("seeds", "5");
        assert!(experiment("multimodal", &one_seed).is_err());
    }

    #[test]
    fn run_filters_expand_and_reject_unknowns() {
        let exp = experiment("artifact", &Config::default()).unwrap();
        let all = resolve_runs(&exp, &[], &[]).unwrap();
        assert_eq!(all.len(), 9);
        let some = resolve_runs(&exp, &["ours".into()], &[1]).unwrap();
        assert_eq!(some, vec![RunId { setting: "ours".into(), seed: 1 }]);
        assert!(resolve_runs(&exp, &["nope".into()], &[]).is_err());
        assert!(resolve_runs(&exp, &[], &[9]).is_err());
    }

    #[test]
    fn gen_train_eval_report_round_trip_in_miniature() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");

        let mut cfg = Config::default();
        cfg.set("data.h", "16");
        cfg.set("data.w", "16");
        cfg.set("split.train", "2");
        cfg.set("split.val", "1");
        cfg.set("split.test", "2");
        cfg.set("steps", "2");
        cfg.set("val_every", "1");
        cfg.set("widths", "4");
        cfg.set("seeds", "0,1");

        let spec = cmd_gen("multimodal", &data, 5, &cfg, false, 1).unwrap();
        assert_eq!(spec.pair.phantom.h, 16);
        assert!(spec.pair.moving_modality);

        let exp = experiment("multimodal", &cfg).unwrap();
        let runs = resolve_runs(&exp, &["ncc".into(), "ours".into()], &[0]).unwrap();
        let logs = cmd_train(&exp, &data, &out, &runs, 1).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(out.join("multimodal_ncc_s0.ckpt").exists());
        assert!(out.join("multimodal_ours_s0_history.csv").exists());

        let logs = cmd_eval(&exp, &data, &out, &runs, 1).unwrap();
        assert_eq!(logs.len(), 2);
        let rows = read_eval_dir(&out, "multimodal").unwrap();
        assert_eq!(rows.len(), 2 * 2);

        let (table, warnings) = cmd_report(&exp, &out).unwrap();
        assert!(table.contains("standard"));
        // cr and mi never trained: the report degrades to warnings.
        assert!(warnings.iter().any(|w| w.contains("'cr'")));
        assert!(warnings.iter().any(|w| w.contains("'mi'")));
        assert!(out.join("multimodal_summary.csv").exists());
        assert!(out.join("multimodal_boxplot.svg").exists());

        // The whole pipeline is deterministic: re-running training yields
        // a byte-identical checkpoint.
        let before = std::fs::read(out.join("multimodal_ncc_s0.ckpt")).unwrap();
        cmd_train(&exp, &data, &out, &runs, 1).unwrap();
        let after = std::fs::read(out.join("multimodal_ncc_s0.ckpt")).unwrap();
        assert_eq!(before, after);
    }
}
