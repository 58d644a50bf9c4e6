//! Datasets on disk: a manifest plus one directory of grids per pair.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.txt
//! train/pair_0000/{fixed,moving}_{image,clean,labels,mask}.srgd
//! train/pair_0000/gt_disp.srgd
//! train/pair_0000/landmarks.csv
//! train/pair_0000/{fixed,moving}_image.pgm     (eyeball copies)
//! val/...  test/...
//! ```
//!
//! The manifest records every generation parameter, so any split can be
//! regenerated bit-identically; the artifact experiment leans on this to
//! rebuild its test pairs at eval-time bias scales the stored grids never
//! saw. Labels and masks are stored with the u8 dtype, everything else f64.

use crate::config::Config;
use crate::gridfile::{read_grid, write_grid, write_pgm, Dtype};
use crate::{parallel_map, CliError, CliResult};
use srgd_core::model::derive_seed;
use srgd_core::synth::{
    make_dataset, Background, BiasSpec, DeformSpec, Pair, PairSpec, PhantomSpec, Sample,
};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Seed stream per split; distinct streams keep pair seeds disjoint.
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub experiment: String,
    pub pair: PairSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn split_seed(&self, split: Split) -> u64 {
        derive_seed(self.seed, split.stream())
    }

    /// Builds a split in memory; `bias_scale` overrides the stored scale
    /// (the test images of the artifact protocol are evaluated at several).
    pub fn build_split(&self, split: Split, bias_scale: Option<f64>) -> CliResult<Vec<Pair>> {
        let mut pair = self.pair.clone();
        if let Some(s) = bias_scale {
            pair.bias_scale = s;
        }
        make_dataset(&pair, self.count(split), self.split_seed(split)).map_err(CliError::from)
    }
}

pub(crate) const MANIFEST_KEYS: &[&str] = &[
    "experiment",
    "seed",
    "split.train",
    "split.val",
    "split.test",
    "data.h",
    "data.w",
    "data.labels",
    "data.noise",
    "data.smooth",
    "data.modulation",
    "data.background",
    "data.texture_amplitude",
    "data.modality",
    "data.mix",
    "deform.amplitude",
    "deform.sigma",
    "deform.max_tries",
    "bias.enabled",
    "bias.amplitude",
    "bias.max_freq",
    "bias.components",
    "bias.scale",
];

pub fn spec_to_config(spec: &DatasetSpec) -> Config {
    let mut cfg = Config::default();
    cfg.set("experiment", &spec.experiment);
    cfg.set("seed", &spec.seed.to_string());
    cfg.set("split.train", &spec.n_train.to_string());
    cfg.set("split.val", &spec.n_val.to_string());
    cfg.set("split.test", &spec.n_test.to_string());
    let ph = &spec.pair.phantom;
    cfg.set("data.h", &ph.h.to_string());
    cfg.set("data.w", &ph.w.to_string());
    cfg.set("data.labels", &ph.num_labels.to_string());
    cfg.set("data.noise", &ph.noise_std.to_string());
    cfg.set("data.smooth", &ph.smooth_sigma.to_string());
    cfg.set("data.modulation", &ph.modulation.to_string());
    match ph.background {
        Background::Flat => {
            cfg.set("data.background", "flat");
            cfg.set("data.texture_amplitude", "0");
        }
        Background::Texture { amplitude } => {
            cfg.set("data.background", "texture");
            cfg.set("data.texture_amplitude", &amplitude.to_string());
        }
    }
    cfg.set("data.modality", if spec.pair.moving_modality { "true" } else { "false" });
    cfg.set("data.mix", &spec.pair.transfer_mix.to_string());
    cfg.set("deform.amplitude", &spec.pair.deform.amplitude.to_string());
    cfg.set("deform.sigma", &spec.pair.deform.sigma.to_string());
    cfg.set("deform.max_tries", &spec.pair.deform.max_tries.to_string());
    match &spec.pair.bias {
        None => cfg.set("bias.enabled", "false"),
        Some(b) => {
            cfg.set("bias.enabled", "true");
            cfg.set("bias.amplitude", &b.amplitude.to_string());
            cfg.set("bias.max_freq", &b.max_freq.to_string());
            cfg.set("bias.components", &b.components.to_string());
        }
    }
    cfg.set("bias.scale", &spec.pair.bias_scale.to_string());
    cfg
}

pub fn read_manifest(dir: &Path) -> CliResult<DatasetSpec> {
    let path = dir.join("manifest.txt");
    let cfg = Config::from_file(&path)?;
    cfg.validate_keys(MANIFEST_KEYS)?;
    spec_from_config(&cfg)
}

pub fn spec_from_config(cfg: &Config) -> CliResult<DatasetSpec> {
    let background = match cfg.get_str("data.background", "flat").as_str() {
        "flat" => Background::Flat,
        "texture" => {
            Background::Texture { amplitude: cfg.get_f64("data.texture_amplitude", 0.4)? }
        }
        other => {
            return Err(CliError::Data(format!("manifest background '{}' unknown", other)))
        }
    };
    let bias = if cfg.get_bool("bias.enabled", false)? {
        Some(BiasSpec {
            amplitude: cfg.get_f64("bias.amplitude", 0.4)?,
            max_freq: cfg.get_usize("bias.max_freq", 2)? as i32,
            components: cfg.get_usize("bias.components", 6)?,
        })
    } else {
        None
    };
    Ok(DatasetSpec {
        experiment: cfg.get_str("experiment", ""),
        pair: PairSpec {
            phantom: PhantomSpec {
                h: cfg.get_usize("data.h", 32)?,
                w: cfg.get_usize("data.w", 32)?,
                num_labels: cfg.get_usize("data.labels", 3)?,
                noise_std: cfg.get_f64("data.noise", 0.02)?,
                smooth_sigma: cfg.get_f64("data.smooth", 0.7)?,
                modulation: cfg.get_f64("data.modulation", 0.2)?,
                background,
            },
            deform: DeformSpec {
                amplitude: cfg.get_f64("deform.amplitude", 2.5)?,
                sigma: cfg.get_f64("deform.sigma", 2.0)?,
                max_tries: cfg.get_usize("deform.max_tries", 10)?,
            },
            bias,
            bias_scale: cfg.get_f64("bias.scale", 0.0)?,
            moving_modality: cfg.get_bool("data.modality", false)?,
            transfer_mix: cfg.get_f64("data.mix", 0.35)?,
        },
        n_train: cfg.get_usize("split.train", 0)?,
        n_val: cfg.get_usize("split.val", 0)?,
        n_test: cfg.get_usize("split.test", 0)?,
        seed: cfg.get_u64("seed", 0)?,
    })
}

fn pair_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.dir_name()).join(format!("pair_{:04}", index))
}

fn write_sample(dir: &Path, prefix: &str, s: &Sample) -> CliResult<()> {
    write_grid(&dir.join(format!("{}_image.srgd", prefix)), &s.image, Dtype::F64)?;
    write_grid(&dir.join(format!("{}_clean.srgd", prefix)), &s.clean, Dtype::F64)?;
    write_grid(&dir.join(format!("{}_labels.srgd", prefix)), &s.labels, Dtype::U8)?;
    write_grid(&dir.join(format!("{}_mask.srgd", prefix)), &s.mask, Dtype::U8)?;
    write_pgm(&dir.join(format!("{}_image.pgm", prefix)), &s.image)?;
    Ok(())
}

fn read_sample(dir: &Path, prefix: &str) -> CliResult<Sample> {
    Ok(Sample {
        image: read_grid(&dir.join(format!("{}_image.srgd", prefix)))?,
        clean: read_grid(&dir.join(format!("{}_clean.srgd", prefix)))?,
        labels: read_grid(&dir.join(format!("{}_labels.srgd", prefix)))?,
        mask: read_grid(&dir.join(format!("{}_mask.srgd", prefix)))?,
    })
}

fn write_landmarks(path: &Path, pair: &Pair) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    wtr.write_record(["side", "index", "y", "x"])?;
    for (side, pts) in
        [("fixed", &pair.fixed_landmarks), ("moving", &pair.moving_landmarks)]
    {
        for (i, (y, x)) in pts.iter().enumerate() {
            wtr.write_record([side, &i.to_string(), &y.to_string(), &x.to_string()])?;
        }
    }
    wtr.flush().map_err(CliError::from)?;
    Ok(())
}

fn read_landmarks(path: &Path) -> CliResult<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let mut fixed = Vec::new();
    let mut moving = Vec::new();
    for record in rdr.records() {
        let r = record?;
        let bad = || CliError::Data(format!("{}: malformed landmark row", path.display()));
        let y: f64 = r.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let x: f64 = r.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        match r.get(0) {
            Some("fixed") => fixed.push((y, x)),
            Some("moving") => moving.push((y, x)),
            _ => return Err(bad()),
        }
    }
    Ok((fixed, moving))
}

fn write_pair(dir: &Path, pair: &Pair) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    write_sample(dir, "fixed", &pair.fixed)?;
    write_sample(dir, "moving", &pair.moving)?;
    write_grid(&dir.join("gt_disp.srgd"), &pair.gt_disp, Dtype::F64)?;
    write_landmarks(&dir.join("landmarks.csv"), pair)?;
    Ok(())
}

fn read_pair(dir: &Path, num_labels: usize) -> CliResult<Pair> {
    let (fixed_landmarks, moving_landmarks) = read_landmarks(&dir.join("landmarks.csv"))?;
    Ok(Pair {
        fixed: read_sample(dir, "fixed")?,
        moving: read_sample(dir, "moving")?,
        gt_disp: read_grid(&dir.join("gt_disp.srgd"))?,
        fixed_landmarks,
        moving_landmarks,
        num_labels,
    })
}

/// Writes the full dataset. Refuses to touch a directory that already
/// holds a manifest unless `force` is set.
pub fn generate(root: &Path, spec: &DatasetSpec, force: bool, workers: usize) -> CliResult<()> {
    let manifest_path = root.join("manifest.txt");
    if manifest_path.exists() && !force {
        return Err(CliError::Data(format!(
            "{} already holds a dataset; pass --force to overwrite",
            root.display()
        )));
    }
    fs::create_dir_all(root)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let pairs = spec.build_split(split, None)?;
        parallel_map(pairs.into_iter().enumerate().collect(), workers, |(i, pair)| {
            write_pair(&pair_dir(root, split, i), &pair)
        })?;
    }
    fs::write(&manifest_path, spec_to_config(spec).to_text())?;
    Ok(())
}

/// Reads a split back from disk; the manifest supplies the label count.
pub fn load_split(root: &Path, split: Split) -> CliResult<Vec<Pair>> {
    let spec = read_manifest(root)?;
    let n = spec.count(split);
    (0..n)
        .map(|i| {
            let dir = pair_dir(root, split, i);
            read_pair(&dir, spec.pair.phantom.num_labels)
                .map_err(|e| CliError::Data(format!("{}: {}", dir.display(), e)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            experiment: "artifact".into(),
            pair: PairSpec {
                phantom: PhantomSpec {
                    h: 16,
                    w: 16,
                    num_labels: 2,
                    noise_std: 0.01,
                    smooth_sigma: 0.7,
                    modulation: 0.2,
                    background: Background::Flat,
                },
                deform: DeformSpec { amplitude: 1.5, sigma: 2.0, max_tries: 10 },
                bias: Some(BiasSpec::default()),
                bias_scale: 1.0,
                moving_modality: false,
                transfer_mix: 0.35,
            },
            n_train: 2,
            n_val: 1,
            n_test: 2,
            seed: 77,
        }
    }

    #[test]
    fn round_trip_preserves_pairs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate(dir.path(), &spec, false, 2).unwrap();

        let mem = spec.build_split(Split::Test, None).unwrap();
        let disk = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(mem.len(), disk.len());
        for (a, b) in mem.iter().zip(&disk) {
            assert_eq!(a.fixed.image.data(), b.fixed.image.data());
            assert_eq!(a.moving.clean.data(), b.moving.clean.data());
            assert_eq!(a.fixed.labels.data(), b.fixed.labels.data());
            assert_eq!(a.gt_disp.data(), b.gt_disp.data());
            assert_eq!(a.fixed_landmarks, b.fixed_landmarks);
            assert_eq!(a.moving_landmarks, b.moving_landmarks);
            assert_eq!(a.num_labels, b.num_labels);
        }
    }

    #[test]
    fn manifest_round_trip_regenerates_the_same_data() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate(dir.path(), &spec, false, 1).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.experiment, spec.experiment);
        assert_eq!(back.seed, spec.seed);
        assert_eq!(back.pair, spec.pair);
        let a = spec.build_split(Split::Val, None).unwrap();
        let b = back.build_split(Split::Val, None).unwrap();
        assert_eq!(a[0].moving.image.data(), b[0].moving.image.data());
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate(dir.path(), &spec, false, 1).unwrap();
        assert!(generate(dir.path(), &spec, false, 1).is_err());
        generate(dir.path(), &spec, true, 1).unwrap();
    }

    #[test]
    fn rescaled_split_keeps_clean_images_fixed() {
        let spec = tiny_spec();
        let s1 = spec.build_split(Split::Test, Some(1.0)).unwrap();
        let s3 = spec.build_split(Split::Test, Some(3.0)).unwrap();
        assert_eq!(s1[0].fixed.clean.data(), s3[0].fixed.clean.data());
        assert_ne!(s1[0].fixed.image.data(), s3[0].fixed.image.data());
        assert_eq!(s1[0].gt_disp.data(), s3[0].gt_disp.data());
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let spec = tiny_spec();
        let seeds: Vec<u64> =
            [Split::Train, Split::Val, Split::Test].iter().map(|&s| spec.split_seed(s)).collect();
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(seeds[1], seeds[2]);
        assert_ne!(seeds[0], seeds[2]);
    }
}
