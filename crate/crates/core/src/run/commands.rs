use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{RunConfig, RunDir};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    fake_of, load_hs1_cube, project_rgb, read_dataset, save_hs1, write_dataset, Dataset, Family, LabeledSample,
    Partition, ResponseMatrix,
};
use crate::detector::{fake_probability, init_detector, train_detector, InputKind, TrainPair};
use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::eval::{cross_manipulation_eval, ReportTable};
use crate::gradsuite::{grad_check_suite, SiteResult};
use crate::hsr::{hsr_pretrain, hsr_reconstruct, init_hsr, mrae, HsrConfig};
use crate::image::{wavelength, RgbImage, SpectralImage, BANDS};
use crate::objectives::LOSS_CSV_HEADER;
use crate::rng::SeedTree;

pub const HSR_PREFIX: &str = "hsr/";
pub const DETECTOR_PREFIX: &str = "det/";
pub const HSR_LOSS_CSV_HEADER: &str = "step,mrae";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates the run directory tree and records the resolved config in it.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<RunDir> {
    let rd = cfg.run_dir();
    for dir in [rd.data(), rd.checkpoints(), rd.logs(), rd.reports()] {
        create_dir(&dir)?;
    }
    let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write_file(&rd.root.join("config.json"), text.as_bytes())?;
    Ok(rd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataSummary {
    pub run_dir: PathBuf,
    /// Scene pairs per partition in train, val, test order.
    pub pairs: [usize; 3],
    pub manifest_lines: usize,
}

/// Synthesizes the dataset and writes it as HS1 files plus a manifest.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    cfg.validate()?;
    let rd = prepare_run_dir(cfg)?;
    let ds = crate::data::make_dataset(&cfg.dataset_spec())?;
    let entries = write_dataset(&rd.data(), &ds)?;
    Ok(GenDataSummary {
        run_dir: rd.root,
        pairs: Partition::ALL.map(|p| ds.partition(p).len()),
        manifest_lines: entries.len(),
    })
}

fn load_dataset(rd: &RunDir) -> Result<Dataset> {
    read_dataset(&rd.data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsrSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Mean MRAE of the clamped reconstruction over validation reals.
    pub val_mrae: Option<f64>,
}

/// Mean MRAE of the stored reconstruction network over `samples`.
pub fn mean_mrae(samples: &[&LabeledSample], params: &ParamStore, cfg: &HsrConfig) -> Result<f64> {
    let errs = samples
        .par_iter()
        .map(|s| mrae(&hsr_reconstruct(&s.rgb, params, cfg)?, &s.hsi))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Pretrains the reconstruction network on the real training samples.
pub fn cmd_pretrain_hsr(cfg: &RunConfig) -> Result<HsrSummary> {
    cfg.validate()?;
    let rd = prepare_run_dir(cfg)?;
    let ds = load_dataset(&rd)?;
    let pairs: Vec<(RgbImage, SpectralImage)> =
        ds.train.iter().map(|p| (p.real.rgb.clone(), p.real.hsi.clone())).collect();
    let seed = SeedTree::new(cfg.seed).child("hsr", 0).to_u64();
    let out = hsr_pretrain(&pairs, &cfg.hsr.model, &cfg.hsr.train, seed)?;

    let mut csv = format!("{HSR_LOSS_CSV_HEADER}\n");
    for (step, v) in out.history.iter().enumerate() {
        csv.push_str(&format!("{step},{v}\n"));
    }
    let log = rd.hsr_log();
    write_file(&log, csv.as_bytes())?;
    let checkpoint = rd.hsr_checkpoint();
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            config_hash: cfg.hash(),
            params: out.params.prefixed(HSR_PREFIX),
        },
    )?;

    let stored = load_hsr(&checkpoint, &cfg.hsr.model)?;
    let val: Vec<&LabeledSample> = ds.val.iter().map(|p| &p.real).collect();
    let val_mrae = if val.is_empty() { None } else { Some(mean_mrae(&val, &stored, &cfg.hsr.model)?) };
    Ok(HsrSummary {
        checkpoint,
        log,
        first_loss: out.history.first().copied().unwrap_or(f64::NAN),
        last_loss: out.history.last().copied().unwrap_or(f64::NAN),
        val_mrae,
    })
}

/// Reconstruction weights from the `hsr/` entries of a checkpoint.
pub fn load_hsr(path: &Path, cfg: &HsrConfig) -> Result<ParamStore> {
    let reference = init_hsr(cfg, 0)?;
    let ck = load_checkpoint(path)?;
    let params = ck.params.strip_prefix(HSR_PREFIX);
    params.check_layout(&reference).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(params)
}

/// Turns samples into detector inputs: the RGB image itself, or its frozen
/// reconstruction for `input = hsi`.
pub struct Frontend {
    input: InputKind,
    hsr: Option<(ParamStore, HsrConfig)>,
}

impl Frontend {
    pub fn rgb() -> Self {
        Frontend {
            input: InputKind::Rgb,
            hsr: None,
        }
    }

    pub fn hsi(params: ParamStore, cfg: HsrConfig) -> Self {
        Frontend {
            input: InputKind::Hsi,
            hsr: Some((params, cfg)),
        }
    }

    pub fn prepare(&self, s: &LabeledSample) -> Result<Tensor> {
        match (&self.input, &self.hsr) {
            (InputKind::Rgb, _) => Ok(s.rgb.to_tensor()),
            (InputKind::Hsi, Some((params, cfg))) => Ok(hsr_reconstruct(&s.rgb, params, cfg)?.to_tensor()),
            (InputKind::Hsi, None) => Err(Error::Config("hsi input needs reconstruction weights".into())),
        }
    }
}

fn training_frontend(cfg: &RunConfig, rd: &RunDir) -> Result<Frontend> {
    match cfg.detector.model.input {
        InputKind::Rgb => Ok(Frontend::rgb()),
        InputKind::Hsi => {
            let path = rd.hsr_checkpoint();
            if !path.exists() {
                return Err(Error::Config(format!(
                    "input = hsi needs a reconstruction checkpoint at {}; run pretrain-hsr first",
                    path.display()
                )));
            }
            Ok(Frontend::hsi(load_hsr(&path, &cfg.hsr.model)?, cfg.hsr.model.clone()))
        }
    }
}

/// Training pairs for one manipulation kind: every training real with its
/// counterpart manipulated by `kind`.
pub fn kind_pairs(ds: &Dataset, kind: Family, frontend: &Frontend) -> Result<Vec<TrainPair>> {
    ds.train
        .par_iter()
        .map(|p| {
            let fake = fake_of(&p.real, kind)?;
            Ok(TrainPair {
                real: frontend.prepare(&p.real)?,
                fake: frontend.prepare(&fake)?,
                manip_id: kind.id(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSummary {
    pub kind: Family,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub first_total: f64,
    pub last_total: f64,
}

/// Trains one detector per `eval.train_kinds` entry. Checkpoints hold the
/// detector under `det/` and, for hsi input, the frozen reconstruction
/// weights it was trained behind under `hsr/`.
pub fn cmd_train_detector(cfg: &RunConfig) -> Result<Vec<DetectorSummary>> {
    cfg.validate()?;
    let rd = prepare_run_dir(cfg)?;
    let frontend = training_frontend(cfg, &rd)?;
    let ds = load_dataset(&rd)?;
    let mut out = Vec::new();
    for &kind in &cfg.eval.train_kinds {
        let pairs = kind_pairs(&ds, kind, &frontend)?;
        let seed = SeedTree::new(cfg.seed).child("detector", kind.id() as u64).to_u64();
        let result = train_detector(&pairs, &cfg.detector.model, &cfg.detector.train, seed)?;

        let mut csv = format!("{LOSS_CSV_HEADER}\n");
        let last = result.history.len().saturating_sub(1);
        for (step, parts) in result.history.iter().enumerate() {
            if step % cfg.detector.log_every == 0 || step == last {
                csv.push_str(&parts.csv_row(step));
                csv.push('\n');
            }
        }
        let log = rd.detector_log(kind);
        write_file(&log, csv.as_bytes())?;

        let mut params = result.params.prefixed(DETECTOR_PREFIX);
        if let Some((hsr, _)) = &frontend.hsr {
            for (name, t) in hsr.prefixed(HSR_PREFIX).iter() {
                params.insert(name.clone(), t.clone())?;
            }
        }
        let checkpoint = rd.detector_checkpoint(kind);
        save_checkpoint(
            &checkpoint,
            &Checkpoint {
                config_hash: cfg.hash(),
                params,
            },
        )?;
        out.push(DetectorSummary {
            kind,
            checkpoint,
            log,
            first_total: result.history.first().map_or(f64::NAN, |h| h.total),
            last_total: result.history.last().map_or(f64::NAN, |h| h.total),
        });
    }
    Ok(out)
}

/// A trained detector ready to score samples.
pub struct Scorer {
    pub params: ParamStore,
    pub frontend: Frontend,
}

impl Scorer {
    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let reference = init_detector(&cfg.detector.model, 0)?;
        let params = ck.params.strip_prefix(DETECTOR_PREFIX);
        params.check_layout(&reference).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let frontend = match cfg.detector.model.input {
            InputKind::Rgb => Frontend::rgb(),
            InputKind::Hsi => Frontend::hsi(load_hsr(path, &cfg.hsr.model)?, cfg.hsr.model.clone()),
        };
        Ok(Scorer { params, frontend })
    }

    /// Probability of the fake class.
    pub fn score(&self, s: &LabeledSample, cfg: &RunConfig) -> Result<f64> {
        fake_probability(&self.frontend.prepare(s)?, &self.params, &cfg.detector.model)
    }
}

/// Scores every train kind's detector on every test kind and writes the
/// report. `checkpoint` replaces the run's own detector and then requires a
/// single train kind.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ReportTable> {
    cfg.validate()?;
    if checkpoint.is_some() && cfg.eval.train_kinds.len() != 1 {
        return Err(Error::Config("--checkpoint needs exactly one eval.train_kinds entry".into()));
    }
    let rd = prepare_run_dir(cfg)?;
    let ds = load_dataset(&rd)?;
    let train_scenes: Vec<u64> = ds.train.iter().map(|p| p.scene_seed()).collect();
    let test_reals: Vec<LabeledSample> = ds.test.iter().map(|p| p.real.clone()).collect();
    let mut table = ReportTable::default();
    for &kind in &cfg.eval.train_kinds {
        let path = checkpoint.map_or_else(|| rd.detector_checkpoint(kind), Path::to_path_buf);
        let scorer = Scorer::load(&path, cfg)?;
        let row = cross_manipulation_eval(
            |s| scorer.score(s, cfg),
            kind,
            &train_scenes,
            &test_reals,
            &cfg.eval.test_kinds,
        )?;
        table.rows.push(row);
    }
    table.write(&rd.reports())?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructSummary {
    pub output: PathBuf,
    pub bands: Vec<PathBuf>,
}

/// Binary greyscale PGM of one band, values clamped to `[0, 1]`.
pub fn band_pgm(img: &SpectralImage, band: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.channel(band).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Reconstructs a spectral cube from an HS1 file holding an RGB image or a
/// 31-band cube (projected to RGB first). Writes the result as HS1 and,
/// with `dump_bands`, one `band_<nm>.pgm` per band next to it.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    output: Option<&Path>,
    dump_bands: bool,
) -> Result<ReconstructSummary> {
    cfg.validate()?;
    let cube = load_hs1_cube(input)?;
    let rgb = match cube.channels {
        3 => cube.into_rgb()?,
        BANDS => project_rgb(&cube.into_spectral()?, &ResponseMatrix::standard()),
        c => {
            return Err(Error::Format {
                offset: 16,
                reason: format!("{}: {c} channels, expected 3 or {BANDS}", input.display()),
            })
        }
    };
    let rd = cfg.run_dir();
    let ck = checkpoint.map_or_else(|| rd.hsr_checkpoint(), Path::to_path_buf);
    let params = load_hsr(&ck, &cfg.hsr.model)?;
    let hsi = hsr_reconstruct(&rgb, &params, &cfg.hsr.model)?;

    let output = match output {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&rd.reports())?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
            rd.reports().join(format!("{stem}_recon.hs1"))
        }
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_hs1(&output, &hsi)?;

    let mut bands = Vec::new();
    if dump_bands {
        let dir = output.with_extension("bands");
        create_dir(&dir)?;
        for b in 0..BANDS {
            let path = dir.join(format!("band_{}.pgm", wavelength(b) as u32));
            write_file(&path, &band_pgm(&hsi, b))?;
            bands.push(path);
        }
    }
    Ok(ReconstructSummary { output, bands })
}

/// Runs the gradient suite under the config seed.
pub fn cmd_grad_check(cfg: &RunConfig) -> Result<Vec<SiteResult>> {
    grad_check_suite(cfg.seed)
}
