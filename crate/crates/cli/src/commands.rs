//! The five commands. Each returns a small report and prints a summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use plume_core::config::N_POLLUTANTS;
use plume_core::features::archive::{Archive, ArchiveWriter, ArrayEntry};
use plume_core::features::{Dataset, FeatureStats, PatchBuilder, PatchLayout};
use plume_core::geo::GeoPoint;
use plume_core::time::{Hour, Pollutant};
use plume_core::training::batch::make_batch;
use plume_core::training::{
    carve_validation, evaluate, stations_by_split, train, write_train_log, Checkpoint, EvalReport, Predictor,
};
use plume_core::Error as CoreError;
use plume_core::model::Unet;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::raster::{write_f32, write_png, ColorScale};

pub const SPLIT_MANIFEST: &str = "split.json";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_DIR: &str = "checkpoint";
pub const LAST_DIR: &str = "last";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.csv";
pub const EVAL_RESOLUTIONS: &str = "eval_resolutions.csv";
pub const FORECAST_MANIFEST: &str = "manifest.json";
pub const AQI_REFERENCE: &str = "https://plumelabs.zendesk.com/hc/en-us/articles/360008268434-What-is-the-Plume-AQI-";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn files_with_sizes(root: &Path) -> Result<Vec<(String, u64)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let entry = entry.map_err(|e| CliError::io(&dir, e))?;
            let path = entry.path();
            let meta = entry.metadata().map_err(|e| CliError::io(&path, e))?;
            if meta.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path).display().to_string();
                out.push((rel, meta.len()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn check_layout(archive: &Archive, expected: &PatchLayout) -> Result<()> {
    let found = &archive.manifest.layout_fingerprint;
    let want = expected.fingerprint();
    if *found != want {
        return Err(CliError::Fingerprint(format!(
            "{}: patches were built for layout {found}, the configuration gives {want}",
            archive.dir().display()
        )));
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(dir)?;
    ckpt.verify(&cfg.model)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub summary: plume_synth::Summary,
    pub files: Vec<(String, u64)>,
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthReport> {
    create_dir(out)?;
    let start = Instant::now();
    let summary = plume_synth::generate(&cfg.synth, out)?;
    let files = files_with_sizes(out)?;
    let total: u64 = files.iter().map(|f| f.1).sum();
    println!(
        "synthesized {} stations in {} towns over {} hours ({} road segments) in {:.1}s",
        summary.stations,
        summary.towns,
        summary.hours,
        summary.road_segments,
        start.elapsed().as_secs_f64()
    );
    println!(
        "{} measurement rows, {} weather and {} physical-model issuances, {} files, {:.1} MB",
        summary.measurement_rows,
        summary.weather_issuances,
        summary.physical_issuances,
        files.len(),
        total as f64 / 1e6
    );
    for top in ["measurements.csv", "stations.csv", "roads.csv", "traffic.csv"] {
        if let Some((_, n)) = files.iter().find(|f| f.0 == top) {
            println!("  {top:<18} {n:>12} bytes");
        }
    }
    for dir in ["weather", "physical", "ground_truth"] {
        let prefix = format!("{dir}/");
        let (k, n) = files
            .iter()
            .filter(|f| f.0.starts_with(&prefix))
            .fold((0, 0), |(k, n), f| (k + 1, n + f.1));
        println!("  {:<18} {n:>12} bytes in {k} files", prefix);
    }
    Ok(SynthReport { summary, files })
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitManifest {
    pub layout_fingerprint: String,
    pub arrays: Vec<ArrayEntry>,
    pub eval_fraction: f64,
    pub split_seed: u64,
    pub train_cities: Vec<String>,
    pub eval_cities: Vec<String>,
    pub train_stations: Vec<String>,
    pub eval_stations: Vec<String>,
    pub t0_stride_h: usize,
    pub candidate_t0s: usize,
    pub counts: BTreeMap<String, usize>,
    pub skipped: BTreeMap<String, usize>,
}

fn select(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if max == 0 || n <= max {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Builds the patches of one split and streams them into an archive.
fn build_split(
    builder: &PatchBuilder<'_>,
    items: &[(usize, Hour)],
    dir: &Path,
    cfg: &RunConfig,
) -> Result<(usize, usize)> {
    let channels = cfg.model.channels();
    let mut writer = ArchiveWriter::create(dir, builder.layout(), &channels)?;
    let mut skipped = 0;
    let chunk = 4 * rayon::current_num_threads().max(1);
    for (k, group) in items.chunks(chunk).enumerate() {
        let built: Vec<_> = group.par_iter().map(|&(s, t0)| builder.build(s, t0)).collect();
        for r in built {
            match r {
                Ok(p) => writer.push(&p)?,
                Err(CoreError::IncompletePatch(m)) => {
                    skipped += 1;
                    log::debug!("skipped patch: {m}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        if (k + 1) % 25 == 0 {
            info!("{}: {} of {} patches", dir.display(), ((k + 1) * chunk).min(items.len()), items.len());
        }
    }
    let n = writer.len();
    writer.finish()?;
    Ok((n, skipped))
}

pub fn cmd_patches(cfg: &RunConfig, data: &Path, out: &Path) -> Result<SplitManifest> {
    let start = Instant::now();
    let ds = Dataset::load(data, &cfg.validation)?;
    info!(
        "loaded {} stations, {} measurements ({} rejected)",
        ds.stations.len(),
        ds.report.measurements_read,
        ds.report.rejected.total()
    );
    let cities = ds.cities();
    let (train_st, eval_st) = stations_by_split(&cities, cfg.train.eval_fraction, cfg.train.seed)?;
    let (train_cities, eval_cities): (Vec<String>, Vec<String>) = {
        let (a, b): (Vec<_>, Vec<_>) = cities.iter().partition(|(_, s)| s.iter().all(|id| train_st.contains(id)));
        (a.into_iter().map(|c| c.0.clone()).collect(), b.into_iter().map(|c| c.0.clone()).collect())
    };
    let builder = PatchBuilder::new(&ds, &cfg.model, &cfg.targets);
    let t0s = builder.candidate_t0s(cfg.patches.t0_stride_h);
    if t0s.is_empty() {
        return Err(CliError::NoPatches(
            "no start hour has complete measurements, traffic, weather and physical-model coverage".into(),
        ));
    }
    create_dir(out)?;
    let mut counts = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for (k, (name, ids)) in [(TRAIN_DIR, &train_st), (EVAL_DIR, &eval_st)].into_iter().enumerate() {
        let stations: Vec<usize> = ids.iter().filter_map(|id| ds.station_index(id)).collect();
        let all: Vec<(usize, Hour)> = t0s.iter().flat_map(|&t| stations.iter().map(move |&s| (s, t))).collect();
        let keep = select(all.len(), cfg.patches.max_per_split, cfg.patches.seed.wrapping_add(k as u64));
        let items: Vec<(usize, Hour)> = keep.into_iter().map(|i| all[i]).collect();
        let (n, s) = build_split(&builder, &items, &out.join(name), cfg)?;
        counts.insert(name.to_string(), n);
        skipped.insert(name.to_string(), s);
    }
    let archive = Archive::open(&out.join(TRAIN_DIR))?;
    let manifest = SplitManifest {
        layout_fingerprint: builder.layout().fingerprint(),
        arrays: archive.manifest.arrays.clone(),
        eval_fraction: cfg.train.eval_fraction,
        split_seed: cfg.train.seed,
        train_cities,
        eval_cities,
        train_stations: train_st.into_iter().collect(),
        eval_stations: eval_st.into_iter().collect(),
        t0_stride_h: cfg.patches.t0_stride_h,
        candidate_t0s: t0s.len(),
        counts: counts.clone(),
        skipped,
    };
    write_json(&out.join(SPLIT_MANIFEST), &manifest)?;
    println!(
        "built {} train and {} eval patches from {} start hours in {:.1}s",
        counts[TRAIN_DIR],
        counts[EVAL_DIR],
        t0s.len(),
        start.elapsed().as_secs_f64()
    );
    if counts.values().any(|&n| n == 0) {
        return Err(CliError::NoPatches(format!("a split is empty: {counts:?}")));
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: u64,
}

pub fn cmd_train(cfg: &RunConfig, patches: &Path, out: &Path) -> Result<TrainReport> {
    let start = Instant::now();
    let archive = Archive::open(&patches.join(TRAIN_DIR))?;
    check_layout(&archive, &PatchLayout::new(&cfg.model, &cfg.targets))?;
    let (train_idx, val_idx) = carve_validation(archive.len(), cfg.train.val_fraction, cfg.train.seed);
    let mut load_err = None;
    let stats = FeatureStats::fit(
        &cfg.model.channels(),
        train_idx.iter().map_while(|&i| match archive.get(i) {
            Ok(p) => Some(p),
            Err(e) => {
                load_err = Some(e);
                None
            }
        }),
    );
    if let Some(e) = load_err {
        return Err(e.into());
    }
    let mut model = Unet::<f32>::new(&cfg.model, cfg.train.seed)?;
    println!(
        "training {} parameters on {} patches ({} held for validation)",
        model.param_count(),
        train_idx.len(),
        val_idx.len()
    );
    let outcome = train(&mut model, &archive, &train_idx, &val_idx, &stats, &cfg.train, |row| {
        if row.split == "val" {
            println!("epoch {:>3} step {:>6}  validation loss {:.5}", row.epoch, row.step, row.loss);
        } else if row.step % 10 == 0 {
            info!("step {} train loss {:.5}", row.step, row.loss);
        }
    })?;
    create_dir(out)?;
    outcome.best.save(&out.join(BEST_DIR))?;
    outcome.last.save(&out.join(LAST_DIR))?;
    write_train_log(&out.join(TRAIN_LOG), &outcome.log)?;
    let path = out.join("run_config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    let report = TrainReport {
        steps: outcome.last.step,
        final_train_loss: outcome.final_train_loss,
        final_val_loss: outcome.final_val_loss,
        best_val_loss: outcome.best_val_loss,
        best_step: outcome.best.step,
    };
    println!(
        "final train loss {:.5}, final validation loss {:.5}, best validation loss {:.5} at step {} ({:.1}s)",
        report.final_train_loss,
        report.final_val_loss,
        report.best_val_loss,
        report.best_step,
        start.elapsed().as_secs_f64()
    );
    Ok(report)
}

/// Who fills the engine column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Checkpoint,
    /// Engine replaced by the station's own readings.
    Perfect,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    patches: &Path,
    split: &str,
    out: &Path,
    mode: EvalMode,
) -> Result<EvalReport> {
    let start = Instant::now();
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let archive = Archive::open(&patches.join(split))?;
    let layout = PatchLayout::new(&ckpt.config, &cfg.targets);
    check_layout(&archive, &layout)?;
    let model = ckpt.to_model()?;
    let predictor = match mode {
        EvalMode::Checkpoint => Predictor::Model {
            model: &model,
            stats: &ckpt.stats,
        },
        EvalMode::Perfect => Predictor::Perfect,
    };
    let (main, diag) = evaluate(&archive, &predictor, &layout.output_grids, layout.n_out)?;
    create_dir(out)?;
    main.write_csv(&out.join(EVAL_REPORT))?;
    main.write_summary_csv(&out.join(EVAL_SUMMARY))?;
    diag.write_csv(&out.join(EVAL_RESOLUTIONS))?;
    println!("{}", main.render());
    println!(
        "evaluated {} patches ({} slots without truth, {} without benchmark) in {:.1}s",
        archive.len(),
        main.excluded_no_truth,
        main.excluded_no_benchmark,
        start.elapsed().as_secs_f64()
    );
    Ok(main)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridEntry {
    pub resolution_m: f64,
    pub width: usize,
    pub height: usize,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastManifest {
    pub format: String,
    pub center: GeoPoint,
    pub t0: Hour,
    pub hours: Vec<Hour>,
    pub pollutants: Vec<String>,
    pub checkpoint_fingerprint: String,
    pub checkpoint_step: u64,
    /// Files are `<dir>/<pollutant>_h<hh>.f32` (row-major little-endian
    /// float32, row 0 north, µg/m³) and the matching `.png`.
    pub grids: Vec<GridEntry>,
    /// Gray level = 255 · clamp((v - min) / (max - min), 0, 1).
    pub color_scales: Vec<ColorScale>,
    pub aqi_reference: String,
}

pub fn cmd_forecast(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    center: GeoPoint,
    t0: Hour,
    out: &Path,
) -> Result<ForecastManifest> {
    let start = Instant::now();
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let ds = Dataset::load(data, &cfg.validation)?;
    let builder = PatchBuilder::new(&ds, &ckpt.config, &cfg.targets);
    builder.check_coverage(t0)?;
    let patch = builder.build_at(center, t0)?;
    let model = ckpt.to_model()?;
    let batch = make_batch(std::slice::from_ref(&patch), &ckpt.stats)?;
    let outs = model.predict(&batch.inputs)?;
    let layout = builder.layout();
    let n_out = layout.n_out;
    let scales: Vec<ColorScale> = Pollutant::ALL.iter().map(|&p| ColorScale::fixed(p)).collect();
    let mut grids = Vec::new();
    for (t, &(r, n)) in outs.iter().zip(&layout.output_grids) {
        let name = format!("{r}m");
        let dir = out.join(&name);
        create_dir(&dir)?;
        let cells = n * n;
        for h in 0..n_out {
            let frame = &t.data()[h * cells * N_POLLUTANTS..(h + 1) * cells * N_POLLUTANTS];
            for (p, scale) in Pollutant::ALL.iter().zip(&scales) {
                let values: Vec<f32> = frame.chunks_exact(N_POLLUTANTS).map(|px| px[p.index()]).collect();
                let stem = format!("{}_h{:02}", p.name(), h + 1);
                write_f32(&dir.join(format!("{stem}.f32")), &values)?;
                write_png(&dir.join(format!("{stem}.png")), n, n, &values, scale)?;
            }
        }
        grids.push(GridEntry {
            resolution_m: r,
            width: n,
            height: n,
            dir: name,
        });
    }
    let manifest = ForecastManifest {
        format: "plume-forecast/1".into(),
        center,
        t0,
        hours: (1..=n_out).map(|h| t0.offset(h as i64)).collect(),
        pollutants: Pollutant::ALL.iter().map(|p| p.name().to_string()).collect(),
        checkpoint_fingerprint: ckpt.config.fingerprint(),
        checkpoint_step: ckpt.step,
        grids,
        color_scales: scales,
        aqi_reference: AQI_REFERENCE.into(),
    };
    write_json(&out.join(FORECAST_MANIFEST), &manifest)?;
    println!(
        "forecast at ({:.5}, {:.5}) from {t0}: {} grids x {n_out} hours x {N_POLLUTANTS} pollutants in {:.1}s",
        center.lat,
        center.lon,
        manifest.grids.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(manifest)
}

/// Resolves a path from the command line or the `[paths]` section.
pub fn resolve(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} path given (flag or [paths] section)")))
}
