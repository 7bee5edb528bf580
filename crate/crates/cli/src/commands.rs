use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcdm::checkpoint;
use mcdm::datapipe::{self, Label, ManifestEntry, Provenance, Split};
use mcdm::diffusion::{self, SampleJob};
use mcdm::evalmetrics::{self, FeatureSet, MetricsReport, ScoredLabels};
use mcdm::features::{ConvFeatureExtractor, ExtractorKind, FeatureExtractor};
use mcdm::losses::{self, MetricsRecord, TrainItem};
use mcdm::masks::{self, Mask};
use mcdm::model::{init_denoiser, Denoiser};
use mcdm::optim::Adam;
use mcdm::{seed, Error, Exec, ImageTensor};
use rand::seq::SliceRandom;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

type CmdResult = Result<serde_json::Value, CliError>;

/// Creates the output directory and freezes the effective config into it.
pub fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write(&out.join("effective_config.toml"), cfg.to_toml())?;
    Ok(out)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<(), CliError> {
    write(&out.join(format!("{stem}.json")), report.to_json() + "\n")?;
    write(
        &out.join(format!("{stem}.csv")),
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.paths
        .manifest
        .clone()
        .or_else(|| {
            cfg.paths
                .data_dir
                .as_ref()
                .map(|d| d.join("manifest.jsonl"))
        })
        .ok_or_else(|| CliError::config("paths.manifest", "set paths.manifest or paths.data_dir"))
}

/// Manifest entries with their image paths resolved against the manifest's
/// directory.
fn read_sources(path: &Path) -> Result<Vec<(ManifestEntry, PathBuf)>, CliError> {
    let entries = datapipe::read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| {
            let p = absolute(&e.resolve(base));
            (e, p)
        })
        .collect())
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p)
        .unwrap_or_else(|_| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
}

fn load_generator(cfg: &RunConfig) -> Result<Denoiser, CliError> {
    let d = match &cfg.paths.checkpoint {
        Some(p) => checkpoint::load_denoiser(p)?,
        None => init_denoiser(&cfg.denoiser_config())?,
    };
    if d.config().image_size != cfg.image_size {
        return Err(CliError::config(
            "image_size",
            format!("checkpoint was trained at {} px", d.config().image_size),
        ));
    }
    Ok(d)
}

fn build_extractor(cfg: &RunConfig) -> Result<ConvFeatureExtractor, CliError> {
    let input = (3, cfg.image_size, cfg.image_size);
    let e = match cfg.extractor.kind {
        ExtractorKind::ToyRandomProjection => {
            ConvFeatureExtractor::random(input, cfg.extractor.dim, cfg.extractor_seed())?
        }
        kind => {
            let path = cfg.extractor.checkpoint.as_ref().ok_or_else(|| {
                CliError::config("extractor.checkpoint", "required for this extractor kind")
            })?;
            checkpoint::load_extractor(path, kind)?
        }
    };
    if e.input_shape() != input || e.dim() != cfg.extractor.dim {
        return Err(CliError::config(
            "extractor",
            format!(
                "checkpoint has input {:?} and dim {}",
                e.input_shape(),
                e.dim()
            ),
        ));
    }
    Ok(e)
}

fn generator_run(d: &Denoiser) -> String {
    d.checksum()[..16].to_string()
}

pub fn gen_masks(cfg: &RunConfig, count: usize, exec: Exec) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let dir = out.join("masks");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let params = cfg.mask_params();
    let seeds: Vec<u64> = (0..count as u64)
        .map(|i| seed::derive(params.seed, i))
        .collect();
    let samples = exec
        .map(&seeds, |&s| {
            masks::generate_random_mask_traced(&params.with_seed(s))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut lines = String::new();
    let mut coverages = Vec::with_capacity(count);
    for (i, (s, sample)) in seeds.iter().zip(&samples).enumerate() {
        let stem = format!("mask_{i:04}");
        sample.mask.save_png(&dir.join(format!("{stem}.png")))?;
        write(&dir.join(format!("{stem}.rle")), sample.mask.to_rle())?;
        let cov = sample.mask.coverage();
        coverages.push(cov);
        lines += &json!({
            "index": i,
            "seed": s,
            "file": format!("masks/{stem}.png"),
            "coverage": cov,
            "attempts": sample.attempts,
        })
        .to_string();
        lines.push('\n');
    }
    write(&out.join("masks.jsonl"), lines)?;
    let stats = if coverages.is_empty() {
        json!({ "count": 0 })
    } else {
        json!({
            "count": count,
            "coverage_mean": coverages.iter().sum::<f64>() / count as f64,
            "coverage_min": coverages.iter().cloned().fold(f64::INFINITY, f64::min),
            "coverage_max": coverages.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    };
    write(
        &out.join("mask_stats.json"),
        serde_json::to_string_pretty(&stats).unwrap() + "\n",
    )?;
    Ok(stats)
}

pub fn make_toy(cfg: &RunConfig, count: usize) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let data = cfg
        .paths
        .data_dir
        .clone()
        .unwrap_or_else(|| out.join("toy"));
    fs::create_dir_all(&data).map_err(|e| Error::Io {
        path: data.clone(),
        source: e,
    })?;
    let manifest = cfg
        .paths
        .manifest
        .clone()
        .unwrap_or_else(|| data.join("manifest.jsonl"));
    let beside = manifest.parent().map(absolute) == Some(absolute(&data));
    let toy_seed = cfg.stage_seed("toy");
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("toy_{i:04}.png");
        let path = data.join(&name);
        datapipe::save_image(
            &path,
            &datapipe::toy_image(cfg.image_size, seed::derive(toy_seed, i as u64)),
        )?;
        let recorded = if beside {
            name
        } else {
            absolute(&path).to_string_lossy().into_owned()
        };
        entries.push(ManifestEntry::real(
            recorded,
            format!("toy{i:04}"),
            Split::Train,
        ));
    }
    datapipe::write_manifest(&manifest, &entries)?;
    Ok(json!({ "count": count, "manifest": manifest.to_string_lossy() }))
}

pub fn train(cfg: &RunConfig, exec: Exec) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let sources: Vec<_> = read_sources(&manifest_path(cfg)?)?
        .into_iter()
        .filter(|(e, _)| e.label == Label::Real && e.split == Split::Train)
        .collect();
    if sources.is_empty() {
        return Err(Error::Manifest("no real training entries".into()).into());
    }
    let images = exec
        .map(&sources, |(_, p)| datapipe::load_image(p, cfg.image_size))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let schedule = cfg.schedule()?;
    let extractor = build_extractor(cfg)?;
    let mut denoiser = init_denoiser(&cfg.denoiser_config())?;
    let tc = &cfg.training;
    let mut opt = Adam::new(denoiser.params().values());

    let b = tc.batch_size;
    let per_epoch = images.len().div_ceil(b);
    let mut total = tc.epochs * per_epoch;
    if let Some(cap) = tc.max_steps {
        total = total.min(cap);
    }
    let train_seed = cfg.training_seed();
    let (order_seed, item_seed, mask_seed) = (
        seed::derive_tag(train_seed, "order"),
        seed::derive_tag(train_seed, "item"),
        seed::derive_tag(train_seed, "mask"),
    );
    let params = cfg.mask_params();
    let start = Instant::now();
    let mut log = String::new();
    let mut order: Vec<usize> = Vec::new();
    let mut last = None;
    for step in 0..total {
        let (epoch, pos) = (step / per_epoch, step % per_epoch);
        if pos == 0 {
            order = (0..images.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive(order_seed, epoch as u64)));
        }
        let idx = &order[pos * b..((pos + 1) * b).min(order.len())];
        let batch = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let n = (step * b + j) as u64;
                let mask =
                    masks::generate_random_mask(&params.with_seed(seed::derive(mask_seed, n)))?;
                Ok(TrainItem {
                    x0: images[i].clone(),
                    mask,
                    seed: seed::derive(item_seed, n),
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let m = losses::train_step(
            &mut denoiser,
            &batch,
            &schedule,
            &extractor,
            tc,
            &mut opt,
            exec,
        )?;
        let rec = MetricsRecord {
            step: step + 1,
            loss: m.loss,
            loss_pixel: m.loss_pixel,
            loss_fea: m.loss_fea,
            lr: tc.learning_rate,
            wallclock_ms: start.elapsed().as_millis() as u64,
        };
        log += &serde_json::to_string(&rec).unwrap();
        log.push('\n');
        last = Some(rec);
    }
    write(&out.join("metrics.jsonl"), log)?;
    let ckpt = cfg
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("denoiser.ckpt"));
    checkpoint::save_denoiser(&ckpt, &denoiser)?;
    let summary = json!({
        "steps": total,
        "final_loss": last.map(|r| r.loss),
        "checkpoint": ckpt.to_string_lossy(),
        "checksum": denoiser.checksum(),
    });
    write(
        &out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap() + "\n",
    )?;
    Ok(summary)
}

struct Generated {
    base: ManifestEntry,
    source: ImageTensor,
    image: ImageTensor,
    mask: Mask,
    mask_seed: u64,
    sampler_seed: u64,
}

/// Inpaints `per_image` random masks into each source.
fn generate(
    cfg: &RunConfig,
    denoiser: &Denoiser,
    sources: &[(ManifestEntry, PathBuf)],
    exec: Exec,
) -> Result<Vec<Generated>, CliError> {
    let schedule = cfg.schedule()?;
    let params = cfg.mask_params();
    let sampler_stage = cfg.stage_seed("sampler");
    let k = cfg.augment.per_image;
    let images = exec
        .map(sources, |(_, p)| datapipe::load_image(p, cfg.image_size))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let plan: Vec<(usize, u64, u64)> = (0..sources.len() * k)
        .map(|n| {
            (
                n / k,
                seed::derive(params.seed, n as u64),
                seed::derive(sampler_stage, n as u64),
            )
        })
        .collect();
    let masks = exec
        .map(&plan, |&(_, ms, _)| {
            masks::generate_random_mask(&params.with_seed(ms))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<SampleJob> = plan
        .iter()
        .zip(&masks)
        .map(|(&(i, _, ss), m)| SampleJob {
            x0: images[i].clone(),
            mask: m.clone(),
            seed: ss,
        })
        .collect();
    let outputs = diffusion::sample_batch(denoiser, &jobs, &schedule, exec)?;
    Ok(plan
        .into_iter()
        .zip(masks)
        .zip(outputs)
        .map(|(((i, ms, ss), mask), image)| {
            let mut base = sources[i].0.clone();
            base.path = sources[i].1.to_string_lossy().into_owned();
            Generated {
                base,
                source: images[i].clone(),
                image,
                mask,
                mask_seed: ms,
                sampler_seed: ss,
            }
        })
        .collect())
}

/// Writes generated samples under `out/sub` and returns their entries with
/// paths relative to `out`, plus the largest pre-quantization outside-mask
/// error.
fn persist(
    out: &Path,
    sub: &str,
    gens: &[Generated],
    run: &str,
) -> Result<(Vec<ManifestEntry>, f64), CliError> {
    let dir = out.join(sub);
    let mut entries = Vec::with_capacity(gens.len());
    let mut max_err: f64 = 0.0;
    for g in gens {
        max_err = max_err.max(evalmetrics::outside_mask_error(
            &g.source, &g.image, &g.mask,
        )?);
        let prov = Provenance {
            mask_seed: g.mask_seed,
            sampler_seed: g.sampler_seed,
            generator_run: run.to_string(),
        };
        let mut e = datapipe::write_augmented(&g.base, &g.image, &g.mask, &dir, &prov)?;
        let name = Path::new(&e.path)
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned();
        e.path = format!("{sub}/{name}");
        entries.push(e);
    }
    Ok((entries, max_err))
}

fn feature_fid(
    extractor: &ConvFeatureExtractor,
    a: &[&ImageTensor],
    b: &[&ImageTensor],
    exec: Exec,
) -> Result<Option<f64>, CliError> {
    if a.len() < 2 || b.len() < 2 {
        return Ok(None);
    }
    let feats = |xs: &[&ImageTensor]| -> Result<FeatureSet, Error> {
        let v = exec
            .map(xs, |x| extractor.extract(x))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        FeatureSet::new(v)
    };
    Ok(Some(evalmetrics::fid(
        &feats(a)?,
        &feats(b)?,
        evalmetrics::DEFAULT_EPS_REG,
    )?))
}

pub fn sample(cfg: &RunConfig, input: Option<&Path>, exec: Exec) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let sources = match input {
        Some(p) => {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let abs = absolute(p);
            vec![(
                ManifestEntry::real(abs.to_string_lossy(), stem, Split::Test),
                abs,
            )]
        }
        None => read_sources(&manifest_path(cfg)?)?
            .into_iter()
            .filter(|(e, _)| e.label == Label::Real)
            .collect(),
    };
    let denoiser = load_generator(cfg)?;
    let run = generator_run(&denoiser);
    let gens = generate(cfg, &denoiser, &sources, exec)?;
    let (entries, err) = persist(&out, "samples", &gens, &run)?;
    datapipe::write_manifest(&out.join("sampled_manifest.jsonl"), &entries)?;
    let report = MetricsReport {
        fid: None,
        auc: None,
        outside_mask_error: Some(err),
        n_samples: entries.len(),
    };
    write_report(&out, "sample_report", &report)?;
    Ok(serde_json::to_value(&report).unwrap())
}

pub fn augment(cfg: &RunConfig, exec: Exec) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let all = read_sources(&manifest_path(cfg)?)?;
    let sources: Vec<_> = all
        .iter()
        .filter(|(e, _)| e.label == Label::Real && e.split == Split::Train)
        .cloned()
        .collect();
    let denoiser = load_generator(cfg)?;
    let run = generator_run(&denoiser);
    let gens = generate(cfg, &denoiser, &sources, exec)?;
    let (new_entries, err) = persist(&out, "augmented", &gens, &run)?;

    let mut manifest: Vec<ManifestEntry> = all
        .into_iter()
        .map(|(mut e, p)| {
            e.path = p.to_string_lossy().into_owned();
            e
        })
        .collect();
    manifest.extend(new_entries);
    datapipe::write_manifest(&out.join("augmented_manifest.jsonl"), &manifest)?;

    let extractor = build_extractor(cfg)?;
    let src: Vec<&ImageTensor> = gens.iter().map(|g| &g.source).collect();
    let gen: Vec<&ImageTensor> = gens.iter().map(|g| &g.image).collect();
    let report = MetricsReport {
        fid: feature_fid(&extractor, &src, &gen, exec)?,
        auc: None,
        outside_mask_error: Some(err),
        n_samples: gens.len(),
    };
    write_report(&out, "augment_report", &report)?;
    Ok(serde_json::to_value(&report).unwrap())
}

/// PNG files of a directory (masks excluded) or the entries of a manifest.
fn collect_images(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"))
                    && !p
                        .file_stem()
                        .is_some_and(|s| s.to_string_lossy().ends_with("_mask"))
            })
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(read_sources(path)?.into_iter().map(|(_, p)| p).collect())
    }
}

pub fn eval_fid(cfg: &RunConfig, real: &Path, fake: &Path, exec: Exec) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let load = |p: &Path| -> Result<Vec<ImageTensor>, CliError> {
        let files = collect_images(p)?;
        Ok(exec
            .map(&files, |f| datapipe::load_image(f, cfg.image_size))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?)
    };
    let (a, b) = (load(real)?, load(fake)?);
    let extractor = build_extractor(cfg)?;
    let fid = feature_fid(
        &extractor,
        &a.iter().collect::<Vec<_>>(),
        &b.iter().collect::<Vec<_>>(),
        exec,
    )?
    .ok_or_else(|| Error::UndefinedMetric("FID needs at least 2 images per set".into()))?;
    let report = MetricsReport {
        fid: Some(fid),
        auc: None,
        outside_mask_error: None,
        n_samples: b.len(),
    };
    write_report(&out, "fid_report", &report)?;
    Ok(serde_json::to_value(&report).unwrap())
}

/// Reads `score,label` rows; a non-numeric first line is taken as a header.
pub fn parse_scores(text: &str) -> Result<ScoredLabels, Error> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (s, l) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
        match (s.parse::<f64>(), l.parse::<u8>()) {
            (Ok(s), Ok(l)) => {
                scores.push(s);
                labels.push(l);
            }
            _ if i == 0 => continue,
            _ => return Err(Error::Manifest(format!("scores line {}: `{line}`", i + 1))),
        }
    }
    ScoredLabels::new(scores, labels)
}

pub fn eval_auc(cfg: &RunConfig, scores: &Path) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let text = fs::read_to_string(scores).map_err(|e| Error::Io {
        path: scores.to_path_buf(),
        source: e,
    })?;
    let data = parse_scores(&text)?;
    let report = MetricsReport {
        fid: None,
        auc: Some(evalmetrics::auc(&data)),
        outside_mask_error: None,
        n_samples: data.scores().len(),
    };
    write_report(&out, "auc_report", &report)?;
    Ok(serde_json::to_value(&report).unwrap())
}

pub fn inspect_schedule(cfg: &RunConfig) -> CmdResult {
    let out = prepare_out_dir(cfg)?;
    let s = cfg.schedule()?;
    let path = out.join("schedule.csv");
    write(&path, s.to_csv())?;
    Ok(json!({
        "T": s.steps(),
        "alpha_bar_T": s.alpha_bar(s.steps()),
        "csv": path.to_string_lossy(),
    }))
}
