use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array4, Axis};
use serde_json::json;
use sha2::{Digest, Sha256};

use vone::analysis::{
    compare_variants, mean_abs_downstream_weights, response_stats_for_images, stats_batch, write_bins_csv,
    write_correlations_csv, write_impact_csv, write_stats_csv, BinTable, ResponseEdges, RfEdges, VariantAnalysis,
};
use vone::backend_train::{self, load_checkpoint, save_checkpoint, v1_features, BackendConfig, TrainConfig, TrainState};
use vone::container::TensorFile;
use vone::corruptions::{
    corrupt as corrupt_image, evaluate_precorrupted, evaluate_robustness, image_rng, write_results_csv, CorruptionKind,
    CorruptionSpec, SeverityTable,
};
use vone::data_pipeline::{
    load_directory_dataset, make_synthetic_dataset, read_image, save_image, DatasetIndex, ImageSet, SyntheticConfig,
    IMAGE_EXTENSIONS,
};
use vone::gfb::{build_filter_bank, BankGeometry, FilterBank};
use vone::sampling::{load_distribution_table, sample as sample_descriptors, Regime, SamplerConfig, SfScale};

use crate::manifest::Manifest;
use crate::{
    AnalyzeArgs, CorruptArgs, DumpKernelsArgs, EvalArgs, RespondArgs, SampleArgs, SynthDataArgs, TrainArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Loads a split given as `root/split`.
pub(crate) fn load_split(dir: &Path, image_size: usize) -> Result<(ImageSet, DatasetIndex)> {
    let split = dir.file_name().and_then(|s| s.to_str()).ok_or_else(|| usage(format!("bad split path {}", dir.display())))?;
    let root = dir.parent().unwrap_or(Path::new("."));
    let index = load_directory_dataset(root, split, image_size)?;
    let (set, skipped) = index.load()?;
    if skipped > 0 {
        log::warn!("{skipped} unreadable images skipped in {}", dir.display());
    }
    Ok((set, index))
}

/// Checkpoint directories under `path`: itself, or its `seed_<s>`
/// sub-directories in seed order.
fn checkpoint_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join("state.toml").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
        let p = entry?.path();
        let seed = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("seed_"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(s) = seed {
            if p.join("state.toml").is_file() {
                found.push((s, p));
            }
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no checkpoint in {}", path.display());
    }
    Ok(found.into_iter().map(|f| f.1).collect())
}

fn load_trained(ckpt: &Path, bank_path: Option<&Path>) -> Result<(TrainState, TrainConfig, FilterBank, PathBuf)> {
    let (state, cfg) = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let bank_path = bank_path.map(Path::to_path_buf).unwrap_or_else(|| ckpt.join("bank.bin"));
    let bank = FilterBank::load(&bank_path)?;
    if bank.checksum() != state.bank_checksum {
        bail!("bank {} is not the bank checkpoint {} was trained with", bank_path.display(), ckpt.display());
    }
    Ok((state, cfg, bank, bank_path))
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let sf_scale = match a.sf_scale.as_str() {
        "log" => SfScale::Log,
        "linear" => SfScale::Linear,
        other => return Err(usage(format!("unknown --sf-scale `{other}` (expected log or linear)"))),
    };
    let table = a.table.as_deref().map(load_distribution_table).transpose()?;
    let geometry = BankGeometry {
        ppd: a.ppd,
        stride: a.stride,
        kernel_size: a.kernel_size,
        input_channels: 3,
        input_size: a.input_size,
    };
    let run = |seed: u64, out: &Path| -> Result<()> {
        let mut cfg = SamplerConfig::new(a.regime, seed);
        cfg.n_simple = a.n_simple;
        cfg.n_complex = a.n_complex;
        cfg.uniform_sf_scale = sf_scale;
        if a.regime == Regime::Biological {
            if let Some(t) = &table {
                cfg.table = Some(t.clone());
            }
        }
        let bank = build_filter_bank(sample_descriptors(&cfg)?, geometry)?;
        create_parent(out)?;
        bank.save(out)?;
        let mut m = Manifest::new("sample", Some(seed), json!({ "sampler": cfg, "geometry": geometry }));
        if let Some(t) = &cfg.table {
            m.input_checksum(format!("distribution_table:{}", t.name), t.checksum());
        }
        if let Some(p) = &a.table {
            m.input_file(p)?;
        }
        m.output_file(out)?;
        m.write_beside(out)?;
        log::info!("{} bank, seed {seed}: {} channels -> {}", a.regime.as_str(), bank.num_channels(), out.display());
        Ok(())
    };
    match &a.seeds {
        Some(seeds) => seeds.iter().try_for_each(|&s| run(s, &seed_dir(&a.out, s).join("bank.bin"))),
        None => run(a.seed, &a.out),
    }
}

pub fn dump_kernels(a: DumpKernelsArgs) -> Result<()> {
    let bank = FilterBank::load(&a.bank)?;
    let all: Vec<usize> = (0..bank.num_kernels()).collect();
    let kernels = a.kernels.clone().unwrap_or(all);
    if let Some(&bad) = kernels.iter().find(|&&j| j >= bank.num_kernels()) {
        return Err(usage(format!("kernel {bad} out of range (bank has {})", bank.num_kernels())));
    }
    create_dir(&a.out)?;
    for &j in &kernels {
        let p = a.out.join(format!("kernel_{j:04}.pgm"));
        let mut f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        bank.write_kernel_pgm(j, &mut f)?;
    }
    let mut m = Manifest::new("dump-kernels", None, json!({ "kernels": kernels.len() }));
    m.input_file(&a.bank)?;
    m.write_in(&a.out)?;
    Ok(())
}

pub fn respond(a: RespondArgs) -> Result<()> {
    let bank = FilterBank::load(&a.bank)?;
    let (set, index) = load_split(&a.images, bank.geometry().input_size)?;
    let n = a.limit.map_or(set.len(), |l| l.min(set.len()));
    let idx: Vec<usize> = (0..n).collect();
    let set = set.select(&idx);
    let stats = response_stats_for_images(&bank, &set, &idx)?;
    let mut tf = TensorFile::default();
    if !a.stats_only {
        let maps = v1_features(&bank, &set.images)?;
        let (c, h, w) = maps[0].dim();
        let mut all = Array4::<f32>::zeros((n, c, h, w));
        for (mut dst, src) in all.axis_iter_mut(Axis(0)).zip(&maps) {
            dst.assign(src);
        }
        tf.push("activations", all.into_dyn());
    }
    let vec = |v: &[f64]| Array1::from_iter(v.iter().map(|&x| x as f32)).into_dyn();
    tf.push("labels", Array1::from_iter(set.labels.iter().map(|&l| l as f32)).into_dyn());
    tf.push("mean_activation", vec(&stats.mean_activation));
    tf.push("sparseness", vec(&stats.sparseness));
    create_parent(&a.out)?;
    tf.save(&a.out)?;
    let mut m = Manifest::new("respond", None, json!({ "images": n, "stats_only": a.stats_only }));
    m.input_file(&a.bank)?;
    m.input_checksum(a.images.display().to_string(), index.checksum);
    m.output_file(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml_str(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let runs: Vec<(u64, PathBuf)> = match &a.seeds {
        Some(seeds) => seeds.iter().map(|&s| (s, seed_dir(&a.out, s))).collect(),
        None => vec![(a.seed.unwrap_or(cfg.seed), a.out.clone())],
    };
    for (seed, out) in runs {
        let bank_path = if a.bank.is_dir() { seed_dir(&a.bank, seed).join("bank.bin") } else { a.bank.clone() };
        let bank = FilterBank::load(&bank_path)?;
        let size = bank.geometry().input_size;
        let (train_set, train_idx) = load_split(&a.data.join(&a.train_split), size)?;
        let (val_set, val_idx) = load_split(&a.data.join(&a.val_split), size)?;
        if train_set.class_names != val_set.class_names {
            bail!("train and val class directories differ");
        }
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let backend_cfg = BackendConfig::new(bank.num_channels(), train_set.num_classes());
        log::info!("training seed {seed} on {} images, {} classes", train_set.len(), train_set.num_classes());
        let state = backend_train::train(&bank, &backend_cfg, &cfg, &train_set, &val_set)?;
        save_checkpoint(&out, &state, &cfg)?;
        bank.save(out.join("bank.bin"))?;
        let mut m = Manifest::new("train", Some(seed), json!({ "train": cfg, "backend": backend_cfg }));
        m.input_file(&bank_path)?;
        if let Some(p) = &a.config {
            m.input_file(p)?;
        }
        m.input_checksum(a.data.join(&a.train_split).display().to_string(), train_idx.checksum);
        m.input_checksum(a.data.join(&a.val_split).display().to_string(), val_idx.checksum);
        for f in ["backend.bin", "optimizer.bin", "state.toml", "metrics.csv", "bank.bin"] {
            m.output_file(&out.join(f))?;
        }
        m.write_in(&out)?;
        if let Some(last) = state.metrics.last() {
            log::info!("seed {seed}: val_acc {:.4} after {} epochs", last.val_acc, last.epoch);
        }
    }
    Ok(())
}

fn corruption_table(path: Option<&Path>) -> Result<SeverityTable> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(SeverityTable::from_toml_str(&text)?)
        }
        None => Ok(SeverityTable::default()),
    }
}

fn parse_kinds(s: &str) -> Result<Vec<CorruptionKind>> {
    if s.trim() == "none" {
        return Ok(Vec::new());
    }
    CorruptionKind::parse_list(s).map_err(|e| usage(e.to_string()))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let kinds = parse_kinds(&a.corruptions)?;
    let specs: Vec<CorruptionSpec> = kinds
        .iter()
        .flat_map(|&k| a.severities.iter().map(move |&s| CorruptionSpec::new(k, s)))
        .collect::<vone::Result<_>>()
        .map_err(|e| usage(e.to_string()))?;
    let table = corruption_table(a.corruption_config.as_deref())?;
    let model = a.model.clone().unwrap_or_else(|| dir_name(&a.ckpt));
    let mut m = Manifest::new(
        "eval",
        Some(a.corruption_seed),
        json!({ "model": model, "kinds": kinds, "severities": a.severities, "table": table_json(&table) }),
    );
    let mut rows = Vec::new();
    for ckpt in checkpoint_dirs(&a.ckpt)? {
        let (state, cfg, bank, bank_path) = load_trained(&ckpt, None)?;
        let (set, index) = load_split(&a.data, bank.geometry().input_size)?;
        m.input_file(&bank_path)?;
        m.input_file(&ckpt.join("backend.bin"))?;
        m.input_checksum(a.data.display().to_string(), index.checksum.clone());
        let report = match &a.precorrupted {
            Some(dir) => evaluate_precorrupted(&bank, &state.backend, &set, dir, &kinds, bank.geometry().input_size)?,
            None => evaluate_robustness(&bank, &state.backend, &set, &specs, &table, a.corruption_seed)?,
        };
        log::info!("{model} seed {}: clean top1 {:.4}", cfg.seed, report.clean);
        for k in report.kinds() {
            log::info!("  {k}: mean top1 {:.4}", report.kind_mean(k).unwrap_or(f64::NAN));
        }
        rows.extend(report.rows(&model, cfg.seed));
    }
    create_parent(&a.out)?;
    write_results_csv(&a.out, &rows)?;
    m.output_file(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

fn table_json(t: &SeverityTable) -> serde_json::Value {
    serde_json::to_value(t).unwrap_or(serde_json::Value::Null)
}

pub fn corrupt(a: CorruptArgs) -> Result<()> {
    let kind: CorruptionKind = a.kind.parse().map_err(|e: vone::Error| usage(e.to_string()))?;
    let spec = CorruptionSpec::new(kind, a.severity).map_err(|e| usage(e.to_string()))?;
    let table = corruption_table(a.config.as_deref())?;
    if !a.input.is_dir() {
        return Err(usage(format!("{} is not a directory", a.input.display())));
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&a.input)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    let mut hasher = Sha256::new();
    for (i, f) in files.iter().enumerate() {
        let rel = f.strip_prefix(&a.input).expect("walked under input");
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
        let img = read_image(f)?;
        let out = corrupt_image(&img, spec, &table, &mut image_rng(a.seed, spec, i))?;
        let dst = a.out.join(rel).with_extension("png");
        create_parent(&dst)?;
        save_image(&dst, &out)?;
    }
    create_dir(&a.out)?;
    let param = if spec.severity == 0 { None } else { Some(table.param(kind, spec.severity)) };
    let mut m = Manifest::new(
        "corrupt",
        Some(a.seed),
        json!({ "kind": kind, "severity": spec.severity, "param": param, "images": files.len() }),
    );
    m.input_checksum(a.input.display().to_string(), hex::encode(hasher.finalize()));
    if let Some(p) = &a.config {
        m.input_file(p)?;
    }
    m.write_in(&a.out)?;
    log::info!("{} images -> {}", files.len(), a.out.display());
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let n = a.ckpt.len();
    if n > 2 {
        return Err(usage("analyze takes one or two checkpoints"));
    }
    if !a.bank.is_empty() && a.bank.len() != n {
        return Err(usage("give one --bank per --ckpt, or none"));
    }
    if !a.name.is_empty() && a.name.len() != n {
        return Err(usage("give one --name per --ckpt, or none"));
    }
    let mut names: Vec<String> = if a.name.is_empty() { a.ckpt.iter().map(|p| dir_name(p)).collect() } else { a.name.clone() };
    if n == 2 && names[0] == names[1] {
        names = vec![format!("{}_a", names[0]), format!("{}_b", names[1])];
    }
    create_dir(&a.out)?;
    let mut m = Manifest::new(
        "analyze",
        Some(a.seed),
        json!({ "names": names, "batch": a.batch, "activation_bins": a.activation_bins, "sparseness_bins": a.sparseness_bins, "rf_edges": { "sf": RfEdges::default().sf, "nx": RfEdges::default().nx } }),
    );
    let mut variants = Vec::with_capacity(n);
    for (i, ckpt) in a.ckpt.iter().enumerate() {
        let (state, _, bank, bank_path) = load_trained(ckpt, a.bank.get(i).map(PathBuf::as_path))?;
        let (set, index) = load_split(&a.images, bank.geometry().input_size)?;
        let idx = stats_batch(set.len(), a.batch, a.seed);
        if idx.len() < a.batch {
            log::warn!("statistics batch has {} images (requested {})", idx.len(), a.batch);
        }
        let stats = response_stats_for_images(&bank, &set, &idx)?;
        let weights = mean_abs_downstream_weights(state.backend.bottleneck_weights().mapv(f64::from).view())?;
        m.input_file(&bank_path)?;
        m.input_file(&ckpt.join("backend.bin"))?;
        m.input_checksum(a.images.display().to_string(), index.checksum);
        variants.push(VariantAnalysis { name: names[i].clone(), descriptors: bank.descriptors().to_vec(), stats, weights });
    }
    let rf_edges = RfEdges::default();
    let outputs: Vec<PathBuf> = if n == 1 {
        let v = &variants[0];
        let resp_edges = ResponseEdges::pooled(&[&v.stats], a.activation_bins, a.sparseness_bins)?;
        let rf = v.rf_table(&rf_edges)?;
        let resp = v.response_table(&resp_edges)?;
        write_stats_csv(a.out.join("stats.csv"), &v.stats_rows())?;
        write_tables(&a.out, &[(&v.name, &rf)], &[(&v.name, &resp)])?;
        log_empty_rf_cells(&v.name, &rf);
        vec!["stats.csv".into(), "bins_rf.csv".into(), "bins_resp.csv".into(), "impact.csv".into()]
    } else {
        let c = compare_variants(&variants[0], &variants[1], &rf_edges, (a.activation_bins, a.sparseness_bins))?;
        let mut outs = Vec::new();
        for v in &variants {
            let d = a.out.join(&v.name);
            create_dir(&d)?;
            write_stats_csv(d.join("stats.csv"), &v.stats_rows())?;
            outs.push(Path::new(&v.name).join("stats.csv"));
        }
        write_tables(
            &a.out,
            &[(&c.names[0], &c.rf[0]), (&c.names[1], &c.rf[1])],
            &[(&c.names[0], &c.response[0]), (&c.names[1], &c.response[1])],
        )?;
        write_correlations_csv(a.out.join("correlations.csv"), &c.correlations)?;
        for (name, t) in c.names.iter().zip(&c.rf) {
            log_empty_rf_cells(name, t);
        }
        for k in &c.correlations {
            match &k.result {
                Ok(r) => log::info!("{}: r = {:.4}, p = {:.3e}, n = {}", k.name, r.r, r.p, r.n),
                Err(e) => log::warn!("{}: undefined ({e})", k.name),
            }
        }
        outs.extend(["bins_rf.csv", "bins_resp.csv", "impact.csv", "correlations.csv"].map(PathBuf::from));
        outs
    };
    for o in outputs {
        m.output_file(&a.out.join(o))?;
    }
    m.write_in(&a.out)?;
    Ok(())
}

fn write_tables(out: &Path, rf: &[(&str, &BinTable)], resp: &[(&str, &BinTable)]) -> Result<()> {
    write_bins_csv(out.join("bins_rf.csv"), rf)?;
    write_bins_csv(out.join("bins_resp.csv"), resp)?;
    let all: Vec<(&str, &BinTable)> = rf.iter().chain(resp).copied().collect();
    write_impact_csv(out.join("impact.csv"), &all)?;
    Ok(())
}

fn log_empty_rf_cells(name: &str, t: &BinTable) {
    let empty: Vec<String> = t
        .cells
        .iter()
        .filter(|c| c.count == 0)
        .map(|c| format!("{}:sf{}:nx{}", c.cell_type.as_str(), c.a, c.b))
        .collect();
    log::info!("{name}: {} empty RF bins {:?}", empty.len(), empty);
}

pub fn synth_data(a: SynthDataArgs) -> Result<()> {
    if a.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    let cfg = SyntheticConfig { n_classes: a.classes, image_size: a.size, ..SyntheticConfig::default() };
    let written = make_synthetic_dataset(&a.out, &cfg, &[("train", a.train_per_class), ("val", a.val_per_class)], a.seed)?;
    let mut m = Manifest::new("synth-data", Some(a.seed), json!({ "synthetic": cfg, "train_per_class": a.train_per_class, "val_per_class": a.val_per_class }));
    for split in ["train", "val"] {
        let idx = load_directory_dataset(&a.out, split, a.size)?;
        m.outputs.insert(split.into(), idx.checksum);
    }
    m.write_in(&a.out)?;
    log::info!("{written} images -> {}", a.out.display());
    Ok(())
}
