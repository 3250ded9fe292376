use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use sketch_anchor::anchors::AnchorSet;
use sketch_anchor::encoder::encode_features;
use sketch_anchor::experiment::{Dataset, ExperimentConfig, Prepared, RunResult, REPORT_KS};
use sketch_anchor::retrieval::{
    evaluate, select_images_by_anchor_distance, Gallery, GallerySource, RetrievalReport, SelectionMode,
};
use sketch_anchor::trainer::{lr_at, Ablation, ModelParams, TrainConfig};

use crate::manifest::RunManifest;
use crate::{Cli, Command, DataArgs, DomainArg, EvalArgs, GenArgs, GzssArgs, LrArgs, SelectArgs, TrainArgs, TrainFlags, UsageError};

pub const CHECKPOINT_FILE: &str = "checkpoint.fvec";
pub const CURVE_FILE: &str = "curve.csv";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const PER_QUERY_FILE: &str = "per_query.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const LR_CURVE_FILE: &str = "lr_curve.csv";
pub const GZSS_FILE: &str = "gzss.csv";
pub const ANCHORS_DIR: &str = "anchors";

const SELECTION_SWEEP: [usize; 6] = [200, 100, 50, 10, 5, 1];

pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(config, a, out),
        Command::ComputeAnchors(a) => compute_anchors(config, a, out),
        Command::Train(a) => train(config, a, out),
        Command::Eval(a) => eval(config, a, out),
        Command::Ablate(a) => ablate(config, a, out),
        Command::SelectImages(a) => select_images(config, a, out),
        Command::LrCurve(a) => lr_curve(config, a, out),
        Command::GzssEval(a) => gzss_eval(config, a, out),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

fn apply_train_flags(train: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.ablation {
        train.ablation = v;
    }
    if let Some(v) = f.iterations {
        train.iterations = v;
    }
    if let Some(v) = f.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = f.lr {
        train.base_lr = v;
    }
    if let Some(v) = f.min_lr {
        train.min_lr = v;
    }
    if let Some(v) = f.warmup {
        train.warmup_iters = v;
    }
    if let Some(v) = f.tau {
        train.tau = v;
    }
    if let Some(v) = f.eval_every {
        train.eval_every = v;
    }
}

fn apply_seed(config: &mut ExperimentConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        config.train.seed = s;
    }
}

fn prepare(config: &ExperimentConfig, data: &DataArgs) -> Result<Prepared> {
    let seed = config.train.seed;
    let prepared = match &data.data {
        Some(dir) => {
            let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            Prepared::new(ds, config.val_per_class, seed)?
        }
        None => Prepared::synthetic(config, seed)?,
    };
    Ok(prepared)
}

fn resolve(mut config: ExperimentConfig, args: &TrainArgs) -> Result<ExperimentConfig> {
    apply_seed(&mut config, args.data.seed);
    apply_train_flags(&mut config.train, &args.train);
    config.train.validate()?;
    Ok(config)
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn gen_synthetic(mut config: ExperimentConfig, a: &GenArgs, out: &Path) -> Result<()> {
    apply_seed(&mut config, a.seed);
    let s = &mut config.synthetic;
    if let Some(v) = a.classes {
        s.classes = v;
    }
    if let Some(v) = a.per_class {
        s.per_class = v;
    }
    if let Some(v) = a.dim {
        s.dim = v;
    }
    if let Some(v) = a.domain_gap {
        s.domain_gap = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    if let Some(v) = a.unseen {
        config.unseen_classes = v;
    }
    if config.unseen_classes >= config.synthetic.classes {
        return Err(UsageError(format!(
            "--unseen {} must be below --classes {}",
            config.unseen_classes, config.synthetic.classes
        ))
        .into());
    }
    let mut manifest = RunManifest::new("gen-synthetic", &config, None);
    manifest.write(out)?;
    let ds = Dataset::synthetic(&config.synthetic, config.unseen_classes, config.train.seed)?;
    ds.save(out)?;
    let back = Dataset::load(out).context("re-reading the written dataset")?;
    log::info!(
        "wrote {} sketches and {} images over {} classes to {}",
        back.sketches.len(),
        back.images.len(),
        back.images.num_classes(),
        out.display()
    );
    manifest.finish(out, vec![out.to_path_buf()])
}

fn compute_anchors(mut config: ExperimentConfig, a: &DataArgs, out: &Path) -> Result<()> {
    apply_seed(&mut config, a.seed);
    let prepared = prepare(&config, a)?;
    let anchors = prepared
        .anchors
        .as_ref()
        .ok_or_else(|| anyhow!("the dataset has no word vectors, so no anchors can be built"))?;
    let dir = out.join(ANCHORS_DIR);
    anchors.save(&dir)?;
    let back = AnchorSet::load(&dir).context("re-reading the written anchors")?;
    log::info!("wrote anchors for {} seen classes to {}", back.len(), dir.display());
    Ok(())
}

fn save_run(result: &RunResult, out: &Path, config: &TrainConfig) -> Result<Vec<PathBuf>> {
    let ckpt = out.join(CHECKPOINT_FILE);
    result.outcome.params.save_checkpoint(&ckpt)?;
    ModelParams::load_checkpoint(&ckpt).context("re-reading the written checkpoint")?;
    Ok(vec![
        ckpt,
        write_text(&out.join(CURVE_FILE), &result.outcome.curve_csv())?,
        write_text(&out.join(LOSS_LOG_FILE), &result.outcome.loss_log_csv(&config.loss_config().enabled))?,
        write_text(&out.join(REPORT_FILE), &result.report.to_csv())?,
        write_text(&out.join(PER_QUERY_FILE), &result.report.per_query_csv())?,
    ])
}

fn train(config: ExperimentConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let config = resolve(config, a)?;
    let prepared = prepare(&config, &a.data)?;
    let mut manifest = RunManifest::new("train", &config, a.data.data.as_deref());
    manifest.write(out)?;
    let result = prepared.run(&config.train)?;
    if let Some(m) = result.outcome.initial_map() {
        log::info!("untrained validation mAP {m:.4}");
    }
    print!("{}", result.report.table());
    let outputs = save_run(&result, out, &config.train)?;
    manifest.finish(out, outputs)
}

fn eval(mut config: ExperimentConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    apply_seed(&mut config, a.data.seed);
    let prepared = prepare(&config, &a.data)?;
    let params = ModelParams::load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let pick = |d: DomainArg| match d {
        DomainArg::Sketch => &prepared.test_sketches,
        DomainArg::Image => &prepared.test_images,
    };
    let queries = encode_features(&params.encoder, pick(a.queries))?;
    let gallery = encode_features(&params.encoder, pick(a.gallery))?;
    let report = evaluate(&queries, &Gallery::from_features(&gallery), &REPORT_KS)?;
    print!("{}", report.table());
    write_text(&out.join(REPORT_FILE), &report.to_csv())?;
    write_text(&out.join(PER_QUERY_FILE), &report.per_query_csv())?;
    Ok(())
}

fn metrics(report: &RetrievalReport) -> String {
    let p = |k| report.p_at(k).unwrap_or(f64::NAN);
    format!("{},{},{},{}", report.map, report.map_at_200, p(100), p(200))
}

const METRIC_HEADER: &str = "mAP,mAP@200,P@100,P@200";

fn ablate(config: ExperimentConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let config = resolve(config, a)?;
    let prepared = prepare(&config, &a.data)?;
    let mut manifest = RunManifest::new("ablate", &config, a.data.data.as_deref());
    manifest.write(out)?;
    let mut csv = format!("ablation,visual_anchors,word_anchors,randomized_inputs,gcn,{METRIC_HEADER}\n");
    let mut outputs = Vec::new();
    println!("{:<6} {:>4} {:>4} {:>4} {:>4} {:>8} {:>8}", "row", "vis", "word", "rand", "gcn", "mAP", "P@100");
    for row in Ablation::ALL {
        let train = TrainConfig {
            ablation: row,
            ..config.train.clone()
        };
        let result = prepared.run(&train)?;
        let flags = [row.visual_anchors(), row.word_anchors(), row.randomized_inputs(), row.gcn()];
        let _ = writeln!(
            csv,
            "{},{},{}",
            row.name(),
            flags.map(|f| u8::from(f).to_string()).join(","),
            metrics(&result.report)
        );
        let mark = |f: bool| if f { "x" } else { "" };
        println!(
            "{:<6} {:>4} {:>4} {:>4} {:>4} {:>8.4} {:>8.4}",
            row.name(),
            mark(flags[0]),
            mark(flags[1]),
            mark(flags[2]),
            mark(flags[3]),
            result.report.map,
            result.report.p_at(100).unwrap_or(f64::NAN)
        );
        outputs.push(write_text(&out.join(format!("curve_{}.csv", row.name())), &result.outcome.curve_csv())?);
    }
    outputs.push(write_text(&out.join(ABLATION_FILE), &csv)?);
    manifest.finish(out, outputs)
}

fn select_images(config: ExperimentConfig, a: &SelectArgs, out: &Path) -> Result<()> {
    let config = resolve(config, &a.run)?;
    let sweep = a.n.clone().unwrap_or_else(|| SELECTION_SWEEP.to_vec());
    if sweep.contains(&0) {
        return Err(UsageError("--n values must be at least 1".into()).into());
    }
    let prepared = prepare(&config, &a.run.data)?;
    let anchors = prepared
        .anchors
        .as_ref()
        .ok_or_else(|| anyhow!("image selection needs visual anchors, so the dataset needs word vectors"))?;
    let mut manifest = RunManifest::new("select-images", &config, a.run.data.data.as_deref());
    manifest.write(out)?;

    let mut csv = format!("mode,n,images,{METRIC_HEADER}\n");
    let full = prepared.run(&config.train)?;
    let _ = writeln!(csv, "all,,{},{}", prepared.train_images.len(), metrics(&full.report));
    println!("{:<9} {:>4} {:>8} {:>8}", "mode", "n", "mAP", "P@100");
    println!("{:<9} {:>4} {:>8.4} {:>8.4}", "all", "-", full.report.map, full.report.p_at(100).unwrap_or(f64::NAN));
    for mode in [SelectionMode::Closest, SelectionMode::Farthest] {
        for &n in &sweep {
            let images = select_images_by_anchor_distance(&prepared.train_images, anchors, n, mode)?;
            let count = images.len();
            let result = prepared.run_on(&prepared.train_data_with_images(images), &config.train)?;
            let _ = writeln!(csv, "{},{n},{count},{}", mode.as_str(), metrics(&result.report));
            println!(
                "{:<9} {:>4} {:>8.4} {:>8.4}",
                mode.as_str(),
                n,
                result.report.map,
                result.report.p_at(100).unwrap_or(f64::NAN)
            );
        }
    }
    let path = write_text(&out.join(SELECTION_FILE), &csv)?;
    manifest.finish(out, vec![path])
}

fn lr_curve(config: ExperimentConfig, a: &LrArgs, out: &Path) -> Result<()> {
    let mut train = if a.reference {
        TrainConfig::reference_schedule()
    } else {
        config.train
    };
    apply_train_flags(&mut train, &a.train);
    train.validate()?;
    let mut csv = String::from("iteration,lr\n");
    for t in 0..=train.iterations {
        let _ = writeln!(csv, "{t},{}", lr_at(t, &train));
    }
    let path = write_text(&out.join(LR_CURVE_FILE), &csv)?;
    log::info!("wrote {} rows to {}", train.iterations + 1, path.display());
    Ok(())
}

fn gzss_eval(config: ExperimentConfig, a: &GzssArgs, out: &Path) -> Result<()> {
    if !(a.fraction > 0.0 && a.fraction < 1.0) {
        return Err(UsageError(format!("--fraction must be in (0, 1), got {}", a.fraction)).into());
    }
    let config = resolve(config, &a.run)?;
    let prepared = prepare(&config, &a.run.data)?;
    let mut manifest = RunManifest::new("gzss-eval", &config, a.run.data.data.as_deref());
    manifest.write(out)?;
    let mut outputs = Vec::new();
    let params = match &a.checkpoint {
        Some(p) => ModelParams::load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => {
            let result = prepared.run(&config.train)?;
            outputs = save_run(&result, out, &config.train)?;
            result.outcome.params
        }
    };
    let plain = prepared.test_report(&params.encoder)?;
    let gallery = prepared.generalized_gallery(&params.encoder, a.fraction, config.train.seed)?;
    let generalized = prepared.generalized_report(&params.encoder, &gallery)?;
    let injected = gallery.count_source(GallerySource::SeenInjected);

    let mut csv = format!("setting,gallery,injected,{METRIC_HEADER}\n");
    let plain_size = prepared.test_images.len();
    let _ = writeln!(csv, "zero_shot,{plain_size},0,{}", metrics(&plain));
    let _ = writeln!(csv, "generalized,{},{injected},{}", gallery.len(), metrics(&generalized));
    println!("{:<12} {:>8} {:>8} {:>8}", "setting", "gallery", "mAP", "P@100");
    for (name, size, r) in [("zero_shot", plain_size, &plain), ("generalized", gallery.len(), &generalized)] {
        println!("{name:<12} {size:>8} {:>8.4} {:>8.4}", r.map, r.p_at(100).unwrap_or(f64::NAN));
    }
    outputs.push(write_text(&out.join(GZSS_FILE), &csv)?);
    manifest.finish(out, outputs)
}
