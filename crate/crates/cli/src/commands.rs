use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use asmr_core::data::{self, Dataset, Split};
use asmr_core::experiment::{run_ablation, shape_for, write_ablation_csv, AblationRow};
use asmr_core::gradcheck::{run_suite, SuiteConfig};
use asmr_core::retrieval::{evaluate, retrieve, write_metrics_csv, write_pairs_csv, CategoryQuery, Gallery};
use asmr_core::trainer::{self, pretrain, train, OptimizerState};
use asmr_core::{Checkpoint, Error, ModelState, Result};

use crate::config::RunConfig;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt.json";
pub const MODEL_CHECKPOINT: &str = "model.ckpt.json";

/// Resolved configuration plus where reports go.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Self {
        let hash = cfg.hash();
        Self { cfg, out, hash }
    }

    fn data_dir(&self) -> PathBuf {
        self.cfg.paths.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    /// Creates `name` under the output dir and writes the hash line.
    fn report(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        self.ensure_out()?;
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# config_hash={}", self.hash).map_err(|e| Error::io(&path, e))?;
        Ok((path, w))
    }

    fn write_report(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<PathBuf> {
        let (path, mut w) = self.report(name)?;
        body(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Input checkpoint, falling back to the trained model in the output dir.
    fn model_checkpoint(&self) -> PathBuf {
        self.cfg
            .paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(MODEL_CHECKPOINT))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let p = &self.cfg.paths;
        let dir = self.data_dir();
        let schema = p.schema.clone().unwrap_or_else(|| dir.join(data::SCHEMA_FILE));
        let samples = p.samples.clone().unwrap_or_else(|| dir.join(data::SAMPLES_FILE));
        let mut dataset = data::load(&schema, &samples)?;
        let manifest = p.splits.clone().unwrap_or_else(|| dir.join(data::SPLITS_FILE));
        if manifest.exists() {
            data::apply_split_manifest(&mut dataset, &manifest)?;
        } else {
            log::warn!("no split manifest at {}; every sample is training data", manifest.display());
        }
        if self.cfg.drop_singletons {
            let dropped = dataset.drop_singletons();
            log::info!("dropped {dropped} single-sample categories");
        }
        Ok(dataset)
    }
}

fn load_checkpoint(path: &Path, dataset: &Dataset) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    let model = &ckpt.model;
    if model.feature_dim() != dataset.feature_dim() {
        return Err(Error::Data(format!(
            "{}: checkpoint expects {} features, dataset has {}",
            path.display(),
            model.feature_dim(),
            dataset.feature_dim()
        )));
    }
    if model.category_encoder.in_dim() != dataset.schema.dim() {
        return Err(Error::Data(format!(
            "{}: checkpoint expects {}-bit categories, schema has {}",
            path.display(),
            model.category_encoder.in_dim(),
            dataset.schema.dim()
        )));
    }
    Ok(ckpt)
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ckpt.save(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn synthesize(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let synth = asmr_core::data::SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let raw = data::generate(&synth)?;
    data::split(&raw, synth.unseen_fraction, synth.seen_test_fraction, seed)
}

pub fn cmd_synth(ctx: &Context) -> Result<()> {
    let dataset = synthesize(&ctx.cfg, ctx.cfg.synth.seed)?;
    let dir = ctx.data_dir();
    data::save(&dataset, &dir)?;
    log::info!("wrote dataset to {}", dir.display());
    let stats = dataset.stats();
    data::write_stats_table(&stats, std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?;
    ctx.write_report("synth_stats.csv", |w| {
        writeln!(w, "statistic,value")?;
        for (name, v) in [
            ("train_categories", stats.train_categories),
            ("train_images", stats.train_images),
            ("test_categories", stats.test_categories),
            ("seen_test_categories", stats.seen_test_categories),
            ("unseen_test_categories", stats.unseen_test_categories),
            ("test_images", stats.test_images),
        ] {
            writeln!(w, "{name},{v}")?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn cmd_pretrain(ctx: &Context) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let cfg = &ctx.cfg;
    let mut state = ModelState::init(&shape_for(&cfg.model, &dataset), &dataset.schema, cfg.train.seed)?;
    let report = pretrain(&mut state, &dataset, &cfg.train)?;
    let accuracy = report.accuracy.iter().sum::<f64>() / report.accuracy.len().max(1) as f64;
    save_checkpoint(
        &Checkpoint::new(state, cfg.train.seed, 0, None),
        &ctx.out.join(PRETRAIN_CHECKPOINT),
    )?;
    ctx.write_report("pretrain_log.csv", |w| {
        writeln!(w, "epoch,loss,accuracy")?;
        let last = report.epochs.len().saturating_sub(1);
        for e in &report.epochs {
            if e.epoch == last {
                writeln!(w, "{},{},{}", e.epoch, e.loss, accuracy)?;
            } else {
                writeln!(w, "{},{},", e.epoch, e.loss)?;
            }
        }
        Ok(())
    })?;
    println!("pretrain accuracy per group: {:?}", report.accuracy);
    Ok(())
}

pub fn cmd_train(ctx: &Context) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let cfg = &ctx.cfg;
    let (mut state, opt): (ModelState, Option<OptimizerState>) = match &cfg.paths.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path, &dataset)?;
            if ckpt.optimizer.is_some() && ckpt.seed != cfg.train.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config seed is {}",
                    ckpt.seed, cfg.train.seed
                )));
            }
            log::info!(
                "starting from {} ({} epochs completed)",
                path.display(),
                ckpt.epochs_completed
            );
            (ckpt.model, ckpt.optimizer)
        }
        None => (
            ModelState::init(&shape_for(&cfg.model, &dataset), &dataset.schema, cfg.train.seed)?,
            None,
        ),
    };
    let every = cfg.checkpoint_every;
    let ckpt_dir = ctx.out.join("checkpoints");
    let (opt, metrics) = train(&mut state, &dataset, &cfg.loss, &cfg.train, opt, |m, s, o| {
        if every > 0 && (m.epoch + 1) % every == 0 {
            let path = ckpt_dir.join(format!("epoch_{:03}.ckpt.json", m.epoch + 1));
            save_checkpoint(&Checkpoint::new(s.clone(), cfg.train.seed, o.epoch, Some(o.clone())), &path)?;
        }
        Ok(())
    })?;
    let epochs = opt.epoch;
    save_checkpoint(
        &Checkpoint::new(state, cfg.train.seed, epochs, Some(opt)),
        &ctx.out.join(MODEL_CHECKPOINT),
    )?;
    ctx.write_report("train_log.csv", |w| trainer::write_metrics_csv(&metrics, w))?;
    if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
        println!(
            "trained epochs {}..{}: total loss {:.6} -> {:.6}",
            first.epoch, last.epoch, first.loss_total, last.loss_total
        );
    }
    Ok(())
}

fn trained_model(ctx: &Context, dataset: &Dataset) -> Result<ModelState> {
    Ok(load_checkpoint(&ctx.model_checkpoint(), dataset)?.model)
}

pub fn cmd_eval(ctx: &Context) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let state = trained_model(ctx, &dataset)?;
    let report = evaluate(&state, &dataset, &ctx.cfg.ks)?;
    let rows = report.rows();
    ctx.write_report("eval_metrics.csv", |w| write_metrics_csv(&rows, w))?;
    ctx.write_report("eval_pairs.csv", |w| write_pairs_csv(&report.diagnostic.pairs, w))?;
    write_metrics_csv(&rows, std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

/// Gallery for `retrieve`: `test` (seen and unseen test images), `seen`,
/// `unseen`, `train` or `all`.
pub fn gallery_splits(name: &str) -> Result<Vec<Split>> {
    Ok(match name {
        "test" => vec![Split::TestSeen, Split::TestUnseen],
        "seen" => vec![Split::TestSeen],
        "unseen" => vec![Split::TestUnseen],
        "train" => vec![Split::Train],
        "all" => vec![Split::Train, Split::TestSeen, Split::TestUnseen],
        other => {
            return Err(Error::Config(format!(
                "unknown gallery '{other}' (test, seen, unseen, train, all)"
            )))
        }
    })
}

pub fn cmd_retrieve(ctx: &Context, query: &str, k: usize, gallery: &str) -> Result<()> {
    let dataset = ctx.load_dataset()?;
    let query = CategoryQuery::parse(&dataset.schema, query)?;
    let state = trained_model(ctx, &dataset)?;
    let splits = gallery_splits(gallery)?;
    let gallery = Gallery::from_dataset(&state, &dataset, &splits)?;
    if gallery.is_empty() {
        return Err(Error::Data("retrieval gallery is empty".into()));
    }
    let run = retrieve(&query, &state, &gallery, Some(k))?;
    let body = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "rank,id,score,relevant")?;
        for (i, ((id, s), rel)) in run.ranking.iter().zip(&run.scores).zip(&run.relevance).enumerate() {
            writeln!(w, "{},{id},{s},{}", i + 1, u8::from(*rel))?;
        }
        Ok(())
    };
    ctx.write_report("retrieve.csv", |w| body(w))?;
    body(&mut std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

pub fn cmd_ablate(ctx: &Context, jobs: usize) -> Result<()> {
    let cfg = &ctx.cfg;
    let external = cfg.paths.data.is_some() || cfg.paths.samples.is_some();
    let shared = if external { Some(ctx.load_dataset()?) } else { None };
    let run_seed = |seed: u64| -> Result<Vec<AblationRow>> {
        let owned;
        let dataset = match &shared {
            Some(d) => d,
            None => {
                owned = synthesize(cfg, seed)?;
                &owned
            }
        };
        let train_cfg = asmr_core::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        run_ablation(dataset, &cfg.model, &cfg.loss, &train_cfg, &cfg.ks, &cfg.ablate_split)
    };

    let jobs = jobs.max(1);
    let mut per_seed: Vec<Result<Vec<AblationRow>>> = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(jobs) {
        let done: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        });
        per_seed.extend(done);
    }
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    ctx.write_report("ablate.csv", |w| write_ablation_csv(&rows, &cfg.ks, w))?;
    write_ablation_csv(&rows, &cfg.ks, std::io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

/// Returns whether every case passed.
pub fn cmd_gradcheck(ctx: &Context, inject_bug: bool) -> Result<bool> {
    let g = &ctx.cfg.gradcheck;
    let suite = SuiteConfig {
        instances: g.instances,
        first_seed: ctx.cfg.seed,
        step: g.step,
        tolerance: g.tolerance,
        corrupt: inject_bug,
        ..SuiteConfig::default()
    };
    let report = run_suite(&suite)?;
    let maxima = report.block_maxima();
    ctx.write_report("gradcheck.csv", |w| {
        writeln!(w, "block,max_rel_error,passed")?;
        for (name, err) in &maxima {
            writeln!(w, "{name},{err},{}", u8::from(*err <= g.tolerance))?;
        }
        Ok(())
    })?;
    let mut out = std::io::stdout().lock();
    let print = |out: &mut dyn Write| -> std::io::Result<()> {
        for (name, err) in &maxima {
            writeln!(out, "{name:<28} {err:.3e}")?;
        }
        writeln!(
            out,
            "{} cases, max relative error {:.3e}, tolerance {:e}: {}",
            report.cases.len(),
            report.max_rel_error(),
            g.tolerance,
            if report.passed { "PASS" } else { "FAIL" }
        )
    };
    print(&mut out).map_err(|e| Error::io("<stdout>", e))?;
    Ok(report.passed)
}
