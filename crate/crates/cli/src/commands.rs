use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use dlow_core::boost::{evaluate_miou, train_segmenter, Alignment, BoostConfig, SegData, SegModel};
use dlow_core::checkpoint;
use dlow_core::data::image_io::{resize_bilinear, save_image, tile_grid};
use dlow_core::data::synthetic::generate_domain;
use dlow_core::data::{
    measure_style_statistic, translate_dataset, DatasetManifest, StatisticKind, StyleKind, SyntheticStyleSpec, ZMode,
};
use dlow_core::domainness::DomainnessVector;
use dlow_core::repro::{run_suite, SuiteOptions, ALL_CRITERIA, QUICK_CRITERIA};
use dlow_core::service::ServiceState;
use dlow_core::training::{self, MetricsLog, TrainData};
use dlow_core::{Domainness, DomainnessValue, Error, Result, Tensor, TrainState};
use toml::Value;

use crate::config::RunConfig;
use crate::{
    BoostTrainArgs, Command, EvalSegArgs, GenSyntheticArgs, MeasureArgs, ReproArgs, ServeArgs, SyntheticKind,
    TrainArgs, TranslateArgs,
};

/// Source images shown in each sample grid.
const SAMPLE_ROWS: usize = 4;
const PROGRESS_EVERY: u64 = 50;

pub fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(a) => train(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Translate(a) => translate(a),
        Command::Measure(a) => measure(a),
        Command::BoostTrain(a) => boost_train(a),
        Command::EvalSeg(a) => eval_seg(a),
        Command::Serve(a) => serve(a),
        Command::Repro(a) => repro(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        context: path.display().to_string(),
        source,
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

/// Flag values as configuration overrides, applied before `--set`.
fn train_overrides(args: &TrainArgs) -> Vec<(String, Value)> {
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
    if let Some(v) = &args.name {
        put("name", Value::String(v.clone()));
    }
    if let Some(v) = &args.output_dir {
        put("output_dir", path_value(v));
    }
    if let Some(v) = &args.source {
        put("source", path_value(v));
    }
    if !args.targets.is_empty() {
        put(
            "targets",
            Value::Array(args.targets.iter().map(|p| path_value(p)).collect()),
        );
        put("num_targets", Value::Integer(args.targets.len() as i64));
    }
    if let Some(v) = args.iterations {
        put("total_iterations", Value::Integer(v as i64));
    }
    if let Some(v) = args.seed {
        put("seed", Value::Integer(v as i64));
    }
    if let Some(v) = args.learning_rate {
        put("learning_rate", Value::Float(v));
    }
    if let Some(v) = args.batch_size {
        put("batch_size", Value::Integer(v as i64));
    }
    if let Some(v) = args.image_size {
        put("image_size", Value::Integer(v as i64));
        put("crop_size", Value::Integer(v as i64));
    }
    if let Some(v) = args.save_every {
        put("save_every", Value::Integer(v as i64));
    }
    if let Some(v) = args.sample_every {
        put("sample_every", Value::Integer(v as i64));
    }
    o.extend(args.set.iter().cloned());
    o
}

/// Resolves the run configuration; empty domain names are filled from the
/// dataset names so checkpoints and the service can label domains.
pub fn resolve_train_config(args: &TrainArgs) -> Result<(RunConfig, DatasetManifest, Vec<DatasetManifest>)> {
    let mut cfg = RunConfig::resolve(args.config.as_deref(), &train_overrides(args))?;
    let source = DatasetManifest::open(&cfg.run.source)?;
    let targets = cfg
        .run
        .targets
        .iter()
        .map(|p| DatasetManifest::open(p))
        .collect::<Result<Vec<_>>>()?;
    if cfg.train.domain_names.is_empty() {
        cfg.train.domain_names = std::iter::once(&source)
            .chain(&targets)
            .map(|m| m.domain.clone())
            .collect();
        if cfg.train.validate().is_err() {
            // duplicate dataset names; fall back to generated ones
            cfg.train.domain_names.clear();
        }
    }
    Ok((cfg, source, targets))
}

fn sample_grid(state: &TrainState, sources: &[Tensor]) -> Result<Tensor> {
    let k = state.config.num_targets;
    let zs: Vec<Domainness> = if k == 1 {
        [0.0, 0.25, 0.5, 0.75, 1.0]
            .into_iter()
            .map(|z| DomainnessValue::new(z).map(Domainness::from))
            .collect::<Result<_>>()?
    } else {
        let mut v = (0..k)
            .map(|i| DomainnessVector::one_hot(k, i).map(Domainness::from))
            .collect::<Result<Vec<_>>>()?;
        v.push(DomainnessVector::new(vec![1.0 / k as f64; k])?.into());
        v
    };
    let rows = sources
        .iter()
        .map(|x| {
            let mut row = vec![x.clone()];
            for z in &zs {
                row.push(state.models.g_st.translate(x, z)?);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    tile_grid(&rows, 2)
}

fn train(args: TrainArgs) -> Result<i32> {
    let (cfg, source, targets) = resolve_train_config(&args)?;
    let mut state = match &args.resume {
        Some(path) => {
            let state = checkpoint::restore(path)?;
            if state.config != cfg.train {
                return Err(Error::Config(format!(
                    "{} was trained with a different configuration; resume with the run's {}",
                    path.display(),
                    crate::config::SNAPSHOT_FILE
                )));
            }
            state
        }
        None => TrainState::new(cfg.train.clone())?,
    };
    let run_dir = cfg.run_dir();
    let snapshot = cfg.write_snapshot()?;
    eprintln!("run directory {} (config {})", run_dir.display(), snapshot.display());
    let data = TrainData::new(
        source.load_all()?,
        targets.iter().map(|t| t.load_all()).collect::<Result<_>>()?,
        &cfg.train,
    )?;
    let crop = cfg.train.crop_size;
    let previews = data
        .source
        .iter()
        .take(SAMPLE_ROWS)
        .map(|x| resize_bilinear(x, crop, crop))
        .collect::<Result<Vec<_>>>()?;
    let mut metrics = MetricsLog::open(&run_dir.join("metrics.csv"))?;
    let ckpt_dir = run_dir.join("checkpoints");
    let latest = run_dir.join("latest.ckpt");
    let total = cfg.train.total_iterations;
    let start = Instant::now();
    let save = |state: &TrainState| -> Result<()> {
        let path = ckpt_dir.join(format!("iter_{:06}.ckpt", state.iteration));
        checkpoint::save(state, &path)?;
        std::fs::copy(&path, &latest).map_err(io_err(&latest))?;
        Ok(())
    };
    training::run(&mut state, &data, None, |state, report| {
        metrics.append(report)?;
        let it = state.iteration;
        if it % PROGRESS_EVERY == 0 || it == total {
            eprintln!(
                "[{:>8.1} s] {it}/{total} adv_s={:.4} adv_t={:.4} cycle={:.4} d_s={:.4} d_t={:.4}",
                start.elapsed().as_secs_f64(),
                report.adv_source,
                report.adv_target,
                report.cycle,
                report.d_source,
                report.d_target
            );
        }
        if cfg.run.save_every > 0 && it % cfg.run.save_every == 0 && it != total {
            save(state)?;
        }
        if cfg.run.sample_every > 0 && (it % cfg.run.sample_every == 0 || it == total) {
            let grid = sample_grid(state, &previews)?;
            save_image(&run_dir.join("samples").join(format!("iter_{it:06}.png")), &grid)?;
        }
        Ok(())
    })?;
    save(&state)?;
    println!("{}", latest.display());
    Ok(0)
}

fn gen_synthetic(args: GenSyntheticArgs) -> Result<i32> {
    let kind = match args.kind {
        SyntheticKind::Hue => StyleKind::Hue,
        SyntheticKind::Brightness => StyleKind::Brightness,
    };
    let spec = |theta: f64, content_seed: u64| SyntheticStyleSpec {
        theta,
        kind,
        blur: args.blur,
        content_seed,
        count: args.count,
        size: args.size,
    };
    let source = generate_domain(&spec(args.theta_source, args.seed), &args.out, "source")?;
    println!("{}", source.root.display());
    let many = args.theta_targets.len() > 1;
    for (i, &theta) in args.theta_targets.iter().enumerate() {
        // unpaired by default: targets get their own content
        let seed = if args.paired {
            args.seed
        } else {
            args.seed.wrapping_add(1 + i as u64)
        };
        let name = if many {
            format!("target_{i}")
        } else {
            "target".to_string()
        };
        let m = generate_domain(&spec(theta, seed), &args.out, &name)?;
        println!("{}", m.root.display());
    }
    Ok(0)
}

fn translate(args: TranslateArgs) -> Result<i32> {
    let z_mode: ZMode = args.z_mode.parse()?;
    let model = dlow_core::load_model(&args.ckpt)?;
    let k = model.state.config.num_targets;
    if k != 1 {
        return Err(Error::Argument(format!(
            "dataset export takes a scalar domainness; {} has {k} targets",
            args.ckpt.display()
        )));
    }
    let manifest = DatasetManifest::open(&args.input)?;
    let report = translate_dataset(&manifest, &model.state.models.g_st, z_mode, args.seed, &args.out)?;
    for (path, msg) in &report.failures {
        eprintln!("skipped {}: {msg}", path.display());
    }
    eprintln!("translated {} of {} images", report.written, manifest.len());
    println!("{}", report.index.display());
    if report.written == 0 {
        return Err(Error::Argument("no image could be translated".into()));
    }
    Ok(0)
}

fn measure(args: MeasureArgs) -> Result<i32> {
    let kind: StatisticKind = args.kind.parse()?;
    let manifest = DatasetManifest::open(&args.dir)?;
    let value = measure_style_statistic(&manifest.load_all()?, kind)?;
    println!("{value:.4}");
    Ok(0)
}

fn boost_config(args: &BoostTrainArgs) -> Result<BoostConfig> {
    let mut config: BoostConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => BoostConfig::default(),
    };
    if let Some(a) = &args.alignment {
        config.alignment = Value::String(a.clone())
            .try_into::<Alignment>()
            .map_err(|_| Error::Config(format!("alignment '{a}' is not one of none, unweighted, weighted")))?;
    }
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn boost_train(args: BoostTrainArgs) -> Result<i32> {
    let config = boost_config(&args)?;
    let source = match (&args.source_index, &args.source) {
        (Some(index), _) => SegData::from_index(index, args.size)?,
        (None, Some(dir)) => SegData::from_manifest(&DatasetManifest::open(dir)?, args.size)?,
        (None, None) => return Err(Error::Argument("give --source-index or --source".into())),
    };
    let target = match &args.target {
        Some(dir) => DatasetManifest::open(dir)?
            .load_all()?
            .iter()
            .map(|t| resize_bilinear(t, args.size, args.size))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let total = config.iterations;
    let start = Instant::now();
    let state = train_segmenter(config, &source, &target, |t, l| {
        if (t + 1) % PROGRESS_EVERY == 0 || t + 1 == total {
            eprintln!(
                "[{:>8.1} s] {}/{total} seg={:.4} adv={:.4} disc={:.4}",
                start.elapsed().as_secs_f64(),
                t + 1,
                l.seg,
                l.adv,
                l.disc
            );
        }
    })?;
    state.model.save(&args.out)?;
    println!("{}", args.out.display());
    Ok(0)
}

fn eval_seg(args: EvalSegArgs) -> Result<i32> {
    let model = SegModel::load(&args.ckpt)?;
    let data = SegData::from_manifest(&DatasetManifest::open(&args.data)?, args.size)?;
    let report = evaluate_miou(&model, &data.images, &data.labels)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn serve(args: ServeArgs) -> Result<i32> {
    let state = Arc::new(ServiceState::load(&args.ckpts)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_err(Path::new("tokio runtime")))?;
    let addr = format!("{}:{}", args.host, args.port);
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(io_err(Path::new(&addr)))?;
        let local = listener.local_addr().map_err(io_err(Path::new(&addr)))?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        axum::serve(listener, crate::server::router(state))
            .await
            .map_err(io_err(Path::new(&addr)))
    })?;
    Ok(0)
}

/// Digest file shipped with the core crate's acceptance test.
pub fn default_golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/service_translate.sha256")
}

fn repro(args: ReproArgs) -> Result<i32> {
    let selected: Vec<&str> = if args.quick {
        QUICK_CRITERIA.to_vec()
    } else if args.only.is_empty() {
        ALL_CRITERIA.to_vec()
    } else {
        args.only
            .iter()
            .map(|id| {
                let id = id.trim().to_ascii_uppercase();
                ALL_CRITERIA
                    .iter()
                    .copied()
                    .find(|c| *c == id)
                    .ok_or_else(|| Error::Argument(format!("unknown criterion '{id}'")))
            })
            .collect::<Result<_>>()?
    };
    let options = SuiteOptions {
        cache: args.cache,
        golden: args.golden.unwrap_or_else(default_golden),
        update_golden: args.update_golden,
    };
    let results = run_suite(
        &selected,
        &options,
        |msg| eprintln!("{msg}"),
        |r| {
            println!("{}", r.line());
            let _ = std::io::stdout().flush();
        },
    );
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", results.len());
    Ok(if passed == results.len() { 0 } else { 1 })
}
