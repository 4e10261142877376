use std::path::{Path, PathBuf};

use tbve_core::conditioning::FallbackProvider;
use tbve_core::corpus::{prepare_data as prepare, toy, Corpus};
use tbve_core::editing::{edit as run_edit, EditContext, EditRequest, EditSidecar};
use tbve_core::eval::{export_embeddings as export_csv, summarize, write_metrics_jsonl, EmbeddingItem, MetricsRecord};
use tbve_core::features::FrameSpec;
use tbve_core::fsutil::write_atomic;
use tbve_core::model::{AcousticModel, FeatureNorm};
use tbve_core::training::{load_checkpoint, train as run_train, TrainOutputs, TrainState};
use tbve_service::ServiceConfig;

use crate::config::{self, CliConfig};
use crate::{CliError, EditArgs, TrainArgs};

pub fn prepare_data(manifest: &Path, lexicon: &Path, out: &Path) -> Result<(), CliError> {
    for (what, p) in [("manifest", manifest), ("lexicon", lexicon)] {
        if !p.is_file() {
            return Err(CliError::usage(format!("{what} {} does not exist", p.display())));
        }
    }
    let report = prepare(manifest, lexicon, out, &FrameSpec::default(), &FallbackProvider::default())?;
    let s = &report.summary;
    println!("utterances    {}", s.utterances);
    println!("speakers      {}", s.speakers);
    println!("total frames  {}", s.total_frames);
    println!("reused        {}", report.reused);
    println!("files written {}", report.files_written);
    if s.failures.is_empty() {
        return Ok(());
    }
    println!("failures      {}", s.failures.len());
    for f in &s.failures {
        println!("  {}: {}", f.id, f.error);
    }
    Err(CliError::usage(format!("{} record(s) failed", s.failures.len())))
}

pub fn toy_corpus(out: &Path, speakers: usize, utterances: usize, seed: u64) -> Result<(), CliError> {
    if speakers == 0 || utterances == 0 {
        return Err(CliError::usage("speakers and utterances must be positive"));
    }
    let files = toy::write_toy_corpus(
        out,
        &toy::ToyCorpusConfig {
            speakers,
            utterances_per_speaker: utterances,
            seed,
            ..Default::default()
        },
    )?;
    println!("manifest {}", files.manifest.display());
    println!("lexicon  {}", files.lexicon.display());
    Ok(())
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg: CliConfig = config::load(args.config.as_deref(), &args.overrides, seed)?;
    let corpus = Corpus::open(&args.data_dir)?;
    let mut state = match &args.resume {
        Some(path) => {
            let state = load_checkpoint(path)?.into_state();
            if state.model.inventory != corpus.lexicon.inventory() {
                return Err(CliError::usage("checkpoint phone inventory does not match the data directory's lexicon"));
            }
            state
        }
        None => {
            let ids = (!args.utterances.is_empty()).then_some(args.utterances.as_slice());
            let examples = corpus.training_examples(cfg.model.embedding_mode, ids)?;
            let norm = FeatureNorm::fit(examples.iter().map(|e| &e.features));
            let model = AcousticModel::new(cfg.model.clone(), corpus.lexicon.inventory().to_vec(), norm, cfg.train.seed)?;
            TrainState::new(model, &cfg.train)
        }
    };
    if state.step >= cfg.train.steps {
        return Err(CliError::usage(format!(
            "checkpoint is at step {}, train.steps is {}",
            state.step, cfg.train.steps
        )));
    }
    let ids = (!args.utterances.is_empty()).then_some(args.utterances.as_slice());
    let data = corpus.training_examples(state.model.config.embedding_mode, ids)?;

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", args.out.display())))?;
    let echo = CliConfig {
        model: state.model.config.clone(),
        train: cfg.train.clone(),
    };
    let echo = toml::to_string(&echo).map_err(|e| CliError::internal(e.to_string()))?;
    write_atomic(&args.out.join("config.toml"), echo.as_bytes())?;

    let outputs = TrainOutputs { dir: args.out.clone() };
    let every = args.log_every.max(1);
    let last = cfg.train.steps;
    let reports = run_train(&mut state, &data, &cfg.train, Some(&outputs), |r| {
        if r.step % every == 0 || r.step == last {
            println!(
                "step {:>6}  total {:.4}  coarse {:.4}  fine {:.4}  dur {:.4}  f0 {:.4}  kl {:.4}  lr {:.2e}",
                r.step, r.loss.total, r.loss.coarse, r.loss.fine, r.loss.duration, r.loss.f0, r.loss.kl, r.learning_rate
            );
        }
        true
    })?;
    println!("trained {} steps, now at step {}", reports.len(), state.step);
    println!("checkpoint {}", outputs.checkpoint_path().display());
    Ok(())
}

fn sidecar_path(wav: &Path) -> PathBuf {
    wav.with_extension("json")
}

pub fn edit(args: EditArgs, seed: u64) -> Result<(), CliError> {
    let corpus = Corpus::open(&args.data_dir)?;
    if corpus.record(&args.utterance).is_err() {
        return Err(CliError::usage(format!("unknown recording '{}'", args.utterance)));
    }
    let model = load_checkpoint(&args.checkpoint)?.into_state().model;
    if model.inventory != corpus.lexicon.inventory() {
        return Err(CliError::usage("checkpoint phone inventory does not match the data directory's lexicon"));
    }
    let source = corpus.edit_source(&args.utterance)?;
    let mut request = EditRequest::new(args.utterance.clone(), args.span, args.text.clone());
    request.fusion = args.fusion.into();
    request.crossfade_ms = args.crossfade_ms;
    request.crossfade_shape = args.crossfade_shape.into();
    request.force_durations = args.force_durations;
    request.tts_baseline = args.tts_baseline;
    request.seed = seed;

    let provider = FallbackProvider::default();
    let ctx = EditContext {
        lexicon: &corpus.lexicon,
        provider: &provider,
        vocoder: None,
        spec: corpus.spec(),
        attach_metrics: !args.no_metrics,
    };
    let result = run_edit(&request, &model, &source, &ctx)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_atomic(&args.out, &result.audio.to_wav_bytes()?)?;
    let sidecar = serde_json::to_vec_pretty(&result.sidecar()).map_err(|e| CliError::internal(e.to_string()))?;
    let side = sidecar_path(&args.out);
    write_atomic(&side, &sidecar)?;

    let (a, b) = result.boundaries_samples;
    println!("wrote {} ({} samples)", args.out.display(), result.audio.len());
    println!("sidecar {}", side.display());
    println!("region samples {a}..{b}, frames {}..{}", result.region_frames.start, result.region_frames.end);
    if let Some(m) = &result.metrics {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "mcd_db {}  f0_rmse_hz {}  vuv_error {}  speaker_cosine {}  boundary_score {:.4}",
            show(m.mcd_db),
            show(m.f0_rmse_hz),
            show(m.vuv_error_rate),
            show(m.speaker_cosine),
            m.boundary_discontinuity
        );
    }
    Ok(())
}

/// Edit sidecars in `dir`, sorted by file name, with the file stem as id.
fn read_sidecars(dir: &Path) -> Result<Vec<(String, EditSidecar)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let sidecar: EditSidecar = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::usage(format!("{} is not an edit sidecar: {e}", p.display())))?;
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, sidecar))
        })
        .collect()
}

pub fn eval(results: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let sidecars = read_sidecars(results)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (id, s) in sidecars {
        match s.metrics {
            Some(metrics) => records.push(MetricsRecord { edit_id: id, metrics }),
            None => skipped.push(id),
        }
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| results.join("metrics.jsonl"));
    write_metrics_jsonl(&out, &records)?;
    print!("{}", summarize(&records).table());
    if !skipped.is_empty() {
        println!("without metrics: {}", skipped.join(", "));
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn export_embeddings(data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let corpus = Corpus::open(data_dir)?;
    let features = corpus
        .records
        .iter()
        .map(|r| corpus.features(&r.id))
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<EmbeddingItem<'_>> = corpus
        .records
        .iter()
        .zip(&features)
        .map(|(r, f)| EmbeddingItem {
            utterance_id: &r.id,
            speaker_id: &r.speaker_id,
            features: f,
        })
        .collect();
    let csv = export_csv(&items, &FallbackProvider::default())?;
    write_atomic(out, csv.as_bytes())?;
    println!("wrote {} embeddings to {}", items.len(), out.display());
    Ok(())
}

pub fn serve(
    data_dir: Option<PathBuf>,
    port: Option<u16>,
    workers: Option<usize>,
    lexicon: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut config = ServiceConfig::from_env().map_err(CliError::usage)?;
    if let Some(d) = data_dir {
        config.data_dir = d;
    }
    if let Some(p) = port {
        config.port = p;
    }
    if let Some(w) = workers {
        config.workers = w;
    }
    if lexicon.is_some() {
        config.lexicon = lexicon;
    }
    if config.workers == 0 {
        return Err(CliError::usage("workers must be at least 1"));
    }
    if !config.lexicon_path().is_file() {
        return Err(CliError::usage(format!("lexicon {} does not exist", config.lexicon_path().display())));
    }
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::internal(e.to_string()))?;
    runtime.block_on(async move {
        let addr = std::net::SocketAddr::from(([0, 0, 0, 0], config.port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::usage(format!("cannot listen on port {}: {e}", config.port)))?;
        let local = listener.local_addr().map_err(|e| CliError::internal(e.to_string()))?;
        println!("listening on {local}");
        tbve_service::serve_on(listener, config, tbve_service::shutdown_signal())
            .await
            .map_err(|e| CliError {
                code: if e.status.is_client_error() { 2 } else { 1 },
                message: e.message,
            })?;
        println!("stopped");
        Ok(())
    })
}
