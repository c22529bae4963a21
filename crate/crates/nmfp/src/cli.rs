//! `nmfp` command line. Exit codes: 0 ok, 1 usage, 2 data error, 3 self-test
//! failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nmfp_core::degrade::{degrade_chain, ChainOptions, Split};
use nmfp_core::eval::QueryDegradation;
use nmfp_core::features::MelExtractor;
use nmfp_core::index::{sequence_search, IvfIndex, SearchParams};
use nmfp_core::losses::LossKind;
use nmfp_core::selftest;
use nmfp_core::synth;
use nmfp_core::train::Trainer;

use crate::assets::{load_assets, write_manifest, ManifestEntry};
use crate::config::RunConfig;
use crate::formats::{digest_hex, read_db, write_db, Checkpoint, CheckpointHeader, IndexFile};
use crate::pipeline::{self, QuerySet};
use crate::wav::{read_working, write_wav};

#[derive(Debug, Parser)]
#[command(
    name = "nmfp",
    version,
    about = "Neural music fingerprinting: train, index, search, evaluate"
)]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded batch production and search.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed; overrides the configuration's seed, required without --config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Triplet,
    Ntxent,
    Dcl,
    AlignUniform,
    Kcl,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Triplet => LossKind::Triplet,
            LossArg::Ntxent => LossKind::Ntxent,
            LossArg::Dcl => LossKind::Dcl,
            LossArg::AlignUniform => LossKind::AlignUniform,
            LossArg::Kcl => LossKind::Kcl,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus: tracks/, assets/ and assets/manifest.json.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        tracks: usize,
        /// Track duration in seconds.
        #[arg(long, default_value_t = 40.0)]
        duration: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Degrade a whole track with the query chain (full-length IRs).
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        assets: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train an encoder on a directory of tracks.
    Train {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        assets: PathBuf,
        /// Checkpoint path, rewritten at every epoch end.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss curve CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        #[arg(long)]
        n_anchors: Option<usize>,
        #[arg(long)]
        n_ppa: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fingerprint a directory of tracks into a database (+ CSV sidecar).
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an IVF index over a fingerprint database.
    Index {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nlist: Option<usize>,
        #[arg(long)]
        nprobe: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a query set (degraded 30 s chunks, fingerprints, ground truth).
    MakeQueries {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        /// Degradation assets; omit with --clean.
        #[arg(long, required_unless_present = "clean")]
        assets: Option<PathBuf>,
        #[arg(long)]
        clean: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write each chunk as WAV.
        #[arg(long)]
        write_audio: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Identify one query recording.
    Search {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Use only the first L query segments.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        nprobe: Option<usize>,
    },
    /// Score a query set against a database.
    Evaluate {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,9,19")]
        lengths: Vec<usize>,
        /// Fingerprint hop in seconds; must match the database.
        #[arg(long, default_value_t = 0.5)]
        hop: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        nprobe: Option<usize>,
    },
    /// Gradient-check and oracle suites.
    Selftest,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    SelfTest,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Data(e)
    }
}

impl From<crate::error::IoError> for Failure {
    fn from(e: crate::error::IoError) -> Self {
        Self::Data(e.into())
    }
}

impl From<nmfp_core::Error> for Failure {
    fn from(e: nmfp_core::Error) -> Self {
        Self::Data(e.into())
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::SelfTest => 3,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn run_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match (&args.config, args.seed) {
        (Some(p), _) => RunConfig::load(p)?.map_err(Failure::Usage)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => return Err(Failure::Usage("a seed is required: pass --config or --seed".into())),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn usage_if<T>(r: nmfp_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::SelfTest => eprintln!("self-test failed"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // Ignore a pool that is already set up (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let parallel = !cli.deterministic;
    match cli.command {
        Command::Synth {
            out,
            tracks,
            duration,
            seed,
        } => cmd_synth(&out, tracks, duration, seed),
        Command::Degrade {
            input,
            output,
            assets,
            split,
            cfg,
        } => cmd_degrade(&input, &output, &assets, split.into(), &cfg),
        Command::Train {
            tracks,
            assets,
            out,
            loss_csv,
            loss,
            epochs,
            steps_per_epoch,
            n_anchors,
            n_ppa,
            cfg,
        } => {
            let mut rc = run_config(&cfg)?;
            if let Some(l) = loss {
                rc.train.loss.kind = l.into();
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if steps_per_epoch.is_some() {
                rc.train.steps_per_epoch = steps_per_epoch;
            }
            if let Some(n) = n_anchors {
                rc.train.n_anchors = n;
            }
            if let Some(n) = n_ppa {
                rc.train.n_ppa = n;
            }
            rc.validate().map_err(Failure::Usage)?;
            cmd_train(&tracks, &assets, &out, loss_csv.as_deref(), &rc, parallel)
        }
        Command::Extract {
            checkpoint,
            tracks,
            out,
        } => cmd_extract(&checkpoint, &tracks, &out),
        Command::Index {
            db,
            out,
            nlist,
            nprobe,
            cfg,
        } => {
            let rc = run_config(&cfg)?;
            cmd_index(
                &db,
                &out,
                nlist.unwrap_or(rc.index.nlist),
                nprobe.unwrap_or(rc.index.nprobe),
                rc.seed,
            )
        }
        Command::MakeQueries {
            checkpoint,
            tracks,
            assets,
            clean,
            out,
            write_audio,
            cfg,
        } => {
            let rc = run_config(&cfg)?;
            cmd_make_queries(
                &checkpoint,
                &tracks,
                if clean { None } else { assets.as_deref() },
                &out,
                write_audio,
                &rc,
            )
        }
        Command::Search {
            db,
            index,
            checkpoint,
            query,
            length,
            top,
            k,
            nprobe,
        } => cmd_search(&db, &index, &checkpoint, &query, length, top, k, nprobe),
        Command::Evaluate {
            db,
            index,
            queries,
            lengths,
            hop,
            out,
            k,
            nprobe,
        } => cmd_evaluate(&db, &index, &queries, lengths, hop, out.as_deref(), k, nprobe),
        Command::Selftest => cmd_selftest(),
    }
}

fn cmd_synth(out: &Path, n_tracks: usize, duration: f64, seed: u64) -> CmdResult {
    let rate = nmfp_core::audio::WORKING_RATE;
    let tdir = out.join("tracks");
    let adir = out.join("assets");
    for d in [&tdir, &adir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for (id, audio) in synth::music_corpus(seed, n_tracks, duration, rate)? {
        write_wav(&tdir.join(format!("{id}.wav")), &audio)?;
    }
    let store = synth::asset_store(seed ^ 0xa55e7, synth::AssetCounts::default(), rate)?;
    let mut entries = Vec::new();
    for e in store.manifest().entries {
        let (kind, audio) = match store.noise(&e.asset_id) {
            Ok(a) => (nmfp_core::degrade::AssetKind::Noise, a.clone()),
            Err(_) => {
                let ir = store.ir(&e.asset_id)?;
                (
                    ir.kind(),
                    nmfp_core::AudioBuffer::new(ir.samples().to_vec(), ir.sample_rate())?,
                )
            }
        };
        let file = PathBuf::from(format!("{}.wav", e.asset_id));
        write_wav(&adir.join(&file), &audio)?;
        entries.push(ManifestEntry {
            id: e.asset_id,
            path: file,
            source_id: e.source_id,
            kind,
            split: e.split,
        });
    }
    write_manifest(&adir.join("manifest.json"), &entries)?;
    log::info!(
        "wrote {n_tracks} tracks and {} assets under {}",
        entries.len(),
        out.display()
    );
    Ok(())
}

fn cmd_degrade(input: &Path, output: &Path, assets: &Path, split: Split, cfg: &ConfigArgs) -> CmdResult {
    let rc = run_config(cfg)?;
    let store = load_assets(assets)?;
    let audio = read_working(input)?;
    let mut rng = nmfp_core::seeded_rng(rc.seed);
    let plan = store.sample_plan(split, &rc.degradation, &mut rng);
    let out = degrade_chain(&audio, 0, audio.len(), &plan, &store, &ChainOptions::query())?;
    write_wav(output, &out.audio)?;
    println!("{}", serde_json::to_string_pretty(&plan).context("serializing plan")?);
    Ok(())
}

fn cmd_train(
    tracks: &Path,
    assets: &Path,
    out: &Path,
    loss_csv: Option<&Path>,
    rc: &RunConfig,
    parallel: bool,
) -> CmdResult {
    let paths = pipeline::list_wavs(tracks)?;
    let audio: Vec<_> = pipeline::load_tracks(&paths)?.into_iter().map(|t| t.1).collect();
    let store = load_assets(assets)?;
    let mut trainer = usage_if(Trainer::new(rc.train.clone(), rc.feature.clone(), &audio, &store))?;
    let mut csv = match loss_csv {
        Some(p) => {
            let mut f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "step,epoch,lr,loss").context("writing loss CSV")?;
            Some(f)
        }
        None => None,
    };
    let total = trainer.total_steps();
    log::info!(
        "training {} parameters for {total} steps on {} tracks",
        trainer.params().n_params(),
        audio.len()
    );
    while !trainer.is_done() {
        let r = pipeline::train_step(&mut trainer, parallel)?;
        log::debug!("step {} lr {:.3e} loss {:.6}", r.step, r.lr, r.loss);
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{},{},{:e},{:e}", r.step, r.epoch, r.lr, r.loss).context("writing loss CSV")?;
        }
        if r.epoch_end {
            let ck = Checkpoint {
                header: CheckpointHeader {
                    arch: trainer.params().arch.clone(),
                    feature: rc.feature.clone(),
                    train: rc.train.clone(),
                    seed: rc.seed,
                    step: r.step + 1,
                },
                params: trainer.params().clone(),
            };
            ck.write(out)?;
            log::info!(
                "epoch {} done (step {}/{total}), loss {:.6}",
                r.epoch,
                r.step + 1,
                r.loss
            );
        }
    }
    Ok(())
}

fn cmd_extract(checkpoint: &Path, tracks: &Path, out: &Path) -> CmdResult {
    let ck = Checkpoint::read(checkpoint)?;
    let paths = pipeline::list_wavs(tracks)?;
    let corpus = pipeline::load_tracks(&paths)?;
    let feature = &ck.header.feature;
    let built = pipeline::extract_db(&ck.params, feature, &corpus)?;
    if !built.renormalized.is_empty() {
        log::warn!("{} fingerprint rows re-normalized", built.renormalized.len());
    }
    write_db(out, &built.db, &feature.to_json())?;
    log::info!("{} fingerprints from {} tracks", built.db.len(), corpus.len());
    Ok(())
}

fn cmd_index(db_path: &Path, out: &Path, nlist: usize, nprobe: usize, seed: u64) -> CmdResult {
    let (db, _) = read_db(db_path)?;
    let index = usage_if(IvfIndex::build(&db, nlist, nprobe, seed))?;
    IndexFile {
        db_digest: *db.digest(),
        db_count: db.len(),
        index,
    }
    .write(out)?;
    Ok(())
}

fn cmd_make_queries(
    checkpoint: &Path,
    tracks: &Path,
    assets: Option<&Path>,
    out: &Path,
    write_audio: bool,
    rc: &RunConfig,
) -> CmdResult {
    let ck = Checkpoint::read(checkpoint)?;
    let paths = pipeline::list_wavs(tracks)?;
    let corpus = pipeline::load_tracks(&paths)?;
    let store = assets.map(load_assets).transpose()?;
    let degradation = store.as_ref().map(|s| QueryDegradation {
        assets: s,
        split: Split::Test,
        ranges: &rc.degradation,
    });
    let (set, audio) =
        pipeline::make_query_set(&ck.params, &ck.header.feature, &corpus, degradation, &rc.query, rc.seed)?;
    set.write(out)?;
    if write_audio {
        for (t, a) in set.truth.iter().zip(&audio) {
            write_wav(&out.join(format!("{}.wav", t.track_id)), a)?;
        }
    }
    log::info!("{} query chunks written to {}", set.truth.len(), out.display());
    Ok(())
}

fn load_index(path: &Path, db: &nmfp_core::index::FingerprintDb, nprobe: Option<usize>) -> Result<IvfIndex, Failure> {
    let file = IndexFile::read(path)?;
    if !file.matches(db) {
        return Err(Failure::Data(anyhow::anyhow!(
            "{} was not built over this database",
            path.display()
        )));
    }
    let mut index = file.index;
    if let Some(n) = nprobe {
        usage_if(index.set_nprobe(n))?;
    }
    Ok(index)
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    db_path: &Path,
    index_path: &Path,
    checkpoint: &Path,
    query: &Path,
    length: Option<usize>,
    top: usize,
    k: Option<usize>,
    nprobe: Option<usize>,
) -> CmdResult {
    let (db, _) = read_db(db_path)?;
    let index = load_index(index_path, &db, nprobe)?;
    let ck = Checkpoint::read(checkpoint)?;
    let feature = &ck.header.feature;
    if feature.digest() != *db.digest() {
        return Err(Failure::Data(anyhow::anyhow!(
            "feature digest mismatch: database {}, checkpoint {}",
            digest_hex(db.digest()),
            digest_hex(&feature.digest())
        )));
    }
    let audio = read_working(query)?;
    let extractor = MelExtractor::new(feature.mel.clone())?;
    let mut fps = pipeline::fingerprint_track(&ck.params, &extractor, feature, &audio)?;
    if let Some(l) = length {
        if l == 0 || l > fps.rows() {
            return Err(Failure::Usage(format!("--length must lie in [1, {}]", fps.rows())));
        }
        fps = fps.select_rows(&(0..l).collect::<Vec<_>>());
    }
    let params = SearchParams {
        k: k.unwrap_or(SearchParams::default().k),
    };
    let ranked = sequence_search(&index, &db, &fps, &params);
    let hop = feature.segment.hop_s;
    for c in ranked.iter().take(top) {
        let b = &db.boundaries()[c.track];
        let local = c.db_start_index - b.start_index;
        println!("{}\t{:.1}s\t{:.6}", b.track_id, local as f64 * hop, c.mean_similarity);
    }
    if ranked.is_empty() {
        println!("no match");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    db_path: &Path,
    index_path: &Path,
    queries: &Path,
    lengths: Vec<usize>,
    hop: f64,
    out: Option<&Path>,
    k: Option<usize>,
    nprobe: Option<usize>,
) -> CmdResult {
    let (db, feature) = read_db(db_path)?;
    if (feature.segment.hop_s - hop).abs() > 1e-9 {
        return Err(Failure::Usage(format!(
            "--hop {hop} does not match the database hop {}",
            feature.segment.hop_s
        )));
    }
    let index = load_index(index_path, &db, nprobe)?;
    let set = QuerySet::read(queries)?;
    let spec = nmfp_core::eval::QuerySpec {
        seq_lengths: lengths,
        ..Default::default()
    };
    let params = SearchParams {
        k: k.unwrap_or(SearchParams::default().k),
    };
    let report = pipeline::evaluate(&index, &db, &set, &spec, &feature, &params).map_err(|e| match e {
        pipeline::EvalError::Core(nmfp_core::Error::Config(m)) => Failure::Usage(m),
        e => Failure::Data(e.into()),
    })?;
    print!("{}", report.render_table());
    if let Some(p) = out {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_selftest() -> CmdResult {
    let results = selftest::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::SelfTest)
    }
}
