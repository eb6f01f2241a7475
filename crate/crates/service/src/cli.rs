//! `slotgen` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use slotgen_core::checkpoint::Checkpoint;
use slotgen_core::concept::{harvest, ConceptLibrary, LibraryContext, PromptFile, SlotRecord, BACKGROUND_AREA};
use slotgen_core::config::{DecoderKind, RunConfig};
use slotgen_core::data::sprites::{generate_shadow_sprites, load_metadata, save_scenes, SpriteParams};
use slotgen_core::data::{list_images, load_dataset, make_ood_prompt_specs, rle, DatasetSpec, OodKind, OodParams, Split};
use slotgen_core::eval::{
    attention_segmentation, discriminator_probe, fid, foreground_ari, label_map, mse_metric, write_curve, write_reports,
    ConvEmbedder, MetricReport, ProbeConfig,
};
use slotgen_core::image::Image;
use slotgen_core::rng::RandomSource;
use slotgen_core::training::{AnyModel, MetricRecord, Trainer};
use slotgen_core::Error;

use crate::api::{router, AppState, ServiceConfig};

/// Overrides the directory that relative checkpoint paths resolve against.
pub const CHECKPOINT_DIR_ENV: &str = "SLOTGEN_CHECKPOINT_DIR";

#[derive(Parser, Debug)]
#[command(name = "slotgen", version, about = "Object-slot training, concept libraries and slot-prompt composition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Compute metrics (mse, fid, ari) and write a report.
    Evaluate(EvaluateArgs),
    /// Encode and greedily re-render images.
    Reconstruct(ReconstructArgs),
    /// Collect slot records from a dataset.
    Harvest(HarvestArgs),
    /// Cluster harvested records into a concept library.
    BuildLibrary(BuildLibraryArgs),
    /// Render every prompt of a prompt-spec file.
    Compose(ComposeArgs),
    /// Generate a ShadowSprites dataset or out-of-distribution prompt specs.
    GenData(GenDataArgs),
    /// Train a small real-vs-generated discriminator and record its curve.
    ProbeDiscriminator(ProbeArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub decoder: Option<Decoder>,
    /// Dataset folder (overrides `dataset_root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total step budget (overrides `max_steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Decoder {
    Slot2seq,
    Mixture,
}

impl From<Decoder> for DecoderKind {
    fn from(d: Decoder) -> Self {
        match d {
            Decoder::Slot2seq => DecoderKind::Slot2seq,
            Decoder::Mixture => DecoderKind::Mixture,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Metric {
    /// Reconstruction MSE on a dataset split.
    Mse,
    /// Fréchet distance between two image folders (bundled extractor).
    Fid,
    /// Foreground ARI of slot attention on a ShadowSprites folder.
    Ari,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset folder (mse, ari) or real images (fid).
    #[arg(long)]
    pub data: PathBuf,
    /// Generated images (fid).
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Image size used when loading folders for fid.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-lines report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or folder.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct HarvestArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LibraryKind {
    Categorical,
    Positional,
}

#[derive(Args, Debug)]
pub struct BuildLibraryArgs {
    /// Output of `harvest`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum, default_value = "categorical")]
    pub kind: LibraryKind,
    /// Number of clusters (categorical).
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Grid side (positional).
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Explicit background clusters (categorical); detected by area otherwise.
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<usize>>,
    #[arg(long, default_value_t = BACKGROUND_AREA)]
    pub background_area: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the prompt file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Dataset folder, or prompt-spec file with `--ood`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub min_sprites: Option<usize>,
    #[arg(long)]
    pub max_sprites: Option<usize>,
    #[arg(long)]
    pub textured_floor: bool,
    #[arg(long)]
    pub textured_sprites: bool,
    /// Emit out-of-distribution prompt specs instead of images.
    #[arg(long, value_enum, requires = "library")]
    pub ood: Option<OodArg>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Smallest and largest training object count (count_shift).
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub train_counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OodArg {
    TwoTowers,
    CountShift,
    AttributeSwap,
}

impl From<OodArg> for OodKind {
    fn from(k: OodArg) -> Self {
        match k {
            OodArg::TwoTowers => OodKind::TwoTowers,
            OodArg::CountShift => OodKind::CountShift,
            OodArg::AttributeSwap => OodKind::AttributeSwap,
        }
    }
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Size images are loaded at before the probe's own resize.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out accuracy curve as CSV (`step,value`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Base directory for relative library source paths.
    #[arg(long, default_value = ".")]
    pub image_root: PathBuf,
    #[arg(long, default_value_t = 600)]
    pub session_ttl_secs: u64,
    #[arg(long, default_value_t = 64)]
    pub max_sessions: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or missing/invalid config: exit 2.
    Usage(String),
    /// Anything else: exit 1.
    Failed(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Failed(e),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Harvest(a) => harvest_cmd(a),
        Command::BuildLibrary(a) => build_library(a),
        Command::Compose(a) => compose(a),
        Command::GenData(a) => gen_data(a),
        Command::ProbeDiscriminator(a) => probe(a),
        Command::Serve(a) => serve(a),
    }
}

/// Relative checkpoint paths resolve against `SLOTGEN_CHECKPOINT_DIR` when set.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    match std::env::var_os(CHECKPOINT_DIR_ENV) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_model(p: &Path) -> CliResult<(Checkpoint, AnyModel)> {
    let ck = Checkpoint::load(&checkpoint_path(p))?;
    let model = ck.model()?;
    Ok((ck, model))
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn train(a: TrainArgs) -> CliResult {
    if !a.config.is_file() {
        return Err(CliError::Usage(format!("config file {} does not exist", a.config.display())));
    }
    let mut run = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(d) = a.decoder {
        run.decoder = d.into();
    }
    if let Some(d) = &a.data {
        run.dataset_root = d.display().to_string();
    }
    if let Some(o) = &a.out {
        run.output_dir = o.display().to_string();
    }
    if let Some(s) = a.steps {
        run.max_steps = s;
    }
    run.validate()?;
    if run.dataset_root.is_empty() {
        return Err(CliError::Usage("no dataset: set dataset_root or pass --data".into()));
    }
    let data = load_dataset(&DatasetSpec {
        root: PathBuf::from(&run.dataset_root),
        image_size: run.image_size,
        train_fraction: run.train_fraction,
        val_fraction: run.val_fraction,
        seed: run.seed,
        max_images: run.max_images,
    })?;
    let (train, val) = (data.images(Split::Train), data.images(Split::Val));
    log::info!("{} train / {} val images", train.len(), val.len());
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Checkpoint::load(&checkpoint_path(p))?.trainer()?;
            t.run.max_steps = run.max_steps;
            t
        }
        None => Trainer::new(&run)?,
    };
    let out = PathBuf::from(&run.output_dir);
    create_dir(&out)?;
    fs::write(out.join("config.toml"), trainer.run.to_toml()).map_err(|e| io_err(&out, e))?;
    let log_path = out.join("metrics.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let every = trainer.run.checkpoint_every.max(1);
    while trainer.state.step < run.max_steps {
        for r in trainer.step(&train, &val)? {
            writeln!(log_file, "{}", serde_json::to_string(&r).map_err(Error::from)?).map_err(|e| io_err(&log_path, e))?;
            if let MetricRecord::Val { step, loss, reductions, .. } = r {
                log::info!("step {step}: val loss {loss:.4} (lr reductions {reductions})");
            }
        }
        if trainer.state.step % every == 0 {
            Checkpoint::of_trainer(&trainer).save(&out.join(format!("step_{:07}.ckpt", trainer.state.step)))?;
        }
    }
    Checkpoint::of_trainer(&trainer).save(&out.join("last.ckpt"))?;
    log::info!("finished at step {}", trainer.state.step);
    Ok(())
}

fn load_folder(dir: &Path, size: usize) -> CliResult<(Vec<String>, Vec<Image>)> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(CliError::Failed(Error::Dataset(format!("no images under {}", dir.display()))));
    }
    let mut names = Vec::with_capacity(files.len());
    let mut images = Vec::with_capacity(files.len());
    for (n, p) in files {
        images.push(Image::load(&p, Some(size))?);
        names.push(n);
    }
    Ok((names, images))
}

fn image_size(ck: &Checkpoint) -> usize {
    ck.header.config.image_size
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let need_ck = || {
        a.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("this metric needs --checkpoint".into()))
    };
    let report = match a.metric {
        Metric::Mse => {
            let (ck, model) = load_model(need_ck()?)?;
            let run = &ck.header.config;
            let data = load_dataset(&DatasetSpec {
                root: a.data.clone(),
                image_size: run.image_size,
                train_fraction: run.train_fraction,
                val_fraction: run.val_fraction,
                seed: run.seed,
                max_images: run.max_images,
            })?;
            let images = data.images(a.split.into());
            if images.is_empty() {
                return Err(CliError::Failed(Error::Dataset("the requested split is empty".into())));
            }
            let mut rng = RandomSource::seed(a.seed);
            let mut recon = Vec::with_capacity(images.len());
            for chunk in images.chunks(16) {
                recon.extend(model.reconstruct(chunk, &mut rng)?);
            }
            let mut r = MetricReport::new("mse", mse_metric(&images, &recon)?);
            r.n_real = Some(images.len());
            r.seed = Some(a.seed);
            r
        }
        Metric::Fid => {
            let gen_dir = a
                .generated
                .as_deref()
                .ok_or_else(|| CliError::Usage("fid needs --generated".into()))?;
            let (_, real) = load_folder(&a.data, a.size)?;
            let (_, generated) = load_folder(gen_dir, a.size)?;
            MetricReport::of_fid(&fid(&real, &generated, &ConvEmbedder::new())?, None)
        }
        Metric::Ari => {
            let (ck, model) = load_model(need_ck()?)?;
            let size = image_size(&ck);
            let meta = load_metadata(&a.data)?;
            let mut total = 0.0;
            let mut rng = RandomSource::seed(a.seed);
            for chunk in meta.chunks(16) {
                let imgs = chunk
                    .iter()
                    .map(|m| Image::load(&a.data.join(&m.file), None))
                    .collect::<Result<Vec<_>, _>>()?;
                if imgs.iter().any(|i| i.height() != size || i.width() != size) {
                    return Err(CliError::Failed(Error::Invalid(format!("ari needs {size}x{size} scenes"))));
                }
                let set = model.encode(&imgs, &mut rng)?;
                for (b, m) in chunk.iter().enumerate() {
                    let maps = set.maps(b);
                    let grid = (maps[0].len() as f64).sqrt().round() as usize;
                    let pred = attention_segmentation(&maps, grid, size)?;
                    let masks: Vec<Vec<bool>> = m.sprites.iter().map(|s| rle::decode(&s.mask_rle)).collect();
                    total += foreground_ari(&label_map(&masks, size * size)?, &pred)?;
                }
            }
            let mut r = MetricReport::new("foreground_ari", total / meta.len().max(1) as f64);
            r.n_real = Some(meta.len());
            r.seed = Some(a.seed);
            r
        }
    };
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    if let Some(out) = &a.out {
        write_reports(out, &[report])?;
    }
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CliResult {
    let (ck, model) = load_model(&a.checkpoint)?;
    let size = image_size(&ck);
    let (names, images) = if a.input.is_dir() {
        load_folder(&a.input, size)?
    } else {
        let name = a.input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        (vec![name], vec![Image::load(&a.input, Some(size))?])
    };
    create_dir(&a.out)?;
    let mut rng = RandomSource::seed(a.seed);
    for (names, chunk) in names.chunks(16).zip(images.chunks(16)) {
        for (n, img) in names.iter().zip(model.reconstruct(chunk, &mut rng)?) {
            let stem = Path::new(n).with_extension("").to_string_lossy().replace('/', "_");
            img.save_png(&a.out.join(format!("{stem}_recon.png")))?;
        }
    }
    Ok(())
}

/// Output of `harvest`: records plus everything a library header needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarvestFile {
    pub model_hash: String,
    pub decoder: DecoderKind,
    pub slot_dim: usize,
    pub num_slots: usize,
    pub num_cells: usize,
    pub sources: Vec<String>,
    pub records: Vec<SlotRecord>,
}

fn harvest_cmd(a: HarvestArgs) -> CliResult {
    let (ck, model) = load_model(&a.checkpoint)?;
    let run = &ck.header.config;
    let data = load_dataset(&DatasetSpec {
        root: a.data.clone(),
        image_size: run.image_size,
        train_fraction: run.train_fraction,
        val_fraction: run.val_fraction,
        seed: run.seed,
        max_images: run.max_images,
    })?;
    let split: Split = a.split.into();
    let items: Vec<_> = data.items_of(split).collect();
    let images: Vec<Image> = items.iter().map(|i| i.image.clone()).collect();
    if images.is_empty() {
        return Err(CliError::Failed(Error::Dataset("the requested split is empty".into())));
    }
    let sources = items
        .iter()
        .map(|i| fs::canonicalize(&i.path).unwrap_or_else(|_| i.path.clone()).display().to_string())
        .collect();
    let records = harvest(&model, &images, 16, a.seed)?;
    let file = HarvestFile {
        model_hash: ck.model_hash(),
        decoder: model.kind(),
        slot_dim: model.slot_dim(),
        num_slots: model.num_slots(),
        num_cells: records.first().map_or(0, |r| r.attention.len()),
        sources,
        records,
    };
    let bytes = serde_json::to_vec(&file).map_err(Error::from)?;
    fs::write(&a.out, bytes).map_err(|e| io_err(&a.out, e))?;
    log::info!("{} records from {} images", file.records.len(), images.len());
    Ok(())
}

fn build_library(a: BuildLibraryArgs) -> CliResult {
    let bytes = fs::read(&a.records).map_err(|e| io_err(&a.records, e))?;
    let h: HarvestFile = serde_json::from_slice(&bytes).map_err(Error::from)?;
    let ctx = LibraryContext {
        slot_dim: h.slot_dim,
        num_cells: h.num_cells,
        num_slots: h.num_slots,
        decoder: h.decoder,
        model_hash: h.model_hash,
        sources: h.sources,
    };
    let lib = match a.kind {
        LibraryKind::Categorical => ConceptLibrary::categorical(
            &ctx,
            h.records,
            a.k,
            a.max_iters,
            a.background.as_deref(),
            &mut RandomSource::seed(a.seed),
        )?,
        LibraryKind::Positional => ConceptLibrary::positional(&ctx, h.records, a.grid, a.background_area)?,
    };
    lib.save(&a.out)?;
    log::info!(
        "{} clusters ({} background)",
        lib.clusters.len(),
        lib.background_clusters().len()
    );
    Ok(())
}

fn compose(a: ComposeArgs) -> CliResult {
    let (ck, model) = load_model(&a.checkpoint)?;
    let lib = ConceptLibrary::load(&a.library)?;
    lib.check_compatible(&ck.model_hash(), model.slot_dim(), model.num_slots())?;
    let spec = PromptFile::load(&a.prompt)?;
    create_dir(&a.out)?;
    let mut rng = RandomSource::seed(a.seed.unwrap_or(spec.seed));
    let log_path = a.out.join("prompts.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    for (i, p) in spec.prompts.iter().enumerate() {
        let prompt = lib.build_prompt(p, &mut rng)?;
        let img = model
            .render(&[prompt.slots.clone()], &mut rng)?
            .pop()
            .ok_or_else(|| CliError::Failed(Error::Invalid("empty render".into())))?;
        let file = format!("compose_{i:04}.png");
        img.save_png(&a.out.join(&file))?;
        let line = serde_json::json!({ "file": file, "spec": p, "sources": prompt.sources });
        writeln!(log_file, "{line}").map_err(|e| io_err(&log_path, e))?;
    }
    log::info!("wrote {} images", spec.prompts.len());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult {
    if let Some(kind) = a.ood {
        let lib_path = a.library.as_deref().ok_or_else(|| CliError::Usage("--ood needs --library".into()))?;
        let lib = ConceptLibrary::load(lib_path)?;
        let mut p = OodParams {
            repeats: a.repeats,
            seed: a.seed,
            ..OodParams::default()
        };
        if let Some(c) = &a.train_counts {
            p.train_counts = (c[0], c[1]);
        }
        let file = make_ood_prompt_specs(kind.into(), &lib, &p)?;
        file.save(&a.out)?;
        log::info!("wrote {} prompt specs", file.prompts.len());
        return Ok(());
    }
    let mut p = SpriteParams::new(a.size);
    p.textured_floor = a.textured_floor;
    p.textured_sprites = a.textured_sprites;
    if let Some(n) = a.min_sprites {
        p.min_sprites = n;
    }
    if let Some(n) = a.max_sprites {
        p.max_sprites = n;
    }
    p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scenes = generate_shadow_sprites(&p, a.seed, a.count)?;
    save_scenes(&a.out, &p, &scenes)?;
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn probe(a: ProbeArgs) -> CliResult {
    let (_, real) = load_folder(&a.real, a.size)?;
    let (_, generated) = load_folder(&a.generated, a.size)?;
    let n = real.len().min(generated.len());
    let cfg = ProbeConfig {
        steps: a.steps,
        ..ProbeConfig::default()
    };
    let r = discriminator_probe(&real[..n], &generated[..n], &cfg, a.seed)?;
    let curve: Vec<(usize, f64)> = r.curve.iter().map(|p| (p.step, p.accuracy)).collect();
    write_curve(&a.out, &curve)?;
    let summary = serde_json::json!({
        "steps_to_90": r.steps_to_90,
        "degenerate": r.degenerate,
        "n_train": r.n_train,
        "n_heldout": r.n_heldout,
        "seed": r.seed,
    });
    println!("{summary}");
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let (ck, model) = load_model(&a.checkpoint)?;
    let lib = ConceptLibrary::load(&a.library)?;
    let cfg = ServiceConfig {
        session_ttl: Duration::from_secs(a.session_ttl_secs),
        max_sessions: a.max_sessions,
        image_root: a.image_root.clone(),
    };
    let state = Arc::new(AppState::new(model, ck.model_hash(), image_size(&ck), lib, cfg)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(Error::Invalid(e.to_string())))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {}: {e}", a.addr)))?;
        log::info!("listening on {}", a.addr);
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Failed(Error::Invalid(e.to_string())))
    })
}
