use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chromaset_core::bench::{bench_csv, bench_patch_sweep, BenchConfig};
use chromaset_core::encoder::EncoderConfig;
use chromaset_core::imaging::{load_raster, save_raster, Image, RasterError};
use chromaset_core::pipeline::{Pipeline, PipelineError, Style};
use chromaset_core::presets::{load_preset, save_preset, PresetError};
use chromaset_core::synth::desk_dataset;
use chromaset_core::trainer::{
    load_image_dir, loss_log_csv, train_from, Checkpoint, CheckpointError, Model, TrainConfig, TrainError,
};
use chromaset_service::{remote_transfer, ClientError, RemoteClient, ServerConfig, ServerState};
use log::info;

use crate::args::*;

/// A failure reported as one JSON line on standard error.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self { kind, message: message.to_string() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Missing(_) => Self::new("missing_input", e),
            RasterError::Write { .. } | RasterError::Io(_) => Self::new("io", e),
            _ => Self::new("invalid_input", e),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Missing(_) => Self::new("missing_input", e),
            CheckpointError::Io(_) => Self::new("io", e),
            _ => Self::new("invalid_checkpoint", e),
        }
    }
}

impl From<PresetError> for CliError {
    fn from(e: PresetError) -> Self {
        match e {
            PresetError::Missing(_) => Self::new("missing_input", e),
            PresetError::Io(_) => Self::new("io", e),
            _ => Self::new("invalid_preset", e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::FingerprintMismatch { .. } => Self::new("fingerprint_mismatch", e),
            PipelineError::WrongRole(_) => Self::new("invalid_preset", e),
            _ => Self::new("pipeline", e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::new("training", e)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::FingerprintMismatch { .. } => Self::new("fingerprint_mismatch", e),
            _ => Self::new("remote", e),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Transfer(a) => transfer(a),
        Command::Normalize(a) => normalize(a),
        Command::PresetExtract(a) => preset_extract(a),
        Command::PresetApply(a) => preset_apply(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
    }
}

fn pipeline(m: &ModelArgs) -> Result<Pipeline, CliError> {
    let ckpt = Checkpoint::load(&m.checkpoint)?;
    Ok(Pipeline::new(ckpt.model).with_patch_size(m.patch_size))
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        lambda: a.lambda,
        lr: a.lr,
        batch_size: a.batch_size,
        steps: a.steps,
        encoder: EncoderConfig { k: a.k, thumbnail_size: a.thumbnail_size, seed: a.seed, ..EncoderConfig::default() },
        image_size: a.image_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let images: Vec<Image> = match (&a.data, a.synthetic) {
        (_, Some(n)) => desk_dataset(n, a.image_size, a.seed.wrapping_add(1)),
        (Some(dir), None) => {
            if !dir.is_dir() {
                return Err(CliError::new("missing_input", format!("not a directory: {}", dir.display())));
            }
            load_image_dir(dir)?
        }
        (None, None) => unreachable!("clap requires --data or --synthetic"),
    };
    let start = match &a.checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            if c.config() != &config.encoder {
                return Err(CliError::new("invalid_checkpoint", "checkpoint encoder config differs from flags"));
            }
            c
        }
        None => Checkpoint::new(Model::init(&config.encoder).map_err(|e| CliError::new("training", e))?),
    };
    info!("training on {} images for {} steps", images.len(), config.steps);
    let outcome = train_from(&config, &images, start)?;
    outcome.checkpoint.save(&a.out)?;
    let log_path = a.loss_log.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    fs::write(&log_path, loss_log_csv(&outcome.log)).map_err(|e| io_err(&log_path, e))?;
    info!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<(), CliError> {
    let content = load_raster(&a.content)?;
    let style = load_raster(&a.style)?;
    let out = match (&a.checkpoint, &a.server) {
        (_, Some(url)) => remote_transfer(&RemoteClient::new(url.clone())?, &content, &style, Some(a.patch_size))?,
        (Some(ckpt), None) => {
            let p = pipeline(&ModelArgs { checkpoint: ckpt.clone(), patch_size: a.patch_size })?;
            p.transfer(&content, &style)?
        }
        (None, None) => unreachable!("clap requires --checkpoint or --server"),
    };
    save_raster(&out, &a.out)?;
    Ok(())
}

fn normalize(a: NormalizeArgs) -> Result<(), CliError> {
    let image = load_raster(&a.input)?;
    let p = pipeline(&a.model)?;
    let (z, _, _) = p.normalize(&image)?;
    save_raster(&z.image().clamped(), &a.out)?;
    Ok(())
}

fn preset_extract(a: PresetExtractArgs) -> Result<(), CliError> {
    let style = load_raster(&a.style)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let name = a.name.unwrap_or_else(|| stem(&a.style));
    let p = Pipeline::new(ckpt.model);
    let preset = p.extract_preset(&style, name)?;
    save_preset(&preset, &a.out)?;
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "preset".into())
}

fn preset_apply(a: PresetApplyArgs) -> Result<(), CliError> {
    let preset = load_preset(&a.preset)?;
    let image = load_raster(&a.input)?;
    let p = pipeline(&a.model)?;
    let (z, _, _) = p.normalize(&image)?;
    let out = p.stylize(&z, Style::Preset(&preset))?;
    save_raster(&out, &a.out)?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let model = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.model),
        None => None,
    };
    let addr: SocketAddr = (a.host.as_str(), a.port)
        .to_socket_addrs()
        .map_err(|e| CliError::new("invalid_input", e))?
        .next()
        .ok_or_else(|| CliError::new("invalid_input", "no address for host"))?;
    let config = ServerConfig { max_thumbnail_side: a.max_thumbnail, ..ServerConfig::default() };
    chromaset_service::run(addr, Arc::new(ServerState::new(model, config))).map_err(|e| CliError::new("server", e))
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let (height, width) = a.image;
    let config = BenchConfig {
        k: a.k,
        workers: a.workers,
        repeats: a.repeats,
        seed: a.seed,
        ..BenchConfig::new(height, width, a.sizes)
    };
    let records = bench_patch_sweep(&config).map_err(|e| CliError::new("invalid_input", e))?;
    let csv = bench_csv(&records, config.workers);
    print!("{csv}");
    if let Some(path) = &a.out {
        write_file(path, &csv)?;
    }
    Ok(())
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}
