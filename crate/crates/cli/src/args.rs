use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "chromaset", version, about = "Image-adaptive color style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of images (or a generated desk dataset).
    Train(TrainArgs),
    /// Recolor CONTENT with the color style of STYLE.
    Transfer(TransferArgs),
    /// Write the normalized form of an image.
    Normalize(NormalizeArgs),
    /// Save the stylizing parameters of a style image as a preset file.
    PresetExtract(PresetExtractArgs),
    /// Apply a preset file to an image.
    PresetApply(PresetApplyArgs),
    /// Run the parameter server.
    Serve(ServeArgs),
    /// Time the tiled kernel over several patch sizes.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub patch_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many generated scenes instead of `--data`.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<usize>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub thumbnail_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Consistency loss weight.
    #[arg(long = "lambda", visible_alias = "λ", default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "server")]
    pub checkpoint: Option<PathBuf>,
    /// Fetch parameters from a running server instead of a local checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub server: Option<String>,
    #[arg(long, default_value_t = 512)]
    pub patch_size: usize,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PresetExtractArgs {
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Preset name; defaults to the style file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PresetApplyArgs {
    #[arg(long)]
    pub preset: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Start without a model when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 256)]
    pub max_thumbnail: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated patch sizes.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    pub sizes: Vec<usize>,
    /// Synthetic image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "2048x2048", value_parser = parse_dims)]
    pub image: (usize, usize),
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the CSV here as well as to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `WxH` to `(height, width)`.
fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((h, w)),
        _ => Err(format!("expected positive WIDTHxHEIGHT, got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn dims() {
        assert_eq!(parse_dims("300x200"), Ok((200, 300)));
        assert!(parse_dims("300").is_err());
        assert!(parse_dims("0x5").is_err());
    }

    #[test]
    fn lambda_alias() {
        let cli = Cli::try_parse_from(["chromaset", "train", "--synthetic", "8", "--out", "m.npck", "--λ", "2.5"]).unwrap();
        let Command::Train(t) = cli.command else { panic!("train expected") };
        assert_eq!(t.lambda, 2.5);
    }
}
