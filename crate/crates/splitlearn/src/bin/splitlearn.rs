//! Operator entry point: run the cloud server, clients, the in-process
//! simulation, monolithic baselines, the sharing/non-sharing comparison, or
//! the feature-inversion attack, from a flat key=value config file plus flag
//! overrides. All randomness derives from --seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use splitlearn::config::RunConfig;
use splitlearn::run::execute;

#[derive(Parser, Debug)]
#[command(
    name = "splitlearn",
    about = "Split learning with a shared extractor, cloud middle model, local classifiers, and a feature-inversion attack harness",
    after_help = "Modes: serve | client | local-sim | baseline | attack | compare.\n\
                  Flags override same-named keys (underscored) from --config."
)]
struct Cli {
    /// serve | client | local-sim | baseline | attack | compare
    #[arg(long)]
    mode: Option<String>,
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of clients (serve, local-sim, baseline, compare).
    #[arg(long)]
    clients: Option<u32>,
    /// This client's id, starting at 1 (client mode).
    #[arg(long)]
    client_id: Option<u32>,
    /// Split depth: extractor ends after block 1, 2, or 3.
    #[arg(long)]
    depth: Option<u8>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f32>,
    /// idx | synthetic
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    #[arg(long)]
    idx_test_images: Option<PathBuf>,
    #[arg(long)]
    idx_test_labels: Option<PathBuf>,
    /// Synthetic dataset size.
    #[arg(long)]
    synth_samples: Option<usize>,
    #[arg(long)]
    synth_classes: Option<usize>,
    /// 28 or 32.
    #[arg(long)]
    image_size: Option<usize>,
    /// on | off — share the common extractor by epoch-end averaging.
    #[arg(long)]
    share: Option<String>,
    /// Address the server listens on (serve mode).
    #[arg(long)]
    listen: Option<String>,
    /// Server address a client connects to (client mode).
    #[arg(long)]
    connect: Option<String>,
    /// Output directory for metrics, checkpoints, logs, and dumps.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classes per client, e.g. 0-3/4-6/7-9 (defaults to contiguous chunks).
    #[arg(long)]
    partition: Option<String>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_take: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_take: Option<usize>,
    /// Epoch-barrier timeout in seconds.
    #[arg(long)]
    barrier_timeout: Option<u64>,
    /// Decoder SGD steps per attacked depth.
    #[arg(long)]
    attack_steps: Option<usize>,
    #[arg(long)]
    attack_lr: Option<f32>,
    #[arg(long)]
    attack_batch: Option<usize>,
    /// Held-out samples the attacker trains its decoder on.
    #[arg(long)]
    attack_samples: Option<usize>,
    /// Depths to attack, e.g. 1,2,3.
    #[arg(long)]
    depths: Option<String>,
    /// Trained feature-stack checkpoint (stack.spln from a training run).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v));
            }
        };
        push("mode", self.mode.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("clients", self.clients.map(|v| v.to_string()));
        push("client_id", self.client_id.map(|v| v.to_string()));
        push("depth", self.depth.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("dataset", self.dataset.clone());
        push(
            "idx_images",
            self.idx_images.as_ref().map(|p| p.display().to_string()),
        );
        push(
            "idx_labels",
            self.idx_labels.as_ref().map(|p| p.display().to_string()),
        );
        push(
            "idx_test_images",
            self.idx_test_images.as_ref().map(|p| p.display().to_string()),
        );
        push(
            "idx_test_labels",
            self.idx_test_labels.as_ref().map(|p| p.display().to_string()),
        );
        push("synth_samples", self.synth_samples.map(|v| v.to_string()));
        push("synth_classes", self.synth_classes.map(|v| v.to_string()));
        push("image_size", self.image_size.map(|v| v.to_string()));
        push("share", self.share.clone());
        push("listen", self.listen.clone());
        push("connect", self.connect.clone());
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("partition", self.partition.clone());
        push("train_take", self.train_take.map(|v| v.to_string()));
        push("test_take", self.test_take.map(|v| v.to_string()));
        push("barrier_timeout", self.barrier_timeout.map(|v| v.to_string()));
        push("attack_steps", self.attack_steps.map(|v| v.to_string()));
        push("attack_lr", self.attack_lr.map(|v| v.to_string()));
        push("attack_batch", self.attack_batch.map(|v| v.to_string()));
        push("attack_samples", self.attack_samples.map(|v| v.to_string()));
        push("depths", self.depths.clone());
        push(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()),
        );
        pairs
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match RunConfig::from_sources(cli.config.as_deref(), &cli.overrides()) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("splitlearn: {e}");
            return ExitCode::FAILURE;
        }
    };
    match execute(&config) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("splitlearn: {e}");
            ExitCode::FAILURE
        }
    }
}
