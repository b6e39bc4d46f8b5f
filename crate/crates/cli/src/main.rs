//! Command-line driver for the region embedding pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use region_embed::pipeline::{
    ablation_csv, run_ablation, run_all, run_build_graphs, run_embed, run_eval_cluster, run_eval_popularity,
    run_train, run_train_kg, PipelineConfig,
};
use region_embed::synth::{generate_city, SynthConfig};
use region_embed::Result;

#[derive(Parser, Debug)]
#[command(name = "region-embed", version, about = "Multi-graph urban region embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic city with planted communities.
    Synth(SynthArgs),
    /// Build correlation matrices and kNN graphs.
    BuildGraphs(Common),
    /// Train TransD on the POI knowledge graph.
    TrainKg(Common),
    /// Train the configured variant and write embeddings.
    Train(Common),
    /// Recompute embeddings from a saved checkpoint.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/checkpoint.csv")]
        checkpoint: PathBuf,
    },
    /// K-means clustering of an embedding file against ground-truth labels.
    EvalCluster {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/embeddings.csv")]
        embeddings: PathBuf,
    },
    /// Cross-validated Lasso popularity prediction from an embedding file.
    EvalPopularity {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out/embeddings.csv")]
        embeddings: PathBuf,
    },
    /// Train and evaluate every ablation variant.
    Ablate(Common),
    /// Full pipeline for the configured variant.
    All(Common),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Grid size as WIDTHxHEIGHT.
    #[arg(long, default_value = "6x6", value_parser = parse_grid)]
    grid: (usize, usize),
    /// Number of planted communities.
    #[arg(long, default_value_t = 4)]
    communities: usize,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trips sampled per origin region [default: 5]
    #[arg(long)]
    trips_per_region: Option<usize>,
    /// POIs placed in each region [default: 4]
    #[arg(long)]
    pois_per_region: Option<usize>,
    /// Output directory.
    #[arg(short = 'o', long = "out", default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON pipeline config; flags override its fields.
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    /// Directory with the input files under their default names.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Root seed for every random substream.
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Neighbors per region in the kNN graphs.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the origin-side similarity in the mobility correlation.
    #[arg(long)]
    alpha: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// One of HM, GN, SI, HM+GN, HM+SI, R2V-g, R2V-f, full.
    #[arg(long)]
    variant: Option<String>,
    /// Score the destination term of the mobility loss against transposed counts.
    #[arg(long)]
    swap_od: bool,
    /// Fit popularity on log1p(check-ins).
    #[arg(long)]
    log1p: bool,
    /// Output directory.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad grid dimension `{v}`"));
    Ok((p(w)?, p(h)?))
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.data {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.dim {
            cfg.training.dim = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.epochs {
            cfg.training.epochs = v;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.clone();
        }
        if self.swap_od {
            cfg.training.swap_od = true;
        }
        if self.log1p {
            cfg.log1p = true;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        cfg.variant()?;
        cfg.training.validate()?;
        Ok(cfg)
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let mut cfg = SynthConfig {
                width: a.grid.0,
                height: a.grid.1,
                communities: a.communities,
                seed: a.seed,
                ..Default::default()
            };
            if let Some(v) = a.trips_per_region {
                cfg.trips_per_region = v;
            }
            if let Some(v) = a.pois_per_region {
                cfg.pois_per_region = v;
            }
            let city = generate_city(&cfg)?;
            city.write(&a.out)?;
            println!("wrote {} regions to {}", city.n(), a.out.display());
        }
        Command::BuildGraphs(c) => {
            let g = run_build_graphs(&c.config()?)?;
            println!("AC graph: {} edges", g.ac_graph.edge_count());
        }
        Command::TrainKg(c) => {
            let kg = run_train_kg(&c.config()?)?;
            let last = kg.log.last().map_or(f64::NAN, |e| e.loss);
            println!("{} triples, final loss {last:.4}", kg.triples.len());
        }
        Command::Train(c) => {
            let (_, report) = run_train(&c.config()?)?;
            let last = report.log.last().map_or(f64::NAN, |b| b.total);
            println!("{} epochs, final loss {last:.4}", report.log.len());
        }
        Command::Embed { common, checkpoint } => {
            let e = run_embed(&common.config()?, &checkpoint)?;
            println!("embedded {} regions", e.nrows());
        }
        Command::EvalCluster { common, embeddings } => {
            let c = run_eval_cluster(&common.config()?, &embeddings)?;
            println!("nmi {:.4} ari {:.4}", c.nmi, c.ari);
        }
        Command::EvalPopularity { common, embeddings } => {
            let r = run_eval_popularity(&common.config()?, &embeddings)?;
            println!("mae {:.4} rmse {:.4} r2 {:.4} lambda {}", r.mae, r.rmse, r.r2, r.lambda);
        }
        Command::Ablate(c) => {
            print!("{}", ablation_csv(&run_ablation(&c.config()?)?));
        }
        Command::All(c) => {
            let o = run_all(&c.config()?)?;
            if let Some(cl) = &o.clustering {
                println!("nmi {:.4} ari {:.4}", cl.nmi, cl.ari);
            }
            if let Some(p) = &o.popularity {
                println!("mae {:.4} rmse {:.4} r2 {:.4}", p.mae, p.rmse, p.r2);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
