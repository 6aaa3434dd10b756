//! `nevae` command-line driver: training, sampling, latent-space edits,
//! synthetic experiments and property optimization.

mod experiments;

use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use nevae::decoder::sample_from_latent;
use nevae::encoder::{posterior, sample_latent};
use nevae::latentopt::{bo_loop, sgp_fit, summarize_molecules, BoConfig, MoleculeSpace, PropertyOracle, ProxyProperty};
use nevae::masks::{MaskKind, MaskSet};
use nevae::molgraph::{compute_metrics, parse_corpus, validate_molecule, MolecularGraph, ValidityRule};
use nevae::tensor::Tensor;
use nevae::training::{train_with, Checkpoint, Hyperparams, ZetaKind};

/// Bad input: unreadable or malformed files, invalid arguments. Exits 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "nevae", version, about = "Variational autoencoder for molecular graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a JSONL corpus.
    Train(TrainArgs),
    /// Sample molecules from the prior or around a corpus molecule.
    Sample(SampleArgs),
    /// Decode points on the line between two molecules' latents.
    Interpolate(InterpolateArgs),
    /// Decode a molecule after scaling one node's latent.
    Perturb(PerturbArgs),
    /// Run a synthetic-graph experiment end to end.
    Synth(experiments::SynthArgs),
    /// Batch Bayesian optimization of a molecular property in latent space.
    Bo(BoArgs),
    /// Write a generated corpus as JSONL.
    GenerateCorpus(GenerateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Start from the synthetic-graph defaults instead of the molecule ones.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long = "D")]
    pub d: Option<usize>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Negative samples per edge step.
    #[arg(long = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Source samples per graph.
    #[arg(long = "source-samples")]
    pub source_samples: Option<usize>,
    #[arg(long, default_value = "uniform")]
    pub zeta: String,
    #[arg(long, default_value = "none")]
    pub mask: String,
}

impl ModelArgs {
    pub fn hyper(&self, seed: u64) -> Result<Hyperparams> {
        let base = if self.synthetic {
            Hyperparams::synthetic()
        } else {
            Hyperparams::molecules()
        };
        let hyper = Hyperparams {
            d: self.d.unwrap_or(base.d),
            k: self.k.unwrap_or(base.k),
            l: self.l.unwrap_or(base.l),
            hidden: self.hidden.unwrap_or(base.hidden),
            lr: self.lr.unwrap_or(base.lr),
            iterations: self.iters.unwrap_or(base.iterations),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            s: self.source_samples.unwrap_or(base.s),
            zeta: parse_arg::<ZetaKind>(&self.zeta, "--zeta")?,
            mask: parse_arg::<MaskKind>(&self.mask, "--mask")?,
            seed,
            ..base
        };
        hyper
            .validate()
            .map_err(|e| input_error(format!("invalid hyperparameters: {e}")))?;
        Ok(hyper)
    }
}

fn parse_arg<T: FromStr>(s: &str, flag: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e| input_error(format!("{flag}: {e}")))
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Checkpoint path; defaults to `<out-dir>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Validity {
    Valence,
    Full,
}

impl From<Validity> for ValidityRule {
    fn from(v: Validity) -> Self {
        match v {
            Validity::Valence => ValidityRule::Valence,
            Validity::Full => ValidityRule::Full,
        }
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training corpus, for novelty and posterior mode.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    count: usize,
    /// `prior` or `posterior:<molecule index>`.
    #[arg(long, default_value = "prior")]
    mode: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "valence")]
    mask: String,
    #[arg(long, value_enum, default_value = "valence")]
    validity: Validity,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Index of the first molecule.
    #[arg(long)]
    a: usize,
    /// Index of the second molecule; must have as many atoms as the first.
    #[arg(long)]
    b: usize,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "valence")]
    mask: String,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    molecule: usize,
    #[arg(long)]
    node: usize,
    /// Comma-separated amplitudes; node latent `z` becomes `z + a·z`.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
    amplitudes: Vec<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "valence")]
    mask: String,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    inducing: usize,
    #[arg(long = "test-fraction", default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value = "valence")]
    mask: String,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorpusKind {
    Molecules,
    TriangleFree,
    Kronecker,
    Ba,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: CorpusKind,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Largest molecule, in atoms including hydrogens.
    #[arg(long = "max-atoms", default_value_t = 12)]
    max_atoms: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn load_corpus(path: &Path) -> Result<Vec<MolecularGraph>> {
    let file = fs::File::open(path).map_err(|e| input_error(format!("cannot read corpus {}: {e}", path.display())))?;
    let corpus = parse_corpus(BufReader::new(file))
        .map_err(|e| input_error(format!("malformed corpus {}: {e}", path.display())))?;
    if corpus.is_empty() {
        return Err(input_error(format!("corpus {} contains no graphs", path.display())));
    }
    Ok(corpus)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| input_error(format!("cannot load checkpoint {}: {e}", path.display())))
}

pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

/// The block every JSON output carries: what ran, with which seed, and at
/// what scale.
pub fn metadata(command: &str, seed: u64, scale: Value) -> Value {
    json!({
        "tool": "nevae",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "scale": scale,
    })
}

/// Independent per-item seeds drawn from one master seed.
pub fn item_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

fn mask_set(s: &str) -> Result<MaskSet> {
    let kinds = s
        .split(',')
        .map(|k| parse_arg::<MaskKind>(k.trim(), "--mask"))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet::of(&kinds))
}

fn pick<'a>(corpus: &'a [MolecularGraph], index: usize, what: &str) -> Result<&'a MolecularGraph> {
    corpus.get(index).ok_or_else(|| {
        input_error(format!(
            "{what} index {index} out of range for {} molecules",
            corpus.len()
        ))
    })
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let hyper = args.model.hyper(args.seed)?;
    prepare_out_dir(&args.out_dir)?;
    let ck_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out_dir.join("model.ckpt"));
    let log_path = args.out_dir.join("elbo_log.csv");
    let mut log = fs::File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?;
    writeln!(log, "iteration,mean_elbo,wall_time")?;
    let mut io_err = None;
    let out = train_with(&corpus, &hyper, |row, _| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{},{},{}", row.iteration, row.mean_elbo, row.wall_time) {
                io_err = Some(e);
            }
        }
        if row.iteration % 50 == 0 {
            log::info!("iteration {}: mean objective {:.4}", row.iteration, row.mean_elbo);
        }
    })
    .map_err(|e| match e {
        nevae::Error::Invalid(_) | nevae::Error::Config(_) => input_error(e.to_string()),
        other => anyhow::Error::new(other).context("training failed"),
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("cannot write {}", log_path.display()));
    }
    out.checkpoint
        .save(&ck_path)
        .with_context(|| format!("cannot write checkpoint {}", ck_path.display()))?;
    let last = out.log.last().map(|r| r.mean_elbo);
    write_json(
        &args.out_dir.join("train_summary.json"),
        &json!({
            "metadata": metadata("train", args.seed, json!({
                "corpus_size": corpus.len(),
                "iterations": hyper.iterations,
                "batch_size": hyper.batch_size,
            })),
            "hyperparameters": hyper,
            "lambda_n": out.checkpoint.lambda_n,
            "final_mean_elbo": last,
            "checkpoint": ck_path,
            "log": log_path,
        }),
    )?;
    println!(
        "trained {} iterations on {} graphs; final mean objective {:.4}; checkpoint {}",
        hyper.iterations,
        corpus.len(),
        last.unwrap_or(f64::NAN),
        ck_path.display()
    );
    Ok(())
}

enum SampleMode {
    Prior,
    Posterior(usize),
}

impl FromStr for SampleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "prior" {
            return Ok(SampleMode::Prior);
        }
        s.strip_prefix("posterior:")
            .and_then(|id| id.parse().ok())
            .map(SampleMode::Posterior)
            .ok_or_else(|| format!("expected `prior` or `posterior:<index>`, got {s:?}"))
    }
}

fn write_molecules(path: &Path, graphs: &[MolecularGraph]) -> Result<()> {
    write_file(path, nevae::molgraph::write_corpus(graphs))
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    if args.count == 0 {
        return Err(input_error("--count must be at least 1"));
    }
    let mode: SampleMode = parse_arg(&args.mode, "--mode")?;
    let masks = mask_set(&args.mask)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    prepare_out_dir(&args.out_dir)?;
    let table = ck.hyper.table;
    let seeds = item_seeds(args.seed, args.count);
    let samples: Vec<MolecularGraph> = match mode {
        SampleMode::Prior => {
            let opts = nevae::decoder::SampleOptions {
                n: None,
                lambda_n: ck.lambda_n,
                masks,
                table,
            };
            seeds
                .par_iter()
                .map(|&s| {
                    nevae::decoder::sample_graph(&ck.params.dec, &mut ChaCha8Rng::seed_from_u64(s), &opts).map(|r| r.0)
                })
                .collect::<nevae::Result<_>>()?
        }
        SampleMode::Posterior(id) => {
            let g = pick(&corpus, id, "molecule")?;
            let post = posterior(g, &ck.params.enc)?;
            seeds
                .par_iter()
                .map(|&s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let (z, _) = sample_latent(&post, &mut rng);
                    sample_from_latent(&ck.params.dec, &z, masks, &table, &mut rng).map(|r| r.0)
                })
                .collect::<nevae::Result<_>>()?
        }
    };
    let metrics = compute_metrics(&samples, &corpus, &table, args.validity.into())?;
    write_molecules(&args.out_dir.join("samples.jsonl"), &samples)?;
    write_json(
        &args.out_dir.join("metrics.json"),
        &json!({
            "metadata": metadata("sample", args.seed, json!({
                "samples": args.count,
                "reference_samples": 1_000_000,
                "corpus_size": corpus.len(),
            })),
            "mode": args.mode,
            "mask": args.mask,
            "metrics": metrics,
        }),
    )?;
    println!(
        "{} samples: validity {:.4}, uniqueness {:.4}, novelty {:.4}",
        metrics.n_samples, metrics.validity, metrics.uniqueness, metrics.novelty
    );
    Ok(())
}

fn decode_series(
    out_dir: &Path,
    prefix: &str,
    ck: &Checkpoint,
    latents: &[Tensor],
    masks: MaskSet,
    seeds: &[u64],
) -> Result<Vec<MolecularGraph>> {
    let graphs: Vec<MolecularGraph> = latents
        .par_iter()
        .zip(seeds)
        .map(|(z, &s)| {
            sample_from_latent(
                &ck.params.dec,
                z,
                masks,
                &ck.hyper.table,
                &mut ChaCha8Rng::seed_from_u64(s),
            )
            .map(|r| r.0)
        })
        .collect::<nevae::Result<_>>()?;
    for (i, g) in graphs.iter().enumerate() {
        let name = format!("{prefix}_{i:03}");
        write_file(&out_dir.join(format!("{name}.dot")), g.to_dot(&name))?;
    }
    write_molecules(&out_dir.join(format!("{prefix}.jsonl")), &graphs)?;
    Ok(graphs)
}

fn graph_summary(g: &MolecularGraph, ck: &Checkpoint) -> Value {
    json!({
        "atoms": g.n(),
        "bonds": g.edge_count(),
        "valid": validate_molecule(g, &ck.hyper.table).satisfies(ValidityRule::Valence),
        "connected": g.is_connected(),
        "molecule": serde_json::from_str::<Value>(&g.to_json_line()).expect("graph serializes"),
    })
}

fn cmd_interpolate(args: &InterpolateArgs) -> Result<()> {
    if args.steps == 0 {
        return Err(input_error("--steps must be at least 1"));
    }
    let masks = mask_set(&args.mask)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let (ga, gb) = (pick(&corpus, args.a, "--a")?, pick(&corpus, args.b, "--b")?);
    if ga.n() != gb.n() {
        return Err(input_error(format!(
            "molecules {} and {} have {} and {} atoms; interpolation needs equal sizes",
            args.a,
            args.b,
            ga.n(),
            gb.n()
        )));
    }
    prepare_out_dir(&args.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (za, _) = sample_latent(&posterior(ga, &ck.params.enc)?, &mut rng);
    let (zb, _) = sample_latent(&posterior(gb, &ck.params.enc)?, &mut rng);
    let weights: Vec<f64> = (0..args.steps)
        .map(|k| {
            if args.steps == 1 {
                1.0
            } else {
                1.0 - k as f64 / (args.steps - 1) as f64
            }
        })
        .collect();
    let latents: Vec<Tensor> = weights
        .iter()
        .map(|&a| {
            let data = za
                .data()
                .iter()
                .zip(zb.data())
                .map(|(x, y)| a * x + (1.0 - a) * y)
                .collect();
            Tensor::new(za.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    let seeds: Vec<u64> = (0..args.steps).map(|_| rng.random()).collect();
    let graphs = decode_series(&args.out_dir, "interpolation", &ck, &latents, masks, &seeds)?;
    write_json(
        &args.out_dir.join("interpolation.json"),
        &json!({
            "metadata": metadata("interpolate", args.seed, json!({"steps": args.steps})),
            "a": args.a,
            "b": args.b,
            "steps": weights.iter().zip(&graphs).map(|(w, g)| json!({"weight_a": w, "graph": graph_summary(g, &ck)})).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "decoded {} interpolation steps into {}",
        graphs.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_perturb(args: &PerturbArgs) -> Result<()> {
    if args.amplitudes.is_empty() {
        return Err(input_error("--amplitudes must list at least one value"));
    }
    let masks = mask_set(&args.mask)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let g = pick(&corpus, args.molecule, "--molecule")?;
    if args.node >= g.n() {
        return Err(input_error(format!(
            "--node {} out of range for {} atoms",
            args.node,
            g.n()
        )));
    }
    prepare_out_dir(&args.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (z0, _) = sample_latent(&posterior(g, &ck.params.enc)?, &mut rng);
    let d = z0.cols();
    let latents: Vec<Tensor> = args
        .amplitudes
        .iter()
        .map(|&a| {
            let mut z = z0.clone();
            for v in &mut z.data_mut()[args.node * d..(args.node + 1) * d] {
                *v += a * *v;
            }
            z
        })
        .collect();
    // One decode seed for every amplitude, so outputs differ only through
    // the latent.
    let decode_seed: u64 = rng.random();
    let seeds = vec![decode_seed; latents.len()];
    let graphs = decode_series(&args.out_dir, "perturbation", &ck, &latents, masks, &seeds)?;
    write_json(
        &args.out_dir.join("perturbation.json"),
        &json!({
            "metadata": metadata("perturb", args.seed, json!({"amplitudes": args.amplitudes.len()})),
            "molecule": args.molecule,
            "node": args.node,
            "steps": args.amplitudes.iter().zip(&graphs).map(|(a, g)| json!({"amplitude": a, "graph": graph_summary(g, &ck)})).collect::<Vec<_>>(),
        }),
    )?;
    println!("decoded {} perturbations into {}", graphs.len(), args.out_dir.display());
    Ok(())
}

fn cmd_bo(args: &BoArgs) -> Result<()> {
    if !(args.test_fraction > 0.0 && args.test_fraction < 1.0) {
        return Err(input_error("--test-fraction must lie strictly between 0 and 1"));
    }
    if args.batch == 0 || args.inducing == 0 {
        return Err(input_error("--batch and --inducing must be positive"));
    }
    let masks = mask_set(&args.mask)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let table = ck.hyper.table;
    let oracle = ProxyProperty {
        lambda_n: ck.lambda_n,
        table,
    };
    let scorable: Vec<MolecularGraph> = corpus.into_iter().filter(|g| oracle.score(g).is_ok()).collect();
    if scorable.len() < 10 {
        return Err(input_error(format!(
            "need at least 10 valid molecules to split for optimization, found {}",
            scorable.len()
        )));
    }
    prepare_out_dir(&args.out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut order: Vec<usize> = (0..scorable.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((args.test_fraction * scorable.len() as f64).round() as usize).clamp(1, scorable.len() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let train: Vec<MolecularGraph> = train_idx.iter().map(|&i| scorable[i].clone()).collect();
    let test: Vec<MolecularGraph> = test_idx.iter().map(|&i| scorable[i].clone()).collect();

    let space = MoleculeSpace::new(&ck.params, &train, masks, table, &oracle)?;
    let y_train: Vec<f64> = train.iter().map(|g| oracle.score(g)).collect::<nevae::Result<_>>()?;
    let x_test: Vec<Vec<f64>> = test.iter().map(|g| space.embed(g)).collect::<nevae::Result<_>>()?;
    let y_test: Vec<f64> = test.iter().map(|g| oracle.score(g)).collect::<nevae::Result<_>>()?;
    let inducing = args.inducing.min(train.len());
    let model = sgp_fit(space.embeddings(), &y_train, inducing, rng.random())?;
    let (ll, rmse) = model.test_metrics(&x_test, &y_test)?;

    let config = BoConfig {
        iterations: args.iters,
        batch: args.batch,
        n_inducing: inducing,
        seed: rng.random(),
        ..BoConfig::default()
    };
    let outcome = bo_loop(&space, space.embeddings().to_vec(), y_train, &config)?;
    let report = summarize_molecules(&outcome.records, &table)?;

    let trace: Vec<Value> = outcome
        .records
        .iter()
        .map(|r| {
            json!({
                "iteration": r.iteration,
                "embedding": r.proposal,
                "expected_improvement": r.ei,
                "molecule": r.item.as_ref().map(|g| serde_json::from_str::<Value>(&g.to_json_line()).expect("graph serializes")),
                "score": r.score,
            })
        })
        .collect();
    write_json(
        &args.out_dir.join("bo_trace.json"),
        &json!({
            "metadata": metadata("bo", args.seed, json!({
                "molecules": scorable.len(),
                "train": train.len(),
                "test": test.len(),
                "inducing": inducing,
                "iterations": args.iters,
                "batch": args.batch,
            })),
            "oracle": oracle.name(),
            "records": trace,
        }),
    )?;
    let mut csv = String::from("rank,score,molecule\n");
    for (i, (g, s)) in report.ranked.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},\"{}\"\n",
            i + 1,
            s,
            g.to_json_line().replace('"', "\"\"")
        ));
    }
    write_file(&args.out_dir.join("sorted_scores.csv"), csv)?;
    write_json(
        &args.out_dir.join("bo_summary.json"),
        &json!({
            "metadata": metadata("bo", args.seed, json!({"train": train.len(), "test": test.len(), "inducing": inducing})),
            "test_log_likelihood": ll,
            "test_rmse": rmse,
            "proposed": report.n_proposed,
            "valid_fraction": report.valid_fraction,
            "unique_fraction": report.unique_fraction,
            "best_scores": report.ranked.iter().take(3).map(|r| r.1).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "held-out LL {ll:.3}, RMSE {rmse:.3}; {} proposals, valid fraction {:.2}, unique fraction {:.2}",
        report.n_proposed, report.valid_fraction, report.unique_fraction
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.count == 0 {
        return Err(input_error("--count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let graphs = match args.kind {
        CorpusKind::Molecules => nevae::synth::small_molecule_corpus(args.count, args.max_atoms, &mut rng),
        CorpusKind::TriangleFree => nevae::synth::triangle_free_corpus(args.count, 5, 30, &mut rng),
        CorpusKind::Kronecker => experiments::kronecker_corpus(args.count, &mut rng)?,
        CorpusKind::Ba => experiments::ba_corpus(args.count, &mut rng)?
            .into_iter()
            .map(|b| b.graph)
            .collect(),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out_dir(parent)?;
    }
    write_molecules(&args.out, &graphs)?;
    println!("wrote {} graphs to {}", graphs.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Synth(a) => experiments::cmd_synth(a),
        Command::Bo(a) => cmd_bo(a),
        Command::GenerateCorpus(a) => cmd_generate(a),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NEVAE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| input_error(format!("NEVAE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
