//! Synthetic-graph experiments: masked generation of triangle-free graphs,
//! ranking against generators with exact likelihoods, and sensitivity of
//! training to node relabeling.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use nevae::decoder::{graph_logprob, sample_graph, Partition, SampleOptions};
use nevae::encoder::posterior;
use nevae::masks::{MaskKind, MaskSet};
use nevae::molgraph::MolecularGraph;
use nevae::synth::{
    gen_ba, gen_kronecker, loglik_ba, loglik_kronecker, precision_top_bottom, rank_by_score, small_molecule_corpus,
    spearman, triangle_free_corpus, BaGraph, KroneckerSpec, KRONECKER_THETA_A,
};
use nevae::training::{bfs_edge_order, elbo, sample_source, train, train_with, Checkpoint, Hyperparams, ZetaKind};

use crate::{input_error, item_seeds, metadata, prepare_out_dir, write_file, write_json};

const KRONECKER_POWER: u32 = 4;
const BA_NODES: usize = 16;
const BA_EDGES_PER_ARRIVAL: usize = 2;

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    TriangleFree,
    Kronecker,
    Ba,
    PermDrift,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    experiment: Experiment,
    #[arg(long)]
    seed: u64,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Training graphs.
    #[arg(long = "corpus-size", default_value_t = 100)]
    corpus_size: usize,
    /// Generated or held-out graphs to evaluate.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Training iterations.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Top and bottom share used for ranking precision.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
}

pub fn kronecker_corpus<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<MolecularGraph>> {
    let spec = KroneckerSpec::new(KRONECKER_THETA_A, KRONECKER_POWER)?;
    Ok((0..count).map(|_| gen_kronecker(&spec, rng)).collect())
}

pub fn ba_corpus<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<Vec<BaGraph>> {
    (0..count)
        .map(|_| Ok(gen_ba(BA_NODES, BA_EDGES_PER_ARRIVAL, rng)?))
        .collect()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.corpus_size == 0 || args.samples < 2 || args.iters == 0 {
        return Err(input_error(
            "--corpus-size and --iters must be positive and --samples at least 2",
        ));
    }
    if !(args.fraction > 0.0 && args.fraction <= 0.5) {
        return Err(input_error("--fraction must lie in (0, 0.5]"));
    }
    prepare_out_dir(&args.out_dir)?;
    let (name, result) = match args.experiment {
        Experiment::TriangleFree => ("triangle_free", triangle_free(args)?),
        Experiment::Kronecker => ("kronecker", kronecker(args)?),
        Experiment::Ba => ("ba", ba(args)?),
        Experiment::PermDrift => ("perm_drift", perm_drift(args)?),
    };
    let scale = json!({
        "corpus_size": args.corpus_size,
        "samples": args.samples,
        "iterations": args.iters,
    });
    write_json(
        &args.out_dir.join(format!("synth_{name}.json")),
        &json!({
            "metadata": metadata(&format!("synth {name}"), args.seed, scale),
            "experiment": name,
            "result": result,
        }),
    )?;
    match args.experiment {
        Experiment::PermDrift => {
            for (zeta, curve) in result.as_object().expect("curves by source distribution") {
                let last = curve.as_array().and_then(|c| c.last()).cloned().unwrap_or(Value::Null);
                println!("{name} {zeta}: final {last}");
            }
        }
        _ => println!("{name}: {result}"),
    }
    Ok(())
}

fn synthetic_hyper(args: &SynthArgs, mask: MaskKind) -> Hyperparams {
    Hyperparams {
        iterations: args.iters,
        seed: args.seed,
        mask,
        ..Hyperparams::synthetic()
    }
}

fn prior_samples(
    ck: &Checkpoint,
    n: Option<usize>,
    masks: MaskSet,
    seeds: &[u64],
) -> Result<Vec<(MolecularGraph, f64)>> {
    let opts = SampleOptions {
        n,
        lambda_n: ck.lambda_n,
        masks,
        table: ck.hyper.table,
    };
    Ok(seeds
        .par_iter()
        .map(|&s| {
            sample_graph(&ck.params.dec, &mut ChaCha8Rng::seed_from_u64(s), &opts)
                .map(|(g, trace)| (g, trace.total_logprob()))
        })
        .collect::<nevae::Result<_>>()?)
}

fn triangle_free(args: &SynthArgs) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let corpus = triangle_free_corpus(args.corpus_size, 5, 30, &mut rng);
    let hyper = synthetic_hyper(args, MaskKind::TriangleFree);
    let ck = train(&corpus, &hyper)?.checkpoint;
    let seeds = item_seeds(rng.random(), args.samples);
    let fraction = |samples: &[(MolecularGraph, f64)]| {
        samples.iter().filter(|(g, _)| !g.has_triangle()).count() as f64 / samples.len() as f64
    };
    let masked = prior_samples(&ck, None, MaskKind::TriangleFree.into(), &seeds)?;
    let unmasked = prior_samples(&ck, None, MaskSet::default(), &seeds)?;
    let mean_edges = masked.iter().map(|(g, _)| g.edge_count() as f64).sum::<f64>() / masked.len() as f64;
    Ok(json!({
        "triangle_free_fraction_masked": fraction(&masked),
        "triangle_free_fraction_unmasked": fraction(&unmasked),
        "mean_edges_masked": mean_edges,
        "corpus_mean_edges": corpus.iter().map(|g| g.edge_count() as f64).sum::<f64>() / corpus.len() as f64,
    }))
}

/// Agreement of model rankings with the ground-truth ranking.
fn compare_rankings(truth: &[f64], models: &[(&str, &[f64])], fraction: f64) -> Result<Value> {
    let rank = |scores: &[f64]| rank_by_score(&scores.iter().copied().enumerate().collect::<Vec<_>>());
    let tp = rank(truth);
    let mut out = serde_json::Map::new();
    for (name, scores) in models {
        let tx = rank(scores);
        let rho = spearman(&tp, &tx)?;
        let (top, bottom) = precision_top_bottom(&tp, &tx, fraction)?;
        out.insert(
            name.to_string(),
            json!({"spearman": rho, "precision_top": top, "precision_bottom": bottom}),
        );
    }
    Ok(Value::Object(out))
}

fn elbo_scores(graphs: &[MolecularGraph], ck: &Checkpoint, seed: u64) -> Result<Vec<f64>> {
    let seeds = item_seeds(seed, graphs.len());
    Ok(graphs
        .par_iter()
        .zip(&seeds)
        .map(|(g, &s)| elbo(g, &ck.params, &ck.hyper, ck.lambda_n, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect::<nevae::Result<_>>()?)
}

fn kronecker(args: &SynthArgs) -> Result<Value> {
    let spec = KroneckerSpec::new(KRONECKER_THETA_A, KRONECKER_POWER)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let corpus = kronecker_corpus(args.corpus_size, &mut rng)?;
    let ck = train(&corpus, &synthetic_hyper(args, MaskKind::None))?.checkpoint;
    let seeds = item_seeds(rng.random(), args.samples);
    let samples = prior_samples(&ck, Some(spec.n()), MaskSet::default(), &seeds)?;
    let graphs: Vec<MolecularGraph> = samples.iter().map(|(g, _)| g.clone()).collect();
    let truth: Vec<f64> = graphs
        .iter()
        .map(|g| loglik_kronecker(g, &spec))
        .collect::<nevae::Result<_>>()?;
    let logprob: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let elbos = elbo_scores(&graphs, &ck, rng.random())?;
    compare_rankings(
        &truth,
        &[("decoder_logprob", logprob.as_slice()), ("elbo", elbos.as_slice())],
        args.fraction,
    )
}

fn ba(args: &SynthArgs) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let corpus: Vec<MolecularGraph> = ba_corpus(args.corpus_size, &mut rng)?
        .into_iter()
        .map(|b| b.graph)
        .collect();
    let ck = train(&corpus, &synthetic_hyper(args, MaskKind::None))?.checkpoint;
    let held_out = ba_corpus(args.samples, &mut rng)?;
    let truth: Vec<f64> = held_out.iter().map(loglik_ba).collect::<nevae::Result<_>>()?;
    let graphs: Vec<MolecularGraph> = held_out.into_iter().map(|b| b.graph).collect();
    let seeds = item_seeds(rng.random(), graphs.len());
    let logprob: Vec<f64> = graphs
        .par_iter()
        .zip(&seeds)
        .map(|(g, &s)| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let post = posterior(g, &ck.params.enc)?;
            let source = sample_source(g, ck.hyper.zeta, &mut r);
            let order = bfs_edge_order(g, source, ck.hyper.zeta, &mut r);
            graph_logprob(
                g,
                &post.mu,
                &order,
                &ck.params.dec,
                Partition::Exact,
                MaskSet::default(),
                &ck.hyper.table,
                &mut r,
            )
        })
        .collect::<nevae::Result<_>>()?;
    let elbos = elbo_scores(&graphs, &ck, rng.random())?;
    compare_rankings(
        &truth,
        &[("decoder_logprob", logprob.as_slice()), ("elbo", elbos.as_slice())],
        args.fraction,
    )
}

fn flatten(params: &nevae::training::ModelParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn perm_drift(args: &SynthArgs) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let corpus = small_molecule_corpus(args.corpus_size, 12, &mut rng);
    let relabeled: Vec<MolecularGraph> = corpus
        .iter()
        .map(|g| {
            let mut perm: Vec<usize> = (0..g.n()).collect();
            perm.shuffle(&mut rng);
            g.relabel(&perm)
        })
        .collect();
    let stride = (args.iters / 20).max(1);
    let mut csv = String::from("zeta,iteration,distance,relative_distance\n");
    let mut curves = serde_json::Map::new();
    for zeta in ZetaKind::ALL {
        let hyper = Hyperparams {
            iterations: args.iters,
            seed: args.seed,
            zeta,
            ..Hyperparams::molecules()
        };
        let mut snapshots = Vec::new();
        train_with(&corpus, &hyper, |row, params| {
            if (row.iteration + 1) % stride == 0 {
                snapshots.push(flatten(params));
            }
        })?;
        let mut curve = Vec::new();
        let mut k = 0;
        train_with(&relabeled, &hyper, |row, params| {
            if (row.iteration + 1) % stride == 0 {
                let a = &snapshots[k];
                let b = flatten(params);
                let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                curve.push((row.iteration + 1, dist, dist / norm));
                k += 1;
            }
        })?;
        for (it, d, rel) in &curve {
            csv.push_str(&format!("{zeta},{it},{d},{rel}\n"));
        }
        curves.insert(
            zeta.to_string(),
            curve
                .iter()
                .map(|(it, d, rel)| json!({"iteration": it, "distance": d, "relative_distance": rel}))
                .collect(),
        );
    }
    write_file(&args.out_dir.join("perm_drift.csv"), csv)?;
    Ok(Value::Object(curves))
}
