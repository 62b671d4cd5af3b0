//! `reco` — generate synthetic encoder worlds, build retrieval indexes,
//! train the fusion module, and run the evaluation studies.
//!
//! Every command is reproducible: identical inputs and seed produce
//! byte-identical artifacts, and each run writes a JSON summary embedding
//! its fully resolved configuration.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 verification
//! failure, 4 training divergence.

mod runcfg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use reco_core::bank;
use reco_core::checkpoint;
use reco_core::error::{Error, Result};
use reco_core::eval::{
    self, dump_neighbors, mode_report, retrieval_eval, zero_shot_classify, InferenceMode, Refiner,
};
use reco_core::fusion::FusionConfig;
use reco_core::gradcheck::{check_pipeline_gradients, PipelineCheck};
use reco_core::ivf;
use reco_core::memory::Modality;
use reco_core::retrieval::{knn_exact, RetrievalConfig};
use reco_core::training::{self, train_fusion, RetrievalBackend, TrainConfig};
use reco_core::world::{self, generate_world, world_report, WorldSpec};

use runcfg::RunConfig;

#[derive(Parser)]
#[command(name = "reco", version, about = "retrieval-enhanced embedding refinement engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world archive (memory bank + splits + manifest).
    GenWorld(GenWorldArgs),
    /// Build an inverted-file index over one side of a bank.
    BuildIndex(BuildIndexArgs),
    /// Train the fusion module on a world.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a world's classification and retrieval tasks.
    Eval(EvalArgs),
    /// Run one of the ablation studies.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenWorldArgs {
    /// Output directory for the world archive.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file with flat namespaced keys (world.*).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
    #[arg(long)]
    held_out_fine: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    /// Remove memory entries too close to eval queries (cosine threshold).
    #[arg(long, default_value_t = 0.995)]
    dedupe_threshold: f64,
    /// Which side the near-duplicate filter compares: image, text or both.
    #[arg(long, default_value = "image")]
    dedupe_side: String,
    /// Skip near-duplicate removal entirely.
    #[arg(long, default_value_t = false)]
    no_dedupe: bool,
}

#[derive(Args)]
struct BuildIndexArgs {
    /// Path to a RECO-bank file.
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    modality: String,
    #[arg(long)]
    partitions: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Queries sampled for the recall report against the exact oracle.
    #[arg(long, default_value_t = 100)]
    report_queries: usize,
    /// Partitions probed in the recall report.
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// World archive directory.
    #[arg(long)]
    world: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSONL path (defaults to <out>.metrics.jsonl).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// both | image_only | text_only
    #[arg(long)]
    branch_mode: Option<String>,
    /// exact | approx
    #[arg(long, default_value = "exact")]
    retrieval: String,
    /// Partitions for the approximate retrieval path.
    #[arg(long, default_value_t = 64)]
    partitions: usize,
    /// Probes for the approximate retrieval path.
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// none | image | text | both
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 10)]
    k_prime: usize,
    /// CSV output path (defaults to stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
    /// recall@R for the retrieval task.
    #[arg(long, default_value_t = 1)]
    recall_at: usize,
    /// Also write a qualitative neighbour dump (JSON lines) to this path.
    #[arg(long)]
    dump_neighbors: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// table3 | ksweep | memupdate
    #[arg(long)]
    which: String,
    #[arg(long)]
    world: PathBuf,
    /// Output directory for CSVs and the JSON summary.
    #[arg(long)]
    out: PathBuf,
    /// Training seeds contributing to the reported means.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Study training budget in epochs.
    #[arg(long)]
    budget_epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// k values trained in the ksweep study.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    k_values: Vec<usize>,
    /// k' values evaluated in the ksweep study (0 = baseline).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,10,20")]
    k_prime_values: Vec<usize>,
    /// Memory fractions for the memupdate study.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1.0")]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenWorld(args) => cmd_gen_world(args),
        Command::BuildIndex(args) => cmd_build_index(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Diverged(_) => 4,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn write_summary(path: &Path, summary: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(summary)?)?;
    Ok(())
}

fn cmd_gen_world(args: GenWorldArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.set_if("seed", args.seed);
    cfg.set_if("world.n_coarse", args.n_coarse.map(|v| v as u64));
    cfg.set_if("world.n_fine", args.n_fine.map(|v| v as u64));
    cfg.set_if("world.held_out_fine_per_coarse", args.held_out_fine.map(|v| v as u64));
    cfg.set_if("world.dim", args.dim.map(|v| v as u64));
    cfg.set_if("world.memory_size", args.memory_size.map(|v| v as u64));
    cfg.set_if("world.train_size", args.train_size.map(|v| v as u64));
    cfg.set_if("world.eval_size", args.eval_size.map(|v| v as u64));
    let seed = cfg.resolve_seed()?;
    cfg.set("seed", json!(seed));
    cfg.set("world.seed", json!(seed));
    if !args.no_dedupe {
        cfg.set("dedupe.threshold", json!(args.dedupe_threshold));
        cfg.set("dedupe.side", json!(args.dedupe_side.clone()));
    }

    let spec: WorldSpec = cfg.apply_prefix("world", &WorldSpec { seed, ..WorldSpec::default() })?;
    let mut world = generate_world(&spec)?;

    if !args.no_dedupe {
        let sides: Vec<Modality> = match args.dedupe_side.as_str() {
            "image" => vec![Modality::Image],
            "text" => vec![Modality::Text],
            "both" => vec![Modality::Image, Modality::Text],
            other => {
                return Err(Error::InvalidConfig(format!("unknown dedupe side '{other}'")));
            }
        };
        for side in sides {
            let probes = match side {
                Modality::Image => &world.task.queries,
                Modality::Text => &world.eval_t,
            };
            world.memory = world.memory.dedupe_against(probes, side, args.dedupe_threshold)?;
        }
    }

    world::save_world(&world, &args.out)?;
    if !args.no_dedupe {
        // record the threshold in the bank manifest
        let bank_path = args.out.join("memory.bank");
        let mut manifest = bank::load_manifest(&bank_path)?;
        manifest.dedupe_threshold = Some(args.dedupe_threshold);
        manifest.count = world.memory.len();
        bank::save_bank(&world.memory, &bank_path, &manifest)?;
    }
    let report = world_report(&world)?;
    let summary = json!({
        "config": cfg.as_value(),
        "world": {
            "classes": spec.n_classes(),
            "eval_classes": spec.eval_classes().len(),
            "memory_entries": world.memory.len(),
            "report": report,
        },
    });
    write_summary(&args.out.join("summary.json"), &summary)?;
    println!("{}", cfg.echo());
    println!(
        "world written to {} ({} memory entries, image hit rate {:.3})",
        args.out.display(),
        world.memory.len(),
        report.image_hit_rate
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_build_index(args: BuildIndexArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.set_if("seed", args.seed);
    let seed = cfg.resolve_seed()?;
    cfg.set("seed", json!(seed));
    cfg.set("index.partitions", json!(args.partitions as u64));
    cfg.set("index.modality", json!(args.modality.clone()));

    let modality = Modality::from_str(&args.modality)?;
    let store = bank::load_bank(&args.bank)?;
    let index = ivf::build_index(&store, modality, args.partitions, seed)?;
    ivf::save_index(&index, &args.out)?;

    // recall report against the exact oracle
    let n_queries = args.report_queries.min(store.len());
    let rcfg = RetrievalConfig::uni_cross(10.min(store.len()));
    let mut rng = reco_core::rng::Rng::substream(seed, 0x7270); // "rp"
    let mut total = 0.0;
    for _ in 0..n_queries {
        let row = rng.below(store.len());
        let q = store.matrix(modality).row(row).to_vec();
        let exact = knn_exact(&q, &store, &rcfg, modality)?;
        let approx = ivf::knn_approx(&q, &index, &store, &rcfg, args.probes, modality)?;
        total += ivf::recall_against(&exact, &approx);
    }
    let recall = if n_queries == 0 { 1.0 } else { total / n_queries as f64 };

    let summary = json!({
        "config": cfg.as_value(),
        "index": {
            "partitions": index.n_partitions(),
            "entries": index.entry_count(),
            "probes": args.probes,
            "recall_at_10_vs_exact": recall,
            "report_queries": n_queries,
        },
    });
    let mut summary_path = args.out.clone().into_os_string();
    summary_path.push(".summary.json");
    write_summary(Path::new(&summary_path), &summary)?;
    println!("{}", cfg.echo());
    println!(
        "index written to {} ({} partitions); recall@10 vs exact at {} probes: {:.4}",
        args.out.display(),
        index.n_partitions(),
        args.probes,
        recall
    );
    Ok(ExitCode::SUCCESS)
}

fn resolve_train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let defaults = TrainConfig { seed: cfg.resolve_seed()?, ..TrainConfig::default() };
    let mut out: TrainConfig = cfg.apply_prefix("train", &defaults)?;
    if let Some(k) = cfg.get_u64("retrieval.k")? {
        out.k = k as usize;
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.set_if("seed", args.seed);
    let seed = cfg.resolve_seed()?;
    cfg.set("seed", json!(seed));
    cfg.set("train.seed", json!(seed));
    cfg.set_if("train.epochs", args.epochs.map(|v| v as u64));
    cfg.set_if("train.batch_size", args.batch_size.map(|v| v as u64));
    cfg.set_if("train.base_lr", args.lr);
    cfg.set_if("train.weight_decay", args.weight_decay);
    cfg.set_if("train.warmup_frac", args.warmup_frac);
    cfg.set_if("retrieval.k", args.k.map(|v| v as u64));
    cfg.set_if("train.branch_mode", args.branch_mode.as_deref().map(branch_mode_json));
    cfg.set("retrieval.path", json!(args.retrieval.clone()));

    let world = world::load_world(&args.world)?;
    let train_cfg = resolve_train_config(&cfg)?;
    let fusion_cfg =
        cfg.apply_prefix("fusion", &FusionConfig { dim: world.spec.dim, ..FusionConfig::default() })?;

    let outcome = match args.retrieval.as_str() {
        "exact" => train_fusion(
            &world.train,
            &RetrievalBackend::Exact(&world.memory),
            &train_cfg,
            fusion_cfg,
        )?,
        "approx" => {
            let image_index = ivf::build_index(&world.memory, Modality::Image, args.partitions, seed)?;
            let text_index = ivf::build_index(&world.memory, Modality::Text, args.partitions, seed)?;
            train_fusion(
                &world.train,
                &RetrievalBackend::Approx {
                    store: &world.memory,
                    image_index: &image_index,
                    text_index: &text_index,
                    n_probe: args.probes,
                },
                &train_cfg,
                fusion_cfg,
            )?
        }
        other => return Err(Error::InvalidConfig(format!("unknown retrieval path '{other}'"))),
    };

    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    training::write_metrics_jsonl(&metrics_path, &outcome.metrics)?;

    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert("branch_mode".to_string(), format!("{:?}", train_cfg.branch_mode));
    meta.insert("config".to_string(), serde_json::to_string(&cfg.as_value())?);
    checkpoint::save_checkpoint(&outcome.params, &outcome.temperature, &meta, &args.out)?;

    println!("{}", cfg.echo());
    let (first, last) = (
        outcome.metrics.first().map(|m| m.loss).unwrap_or(f64::NAN),
        outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
    );
    println!(
        "checkpoint written to {} ({} steps, loss {:.2} -> {:.2}); metrics at {}",
        args.out.display(),
        outcome.metrics.len(),
        first,
        last,
        metrics_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn branch_mode_json(s: &str) -> serde_json::Value {
    match s {
        "both" => json!("Both"),
        "image_only" | "image" => json!("ImageOnly"),
        "text_only" | "text" => json!("TextOnly"),
        other => json!(other),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let seed = cfg.resolve_seed()?;
    cfg.set("seed", json!(seed));
    cfg.set("eval.mode", json!(args.mode.clone()));
    cfg.set("eval.k_prime", json!(args.k_prime as u64));
    cfg.set("eval.recall_at", json!(args.recall_at as u64));

    let world = world::load_world(&args.world)?;
    let (params, _temperature, _meta) = checkpoint::load_checkpoint(&args.ckpt)?;
    let mode = InferenceMode::from_str(&args.mode)?;
    let refiner = Refiner::standard(&params, &world.memory, args.k_prime.max(1));
    let refiner_opt = (mode != InferenceMode::None).then_some(&refiner);

    let top1 = zero_shot_classify(&world.task, mode, refiner_opt)?;
    let recall = retrieval_eval(&world.eval_v, &world.eval_t, mode, refiner_opt, args.recall_at)?;
    let modes = mode_report(&world.task, &refiner)?;

    let mut csv = String::from("metric,mode,k_prime,value\n");
    csv.push_str(&format!("top1,{},{},{:.6}\n", args.mode, args.k_prime, top1));
    csv.push_str(&format!("recall_t2i@{},{},{},{:.6}\n", args.recall_at, args.mode, args.k_prime, recall.t2i));
    csv.push_str(&format!("recall_i2t@{},{},{},{:.6}\n", args.recall_at, args.mode, args.k_prime, recall.i2t));
    if let Some(out) = &args.out {
        std::fs::write(out, &csv)?;
        let mut sp = out.clone().into_os_string();
        sp.push(".summary.json");
        let summary = json!({
            "config": cfg.as_value(),
            "results": {
                "top1": top1,
                "recall_t2i": recall.t2i,
                "recall_i2t": recall.i2t,
                "mode_report": modes,
            },
        });
        write_summary(Path::new(&sp), &summary)?;
    }
    if let Some(path) = &args.dump_neighbors {
        let summary = dump_neighbors(
            &world.task.queries,
            &world.ground_truth.eval_labels,
            Modality::Image,
            &world.memory,
            args.k_prime.max(1),
            path,
        )?;
        println!(
            "neighbour dump: uni match rate {:.3}, cross match rate {:.3}",
            summary.uni_label_match_rate, summary.cross_label_match_rate
        );
    }
    println!("{}", cfg.echo());
    print!("{csv}");
    println!(
        "best mode by validation: {} (none {:.4} image {:.4} text {:.4} both {:.4})",
        modes.best_mode, modes.accuracy_none, modes.accuracy_image, modes.accuracy_text, modes.accuracy_both
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let seed = cfg.resolve_seed()?;
    cfg.set("seed", json!(seed));
    cfg.set("ablate.which", json!(args.which.clone()));
    cfg.set("ablate.seeds", json!(args.seeds));
    if let Some(e) = args.budget_epochs {
        cfg.set("train.epochs", json!(e as u64));
    }

    let world = world::load_world(&args.world)?;
    std::fs::create_dir_all(&args.out)?;
    let budget = resolve_train_config(&cfg)?;
    let fusion_cfg =
        cfg.apply_prefix("fusion", &FusionConfig { dim: world.spec.dim, ..FusionConfig::default() })?;

    match args.which.as_str() {
        "table3" => {
            let mut grids = Vec::new();
            for s in 0..args.seeds {
                let b = TrainConfig { seed: seed + s, ..budget };
                let grid = eval::run_search_fusion_grid(&world, &b, fusion_cfg)?;
                std::fs::write(args.out.join(format!("table3_seed{s}.csv")), grid.to_csv())?;
                grids.push(grid);
            }
            // mean grid across seeds
            let mut mean = grids[0].clone();
            for cell in 0..mean.cells.len() {
                let avg = grids.iter().map(|g| g.cells[cell].accuracy).sum::<f64>() / grids.len() as f64;
                mean.cells[cell].accuracy = avg;
                mean.cells[cell].delta = avg - mean.baseline;
            }
            std::fs::write(args.out.join("table3_mean.csv"), mean.to_csv())?;
            let summary = json!({
                "config": cfg.as_value(),
                "seeds": args.seeds,
                "cells": mean.cells,
                "baseline": mean.baseline,
            });
            write_summary(&args.out.join("table3_summary.json"), &summary)?;
            println!("{}", cfg.echo());
            print!("{}", mean.to_csv());
        }
        "ksweep" => {
            let sweep = eval::run_k_sweep(&world, &budget, &args.k_values, &args.k_prime_values)?;
            std::fs::write(args.out.join("ksweep.csv"), sweep.to_csv())?;
            let summary = json!({
                "config": cfg.as_value(),
                "seeds": 1,
                "cells": sweep,
            });
            write_summary(&args.out.join("ksweep_summary.json"), &summary)?;
            println!("{}", cfg.echo());
            print!("{}", sweep.to_csv());
        }
        "memupdate" => {
            let mut studies = Vec::new();
            for s in 0..args.seeds {
                let b = TrainConfig { seed: seed + s, ..budget };
                let study = eval::run_memory_update(&world, &b, &args.fractions)?;
                std::fs::write(args.out.join(format!("memupdate_seed{s}.csv")), study.to_csv())?;
                studies.push(study);
            }
            let mut mean = studies[0].clone();
            for row in 0..mean.rows.len() {
                mean.rows[row].subset_accuracy =
                    studies.iter().map(|t| t.rows[row].subset_accuracy).sum::<f64>() / studies.len() as f64;
                mean.rows[row].full_accuracy =
                    studies.iter().map(|t| t.rows[row].full_accuracy).sum::<f64>() / studies.len() as f64;
            }
            std::fs::write(args.out.join("memupdate_mean.csv"), mean.to_csv())?;
            let summary = json!({
                "config": cfg.as_value(),
                "seeds": args.seeds,
                "cells": mean,
            });
            write_summary(&args.out.join("memupdate_summary.json"), &summary)?;
            println!("{}", cfg.echo());
            print!("{}", mean.to_csv());
        }
        other => return Err(Error::InvalidConfig(format!("unknown study '{other}'"))),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let cfg = PipelineCheck {
        seeds: args.seeds,
        batch: args.batch,
        dim: args.dim,
        k: args.k,
        heads: args.heads,
        step: args.step,
    };
    let started = std::time::Instant::now();
    let err = check_pipeline_gradients(&cfg)?;
    println!(
        "max relative gradient error over {} seeds (batch {}, dim {}, k {}): {:.3e} ({:.1}s)",
        args.seeds,
        args.batch,
        args.dim,
        args.k,
        err,
        started.elapsed().as_secs_f64()
    );
    if err < args.tolerance {
        println!("PASS (tolerance {:.1e})", args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (tolerance {:.1e})", args.tolerance);
        Ok(ExitCode::from(3))
    }
}
