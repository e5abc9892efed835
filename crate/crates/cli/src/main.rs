use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use simgraph::ablation::{default_k_values, run_ablation, run_sweep, AblationVariant, SweepAxis, DEFAULT_R_VALUES};
use simgraph::attribution::{compute_sensitivities, export_saliency, rank_nodes, NodeRef, RankKey};
use simgraph::avsf::{load_manifest_pyramids, read_pyramid_file, write_manifest, write_pyramid_file, ManifestEntry};
use simgraph::eval::evaluate;
use simgraph::inference::top_k_indices;
use simgraph::model::{prepare_all, Model, PairScorer, PreparedSample, Scoring};
use simgraph::synth::{split_by_class, synthesize_dataset};
use simgraph::training::{train, Checkpoint, TrainOptions};
use simgraph::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "simgraph", version, about = "Hierarchical similarity graphs between feature pyramids")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated Recall@K cutoffs.
    #[arg(long, global = true, default_value = "1,2,4,8")]
    k_list: String,
    /// Rows per similarity-matrix slice.
    #[arg(long, global = true, default_value_t = 64)]
    slice_rows: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as AVSF files with manifests.
    Synth,
    /// Train on a manifest (or on the synthetic training split) and write a checkpoint.
    Train {
        /// Manifest of training samples; defaults to the synthetic training classes.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Recall@K of a checkpoint on a manifest (or the synthetic test classes).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// top_level | multi_layer | multi_layer_reliability | concat | full_avsl
        #[arg(long, default_value = "full_avsl")]
        scoring: String,
    },
    /// Print the overall dissimilarity of two AVSF files.
    Infer {
        a: PathBuf,
        b: PathBuf,
        /// Without a checkpoint, an untrained model from the config seed is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write an attribution report and saliency maps for two AVSF files.
    Attribute {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// reliability | node_value | contribution | reliable_then_value
        #[arg(long, default_value = "reliable_then_value")]
        key: String,
        #[arg(long, default_value_t = 16)]
        top_n: usize,
    },
    /// Summarize the edge store of a checkpoint.
    Edges {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Ablation table over variants and seeds on the synthetic benchmark.
    Ablate {
        /// Comma-separated variant names; all by default.
        #[arg(long)]
        variants: Option<String>,
        /// Comma-separated seeds; defaults to three seeds from `--seed`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Sweep `k` or `r` on the synthetic benchmark.
    Sweep {
        #[arg(long, default_value = "k")]
        axis: String,
        /// Comma-separated values; powers of two up to r for k, 32,64,128 for r.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
    },
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::config(format!("{what}: cannot parse {x:?}")))
        })
        .collect()
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn seeds_or_default(seeds: &Option<String>, cfg: &Config) -> Result<Vec<u64>> {
    match seeds {
        Some(s) => parse_list("seeds", s),
        None => Ok((0..3).map(|i| cfg.seed + i).collect()),
    }
}

fn scoring_by_name(name: &str) -> Result<Scoring> {
    match name {
        "top_level" => Ok(Scoring::TopLevel),
        other => other.parse::<AblationVariant>().map(|v| v.scoring()),
    }
}

fn load_model(checkpoint: &Option<PathBuf>, cfg: &Config, sample: &PreparedSample) -> Result<Model> {
    match checkpoint {
        Some(p) => Ok(Checkpoint::load(p)?.model),
        None => Model::init(&sample.channels(), cfg.r, cfg.k, cfg.gamma, cfg.seed),
    }
}

fn pair_samples(a: &Path, b: &Path) -> Result<(PreparedSample, PreparedSample)> {
    Ok((
        PreparedSample::new(&read_pyramid_file(a)?),
        PreparedSample::new(&read_pyramid_file(b)?),
    ))
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let data = synthesize_dataset(&cfg.synth, cfg.seed)?;
    let mut entries = Vec::with_capacity(data.len());
    for p in &data {
        let path = dir.join(format!("{}.avsf", p.sample_id));
        write_pyramid_file(&path, p)?;
        entries.push(ManifestEntry {
            sample_id: p.sample_id.clone(),
            path,
            label: p.label,
        });
    }
    let cut = (cfg.synth.classes / 2) as u32;
    let (train_e, test_e): (Vec<_>, Vec<_>) = entries.iter().cloned().partition(|e| e.label < cut);
    write_manifest(&dir.join("manifest.csv"), &entries)?;
    write_manifest(&dir.join("train.csv"), &train_e)?;
    write_manifest(&dir.join("test.csv"), &test_e)?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        entries.len(),
        train_e.len(),
        test_e.len(),
        dir.display()
    );
    Ok(())
}

fn split_samples(cfg: &Config, manifest: &Option<PathBuf>, take_train: bool) -> Result<Vec<PreparedSample>> {
    match manifest {
        Some(m) => Ok(prepare_all(&load_manifest_pyramids(m)?)),
        None => {
            let (train, test) = split_by_class(synthesize_dataset(&cfg.synth, cfg.seed)?, cfg.synth.classes);
            Ok(prepare_all(if take_train { &train } else { &test }))
        }
    }
}

fn cmd_train(common: &Common, manifest: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let samples = split_samples(&cfg, manifest, true)?;
    let start = Instant::now();
    let (state, metrics) = train(&cfg, &samples, TrainOptions::default())?;
    let mut log = String::from("step,overall_loss");
    for l in 1..=cfg.levels {
        log.push_str(&format!(",level{l}_loss"));
    }
    log.push('\n');
    for m in &metrics {
        log.push_str(&format!("{},{}", m.step, m.overall_loss));
        for v in &m.level_losses {
            log.push_str(&format!(",{v}"));
        }
        log.push('\n');
    }
    write_text(&dir.join("metrics.csv"), &log)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let ck = dir.join("checkpoint.bin");
    fs::write(&ck, state.checkpoint()?).map_err(|e| Error::io(&ck, e))?;
    println!(
        "trained {} steps in {:.1}s; checkpoint {}",
        state.step,
        start.elapsed().as_secs_f64(),
        ck.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, manifest: &Option<PathBuf>, scoring: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let ks: Vec<usize> = parse_list("k-list", &common.k_list)?;
    let scoring = scoring_by_name(scoring)?;
    let model = Checkpoint::load(checkpoint)?.model;
    let samples = split_samples(&cfg, manifest, false)?;
    let r = evaluate(&model, &samples, scoring, &ks, common.slice_rows)?;
    print!("{}", r.to_table());
    println!("{}", r.to_json());
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("recall.json"), &(r.to_json() + "\n"))?;
    }
    Ok(())
}

fn cmd_infer(common: &Common, a: &Path, b: &Path, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let (sa, sb) = pair_samples(a, b)?;
    let model = load_model(checkpoint, &cfg, &sa)?;
    let scorer = PairScorer::new(&model, Scoring::Rectified)?;
    let d = scorer.score(&model.encode(&sa, false)?, &model.encode(&sb, false)?);
    println!("{d:?}");
    Ok(())
}

fn cmd_attribute(
    common: &Common,
    a: &Path,
    b: &Path,
    checkpoint: &Option<PathBuf>,
    key: &str,
    top_n: usize,
) -> Result<()> {
    let cfg = load_config(common)?;
    let key: RankKey = key.parse()?;
    let dir = out_dir(common)?;
    let (sa, sb) = pair_samples(a, b)?;
    let model = load_model(checkpoint, &cfg, &sa)?;
    let (ea, eb) = (model.encode(&sa, false)?, model.encode(&sb, false)?);
    let graph = model.pair_graph(&ea, &eb);
    let rect = graph.rectify(&model.normalized_edges()?)?;
    let sens = compute_sensitivities(&graph.reliabilities, &model.edges, &model.params)?;
    let pair = [sa.sample_id.clone(), sb.sample_id.clone()];
    let mut report = rank_nodes(pair.clone(), &graph, &sens, rect.overall, key, top_n)?;
    let nodes: Vec<NodeRef> = report
        .nodes
        .iter()
        .map(|n| NodeRef {
            level: n.level,
            index: n.index,
        })
        .collect();
    let (ca, cb) = (model.cams(&sa)?, model.cams(&sb)?);
    let files = export_saliency(&pair, [&ca, &cb], &nodes, &dir.join("saliency"))?;
    for (rec, paths) in report.nodes.iter_mut().zip(files) {
        rec.cam_files = paths
            .iter()
            .map(|p| p.strip_prefix(&dir).unwrap_or(p).display().to_string())
            .collect();
    }
    let path = dir.join("attribution.json");
    report.write(&path)?;
    println!(
        "d = {:?}; {} nodes, sensitivities sum to {}; report {}",
        rect.overall,
        report.nodes.len(),
        sens.total(),
        path.display()
    );
    Ok(())
}

fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64) as usize
        } else {
            0
        };
        counts[b.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

fn cmd_edges(checkpoint: &Path, top: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = &ck.model.edges;
    println!(
        "levels {}  r {}  gamma {}  updates {}  k {}",
        store.levels(),
        store.r(),
        store.gamma(),
        store.update_count(),
        ck.model.params.k()
    );
    for l in 2..=store.levels() {
        let w = store.matrix(l);
        let vals: Vec<f64> = w.iter().copied().collect();
        let (lo, hi, counts) = histogram(&vals, 10);
        println!("level {l} -> {}: min {lo:.4}  max {hi:.4}", l - 1);
        println!("  histogram {counts:?}");
        let mut order: Vec<(usize, usize)> = (0..w.nrows())
            .flat_map(|i| (0..w.ncols()).map(move |j| (i, j)))
            .collect();
        order.sort_by(|a, b| w[[b.0, b.1]].total_cmp(&w[[a.0, a.1]]).then(a.cmp(b)));
        for &(i, j) in order.iter().take(top) {
            println!("  node {i:>3} ~ node {j:>3}: {:.4}", w[[i, j]]);
        }
        let sel = top_k_indices(w.row(0), ck.model.params.k());
        println!("  top-k of node 0: {sel:?}");
        let (a, b) = (ck.model.params.alpha(l), ck.model.params.beta(l));
        println!(
            "  gates: alpha mean {:.4} [{:.4}, {:.4}]  beta mean {:.4} [{:.4}, {:.4}]",
            a.mean().unwrap_or(0.0),
            a.fold(f64::INFINITY, |m, &x| m.min(x)),
            a.fold(f64::NEG_INFINITY, |m, &x| m.max(x)),
            b.mean().unwrap_or(0.0),
            b.fold(f64::INFINITY, |m, &x| m.min(x)),
            b.fold(f64::NEG_INFINITY, |m, &x| m.max(x)),
        );
    }
    Ok(())
}

fn cmd_ablate(common: &Common, variants: &Option<String>, seeds: &Option<String>) -> Result<()> {
    let cfg = load_config(common)?;
    let ks: Vec<usize> = parse_list("k-list", &common.k_list)?;
    let variants: Vec<AblationVariant> = match variants {
        Some(v) => parse_list("variants", v)?,
        None => AblationVariant::ALL.to_vec(),
    };
    let seeds = seeds_or_default(seeds, &cfg)?;
    let table = run_ablation(&cfg, &variants, &seeds, &ks, common.slice_rows)?;
    let csv = table.to_csv();
    print!("{csv}");
    write_text(&out_dir(common)?.join("ablation.csv"), &csv)
}

fn cmd_sweep(common: &Common, axis: &str, values: &Option<String>, seeds: &Option<String>) -> Result<()> {
    let cfg = load_config(common)?;
    let ks: Vec<usize> = parse_list("k-list", &common.k_list)?;
    let axis: SweepAxis = axis.parse()?;
    let values = match (values, axis) {
        (Some(v), _) => parse_list("values", v)?,
        (None, SweepAxis::K) => default_k_values(cfg.r),
        (None, SweepAxis::R) => DEFAULT_R_VALUES.to_vec(),
    };
    let seeds = seeds_or_default(seeds, &cfg)?;
    let table = run_sweep(&cfg, axis, &values, &seeds, &ks, common.slice_rows)?;
    let csv = table.to_csv();
    print!("{csv}");
    let name = match axis {
        SweepAxis::K => "sweep_k.csv",
        SweepAxis::R => "sweep_r.csv",
    };
    write_text(&out_dir(common)?.join(name), &csv)
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    if c.slice_rows == 0 {
        return Err(Error::config("--slice-rows must be at least 1"));
    }
    match &cli.command {
        Command::Synth => cmd_synth(c),
        Command::Train { manifest } => cmd_train(c, manifest),
        Command::Eval {
            checkpoint,
            manifest,
            scoring,
        } => cmd_eval(c, checkpoint, manifest, scoring),
        Command::Infer { a, b, checkpoint } => cmd_infer(c, a, b, checkpoint),
        Command::Attribute {
            a,
            b,
            checkpoint,
            key,
            top_n,
        } => cmd_attribute(c, a, b, checkpoint, key, *top_n),
        Command::Edges { checkpoint, top } => cmd_edges(checkpoint, *top),
        Command::Ablate { variants, seeds } => cmd_ablate(c, variants, seeds),
        Command::Sweep { axis, values, seeds } => cmd_sweep(c, axis, values, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
