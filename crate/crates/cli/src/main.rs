use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cotrans_core::config::TrainConfig;
use cotrans_core::data::{
    generate_synthetic, interactions_tsv, load_bundle, write_bundle, DatasetBundle, DatasetPaths, IdMap, SynthSpec,
};
use cotrans_core::evaluation::{
    inject_source_noise, run_ablation, test_report, EvalReport, Experiment, HeldOut, Variant,
};
use cotrans_core::graph::{Domain, InteractionGraph};
use cotrans_core::metrics::Metric;
use cotrans_core::training::{fit, load_checkpoint, stream, write_checkpoint, EpochRecord};

mod manifest;

use manifest::{dataset_inputs, digest_file, write_atomic, Manifest};

#[derive(Parser)]
#[command(name = "cotrans", version, about = "Cross-domain recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset and write the best checkpoint, log and manifest.
    Train(TrainArgs),
    /// Rank held-out items with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic two-domain dataset with a knowledge graph.
    GenSynth(GenSynthArgs),
    /// Add uniformly random interactions to a source interaction file.
    InjectNoise(InjectNoiseArgs),
    /// Train and test ablation variants.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding source.tsv, target.tsv and optional kg.tsv,
    /// map_source.tsv, map_target.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    map_source: Option<PathBuf>,
    #[arg(long)]
    map_target: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Result<DatasetPaths> {
        let mut paths = match &self.data {
            Some(dir) => DatasetPaths::in_dir(dir),
            None => DatasetPaths::default(),
        };
        if let Some(p) = &self.source {
            paths.source = p.clone();
        }
        if let Some(p) = &self.target {
            paths.target = p.clone();
        }
        for (slot, flag) in [
            (&mut paths.kg, &self.kg),
            (&mut paths.map_source, &self.map_source),
            (&mut paths.map_target, &self.map_target),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        if paths.source.as_os_str().is_empty() || paths.target.as_os_str().is_empty() {
            bail!("give --data DIR or both --source and --target");
        }
        Ok(paths)
    }
}

/// Config overrides; each flag wins over the config file.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    alpha3: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    readout: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    /// Any other configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("alpha1", self.alpha1.map(|v| v.to_string()));
        push("alpha2", self.alpha2.map(|v| v.to_string()));
        push("alpha3", self.alpha3.map(|v| v.to_string()));
        push("max_epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("learning_rate", self.lr.map(|v| v.to_string()));
        push("embedding_dim", self.dim.map(|v| v.to_string()));
        push("layers", self.layers.map(|v| v.to_string()));
        push("readout", self.readout.clone());
        push("patience", self.patience.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

/// Built-in defaults, then the config file, then flags, then `--seed`.
fn resolve_config(common: &Common, flags: &ConfigFlags) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in flags.pairs()? {
        cfg.set(&k, &v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint written by `train`; its manifest.json must sit next to it.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "10,100", value_delimiter = ',')]
    k: Vec<usize>,
    /// Rank the validation items instead of the test items.
    #[arg(long)]
    validation: bool,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for uniformity; the training run's config is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accepted for uniformity; the training run's seed is used.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    source_items: usize,
    #[arg(long, default_value_t = 300)]
    target_items: usize,
    #[arg(long, default_value_t = 8)]
    factors: usize,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 4)]
    entities_per_cluster: usize,
    #[arg(long, default_value_t = 3)]
    attributes_per_item: usize,
    #[arg(long, default_value_t = 20)]
    source_per_user: usize,
    #[arg(long, default_value_t = 8)]
    target_per_user: usize,
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
}

#[derive(Args)]
struct InjectNoiseArgs {
    #[command(flatten)]
    common: Common,
    /// Source interactions TSV.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    ratio: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Comma-separated variants: full, no-pred-s, no-kl, no-cl, no-kg, target-only, target-only-kg.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    variant: Vec<String>,
    #[arg(long, default_value = "10,100", value_delimiter = ',')]
    k: Vec<usize>,
}

fn check_inputs(paths: &DatasetPaths) -> Result<()> {
    for p in paths.files() {
        if !p.exists() {
            return Err(MissingFile(p.to_path_buf()).into());
        }
    }
    Ok(())
}

fn load_experiment(paths: &DatasetPaths, cfg: &TrainConfig) -> Result<(DatasetBundle, Experiment)> {
    check_inputs(paths)?;
    let (bundle, report) = load_bundle(paths, cfg.kg_radius)?;
    log::info!(
        "loaded {} users, {} + {} items, {} entities ({:?})",
        bundle.users.len(),
        bundle.source_items.len(),
        bundle.target_items.len(),
        bundle.entities.len(),
        report
    );
    let experiment = Experiment::new(bundle.source.clone(), &bundle.target, bundle.kg.clone(), cfg.seed)?;
    log::info!(
        "split: {} evaluated users, {} excluded",
        experiment.split.test.len(),
        experiment.split.excluded
    );
    Ok((bundle, experiment))
}

/// A required input does not exist; reported with exit status 2.
#[derive(Debug)]
struct MissingFile(PathBuf);

impl std::fmt::Display for MissingFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no such file: {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

fn held_out_tsv(cases: &[HeldOut], bundle: &DatasetBundle) -> String {
    cases
        .iter()
        .map(|c| format!("{}\t{}\n", bundle.users.id(c.user), bundle.target_items.id(c.item)))
        .collect()
}

fn metrics_tsv(report: &EvalReport, tag: Option<&str>) -> String {
    let mut out = String::new();
    for &(m, k, v) in &report.aggregates {
        if let Some(tag) = tag {
            out.push_str(tag);
            out.push('\t');
        }
        out.push_str(&format!("{m}\t{k}\t{v:.4}\n"));
    }
    out
}

fn ranks_tsv(report: &EvalReport, users: &IdMap, items: &IdMap) -> String {
    report
        .per_user
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", users.id(r.user), items.id(r.item), r.rank))
        .collect()
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, &args.flags)?;
    let paths = args.data.paths()?;
    let out = &args.common.out;
    check_inputs(&paths)?;
    let mut manifest = Manifest::start("train", &cfg, dataset_inputs(&paths))?;
    let (bundle, experiment) = load_experiment(&paths, &cfg)?;
    create_out(out)?;
    manifest.write(out)?;

    let data = experiment.training_data(&cfg)?;
    let mut log_lines = String::new();
    let outcome = fit(&cfg, &data, &experiment.split.validation, |rec: &EpochRecord| {
        log::info!("epoch {}: val NDCG@100 {:.4}", rec.epoch, rec.val_ndcg100);
        log_lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
        log_lines.push('\n');
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            manifest.fail(&e.to_string());
            manifest.write(out)?;
            return Err(e.into());
        }
    };

    let mut ckpt = Vec::new();
    write_checkpoint(&outcome.best, &mut ckpt)?;
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("best.ckpt", ckpt),
        ("train_log.jsonl", log_lines.into_bytes()),
        ("config.txt", cfg.to_text().into_bytes()),
        ("users.tsv", bundle.users.to_tsv().into_bytes()),
        ("source_items.tsv", bundle.source_items.to_tsv().into_bytes()),
        ("target_items.tsv", bundle.target_items.to_tsv().into_bytes()),
        ("entities.tsv", bundle.entities.to_tsv().into_bytes()),
        (
            "target_train.tsv",
            interactions_tsv(&experiment.split.target_train, &bundle.users, &bundle.target_items).into_bytes(),
        ),
        (
            "validation.tsv",
            held_out_tsv(&experiment.split.validation, &bundle).into_bytes(),
        ),
        ("test.tsv", held_out_tsv(&experiment.split.test, &bundle).into_bytes()),
    ];
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
        manifest.outputs.push(out.join(name));
    }
    manifest.best_epoch = Some(outcome.best_epoch);
    manifest.finish();
    manifest.write(out)?;
    println!(
        "best epoch {} (validation NDCG@100 {:.4}); wrote {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch.min(outcome.log.len() - 1)].val_ndcg100,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        return Err(MissingFile(args.checkpoint.clone()).into());
    }
    let run_dir = args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest_path = run_dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(MissingFile(manifest_path).into());
    }
    let trained = Manifest::read(&manifest_path)?;
    if args.config.is_some() || args.seed.is_some() {
        log::warn!(
            "evaluate uses the configuration and seed recorded in {}",
            manifest_path.display()
        );
    }
    let cfg = trained.config()?;
    let paths = trained.dataset_paths()?;
    trained.verify_inputs()?;
    let (bundle, experiment) = load_experiment(&paths, &cfg)?;
    let data = experiment.training_data(&cfg)?;
    let params = load_checkpoint(&args.checkpoint)?;
    params.check_compatible(&data)?;
    let cases = if args.validation {
        &experiment.split.validation
    } else {
        &experiment.split.test
    };
    let report = test_report(&params, &data, &cfg, cases, &args.k)?;

    let out = args.out.unwrap_or(run_dir);
    create_out(&out)?;
    let mut manifest = Manifest::start("evaluate", &cfg, vec![("checkpoint", args.checkpoint.as_path())])?;
    let metrics = metrics_tsv(&report, None);
    write_atomic(&out.join("metrics.tsv"), metrics.as_bytes())?;
    write_atomic(
        &out.join("ranks.tsv"),
        ranks_tsv(&report, &bundle.users, &bundle.target_items).as_bytes(),
    )?;
    manifest.outputs = vec![out.join("metrics.tsv"), out.join("ranks.tsv")];
    manifest.finish();
    write_atomic(&out.join("evaluate_manifest.json"), manifest.to_json()?.as_bytes())?;
    print!("{metrics}");
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.common.config {
        cfg.apply_file(path)?;
    }
    let seed = args.common.seed.unwrap_or(cfg.seed);
    cfg.seed = seed;
    let spec = SynthSpec {
        users: args.users,
        source_items: args.source_items,
        target_items: args.target_items,
        k: args.factors,
        clusters: args.clusters,
        entities_per_cluster: args.entities_per_cluster,
        attributes_per_item: args.attributes_per_item,
        source_per_user: args.source_per_user,
        target_per_user: args.target_per_user,
        rho: args.rho,
        seed,
    };
    let synth = generate_synthetic(&spec)?;
    let out = &args.common.out;
    let staging = out.with_extension("partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    write_bundle(&synth.bundle, &staging)?;
    std::fs::write(staging.join("flags.tsv"), synth.flags_tsv())?;
    let mut manifest = Manifest::start("gen-synth", &cfg, Vec::new())?;
    manifest.extra.insert("synth_spec".into(), format!("{spec:?}"));
    manifest.extra.insert(
        "irrelevant_fraction".into(),
        format!("{:.6}", synth.irrelevant_fraction()),
    );
    manifest.finish();
    std::fs::write(staging.join("manifest.json"), manifest.to_json()?)?;
    if out.exists() {
        std::fs::remove_dir_all(out)?;
    }
    std::fs::rename(&staging, out)?;
    println!(
        "wrote {} ({} users, {} source / {} target interactions, irrelevant fraction {:.4})",
        out.display(),
        synth.bundle.users.len(),
        synth.bundle.source.edges.len(),
        synth.bundle.target.edges.len(),
        synth.irrelevant_fraction()
    );
    Ok(())
}

fn cmd_inject_noise(args: InjectNoiseArgs) -> Result<()> {
    if !args.source.exists() {
        return Err(MissingFile(args.source.clone()).into());
    }
    let seed = match &args.common.config {
        Some(path) => {
            let mut cfg = TrainConfig::default();
            cfg.apply_file(path)?;
            args.common.seed.unwrap_or(cfg.seed)
        }
        None => args.common.seed.unwrap_or(0),
    };
    let text =
        std::fs::read_to_string(&args.source).with_context(|| format!("cannot read {}", args.source.display()))?;
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut edges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(u), Some(i), None) if !u.trim().is_empty() && !i.trim().is_empty() => {
                edges.push((users.insert(u.trim()), items.insert(i.trim())));
            }
            _ => bail!("{}: line {}: expected user<TAB>item", args.source.display(), n + 1),
        }
    }
    let (graph, _) = InteractionGraph::new(Domain::Source, users.len(), items.len(), edges)?;
    let mut rng = stream(seed, 0x4015e, 0, 0, 0);
    let noisy = inject_source_noise(&graph, args.ratio, &mut rng)?;
    let added = noisy.edges.len() - graph.edges.len();

    let out = &args.common.out;
    create_out(out)?;
    let digest = digest_file(&args.source)?;
    let mut body = format!(
        "# inject-noise ratio={} seed={seed} input_sha256={digest} original={} added={added}\n",
        args.ratio,
        graph.edges.len()
    );
    body.push_str(&interactions_tsv(&noisy, &users, &items));
    let target = out.join("source_noisy.tsv");
    write_atomic(&target, body.as_bytes())?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut manifest = Manifest::start("inject-noise", &cfg, vec![("source", args.source.as_path())])?;
    manifest.extra.insert("ratio".into(), args.ratio.to_string());
    manifest.extra.insert("added_edges".into(), added.to_string());
    manifest.outputs.push(target.clone());
    manifest.finish();
    write_atomic(&out.join("manifest.json"), manifest.to_json()?.as_bytes())?;
    println!(
        "added {added} edges to {} original; wrote {}",
        graph.edges.len(),
        target.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, &args.flags)?;
    let variants = args
        .variant
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    let paths = args.data.paths()?;
    let out = &args.common.out;
    check_inputs(&paths)?;
    let mut manifest = Manifest::start("ablate", &cfg, dataset_inputs(&paths))?;
    let (_, experiment) = load_experiment(&paths, &cfg)?;
    create_out(out)?;
    manifest.write(out)?;
    let mut table = String::new();
    let mut logs = String::new();
    for variant in variants {
        let result = run_ablation(variant, &cfg, &experiment, &args.k)?;
        let tag = variant.to_string();
        table.push_str(&metrics_tsv(&result.test, Some(&tag)));
        for rec in &result.fit.log {
            let mut value = serde_json::to_value(rec)?;
            value["variant"] = serde_json::Value::String(tag.clone());
            logs.push_str(&serde_json::to_string(&value)?);
            logs.push('\n');
        }
        log::info!(
            "{tag}: NDCG@10 {:.4}",
            result.test.aggregate(Metric::Ndcg, 10).unwrap_or(f64::NAN)
        );
    }
    write_atomic(&out.join("ablation.tsv"), table.as_bytes())?;
    write_atomic(&out.join("ablation_log.jsonl"), logs.as_bytes())?;
    manifest.outputs = vec![out.join("ablation.tsv"), out.join("ablation_log.jsonl")];
    manifest.finish();
    manifest.write(out)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::InjectNoise(a) => cmd_inject_noise(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_missing_file(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn is_missing_file(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<MissingFile>()
            || c.downcast_ref::<std::io::Error>()
                .is_some_and(|e| e.kind() == std::io::ErrorKind::NotFound)
            || matches!(
                c.downcast_ref::<cotrans_core::Error>(),
                Some(cotrans_core::Error::Io { source, .. })
                    if source.kind() == std::io::ErrorKind::NotFound
            )
    })
}
