use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use log::info;

use dst_core::corpus::{
    assign_partitions, corpus_fingerprint, generate_synthetic, load_corpus, write_corpus, Dialogue, Partition,
    ValueNormalizer,
};
use dst_core::prompting::example_rng;
use dst_core::schema::{describe as render, DescriptionVariant, Schema};
use dst_core::trainer::{evaluate_run, run_protocol, CheckpointRef, MANIFEST_FILE};
use dst_core::Error;

use crate::{data_path, ConfigArgs};

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// MultiWOZ-format directory or `*_dials.json` file, or a `.jsonl` corpus.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic dialogues instead of reading `--input`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Turns per synthetic dialogue.
    #[arg(long, default_value_t = 4)]
    pub max_turns: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Slot ontology; the bundled one when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Value alias table; the bundled one when omitted.
    #[arg(long)]
    pub alias_table: Option<PathBuf>,
    /// Output corpus (`.jsonl`).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_schema(path: Option<&Path>) -> dst_core::Result<Schema> {
    match path {
        Some(p) => Schema::load(&data_path(p)),
        None => Ok(Schema::canonical()),
    }
}

/// Writes `bytes` unless `path` already holds them; returns whether it wrote.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> std::io::Result<bool> {
    if std::fs::read(path).is_ok_and(|existing| existing == bytes) {
        return Ok(false);
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(true)
}

fn partition_counts(dialogues: &[Dialogue]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for d in dialogues {
        let name = match d.partition {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
        };
        *counts.entry(name).or_insert(0) += 1;
    }
    counts
}

pub fn preprocess(args: &PreprocessArgs) -> anyhow::Result<u8> {
    let schema = load_schema(args.schema.as_deref())?;
    let dialogues = match (args.synthetic, &args.input) {
        (Some(n), _) => {
            let mut dialogues = generate_synthetic(&schema, n, args.max_turns, args.seed);
            assign_partitions(&mut dialogues, args.dev_fraction, args.test_fraction, args.seed);
            dialogues
        }
        (None, Some(input)) => {
            let normalizer = match &args.alias_table {
                Some(p) => ValueNormalizer::load(&data_path(p))?,
                None => ValueNormalizer::bundled().clone(),
            };
            load_corpus(&data_path(input), &schema, &normalizer)?
        }
        (None, None) => return Err(Error::Config("either --input or --synthetic is required".into()).into()),
    };
    let tmp = tempfile_path(&args.out);
    write_corpus(&tmp, &dialogues)?;
    let bytes = std::fs::read(&tmp).with_context(|| format!("reading back {}", tmp.display()))?;
    std::fs::remove_file(&tmp)?;
    let wrote = write_if_changed(&args.out, &bytes).map_err(Error::from)?;
    let status = if wrote { "wrote" } else { "unchanged" };
    println!(
        "{status} {}: {} dialogues {:?} fingerprint {}",
        args.out.display(),
        dialogues.len(),
        partition_counts(&dialogues),
        &corpus_fingerprint(&dialogues)[..16]
    );
    Ok(0)
}

fn tempfile_path(target: &Path) -> PathBuf {
    let mut name = target.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{}.partial", std::process::id()));
    target.with_file_name(name)
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// Slot ontology; the bundled one when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Comma-separated variants, or `all`.
    #[arg(long, default_value = "all")]
    pub variants: String,
    /// Seed for the candidate-value order of slot_value descriptions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_variants(spec: &str) -> dst_core::Result<Vec<DescriptionVariant>> {
    if spec.trim() == "all" {
        return Ok(DescriptionVariant::ALL.to_vec());
    }
    let variants = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<dst_core::Result<Vec<DescriptionVariant>>>()?;
    if variants.is_empty() {
        return Err(Error::Config("no description variants given".into()));
    }
    Ok(variants)
}

/// One `slot<TAB>variant<TAB>description` row per slot and variant.
pub fn description_table(schema: &Schema, variants: &[DescriptionVariant], seed: u64) -> dst_core::Result<String> {
    let mut out = String::from("slot\tvariant\tdescription\n");
    for spec in schema.slots() {
        let id = spec.id();
        for &variant in variants {
            let text = render(spec, variant, &mut example_rng(seed, "describe", 0, &id))?;
            out.push_str(&format!("{id}\t{variant}\t{text}\n"));
        }
    }
    Ok(out)
}

pub fn describe(args: &DescribeArgs) -> anyhow::Result<u8> {
    let schema = load_schema(args.schema.as_deref())?;
    let variants = parse_variants(&args.variants)?;
    let table = description_table(&schema, &variants, args.seed)?;
    match &args.out {
        Some(path) => {
            write_if_changed(path, table.as_bytes()).map_err(Error::from)?;
            info!(
                "{} descriptions written to {}",
                table.lines().count() - 1,
                path.display()
            );
        }
        None => std::io::stdout().write_all(table.as_bytes())?,
    }
    Ok(0)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Score the run on its test split once trained.
    #[arg(long)]
    pub evaluate: bool,
}

pub fn train(args: &TrainArgs) -> anyhow::Result<u8> {
    let config = args.config.build()?;
    info!(
        "run {} ({} / {} / {:?})",
        config.run_id(),
        config.protocol,
        config.variant,
        config.backend
    );
    let run = run_protocol(&config)?;
    let m = &run.manifest;
    println!(
        "trained {} epochs={} steps={} checkpoint={}",
        run.run_dir.display(),
        m.epochs_completed,
        m.steps,
        &m.checkpoint_hash[..16]
    );
    if args.evaluate {
        print_record(&run)?;
    }
    Ok(0)
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory holding a manifest; derived from the configuration when omitted.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn evaluate(args: &EvaluateArgs) -> anyhow::Result<u8> {
    let run_dir = match &args.run {
        Some(dir) => dir.clone(),
        None => args.config.build()?.run_dir(),
    };
    if !run_dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!("{} holds no finished run", run_dir.display())).into());
    }
    let run = CheckpointRef::open(&run_dir)?;
    print_record(&run)?;
    Ok(0)
}

fn print_record(run: &CheckpointRef) -> anyhow::Result<()> {
    let record = evaluate_run(run)?;
    let s = &record.scores;
    println!(
        "evaluated {} jga={:.4} turns={} dialogues={}",
        run.run_dir.display(),
        s.joint_goal_accuracy,
        s.n_turns,
        s.n_dialogues
    );
    for (slot, acc) in &s.slot_accuracy {
        println!("  {slot}\t{acc:.4}");
    }
    Ok(())
}
