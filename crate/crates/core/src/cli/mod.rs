//! The `gaston` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for usage
//! and configuration errors.

pub mod selftest;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commembed::{init_communities_average, train_bpr, MembershipMap};
use crate::config::RunConfig;
use crate::error::{GastonError, Result};
use crate::finetune::{
    evaluate_test, read_labels, train_downstream, EncoderInputs, FeatureSource, Head, TaskKind, TaskSpec,
};
use crate::hetgraph::{read_graph, write_graph, HetGraph, NodeType, Subgraph};
use crate::hgt::{encode_values, read_checkpoint, write_checkpoint, Checkpoint, HgtParams};
use crate::ingest::{build_interaction_graph, filter_records, parse_archive, IdMap};
use crate::numerics::Tensor2;
use crate::pretrain::{pretrain, write_history};
use crate::textenc::{encode_texts, EmbeddingTable};

/// Name of the community matrix inside checkpoints.
pub const COMMUNITIES: &str = "communities";
const TEXT_ONLY: &str = "features.text_only";

#[derive(Debug, Parser)]
#[command(name = "gaston", version, about = "Community-aware graph pretraining for forum text")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the seeds in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
    EdgeRanking,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => TaskKind::Classification,
            TaskArg::Regression => TaskKind::Regression,
            TaskArg::EdgeRanking => TaskKind::EdgeRanking,
        }
    }
}

#[derive(Debug, Args)]
struct GraphArgs {
    /// Graph file written by `ingest`.
    #[arg(long, value_name = "PATH")]
    graph: PathBuf,
    /// Text embedding table.
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Tab-separated labels, optionally with a third split column.
    #[arg(long, value_name = "PATH")]
    labels: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Id map written by `ingest`; without it labels use node indices.
    #[arg(long, value_name = "PATH")]
    ids: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a JSON-lines archive, filter it, and write the graph, id map
    /// and hashed text embeddings.
    Ingest {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Community embeddings from co-membership ranking.
    InitBpr {
        #[arg(long, value_name = "PATH")]
        graph: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Community embeddings as the mean of their texts.
    InitAvg {
        #[command(flatten)]
        inputs: GraphArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Self-supervised encoder pretraining.
    Pretrain {
        #[command(flatten)]
        inputs: GraphArgs,
        /// Initial community embeddings.
        #[arg(long, value_name = "PATH")]
        communities: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a task head on a pretrained encoder.
    Finetune {
        #[command(flatten)]
        inputs: GraphArgs,
        #[command(flatten)]
        labels: LabelArgs,
        /// Pretrained checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Update encoder weights together with the head.
        #[arg(long)]
        tune_encoder: bool,
        /// Feed the head raw text embeddings instead of encoder states.
        #[arg(long)]
        text_only: bool,
        /// Weight every class equally in the loss.
        #[arg(long)]
        unweighted: bool,
    },
    /// Score a fine-tuned checkpoint on the test split.
    Eval {
        #[command(flatten)]
        inputs: GraphArgs,
        #[command(flatten)]
        labels: LabelArgs,
        /// Checkpoint written by `finetune`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write final user, text and community states as embedding tables.
    ExportEmbeddings {
        #[command(flatten)]
        inputs: GraphArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "PATH")]
        ids: Option<PathBuf>,
    },
    /// Run the built-in gradient and metric checks.
    Selftest,
}

/// Runs the command line against the process's stdout and stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    run_with(argv, &mut out, &mut err)
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                GastonError::Config(_) | GastonError::Argument(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| GastonError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| GastonError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_graph(p: &Path) -> Result<HetGraph> {
    read_graph(open(p)?)
}

fn load_table(p: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::read_from(open(p)?)
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    read_checkpoint(open(p)?)
}

fn save_table(t: &Tensor2, p: &Path) -> Result<()> {
    EmbeddingTable::from_tensor(t)?.write_to(create(p)?)
}

fn save_checkpoint(ck: &Checkpoint, p: &Path) -> Result<()> {
    write_checkpoint(ck, create(p)?)
}

fn communities_of(ck: &Checkpoint) -> Result<Tensor2> {
    ck.extra(COMMUNITIES)
        .cloned()
        .ok_or_else(|| GastonError::Format("checkpoint holds no community matrix".into()))
}

fn load_ids(p: &Option<PathBuf>) -> Result<Option<IdMap>> {
    p.as_deref().map(|p| IdMap::read(open(p)?)).transpose()
}

fn task_spec(args: &LabelArgs, g: &HetGraph) -> Result<TaskSpec> {
    let ids = load_ids(&args.ids)?;
    let labels = read_labels(open(&args.labels)?, args.task.into(), g, ids.as_ref())?;
    Ok(TaskSpec::new(labels))
}

fn write_report(text: &str, path: &Path, out: &mut dyn Write) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { input, out: dir } => {
            let parsed = parse_archive(open(&input)?)?;
            let kept = filter_records(&parsed.records, &cfg.ingest.filter())?;
            let inter = build_interaction_graph(&kept)?;
            let texts = encode_texts(&inter.bodies, cfg.textenc.dim)?;
            out_dir(&dir)?;
            write_graph(&inter.graph, create(&dir.join("graph.hgg"))?)?;
            texts.write_to(create(&dir.join("texts.emb"))?)?;
            inter.id_map().write(create(&dir.join("ids.tsv"))?)?;
            parsed.write_rejects(create(&dir.join("rejects.tsv"))?)?;
            let [u, t, c] = inter.graph.counts();
            writeln!(
                out,
                "records={}\nrejected={}\nkept={}\ndropped_deleted={}\nusers={u}\ntexts={t}\ncommunities={c}",
                parsed.records.len(),
                parsed.rejects.len(),
                kept.len(),
                inter.dropped_deleted
            )?;
        }
        Command::InitBpr { graph, out: dir } => {
            let g = load_graph(&graph)?;
            let p = train_bpr(&g, &cfg.bpr)?;
            out_dir(&dir)?;
            save_table(&p.communities, &dir.join("communities.emb"))?;
            writeln!(out, "communities={} dim={}", p.communities.rows(), p.communities.cols())?;
        }
        Command::InitAvg { inputs, out: dir } => {
            let g = load_graph(&inputs.graph)?;
            let texts = load_table(&inputs.embeddings)?;
            let c = init_communities_average(&g, &texts)?;
            out_dir(&dir)?;
            save_table(&c, &dir.join("communities.emb"))?;
            writeln!(out, "communities={} dim={}", c.rows(), c.cols())?;
        }
        Command::Pretrain {
            inputs,
            communities,
            out: dir,
        } => {
            let g = load_graph(&inputs.graph)?;
            let texts = load_table(&inputs.embeddings)?;
            let comm = load_table(&communities)?.to_tensor();
            let config = cfg.hgt.with_inputs([comm.cols(), texts.dim(), comm.cols()])?;
            let params = HgtParams::new(config, cfg.seed)?;
            let res = pretrain(&g, &texts, &comm, params, &cfg.pretrain)?;
            out_dir(&dir)?;
            save_checkpoint(
                &Checkpoint {
                    params: res.params.clone(),
                    extras: vec![(COMMUNITIES.into(), res.communities.clone())],
                },
                &dir.join("pretrained.hgtp"),
            )?;
            write_history(&res.history, create(&dir.join("history.csv"))?)?;
            let means = res.epoch_means();
            for (e, m) in means.iter().enumerate() {
                writeln!(out, "epoch={e} mean_loss={m}")?;
            }
            writeln!(
                out,
                "steps={} empty_mask_batches={} skipped_relations={}",
                res.history.len(),
                res.empty_mask_batches,
                res.skipped_relations
            )?;
        }
        Command::Finetune {
            inputs,
            labels,
            checkpoint,
            out: dir,
            tune_encoder,
            text_only,
            unweighted,
        } => {
            let g = load_graph(&inputs.graph)?;
            let texts = load_table(&inputs.embeddings)?;
            let ck = load_checkpoint(&checkpoint)?;
            let comm = communities_of(&ck)?;
            let mut task = task_spec(&labels, &g)?;
            task.tune_encoder = tune_encoder;
            task.class_weighting = !unweighted;
            task.features = if text_only {
                FeatureSource::TextOnly
            } else {
                FeatureSource::Encoder
            };
            let ctx = EncoderInputs {
                graph: &g,
                texts: &texts,
                communities: &comm,
            };
            let res = train_downstream(&task, &ctx, &ck.params, &cfg.finetune)?;
            out_dir(&dir)?;
            let mut extras = vec![(COMMUNITIES.into(), comm.clone())];
            extras.extend(res.head.to_extras());
            extras.push((TEXT_ONLY.into(), Tensor2::scalar(f64::from(u8::from(text_only)))));
            save_checkpoint(
                &Checkpoint {
                    params: res.params.clone(),
                    extras,
                },
                &dir.join("finetuned.hgtp"),
            )?;
            write_report(&res.report.to_text(), &dir.join("metrics.txt"), out)?;
        }
        Command::Eval {
            inputs,
            labels,
            checkpoint,
            out: dir,
        } => {
            let g = load_graph(&inputs.graph)?;
            let texts = load_table(&inputs.embeddings)?;
            let ck = load_checkpoint(&checkpoint)?;
            let comm = communities_of(&ck)?;
            let head = Head::from_extras(&ck.extras)?;
            let mut task = task_spec(&labels, &g)?;
            if ck.extra(TEXT_ONLY).is_some_and(|t| t.get(0, 0) != 0.0) {
                task.features = FeatureSource::TextOnly;
            }
            let ctx = EncoderInputs {
                graph: &g,
                texts: &texts,
                communities: &comm,
            };
            let report = evaluate_test(&task, &ctx, &ck.params, &head, &cfg.finetune)?;
            out_dir(&dir)?;
            write_report(&report.to_text(), &dir.join("eval.txt"), out)?;
        }
        Command::ExportEmbeddings {
            inputs,
            checkpoint,
            out: dir,
            ids,
        } => {
            let g = load_graph(&inputs.graph)?;
            let texts = load_table(&inputs.embeddings)?;
            let ck = load_checkpoint(&checkpoint)?;
            let comm = communities_of(&ck)?;
            let h = encode_values(&Subgraph::full(&g), &texts, &comm, &MembershipMap::from_graph(&g), &ck.params)?;
            out_dir(&dir)?;
            for t in NodeType::ALL {
                save_table(&h[t.index()], &dir.join(format!("{}.emb", t.name())))?;
            }
            let ids = load_ids(&ids)?;
            let mut w = create(&dir.join("text_index.tsv"))?;
            for i in 0..g.count(NodeType::Text) {
                match &ids {
                    Some(m) => writeln!(w, "{i}\t{}", m.ids(NodeType::Text)[i])?,
                    None => writeln!(w, "{i}\t{i}")?,
                }
            }
            w.flush()?;
            writeln!(out, "users={} texts={} communities={}", h[0].rows(), h[1].rows(), h[2].rows())?;
        }
        Command::Selftest => {
            let mut ok = true;
            for r in selftest::run_all(cli.seed.unwrap_or(cfg.seed), 1000)? {
                writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
                ok &= r.passed;
            }
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}
