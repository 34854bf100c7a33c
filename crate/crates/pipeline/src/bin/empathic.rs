use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use empathic::ab;
use empathic::config::{embedding_service, knowledge_service, scorers, BackendContext, ExperimentConfig, Method};
use empathic::dataset::{self, PrepareOptions};
use empathic::embedding::{EmbeddingIndex, IndexField};
use empathic::generator::{self, GenerateInput, TrainOptions};
use empathic::harness::{self, ExampleKnowledge, ReasonInputs, SampleKnowledge, Services};
use empathic::io;
use empathic::llm::Mode;
use empathic::records::{sample_id, GenerationRecord, ReasoningRecord};
use empathic::report::{self, Layout, ReportRow};
use empathic::scoring::{self, ScoredPair, Scorers};
use empathic::checkpoint;
use empathic_core::corpus::{parse_ratios, Conversation, SampleMode};
use empathic_core::knowledge::{InferenceSet, Relation};
use empathic_core::metrics::MetricReport;
use empathic_core::model::ModelVariant;
use empathic_core::prompting::Variant;
use empathic_core::selection::RankedCandidates;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "empathic", version, about = "Commonsense-causality empathetic response generation")]
struct Cli {
    /// live, record or replay. Overrides the config.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Seed for splits, sampling, training and decoding. Overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment TOML; supplies backends and defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on concurrent backend calls.
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of an experiment into a content-addressed run directory.
    Run(RunArgs),
    /// Validate a corpus, split it and cut test samples.
    PrepareData(PrepareArgs),
    /// Infer commonsense knowledge for one split.
    InferKnowledge(KnowledgeArgs),
    /// Rank training conversations for each test sample.
    SelectExamples(SelectArgs),
    /// Prompt the chat model to reason about the system-side causality.
    ReasonCausality(ReasonArgs),
    /// Train the encoder-decoder generator.
    TrainT5(TrainArgs),
    /// Produce responses for test samples.
    Generate(GenerateArgs),
    /// Score generated responses.
    Evaluate(EvaluateArgs),
    /// Build a blinded pairwise human-evaluation bundle.
    ExportAb(AbArgs),
    /// Compare methods in one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Parent of the run directory; defaults to the config's run_root.
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "8:1:1")]
    ratios: String,
    #[arg(long)]
    out: PathBuf,
    /// Emotion inventory, one label per line.
    #[arg(long)]
    emotions: Option<PathBuf>,
    /// Subsample each test mode to this many samples.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct KnowledgeArgs {
    /// Prepared data directory.
    #[arg(long)]
    data: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, value_delimiter = ',', default_value = "xWant,xReact")]
    relations: Vec<Relation>,
    /// Expected backend id; refuses to run against a different backend.
    #[arg(long)]
    backend: Option<String>,
    /// user: the user's last utterance. sys: the system reply.
    #[arg(long, default_value = "user")]
    side: String,
    #[arg(long, default_value = "single_turn")]
    sample_mode: SampleMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    k: usize,
    /// Embedding index; built from --train when the file does not exist.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReasonArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "causality")]
    variant: Variant,
    #[arg(long)]
    samples: PathBuf,
    /// Output of select-examples.
    #[arg(long)]
    candidates: PathBuf,
    /// Training split the candidates point into.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Prepared data directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint directory. Without it, responses are taken from --reasoning.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    samples: PathBuf,
    /// Output of reason-causality.
    #[arg(long)]
    reasoning: Option<PathBuf>,
    /// Method name written into each record.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, default_value = "f1,bleu,distinct")]
    metrics: String,
    /// Generation records or scored pairs, one JSON object per line.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AbArgs {
    #[arg(long)]
    first: PathBuf,
    #[arg(long)]
    second: PathBuf,
    #[arg(long, default_value_t = 150)]
    items: usize,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    key: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories or metric report files, each as METHOD=PATH.
    #[arg(required = true)]
    inputs: Vec<String>,
    #[arg(long, default_value = "markdown")]
    layout: Layout,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeRow {
    id: String,
    text: String,
    sets: Vec<InferenceSet>,
}

struct Ctx {
    cfg: Option<ExperimentConfig>,
    services: Services,
    seed: u64,
    mode: Mode,
    max_parallel: usize,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Some(ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
            None => None,
        };
        if let Some(c) = cfg.as_mut() {
            if let Some(m) = cli.mode {
                c.mode = m;
            }
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            if let Some(n) = cli.max_parallel {
                c.max_parallel = n;
            }
        }
        let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
        let mode = cli.mode.or(cfg.as_ref().map(|c| c.mode)).unwrap_or(Mode::Replay);
        let max_parallel = cli.max_parallel.or(cfg.as_ref().map(|c| c.max_parallel)).unwrap_or(4);
        if max_parallel == 0 {
            bail!("--max-parallel must be at least 1");
        }
        Ok(Self {
            cfg,
            services: Services::http(),
            seed,
            mode,
            max_parallel,
        })
    }

    fn cfg(&self) -> Result<&ExperimentConfig> {
        self.cfg.as_ref().context("this command needs --config for its backends")
    }

    fn backends(&self) -> Result<BackendContext> {
        Ok(harness::backend_context(self.cfg()?, &self.services)?)
    }
}

fn split_file(data: &Path, name: &str) -> Result<Vec<Conversation>> {
    let p = dataset::PreparedPaths::new(data).split(name);
    io::read_jsonl(&p).with_context(|| format!("reading {}", p.display()))
}

fn prepare(ctx: &Ctx, a: &PrepareArgs) -> Result<()> {
    let emotions = match (&a.emotions, &ctx.cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.resolve(&c.data.emotions),
        (None, None) => bail!("--emotions is required without --config"),
    };
    let inventory = dataset::load_inventory(&emotions)?;
    let opts = PrepareOptions {
        ratios: parse_ratios(&a.ratios)?,
        seed: ctx.seed,
        sample_count: a.samples,
    };
    let (_, manifest) = dataset::prepare_data(&a.input, &inventory, &opts, &a.out)?;
    println!(
        "train {} / valid {} / test {}; {} single-turn and {} multi-turn samples",
        manifest.sizes[0], manifest.sizes[1], manifest.sizes[2], manifest.single_turn_samples, manifest.multi_turn_samples
    );
    Ok(())
}

fn infer_knowledge(ctx: &Ctx, a: &KnowledgeArgs) -> Result<()> {
    let svc = knowledge_service(ctx.cfg()?, &ctx.backends()?)?;
    let backend_id = svc.backend().backend_id().to_string();
    if let Some(want) = &a.backend {
        if *want != backend_id {
            bail!("configured knowledge backend is {backend_id:?}, not {want:?}");
        }
    }
    let sys = match a.side.as_str() {
        "user" => false,
        "sys" => true,
        other => bail!("--side must be user or sys, got {other:?}"),
    };
    let texts: Vec<(String, String)> = match a.split.as_str() {
        "test" => {
            let p = dataset::PreparedPaths::new(&a.data).samples(a.sample_mode);
            dataset::load_samples(&p)?
                .iter()
                .map(|s| {
                    let t = if sys { &s.reference.text } else { &s.tail().text };
                    (sample_id(s), t.clone())
                })
                .collect()
        }
        "train" | "valid" => split_file(&a.data, &a.split)?
            .iter()
            .filter_map(|c| {
                let (ctx_utts, reply) = harness::example_pair(c, a.sample_mode)?;
                let t = if sys { reply.text } else { ctx_utts.last()?.text.clone() };
                Some((c.id.clone(), t))
            })
            .collect(),
        other => bail!("--split must be train, valid or test, got {other:?}"),
    };
    let requests: Vec<(String, Relation)> = texts
        .iter()
        .flat_map(|(_, t)| a.relations.iter().map(move |r| (t.clone(), *r)))
        .collect();
    let mut results = svc.infer_many(&requests).into_iter();
    let mut rows = Vec::with_capacity(texts.len());
    for (id, text) in texts {
        let sets = (0..a.relations.len())
            .map(|_| results.next().expect("one result per request"))
            .collect::<empathic::Result<Vec<_>>>()
            .with_context(|| format!("inferring knowledge for {id}"))?;
        rows.push(KnowledgeRow { id, text, sets });
    }
    io::write_jsonl(&a.out, &rows)?;
    println!("{} records from backend {backend_id}", rows.len());
    Ok(())
}

fn select(ctx: &Ctx, a: &SelectArgs) -> Result<()> {
    let cfg = ctx.cfg()?;
    let svc = embedding_service(cfg, &ctx.backends()?)?;
    let index = if a.index.is_file() {
        EmbeddingIndex::load(&a.index)?
    } else {
        let train = a.train.as_ref().context("index file not found; pass --train to build it")?;
        let convs: Vec<Conversation> = io::read_jsonl(train)?;
        let index = EmbeddingIndex::build(&convs, &svc, cfg.embedding.field)?;
        index.save(&a.index)?;
        index
    };
    if index.field != cfg.embedding.field {
        log::warn!("index was built on a different field than the config names");
    }
    let samples = dataset::load_samples(&a.samples)?;
    let ranked = harness::select_examples(&index, &samples, &svc, a.k, ctx.max_parallel)?;
    io::write_jsonl(&a.out, &ranked)?;
    let field = match index.field {
        IndexField::Situation => "situation",
        IndexField::Context => "context",
    };
    println!("{} samples ranked by {field} similarity, k = {}", ranked.len(), a.k);
    Ok(())
}

fn reason(ctx: &Ctx, a: &ReasonArgs) -> Result<()> {
    let cfg = ctx.cfg()?;
    let llm = cfg.llm.as_ref().context("the config has no [llm] table")?;
    let mut samples = dataset::load_samples(&a.samples)?;
    samples.sort_by_key(sample_id);
    let mut candidates: Vec<RankedCandidates> = io::read_jsonl(&a.candidates)?;
    for c in &mut candidates {
        if c.entries.len() < a.k {
            bail!("sample {} has {} candidates, fewer than k = {}", c.query_id, c.entries.len(), a.k);
        }
        c.entries.truncate(a.k);
        c.k = a.k;
    }
    let train: Vec<Conversation> = io::read_jsonl(&a.train)?;
    let (sample_k, example_k) = if a.variant == Variant::Causality {
        let svc = knowledge_service(cfg, &ctx.backends()?)?;
        let wanted: BTreeSet<&str> = candidates
            .iter()
            .flat_map(|r| r.entries.iter().map(|c| c.conversation_id.as_str()))
            .collect();
        let used: Vec<Conversation> = train.iter().filter(|c| wanted.contains(c.id.as_str())).cloned().collect();
        (
            harness::infer_sample_knowledge(&samples, &svc, ctx.max_parallel)?,
            harness::infer_example_knowledge(&used, &svc, cfg.data.sample_mode, ctx.max_parallel)?,
        )
    } else {
        (Vec::<SampleKnowledge>::new(), Vec::<ExampleKnowledge>::new())
    };
    let prompts = harness::build_reasoning_prompts(&ReasonInputs {
        samples: &samples,
        candidates: &candidates,
        train: &train,
        sample_knowledge: &sample_k,
        example_knowledge: &example_k,
        variant: a.variant,
        sample_mode: cfg.data.sample_mode,
        llm,
    })?;
    let client = harness::llm_client(ctx.mode, llm, &cfg.resolve(&llm.recordings), &ctx.services)?;
    let (records, failure) = harness::complete_reasoning(prompts, &client, ctx.max_parallel);
    io::write_jsonl(&a.out, &records)?;
    let parsed = records.iter().filter(|r| r.parsed.is_some()).count();
    let cost = client.cost();
    println!("{} replies, {parsed} parsed; cost {}", records.len(), serde_json::to_string(&cost)?);
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(())
}

fn train_t5(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = ctx.cfg()?;
    let t5 = cfg.t5.as_ref().context("the config has no [t5] table")?;
    let mut model = t5.model.clone();
    if let Some(v) = a.variant {
        model.variant = v;
    }
    let inventory = dataset::load_inventory(&cfg.resolve(&cfg.data.emotions))?;
    let train = split_file(&a.data, "train")?;
    let valid = split_file(&a.data, "valid")?;
    let (train_store, valid_store) = if model.variant.uses_user() || model.variant.uses_sys() {
        let svc = knowledge_service(cfg, &ctx.backends()?)?;
        (
            generator::build_causality_store(&train, &svc, t5.pair_policy, ctx.max_parallel)?,
            generator::build_causality_store(&valid, &svc, t5.pair_policy, ctx.max_parallel)?,
        )
    } else {
        Default::default()
    };
    let vocab = generator::build_vocab(&train, &train_store, t5.max_vocab);
    let train_ex = generator::build_examples(&train, &train_store, &vocab, &inventory, model.variant, t5.pair_policy)?;
    let valid_ex = generator::build_examples(&valid, &valid_store, &vocab, &inventory, model.variant, t5.pair_policy)?;
    model.emotion_count = inventory.len();
    model.seed = ctx.seed;
    let opts = TrainOptions {
        config: model,
        max_steps: t5.max_steps,
        warm_start: t5.warm_start.as_ref().map(|p| cfg.resolve(p)),
        out_dir: a.out.clone(),
    };
    let (_, report) = generator::train_t5(&train_ex, &valid_ex, &vocab, &opts)?;
    for e in &report.epochs {
        println!(
            "epoch {}: L_e {:.4} L_gen {:.4} total {:.4} valid {}",
            e.epoch,
            e.mean_l_emotion,
            e.mean_l_gen,
            e.mean_total,
            e.valid_total.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let mut samples = dataset::load_samples(&a.samples)?;
    samples.sort_by_key(sample_id);
    let reasoned: HashMap<String, ReasoningRecord> = match &a.reasoning {
        Some(p) => io::read_jsonl::<ReasoningRecord>(p)?
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect(),
        None => HashMap::new(),
    };
    let mut skipped = 0usize;
    let records = match &a.checkpoint {
        None => {
            if a.reasoning.is_none() {
                bail!("pass --checkpoint, or --reasoning to take responses from reasoned replies");
            }
            let method = a.method.clone().unwrap_or_else(|| Method::ChatgptCausality.as_str().into());
            let mut out = Vec::new();
            for s in &samples {
                match reasoned.get(&sample_id(s)).and_then(|r| r.parsed.clone()) {
                    Some(p) => out.push(GenerationRecord::new(s, &method, p.response.clone(), Some(p))),
                    None => skipped += 1,
                }
            }
            out
        }
        Some(dir) => {
            let ck = checkpoint::load(dir)?;
            let variant = ck.model.config.variant;
            let svc = if variant.uses_user() {
                Some(knowledge_service(ctx.cfg()?, &ctx.backends()?)?)
            } else {
                None
            };
            let mut inputs = Vec::new();
            for s in &samples {
                let r = reasoned.get(&sample_id(s)).and_then(|r| r.parsed.as_ref());
                if variant.uses_sys() && r.is_none() {
                    skipped += 1;
                    continue;
                }
                let (user_text, sys_text) = generator::inference_texts(s, svc.as_ref(), r, variant)?;
                inputs.push(GenerateInput {
                    sample: s,
                    user_text,
                    sys_text,
                });
            }
            let decode = ctx
                .cfg
                .as_ref()
                .and_then(|c| c.t5.as_ref())
                .and_then(|t| t.decode.clone())
                .unwrap_or_else(|| ck.model.config.decode.clone());
            let method = a.method.clone().unwrap_or_else(|| Method::T5.as_str().into());
            generator::generate_responses(&ck.model, &ck.vocab, &inputs, &decode, ctx.seed, &method, ctx.max_parallel)?
        }
    };
    if skipped > 0 {
        log::warn!("{skipped} sample(s) had no usable reasoned output and were skipped");
    }
    io::write_jsonl(&a.out, &records)?;
    println!("{} responses written, {skipped} skipped", records.len());
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<ScoredPair>> {
    let lines = io::read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let pair = match serde_json::from_str::<GenerationRecord>(&line) {
            Ok(g) => g.to_scored_pair(),
            Err(_) => serde_json::from_str::<ScoredPair>(&line)
                .with_context(|| format!("{}:{n}: neither a generation record nor a scored pair", path.display()))?,
        };
        out.push(pair);
    }
    Ok(out)
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let families = scoring::parse_metrics(&a.metrics)?;
    let mut sc = match &ctx.cfg {
        Some(cfg) => scorers(cfg, &ctx.backends()?)?,
        None => Scorers::default(),
    };
    sc.max_parallel = ctx.max_parallel;
    let pairs = read_pairs(&a.pairs)?;
    let reports = scoring::evaluate(&pairs, &families, &sc)?;
    if let Some(out) = &a.out {
        io::write_json(out, &reports)?;
    }
    print!("{}", scoring::format_reports(&reports));
    Ok(())
}

fn export_ab(ctx: &Ctx, a: &AbArgs) -> Result<()> {
    let first: Vec<GenerationRecord> = io::read_jsonl(&a.first)?;
    let second: Vec<GenerationRecord> = io::read_jsonl(&a.second)?;
    let (bundle, key) = ab::export_ab(&first, &second, ctx.seed, a.items)?;
    ab::write_ab(&bundle, &key, &a.bundle, &a.key)?;
    println!("{} items; key written to {}", bundle.items.len(), a.key.display());
    Ok(())
}

fn load_reports(path: &Path) -> Result<(Vec<MetricReport>, Option<f64>)> {
    if path.is_dir() {
        let layout = harness::RunLayout::new(path);
        let reports = io::read_json(&layout.reports())?;
        let ppl = if layout.perplexity().is_file() {
            Some(io::read_json::<harness::Perplexity>(&layout.perplexity())?.ppl)
        } else {
            None
        };
        Ok((reports, ppl))
    } else {
        Ok((io::read_json(path)?, None))
    }
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for input in &a.inputs {
        let (method, path) = input
            .split_once('=')
            .with_context(|| format!("expected METHOD=PATH, got {input:?}"))?;
        let (reports, ppl) = load_reports(Path::new(path))?;
        let mut row = ReportRow::from_reports(method, &reports);
        if let Some(p) = ppl {
            row.values.push(("ppl".into(), p));
        }
        rows.push(row);
        runs.push((method.to_string(), reports));
    }
    for w in report::universe_warnings(&runs) {
        log::warn!("{w}");
    }
    let table = report::render_report(&rows, a.layout);
    match &a.out {
        Some(p) => io::atomic_write(p, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Run(a) => {
            let cfg = ctx.cfg()?;
            let out = harness::run_experiment(cfg, &ctx.services, a.run_root.as_deref())?;
            println!("{}", out.run_dir.display());
            let table = harness::RunLayout::new(&out.run_dir).table();
            if table.is_file() {
                print!("{}", io::read_string(&table)?);
            }
            Ok(())
        }
        Command::PrepareData(a) => prepare(&ctx, a),
        Command::InferKnowledge(a) => infer_knowledge(&ctx, a),
        Command::SelectExamples(a) => select(&ctx, a),
        Command::ReasonCausality(a) => reason(&ctx, a),
        Command::TrainT5(a) => train_t5(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::ExportAb(a) => export_ab(&ctx, a),
        Command::Report(a) => report_cmd(a),
    }
}
