//! Subcommand execution. Every command returns its whole output as a string.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use genret::eval::{
    beam_csv, bench_csv, bench_efficiency, eta_csv, filter_benchmark, parse_evalset, parse_filtration, recall_at_k,
    sweep_beam, sweep_eta, BenchConfig, EvalSet,
};
use genret::retrieval::candidate_json;
use genret::scorer::{logsumexp, protocol};
use genret::synth::{BiasedFamily, CaptionFamily, RandomScorer};
use genret::token_index::{index_to_string, parse_index};
use genret::{
    connect_external, exhaustive_rank, generate, retrieve, unify, BeamConfig, GenConfig, GenMode, Index, IndexParams,
    Prompt, ProxyConfig, ProxyKind, RankedList, RetrieveConfig, Scorer, ToyScorer, Transport, UnifyConfig,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::args::*;

/// Why a command did not produce output.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or flag combinations; nothing was run.
    Usage(String),
    /// The command started and failed.
    Runtime(String),
}

impl From<genret::Error> for Failure {
    fn from(e: genret::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<String, Failure>;

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn read(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("reading {}: {e}", path.display())))
}

pub fn execute(cli: &Cli) -> Outcome {
    if cli.jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    match &cli.command {
        Command::Index(IndexCommand::Build(a)) => index_build(cli, a),
        Command::Index(IndexCommand::Inspect(a)) => index_inspect(a),
        Command::Rank(a) => rank(cli, a),
        Command::Retrieve(a) => retrieve_cmd(cli, a),
        Command::Generate(a) => generate_cmd(cli, a),
        Command::Unify(a) => unify_cmd(cli, a),
        Command::Eval(EvalCommand::Recall(a)) => recall(cli, a),
        Command::Eval(EvalCommand::SweepEta(a)) => sweep_eta_cmd(cli, a),
        Command::Eval(EvalCommand::SweepBeam(a)) => sweep_beam_cmd(cli, a),
        Command::Eval(EvalCommand::Bench(a)) => bench(cli, a),
        Command::Eval(EvalCommand::Filter(a)) => filter(a),
        Command::Scorer(ScorerCommand::Probe(a)) => probe(cli, a),
        Command::Scorer(ScorerCommand::Serve(a)) => serve(cli, a),
    }
}

/// Opens the backend named by `--scorer` / `TIGER_SCORER`.
fn open_scorer(cli: &Cli) -> std::result::Result<Box<dyn Scorer>, Failure> {
    let Some(backend) = cli.scorer.as_deref() else {
        return usage("no scorer: pass --scorer or set TIGER_SCORER");
    };
    let Some((scheme, rest)) = backend.split_once(':') else {
        return usage(format!("scorer `{backend}` lacks a scheme such as toy: or tcp:"));
    };
    let timeout = Duration::from_millis(cli.timeout_ms);
    Ok(match scheme {
        "toy" => Box::new(ToyScorer::from_file(rest)?),
        "stdio" => Box::new(connect_external(&Transport::Stdio(rest.to_string()), timeout)?),
        "tcp" => Box::new(connect_external(&Transport::Tcp(rest.to_string()), timeout)?),
        "synth" => match rest.split(':').collect::<Vec<_>>()[..] {
            ["biased"] => Box::new(BiasedFamily::standard().scorer()),
            ["caption"] => Box::new(CaptionFamily::default().scorer()),
            ["random"] => Box::new(RandomScorer::new(64, 4, cli.seed, 1.0)),
            ["random", vocab] => match vocab.parse::<u32>() {
                Ok(v) if v >= 8 => Box::new(RandomScorer::new(v, 4, cli.seed, 1.0)),
                _ => return usage(format!("synth:random vocabulary `{vocab}` must be an integer >= 8")),
            },
            _ => return usage(format!("unknown synthetic scorer `{rest}`")),
        },
        other => return usage(format!("unknown scorer scheme `{other}`")),
    })
}

/// Prompts in input order, with the id given in the prompt file.
fn load_prompts<S: Scorer + ?Sized>(
    scorer: &S,
    args: &PromptArgs,
) -> std::result::Result<Vec<(Option<String>, Prompt)>, Failure> {
    if let Some(p) = &args.prompt {
        return Ok(vec![(None, Prompt::parse(scorer, p)?)]);
    }
    let path = args.prompts.as_ref().expect("clap requires one prompt source");
    let mut out = Vec::new();
    for (n, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, text) = match line.split_once('\t') {
            Some((id, text)) => (id.to_string(), text),
            None => (format!("line{}", n + 1), line),
        };
        let prompt =
            Prompt::parse(scorer, text).map_err(|e| Failure::Runtime(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push((Some(id), prompt));
    }
    if out.is_empty() {
        return Err(Failure::Runtime(format!("{}: no prompts", path.display())));
    }
    Ok(out)
}

/// Applies `f` to every item on `jobs` threads, keeping input order.
fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> std::result::Result<Vec<R>, Failure>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> genret::Result<R> + Sync,
{
    if jobs <= 1 {
        return Ok(items
            .iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect::<genret::Result<_>>()?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(pool.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect::<genret::Result<_>>()
    })?)
}

fn jsonl(values: impl IntoIterator<Item = Value>) -> String {
    let mut out = String::new();
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    out
}

fn prompt_json(prompt: &Prompt) -> Value {
    match &prompt.text {
        Some(t) => json!(t),
        None => json!(prompt.tokens),
    }
}

/// Adds `prompt_id` when the prompt came from a file.
fn with_id(id: &Option<String>, mut v: Value) -> Value {
    if let Some(id) = id {
        v["prompt_id"] = json!(id);
    }
    v
}

fn list_json(prompt: &Prompt, list: &RankedList) -> Value {
    json!({
        "prompt": prompt_json(prompt),
        "proxy": list.proxy_used,
        "decode_steps": list.decode_steps,
        "results": list.items.iter().map(candidate_json).collect::<Vec<_>>(),
    })
}

fn check_eta(eta: f64) -> std::result::Result<(), Failure> {
    if eta.is_finite() && eta >= 0.0 {
        Ok(())
    } else {
        usage(format!("--eta must be finite and >= 0, got {eta}"))
    }
}

fn proxy_config<S: Scorer + ?Sized>(
    scorer: &S,
    kind: ProxyKind,
    args: &ProxyArgs,
) -> std::result::Result<ProxyConfig, Failure> {
    Ok(ProxyConfig {
        kind,
        eta: args.eta,
        null_prompt: null_prompt(scorer, args.null_prompt)?,
        length_normalize: args.length_normalize,
    })
}

fn null_prompt<S: Scorer + ?Sized>(scorer: &S, arg: NullPromptArg) -> std::result::Result<Prompt, Failure> {
    Ok(match arg {
        NullPromptArg::Empty => Prompt::null(),
        NullPromptArg::Phrase => Prompt::null_phrase(scorer)?,
    })
}

fn proxy_kind(p: ProxyArg) -> ProxyKind {
    match p {
        ProxyArg::Forward => ProxyKind::Forward,
        ProxyArg::Pmi => ProxyKind::DebiasedPmi,
        ProxyArg::Reverse => ProxyKind::Reverse,
    }
}

fn beam_kind(p: BeamProxyArg) -> ProxyKind {
    match p {
        BeamProxyArg::Forward => ProxyKind::Forward,
        BeamProxyArg::Pmi => ProxyKind::DebiasedPmi,
    }
}

fn check_beam(b: &BeamArgs) -> std::result::Result<(), Failure> {
    if b.beam == 0 {
        return usage("--beam must be at least 1");
    }
    if b.max_steps == Some(0) {
        return usage("--max-steps must be at least 1");
    }
    Ok(())
}

fn retrieve_config<S: Scorer + ?Sized>(
    scorer: &S,
    b: &BeamArgs,
    p: &ProxyArgs,
    top: Option<usize>,
) -> std::result::Result<RetrieveConfig, Failure> {
    Ok(RetrieveConfig {
        beam: BeamConfig {
            beam_size: b.beam,
            proxy: proxy_config(scorer, beam_kind(b.beam_proxy), p)?,
            max_steps: b.max_steps,
        },
        rrr: b.rrr,
        rerank: ProxyConfig {
            length_normalize: p.length_normalize,
            ..ProxyConfig::reverse()
        },
        top_k: top,
    })
}

/// Validates generation flags; the sampling seed is filled in per prompt.
fn gen_config(g: &GenArgs) -> std::result::Result<GenConfig, Failure> {
    if g.mode != GenModeArg::Beam && g.gen_beam.is_some() {
        return usage("--gen-beam requires --mode beam");
    }
    if g.mode != GenModeArg::Sample && (g.temperature.is_some() || g.top_k.is_some()) {
        return usage("--temperature and --top-k require --mode sample");
    }
    let mode = match g.mode {
        GenModeArg::Greedy => GenMode::Greedy,
        GenModeArg::Beam => GenMode::Beam(g.gen_beam.unwrap_or(4)),
        GenModeArg::Sample => GenMode::Sample {
            seed: 0,
            temperature: g.temperature.unwrap_or(1.0),
            top_k: g.top_k,
        },
    };
    let cfg = GenConfig {
        mode,
        max_steps: g.gen_max_steps,
        restrict_to_visual: !g.unrestricted,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Prompt `i` samples with `seed + i`, so results do not depend on `--jobs`.
fn seeded(cfg: &GenConfig, seed: u64, i: usize) -> GenConfig {
    let mut cfg = cfg.clone();
    if let GenMode::Sample { seed: s, .. } = &mut cfg.mode {
        *s = seed.wrapping_add(i as u64);
    }
    cfg
}

fn index_build(cli: &Cli, a: &IndexBuildArgs) -> Outcome {
    let defaults = match (a.vocab_size, a.image_end) {
        (Some(vocab_size), Some(image_end)) => Some(IndexParams { vocab_size, image_end }),
        (None, None) if cli.scorer.is_some() => Some(open_scorer(cli)?.info().index_params()),
        (None, None) => None,
        _ => return usage("--vocab-size and --image-end go together"),
    };
    let db = parse_index(&read(&a.input)?, defaults)?;
    Ok(index_to_string(&db))
}

fn index_inspect(a: &IndexArg) -> Outcome {
    let index = Index::load(&a.index)?;
    let lengths: Vec<usize> = index.db.records().iter().map(|r| r.tokens.len()).collect();
    let v = json!({
        "records": index.db.len(),
        "vocab_size": index.db.vocab_size(),
        "image_end": index.db.image_end(),
        "trie_nodes": index.trie.node_count(),
        "distinct_sequences": index.trie.len(),
        "min_len": lengths.iter().min(),
        "max_len": lengths.iter().max(),
    });
    Ok(format!("{v}\n"))
}

fn rank(cli: &Cli, a: &RankArgs) -> Outcome {
    check_eta(a.proxy_args.eta)?;
    let index = Index::load(&a.index.index)?;
    let scorer = open_scorer(cli)?;
    let cfg = proxy_config(&scorer, proxy_kind(a.proxy), &a.proxy_args)?;
    let prompts = load_prompts(&scorer, &a.prompts)?;
    let out = par_map(cli.jobs, &prompts, |_, (id, p)| {
        let mut list = exhaustive_rank(&scorer, p, &index.db, &cfg)?;
        if let Some(k) = a.top {
            list.truncate(k);
        }
        Ok(with_id(id, list_json(p, &list)))
    })?;
    Ok(jsonl(out))
}

fn retrieve_cmd(cli: &Cli, a: &RetrieveArgs) -> Outcome {
    check_eta(a.proxy_args.eta)?;
    check_beam(&a.beam)?;
    let index = Index::load(&a.index.index)?;
    let scorer = open_scorer(cli)?;
    let cfg = retrieve_config(&scorer, &a.beam, &a.proxy_args, a.top)?;
    let prompts = load_prompts(&scorer, &a.prompts)?;
    let out = par_map(cli.jobs, &prompts, |_, (id, p)| {
        let list = retrieve(&scorer, p, &index, &cfg)?;
        Ok(with_id(id, list_json(p, &list)))
    })?;
    Ok(jsonl(out))
}

fn generate_cmd(cli: &Cli, a: &GenerateArgs) -> Outcome {
    let cfg = gen_config(&a.gen)?;
    let scorer = open_scorer(cli)?;
    let prompts = load_prompts(&scorer, &a.prompts)?;
    let out = par_map(cli.jobs, &prompts, |i, (id, p)| {
        let g = generate(&scorer, p, &seeded(&cfg, cli.seed, i))?;
        Ok(with_id(
            id,
            json!({
                "prompt": prompt_json(p),
                "tokens": g.tokens,
                "log_likelihood": g.cond,
                "truncated": g.truncated,
                "steps": g.steps,
            }),
        ))
    })?;
    Ok(jsonl(out))
}

fn unify_cmd(cli: &Cli, a: &UnifyArgs) -> Outcome {
    check_eta(a.proxy_args.eta)?;
    check_beam(&a.beam)?;
    let gen = gen_config(&a.gen)?;
    let index = Index::load(&a.index.index)?;
    let scorer = open_scorer(cli)?;
    let decision = match a.decision {
        DecisionArg::Reverse => ProxyConfig {
            length_normalize: a.proxy_args.length_normalize,
            ..ProxyConfig::reverse()
        },
        DecisionArg::Pmi => proxy_config(&scorer, ProxyKind::DebiasedPmi, &a.proxy_args)?,
    };
    let cfg = UnifyConfig {
        gen,
        retrieve: retrieve_config(&scorer, &a.beam, &a.proxy_args, a.top)?,
        decision,
    };
    let prompts = load_prompts(&scorer, &a.prompts)?;
    let out = par_map(cli.jobs, &prompts, |i, (id, p)| {
        let cfg = UnifyConfig {
            gen: seeded(&cfg.gen, cli.seed, i),
            ..cfg.clone()
        };
        let r = unify(&scorer, p, &index, &cfg)?;
        Ok(with_id(id, r.to_json(a.wall_clock)))
    })?;
    Ok(jsonl(out))
}

fn load_evalset<S: Scorer + ?Sized>(scorer: &S, a: &EvalSetArgs) -> std::result::Result<(Index, EvalSet), Failure> {
    let index = Index::load(&a.index.index)?;
    let queries = parse_evalset(&read(&a.evalset)?, scorer)?;
    let set = EvalSet::new(queries, &index.db)?;
    if set.is_empty() {
        return Err(Failure::Runtime(format!("{}: no queries", a.evalset.display())));
    }
    Ok((index, set))
}

fn recall(cli: &Cli, a: &RecallArgs) -> Outcome {
    check_eta(a.proxy_args.eta)?;
    check_beam(&a.beam)?;
    if a.ks.is_empty() || a.ks.contains(&0) {
        return usage("--ks must list positive cutoffs");
    }
    if a.method == RecallMethod::Retrieve && a.proxy.is_some() {
        return usage("--proxy applies to --method rank; use --beam-proxy for retrieval");
    }
    let scorer = open_scorer(cli)?;
    let (index, set) = load_evalset(&scorer, &a.set)?;
    let lists = match a.method {
        RecallMethod::Rank => {
            let kind = proxy_kind(a.proxy.unwrap_or(ProxyArg::Reverse));
            let cfg = proxy_config(&scorer, kind, &a.proxy_args)?;
            par_map(cli.jobs, set.queries(), |_, q| {
                exhaustive_rank(&scorer, &q.prompt, &index.db, &cfg)
            })?
        }
        RecallMethod::Retrieve => {
            let cfg = retrieve_config(&scorer, &a.beam, &a.proxy_args, None)?;
            par_map(cli.jobs, set.queries(), |_, q| {
                retrieve(&scorer, &q.prompt, &index, &cfg)
            })?
        }
    };
    let mut out = String::from("k,recall\n");
    for (k, r) in recall_at_k(&lists, &set, &a.ks)? {
        let _ = writeln!(out, "{k},{r:.6}");
    }
    Ok(out)
}

fn sweep_eta_cmd(cli: &Cli, a: &SweepEtaArgs) -> Outcome {
    for &eta in &a.etas {
        check_eta(eta)?;
    }
    let scorer = open_scorer(cli)?;
    let (index, set) = load_evalset(&scorer, &a.set)?;
    let null = null_prompt(&scorer, a.null_prompt)?;
    Ok(eta_csv(&sweep_eta(&scorer, &set, &index.db, &a.etas, &null)?))
}

fn sweep_beam_cmd(cli: &Cli, a: &SweepBeamArgs) -> Outcome {
    check_eta(a.proxy_args.eta)?;
    if a.beams.is_empty() || a.beams.contains(&0) {
        return usage("--beams must list positive widths");
    }
    let scorer = open_scorer(cli)?;
    let (index, set) = load_evalset(&scorer, &a.set)?;
    let beam = BeamArgs {
        beam: a.beams[0],
        beam_proxy: a.beam_proxy,
        max_steps: None,
        rrr: a.rrr,
    };
    let base = retrieve_config(&scorer, &beam, &a.proxy_args, None)?;
    Ok(beam_csv(&sweep_beam(&scorer, &set, &index, &a.beams, a.rrr, &base)?))
}

fn bench(cli: &Cli, a: &BenchArgs) -> Outcome {
    if a.sizes.is_empty() || a.sizes.contains(&0) || a.queries == 0 || a.beam == 0 || a.repeats == 0 {
        return usage("--sizes, --queries, --beam and --repeats must be positive");
    }
    if a.seq_len == 0 || a.dim == 0 {
        return usage("--seq-len and --dim must be positive");
    }
    let scorer: Box<dyn Scorer> = match cli.scorer {
        Some(_) => open_scorer(cli)?,
        None => Box::new(RandomScorer::new(64, 4, cli.seed, 1.0)),
    };
    let cfg = BenchConfig {
        db_sizes: a.sizes.clone(),
        seq_len: a.seq_len,
        queries: a.queries,
        beam: a.beam,
        max_steps: a.seq_len + 1,
        dim: a.dim,
        k: a.k,
        repeats: a.repeats,
        seed: cli.seed,
    };
    Ok(bench_csv(&bench_efficiency(&scorer, &cfg)?))
}

fn filter(a: &FilterArgs) -> Outcome {
    if !a.threshold.is_finite() {
        return usage("--threshold must be finite");
    }
    let records = parse_filtration(&read(&a.records)?)?;
    Ok(filter_benchmark(&records, a.threshold, a.top_n)
        .into_iter()
        .map(|id| id + "\n")
        .collect())
}

fn probe(cli: &Cli, a: &ProbeArgs) -> Outcome {
    let scorer = open_scorer(cli)?;
    let info = scorer.info().clone();
    let context = match &a.context {
        Some(c) => Prompt::parse(&scorer, c)?.tokens,
        None => vec![info.image_start],
    };
    let row = scorer
        .next_logprobs(std::slice::from_ref(&context))?
        .pop()
        .ok_or_else(|| Failure::Runtime("scorer returned no rows".into()))?;
    let lse = logsumexp(&row);
    let mut best: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
    best.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    best.truncate(5);
    let v = json!({
        "info": info,
        "context": context,
        "logsumexp": lse,
        "top": best.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect::<Vec<_>>(),
    });
    if lse.abs() > 1e-6 {
        return Err(Failure::Runtime(format!(
            "row is not normalized (logsumexp {lse}): {v}"
        )));
    }
    Ok(format!("{v}\n"))
}

fn serve(cli: &Cli, a: &ServeArgs) -> Outcome {
    let scorer: Arc<dyn Scorer> = Arc::from(open_scorer(cli)?);
    let io_err = |e: io::Error| Failure::Runtime(e.to_string());
    match &a.listen {
        None => {
            protocol::serve(scorer.as_ref(), io::stdin().lock(), io::stdout().lock()).map_err(io_err)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(io_err)?;
            eprintln!("listening on {}", listener.local_addr().map_err(io_err)?);
            for stream in listener.incoming() {
                let stream = stream.map_err(io_err)?;
                stream.set_nodelay(true).ok();
                let scorer = Arc::clone(&scorer);
                std::thread::spawn(move || {
                    let Ok(read_half) = stream.try_clone() else {
                        return;
                    };
                    if let Err(e) = protocol::serve(scorer.as_ref(), BufReader::new(read_half), stream) {
                        log::warn!("connection closed: {e}");
                    }
                });
            }
        }
    }
    Ok(String::new())
}
