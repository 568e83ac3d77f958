//! Command-line surface.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "genret",
    version,
    about = "Generative text-to-image retrieval and generation"
)]
pub struct Cli {
    /// Scorer backend: toy:<table>, stdio:<command>, tcp:<host:port>,
    /// synth:biased, synth:caption or synth:random[:<vocab>]
    #[arg(long, global = true, env = "TIGER_SCORER")]
    pub scorer: Option<String>,

    /// Seed for every random choice (sampling, synthetic scorers, benchmarks)
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; prompts are processed in parallel, each one sequentially
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// File of key=value lines giving defaults for long flags; explicit flags win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Write output here instead of standard output
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Reply timeout for external scorers, in milliseconds
    #[arg(long, global = true, default_value_t = 30_000)]
    pub timeout_ms: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build or inspect an image token index
    #[command(subcommand)]
    Index(IndexCommand),
    /// Rank every stored image with one proxy
    Rank(RankArgs),
    /// Trie-constrained beam search with optional reverse re-ranking
    Retrieve(RetrieveArgs),
    /// Unconstrained generation of a visual token sequence
    Generate(GenerateArgs),
    /// Generate and retrieve together, then keep the better of the two
    Unify(UnifyArgs),
    /// Metrics, sweeps, benchmarks and filtration
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Talk to or expose a scorer over the wire protocol
    #[command(subcommand)]
    Scorer(ScorerCommand),
}

#[derive(Subcommand, Debug)]
pub enum IndexCommand {
    /// Validate `id<TAB>tokens` lines and write a canonical index
    Build(IndexBuildArgs),
    /// Print a JSON summary of an index
    Inspect(IndexArg),
}

#[derive(Args, Debug)]
pub struct IndexBuildArgs {
    /// Input lines `id<TAB>tokens[<TAB>key=value...]`, headers optional
    #[arg(long)]
    pub input: PathBuf,
    /// Vocabulary size when the input has no header (else taken from --scorer)
    #[arg(long)]
    pub vocab_size: Option<u32>,
    /// End-of-image token when the input has no header (else taken from --scorer)
    #[arg(long)]
    pub image_end: Option<u32>,
}

#[derive(Args, Debug)]
pub struct IndexArg {
    /// Index file
    #[arg(long)]
    pub index: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct PromptArgs {
    /// One prompt; all-integer text is read as token ids
    #[arg(long)]
    pub prompt: Option<String>,
    /// File of prompts, one per line, optionally `id<TAB>prompt`
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProxyArg {
    Forward,
    Pmi,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BeamProxyArg {
    Forward,
    Pmi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecisionArg {
    Reverse,
    Pmi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NullPromptArg {
    /// No prompt tokens at all
    Empty,
    /// The tokenized phrase "Can you give me an image?"
    Phrase,
}

#[derive(Args, Debug)]
pub struct ProxyArgs {
    /// Debiasing strength for the pmi proxy
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// Null prompt behind the pmi prior
    #[arg(long, value_enum, default_value_t = NullPromptArg::Empty)]
    pub null_prompt: NullPromptArg,
    /// Divide every score by the number of scored positions
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub length_normalize: bool,
}

#[derive(Args, Debug)]
pub struct BeamArgs {
    /// Beam width of the constrained search
    #[arg(long, default_value_t = 800)]
    pub beam: usize,
    /// Proxy driving the constrained search
    #[arg(long, value_enum, default_value_t = BeamProxyArg::Pmi)]
    pub beam_proxy: BeamProxyArg,
    /// Search depth cap (default: longest stored sequence)
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Re-rank beam results with the reverse proxy
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub rrr: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenModeArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Decoding strategy for unconstrained generation
    #[arg(long, value_enum, default_value_t = GenModeArg::Greedy)]
    pub mode: GenModeArg,
    /// Beam width for --mode beam
    #[arg(long)]
    pub gen_beam: Option<usize>,
    /// Softmax temperature for --mode sample
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Keep only the k most likely tokens for --mode sample
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Generation length cap; image_end is appended on truncation
    #[arg(long, default_value_t = 32)]
    pub gen_max_steps: usize,
    /// Allow any token, not just visual tokens and image_end
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub unrestricted: bool,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    pub index: IndexArg,
    #[command(flatten)]
    pub prompts: PromptArgs,
    /// Similarity proxy
    #[arg(long, value_enum, default_value_t = ProxyArg::Reverse)]
    pub proxy: ProxyArg,
    #[command(flatten)]
    pub proxy_args: ProxyArgs,
    /// Keep only the first N results
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub index: IndexArg,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub beam: BeamArgs,
    #[command(flatten)]
    pub proxy_args: ProxyArgs,
    /// Keep only the first N results
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub gen: GenArgs,
}

#[derive(Args, Debug)]
pub struct UnifyArgs {
    #[command(flatten)]
    pub index: IndexArg,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub beam: BeamArgs,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub proxy_args: ProxyArgs,
    /// Proxy used to compare the generated and the retrieved image
    #[arg(long, value_enum, default_value_t = DecisionArg::Reverse)]
    pub decision: DecisionArg,
    /// Keep only the first N retrieved results in the output
    #[arg(long)]
    pub top: Option<usize>,
    /// Add wall-clock timings (output is then no longer reproducible)
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub wall_clock: bool,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Recall@K of exhaustive ranking or beam retrieval on an eval set
    Recall(RecallArgs),
    /// Recall of debiased PMI across eta values
    SweepEta(SweepEtaArgs),
    /// Recall of beam retrieval across beam widths
    SweepBeam(SweepBeamArgs),
    /// Throughput of beam retrieval against brute-force dense ranking
    Bench(BenchArgs),
    /// Select benchmark prompts from external agreement scores
    Filter(FilterArgs),
}

#[derive(Args, Debug)]
pub struct EvalSetArgs {
    #[command(flatten)]
    pub index: IndexArg,
    /// Lines `prompt_id<TAB>image_id<TAB>prompt`
    #[arg(long)]
    pub evalset: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RecallMethod {
    Rank,
    Retrieve,
}

#[derive(Args, Debug)]
pub struct RecallArgs {
    #[command(flatten)]
    pub set: EvalSetArgs,
    /// Exhaustive ranking or beam retrieval
    #[arg(long, value_enum, default_value_t = RecallMethod::Retrieve)]
    pub method: RecallMethod,
    /// Proxy for --method rank
    #[arg(long, value_enum)]
    pub proxy: Option<ProxyArg>,
    #[command(flatten)]
    pub beam: BeamArgs,
    #[command(flatten)]
    pub proxy_args: ProxyArgs,
    /// Comma-separated cutoffs
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct SweepEtaArgs {
    #[command(flatten)]
    pub set: EvalSetArgs,
    /// Comma-separated eta grid
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,1.5,2")]
    pub etas: Vec<f64>,
    /// Null prompt behind the prior
    #[arg(long, value_enum, default_value_t = NullPromptArg::Empty)]
    pub null_prompt: NullPromptArg,
}

#[derive(Args, Debug)]
pub struct SweepBeamArgs {
    #[command(flatten)]
    pub set: EvalSetArgs,
    /// Comma-separated beam widths
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    pub beams: Vec<usize>,
    /// Proxy driving the constrained search
    #[arg(long, value_enum, default_value_t = BeamProxyArg::Pmi)]
    pub beam_proxy: BeamProxyArg,
    /// Re-rank beam results with the reverse proxy
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub rrr: bool,
    #[command(flatten)]
    pub proxy_args: ProxyArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated database sizes
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    pub sizes: Vec<usize>,
    /// Visual tokens per synthetic image
    #[arg(long, default_value_t = 7)]
    pub seq_len: usize,
    /// Prompts per database size
    #[arg(long, default_value_t = 32)]
    pub queries: usize,
    /// Beam width of the constrained search
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    /// Embedding width of the dense baseline
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Results kept by the dense baseline
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Timing repetitions; the fastest is reported
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Lines `prompt_id<TAB>s_gt<TAB>s_gen`
    #[arg(long)]
    pub records: PathBuf,
    /// Drop records whose ground-truth score is below this
    #[arg(long, default_value_t = 30.0)]
    pub threshold: f64,
    /// Number of prompt ids to keep
    #[arg(long, default_value_t = 1000)]
    pub top_n: usize,
}

#[derive(Subcommand, Debug)]
pub enum ScorerCommand {
    /// Handshake with the scorer and check one next-token distribution
    Probe(ProbeArgs),
    /// Serve the selected scorer over stdio, or over TCP with --listen
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Context to score (token ids or text); defaults to image_start alone
    #[arg(long)]
    pub context: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Accept TCP connections on this address instead of using stdio
    #[arg(long)]
    pub listen: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn walk(cmd: &clap::Command, path: &str, out: &mut Vec<String>) {
        for arg in cmd.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            if arg.get_help().is_none() {
                out.push(format!("{path} --{id}"));
            }
        }
        for sub in cmd.get_subcommands() {
            assert!(
                sub.get_about().is_some(),
                "{path} {} lacks a description",
                sub.get_name()
            );
            walk(sub, &format!("{path} {}", sub.get_name()), out);
        }
    }

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_is_documented() {
        let mut missing = Vec::new();
        walk(&Cli::command(), "genret", &mut missing);
        assert!(missing.is_empty(), "undocumented flags: {missing:?}");
    }
}
