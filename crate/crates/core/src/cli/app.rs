use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mix_seed, oracle_generate, rng_for, Dataset, Oracle, OracleConfig};
use crate::networks::{count_params_flops, NoiseTensor, PredictorConfig};
use crate::selection::{
    candidate_noise, distribution_stats, pcc_matrix, prompt_effect, prompt_prior, select_noises,
    selection_uplift, SelectionRequest, UpliftParams,
};
use crate::training::{evaluate, evaluate_prior, train_with, Checkpoint, TrainConfig};

use super::log::{self, LogRecord};
use super::store;
use super::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "paine", version, about = "Noise-conditioned preference-score predictor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an oracle dataset.
    GenData(GenDataArgs),
    /// Train a predictor and write the best checkpoint.
    Train(TrainArgs),
    /// Score metrics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Prompt-level accuracy of the masked-noise prior.
    EvalPrior(EvalArgs),
    /// Pick the best noises for a prompt.
    Select(SelectArgs),
    /// Print the prior mean score of a prompt.
    Prior(PriorArgs),
    /// Per-prompt score moments and correlation matrices of a dataset.
    Stats(StatsArgs),
    /// Measure selection uplift against the oracle's noise-free scores.
    Uplift(UpliftArgs),
    /// Parameter and FLOP counts per layer.
    Flops(FlopsArgs),
    /// Wall-clock scoring latency.
    Bench(BenchArgs),
    /// Write one dataset prompt as a prompt-embedding file.
    ExportPrompt(ExportPromptArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// OracleConfig JSON; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub noises: Option<usize>,
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Training config file: both sections optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub predictor: Option<PredictorConfig>,
    pub train: Option<TrainConfig>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PriorArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prompts whose score series enter the correlation matrix.
    #[arg(long, default_value_t = 8)]
    pub pcc_prompts: usize,
}

#[derive(Args, Debug)]
pub struct UpliftArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// OracleConfig JSON of the oracle the checkpoint was trained against.
    #[arg(long)]
    pub oracle: PathBuf,
    /// Fresh prompts drawn from the oracle.
    #[arg(long, default_value_t = 200)]
    pub prompts: usize,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// PredictorConfig JSON; the reduced reference config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ExportPromptArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prompt_id: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn digest_json<T: Serialize>(v: &T) -> String {
    let text = serde_json::to_string(v).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn print_json<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    writeln!(out, "{text}").map_err(|e| CliError::usage(format!("stdout: {e}")))
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: OracleConfig = match &a.config {
        Some(p) => store::read_json(p)?,
        None => OracleConfig::default(),
    };
    if let Some(v) = a.prompts {
        cfg.prompt_count = v;
    }
    if let Some(v) = a.noises {
        cfg.noises_per_prompt = v;
    }
    if let Some(v) = a.label_noise {
        cfg.label_noise_std = v;
    }
    let ds = oracle_generate(&cfg, a.seed)?;
    store::save_dataset(&ds, &a.out, a.force)?;
    writeln!(
        out,
        "wrote {} samples over {} prompts to {}",
        ds.len(),
        cfg.prompt_count,
        a.out.display()
    )
    .map_err(|e| CliError::usage(format!("stdout: {e}")))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let file: TrainFile = match &a.config {
        Some(p) => store::read_json(p)?,
        None => TrainFile::default(),
    };
    let ds = store::load_dataset(&a.data)?;
    let m = ds.manifest();
    let pred_cfg = PredictorConfig {
        prompt_streams: m.prompt_streams.clone(),
        noise_shape: m.noise_shape,
        ..file.predictor.unwrap_or_else(PredictorConfig::reduced)
    };
    let mut cfg = file.train.unwrap_or_default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let config_digest = digest_json(&(&pred_cfg, &cfg));
    let mut records = Vec::new();
    let (ckpt, report) = train_with(&ds, &pred_cfg, &cfg, |rec| {
        records.push(LogRecord::new("train", Some(rec.epoch), "train_loss", rec.train_loss, cfg.seed, &config_digest));
        for (name, v) in [
            ("val_srcc_global", rec.val.srcc_global),
            ("val_srcc_macro", rec.val.srcc_macro),
            ("val_mae_raw", rec.val.mae_raw),
            ("val_ndcg3_macro", rec.val.ndcg3_macro),
            ("lr", rec.lr),
        ] {
            records.push(LogRecord::new("train", Some(rec.epoch), name, v, cfg.seed, &config_digest));
        }
    })?;
    store::save_checkpoint(&ckpt, &a.out, a.force)?;
    if let Some(path) = &a.log {
        log::append(path, &records)?;
    }
    print_json(out, &serde_json::json!({
        "best_epoch": report.best_epoch,
        "best_val_srcc": report.best_val_srcc,
        "epochs": report.history.len(),
        "stop_reason": report.stop_reason,
        "checkpoint_digest": ckpt.digest(),
    }))
}

fn pick_split(ckpt: &Checkpoint, ds: &Dataset, which: SplitName) -> Result<Dataset> {
    if let SplitName::All = which {
        return Ok(ds.clone());
    }
    let s = ckpt.split(ds)?;
    Ok(match which {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
        SplitName::All => unreachable!("handled above"),
    })
}

fn eval_cmd(a: EvalArgs, prior: bool, out: &mut dyn Write) -> Result<()> {
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    let ds = store::load_dataset(&a.data)?;
    if ds.manifest().oracle_digest != ckpt.provenance.oracle_digest {
        return Err(CliError {
            kind: super::ExitKind::Data,
            message: "dataset oracle digest differs from the checkpoint's".into(),
        });
    }
    let split = pick_split(&ckpt, &ds, a.split)?;
    let digest = ckpt.digest();
    let seed = ckpt.train.seed;
    let (command, metrics): (&str, Vec<(&str, f64)>) = if prior {
        let m = evaluate_prior(&ckpt, &split)?;
        print_json(out, &m)?;
        ("eval-prior", vec![("prior_srcc", m.srcc), ("prior_mae", m.mae), ("prior_mape", m.mape)])
    } else {
        let m = evaluate(&ckpt, &split)?;
        print_json(out, &m)?;
        (
            "eval",
            vec![
                ("srcc_global", m.srcc_global),
                ("srcc_macro", m.srcc_macro),
                ("mae_raw", m.mae_raw),
                ("ndcg3_macro", m.ndcg3_macro),
            ],
        )
    };
    if let Some(path) = &a.log {
        let recs: Vec<LogRecord> = metrics
            .into_iter()
            .map(|(k, v)| LogRecord::new(command, None, k, v, seed, &digest))
            .collect();
        log::append(path, &recs)?;
    }
    Ok(())
}

fn select_cmd(a: SelectArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    let prompt = store::load_prompt(&a.prompt)?;
    let req = SelectionRequest::new(prompt, a.n, a.b, a.seed)?;
    let res = select_noises(&ckpt, &req)?;
    store::save_selection(&res, &a.out, a.force)?;
    let summary: Vec<_> = res
        .selected
        .iter()
        .map(|s| serde_json::json!({"candidate_index": s.index, "predicted_score_raw": s.predicted_score_raw}))
        .collect();
    print_json(out, &summary)
}

fn prior_cmd(a: PriorArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    let prompt = store::load_prompt(&a.prompt)?;
    print_json(out, &prompt_prior(&ckpt, &prompt)?)
}

fn stats_cmd(a: StatsArgs, out: &mut dyn Write) -> Result<()> {
    let ds = store::load_dataset(&a.data)?;
    let samples = ds.samples();
    let groups: Vec<(u64, Vec<f64>)> = ds
        .groups()
        .into_iter()
        .map(|(p, idx)| (p, idx.iter().map(|&i| samples[i].score_raw).collect()))
        .collect();
    let stats = distribution_stats(&groups)?;
    let effect = prompt_effect(&stats)?;
    let series: Vec<Vec<f64>> = groups
        .iter()
        .take(a.pcc_prompts)
        .map(|(_, s)| s.clone())
        .collect();
    let pcc = pcc_matrix(&series)?;
    print_json(out, &serde_json::json!({
        "prompt_effect": effect,
        "pcc_prompts": pcc,
        "prompts": stats,
    }))
}

fn uplift_cmd(a: UpliftArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    let cfg: OracleConfig = store::read_json(&a.oracle)?;
    let oracle = Oracle::new(cfg.clone())?;
    let prompts: Vec<_> = (0..a.prompts as u64)
        .map(|p| oracle.sample_prompt(&mut rng_for(&[a.seed, UPLIFT_PROMPT_TAG, p])))
        .collect();
    let params = UpliftParams {
        n: a.n,
        b: a.b,
        trials: a.trials,
        seed: a.seed,
    };
    let report = selection_uplift(&ckpt, &cfg, &prompts, params)?;
    if let Some(path) = &a.log {
        let digest = ckpt.digest();
        let recs: Vec<LogRecord> = [
            ("mean_selected_true", report.mean_selected_true),
            ("mean_random_true", report.mean_random_true),
            ("mean_best_true", report.mean_best_true),
            ("mean_best_predicted", report.mean_best_predicted),
            ("recovered_fraction", report.recovered_fraction),
            ("p_value", report.p_value),
        ]
        .into_iter()
        .map(|(k, v)| LogRecord::new("uplift", None, k, v, a.seed, &digest))
        .collect();
        log::append(path, &recs)?;
    }
    print_json(out, &serde_json::json!({
        "n": a.n,
        "b": a.b,
        "prompt_trials": report.prompt_trials,
        "mean_selected_true": report.mean_selected_true,
        "mean_random_true": report.mean_random_true,
        "mean_best_true": report.mean_best_true,
        "mean_best_predicted": report.mean_best_predicted,
        "recovered_fraction": report.recovered_fraction,
        "mean_uplift": report.mean_uplift,
        "t_statistic": report.t_statistic,
        "p_value": report.p_value,
    }))
}

/// Separates uplift prompts from dataset prompts generated with the same seed.
const UPLIFT_PROMPT_TAG: u64 = 0x0f7e;

fn flops_cmd(a: FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg: PredictorConfig = match &a.config {
        Some(p) => store::read_json(p)?,
        None => PredictorConfig::reduced(),
    };
    let acc = count_params_flops(&cfg)?;
    let w = |out: &mut dyn Write, line: String| {
        writeln!(out, "{line}").map_err(|e| CliError::usage(format!("stdout: {e}")))
    };
    w(out, format!("{:<32} {:>14} {:>16}", "layer", "params", "flops"))?;
    for l in &acc.layers {
        w(out, format!("{:<32} {:>14} {:>16}", l.name, l.params, l.flops))?;
    }
    w(out, format!("{:<32} {:>14} {:>16}", "total", acc.params, acc.flops))
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    if a.n == 0 || a.repeats == 0 {
        return Err(CliError::usage("n and repeats must be positive"));
    }
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.model.config();
    let mut rng = rng_for(&[a.seed, 0xbe7c]);
    let streams = cfg
        .prompt_streams
        .iter()
        .map(|s| {
            let data = (0..s.tok * s.d_tok)
                .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            crate::autograd::Tensor::new(vec![s.tok, s.d_tok], data)
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(crate::networks::NetworkError::from)?;
    let prompt = crate::networks::PromptEmbedding::new(streams)?;
    let seed = mix_seed(&[a.seed, 0xbe7c]);
    let noises: Vec<NoiseTensor> = (0..a.n as u64)
        .map(|i| candidate_noise(seed, cfg.noise_shape, i))
        .collect();
    let refs: Vec<&NoiseTensor> = noises.iter().collect();
    let mut times = Vec::with_capacity(a.repeats);
    for _ in 0..a.repeats {
        let t0 = Instant::now();
        ckpt.model.predict_many(&prompt, &refs)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    print_json(out, &serde_json::json!({
        "n": a.n,
        "repeats": a.repeats,
        "median_ms": times[times.len() / 2],
        "min_ms": times[0],
        "threads": rayon::current_num_threads(),
    }))
}

fn export_prompt_cmd(a: ExportPromptArgs, out: &mut dyn Write) -> Result<()> {
    let ds = store::load_dataset(&a.data)?;
    let sub = ds.subset(&BTreeSet::from([a.prompt_id]));
    let s = sub
        .samples()
        .first()
        .ok_or_else(|| CliError::usage(format!("prompt {} not in dataset", a.prompt_id)))?;
    store::save_prompt(&s.prompt, &a.out)?;
    writeln!(out, "wrote prompt {} to {}", a.prompt_id, a.out.display())
        .map_err(|e| CliError::usage(format!("stdout: {e}")))
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, false, out),
        Command::EvalPrior(a) => eval_cmd(a, true, out),
        Command::Select(a) => select_cmd(a, out),
        Command::Prior(a) => prior_cmd(a, out),
        Command::Stats(a) => stats_cmd(a, out),
        Command::Uplift(a) => uplift_cmd(a, out),
        Command::Flops(a) => flops_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::ExportPrompt(a) => export_prompt_cmd(a, out),
    }
}

/// Parses `args`, runs the command and returns the exit code. Errors go to
/// `err` as one `error: <class>: <reason>` line.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    super::ExitKind::Usage.code()
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {line}");
            e.kind.code()
        }
    }
}
