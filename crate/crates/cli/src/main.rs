//! `histoselect` command-line tool.

mod data;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use histoselect::baselines::{
    diversity_select, random_select, retrieval_f1, similarity_select, RetrievalScore, StrategyId,
};
use histoselect::export::{
    heatmap_pgm, labels_csv, labels_ppm, mask_pgm, SelectionSummary,
};
use histoselect::objective::BetaSchedule;
use histoselect::oracle::{gradcheck, GradCheckConfig};
use histoselect::segmentation::{relevance_heatmap, segment};
use histoselect::selector::{
    group_budgets, group_rates, patch_scores, select, SelectorParams, DEFAULT_HIDDEN,
};
use histoselect::training::{
    forward_prepared, rates_per_slide, train_prepared, Cap, Optimizer, PreparedSlide,
    TrainConfig,
};
use histoselect::wsi_data::{
    generate_synthetic, generate_with_basis, load_bundle, load_prompts, load_question,
    save_bundle, save_prompts, save_question, SyntheticBasis, SyntheticSlide, SyntheticSpec,
};

use data::{load_dataset, out_dir, require_prompts, require_truth, write};

#[derive(Parser)]
#[command(name = "histoselect", version, about = "Question-guided hierarchical patch selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slides from a SyntheticSpec JSON file.
    Gen(GenArgs),
    /// Assign every patch to its nearest tissue prompt.
    Segment(SegmentArgs),
    /// Run hierarchical selection on one slide.
    Select(SelectArgs),
    /// Train selector parameters on a dataset directory.
    Train(TrainArgs),
    /// Retrieval F1 of selection strategies across budgets.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Patch-question cosine relevance map.
    Heatmap(HeatmapArgs),
    /// Per-slide group sampling rates under trained parameters.
    Rates(RatesArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of slides. Above 1, slides share one embedding basis and go
    /// to `slide_NNNN/` subdirectories with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BudgetArgs {
    /// Global token budget: a fraction of N in (0, 1], or a count with --absolute.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long, requires = "budget")]
    absolute: bool,
}

impl BudgetArgs {
    fn cap(&self) -> Result<Option<Cap>> {
        let Some(b) = self.budget else {
            return Ok(None);
        };
        if self.absolute {
            if !(b >= 1.0 && b.fract() == 0.0 && b <= u32::MAX as f64) {
                bail!("--budget with --absolute must be a positive integer, got {b}");
            }
            Ok(Some(Cap::Absolute(b as usize)))
        } else {
            if !(b > 0.0 && b <= 1.0) {
                bail!("--budget must be a fraction in (0, 1], got {b}");
            }
            Ok(Some(Cap::Fraction(b)))
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    question: PathBuf,
    /// Trained parameters; zero parameters (uniform rates and scores) when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Hidden width of the zero parameters used without --params.
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    /// Warm up to beta_g = 0.2, beta_p = 0.1.
    Default,
    /// Warm up to beta_g = 0.1, beta_p = 0.2.
    Swapped,
    /// Both betas zero.
    Disabled,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig JSON; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    warmup_iters: Option<u64>,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "random,diversity,similarity")]
    strategies: Vec<StrategyId>,
    /// Budget fractions of N, or counts with --absolute.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3")]
    budgets: Vec<f64>,
    #[arg(long)]
    absolute: bool,
    /// Random-selection trials per budget; deterministic strategies run once.
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// First trial seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trained parameters, required by the learned strategy.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    question: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Select(a) => cmd_select(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Heatmap(a) => cmd_heatmap(&a),
        Command::Rates(a) => cmd_rates(&a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `HSEL_THREADS` caps the worker pool; 0 or unset leaves it automatic.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HSEL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("HSEL_THREADS must be a count, got {raw:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_params(path: &Path) -> Result<SelectorParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SelectorParams::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_slide(dir: &Path, slide: &SyntheticSlide) -> Result<()> {
    save_bundle(&slide.bundle, dir.join(data::BUNDLE_FILE))?;
    save_prompts(&slide.prompts, dir.join(data::PROMPTS_FILE))?;
    save_question(&slide.question, dir.join(data::QUESTION_FILE))?;
    write(
        dir.join("truth.csv"),
        labels_csv(slide.bundle.coords(), &slide.truth.true_labels)?,
    )?;
    write(
        dir.join(data::TRUTH_FILE),
        serde_json::to_string_pretty(&slide.truth)? + "\n",
    )
}

fn cmd_gen(a: &GenArgs) -> Result<bool> {
    let spec: SyntheticSpec = read_json(&a.spec)?;
    spec.validate()
        .with_context(|| format!("invalid spec {}", a.spec.display()))?;
    let out = out_dir(&a.out)?;
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    if a.count == 1 {
        write_slide(out, &generate_synthetic(&spec)?)?;
        return Ok(true);
    }
    let basis = SyntheticBasis::draw(spec.dim, spec.m_tissues, spec.n_classes, spec.seed)?;
    let slides = (0..a.count)
        .into_par_iter()
        .map(|i| generate_with_basis(&spec.with_seed(spec.seed.wrapping_add(i)), &basis))
        .collect::<histoselect::Result<Vec<_>>>()?;
    for (i, slide) in slides.iter().enumerate() {
        let dir = out_dir(&out.join(format!("slide_{i:04}")))?.to_path_buf();
        write_slide(&dir, slide)?;
    }
    Ok(true)
}

fn cmd_segment(a: &SegmentArgs) -> Result<bool> {
    let bundle = load_bundle(&a.bundle)?;
    let prompts = load_prompts(&a.prompts)?;
    let partition = segment(&bundle, &prompts)?;
    let out = out_dir(&a.out)?;
    write(out.join("labels.csv"), labels_csv(bundle.coords(), partition.labels())?)?;
    write(out.join("labels.ppm"), labels_ppm(bundle.coords(), partition.labels())?)?;
    Ok(true)
}

fn cmd_select(a: &SelectArgs) -> Result<bool> {
    let bundle = load_bundle(&a.bundle)?;
    let prompts = load_prompts(&a.prompts)?;
    let question = load_question(&a.question)?;
    let params = match &a.params {
        Some(p) => read_params(p)?,
        None => SelectorParams::zeros(bundle.dim(), a.hidden, question.n_classes()),
    };
    let cap = a
        .budget
        .cap()?
        .map(|c| c.resolve(bundle.n_patches()))
        .transpose()?;
    let partition = segment(&bundle, &prompts)?;
    let rates = group_rates(&partition, &question, &params)?;
    let scores = patch_scores(&bundle, &question, &params)?;
    let budgets = group_budgets(&rates, &partition.group_sizes())?;
    let result = select(&partition, &rates, &scores, &budgets, cap)?;
    let out = out_dir(&a.out)?;
    write(
        out.join("selection.json"),
        SelectionSummary::new(&result, cap).to_json()? + "\n",
    )?;
    let all = vec![true; bundle.n_patches()];
    write(out.join("mask_before.pgm"), mask_pgm(bundle.coords(), &all)?)?;
    write(out.join("mask.pgm"), mask_pgm(bundle.coords(), &result.hard_mask)?)?;
    Ok(true)
}

fn cmd_train(a: &TrainArgs) -> Result<bool> {
    let slides = load_dataset(&a.data)?;
    let first = &slides[0];
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::new(first.bundle.dim(), first.question.n_classes()),
    };
    if let Some(v) = a.iters {
        cfg.iters = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    match a.optimizer {
        Some(OptimizerArg::Adam) => cfg.optimizer = Optimizer::adam(),
        Some(OptimizerArg::Sgd) => cfg.optimizer = Optimizer::Sgd,
        None => {}
    }
    match a.schedule {
        Some(ScheduleArg::Default) => cfg.schedule = BetaSchedule::default(),
        Some(ScheduleArg::Swapped) => cfg.schedule = BetaSchedule::swapped_targets(),
        Some(ScheduleArg::Disabled) => cfg.schedule = BetaSchedule::disabled(),
        None => {}
    }
    if let Some(w) = a.warmup_iters {
        cfg.schedule.warmup_iters = w;
    }
    if let Some(cap) = a.budget.cap()? {
        cfg.cap = Some(cap);
    }
    cfg.validate().context("invalid training configuration")?;
    for s in &slides {
        if s.bundle.dim() != cfg.dim || s.question.n_classes() != cfg.classes {
            bail!(
                "slide {} has d={}, C={} but the configuration expects d={}, C={}",
                s.name,
                s.bundle.dim(),
                s.question.n_classes(),
                cfg.dim,
                cfg.classes
            );
        }
    }
    let prepared = slides
        .iter()
        .map(|s| {
            PreparedSlide::new(&s.bundle, require_prompts(s)?, &s.question)
                .with_context(|| format!("preparing slide {}", s.name))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_prepared(&prepared, &cfg)?;
    let out = out_dir(&a.out)?;
    write(out.join("params.json"), outcome.params.to_json()? + "\n")?;
    write(out.join("history.csv"), outcome.history_csv())?;
    Ok(true)
}

struct BenchRow {
    strategy: StrategyId,
    budget: f64,
    trial_seed: u64,
    score: RetrievalScore,
}

fn mean_score(scores: &[RetrievalScore]) -> RetrievalScore {
    let n = scores.len() as f64;
    RetrievalScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<bool> {
    let slides = load_dataset(&a.data)?;
    if a.strategies.is_empty() || a.budgets.is_empty() {
        bail!("--strategies and --budgets must be nonempty");
    }
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let params = match &a.params {
        Some(p) => Some(read_params(p)?),
        None if a.strategies.contains(&StrategyId::Learned) => {
            bail!("the learned strategy needs --params")
        }
        None => None,
    };
    let caps = a
        .budgets
        .iter()
        .map(|&b| {
            BudgetArgs {
                budget: Some(b),
                absolute: a.absolute,
            }
            .cap()
            .map(|c| (b, c.expect("budget given")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut budgets_per_slide = Vec::with_capacity(slides.len());
    for s in &slides {
        require_truth(s)?;
        let n = s.bundle.n_patches();
        let ks = caps
            .iter()
            .map(|(_, c)| {
                let k = c.resolve(n)?;
                if k > n {
                    bail!("budget {k} exceeds the {n} patches of slide {}", s.name);
                }
                Ok(k)
            })
            .collect::<Result<Vec<_>>>()?;
        budgets_per_slide.push(ks);
    }
    let prepared = match &params {
        Some(p) => Some(
            slides
                .iter()
                .map(|s| {
                    if s.bundle.dim() != p.dim || s.question.n_classes() != p.classes {
                        bail!("--params dims differ from slide {}", s.name);
                    }
                    Ok(PreparedSlide::new(&s.bundle, require_prompts(s)?, &s.question)?)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let mut rows = Vec::new();
    for &strategy in &a.strategies {
        for (b_idx, &(budget, _)) in caps.iter().enumerate() {
            let trials = if strategy == StrategyId::Random { a.trials } else { 1 };
            let scored: Vec<BenchRow> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let trial_seed = a.seed.wrapping_add(t);
                    let per_slide = slides
                        .iter()
                        .enumerate()
                        .map(|(s_idx, s)| {
                            let k = budgets_per_slide[s_idx][b_idx];
                            let n = s.bundle.n_patches();
                            let selected = match strategy {
                                StrategyId::Random => {
                                    random_select(n, k, trial_seed.wrapping_add(s_idx as u64 * 0x9E37_79B9))?
                                }
                                StrategyId::Diversity => diversity_select(&s.bundle, k)?,
                                StrategyId::Similarity => similarity_select(&s.bundle, &s.question, k)?,
                                StrategyId::Learned => {
                                    let p = params.as_ref().expect("checked above");
                                    let prep = &prepared.as_ref().expect("checked above")[s_idx];
                                    let mut cfg = TrainConfig::new(p.dim, p.classes);
                                    cfg.hidden = p.group_net.hidden();
                                    cfg.cap = Some(Cap::Absolute(k));
                                    forward_prepared(prep, p, &cfg, 0)?.0.selected
                                }
                            };
                            let truth = s.truth.as_ref().expect("checked above");
                            Ok(retrieval_f1(&selected, &truth.relevant_mask)?)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(BenchRow {
                        strategy,
                        budget,
                        trial_seed,
                        score: mean_score(&per_slide),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.extend(scored);
        }
    }
    let mut csv = String::from("strategy,budget_fraction,trial_seed,precision,recall,f1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy, r.budget, r.trial_seed, r.score.precision, r.score.recall, r.score.f1
        ));
    }
    let out = out_dir(&a.out)?;
    write(out.join("bench.csv"), csv)?;
    Ok(true)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let reports = (0..a.seeds)
        .into_par_iter()
        .map(|i| {
            gradcheck(&GradCheckConfig {
                seed: a.seed.wrapping_add(i),
                ..GradCheckConfig::default()
            })
        })
        .collect::<histoselect::Result<Vec<_>>>()?;
    let passed = reports.iter().all(|r| r.passed);
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    let out = out_dir(&a.out)?;
    write(out.join("gradcheck.json"), json + "\n")?;
    for r in reports.iter().filter(|r| !r.passed) {
        eprintln!(
            "gradcheck failed for seed {}: max relative error {:e} in {}[{}]",
            r.seed, r.max_rel_error, r.worst.block, r.worst.index
        );
    }
    Ok(passed)
}

fn cmd_heatmap(a: &HeatmapArgs) -> Result<bool> {
    let bundle = load_bundle(&a.bundle)?;
    let question = load_question(&a.question)?;
    let values = relevance_heatmap(&bundle, &question)?;
    let out = out_dir(&a.out)?;
    write(out.join("heatmap.pgm"), heatmap_pgm(bundle.coords(), &values)?)?;
    Ok(true)
}

fn cmd_rates(a: &RatesArgs) -> Result<bool> {
    let slides = load_dataset(&a.data)?;
    let params = read_params(&a.params)?;
    let prepared = slides
        .iter()
        .map(|s| Ok(PreparedSlide::new(&s.bundle, require_prompts(s)?, &s.question)?))
        .collect::<Result<Vec<_>>>()?;
    let rates = rates_per_slide(&prepared, &params)?;
    let m = rates.iter().map(Vec::len).max().unwrap_or(0);
    let mut csv = String::from("slide");
    for j in 0..m {
        csv.push_str(&format!(",r_{j}"));
    }
    csv.push('\n');
    for (s, r) in slides.iter().zip(&rates) {
        csv.push_str(&s.name);
        for v in r {
            csv.push(',');
            if let Some(v) = v {
                csv.push_str(&v.to_string());
            }
        }
        csv.push('\n');
    }
    let out = out_dir(&a.out)?;
    write(out.join("rates.csv"), csv)?;
    Ok(true)
}
