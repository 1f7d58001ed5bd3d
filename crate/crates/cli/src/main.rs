//! `upt`: gradient oracles, pretraining, tuning, evaluation, merging and
//! ablation for the frozen-backbone dual encoder.
//!
//! Exit codes: 0 ok, 1 oracle failure, 2 usage, 3 fingerprint mismatch,
//! 4 corrupt archive, 5 state error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use upt_core::archive::{assemble, backbone_archive, delta_archive, merge_archives, WeightArchive};
use upt_core::config::RunConfig;
use upt_core::data::{generate_dataset, Corpus, Geometry, SyntheticSpec, Split};
use upt_core::encoder::partition_params;
use upt_core::oracle::run_suite;
use upt_core::report::{MetricsReport, ReportRow};
use upt_core::train::{evaluate_split, pretrain, transfer_from_backbone, tune, TUNE_SEED_SALT};
use upt_core::Error;

#[derive(Parser)]
#[command(name = "upt", version, about = "Frozen-backbone dual encoder with prefix, LoRA and layernorm-adapter tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gradient and equivalence oracle suites.
    Gradcheck(Common),
    /// Train a backbone on the base domain and write it to --out.
    Pretrain(Common),
    /// Tune attached modules on the downstream domain; writes a delta to --out.
    Tune(Common),
    /// Evaluate text-to-image retrieval on the downstream test split.
    Eval(Common),
    /// Fold LoRA of --backbone + --delta into a standalone archive at --out.
    Merge(Common),
    /// Tune every subset of {S-Prefix, LoRA, L-Adapter} across seeds.
    Ablate(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Fingerprint(_) => 3,
            Error::Corrupt(_) => 4,
            Error::State(_) => 5,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

struct Ctx {
    args: Common,
    cfg: RunConfig,
}

impl Ctx {
    fn new(args: Common) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        Ok(Self { args, cfg })
    }

    fn path(&self, flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
        flag.clone()
            .or_else(|| fallback.clone())
            .ok_or_else(|| usage(format!("--{name} is required")))
    }

    fn backbone(&self) -> CliResult<WeightArchive> {
        load_archive(&self.path(&self.args.backbone, &self.cfg.paths.backbone, "backbone")?)
    }

    fn delta(&self) -> CliResult<Option<WeightArchive>> {
        match self.args.delta.clone().or_else(|| self.cfg.paths.delta.clone()) {
            Some(p) => Ok(Some(load_archive(&p)?)),
            None => Ok(None),
        }
    }

    fn out(&self) -> Option<PathBuf> {
        self.args.out.clone().or_else(|| self.cfg.paths.out.clone())
    }

    fn corpus(&self, spec: &SyntheticSpec) -> CliResult<Corpus> {
        Ok(generate_dataset(spec, &Geometry::of(&self.cfg.model))?)
    }

    fn wall(&self, start: Instant) -> f64 {
        if self.cfg.report.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn emit(&self, report: &MetricsReport) -> CliResult<()> {
        if let Some(stem) = self.out() {
            report.write(&stem)?;
        }
        match self.args.format {
            Format::Csv => print!("{}", report.to_csv()?),
            Format::Json => print!("{}", report.to_json()?),
            Format::Both => {
                print!("{}", report.to_csv()?);
                print!("{}", report.to_json()?);
            }
        }
        Ok(())
    }
}

fn load_archive(path: &Path) -> CliResult<WeightArchive> {
    WeightArchive::load(path).map_err(|e| match e {
        Error::Io(io) => usage(format!("cannot read archive {}: {io}", path.display())),
        other => {
            let mut f = Failure::from(other);
            f.message = format!("{}: {}", path.display(), f.message);
            f
        }
    })
}

fn cmd_gradcheck(ctx: &Ctx) -> CliResult<()> {
    let report = run_suite(&ctx.cfg.gradcheck)?;
    if ctx.args.format != Format::Csv {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    if ctx.args.format != Format::Json {
        println!("class,tensors_checked,worst_rel_err");
        for c in &report.classes {
            println!("{},{},{:e}", c.class, c.tensors_checked, c.worst_rel_err);
        }
        println!("equivalence,instances,worst,tolerance");
        for e in &report.equivalences {
            println!("{},{},{:e},{:e}", e.name, e.instances, e.worst, e.tolerance);
        }
        println!("frozen_grads_zero,{}", report.frozen_grads_zero);
    }
    if let Some(stem) = ctx.out() {
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(Error::from)?;
    }
    if report.passed() {
        eprintln!("gradcheck: all classes below {:e}", report.tolerance);
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "gradcheck: oracle failure".into(),
        })
    }
}

fn cmd_pretrain(ctx: &Ctx) -> CliResult<()> {
    let out = ctx.path(&ctx.args.out, &ctx.cfg.paths.out, "out")?;
    let corpus = ctx.corpus(&ctx.cfg.pretrain_data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let (model, curve) = pretrain(&ctx.cfg.model, &corpus, &ctx.cfg.pretrain, &mut rng)?;
    backbone_archive(&model).save(&out)?;
    let in_domain = evaluate_split(&model, &corpus, Split::Test)?;
    eprintln!(
        "pretrain: {} epochs, loss {:.4} -> {:.4}, in-domain R@1 {:.4}; wrote {}",
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        in_domain.r1,
        out.display()
    );
    Ok(())
}

fn cmd_tune(ctx: &Ctx) -> CliResult<()> {
    let out = ctx.path(&ctx.args.out, &ctx.cfg.paths.out, "out")?;
    let backbone = ctx.backbone()?;
    if backbone.merged {
        return Err(Error::State("cannot tune a merged archive".into()).into());
    }
    let mut model = assemble(&ctx.cfg.model, &ctx.cfg.petl, &backbone, None)?;
    let corpus = ctx.corpus(&ctx.cfg.downstream_data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ TUNE_SEED_SALT);
    let curve = tune(&mut model, &ctx.cfg.petl, &corpus, &ctx.cfg.tune, &mut rng)?;
    let delta = delta_archive(&model, &backbone);
    delta.save(&out)?;
    eprintln!(
        "tune: {} epochs, {} trainable tensors ({} values); wrote {}",
        curve.len(),
        delta.tensors.len(),
        partition_params(&model).trainable_count(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> CliResult<()> {
    let start = Instant::now();
    let backbone = ctx.backbone()?;
    let delta = ctx.delta()?;
    let model = assemble(&ctx.cfg.model, &ctx.cfg.petl, &backbone, delta.as_ref())?;
    let corpus = ctx.corpus(&ctx.cfg.downstream_data)?;
    let metrics = evaluate_split(&model, &corpus, Split::Test)?;
    let mut report = MetricsReport::new("eval", &ctx.cfg)?;
    let petl = if delta.is_some() || backbone.merged {
        ctx.cfg.petl.clone()
    } else {
        upt_core::block::PetlConfig::disabled()
    };
    let partition = partition_params(&model);
    report.rows.push(ReportRow::new("eval", ctx.cfg.seed, &petl, &partition, &metrics, ctx.wall(start)));
    ctx.emit(&report)
}

fn cmd_merge(ctx: &Ctx) -> CliResult<()> {
    let out = ctx.path(&ctx.args.out, &ctx.cfg.paths.out, "out")?;
    let backbone = ctx.backbone()?;
    if backbone.merged {
        return Err(Error::State("backbone archive is already merged".into()).into());
    }
    let delta = ctx
        .delta()?
        .ok_or_else(|| usage("--delta is required"))?;
    let merged = merge_archives(&ctx.cfg.model, &ctx.cfg.petl, &backbone, &delta)?;
    merged.save(&out)?;
    eprintln!("merge: wrote {} tensors to {}", merged.tensors.len(), out.display());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let base = ctx.corpus(&cfg.pretrain_data)?;
    let downstream = ctx.corpus(&cfg.downstream_data)?;
    let subsets: Vec<_> = (0..8u8)
        .map(|bits| cfg.petl.with_toggles(bits & 4 != 0, bits & 2 != 0, bits & 1 != 0))
        .collect();
    let seeds: Vec<u64> = cfg.seeds().collect();
    let mut per_seed = Vec::new();
    let mut sums = vec![[0.0f64; 5]; subsets.len()];
    let mut partitions = vec![None; subsets.len()];
    for &seed in &seeds {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (backbone, _) = pretrain(&cfg.model, &base, &cfg.pretrain, &mut rng)?;
        for (i, petl) in subsets.iter().enumerate() {
            let t = Instant::now();
            let (_, outcome) = transfer_from_backbone(&backbone, &downstream, petl, &cfg.tune, seed ^ TUNE_SEED_SALT)?;
            let m = &outcome.tuned;
            for (s, v) in sums[i].iter_mut().zip([m.r1, m.r5, m.r10, m.map, ctx.wall(t)]) {
                *s += v;
            }
            partitions[i] = Some(outcome.partition.clone());
            eprintln!(
                "ablate: seed {seed} subset {i:03b} zero-shot R@1 {:.4} tuned R@1 {:.4}",
                outcome.zero_shot.r1, m.r1
            );
            per_seed.push(serde_json::json!({
                "seed": seed,
                "subset": format!("{i:03b}"),
                "zero_shot": outcome.zero_shot,
                "tuned": outcome.tuned,
            }));
        }
        let _ = ctx.wall(start);
    }
    let mut report = MetricsReport::new("ablate", cfg)?;
    let n = seeds.len() as f64;
    for (i, petl) in subsets.iter().enumerate() {
        let [r1, r5, r10, map, wall] = sums[i].map(|s| s / n);
        let metrics = upt_core::metrics::RetrievalResult {
            r1,
            r5,
            r10,
            map,
            first_hit_ranks: Vec::new(),
        };
        let partition = partitions[i].clone().expect("every subset ran");
        report
            .rows
            .push(ReportRow::new(format!("ablate-{i:03b}"), cfg.seed, petl, &partition, &metrics, wall));
    }
    report.detail = serde_json::json!({ "seeds": seeds, "runs": per_seed });
    ctx.emit(&report)
}

fn run(cli: Cli) -> CliResult<()> {
    let (args, f): (Common, fn(&Ctx) -> CliResult<()>) = match cli.command {
        Command::Gradcheck(a) => (a, cmd_gradcheck),
        Command::Pretrain(a) => (a, cmd_pretrain),
        Command::Tune(a) => (a, cmd_tune),
        Command::Eval(a) => (a, cmd_eval),
        Command::Merge(a) => (a, cmd_merge),
        Command::Ablate(a) => (a, cmd_ablate),
    };
    f(&Ctx::new(args)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("upt: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
