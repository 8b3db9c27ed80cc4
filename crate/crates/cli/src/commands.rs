use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use nnmark_core::attacks::{collude_average, finetune_attack, prune_magnitude, PruneScope, DEFAULT_FINETUNE_LR};
use nnmark_core::codebook::{validate_bibd, AccCodebook, BibdParams, CodebookExport, CodebookSpec, IncidenceMatrix};
use nnmark_core::config::PipelineConfig;
use nnmark_core::detection::{
    correlation_scores, decode_codevector, detect_colluders, extract_fingerprint, identify_user,
};
use nnmark_core::evaluation::{
    render_report, resilience_level, run_collusion_sweep, run_finetune_sweep, run_pruning_sweep, AttackStack,
    MetricsReport, Population, ReportFormat, TrialConfig,
};
use nnmark_core::fingerprint::{fingerprint_for, OwnerKeys};
use nnmark_core::host::{accuracy, train_baseline, DataSplit, ToyHostModel};
use nnmark_core::marking::{embed_fingerprint, EmbedConfig};
use nnmark_core::registry::{default_registry_path, load_model, save_model, Assignment, RegistryRecord};
use nnmark_core::rng::derive_seed;

use crate::{
    AssignArgs, AttackArgs, AttackKindArg, Cli, CodebookCmd, Command, DetectArgs, EmbedArgs, ExportFormat,
    KeygenArgs, ModeArg, ReportArgs, ScopeArg, SimulateArgs, SpecArg, SweepKind, TrainArgs,
};

struct Ctx {
    seed: u64,
    config: PipelineConfig,
    registry: PathBuf,
}

impl Ctx {
    fn spec(&self, arg: &SpecArg) -> Result<CodebookSpec> {
        match &arg.spec {
            Some(s) => Ok(s.parse()?),
            None => Ok(self.config.codebook),
        }
    }

    fn load_registry(&self) -> Result<RegistryRecord> {
        RegistryRecord::load(&self.registry)
            .with_context(|| format!("loading registry {}", self.registry.display()))
    }

    fn data(&self) -> Result<DataSplit> {
        Ok(self.config.host.load_data()?)
    }

    fn tau(&self) -> f64 {
        self.config.detect.tau
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        config,
        registry: cli.registry.unwrap_or_else(default_registry_path),
    };
    match cli.command {
        Command::Codebook(cmd) => codebook(&ctx, cmd),
        Command::Keygen(args) => keygen(&ctx, args),
        Command::Assign(args) => assign(&ctx, args),
        Command::TrainBaseline(args) => train(&ctx, args),
        Command::Embed(args) => embed(&ctx, args),
        Command::Extract(args) => extract(&ctx, &args.model),
        Command::Identify(args) => identify(&ctx, args),
        Command::DetectColluders(args) => detect(&ctx, args),
        Command::Attack(args) => attack(&ctx, args),
        Command::Simulate(args) => simulate(&ctx, args),
        Command::Report(args) => report(args),
        Command::Verify => verify(&ctx),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn codebook_csv(book: &AccCodebook) -> String {
    let mut s = String::new();
    for i in 0..book.v() {
        let row: Vec<String> = (0..book.n()).map(|j| book.codevector_bit(i, j).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn codebook(ctx: &Ctx, cmd: CodebookCmd) -> Result<()> {
    match cmd {
        CodebookCmd::Construct(spec) => {
            let book = ctx.spec(&spec)?.build()?;
            print_json(&serde_json::to_value(book.export())?)
        }
        CodebookCmd::Validate { spec, file } => {
            let (name, report) = match file {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let export: CodebookExport = serde_json::from_str(&text)?;
                    let params = BibdParams::new(export.v, export.k, export.lambda)?;
                    let m = IncidenceMatrix::from_rows(params, export.construction.clone(), &export.incidence)?;
                    (export.construction, validate_bibd(&m))
                }
                None => {
                    let spec = ctx.spec(&SpecArg { spec })?;
                    let book = spec.build()?;
                    let Some(m) = book.incidence() else {
                        bail!("{spec} is not a block design");
                    };
                    (spec.to_string(), validate_bibd(m))
                }
            };
            print_json(&json!({ "codebook": name, "valid": report.is_valid(), "violations": report.violations }))?;
            if !report.is_valid() {
                bail!("{name} is not a valid BIBD");
            }
            Ok(())
        }
        CodebookCmd::Export { spec, format, out } => {
            let book = ctx.spec(&spec)?.build()?;
            let text = match format {
                ExportFormat::Json => serde_json::to_string_pretty(&book.export())? + "\n",
                ExportFormat::Csv => codebook_csv(&book),
            };
            write_output(Some(&out), &text)
        }
    }
}

fn keygen(ctx: &Ctx, args: KeygenArgs) -> Result<()> {
    if ctx.registry.exists() && !args.force {
        bail!("registry {} already exists (use --force to replace it)", ctx.registry.display());
    }
    let spec = ctx.spec(&args.spec)?;
    let record = RegistryRecord::new(args.owner, spec, ctx.seed, ctx.config.host.arch)?;
    record.save(&ctx.registry)?;
    let book = record.build_codebook()?;
    print_json(&json!({
        "registry": ctx.registry,
        "codebook": spec.to_string(),
        "v": book.v(),
        "users": book.n(),
        "master_seed": ctx.seed,
    }))
}

fn assign(ctx: &Ctx, args: AssignArgs) -> Result<()> {
    let request = match (args.count, args.users) {
        (Some(n), _) => Assignment::Count(n),
        (None, Some(users)) => Assignment::Users(users),
        (None, None) => unreachable!("clap requires one of --count/--users"),
    };
    let ids = RegistryRecord::update(&ctx.registry, |r| r.assign(request))?;
    print_json(&json!({ "assigned": ids }))
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let host = &ctx.config.host;
    let data = ctx.data()?;
    let model = ToyHostModel::new(host.arch, data.train.classes, ctx.seed)?;
    let epochs = args.epochs.unwrap_or(host.baseline_epochs);
    let (trained, history) = train_baseline(&model, &data, epochs, host.baseline_learning_rate, ctx.seed)?;
    let digest = save_model(&trained, &args.out)?;
    for h in &history {
        println!("{}", serde_json::to_string(h)?);
    }
    eprintln!("saved baseline to {} (sha256 {digest})", args.out.display());
    Ok(())
}

fn embed(ctx: &Ctx, args: EmbedArgs) -> Result<()> {
    let registry = ctx.load_registry()?;
    if registry.user(args.user).is_none() {
        bail!("user {} is not assigned in the registry", args.user);
    }
    let book = registry.build_codebook()?;
    let keys = registry.keys()?;
    let fingerprint = fingerprint_for(&keys.basis, &book, args.user)?;
    let baseline = load_model(&args.baseline)?;
    let data = ctx.data()?;
    let config = EmbedConfig {
        epochs: args.epochs.unwrap_or(ctx.config.embed.epochs),
        seed: derive_seed(ctx.seed, &[args.user as u64]),
        ..ctx.config.embed
    };
    let marked = embed_fingerprint(&baseline, &fingerprint, &keys, &config, &data)?;
    if let Some(log) = &args.log {
        let f = fs::File::create(log).with_context(|| format!("creating {}", log.display()))?;
        marked.write_log(std::io::BufWriter::new(f))?;
    }
    let digest = save_model(&marked.model, &args.out)?;
    let out = fs::canonicalize(&args.out).unwrap_or(args.out.clone());
    RegistryRecord::update(&ctx.registry, |r| {
        r.record_embedding(args.user, config, out.clone(), digest.clone(), marked.residual)
    })?;
    print_json(&json!({
        "user": args.user,
        "model": out,
        "sha256": digest,
        "residual": marked.residual,
        "max_deviation": marked.max_deviation,
        "test_accuracy": accuracy(&marked.model, &data.test)?,
    }))
}

fn scores(registry: &RegistryRecord, model: &Path) -> Result<(Vec<f64>, Vec<f64>, AccCodebook)> {
    let keys: OwnerKeys = registry.keys()?;
    let m = load_model(model)?;
    let f = extract_fingerprint(m.marked(), &keys.projection)?;
    let s = correlation_scores(&f, &keys.basis)?;
    Ok((f, s.values, registry.build_codebook()?))
}

fn extract(ctx: &Ctx, model: &Path) -> Result<()> {
    let (f, s, _) = scores(&ctx.load_registry()?, model)?;
    print_json(&json!({ "fingerprint": f, "scores": s }))
}

fn identify(ctx: &Ctx, args: DetectArgs) -> Result<()> {
    let (_, s, book) = scores(&ctx.load_registry()?, &args.model)?;
    let code = decode_codevector(&nnmark_core::CorrelationScores { values: s }, args.tau.unwrap_or(ctx.tau()));
    match identify_user(&code, &book) {
        Some(user) => print_json(&json!({ "status": "match", "user": user, "decoded_bits": code.bits })),
        None => print_json(&json!({
            "status": "no_match",
            "message": "no user matched",
            "decoded_bits": code.bits,
        })),
    }
}

fn detect(ctx: &Ctx, args: DetectArgs) -> Result<()> {
    let (_, s, book) = scores(&ctx.load_registry()?, &args.model)?;
    let code = decode_codevector(&nnmark_core::CorrelationScores { values: s }, args.tau.unwrap_or(ctx.tau()));
    let k_cap = args.k_cap.or(ctx.config.detect.k_cap).unwrap_or(book.resilience() + 2);
    let verdict = detect_colluders(&code, &book, k_cap)?;
    print_json(&serde_json::to_value(&verdict)?)
}

fn attack(ctx: &Ctx, args: AttackArgs) -> Result<()> {
    let models = args.models.iter().map(|p| load_model(p)).collect::<nnmark_core::Result<Vec<_>>>()?;
    let attacked = match args.kind {
        AttackKindArg::Collude => collude_average(&models.iter().collect::<Vec<_>>())?,
        AttackKindArg::Prune | AttackKindArg::Finetune if models.len() != 1 => {
            bail!("this attack takes exactly one --model")
        }
        AttackKindArg::Prune => {
            let scope = match args.scope {
                ScopeArg::Marked => PruneScope::MarkedLayer,
                ScopeArg::Global => PruneScope::Global,
            };
            prune_magnitude(&models[0], args.rate, scope)?
        }
        AttackKindArg::Finetune => finetune_attack(
            &models[0],
            &ctx.data()?,
            args.epochs.unwrap_or(nnmark_core::attacks::DEFAULT_FINETUNE_EPOCHS),
            args.lr.unwrap_or(DEFAULT_FINETUNE_LR),
            ctx.seed,
        )?,
    };
    let digest = save_model(&attacked, &args.out)?;
    print_json(&json!({ "kind": format!("{:?}", args.kind).to_lowercase(), "out": args.out, "sha256": digest }))
}

fn build_population(ctx: &Ctx, spec: CodebookSpec) -> Result<Population> {
    let host = &ctx.config.host;
    let data = ctx.data()?;
    let book = spec.build()?;
    let init = ToyHostModel::new(host.arch, data.train.classes, ctx.seed)?;
    let (baseline, _) = train_baseline(&init, &data, host.baseline_epochs, host.baseline_learning_rate, ctx.seed)?;
    let keys = OwnerKeys::generate(book.v(), host.arch.flat_len(), ctx.seed)?;
    eprintln!("embedding {} users ...", book.n());
    let embed = EmbedConfig { seed: ctx.seed, ..ctx.config.embed };
    Ok(Population::embed(book, keys, &baseline, data, &embed)?)
}

fn simulate(ctx: &Ctx, args: SimulateArgs) -> Result<()> {
    let spec = ctx.spec(&args.spec)?;
    let n = spec.build()?.n();
    let sim = ctx.config.simulate;
    let k_min = args.k_min.unwrap_or(sim.k_range.0).max(1);
    let k_max = args.k_max.unwrap_or(sim.k_range.1).min(n);
    if k_min > k_max {
        bail!("empty colluder range {k_min}..={k_max}");
    }
    let mode = args.mode.unwrap_or(match args.sweep {
        SweepKind::Collusion => ModeArg::Code,
        _ => ModeArg::Model,
    });
    if args.sweep != SweepKind::Collusion && mode == ModeArg::Code {
        bail!("{:?} sweeps need --mode model", args.sweep);
    }
    let trials = args.trials.unwrap_or(sim.trials);
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let mut cfg = match mode {
        ModeArg::Code => TrialConfig::code_level(spec, ks, trials, ctx.seed),
        ModeArg::Model => TrialConfig::model_level(spec, ks, trials, ctx.seed),
    };
    cfg.tau = ctx.tau();
    cfg.k_cap = ctx.config.detect.k_cap;

    let report = match args.sweep {
        SweepKind::Collusion => {
            let pop = match mode {
                ModeArg::Model => Some(build_population(ctx, spec)?),
                ModeArg::Code => None,
            };
            run_collusion_sweep(&cfg, pop.as_ref())?
        }
        SweepKind::Prune => {
            let pop = build_population(ctx, spec)?;
            let outcomes = run_pruning_sweep(&cfg, &pop, &args.rates)?;
            for o in &outcomes {
                eprintln!(
                    "rate {}: decode accuracy {:.4}, host accuracy {:.4}, K_max {}",
                    o.rate,
                    o.decode_accuracy,
                    o.host_accuracy,
                    resilience_level(&o.collusion)
                );
            }
            let mut merged: Option<MetricsReport> = None;
            for o in outcomes {
                match &mut merged {
                    Some(m) => m.rows.extend(o.collusion.rows),
                    None => merged = Some(o.collusion),
                }
            }
            merged.context("no pruning rates given")?
        }
        SweepKind::Finetune => {
            let pop = build_population(ctx, spec)?;
            cfg.attack = AttackStack { finetune_epochs: args.epochs, ..cfg.attack };
            let outcome = run_finetune_sweep(&cfg, &pop)?;
            eprintln!(
                "after fine-tuning: decode accuracy {:.4}, K_max {}",
                outcome.decode_accuracy, outcome.resilience_level
            );
            outcome.collusion
        }
    };
    eprintln!("resilience level K_max = {}", resilience_level(&report));
    let text = render_report(&report, report_format(args.format))?;
    write_output(args.out.as_deref(), &text)
}

fn report_format(f: ExportFormat) -> ReportFormat {
    match f {
        ExportFormat::Csv => ReportFormat::Csv,
        ExportFormat::Json => ReportFormat::Json,
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let report: MetricsReport = serde_json::from_str(&text)?;
    write_output(args.out.as_deref(), &render_report(&report, report_format(args.format))?)
}

fn verify(ctx: &Ctx) -> Result<()> {
    let registry = ctx.load_registry()?;
    let checked = registry.verify()?;
    print_json(&json!({ "verified": checked, "users": registry.users.len() }))
}
