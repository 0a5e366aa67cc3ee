use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxgeom::actdump::{self, ContextKind};
use ctxgeom::contextgen::{self, ContextInput, GeneratorResources, Lexicon, SaladTemplates};
use ctxgeom::geometry::MagnitudeMode;
use ctxgeom::lens::LensMode;
use ctxgeom::probes::ProbeFamily;
use ctxgeom::promptkit;
use ctxgeom::report::{self, LayerSelection, OutputFormat, RunConfig, Sections, SyntheticSpec};
use ctxgeom::stats::Alternative;
use ctxgeom::Exec;

#[derive(Parser)]
#[command(name = "ctxgeom", version, about = "Truth-vector geometry under context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Angle or magnitude curves across layers.
    Analyze {
        #[arg(value_enum)]
        what: AnalyzeTarget,
        #[command(flatten)]
        common: Common,
        /// Report ‖v‖/‖v_nc‖ instead of the squared ratio.
        #[arg(long)]
        unsquared: bool,
    },
    /// Per-layer probe accuracy curves.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of mass_mean, logistic_regression, linear_svm, mlp.
        #[arg(long, value_delimiter = ',')]
        families: Vec<String>,
        /// Context condition the probes are trained on.
        #[arg(long, default_value = "none")]
        context: String,
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
    },
    /// Logit-lens choice probabilities and their correlation with geometry.
    Lens {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = LensModeArg::Ratio)]
        mode: LensModeArg,
        /// Apply the bundle's final normalization before unembedding.
        #[arg(long)]
        final_norm: bool,
    },
    /// Relevant-vs-random comparison tables.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = AlternativeArg::Greater)]
        alternative: AlternativeArg,
    },
    /// Every section in one run.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = LensModeArg::Ratio)]
        lens_mode: LensModeArg,
        #[arg(long)]
        final_norm: bool,
    },
    /// Write a synthetic dump with planted geometry, plus a matching unembedding.
    Synth(SynthArgs),
    /// Random-context generation.
    Contextgen(ContextgenArgs),
    /// Build prompt quads from a statements JSONL file.
    Prompts(PromptsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeTarget {
    Theta,
    Magnitude,
}

#[derive(Clone, Copy, ValueEnum)]
enum LensModeArg {
    Ratio,
    Difference,
}

impl From<LensModeArg> for LensMode {
    fn from(m: LensModeArg) -> Self {
        match m {
            LensModeArg::Ratio => LensMode::Ratio,
            LensModeArg::Difference => LensMode::Difference,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlternativeArg {
    Greater,
    Less,
    TwoSided,
}

impl From<AlternativeArg> for Alternative {
    fn from(a: AlternativeArg) -> Self {
        match a {
            AlternativeArg::Greater => Alternative::Greater,
            AlternativeArg::Less => Alternative::Less,
            AlternativeArg::TwoSided => Alternative::TwoSided,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    unembed: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// csv, json or both.
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Tests per quantity for the Bonferroni threshold.
    #[arg(long)]
    bonferroni_n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layers for comparison tables: final, all, N or A-B (1-based).
    #[arg(long, default_value = "final")]
    layers: LayerSelection,
    /// Dataset name written into tables.
    #[arg(long, default_value = "dataset")]
    dataset: String,
    /// Keep statements whose prompts did not follow instructions.
    #[arg(long)]
    no_filter: bool,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn config(&self, sections: Sections) -> RunConfig {
        RunConfig {
            dump: Some(self.dump.clone()),
            unembed: self.unembed.clone(),
            out_dir: self.out.clone(),
            dataset: self.dataset.clone(),
            format: self.format,
            sections,
            alpha: self.alpha,
            bonferroni_n: self.bonferroni_n,
            seed: self.seed,
            layers: self.layers,
            filter_instruction: !self.no_filter,
            exec: if self.sequential { Exec::Sequential } else { Exec::default() },
            ..RunConfig::default()
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    statements: usize,
    #[arg(long = "n-layers", default_value_t = 30)]
    n_layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Constant planted angle in degrees. Without it a three-phase curve is planted.
    #[arg(long)]
    theta: Option<f64>,
    /// Constant planted magnitude ratio, used with --theta.
    #[arg(long, default_value_t = 1.0)]
    rm: f64,
    /// Noise norm relative to the no-context truth vector.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
}

#[derive(Args)]
struct ContextgenArgs {
    /// char, word, salad, wiki or shuffle.
    #[arg(long)]
    kind: String,
    /// JSONL rows with statement_id and context.
    #[arg(long = "in")]
    input: PathBuf,
    /// One word per line, optionally followed by a part-of-speech tag.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptsArgs {
    /// JSONL rows with statement_id, statement, choices, ground_truth and optional context.
    #[arg(long = "in")]
    input: PathBuf,
    /// Template file; the built-in template is used when absent.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run_analysis(config: &RunConfig) -> Result<()> {
    let dump = config.dump.as_ref().expect("dump is a required flag");
    let set = actdump::read_dump(dump).with_context(|| format!("reading {}", dump.display()))?;
    let bundle = match &config.unembed {
        Some(p) => Some(actdump::read_unembedding(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let report = report::analyze(&set, bundle.as_ref(), config)?;
    let files = report::write_report(&report, &config.out_dir, config.format)?;
    eprintln!(
        "{} statements used of {}, {} files written to {}",
        report.manifest.n_statements_used,
        report.manifest.n_statements_total,
        files.len(),
        config.out_dir.display()
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match args.theta {
        Some(theta) => SyntheticSpec::constant(args.statements, args.n_layers, args.dim, theta, args.rm),
        None => SyntheticSpec::three_phase(args.statements, args.n_layers, args.dim),
    };
    if let Some(noise) = args.noise {
        spec.noise_rel = noise;
    }
    let set = report::gen_synthetic(&spec, args.seed)?;
    let bundle = report::synthetic_unembedding(args.vocab, args.dim, args.seed.wrapping_add(1))?;
    fs::create_dir_all(&args.out)?;
    actdump::write_dump(&set, args.out.join("synthetic.tvd"))?;
    actdump::write_unembedding(&bundle, args.out.join("unembed.tvd"))?;
    let spec_json = serde_json::to_vec_pretty(&spec)?;
    fs::write(args.out.join("spec.json"), spec_json)?;
    eprintln!("wrote synthetic.tvd, unembed.tvd and spec.json to {}", args.out.display());
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn contextgen_cmd(args: &ContextgenArgs) -> Result<()> {
    let Some(kind) = ContextKind::from_short_name(&args.kind).filter(|k| ContextKind::RANDOM.contains(k)) else {
        bail!("unknown kind {:?}; expected char, word, salad, wiki or shuffle", args.kind);
    };
    let inputs: Vec<ContextInput> = read_jsonl(&args.input)?;
    let lexicon = match &args.lexicon {
        Some(p) => Lexicon::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => Lexicon::default(),
    };
    let corpus = match &args.corpus {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let resources = GeneratorResources { lexicon, templates: SaladTemplates::default(), corpus };
    let records = contextgen::generate(kind, &inputs, &resources, args.seed, Exec::default())?;
    write_jsonl(&args.out, &records)?;
    let texts: Vec<&str> = records.iter().map(|r| r.context.as_str()).collect();
    if let Ok(stats) = contextgen::corpus_stats(&texts) {
        eprintln!(
            "{} records, mean words {:.2}, mean Flesch {:.2}",
            stats.n_rows, stats.mean_words, stats.flesch
        );
    }
    Ok(())
}

fn prompts_cmd(args: &PromptsArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let records = promptkit::parse_statements(&text)?;
    let template = match &args.template {
        Some(p) => fs::read_to_string(p)?,
        None => promptkit::DEFAULT_TEMPLATE.to_string(),
    };
    let quads = records
        .iter()
        .enumerate()
        .map(|(i, r)| promptkit::build_quad_for(r, &template, args.seed ^ i as u64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_jsonl(&args.out, &quads)?;
    eprintln!("{} prompt quads written to {}", quads.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Analyze { what, common, unsquared } => {
            let sections = match what {
                AnalyzeTarget::Theta => Sections { theta: true, ..Sections::NONE },
                AnalyzeTarget::Magnitude => Sections { magnitude: true, ..Sections::NONE },
            };
            let mut config = common.config(sections);
            if unsquared {
                config.magnitude_mode = MagnitudeMode::Unsquared;
            }
            run_analysis(&config)
        }
        Command::Probe { common, families, context, split_ratio } => {
            let mut config = common.config(Sections { probes: true, ..Sections::NONE });
            if !families.is_empty() {
                config.probe_families = families
                    .iter()
                    .map(|f| ProbeFamily::from_name(f).with_context(|| format!("unknown probe family {f:?}")))
                    .collect::<Result<_>>()?;
            }
            config.probe_context =
                ContextKind::from_short_name(&context).with_context(|| format!("unknown context {context:?}"))?;
            config.split_ratio = split_ratio;
            run_analysis(&config)
        }
        Command::Lens { common, mode, final_norm } => {
            if common.unembed.is_none() {
                bail!("lens needs --unembed");
            }
            let mut config = common.config(Sections { lens: true, ..Sections::NONE });
            config.lens_mode = mode.into();
            config.lens_final_norm = final_norm;
            run_analysis(&config)
        }
        Command::Compare { common, alternative } => {
            let mut config = common.config(Sections { compare: true, ..Sections::NONE });
            config.alternative = alternative.into();
            run_analysis(&config)
        }
        Command::Report { common, lens_mode, final_norm } => {
            let mut config = common.config(Sections::ALL);
            config.lens_mode = lens_mode.into();
            config.lens_final_norm = final_norm;
            run_analysis(&config)
        }
        Command::Synth(args) => synth(&args),
        Command::Contextgen(args) => contextgen_cmd(&args),
        Command::Prompts(args) => prompts_cmd(&args),
    }
}
