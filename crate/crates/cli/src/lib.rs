//! The `pdi` command: prompt decomposition, generation, gradient checking,
//! benchmark scoring and attention dumps.

pub mod manifest;
pub mod output;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdi_core::denoiser::{sample_init, CapturedAttention, ModelDims};
use pdi_core::io::{latent_bytes, map_to_grey, mask_pgm, write_pgm, RgbImage};
use pdi_core::mask::BinaryMask;
use pdi_core::nurse::{gradient_check, NurseContext, NurseSubject};
use pdi_core::pdi::{run_observed, RunOutput, StepEvent};
use pdi_core::prompt::{decompose, parse_prompt, DecompositionConfig, PromptPlan};
use pdi_core::scb::{self, ImageReport, ScbPrompt, ToyEmbedder};
use pdi_core::PdiError;

use manifest::RunManifest;
use output::Tree;

pub const SEED_ENV: &str = "DPP_SEED";
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Parse(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<PdiError> for CliError {
    fn from(e: PdiError) -> Self {
        match e {
            PdiError::Parse { .. } | PdiError::ParseInput(_) => Self::Parse(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Numeric(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "pdi", version, about = "Progressive detail injection on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the sub-prompt plan as index, sub-prompt, subject.
    Decompose {
        #[arg(long)]
        prompt: String,
        #[arg(long, value_enum, default_value = "B")]
        config: ConfigArg,
    },
    /// Run the multi-branch sampler and write a run directory.
    Generate(GenerateArgs),
    /// Compare the analytic refinement gradient with finite differences.
    NurseCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "a red teddy bear wearing a green tracksuit")]
        prompt: String,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Score images of the style benchmark.
    EvalScb {
        /// Directory of `<prompt index>.ppm` images.
        #[arg(long)]
        images: PathBuf,
        /// Box file shared by all images, or a directory of `<prompt index>.tsv`.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus file, one prompt per line; defaults to the seeded corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the benchmark prompt corpus.
    ScbCorpus {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a generate directory and write attention maps of one branch at one step.
    DumpAttn {
        #[arg(long)]
        run: PathBuf,
        /// Sub-prompt index of the branch.
        #[arg(long)]
        branch: usize,
        /// Timestep `t` of the forward pass, from the step count down to 1.
        #[arg(long)]
        step: usize,
        /// Defaults to `<run>/attn/b<branch>_t<step>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfigArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
    #[value(name = "C", alias = "c")]
    C,
    #[value(name = "D", alias = "d")]
    D,
    #[value(name = "accum", alias = "accumulative")]
    Accum,
}

impl From<ConfigArg> for DecompositionConfig {
    fn from(c: ConfigArg) -> Self {
        match c {
            ConfigArg::A => Self::A,
            ConfigArg::B => Self::B,
            ConfigArg::C => Self::C,
            ConfigArg::D => Self::D,
            ConfigArg::Accum => Self::Accumulative,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskSourceArg {
    Branch,
    First,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Start from a saved run manifest; explicit flags override its values.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long, value_enum)]
    config: Option<ConfigArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    share_frac: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Gradient steps per nursed timestep; 0 disables nursing.
    #[arg(long)]
    nurse_steps: Option<usize>,
    /// Number of leading timesteps with nursing.
    #[arg(long)]
    nurse_window: Option<usize>,
    #[arg(long, value_enum)]
    mask_source: Option<MaskSourceArg>,
    /// Latent height and width.
    #[arg(long)]
    size: Option<usize>,
    /// Write every intermediate latent under `trace/`.
    #[arg(long)]
    trace: bool,
    /// Run branch forwards concurrently; outputs are unchanged.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the command line and returns the process exit code. Diagnostics go
/// to standard error, results to `stdout`.
pub fn dispatch<I, T>(args: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if shown { 0 } else { 1 };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pdi: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    let emit = |stdout: &mut dyn std::io::Write, text: &str| {
        stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Numeric(format!("stdout: {e}")))
    };
    match command {
        Command::Decompose { prompt, config } => {
            let plan = decompose(&parse_prompt(&prompt)?, config.into());
            emit(stdout, &plan.to_tsv())
        }
        Command::Generate(args) => {
            let summary = generate(args)?;
            emit(stdout, &summary)
        }
        Command::NurseCheck {
            seed,
            prompt,
            size,
            coords,
            eps,
            lambda,
        } => {
            let seed = resolve_seed(seed, None)?;
            let err = nurse_check(seed, &prompt, size, coords, eps, lambda)?;
            emit(stdout, &format!("max relative error: {err:.6e}\n"))?;
            if err <= GRADIENT_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient check failed: {err:.3e} exceeds {GRADIENT_TOLERANCE:e}"
                )))
            }
        }
        Command::EvalScb {
            images,
            boxes,
            out,
            corpus,
            seed,
        } => {
            let summary = eval_scb(&images, &boxes, &out, corpus.as_deref(), seed)?;
            emit(stdout, &summary)
        }
        Command::ScbCorpus { seed, out } => {
            let text = scb::corpus_text(&scb::build_benchmark(resolve_seed(seed, None)?));
            match out {
                Some(path) => output::write_file(&path, text.as_bytes()).map_err(io_err(&path)),
                None => emit(stdout, &text),
            }
        }
        Command::DumpAttn {
            run,
            branch,
            step,
            out,
        } => {
            let out = out.unwrap_or_else(|| run.join("attn").join(format!("b{branch}_t{step}")));
            let written = dump_attn(&run, branch, step, &out)?;
            emit(stdout, &format!("wrote {written} files to {}\n", out.display()))
        }
    }
}

/// Flag, then manifest, then the environment, then zero.
fn resolve_seed(flag: Option<u64>, manifest: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(manifest) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    RunManifest::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
}

fn build_manifest(args: &GenerateArgs) -> Result<RunManifest, CliError> {
    let base = match &args.manifest {
        Some(path) => Some(read_manifest(path)?),
        None => None,
    };
    let seed = resolve_seed(args.seed, base.as_ref().map(|m| m.seed))?;
    let mut m = base.unwrap_or_default();
    m.seed = seed;
    if let Some(p) = &args.prompt {
        m.prompt = p.clone();
    }
    if m.prompt.is_empty() {
        return Err(CliError::Usage("generate needs --prompt or --manifest".into()));
    }
    macro_rules! overlay {
        ($($field:ident <- $arg:expr),* $(,)?) => {
            $(if let Some(v) = $arg { m.$field = v; })*
        };
    }
    overlay!(
        model_seed <- args.model_seed,
        steps <- args.steps,
        share_fraction <- args.share_frac,
        tau <- args.tau,
        lambda <- args.lambda,
        alpha <- args.alpha,
        nurse_steps <- args.nurse_steps,
        nurse_window <- args.nurse_window,
        height <- args.size,
        width <- args.size,
    );
    if let Some(c) = args.config {
        m.decomposition = DecompositionConfig::from(c).to_string();
    }
    if let Some(s) = args.mask_source {
        m.mask_source = match s {
            MaskSourceArg::Branch => "branch",
            MaskSourceArg::First => "first",
        }
        .into();
    }
    m.trace |= args.trace;
    m.versions = manifest::versions();
    Ok(m)
}

fn plan_for(m: &RunManifest) -> Result<PromptPlan, CliError> {
    Ok(decompose(&parse_prompt(&m.prompt)?, m.decomposition()?))
}

fn generate(args: GenerateArgs) -> Result<String, CliError> {
    let m = build_manifest(&args)?;
    let plan = plan_for(&m)?;
    let cfg = m.config(args.parallel)?;
    let out = run_observed(&plan, &cfg, m.seed, &mut |_| {})?;
    let tree = run_tree(&m, &plan, &out);
    let files = tree.len();
    tree.commit(&args.out).map_err(io_err(&args.out))?;
    Ok(format!(
        "{} branches, {} steps, wrote {files} files to {}\n",
        plan.branches.len(),
        cfg.steps,
        args.out.display()
    ))
}

/// Every file of a run directory.
pub fn run_tree(m: &RunManifest, plan: &PromptPlan, out: &RunOutput) -> Tree {
    let mut tree = Tree::default();
    tree.add("manifest.json", m.to_json());
    tree.add("plan.tsv", plan.to_tsv());
    for (b, z) in plan.branches.iter().zip(&out.branches) {
        tree.add(format!("branches/b{}.dpl", b.index), latent_bytes(z));
    }
    tree.add("output.dpl", latent_bytes(out.output()));
    tree.add("output.ppm", RgbImage::from_latent(out.output()).to_ppm());
    let mut losses = String::from("t,branch,align,entropy,total\n");
    for r in &out.trace.losses {
        let _ = writeln!(losses, "{},{},{},{},{}", r.t, r.branch, r.align, r.entropy, r.total);
    }
    tree.add("losses.csv", losses);
    let mut masks = String::from("t,branch,ones,degenerate\n");
    for r in &out.trace.masks {
        let _ = writeln!(masks, "{},{},{},{}", r.t, r.branch, r.ones, u8::from(r.degenerate));
    }
    tree.add("masks.csv", masks);
    for e in &out.trace.latents {
        tree.add(format!("trace/b{}_t{}.dpl", e.branch, e.t), latent_bytes(&e.latent));
    }
    tree
}

/// Max relative error of the refinement gradient at `size × size`.
pub fn nurse_check(
    seed: u64,
    prompt: &str,
    size: usize,
    coords: usize,
    eps: f64,
    lambda: f64,
) -> Result<f64, CliError> {
    let plan = decompose(&parse_prompt(prompt)?, DecompositionConfig::A);
    let last = plan.branches.last().expect("plan has branches");
    let cfg = pdi_core::pdi::PdiConfig {
        dims: ModelDims::with_resolution(size, size),
        model_seed: seed,
        ..Default::default()
    };
    let den = cfg.denoiser()?;
    let tokens = den.embed(&last.tokens)?;
    let subjects: Vec<NurseSubject> = plan
        .entities
        .iter()
        .zip(&last.entity_spans)
        .map(|(text, span)| NurseSubject {
            text: text.clone(),
            span: span.clone(),
        })
        .collect();
    let ctx = NurseContext {
        denoiser: &den,
        prompt: &tokens,
        subjects: &subjects,
        sa_override: None,
    };
    let z = sample_init(seed, den.dims())?;
    Ok(gradient_check(&ctx, &z, lambda, coords, eps, seed)?.max_relative_error)
}

fn eval_scb(
    images: &Path,
    boxes: &Path,
    out: &Path,
    corpus: Option<&Path>,
    seed: Option<u64>,
) -> Result<String, CliError> {
    let prompts = match corpus {
        Some(path) => scb::parse_corpus(&fs::read_to_string(path).map_err(io_err(path))?)?,
        None => scb::build_benchmark(resolve_seed(seed, None)?),
    };
    let shared_boxes = if boxes.is_dir() {
        None
    } else {
        Some(scb::parse_boxes(&fs::read_to_string(boxes).map_err(io_err(boxes))?)?)
    };
    let mut entries: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(images).map_err(io_err(images))? {
        let path = entry.map_err(io_err(images))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index: usize = stem.parse().map_err(|_| {
            CliError::Usage(format!("{}: image names must be prompt indices", path.display()))
        })?;
        entries.push((index, path));
    }
    entries.sort();
    let embedder = ToyEmbedder;
    let mut rows: Vec<(usize, ImageReport)> = Vec::new();
    for (index, path) in entries {
        let prompt: &ScbPrompt = prompts.get(index).ok_or_else(|| {
            CliError::Usage(format!("image {index} has no prompt among {}", prompts.len()))
        })?;
        let image = RgbImage::from_ppm(&fs::read(&path).map_err(io_err(&path))?)?;
        let own;
        let image_boxes = match &shared_boxes {
            Some(b) => b,
            None => {
                let file = boxes.join(format!("{index}.tsv"));
                own = if file.exists() {
                    scb::parse_boxes(&fs::read_to_string(&file).map_err(io_err(&file))?)?
                } else {
                    Vec::new()
                };
                &own
            }
        };
        rows.push((index, scb::score_image(&image, prompt, image_boxes, &embedder)?));
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("no .ppm images in {}", images.display())));
    }
    output::write_file(out, scb::report_csv(&rows).as_bytes()).map_err(io_err(out))?;
    let missing = rows.iter().filter(|(_, r)| r.has_missing()).count();
    let mut summary = format!("scored {} images", rows.len());
    if missing > 0 {
        let _ = write!(summary, ", {missing} with missing components");
    }
    summary.push('\n');
    Ok(summary)
}

fn dump_attn(run: &Path, branch: usize, step: usize, out: &Path) -> Result<usize, CliError> {
    let m = read_manifest(&run.join("manifest.json"))?;
    let plan = plan_for(&m)?;
    let tokens = plan
        .branch_by_index(branch)
        .ok_or_else(|| {
            let valid: Vec<String> = plan.branches.iter().map(|b| b.index.to_string()).collect();
            CliError::Numeric(format!("no branch {branch} (have {})", valid.join(", ")))
        })?
        .tokens
        .clone();
    let mut cfg = m.config(false)?;
    if step == 0 || step > cfg.steps {
        return Err(CliError::Numeric(format!("step {step} outside 1..={}", cfg.steps)));
    }
    cfg.record_latents = false;
    let mut captured: Option<CapturedAttention> = None;
    let mut mask: Option<BinaryMask> = None;
    let result = run_observed(&plan, &cfg, m.seed, &mut |ev| match ev {
        StepEvent::Attention { t, branch: b, captured: c } if t == step && b == branch => {
            captured = Some(c.clone());
        }
        StepEvent::Mask { t, branch: b, mask: k } if t == step && b == branch => {
            mask = Some(k.clone());
        }
        _ => {}
    })?;
    if let Ok(stored) = fs::read(run.join("output.dpl")) {
        if stored != latent_bytes(result.output()) {
            return Err(CliError::Numeric(format!(
                "{} does not reproduce from its manifest",
                run.display()
            )));
        }
    }
    let captured = captured.expect("every branch is observed at every step");
    let (h, w) = (cfg.dims.height, cfg.dims.width);
    let mut tree = Tree::default();
    let pgm = |width: usize, height: usize, values: &[f64]| {
        let mut buf = Vec::new();
        write_pgm(&mut buf, width, height, &map_to_grey(values)).expect("in-memory write");
        buf
    };
    for (l, m) in captured.self_maps.iter().enumerate() {
        tree.add(format!("self_l{l}.pgm"), pgm(m.cols(), m.rows(), m.values()));
    }
    for (l, m) in captured.cross_maps.iter().enumerate() {
        for k in 0..m.cols() {
            tree.add(format!("cross_l{l}_k{k}.pgm"), pgm(w, h, &m.column(k)));
        }
    }
    let listing: String = tokens.iter().enumerate().map(|(k, t)| format!("{k}\t{t}\n")).collect();
    tree.add("tokens.tsv", listing);
    if let Some(mask) = &mask {
        tree.add("mask.pgm", mask_pgm(mask));
    }
    let n = tree.len();
    tree.commit(out).map_err(io_err(out))?;
    Ok(n)
}

pub fn main_exit() -> i32 {
    let mut stdout = std::io::stdout().lock();
    let code = dispatch(std::env::args_os(), &mut stdout);
    let _ = stdout.flush();
    code
}
