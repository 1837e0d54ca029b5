mod config;
mod error;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vshuffle::denoiser::{make_texture_dataset, train, DenoiserModel};
use vshuffle::diffusion::{ddim_invert, Schedule};
use vshuffle::evalkit::{pca_value_features, run_axis_ablation, run_sweep, shuffle_style_values, SweepCell};
use vshuffle::features::{FeatureCache, Stream};
use vshuffle::image::Image;
use vshuffle::losses::{PermutationSource, Resample, ShuffleAxis, ShuffleSpec};
use vshuffle::transfer::{encode, MethodRegistry, TransferConfig, TransferContext};
use vshuffle::verify::{run_suite, SuiteConfig};

use config::{load_image, parse_blocks, to_toml, RunConfig};
use error::CliError;

const THREADS_ENV: &str = "VSHUFFLE_THREADS";

#[derive(Parser)]
#[command(name = "vshuffle", version, about = "Training-free style transfer by shuffling attention values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the micro denoiser on procedural textures.
    Train(TrainArgs),
    /// Stylize one content image with one or more style images.
    Stylize(StylizeArgs),
    /// Run a grid of transfers and write metrics with Pareto flags as CSV.
    Sweep(SweepArgs),
    /// Project style value features onto principal components, before and after shuffling.
    Pca(PcaArgs),
    /// Compare shuffling along the head, token and channel axes.
    AblateAxis(AblateArgs),
    /// Run the numerical self-checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run definition; flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated texture domains.
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    #[arg(long)]
    images_per_domain: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

/// Overrides for every transfer field.
#[derive(Args, Default)]
struct TransferArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t1: Option<f64>,
    #[arg(long)]
    t2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `10-15` or `10,12,14`.
    #[arg(long, value_parser = |s: &str| parse_blocks(s).map(BlockList))]
    blocks: Option<BlockList>,
    #[arg(long)]
    seed: Option<u64>,
    /// h, s or d.
    #[arg(long)]
    shuffle_axis: Option<ShuffleAxis>,
    /// per-timestep or per-inner-step.
    #[arg(long, value_parser = kebab::<Resample>)]
    resample: Option<Resample>,
    /// random or identity.
    #[arg(long, value_parser = kebab::<PermutationSource>)]
    permutations: Option<PermutationSource>,
}

#[derive(Clone, Debug)]
struct BlockList(Vec<usize>);

fn kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl TransferArgs {
    fn apply(&self, cfg: &mut TransferConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(method, steps, t1, t2, alpha, beta, gamma, tau, m, inner_steps, lr, seed, shuffle_axis, resample, permutations);
        if let Some(b) = &self.blocks {
            cfg.blocks = b.0.clone();
        }
    }
}

#[derive(Args)]
struct StylizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PNG path or `gen:<domain>:<seed>[:<index>]`.
    #[arg(long)]
    content: Option<String>,
    /// Repeatable; replaces the configured list.
    #[arg(long = "style")]
    styles: Vec<String>,
    #[command(flatten)]
    transfer: TransferArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Worker threads, further capped by VSHUFFLE_THREADS.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    ms: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    base: TransferArgs,
}

#[derive(Args)]
struct PcaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long = "style")]
    styles: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    timestep: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    content: Option<String>,
    #[arg(long)]
    style: Option<String>,
    #[command(flatten)]
    transfer: TransferArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Where to write `verify.json`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Smaller sample counts, for a fast smoke run.
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Stylize(a) => cmd_stylize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Pca(a) => cmd_pca(a),
        Command::AblateAxis(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_checkpoint(path: Option<&Path>) -> Result<DenoiserModel, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("no checkpoint given (--checkpoint or `checkpoint` in the config)".into()))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(DenoiserModel::load(path)?)
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(fs::write(path, text + "\n")?)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut sec = RunConfig::load(a.common.config.as_deref())?.train;
    if let Some(v) = a.steps {
        sec.optimizer.steps = v;
    }
    if let Some(v) = a.batch_size {
        sec.optimizer.batch_size = v;
    }
    if let Some(v) = a.lr {
        sec.optimizer.lr = v;
    }
    if let Some(v) = a.seed {
        sec.optimizer.seed = v;
    }
    if let Some(v) = a.domains {
        sec.domains = v;
    }
    if let Some(v) = a.images_per_domain {
        sec.images_per_domain = v;
    }
    if let Some(v) = a.data_seed {
        sec.data_seed = v;
    }

    let model = DenoiserModel::new(sec.model.clone())?;
    let mut dataset = Vec::new();
    for (i, d) in sec.domains.iter().enumerate() {
        let domain = d.parse()?;
        dataset.extend(make_texture_dataset(domain, sec.images_per_domain, sec.model.image_size, sec.data_seed + i as u64)?);
    }
    let (trained, report) = train(&model, &dataset, &sec.optimizer)?;

    create_out(&a.common.out)?;
    trained.save(&a.common.out.join("model.vshf"))?;
    fs::write(a.common.out.join("config.toml"), to_toml(&sec))?;
    write_json(
        &a.common.out.join("train.json"),
        &serde_json::json!({
            "images": dataset.len(),
            "parameters": trained.param_count(),
            "initial_smoothed": report.initial_smoothed,
            "final_smoothed": report.final_smoothed,
            "losses": report.losses,
        }),
    )?;
    if report.losses.is_empty() {
        println!("wrote untrained model ({} parameters)", trained.param_count());
    } else {
        println!(
            "trained {} steps on {} images: loss {:.4} -> {:.4}",
            report.losses.len(),
            dataset.len(),
            report.initial_smoothed,
            report.final_smoothed
        );
    }
    Ok(())
}

fn cmd_stylize(a: StylizeArgs) -> Result<(), CliError> {
    let mut sec = RunConfig::load(a.common.config.as_deref())?.stylize;
    if a.checkpoint.is_some() {
        sec.checkpoint = a.checkpoint;
    }
    if a.content.is_some() {
        sec.content = a.content;
    }
    if !a.styles.is_empty() {
        sec.styles = a.styles;
    }
    a.transfer.apply(&mut sec.transfer);

    let content_src = sec.content.clone().ok_or_else(|| CliError::Usage("no content image given".into()))?;
    if sec.styles.is_empty() {
        return Err(CliError::Usage("no style image given".into()));
    }
    let model = load_checkpoint(sec.checkpoint.as_deref())?;
    let size = model.config().image_size;
    let content = load_image(&content_src, size)?;
    let styles = sec.styles.iter().map(|s| load_image(s, size)).collect::<Result<Vec<_>, _>>()?;

    let registry = MethodRegistry::default();
    let ctx = TransferContext::new(&model);
    let result = registry.run(&ctx, &content, &styles, &sec.transfer)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("content".to_string(), content_src);
    for (i, s) in sec.styles.iter().enumerate() {
        inputs.insert(format!("style{i}"), s.clone());
    }
    if let Some(c) = &sec.checkpoint {
        inputs.insert("checkpoint".into(), c.display().to_string());
    }
    create_out(&a.common.out)?;
    result.image.save_png(&a.common.out.join("stylized.png"))?;
    write_json(&a.common.out.join("run.json"), &result.run_record(inputs))?;
    fs::write(a.common.out.join("config.toml"), to_toml(&sec))?;
    println!("{} with {} style(s) in {:.1}s", sec.transfer.method, styles.len(), result.elapsed_secs);
    Ok(())
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let mut sec = RunConfig::load(a.common.config.as_deref())?.sweep;
    if a.checkpoint.is_some() {
        sec.checkpoint = a.checkpoint;
    }
    macro_rules! set {
        ($($f:ident),*) => {$(
            if let Some(v) = a.$f {
                sec.$f = v;
            }
        )*};
    }
    set!(parallelism, methods, betas, alphas, ns, ms, seeds);
    a.base.apply(&mut sec.base);

    let mut parallelism = sec.parallelism.max(1);
    if let Some(cap) = thread_cap()? {
        parallelism = parallelism.min(cap);
    }
    let registry = MethodRegistry::default();
    for m in &sec.methods {
        registry.get(m)?;
    }
    let model = load_checkpoint(sec.checkpoint.as_deref())?;
    let size = model.config().image_size;

    let mut cells = Vec::new();
    for pair in &sec.pairs {
        let content = load_image(&pair.content, size)?;
        let styles = pair.styles.iter().map(|s| load_image(s, size)).collect::<Result<Vec<_>, _>>()?;
        for method in &sec.methods {
            for cfg in expand(&sec, method) {
                let n = if method == "vshuffle" { cfg.1 } else { 1 };
                if styles.len() < n {
                    return Err(CliError::Usage(format!(
                        "pair with content {} has {} style(s), the grid needs {n}",
                        pair.content,
                        styles.len()
                    )));
                }
                cells.push(SweepCell {
                    config: cfg.0,
                    content: content.clone(),
                    styles: styles[..n].to_vec(),
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(CliError::Usage("the sweep grid is empty".into()));
    }

    let ctx = TransferContext::new(&model);
    let outcome = run_sweep(&ctx, &registry, &cells, parallelism)?;
    create_out(&a.common.out)?;
    fs::write(a.common.out.join("sweep.csv"), outcome.csv())?;
    fs::write(a.common.out.join("config.toml"), to_toml(&sec))?;
    println!("{} of {} cells on {parallelism} worker(s)", outcome.rows.len(), cells.len());
    if outcome.failures.is_empty() {
        return Ok(());
    }
    let report: Vec<_> = outcome
        .failures
        .iter()
        .map(|f| serde_json::json!({ "cell": f.cell, "method": cells[f.cell].config.method, "error": f.message }))
        .collect();
    write_json(&a.common.out.join("failures.json"), &report)?;
    for f in &outcome.failures {
        eprintln!("cell {} ({}): {}", f.cell, cells[f.cell].config.method, f.message);
    }
    Err(CliError::Runtime(format!("{} cell(s) failed", outcome.failures.len())))
}

/// Grid configurations with the style count each needs. Only value
/// shuffling varies `alpha`, `n` and `m`; StyleID ignores `beta` as well.
fn expand(sec: &config::SweepSection, method: &str) -> Vec<(TransferConfig, usize)> {
    let one = [f64::NAN];
    let (betas, alphas, ns, ms): (&[f64], &[f64], &[usize], &[usize]) = match method {
        "vshuffle" => (&sec.betas, &sec.alphas, &sec.ns, &sec.ms),
        "ad" => (&sec.betas, &one, &[1], &[0]),
        _ => (&one, &one, &[1], &[0]),
    };
    let mut out = Vec::new();
    for &beta in betas {
        for &alpha in alphas {
            for &n in ns {
                for &m in ms {
                    for &seed in &sec.seeds {
                        let mut cfg = sec.base.clone();
                        cfg.method = method.to_string();
                        cfg.seed = seed;
                        if !beta.is_nan() {
                            cfg.beta = beta;
                        }
                        if !alpha.is_nan() {
                            cfg.alpha = alpha;
                        }
                        if m > 0 {
                            cfg.m = m;
                        }
                        out.push((cfg, n));
                    }
                }
            }
        }
    }
    out
}

fn cmd_pca(a: PcaArgs) -> Result<(), CliError> {
    let mut sec = RunConfig::load(a.common.config.as_deref())?.pca;
    if a.checkpoint.is_some() {
        sec.checkpoint = a.checkpoint;
    }
    if !a.styles.is_empty() {
        sec.styles = a.styles;
    }
    macro_rules! set {
        ($($f:ident),*) => {$(
            if let Some(v) = a.$f {
                sec.$f = v;
            }
        )*};
    }
    set!(steps, timestep, block, components, seed);

    if sec.styles.is_empty() {
        return Err(CliError::Usage("no style image given".into()));
    }
    if sec.components == 0 || sec.components > 3 {
        return Err(CliError::Usage("components must be 1, 2 or 3 (one per colour channel)".into()));
    }
    if sec.timestep == 0 || sec.timestep > sec.steps {
        return Err(CliError::Usage(format!("timestep must lie in 1..={}", sec.steps)));
    }
    let model = load_checkpoint(sec.checkpoint.as_deref())?;
    model.ensure_trained()?;
    model.config().block_resolution(sec.block)?;
    let size = model.config().image_size;
    let styles = sec.styles.iter().map(|s| load_image(s, size)).collect::<Result<Vec<_>, _>>()?;

    let sched = Schedule::new(sec.steps)?;
    let mut cache = FeatureCache::new(styles.len());
    for (i, img) in styles.iter().enumerate() {
        let traj = ddim_invert(&model, &sched, &encode(img), &format!("style{i}"))?;
        for tap in model.extract_taps(traj.z(sec.timestep), sched.train_index(sec.timestep), &[sec.block], sec.timestep, Stream::Style(i))? {
            cache.insert(tap)?;
        }
    }
    let spec = ShuffleSpec {
        seed: sec.seed,
        ..ShuffleSpec::default()
    };
    let before = pca_value_features(&cache, sec.timestep, sec.block, sec.components)?;
    let after = pca_value_features(&shuffle_style_values(&cache, &spec, 0)?, sec.timestep, sec.block, sec.components)?;

    create_out(&a.common.out)?;
    let scale = (64 / before.side).max(1);
    before.raster.upscaled(scale).save_png(&a.common.out.join("values.png"))?;
    after.raster.upscaled(scale).save_png(&a.common.out.join("shuffled.png"))?;
    fs::write(a.common.out.join("config.toml"), to_toml(&sec))?;
    write_json(
        &a.common.out.join("pca.json"),
        &serde_json::json!({
            "tokens_per_image": before.side * before.side,
            "images": before.n_images,
            "eigenvalues": before.pca.eigenvalues,
            "explained_ratios": before.pca.ratios,
            "shuffled_eigenvalues": after.pca.eigenvalues,
            "autocorrelation": before.autocorrelation,
            "shuffled_autocorrelation": after.autocorrelation,
        }),
    )?;
    println!(
        "spatial autocorrelation {:.3} before shuffling, {:.3} after",
        before.autocorrelation, after.autocorrelation
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let mut sec = RunConfig::load(a.common.config.as_deref())?.ablate;
    if a.checkpoint.is_some() {
        sec.checkpoint = a.checkpoint;
    }
    if let Some(c) = a.content {
        sec.content = c;
    }
    if let Some(s) = a.style {
        sec.style = s;
    }
    a.transfer.apply(&mut sec.transfer);

    let model = load_checkpoint(sec.checkpoint.as_deref())?;
    let size = model.config().image_size;
    let content: Image = load_image(&sec.content, size)?;
    let style = load_image(&sec.style, size)?;
    let ctx = TransferContext::new(&model);
    let ablation = run_axis_ablation(&ctx, &content, &style, &sec.transfer)?;

    let mut csv = String::from("axis,style_gram,style_hist,content_edge,content_query\n");
    for (axis, _, m) in &ablation.runs {
        csv.push_str(&format!("{axis},{},{},{},{}\n", m.style_gram, m.style_hist, m.content_edge, m.content_query));
    }
    create_out(&a.common.out)?;
    ablation.grid.upscaled(4).save_png(&a.common.out.join("grid.png"))?;
    for (axis, r, _) in &ablation.runs {
        r.image.save_png(&a.common.out.join(format!("axis_{axis}.png")))?;
    }
    fs::write(a.common.out.join("ablation.csv"), &csv)?;
    fs::write(a.common.out.join("config.toml"), to_toml(&sec))?;
    print!("{csv}");
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    let cfg = if a.quick {
        SuiteConfig {
            shuffle_draws: 50,
            equivariance_cases: 50,
            gradient_seeds: 2,
            affinity_seeds: 3,
            max_enumerated_s: 3,
        }
    } else {
        SuiteConfig::default()
    };
    let outcomes = run_suite(&cfg);
    for o in &outcomes {
        println!("{} {} ({:.2}s): {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.elapsed_secs, o.detail);
    }
    if let Some(dir) = &a.out {
        create_out(dir)?;
        write_json(&dir.join("verify.json"), &outcomes)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} check(s) failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn section() -> config::SweepSection {
        config::SweepSection {
            betas: vec![0.1, 0.2],
            alphas: vec![0.3, 0.5, 0.7],
            ns: vec![1, 2],
            ms: vec![1],
            seeds: vec![0, 1],
            ..Default::default()
        }
    }

    #[test]
    fn only_value_shuffling_spans_the_full_grid() {
        let sec = section();
        assert_eq!(expand(&sec, "vshuffle").len(), 2 * 3 * 2 * 2);
        let ad = expand(&sec, "ad");
        assert_eq!(ad.len(), 2 * 2);
        assert!(ad.iter().all(|(c, n)| *n == 1 && c.alpha == sec.base.alpha && c.method == "ad"));
        assert_eq!(expand(&sec, "styleid").len(), 2);
    }

    #[test]
    fn flags_override_every_transfer_field() {
        let args = TransferArgs {
            beta: Some(2.0),
            blocks: Some(BlockList(vec![11, 12])),
            resample: Some(Resample::PerInnerStep),
            ..Default::default()
        };
        let mut cfg = TransferConfig::default();
        args.apply(&mut cfg);
        assert_eq!(cfg.beta, 2.0);
        assert_eq!(cfg.blocks, vec![11, 12]);
        assert_eq!(cfg.resample, Resample::PerInnerStep);
        assert_eq!(cfg.alpha, 0.4);
    }

    #[test]
    fn kebab_enums_parse() {
        assert_eq!(kebab::<Resample>("per-inner-step").unwrap(), Resample::PerInnerStep);
        assert_eq!(kebab::<PermutationSource>("identity").unwrap(), PermutationSource::Identity);
        assert!(kebab::<Resample>("sometimes").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["vshuffle", "stylize", "-o", "x", "--blocks", "11-13", "--resample", "per-inner-step"]).unwrap();
        let Command::Stylize(a) = cli.command else { panic!("wrong subcommand") };
        let mut cfg = TransferConfig::default();
        a.transfer.apply(&mut cfg);
        assert_eq!(cfg.blocks, vec![11, 12, 13]);
        assert_eq!(cfg.resample, Resample::PerInnerStep);
    }
}
