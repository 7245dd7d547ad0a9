use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use posthoc_core::adapter::{probe as probe_manifest, ModelManifest};
use posthoc_core::calibration::{
    calibrate as run_calibration, CalibrationConfig, CalibrationSummary, RouterBank,
};
use posthoc_core::corpus::{detokenize, load_corpus, split_lines, tokenize};
use posthoc_core::model::{ModelConfig, ReferenceModel};
use posthoc_core::runtime::{self, RuntimeConfig};

use crate::{CalibrateArgs, GenerateArgs, InspectArgs, ModelArgs, ProbeArgs, SweepArgs};

/// Bad invocation: missing input, invalid flag value. Exits with 2.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// The effective configuration of a run, echoed into every report.
#[derive(Debug, Serialize)]
struct RunConfig {
    subcommand: &'static str,
    seed: u64,
    model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    runtime: Option<RuntimeConfig>,
    paths: BTreeMap<&'static str, String>,
}

/// Pretty JSON whose second line is the only non-reproducible one.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    timestamp: String,
    run_config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, run: &RunConfig, body: T) -> Result<()> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let env = Envelope {
        timestamp: format!("unix:{secs}"),
        run_config: run,
        body,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(args: &ModelArgs) -> Result<ReferenceModel> {
    let config = match &args.model_config {
        Some(p) => {
            require(p, "model config")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    ReferenceModel::new(config).map_err(|e| usage(e.to_string()))
}

fn load_bank(path: &Path) -> Result<RouterBank> {
    require(path, "router bank")?;
    RouterBank::load(path).with_context(|| format!("loading router bank {}", path.display()))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn sidecar_path(bank: &Path) -> PathBuf {
    let mut s = bank.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    require(&a.corpus, "corpus")?;
    let config = CalibrationConfig {
        checkpoint_interval: a.interval,
        convergence_threshold: a.tau,
        bottleneck: a.bottleneck,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        include_final_layer: !a.exclude_final_layer,
        ..CalibrationConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&a.model)?;
    let corpus =
        load_corpus(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    if corpus.is_empty() {
        return Err(usage(format!(
            "corpus `{}` holds no documents",
            a.corpus.display()
        )));
    }

    let (bank, summary) = run_calibration(&model, &corpus, &config)?;
    bank.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let summary_path = a.summary.unwrap_or_else(|| sidecar_path(&a.out));

    let mut paths = BTreeMap::new();
    paths.insert("corpus", path_str(&a.corpus));
    paths.insert("out", path_str(&a.out));
    paths.insert("summary", path_str(&summary_path));
    if let Some(p) = &a.model.model_config {
        paths.insert("model_config", path_str(p));
    }
    let run = RunConfig {
        subcommand: "calibrate",
        seed: a.seed,
        model: *model.config(),
        calibration: Some(config),
        runtime: None,
        paths,
    };
    #[derive(Serialize)]
    struct Body<'a> {
        summary: &'a CalibrationSummary,
    }
    write_json(&summary_path, &run, Body { summary: &summary })?;

    println!(
        "calibrated {} routers on {} documents ({} tokens), d={} b={} tau={}",
        summary.routers.len(),
        summary.documents,
        summary.tokens,
        bank.meta().hidden_dim,
        bank.meta().bottleneck,
        bank.meta().tau
    );
    print_stats(&summary);
    println!("bank: {}", a.out.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn print_stats(summary: &CalibrationSummary) {
    println!("layer  examples  positives  final_loss  accuracy");
    for r in &summary.routers {
        println!(
            "{:>5}  {:>8}  {:>9}  {:>10.6}  {:>8.4}{}",
            r.layer,
            r.examples,
            r.positives,
            r.final_loss,
            r.accuracy,
            if r.single_class {
                "  (single class)"
            } else {
                ""
            }
        );
    }
}

fn read_prompt(arg: &str) -> Result<Vec<u8>> {
    let p = Path::new(arg);
    if p.is_file() {
        return fs::read(p).with_context(|| format!("reading prompt {}", p.display()));
    }
    Ok(arg.as_bytes().to_vec())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let config = RuntimeConfig {
        exit_threshold: a.exit.theta,
        k_min: a.exit.k_min,
        mode: a.exit.mode,
        max_new_tokens: a.max_tokens,
        temperature: a.temperature,
        seed: a.seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&a.model)?;
    let bank = a.routers.as_deref().map(load_bank).transpose()?;
    let prompt = read_prompt(&a.prompt)?;
    if prompt.is_empty() {
        return Err(usage("prompt is empty"));
    }
    let tokens = tokenize(&prompt);
    let gen = runtime::generate(&model, bank.as_ref(), &tokens, &config)?;

    println!("{}", detokenize(&gen.tokens));
    let r = &gen.report;
    eprintln!(
        "theta={} mode={} prefill exit_rate={:.4} decode exit_rate={:.4} unique_output_tokens={}",
        r.theta, r.mode, r.prefill.exit_rate, r.decode.exit_rate, r.unique_output_tokens
    );
    if let Some(path) = &a.report {
        let mut paths = BTreeMap::new();
        paths.insert("prompt", a.prompt.clone());
        if let Some(p) = &a.routers {
            paths.insert("routers", path_str(p));
        }
        if let Some(p) = &a.model.model_config {
            paths.insert("model_config", path_str(p));
        }
        let run = RunConfig {
            subcommand: "generate",
            seed: a.seed,
            model: *model.config(),
            calibration: None,
            runtime: Some(config),
            paths,
        };
        #[derive(Serialize)]
        struct Body<'a> {
            output_text: String,
            report: &'a runtime::ExitReport,
        }
        write_json(
            path,
            &run,
            Body {
                output_text: detokenize(&gen.tokens),
                report: r,
            },
        )?;
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    require(&a.prompts, "prompt file")?;
    for &t in &a.thetas {
        if !(t > 0.0 && t <= 1.0) {
            return Err(usage(format!("threshold {t} outside (0, 1]")));
        }
    }
    let model = load_model(&a.model)?;
    let bank = load_bank(&a.routers)?;
    let text = fs::read(&a.prompts).with_context(|| format!("reading {}", a.prompts.display()))?;
    let prompts: Vec<Vec<u32>> = split_lines(&text)
        .iter()
        .take(a.max_prompts)
        .map(|p| tokenize(p))
        .collect();
    if prompts.is_empty() {
        return Err(usage(format!("`{}` holds no prompts", a.prompts.display())));
    }
    let rows = runtime::sweep_thresholds(&model, &bank, &prompts, &a.thetas, a.k_min, a.mode)?;

    println!("theta   exit_rate  histogram");
    for r in &rows {
        let hist: Vec<String> = r
            .histogram
            .entries()
            .iter()
            .filter(|(_, v)| *v > 0)
            .map(|(k, v)| format!("{k}:{v}"))
            .collect();
        println!("{:<6}  {:>9.4}  {}", r.theta, r.exit_rate, hist.join(" "));
    }
    if let Some(path) = &a.report {
        let mut paths = BTreeMap::new();
        paths.insert("prompts", path_str(&a.prompts));
        paths.insert("routers", path_str(&a.routers));
        if let Some(p) = &a.model.model_config {
            paths.insert("model_config", path_str(p));
        }
        let run = RunConfig {
            subcommand: "sweep",
            seed: 0,
            model: *model.config(),
            calibration: None,
            runtime: None,
            paths,
        };
        #[derive(Serialize)]
        struct Body<'a> {
            k_min: usize,
            mode: runtime::ExitMode,
            prompts: usize,
            rows: &'a [runtime::SweepRow],
        }
        write_json(
            path,
            &run,
            Body {
                k_min: a.k_min,
                mode: a.mode,
                prompts: prompts.len(),
                rows: &rows,
            },
        )?;
    }
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    require(&a.manifest, "manifest")?;
    let text = fs::read_to_string(&a.manifest)
        .with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest = ModelManifest::parse(&text)?;
    let map = probe_manifest(&manifest)?;
    print!("{map}");
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let bank = load_bank(&a.routers)?;
    let m = bank.meta();
    let size = fs::metadata(&a.routers)?.len();
    println!("file={}", a.routers.display());
    println!("bytes={size}");
    println!("checksum=ok");
    println!("hidden_dim={}", m.hidden_dim);
    println!("bottleneck={}", m.bottleneck);
    println!("tau={}", m.tau);
    println!("interval={}", m.interval);
    println!("rmsnorm_eps={}", m.rmsnorm_eps);
    println!("num_layers={}", m.num_layers);
    let layers: Vec<String> = bank.layers().iter().map(usize::to_string).collect();
    println!("checkpoints={}", layers.join(","));
    println!("params_per_router={}", bank.routers()[0].param_count());

    let explicit = a.summary.is_some();
    let summary_path = a.summary.unwrap_or_else(|| sidecar_path(&a.routers));
    if !summary_path.exists() {
        if explicit {
            return Err(usage(format!(
                "summary `{}` does not exist",
                summary_path.display()
            )));
        }
        println!("stats=unavailable (no {})", summary_path.display());
        return Ok(());
    }
    let text = fs::read_to_string(&summary_path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", summary_path.display()))?;
    let summary: CalibrationSummary = serde_json::from_value(value["summary"].clone())
        .with_context(|| format!("reading statistics from {}", summary_path.display()))?;
    println!("documents={}", summary.documents);
    println!("tokens={}", summary.tokens);
    print_stats(&summary);
    Ok(())
}
