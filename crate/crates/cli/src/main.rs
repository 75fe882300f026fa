//! `hml`: command-line front end for hierarchical multi-label probes.
//!
//! Hierarchy arguments accept either a path file or `builtin:<name>` for the
//! bundled `substrate`, `relief` and `bedforms` trees. Failures print a JSON
//! error object to stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use hml_core::baseline::{
    activation_probability, brute_force_count, count_valid_annotations, estimate_random_baseline,
    BaselineConfig, MeanStd, BRUTE_FORCE_MAX_NODES,
};
use hml_core::datagen::{generate_dataset, GeneratorConfig};
use hml_core::experiment::split_indices;
use hml_core::hierarchy::catami;
use hml_core::io::{self, Features, Predictions, ScoreKind};
use hml_core::metrics::{evaluate, NodeScores};
use hml_core::model::{fit, Model, TrainConfig, TrainData};
use hml_core::{Error, Hierarchy};

#[derive(Parser)]
#[command(name = "hml", version, about = "Hierarchical multi-label classification with missing labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a hierarchy and print its pre-order node table.
    Validate {
        hierarchy: String,
        #[arg(long)]
        json: bool,
    },
    /// Count the valid (ancestor-closed) annotations of a hierarchy.
    Count {
        hierarchy: String,
        /// Cross-check by enumerating all 2^n bit-strings (n <= 24).
        #[arg(long)]
        brute_force: bool,
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic dataset split into train/validation/test files.
    Generate(GenerateArgs),
    /// Train a probe on a features file and an annotations file.
    Train(TrainArgs),
    /// Score a features file with a trained probe.
    Predict {
        model: PathBuf,
        features: PathBuf,
        #[arg(required = true)]
        hierarchies: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PredictKind::Logits)]
        kind: PredictKind,
    },
    /// Apply the max-constraint to a predictions file.
    Constrain {
        predictions: PathBuf,
        #[arg(required = true)]
        hierarchies: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Threshold the constrained scores into bits.
        #[arg(long)]
        binarize: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score predictions (JSON lines, or an annotations CSV) against labels.
    Evaluate {
        predictions: PathBuf,
        annotations: PathBuf,
        #[arg(required = true)]
        hierarchies: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        per_node: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Monte Carlo random-prediction baseline: `baseline <hierarchies>... <annotations>`.
    Baseline {
        #[arg(required = true, num_args = 2.., value_name = "HIERARCHIES... ANNOTATIONS")]
        inputs: Vec<String>,
        #[arg(long, default_value_t = hml_core::baseline::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = hml_core::baseline::DEFAULT_BIT_PROBABILITY)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictKind {
    Logits,
    Probabilities,
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON generation config; see the README for the schema.
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    features: PathBuf,
    annotations: PathBuf,
    #[arg(required = true)]
    hierarchies: Vec<String>,
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "validation_annotations")]
    validation_features: Option<PathBuf>,
    #[arg(long, requires = "validation_features")]
    validation_annotations: Option<PathBuf>,
    /// Continue from a checkpoint at one tenth of the learning rates and no
    /// weight decay.
    #[arg(long, requires = "resume")]
    fine_tune: bool,
    #[arg(long, default_value_t = 300)]
    fine_tune_epochs: usize,
    /// Checkpoint to start from instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

/// On-disk generation config.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateFile {
    /// Path files (relative to the config) or `builtin:<name>`.
    hierarchies: Vec<String>,
    #[serde(default)]
    generator: GeneratorConfig,
    #[serde(default = "default_train_fraction")]
    train_fraction: f64,
    #[serde(default = "default_validation_fraction")]
    validation_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.60
}

fn default_validation_fraction() -> f64 {
    0.08
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Usage(message) => json!({ "error": "usage", "message": message }),
            CliError::Core(e) => {
                let mut v = json!({ "error": e.kind(), "message": e.to_string() });
                match e {
                    Error::SchemaMismatch { file, field, .. } => {
                        v["file"] = json!(file);
                        v["field"] = json!(field);
                    }
                    Error::DimensionMismatch { what, .. } => v["field"] = json!(what),
                    Error::Io { path, .. } => v["file"] = json!(path.display().to_string()),
                    _ => {}
                }
                v
            }
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_hierarchy(spec: &str, base: Option<&Path>) -> CliResult<Hierarchy> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return catami::builtin(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown builtin hierarchy `{name}`; expected substrate, relief or bedforms"
            ))
        });
    }
    let path = match base {
        Some(dir) => dir.join(spec),
        None => PathBuf::from(spec),
    };
    Ok(io::read_hierarchy(&path)?)
}

fn load_hierarchies(specs: &[String], base: Option<&Path>) -> CliResult<Vec<Hierarchy>> {
    specs.iter().map(|s| load_hierarchy(s, base)).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::SchemaMismatch {
            file: path.display().to_string(),
            field: "config".into(),
            reason: e.to_string(),
        })
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    println!("{}", serde_json::to_string(value).map_err(Error::from)?);
    Ok(())
}

fn validate(spec: &str, as_json: bool) -> CliResult {
    let h = load_hierarchy(spec, None)?;
    if as_json {
        let nodes: Vec<_> = (0..h.len())
            .map(|i| json!({ "index": i, "depth": h.depth(i), "parent": h.parent(i), "path": h.path(i) }))
            .collect();
        return print_json(&json!({
            "category": h.category(),
            "nodes": h.len(),
            "depth_histogram": h.depth_histogram(),
            "table": nodes,
        }));
    }
    println!("category: {}", h.category());
    println!("nodes: {}", h.len());
    println!("depth histogram: {:?}", h.depth_histogram());
    for i in 0..h.len() {
        println!("{i:>4}  {}{}", "  ".repeat(h.depth(i)), h.node(i).name);
    }
    Ok(())
}

fn count(spec: &str, brute_force: bool, as_json: bool) -> CliResult {
    let h = load_hierarchy(spec, None)?;
    let exact = count_valid_annotations(&h);
    let oracle = if brute_force {
        Some(brute_force_count(&h)?)
    } else {
        None
    };
    if let Some(o) = &oracle {
        if *o != exact {
            return Err(CliError::Usage(format!(
                "internal disagreement: recurrence {exact} vs enumeration {o}"
            )));
        }
    }
    if as_json {
        return print_json(&json!({
            "category": h.category(),
            "nodes": h.len(),
            "count": exact.to_string(),
            "brute_force": oracle.map(|o| o.to_string()),
            "brute_force_max_nodes": BRUTE_FORCE_MAX_NODES,
        }));
    }
    println!("{exact}");
    Ok(())
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn generate(args: &GenerateArgs) -> CliResult {
    let file: GenerateFile = read_json(&args.config)?;
    let base = args.config.parent();
    let hierarchies = load_hierarchies(&file.hierarchies, base)?;
    let dataset = generate_dataset(&hierarchies, &file.generator, args.seed)?;
    let split = split_indices(dataset.len(), file.train_fraction, file.validation_fraction, args.seed)?;

    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|source| {
            CliError::Core(Error::Io {
                path: p.to_path_buf(),
                source,
            })
        })
    };
    mkdir(&args.out)?;
    let mut hierarchy_files = Vec::new();
    for (k, h) in hierarchies.iter().enumerate() {
        let name = format!("hierarchy_{k}_{}.txt", slug(h.category()));
        io::write_hierarchy(&args.out.join(&name), h)?;
        hierarchy_files.push(name);
    }
    let mut splits = serde_json::Map::new();
    for (name, indices) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        let part = dataset.subset(indices);
        let files = json!({
            "features": format!("{name}_features.csv"),
            "annotations": format!("{name}_annotations.csv"),
            "ground_truth": format!("{name}_ground_truth.csv"),
            "samples": part.len(),
        });
        io::write_features(
            &args.out.join(format!("{name}_features.csv")),
            &Features {
                sample_ids: part.sample_ids.clone(),
                values: part.features.clone(),
            },
        )?;
        io::write_annotations(&args.out.join(format!("{name}_annotations.csv")), &hierarchies, &part.observed)?;
        io::write_annotations(
            &args.out.join(format!("{name}_ground_truth.csv")),
            &hierarchies,
            &part.ground_truth,
        )?;
        splits.insert(name.into(), files);
    }
    let manifest = json!({
        "seed": args.seed,
        "generator": file.generator,
        "feature_dim": dataset.features.ncols(),
        "hierarchies": hierarchy_files,
        "splits": splits,
    });
    write_json(&args.out.join("manifest.json"), &manifest)?;
    print_json(&manifest)
}

fn load_labelled(
    features: &Path,
    annotations: &Path,
    hierarchies: &[Hierarchy],
) -> CliResult<(Features, Vec<hml_core::AnnotationSet>)> {
    let f = io::read_features(features)?;
    let mut a = io::read_annotations(annotations, hierarchies)?;
    // Align annotation rows to the feature rows by sample id.
    let mut by_id: std::collections::HashMap<String, hml_core::AnnotationSet> =
        a.drain(..).map(|s| (s.sample_id.clone(), s)).collect();
    let aligned = f
        .sample_ids
        .iter()
        .map(|id| {
            by_id.remove(id).ok_or_else(|| {
                CliError::Core(Error::SchemaMismatch {
                    file: annotations.display().to_string(),
                    field: "sample_id".into(),
                    reason: format!("no annotation row for sample `{id}`"),
                })
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((f, aligned))
}

fn train(args: &TrainArgs) -> CliResult {
    let hierarchies = load_hierarchies(&args.hierarchies, None)?;
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.fine_tune {
        config = config.fine_tune(args.fine_tune_epochs);
    }
    let (features, annotations) = load_labelled(&args.features, &args.annotations, &hierarchies)?;
    let validation = match (&args.validation_features, &args.validation_annotations) {
        (Some(f), Some(a)) => Some(load_labelled(f, a, &hierarchies)?),
        _ => None,
    };
    let mut model = match &args.resume {
        Some(p) => Model::load(p)?,
        None => Model::new(&hierarchies, features.values.ncols(), &config.architecture, config.seed)?,
    };
    let history = fit(
        &mut model,
        &hierarchies,
        TrainData {
            features: features.values.view(),
            annotations: &annotations,
        },
        validation.as_ref().map(|(f, a)| TrainData {
            features: f.values.view(),
            annotations: a,
        }),
        &config,
        |record| {
            if let Ok(line) = serde_json::to_string(record) {
                println!("{line}");
            }
        },
    )?;
    model.save(&args.out)?;
    let last = history.last().and_then(|r| r.train_loss);
    eprintln!("saved {} after {} epochs (final train loss {last:?})", args.out.display(), history.len());
    Ok(())
}

fn predict(model: &Path, features: &Path, specs: &[String], out: &Path, kind: PredictKind) -> CliResult {
    let hierarchies = load_hierarchies(specs, None)?;
    let model = Model::load(model)?;
    model.check_hierarchies(&hierarchies)?;
    let f = io::read_features(features)?;
    let logits = model.predict_logits(f.values.view())?;
    let preds = Predictions::new(ScoreKind::Logits, &hierarchies, f.sample_ids, logits)?;
    let preds = match kind {
        PredictKind::Logits => preds,
        PredictKind::Probabilities => preds.constrained(&hierarchies)?,
    };
    io::write_predictions(out, &preds)?;
    Ok(())
}

fn constrain(input: &Path, specs: &[String], out: &Path, binarize: bool, threshold: f64) -> CliResult {
    let hierarchies = load_hierarchies(specs, None)?;
    let preds = io::read_predictions(input, &hierarchies)?;
    let result = if binarize {
        let bits = preds.to_bits(&hierarchies, threshold)?;
        Predictions::from_bits(&hierarchies, preds.sample_ids.clone(), &bits)?
    } else {
        preds.constrained(&hierarchies)?
    };
    io::write_predictions(out, &result)?;
    Ok(())
}

fn evaluate_cmd(
    predictions: &Path,
    annotations: &Path,
    specs: &[String],
    report_path: Option<&Path>,
    per_node: Option<&Path>,
    threshold: f64,
) -> CliResult {
    let hierarchies = load_hierarchies(specs, None)?;
    let labels = io::read_annotations(annotations, &hierarchies)?;
    let is_csv = predictions.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let preds = if is_csv {
        Predictions::from_annotations(&hierarchies, &io::read_annotations(predictions, &hierarchies)?)?
    } else {
        io::read_predictions(predictions, &hierarchies)?
    };
    let ids: Vec<String> = labels.iter().map(|a| a.sample_id.clone()).collect();
    let bits = preds.aligned_to(&ids)?.to_bits(&hierarchies, threshold)?;
    let report = evaluate(&hierarchies, &labels, &bits)?;
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    if let Some(p) = per_node {
        std::fs::write(p, report.per_node_csv()?).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    print_json(&json!({
        "samples": report.samples,
        "ap": report.ap,
        "hml_ap": report.hml_ap,
        "singular_f1": report.singular_f1,
    }))
}

#[derive(Serialize)]
struct NodeActivation {
    path: String,
    depth: usize,
    subtree_size: usize,
    activation_probability: f64,
    /// Mean over trials where the value is defined.
    precision: Option<MeanStd>,
    recall: Option<MeanStd>,
}

fn baseline_cmd(inputs: &[String], trials: usize, p: f64, seed: u64, report_path: Option<&Path>) -> CliResult {
    let (annotations, specs) = inputs.split_last().expect("clap enforces two inputs");
    let hierarchies = load_hierarchies(specs, None)?;
    let labels = io::read_annotations(Path::new(annotations), &hierarchies)?;
    let report = estimate_random_baseline(
        &hierarchies,
        &labels,
        &BaselineConfig {
            trials,
            bit_probability: p,
            seed,
        },
    )?;
    let mut nodes = Vec::new();
    for h in &hierarchies {
        let probs = activation_probability(h, p);
        for (v, &prob) in probs.iter().enumerate() {
            let path = h.path(v);
            let scores: Vec<&NodeScores> = report.per_trial.iter().map(|r| &r.per_node[&path].scores).collect();
            nodes.push(NodeActivation {
                depth: h.depth(v),
                subtree_size: h.subtree_size(v),
                activation_probability: prob,
                precision: MeanStd::from_values(scores.iter().map(|s| s.precision)),
                recall: MeanStd::from_values(scores.iter().map(|s| s.recall)),
                path,
            });
        }
    }
    let summary = json!({
        "trials": report.trials,
        "bit_probability": report.bit_probability,
        "seed": report.seed,
        "ap": report.ap,
        "hml_ap": report.hml_ap,
        "singular_f1": report.singular_f1,
        "nodes": nodes,
    });
    if let Some(path) = report_path {
        write_json(path, &summary)?;
    }
    print_json(&json!({
        "ap": report.ap,
        "hml_ap": report.hml_ap,
        "singular_f1": report.singular_f1,
    }))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Validate { hierarchy, json } => validate(&hierarchy, json),
        Command::Count {
            hierarchy,
            brute_force,
            json,
        } => count(&hierarchy, brute_force, json),
        Command::Generate(args) => generate(&args),
        Command::Train(args) => train(&args),
        Command::Predict {
            model,
            features,
            hierarchies,
            out,
            kind,
        } => predict(&model, &features, &hierarchies, &out, kind),
        Command::Constrain {
            predictions,
            hierarchies,
            out,
            binarize,
            threshold,
        } => constrain(&predictions, &hierarchies, &out, binarize, threshold),
        Command::Evaluate {
            predictions,
            annotations,
            hierarchies,
            report,
            per_node,
            threshold,
        } => evaluate_cmd(
            &predictions,
            &annotations,
            &hierarchies,
            report.as_deref(),
            per_node.as_deref(),
            threshold,
        ),
        Command::Baseline {
            inputs,
            trials,
            p,
            seed,
            report,
        } => baseline_cmd(&inputs, trials, p, seed, report.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
