//! Command-line front end for factual-association editing experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use factedit::error::Error;
use factedit::harness::{
    cmd_edit, cmd_estimate_cov, cmd_eval, cmd_init_model, cmd_seq_edit, cmd_sweep_layers,
    RunConfig,
};

fn usage() -> &'static str {
    "\
factedit - rank-one factual-association editing for a toy causal text encoder

USAGE:
  factedit <COMMAND> [OPTIONS]

COMMANDS:
  init-model    --corpus <FILE>             Build vocabulary + seeded weights
  estimate-cov  --corpus <FILE> --layer N   Cache key second moments for a layer
  edit          --request <FILE>            Apply one rank-one edit
  seq-edit      [--dataset <FILE>]          Apply every dataset entry in order
  eval          --edited <FILE> [--frozen <FILE>] [--scores <CSV>]
                                            Efficacy/generality/specificity report
  sweep-layers  --request <FILE> --layers 0,1,...
                                            Edit each layer on clean weights

GLOBAL OPTIONS:
  --config <FILE>    JSON run configuration (paths, optimizer, templates)
  --out <DIR>        Output directory (overrides config)
  --seed-list <CSV>  Evaluation seeds, e.g. 0,1,2 (overrides config)
  --layer <N>        Edit layer override
  --help             Show this help

EXIT CODES:
  0  success
  1  usage error
  2  data error (missing/invalid files, schema violations)
  3  numeric failure (non-finite values, failed solves)

Outputs are written under the output directory: model.bin / vocab.txt
(init-model), cov_layer<N>.bin (estimate-cov), edited.bin + audit.json +
loss_history.json (edit), audits.json + metrics_curve.csv (seq-edit),
report.json + report.csv + scores.csv (eval), sweep.csv (sweep-layers).
"
}

struct ParsedArgs {
    command: String,
    options: std::collections::BTreeMap<String, String>,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs, Error> {
    if args.is_empty() {
        return Err(Error::Usage("missing command; try --help".into()));
    }
    if args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        return Ok(ParsedArgs {
            command: "help".into(),
            options: Default::default(),
        });
    }
    let command = args[0].clone();
    let mut options = std::collections::BTreeMap::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" {
            return Ok(ParsedArgs {
                command: "help".into(),
                options: Default::default(),
            });
        }
        let Some(name) = arg.strip_prefix("--") else {
            return Err(Error::Usage(format!("unexpected argument {arg:?}")));
        };
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Usage(format!("flag --{name} needs a value")))?;
        options.insert(name.to_string(), value.clone());
        i += 2;
    }
    Ok(ParsedArgs { command, options })
}

fn build_config(options: &std::collections::BTreeMap<String, String>) -> Result<RunConfig, Error> {
    let mut config = match options.get("config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => RunConfig::default(),
    };
    if let Some(out) = options.get("out") {
        config.out_dir = PathBuf::from(out);
    }
    if let Some(seeds) = options.get("seed-list") {
        config.seeds = seeds
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Usage(format!("bad seed {s:?} in --seed-list")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(layer) = options.get("layer") {
        config.layer = Some(
            layer
                .parse::<usize>()
                .map_err(|_| Error::Usage(format!("bad layer {layer:?}")))?,
        );
    }
    config.validate()?;
    Ok(config)
}

fn required_path(
    options: &std::collections::BTreeMap<String, String>,
    name: &str,
) -> Result<PathBuf, Error> {
    options
        .get(name)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Usage(format!("--{name} is required for this command")))
}

fn run(args: &[String]) -> Result<(), Error> {
    let parsed = parse_args(args)?;
    if parsed.command == "help" {
        print!("{}", usage());
        return Ok(());
    }
    let config = build_config(&parsed.options)?;
    match parsed.command.as_str() {
        "init-model" => {
            let corpus = required_path(&parsed.options, "corpus")?;
            let (weights, vocab) = cmd_init_model(&config, &corpus)?;
            println!("wrote {} and {}", weights.display(), vocab.display());
        }
        "estimate-cov" => {
            let corpus = required_path(&parsed.options, "corpus")?;
            let layer = config
                .layer
                .ok_or_else(|| Error::Usage("estimate-cov needs --layer".into()))?;
            let path = cmd_estimate_cov(&config, &corpus, layer)?;
            println!("wrote {}", path.display());
        }
        "edit" => {
            let request = required_path(&parsed.options, "request")?;
            let audit = cmd_edit(&config, &request)?;
            let lambda_norm = factedit::linalg::norm(&audit.lambda);
            println!(
                "edited layer {} in {} steps (converged: {}, |lambda| {:.3e}, residual {:.3e})",
                audit.layer,
                audit.optimizer_steps,
                audit.converged,
                lambda_norm,
                audit.update_residual
            );
        }
        "seq-edit" => {
            let mut config = config;
            if let Some(dataset) = parsed.options.get("dataset") {
                config.dataset = Some(PathBuf::from(dataset));
            }
            let outcome = cmd_seq_edit(&config)?;
            println!(
                "applied {} edits; {} checkpoints in metrics_curve.csv",
                outcome.audits.len(),
                outcome.checkpoints.len()
            );
        }
        "eval" => {
            let mut config = config;
            if let Some(dataset) = parsed.options.get("dataset") {
                config.dataset = Some(PathBuf::from(dataset));
            }
            let edited = required_path(&parsed.options, "edited")?;
            let frozen = parsed.options.get("frozen").map(PathBuf::from);
            let scores = parsed.options.get("scores").map(PathBuf::from);
            let report = cmd_eval(&config, &edited, frozen.as_deref(), scores.as_deref())?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "efficacy {} generality {} specificity {} f1 {}",
                show(report.efficacy),
                show(report.generalization),
                show(report.specificity),
                show(report.f1)
            );
        }
        "sweep-layers" => {
            let mut config = config;
            if let Some(dataset) = parsed.options.get("dataset") {
                config.dataset = Some(PathBuf::from(dataset));
            }
            let request = required_path(&parsed.options, "request")?;
            let layers: Vec<usize> = parsed
                .options
                .get("layers")
                .ok_or_else(|| Error::Usage("--layers is required".into()))?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Usage(format!("bad layer {s:?} in --layers")))
                })
                .collect::<Result<_, _>>()?;
            let report = cmd_sweep_layers(&config, &request, &layers)?;
            println!("swept {} layers into sweep.csv", report.rows.len());
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown command {other:?}; try --help"
            )))
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            let payload = serde_json::json!({
                "error": { "kind": error.kind(), "message": error.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
