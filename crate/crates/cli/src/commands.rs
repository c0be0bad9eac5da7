use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use shaper::checkpoint::{load_checkpoint, save_checkpoint};
use shaper::data::{Corpus, Vocab};
use shaper::gbt::GbtModel;
use shaper::heuristics::{cigar_scale, diagonal_profile, templated_shape, HeuristicSpec, ShapeTemplate};
use shaper::latency::{build_latency_dataset, SystemClock};
use shaper::search::{check_constraint, evolve, Constraint, SearchReport};
use shaper::supernet::count_params;
use shaper::surrogate::{
    collect_perplexity_dataset, fit_predictor, model_features, read_dataset_csv, write_dataset_csv,
    PredictorFile, PredictorKind,
};
use shaper::synth::generate;
use shaper::train::{evaluate_perplexity, super_pretrain_with, EvalSet};
use shaper::{BackboneConfig, Error, Result, ShapeVector, Supernet};

use crate::config::{required, RunConfig, FORMAT_VERSION};
use crate::output::Outputs;
use crate::{Cli, Command, DataArgs};

const EFFECTIVE_CONFIG: &str = "effective_config.json";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::SynthCorpus(a) => {
            if let Some(b) = a.bytes {
                cfg.synth.target_bytes = b;
            }
            let cfg = cfg.resolve()?;
            let text = generate(&cfg.synth)?;
            write_single(&a.out, text.as_bytes(), &cfg)
        }
        Command::BuildVocab(a) => {
            merge(&mut cfg.paths.corpus, a.corpus);
            if let Some(n) = a.vocab_size {
                cfg.backbone.vocab_size = n;
            }
            let cfg = cfg.resolve()?;
            let text = read_text(required(&cfg.paths.corpus, "corpus")?)?;
            let vocab = Vocab::build(&text, cfg.backbone.vocab_size)?;
            write_single(&a.out, vocab.to_file_string().as_bytes(), &cfg)
        }
        Command::Train(a) => {
            merge_data(&mut cfg, a.data);
            merge(&mut cfg.paths.out_dir, a.out_dir);
            if let Some(s) = a.steps {
                cfg.training.steps = s;
            }
            train(&cfg.resolve()?)
        }
        Command::EvalPerplexity(a) => {
            merge_data(&mut cfg, a.data);
            merge(&mut cfg.paths.checkpoint, a.checkpoint);
            merge(&mut cfg.paths.out_dir, a.out_dir);
            if let Some(m) = a.max_sequences {
                cfg.training.eval_max_sequences = m;
            }
            eval_perplexity(&cfg.resolve()?, a.shape.as_deref(), a.samples)
        }
        Command::Search(a) => {
            merge(&mut cfg.paths.checkpoint, a.checkpoint);
            merge(&mut cfg.paths.out_dir, a.out_dir);
            merge_data(&mut cfg, a.data);
            if let Some(i) = a.iterations {
                cfg.search.iterations = i;
            }
            if a.min_params.is_some() || a.max_params.is_some() {
                cfg.search.constraint = Some(Constraint::ParamRange {
                    min_params: a.min_params.unwrap_or(0),
                    max_params: a.max_params.unwrap_or(u64::MAX),
                });
            }
            if let Some(ms) = a.latency_max_ms {
                cfg.search.constraint = Some(Constraint::LatencyMax {
                    max_ms: ms,
                    device: cfg.bench.device.clone(),
                });
            }
            search(&cfg.resolve()?, a.predictor.as_deref(), a.direct, a.latency_predictor.as_deref())
        }
        Command::FitPredictor(a) => {
            merge(&mut cfg.paths.out_dir, a.out_dir);
            let kind = if a.kind == "latency" { PredictorKind::Latency } else { PredictorKind::Perplexity };
            fit(&cfg.resolve()?, &a.dataset, kind)
        }
        Command::Bench(a) => {
            merge(&mut cfg.paths.checkpoint, a.checkpoint);
            merge(&mut cfg.paths.out_dir, a.out_dir);
            if let Some(d) = a.device {
                cfg.bench.device = d;
            }
            if let Some(r) = a.reps {
                cfg.bench.reps = r;
            }
            bench(&cfg.resolve()?, a.n)
        }
        Command::Heuristic(a) => {
            merge(&mut cfg.paths.out_dir, a.out_dir);
            if a.bert_base {
                cfg.backbone = BackboneConfig::bert_base();
            }
            let cfg = cfg.resolve()?;
            let spec = HeuristicSpec {
                reference: ShapeVector::parse_key(&a.reference)?,
                target_params: a.target_params,
                early_middle: None,
            };
            let shape = cigar_scale(&spec, &cfg.backbone)?;
            let out = ShapeOutput {
                format_version: FORMAT_VERSION,
                source: format!("cigar_scale of {} to {} params", spec.reference, spec.target_params),
                params: count_params(&cfg.backbone, &shape)?,
                shape,
            };
            emit_shape(&cfg, "heuristic.json", &out)
        }
        Command::Template(a) => {
            merge(&mut cfg.paths.out_dir, a.out_dir);
            if a.bert_base {
                cfg.backbone = BackboneConfig::bert_base();
            }
            let cfg = cfg.resolve()?;
            let kind: ShapeTemplate = a.kind.parse()?;
            let shape = templated_shape(kind, &cfg.backbone.design_space()?)?;
            let out = ShapeOutput {
                format_version: FORMAT_VERSION,
                source: format!("template {kind}"),
                params: count_params(&cfg.backbone, &shape)?,
                shape,
            };
            emit_shape(&cfg, "template.json", &out)
        }
        Command::AnalyzeDiagonals(a) => {
            merge(&mut cfg.paths.checkpoint, a.checkpoint);
            merge(&mut cfg.paths.out_dir, a.out_dir);
            let cfg = cfg.resolve()?;
            let model = load_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?;
            let mut out = outputs(&cfg)?;
            out.write("diagonals.csv", diagonal_profile(&model).to_csv())?;
            out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
            out.commit();
            Ok(())
        }
    }
}

fn merge(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn merge_data(cfg: &mut RunConfig, data: DataArgs) {
    merge(&mut cfg.paths.corpus, data.corpus);
    merge(&mut cfg.paths.vocab, data.vocab);
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn outputs(cfg: &RunConfig) -> Result<Outputs> {
    Outputs::new(required(&cfg.paths.out_dir, "output directory")?)
}

/// Writes `out` and its config dump `<out>.config.json`.
fn write_single(out: &Path, contents: &[u8], cfg: &RunConfig) -> Result<()> {
    let name = out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad output path {}", out.display())))?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut o = Outputs::new(dir)?;
    o.write(name, contents)?;
    o.write(&format!("{name}.config.json"), cfg.to_json())?;
    o.commit();
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<(Vocab, Corpus, Corpus)> {
    let vocab = Vocab::parse(&read_text(required(&cfg.paths.vocab, "vocab")?)?)?;
    if vocab.len() > cfg.backbone.vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} entries but the backbone only {}",
            vocab.len(),
            cfg.backbone.vocab_size
        )));
    }
    let text = read_text(required(&cfg.paths.corpus, "corpus")?)?;
    let (train, eval) = Corpus::from_text(&text, &vocab).split_every(cfg.eval_every);
    Ok((vocab, train, eval))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (_, train, eval) = load_data(cfg)?;
    let mut out = outputs(cfg)?;
    let mut model = Supernet::build(cfg.backbone.clone(), cfg.training.seed)?;
    let log = super_pretrain_with(&mut model, &train, &eval, &cfg.training, &mut |r| {
        eprintln!("step {:>6} {:<20} ppl {:.4}", r.step, r.shape.to_key(), r.perplexity)
    })?;
    save_checkpoint(&model, &out.adopt("checkpoint.bin"))?;
    out.write("train_steps.csv", log.steps_csv())?;
    out.write("train_evals.csv", log.evals_csv())?;
    out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
    out.commit();
    Ok(())
}

fn eval_set(cfg: &RunConfig, model: &Supernet) -> Result<EvalSet> {
    let (_, _, eval) = load_data(cfg)?;
    let mut seqs = eval.sequences(cfg.training.seq_len)?;
    seqs.truncate(cfg.training.eval_max_sequences);
    EvalSet::new(
        &seqs,
        cfg.training.batch_size,
        model.config().vocab_size,
        &cfg.training.masking,
        cfg.training.eval_seed,
    )
}

fn load_model(cfg: &RunConfig) -> Result<Supernet> {
    let model = load_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    if model.config().vocab_size != cfg.backbone.vocab_size {
        return Err(Error::Config("checkpoint backbone differs from the configured backbone".into()));
    }
    Ok(model)
}

#[derive(Serialize)]
struct PerplexityOutput {
    format_version: u32,
    shape: ShapeVector,
    params: u64,
    perplexity: f64,
}

fn eval_perplexity(cfg: &RunConfig, shape: Option<&str>, samples: Option<usize>) -> Result<()> {
    let model = load_model(cfg)?;
    let eval = eval_set(cfg, &model)?;
    if let Some(n) = samples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed());
        let data = collect_perplexity_dataset(&model, &model.design_space(), n, &eval, &mut rng)?;
        let mut csv = Vec::new();
        write_dataset_csv(&data, &mut csv)?;
        let mut out = outputs(cfg)?;
        out.write("perplexity_dataset.csv", csv)?;
        out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
        out.commit();
        return Ok(());
    }
    let shape = match shape {
        Some(s) => ShapeVector::parse_key(s)?,
        None => model.design_space().largest(),
    };
    let result = PerplexityOutput {
        format_version: FORMAT_VERSION,
        params: model.count_params(&shape)?,
        perplexity: evaluate_perplexity(&model, &shape, &eval)?,
        shape,
    };
    let json = serde_json::to_string_pretty(&result)? + "\n";
    print!("{json}");
    if cfg.paths.out_dir.is_some() {
        let mut out = outputs(cfg)?;
        out.write("perplexity.json", json)?;
        out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
        out.commit();
    }
    Ok(())
}

fn load_predictor(path: &Path, want: PredictorKind) -> Result<GbtModel> {
    let file: PredictorFile = serde_json::from_str(&read_text(path)?)?;
    if file.format_version != shaper::surrogate::FORMAT_VERSION {
        return Err(Error::Data(format!("predictor format_version {} unsupported", file.format_version)));
    }
    if file.kind != want {
        return Err(Error::Config(format!("{} holds a {:?} predictor", path.display(), file.kind)));
    }
    Ok(file.model)
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    config_hash: String,
    fitness_source: String,
    #[serde(flatten)]
    report: &'a SearchReport,
}

fn search(cfg: &RunConfig, predictor: Option<&Path>, direct: bool, latency: Option<&Path>) -> Result<()> {
    let backbone = match &cfg.paths.checkpoint {
        Some(p) if direct => load_checkpoint(p)?.config().clone(),
        _ => cfg.backbone.clone(),
    };
    let space = backbone.design_space()?;
    let latency_model = latency.map(|p| load_predictor(p, PredictorKind::Latency)).transpose()?;
    let constraint = cfg.search.constraint.clone();
    let mut check = |s: &ShapeVector| check_constraint(s, constraint.as_ref(), &backbone, latency_model.as_ref());

    let (report, source) = if direct {
        let model = load_model(cfg)?;
        let eval = eval_set(cfg, &model)?;
        let mut fitness = |s: &ShapeVector| evaluate_perplexity(&model, s, &eval);
        (evolve(&space, &cfg.search, &mut fitness, &mut check)?, "direct".to_string())
    } else {
        let path = predictor
            .ok_or_else(|| Error::Config("search needs --predictor or --direct".into()))?;
        let model = load_predictor(path, PredictorKind::Perplexity)?;
        let mut fitness = |s: &ShapeVector| {
            let params = count_params(&backbone, s)?;
            model.predict(&model_features(&model, s, params))
        };
        let report = evolve(&space, &cfg.search, &mut fitness, &mut check)?;
        (report, format!("predictor {}", path.display()))
    };
    let mut out = outputs(cfg)?;
    let doc = SearchOutput {
        config_hash: cfg.hash(),
        fitness_source: source,
        report: &report,
    };
    out.write("search.json", serde_json::to_string_pretty(&doc)? + "\n")?;
    out.write("search_history.csv", report.history_csv())?;
    out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
    out.commit();
    println!(
        "best {} fitness {:.6} params {}",
        report.best.shape, report.best.fitness, report.best.params
    );
    Ok(())
}

fn fit(cfg: &RunConfig, dataset: &Path, kind: PredictorKind) -> Result<()> {
    let file = fs::File::open(dataset)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dataset.display())))?;
    let samples = read_dataset_csv(file)?;
    let (model, report) = fit_predictor(&samples, kind, &cfg.gbt, cfg.base_seed())?;
    let file = PredictorFile {
        format_version: shaper::surrogate::FORMAT_VERSION,
        kind,
        model,
    };
    let mut out = outputs(cfg)?;
    out.write("predictor.json", serde_json::to_string_pretty(&file)? + "\n")?;
    out.write("fit_report.json", serde_json::to_string_pretty(&report)? + "\n")?;
    out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
    out.commit();
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!(
        "{kind:?} predictor: test R2 {} spearman {} ({} train / {} test)",
        show(report.test_r2),
        show(report.test_spearman),
        report.n_train,
        report.n_test
    );
    Ok(())
}

fn bench(cfg: &RunConfig, n: usize) -> Result<()> {
    let mut model = match &cfg.paths.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => Supernet::build(cfg.backbone.clone(), cfg.base_seed())?,
    };
    let space = model.design_space();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed());
    let mut out = outputs(cfg)?;
    let data = build_latency_dataset(&mut model, &space, n, &cfg.bench, &mut SystemClock::default(), &mut rng)?;
    let mut csv = Vec::new();
    write_dataset_csv(&data.samples(), &mut csv)?;
    out.write("latency_dataset.csv", csv)?;
    out.write("latency_dataset.json", serde_json::to_string_pretty(&data.sidecar)? + "\n")?;
    out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
    out.commit();
    eprintln!(
        "measured {}/{} shapes ({} failed, {} resolution warnings)",
        data.sidecar.measured, data.sidecar.requested, data.sidecar.failed, data.sidecar.warnings
    );
    Ok(())
}

#[derive(Serialize)]
struct ShapeOutput {
    format_version: u32,
    source: String,
    shape: ShapeVector,
    params: u64,
}

fn emit_shape(cfg: &RunConfig, name: &str, shape: &ShapeOutput) -> Result<()> {
    let json = serde_json::to_string_pretty(shape)? + "\n";
    print!("{json}");
    if cfg.paths.out_dir.is_some() {
        let mut out = outputs(cfg)?;
        out.write(name, json)?;
        out.write(EFFECTIVE_CONFIG, cfg.to_json())?;
        out.commit();
    }
    Ok(())
}
