use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use dbsa::ablation::{self, AblationKind, AblationResult, ModelEntry, SharedClients};
use dbsa::clients::http::{HttpEmbedder, HttpGenerator};
use dbsa::clients::mock::{MockGenerator, MockSpec};
use dbsa::clients::{Embedder, Generator, SampleCache};
use dbsa::fixtures;
use dbsa::neighbors::{KnnIndex, NeighborSource, StaticNeighborTable};
use dbsa::pipeline::{run_dbsa, Clients, RunStatus, SensitivityReport};
use dbsa::reporting::{render, RenderOptions};
use dbsa::statistics::DistanceMetric;
use dbsa::tokenization::tokenize;
use dbsa::{Error, Result};

use crate::settings::{Layer, NeighborSpec, RunConfig};
use crate::{AblateArgs, AblationCommand, AnalyzeArgs, FixturesArgs, PromptArgs, EXIT_FAILED, EXIT_OK, EXIT_PARTIAL};

type Env<'a> = &'a dyn Fn(&str) -> Option<String>;

fn read_prompt(args: &PromptArgs) -> Result<String> {
    match (&args.prompt, &args.prompt_file) {
        (Some(text), _) => Ok(text.clone()),
        (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e)),
        (None, None) => Err(Error::Argument("one of --prompt or --prompt-file is required".into())),
    }
}

fn layered(flags: Layer, config_file: Option<&Path>, env: Env<'_>) -> Result<RunConfig> {
    let file = config_file.map(Layer::from_toml_file).transpose()?.unwrap_or_default();
    let from_env = Layer::from_env(env)?;
    RunConfig::resolve(flags.over(file.over(from_env)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_out(out: &mut dyn Write, bytes: &[u8]) -> Result<()> {
    out.write_all(bytes).map_err(|e| Error::io("<stdout>", e))
}

/// Generator and embedder for a run, either mocks or HTTP clients.
struct Services {
    generators: Vec<(String, Box<dyn Generator>)>,
    embedder: Box<dyn Embedder>,
}

fn mock_services(paths: &[PathBuf]) -> Result<Services> {
    let mut generators: Vec<(String, Box<dyn Generator>)> = Vec::new();
    let mut embedder = None;
    for path in paths {
        let spec = MockSpec::load(path)?;
        let generator = MockGenerator::new(spec.generator)?;
        let label = generator.model_name().to_owned();
        generators.push((label, Box::new(generator)));
        embedder.get_or_insert(spec.embedder);
    }
    let embedder = embedder.ok_or_else(|| Error::Argument("no mock spec given".into()))?;
    Ok(Services { generators, embedder: Box::new(embedder) })
}

fn http_services(config: &RunConfig, models: &[String]) -> Result<Services> {
    let mut generators: Vec<(String, Box<dyn Generator>)> = Vec::new();
    for model in models {
        let mut generation = config.dbsa.generation.clone();
        generation.model_name = model.clone();
        generators.push((model.clone(), Box::new(HttpGenerator::from_env(&generation)?)));
    }
    let embedder = HttpEmbedder::from_env(&config.embedder)?;
    Ok(Services { generators, embedder: Box::new(embedder) })
}

/// Distinct labels, suffixing repeats with their position.
fn unique_labels(services: &mut Services) {
    let labels: Vec<String> = services.generators.iter().map(|(l, _)| l.clone()).collect();
    for (i, (label, _)) in services.generators.iter_mut().enumerate() {
        if labels.iter().filter(|l| *l == label).count() > 1 {
            *label = format!("{label}#{}", i + 1);
        }
    }
}

fn neighbor_source(spec: &NeighborSpec, config: &RunConfig, embedder: &dyn Embedder) -> Result<NeighborSource> {
    Ok(match spec {
        NeighborSpec::Static(path) => NeighborSource::StaticTable(StaticNeighborTable::load(path)?),
        NeighborSpec::Knn(path) => {
            let lexicon = KnnIndex::load_lexicon(path)?;
            NeighborSource::EmbeddingKnn(KnnIndex::build(&lexicon, embedder, config.dbsa.scoring.metric)?)
        }
        NeighborSpec::Synonyms => NeighborSource::GeneratorSynonyms,
    })
}

fn open_cache(config: &RunConfig) -> Result<Option<SampleCache>> {
    config.cache_dir.as_ref().map(SampleCache::open).transpose()
}

fn dry_run(prompt: &str, config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let tokenized = tokenize(prompt);
    let index = tokenized.unique_index();
    let k = config.dbsa.k;
    let (units, exact, neighbor_requests) = match &config.neighbors {
        NeighborSpec::Static(path) => {
            let table = StaticNeighborTable::load(path)?;
            let units = index.iter().map(|(t, p)| table.lookup(t, k).len() * p.len()).sum();
            (units, true, 0)
        }
        NeighborSpec::Knn(_) => (index.values().map(|p| p.len() * k).sum(), false, 0),
        NeighborSpec::Synonyms => (index.values().map(|p| p.len() * k).sum(), false, index.len()),
    };
    let calls = if units == 0 { 0 } else { config.dbsa.sampling_calls(units) };
    let n = config.dbsa.generation.sample_count_n;
    let batches = n.div_ceil(config.embedder.batch_size.max(1));
    let bound = if exact { "" } else { " (upper bound)" };
    let text = format!(
        "tokens: {}\noccurrences: {}\nunits: {units}{bound}\nsampling_calls: {calls}{bound}\n\
         generation_requests: {}{bound}\nembedding_requests: {}{bound}\n",
        index.len(),
        tokenized.tokens().len(),
        calls * n + neighbor_requests,
        calls * batches,
    );
    write_out(out, text.as_bytes())
}

fn write_reports(report: &SensitivityReport, config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    for &format in &config.formats {
        let options = RenderOptions { format, ..config.render.clone() };
        let bytes = render(report, &options)?;
        match &config.output {
            Some(path) if config.formats.len() > 1 => {
                let path = path.with_extension(format.extension());
                write_file(&path, &bytes)?;
                info!("wrote {}", path.display());
            }
            Some(path) => {
                write_file(path, &bytes)?;
                info!("wrote {}", path.display());
            }
            None => write_out(out, &bytes)?,
        }
    }
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs, env: Env<'_>, out: &mut dyn Write) -> Result<i32> {
    let config = layered(args.layer(), args.run.config.as_deref(), env)?;
    let prompt = read_prompt(&args.prompt)?;
    if args.dry_run {
        dry_run(&prompt, &config, out)?;
        return Ok(EXIT_OK);
    }
    let services = match &config.mock {
        Some(path) => mock_services(std::slice::from_ref(path))?,
        None => http_services(&config, std::slice::from_ref(&config.dbsa.generation.model_name))?,
    };
    let neighbors = neighbor_source(&config.neighbors, &config, services.embedder.as_ref())?;
    let cache = open_cache(&config)?;
    let clients = Clients {
        generator: services.generators[0].1.as_ref(),
        embedder: services.embedder.as_ref(),
        neighbors: &neighbors,
        cache: cache.as_ref(),
    };
    let report = run_dbsa(&prompt, &config.dbsa, clients)?;
    write_reports(&report, &config, out)?;
    Ok(match report.status() {
        RunStatus::Complete => EXIT_OK,
        RunStatus::Partial => {
            eprintln!("warning: {} token(s) skipped, {} unit(s) failed",
                report.tokens.iter().filter(|t| t.skipped).count(), report.failures.len());
            EXIT_PARTIAL
        }
        RunStatus::Failed => {
            eprintln!("error: no token could be scored");
            EXIT_FAILED
        }
    })
}

fn kind_name(kind: AblationKind) -> &'static str {
    match kind {
        AblationKind::CrossModel => "cross_model",
        AblationKind::MetricAgreement => "metric_agreement",
        AblationKind::McSweep => "mc_sweep",
    }
}

pub fn ablate(args: &AblateArgs, env: Env<'_>, out: &mut dyn Write) -> Result<i32> {
    let flags = Layer { model_name: args.model.first().cloned(), ..args.run.layer() };
    let config = layered(flags, args.run.config.as_deref(), env)?;
    let prompt = read_prompt(&args.prompt)?;
    let metrics = if args.metrics.is_empty() {
        DistanceMetric::ALL.to_vec()
    } else {
        args.metrics.iter().map(|m| m.parse()).collect::<Result<Vec<DistanceMetric>>>()?
    };
    let mut services = if !args.mock.is_empty() {
        mock_services(&args.mock)?
    } else if let Some(path) = &config.mock {
        mock_services(std::slice::from_ref(path))?
    } else if !args.model.is_empty() {
        http_services(&config, &args.model)?
    } else {
        http_services(&config, std::slice::from_ref(&config.dbsa.generation.model_name))?
    };
    unique_labels(&mut services);
    let neighbors = neighbor_source(&config.neighbors, &config, services.embedder.as_ref())?;
    let cache = open_cache(&config)?;
    let shared = SharedClients {
        embedder: services.embedder.as_ref(),
        neighbors: &neighbors,
        cache: cache.as_ref(),
    };
    let entries: Vec<ModelEntry<'_>> = services
        .generators
        .iter()
        .map(|(label, g)| ModelEntry { label, generator: g.as_ref() })
        .collect();
    let result: AblationResult = match args.study {
        AblationCommand::CrossModel => ablation::cross_model_matrix(&prompt, &entries, &config.dbsa, shared)?,
        AblationCommand::Metrics => {
            ablation::metric_agreement(&prompt, entries[0].generator, &config.dbsa, shared, &metrics)?
        }
        AblationCommand::McSweep => {
            let [a, b] = entries[..] else {
                return Err(Error::Config(format!(
                    "mc-sweep compares exactly two models, got {}",
                    entries.len()
                )));
            };
            ablation::mc_sweep(&prompt, [a, b], &config.dbsa, shared, &args.sizes, args.repeats)?
        }
    };
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    let stem = kind_name(result.kind);
    let csv_path = args.out_dir.join(format!("{stem}.csv"));
    let json_path = args.out_dir.join(format!("{stem}.json"));
    write_file(&csv_path, result.to_csv()?.as_bytes())?;
    write_file(&json_path, &result.to_json()?)?;
    let summary = format!("{}\n{}\n", csv_path.display(), json_path.display());
    write_out(out, summary.as_bytes())?;
    Ok(EXIT_OK)
}

pub fn fixtures(args: &FixturesArgs, out: &mut dyn Write) -> Result<i32> {
    let mut listing = String::new();
    for fixture in fixtures::all() {
        if args.list {
            listing.push_str(fixture.file_name);
        } else {
            let path = args.dir.join(fixture.file_name);
            write_file(&path, fixture.contents.as_bytes())?;
            listing.push_str(&path.display().to_string());
        }
        listing.push('\n');
    }
    write_out(out, listing.as_bytes())?;
    Ok(EXIT_OK)
}
