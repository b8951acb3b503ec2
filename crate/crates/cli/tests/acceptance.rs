//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use dbsa::ablation::{self, ModelEntry, SharedClients};
use dbsa::clients::mock::CountingGenerator;
use dbsa::clients::GenerationConfig;
use dbsa::fixtures::{self, PROMPTS};
use dbsa::pipeline::{run_dbsa, top_k_table, Clients, DbsaConfig, ScoringConfig};
use dbsa::seed;
use dbsa::statistics::{energy_distance, permutation_test_energy, DistanceMetric, Matrix};
use dbsa::tokenization::tokenize;

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut seed::Stream, rows: usize, dim: usize, offset: f64) -> Matrix {
    Matrix::from_rows(
        (0..rows)
            .map(|_| (0..dim).map(|_| offset + 4.0 * seed::unit_f64(rng) - 2.0).collect())
            .collect(),
    )
    .unwrap()
}

fn oracle_distance(metric: DistanceMetric, u: &[f64], v: &[f64]) -> f64 {
    match metric {
        DistanceMetric::L1 => u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum(),
        DistanceMetric::L2 => u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        DistanceMetric::CosineDistance => {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            1.0 - dot / (nu * nv)
        }
    }
}

fn mean_cross(metric: DistanceMetric, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for u in a {
        for v in b {
            total += oracle_distance(metric, u, v);
        }
    }
    total / (a.len() * b.len()) as f64
}

fn oracle_energy(metric: DistanceMetric, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    2.0 * mean_cross(metric, x, y) - mean_cross(metric, x, x) - mean_cross(metric, y, y)
}

fn statistics_oracle() -> Outcome {
    let mut rng = seed::stream(seed::derive(1, "acceptance/oracle"), 0);
    let mut worst: f64 = 0.0;
    for instance in 0..200 {
        let n = 1 + seed::below(&mut rng, 20) as usize;
        let m = 1 + seed::below(&mut rng, 20) as usize;
        let d = 1 + seed::below(&mut rng, 8) as usize;
        let x = random_matrix(&mut rng, n, d, 0.0);
        let shift = 0.5 + seed::unit_f64(&mut rng);
        let y = random_matrix(&mut rng, m, d, shift);
        for metric in DistanceMetric::ALL {
            let got = energy_distance(&x, &y, metric).map_err(|e| e.to_string())?;
            let want = oracle_energy(metric, &x.to_rows(), &y.to_rows());
            let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            check(rel <= 1e-12, || format!("instance {instance} {metric:?}: {got} vs {want}"))?;
            let swapped = energy_distance(&y, &x, metric).map_err(|e| e.to_string())?;
            check((swapped - got).abs() <= 1e-12 * got.abs(), || format!("instance {instance}: asymmetric"))?;
            let same = energy_distance(&x, &x, metric).map_err(|e| e.to_string())?;
            check(same == 0.0, || format!("instance {instance} {metric:?}: E(X,X) = {same}"))?;
        }
    }
    Ok(format!("600 comparisons, worst relative error {worst:.1e}"))
}

fn exact_permutation_agreement() -> Outcome {
    let mut rng = seed::stream(seed::derive(2, "acceptance/exact"), 0);
    let splits: Vec<[usize; 3]> = (0..6)
        .flat_map(|a| (a + 1..6).flat_map(move |b| (b + 1..6).map(move |c| [a, b, c])))
        .collect();
    assert_eq!(splits.len(), 20);
    let mut worst_z: f64 = 0.0;
    let mut deviations = Vec::new();
    for instance in 0..50u64 {
        let d = 1 + seed::below(&mut rng, 4) as usize;
        let metric = DistanceMetric::ALL[instance as usize % 3];
        let x = random_matrix(&mut rng, 3, d, 0.0);
        let shift = seed::unit_f64(&mut rng);
        let y = random_matrix(&mut rng, 3, d, shift);
        let pooled: Vec<Vec<f64>> = x.to_rows().into_iter().chain(y.to_rows()).collect();
        let observed = oracle_energy(metric, &pooled[..3], &pooled[3..]);
        let scale = mean_cross(metric, &pooled, &pooled);
        let hits = splits
            .iter()
            .filter(|s| {
                let (a, b): (Vec<_>, Vec<_>) = (0..6).map(|i| (s.contains(&i), pooled[i].clone())).partition(|p| p.0);
                let a: Vec<_> = a.into_iter().map(|p| p.1).collect();
                let b: Vec<_> = b.into_iter().map(|p| p.1).collect();
                oracle_energy(metric, &a, &b) >= observed - 1e-9 * scale
            })
            .count();
        let exact = hits as f64 / 20.0;
        let test_seed = seed::derive_indexed(2, "acceptance/exact/permutations", instance);
        let mc = permutation_test_energy(&x, &y, 10_000, metric, test_seed)
            .map_err(|e| e.to_string())?
            .p_value;
        let se = (exact * (1.0 - exact) / 10_000.0).sqrt();
        let diff = (mc - exact).abs();
        if se > 0.0 {
            worst_z = worst_z.max(diff / se);
            deviations.push((mc - exact) / se);
        }
        check(diff <= 3.0 * se, || format!("instance {instance}: monte carlo {mc} vs exact {exact} (se {se:.4})"))?;
    }
    // Individual deviations may be noise; a shared sign would be bias.
    let mean_z = deviations.iter().sum::<f64>() / deviations.len() as f64;
    let bound = 3.0 / (deviations.len() as f64).sqrt();
    check(mean_z.abs() <= bound, || format!("mean standardized deviation {mean_z:.3} exceeds {bound:.3}"))?;
    Ok(format!("50 instances, worst deviation {worst_z:.2} standard errors, mean {mean_z:+.3}"))
}

fn dbsa_config(n: usize, k: usize, permutations: usize, run_seed: u64) -> DbsaConfig {
    DbsaConfig {
        generation: GenerationConfig { sample_count_n: n, ..Default::default() },
        k,
        run_seed,
        scoring: ScoringConfig { permutations: Some(permutations), ..Default::default() },
        ..Default::default()
    }
}

fn planted_detection() -> Outcome {
    let spec = planted_spec("mock-planted");
    let generator = generator(&spec);
    let neighbors = static_source(PLANTED_TABLE);
    let clients = Clients { generator: &generator, embedder: &spec.embedder, neighbors: &neighbors, cache: None };
    let mut successes = 0;
    let mut misses = Vec::new();
    for run_seed in 0..20 {
        let report = run_dbsa(PLANTED_PROMPT, &dbsa_config(40, 3, 500, run_seed), clients).map_err(|e| e.to_string())?;
        let top = &top_k_table(&report, 1, 0.05)[0];
        let others_null = report
            .tokens
            .iter()
            .filter(|t| t.token != "congestive")
            .all(|t| t.p_value >= 0.05);
        if top.token == "congestive" && top.p_value < 0.05 && others_null {
            successes += 1;
        } else {
            misses.push(run_seed);
        }
    }
    check(successes >= 19, || format!("{successes}/20 seeds succeeded, failed seeds {misses:?}"))?;
    Ok(format!("{successes}/20 seeds"))
}

fn null_calibration() -> Outcome {
    let spec = null_spec();
    let generator = generator(&spec);
    let neighbors = static_source(PLANTED_TABLE);
    let clients = Clients { generator: &generator, embedder: &spec.embedder, neighbors: &neighbors, cache: None };
    let mut p_values = Vec::new();
    for run_seed in 0..20 {
        let report = run_dbsa(PLANTED_PROMPT, &dbsa_config(40, 3, 500, run_seed), clients).map_err(|e| e.to_string())?;
        p_values.extend(report.tokens.iter().flat_map(|t| t.units.iter().map(|u| u.p_value)));
    }
    check(p_values.len() >= 500, || format!("only {} unit p-values", p_values.len()))?;
    p_values.sort_by(f64::total_cmp);
    let count = p_values.len() as f64;
    let ks = p_values
        .iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / count).max((i + 1) as f64 / count - p))
        .fold(0.0, f64::max);
    check(ks < 0.1, || format!("KS distance {ks:.4} over {} p-values", p_values.len()))?;
    Ok(format!("KS distance {ks:.4} over {} unit p-values", p_values.len()))
}

fn metric_interchangeability() -> Outcome {
    let spec = graded_spec("mock-graded");
    let generator = generator(&spec);
    let neighbors = static_source(GRADED_TABLE);
    let shared = SharedClients { embedder: &spec.embedder, neighbors: &neighbors, cache: None };
    let result = ablation::metric_agreement(
        GRADED_PROMPT,
        &generator,
        &dbsa_config(40, 2, 200, 5),
        shared,
        &DistanceMetric::ALL,
    )
    .map_err(|e| e.to_string())?;
    let rows = result.matrix().ok_or("matrix expected")?;
    let mut worst: f64 = 1.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, value) in row.iter().enumerate() {
            if i != j {
                let rho = value.ok_or_else(|| format!("undefined correlation at ({i}, {j})"))?;
                worst = worst.min(rho);
            }
        }
    }
    check(worst >= 0.9, || format!("lowest pairwise Spearman {worst:.3}"))?;
    Ok(format!("lowest pairwise Spearman {worst:.3}"))
}

fn mc_stabilization() -> Outcome {
    let (spec_a, spec_b) = (graded_spec("mock-a"), graded_spec("mock-b"));
    let (gen_a, gen_b) = (generator(&spec_a), generator(&spec_b));
    let neighbors = static_source(GRADED_TABLE);
    let shared = SharedClients { embedder: &spec_a.embedder, neighbors: &neighbors, cache: None };
    let models = [
        ModelEntry { label: "mock-a", generator: &gen_a },
        ModelEntry { label: "mock-b", generator: &gen_b },
    ];
    let result = ablation::mc_sweep(GRADED_PROMPT, models, &dbsa_config(40, 2, 100, 11), shared, &[4, 40], 10)
        .map_err(|e| e.to_string())?;
    let points = result.series().ok_or("series expected")?;
    let small = points[0].dispersion.ok_or("no dispersion at n = 4")?;
    let large = points[1].dispersion.ok_or("no dispersion at n = 40")?;
    check(large < small, || format!("dispersion {large:.4} at n = 40 vs {small:.4} at n = 4"))?;
    Ok(format!("dispersion {small:.4} at n = 4, {large:.4} at n = 40"))
}

fn reference_top5_structure() -> Outcome {
    let rows = top_k_table(&fixtures::reference_top5_report(), 5, 0.05);
    let got: Vec<(&str, f64, f64, bool)> =
        rows.iter().map(|r| (r.token.as_str(), r.omega, r.p_value, r.significant)).collect();
    let want: Vec<(&str, f64, f64, bool)> = [
        ("congestive", 0.08, 0.11),
        ("examination", 0.07, 0.16),
        ("Lower", 0.07, 0.28),
        ("mid", 0.07, 0.39),
        ("hypertensive", 0.06, 0.31),
    ]
    .iter()
    .map(|&(t, w, p)| (t, w, p, false))
    .collect();
    check(got == want, || format!("{got:?}"))?;
    Ok("ordering and marks match".into())
}

fn tokenizer_golden() -> Outcome {
    for fixture in PROMPTS {
        let name = fixture.file_name.trim_end_matches(".txt");
        let path = format!("{}/../core/tests/golden/{name}.tokens", env!("CARGO_MANIFEST_DIR"));
        let golden = std::fs::read(&path).map_err(|e| format!("{path}: {e}"))?;
        let tokenized = tokenize(fixture.contents);
        let tokens = tokenized.token_strings();
        let mut rendered = tokens.join("\n");
        rendered.push('\n');
        check(rendered.as_bytes() == golden, || format!("{name} differs from golden file"))?;
        let squeezed: String = fixture.contents.chars().filter(|c| !c.is_whitespace()).collect();
        check(tokens.concat() == squeezed, || format!("{name}: tokens do not cover the text"))?;
        for t in &tokens {
            let is_word = t.chars().all(|c| c.is_alphanumeric() || c == '_');
            let is_number = t.trim_start_matches('$').chars().next().is_some_and(|c| c.is_ascii_digit());
            let is_mark = t.chars().count() == 1;
            check(is_word || is_number || is_mark, || format!("{name}: unexpected token {t:?}"))?;
        }
    }
    let legal = tokenize(fixtures::PROMPT_LEGAL);
    let legal = legal.token_strings();
    check(legal.contains(&"$10"), || "$10 not a single token".into())?;
    let at = legal.iter().position(|t| *t == "50").ok_or("50 missing")?;
    check(legal[at + 1] == "%", || "% does not follow 50".into())?;
    let medical = tokenize(fixtures::PROMPT_MEDICAL);
    let medical = medical.token_strings();
    let at = medical.iter().position(|t| *t == "45").ok_or("45 missing")?;
    check(medical[at..at + 5] == ["45", "-", "year", "-", "old"], || "45-year-old split wrongly".into())?;
    check(medical.contains(&"+"), || "+ missing".into())?;
    Ok("4 prompts match byte for byte".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mock = write_json(&dir.path().join("mock.json"), &planted_spec("mock-planted"));
    let table = dir.path().join("table.json");
    std::fs::write(&table, PLANTED_TABLE).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (run, concurrency) in [1, 8, 8].into_iter().enumerate() {
        let base = dir.path().join(format!("run{run}/report"));
        let status = Command::new(env!("CARGO_BIN_EXE_dbsa"))
            .args(["analyze", "--prompt", PLANTED_PROMPT, "--seed", "7", "--format", "json", "--format", "html"])
            .arg("--mock")
            .arg(&mock)
            .arg(format!("--neighbors=static:{}", table.display()))
            .args(["--max-concurrent-requests", &concurrency.to_string()])
            .arg("-o")
            .arg(&base)
            .status()
            .map_err(|e| e.to_string())?;
        check(status.code() == Some(0), || format!("run {run} exited with {status}"))?;
        let json = std::fs::read(base.with_extension("json")).map_err(|e| e.to_string())?;
        let html = std::fs::read(base.with_extension("html")).map_err(|e| e.to_string())?;
        outputs.push((json, html));
    }
    check(outputs.windows(2).all(|w| w[0] == w[1]), || "reports differ between runs".into())?;
    Ok(format!("3 runs, {} JSON bytes and {} HTML bytes identical", outputs[0].0.len(), outputs[0].1.len()))
}

fn work_accounting() -> Outcome {
    let spec = planted_spec("mock-planted");
    let neighbors = static_source(PLANTED_TABLE);
    let table = dbsa::neighbors::StaticNeighborTable::from_json_str(PLANTED_TABLE).map_err(|e| e.to_string())?;
    let n = 10;
    let k = 3;
    let tokenized = tokenize(PLANTED_PROMPT);
    let units: usize = tokenized.unique_index().iter().map(|(t, p)| p.len() * table.lookup(t, k).len()).sum();
    for per_unit in [false, true] {
        let counting = CountingGenerator::new(generator(&spec));
        let clients = Clients { generator: &counting, embedder: &spec.embedder, neighbors: &neighbors, cache: None };
        let config = DbsaConfig { resample_baseline_per_unit: per_unit, ..dbsa_config(n, k, 20, 3) };
        run_dbsa(PLANTED_PROMPT, &config, clients).map_err(|e| e.to_string())?;
        let baseline_calls = if per_unit { units } else { 1 };
        check(counting.draws_for(PLANTED_PROMPT) == baseline_calls * n, || {
            format!("per_unit={per_unit}: {} baseline draws", counting.draws_for(PLANTED_PROMPT))
        })?;
        check(counting.distinct_prompts() == 1 + units, || {
            format!("per_unit={per_unit}: {} distinct prompts for {units} units", counting.distinct_prompts())
        })?;
        let snapshot = counting.snapshot();
        check(
            snapshot.iter().filter(|(p, _)| p.as_str() != PLANTED_PROMPT).all(|(_, &c)| c == n),
            || format!("per_unit={per_unit}: a perturbed prompt was not drawn exactly once"),
        )?;
        check(counting.total_draws() == (baseline_calls + units) * n, || {
            format!("per_unit={per_unit}: {} draws in total", counting.total_draws())
        })?;
    }
    Ok(format!("1 baseline + {units} perturbed sampling calls; {units} + {units} with per-unit baselines"))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "statistics oracle", limit: Duration::from_secs(10), run: statistics_oracle },
        Criterion { name: "exact permutation agreement", limit: Duration::from_secs(60), run: exact_permutation_agreement },
        Criterion { name: "planted sensitivity detection", limit: Duration::from_secs(120), run: planted_detection },
        Criterion { name: "null calibration", limit: Duration::from_secs(120), run: null_calibration },
        Criterion { name: "metric interchangeability", limit: Duration::from_secs(60), run: metric_interchangeability },
        Criterion { name: "sample size stabilization", limit: Duration::from_secs(180), run: mc_stabilization },
        Criterion { name: "reference top-5 table structure", limit: Duration::from_secs(1), run: reference_top5_structure },
        Criterion { name: "tokenizer golden files", limit: Duration::from_secs(1), run: tokenizer_golden },
        Criterion { name: "determinism across concurrency", limit: Duration::from_secs(60), run: determinism },
        Criterion { name: "work accounting", limit: Duration::from_secs(5), run: work_accounting },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= c.limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, limit {:?}", c.limit))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {}: {detail} [{elapsed:.2?}]", i + 1, c.name),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {}: {reason} [{elapsed:.2?}]", i + 1, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
