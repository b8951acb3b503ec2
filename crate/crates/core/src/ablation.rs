//! Agreement studies over sensitivity rankings: across models, across
//! distance metrics, and across Monte Carlo sample sizes.

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::clients::{Embedder, Generator, SampleCache};
use crate::error::{Error, Result};
use crate::neighbors::NeighborSource;
use crate::pipeline::{collect_samples, run_dbsa, score, Clients, DbsaConfig, RunRecord, RunStatus, SensitivityReport};
use crate::seed;
use crate::statistics::{spearman_rank, DistanceMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    CrossModel,
    MetricAgreement,
    McSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sample_size: usize,
    /// Mean correlation over repeats where it was defined.
    pub mean: Option<f64>,
    /// Sample standard deviation of the same values.
    pub dispersion: Option<f64>,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum AblationValues {
    /// Square correlation matrix; `None` where the correlation is undefined.
    Matrix { rows: Vec<Vec<Option<f64>>> },
    Series { points: Vec<SweepPoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub kind: AblationKind,
    pub axes: Vec<String>,
    pub values: AblationValues,
    /// Mean off-diagonal correlation, for matrix results.
    pub mean_agreement: Option<f64>,
    pub run_configs: Vec<RunRecord>,
    pub warnings: Vec<String>,
}

impl AblationResult {
    pub fn matrix(&self) -> Option<&[Vec<Option<f64>>]> {
        match &self.values {
            AblationValues::Matrix { rows } => Some(rows),
            AblationValues::Series { .. } => None,
        }
    }

    pub fn series(&self) -> Option<&[SweepPoint]> {
        match &self.values {
            AblationValues::Series { points } => Some(points),
            AblationValues::Matrix { .. } => None,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Matrices: a header of axis labels, then one labelled row each.
    /// Series: one row per sample size.
    pub fn to_csv(&self) -> Result<String> {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Consistency(format!("csv: {e}"));
        match &self.values {
            AblationValues::Matrix { rows } => {
                let mut header = vec![String::new()];
                header.extend(self.axes.iter().cloned());
                w.write_record(&header).map_err(csv_err)?;
                for (label, row) in self.axes.iter().zip(rows) {
                    let mut record = vec![label.clone()];
                    record.extend(row.iter().map(|v| cell(*v)));
                    w.write_record(&record).map_err(csv_err)?;
                }
            }
            AblationValues::Series { points } => {
                w.write_record(["sample_size", "mean", "dispersion", "repeats"]).map_err(csv_err)?;
                for p in points {
                    w.write_record([
                        p.sample_size.to_string(),
                        cell(p.mean),
                        cell(p.dispersion),
                        p.values.len().to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Consistency(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Consistency(format!("csv: {e}")))
    }
}

/// A generator under comparison.
#[derive(Clone, Copy)]
pub struct ModelEntry<'a> {
    pub label: &'a str,
    pub generator: &'a dyn Generator,
}

/// Clients shared by every model in a study.
#[derive(Clone, Copy)]
pub struct SharedClients<'a> {
    pub embedder: &'a dyn Embedder,
    pub neighbors: &'a NeighborSource,
    pub cache: Option<&'a SampleCache>,
}

impl<'a> SharedClients<'a> {
    fn with(&self, generator: &'a dyn Generator) -> Clients<'a> {
        Clients {
            generator,
            embedder: self.embedder,
            neighbors: self.neighbors,
            cache: self.cache,
        }
    }
}

/// Spearman correlation of two reports' effects over the tokens scored in
/// both.
pub fn rank_agreement(a: &SensitivityReport, b: &SensitivityReport) -> Result<f64> {
    let scored = |r: &SensitivityReport| -> IndexMap<String, f64> {
        r.tokens
            .iter()
            .filter(|t| !t.skipped)
            .map(|t| (t.token.clone(), t.omega))
            .collect()
    };
    let (sa, sb) = (scored(a), scored(b));
    let (x, y): (Vec<f64>, Vec<f64>) = sa
        .iter()
        .filter_map(|(token, wa)| sb.get(token).map(|wb| (*wa, *wb)))
        .unzip();
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "only {} token(s) scored in both runs",
            x.len()
        )));
    }
    spearman_rank(&x, &y)
}

fn agreement_matrix(reports: &[&SensitivityReport], warnings: &mut Vec<String>, labels: &[String]) -> (Vec<Vec<Option<f64>>>, Option<f64>) {
    let k = reports.len();
    let mut rows = vec![vec![None; k]; k];
    let mut off_diagonal = Vec::new();
    for i in 0..k {
        rows[i][i] = Some(1.0);
        for j in (i + 1)..k {
            let rho = match rank_agreement(reports[i], reports[j]) {
                Ok(r) => Some(r),
                Err(e) => {
                    warnings.push(format!("{} vs {}: {e}", labels[i], labels[j]));
                    None
                }
            };
            rows[i][j] = rho;
            rows[j][i] = rho;
            off_diagonal.extend(rho);
        }
    }
    let mean = (!off_diagonal.is_empty()).then(|| off_diagonal.iter().sum::<f64>() / off_diagonal.len() as f64);
    (rows, mean)
}

/// Runs every model on `prompt` with the same seeds and correlates their
/// effect rankings. Models whose run fails entirely are dropped with a
/// warning.
pub fn cross_model_matrix(
    prompt: &str,
    models: &[ModelEntry<'_>],
    config: &DbsaConfig,
    shared: SharedClients<'_>,
) -> Result<AblationResult> {
    if models.len() < 2 {
        return Err(Error::Config("cross-model comparison needs at least two models".into()));
    }
    let mut warnings = Vec::new();
    let mut kept: Vec<(String, SensitivityReport)> = Vec::new();
    for model in models {
        match run_dbsa(prompt, config, shared.with(model.generator)) {
            Ok(r) if r.status() == RunStatus::Failed => {
                warnings.push(format!("model {} produced no scores; dropped", model.label));
            }
            Ok(r) => kept.push((model.label.to_owned(), r)),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                warn!("model {} failed: {e}", model.label);
                warnings.push(format!("model {} failed: {e}; dropped", model.label));
            }
        }
    }
    let axes: Vec<String> = kept.iter().map(|(l, _)| l.clone()).collect();
    let reports: Vec<&SensitivityReport> = kept.iter().map(|(_, r)| r).collect();
    let (rows, mean_agreement) = agreement_matrix(&reports, &mut warnings, &axes);
    Ok(AblationResult {
        kind: AblationKind::CrossModel,
        axes,
        values: AblationValues::Matrix { rows },
        mean_agreement,
        run_configs: kept.into_iter().map(|(_, r)| r.run_config).collect(),
        warnings,
    })
}

/// Draws one set of samples and scores it under each metric.
pub fn metric_agreement(
    prompt: &str,
    generator: &dyn Generator,
    config: &DbsaConfig,
    shared: SharedClients<'_>,
    metrics: &[DistanceMetric],
) -> Result<AblationResult> {
    if metrics.len() < 2 {
        return Err(Error::Config("metric agreement needs at least two metrics".into()));
    }
    let run = collect_samples(prompt, config, shared.with(generator))?;
    let reports = metrics
        .iter()
        .map(|&metric| {
            let scoring = crate::pipeline::ScoringConfig {
                metric,
                ..config.scoring.clone()
            };
            score(&run, &scoring)
        })
        .collect::<Result<Vec<_>>>()?;
    let axes: Vec<String> = metrics.iter().map(|m| m.name().to_owned()).collect();
    let mut warnings = Vec::new();
    let refs: Vec<&SensitivityReport> = reports.iter().collect();
    let (rows, mean_agreement) = agreement_matrix(&refs, &mut warnings, &axes);
    Ok(AblationResult {
        kind: AblationKind::MetricAgreement,
        axes,
        values: AblationValues::Matrix { rows },
        mean_agreement,
        run_configs: reports.into_iter().map(|r| r.run_config).collect(),
        warnings,
    })
}

fn mean_and_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    (Some(mean), sd)
}

/// For each sample size, runs both models `repeats` times with fresh seeds
/// and records the correlation of their effect rankings. Each model gets
/// its own seed in every repeat, so two copies of the same model measure
/// run-to-run agreement.
pub fn mc_sweep(
    prompt: &str,
    models: [ModelEntry<'_>; 2],
    config: &DbsaConfig,
    shared: SharedClients<'_>,
    sample_sizes: &[usize],
    repeats: usize,
) -> Result<AblationResult> {
    if repeats < 2 {
        return Err(Error::Config("mc-sweep needs at least two repeats".into()));
    }
    if sample_sizes.is_empty() || sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sample sizes must be nonempty and strictly ascending".into()));
    }
    let mut warnings = Vec::new();
    let mut run_configs = Vec::new();
    let mut points = Vec::with_capacity(sample_sizes.len());
    for &n in sample_sizes {
        let mut values = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut reports = Vec::with_capacity(2);
            for (slot, model) in models.iter().enumerate() {
                let mut cfg = config.clone();
                cfg.generation.sample_count_n = n;
                cfg.run_seed = seed::derive(config.run_seed, format!("mc-sweep/{n}/{r}/{slot}"));
                reports.push(run_dbsa(prompt, &cfg, shared.with(model.generator))?);
            }
            let rho = match rank_agreement(&reports[0], &reports[1]) {
                Ok(rho) => Some(rho),
                Err(e) => {
                    warnings.push(format!("n={n} repeat {r}: {e}"));
                    None
                }
            };
            values.push(rho);
            run_configs.extend(reports.into_iter().map(|rep| rep.run_config));
        }
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, dispersion) = mean_and_sd(&defined);
        points.push(SweepPoint {
            sample_size: n,
            mean,
            dispersion,
            values,
        });
    }
    Ok(AblationResult {
        kind: AblationKind::McSweep,
        axes: sample_sizes.iter().map(|n| n.to_string()).collect(),
        values: AblationValues::Series { points },
        mean_agreement: None,
        run_configs,
        warnings,
    })
}
