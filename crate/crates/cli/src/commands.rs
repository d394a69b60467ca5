use std::path::{Path, PathBuf};

use attnprior_core::attention_prior::{
    all_stats, checks, figure2_sweep, figure3_population, log_density, AttentionPriorParams, DensityReport,
    EmbeddingSequence, Figure2Config, Figure3Config, Figure3Table, Masking,
};
use attnprior_core::report::CheckReport;
use attnprior_core::rng::{derived_rng, normal_vec};
use attnprior_core::{depth_hierarchy, process_consistency, Tensor};
use attnprior_lm::checkpoint::Checkpoint;
use attnprior_lm::data::Corpus;
use attnprior_lm::manifest::RunManifest;
use attnprior_lm::sweep::{lambda_sweep as run_lambda_sweep, run, LambdaSweep, TrainRunRecord};
use attnprior_lm::train::TrainLog;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{ensure_dir, write_csv, write_json, write_text, Cell};
use crate::svg::{plot, Series, Style};

fn manifest(cfg: &RunConfig, command: &str) -> Result<RunManifest> {
    Ok(RunManifest::new(command, cfg.seed()?, cfg.values.clone()))
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    m.write(&out.join(format!("{}_manifest.json", m.command.replace('-', "_"))))?;
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    Ok(out)
}

fn parse_mode(cfg: &RunConfig) -> Result<Masking> {
    match cfg.raw("prior.mode") {
        "strict" => Ok(Masking::Strict),
        "inclusive" => Ok(Masking::Inclusive),
        other => Err(CliError::config("prior.mode", format!("expected strict or inclusive, got {other:?}"))),
    }
}

fn square(cfg: &RunConfig, key: &str, d: Option<usize>) -> Result<Option<Tensor>> {
    let v = cfg.list(key)?;
    if v.is_empty() {
        return Ok(None);
    }
    let n = (v.len() as f64).sqrt().round() as usize;
    if n * n != v.len() || d.is_some_and(|d| d != n) {
        return Err(CliError::config(key, format!("{} entries do not form the expected square matrix", v.len())));
    }
    Ok(Some(Tensor::matrix(n, n, v)?))
}

/// The prior described by the `[prior]` section: the scalar prior with
/// coupling `a` unless `w_q` is given, in which case `w_k` and `w_v`
/// default to the identity.
pub fn prior_from_config(cfg: &RunConfig) -> Result<AttentionPriorParams> {
    let sigma: f64 = cfg.get("prior.sigma")?;
    let mode = parse_mode(cfg)?;
    match square(cfg, "prior.w_q", None)? {
        None => Ok(AttentionPriorParams::scalar(cfg.get("prior.a")?, sigma, mode)?),
        Some(w_q) => {
            let d = w_q.rows();
            let w_k = square(cfg, "prior.w_k", Some(d))?.unwrap_or_else(|| Tensor::eye(d));
            let w_v = square(cfg, "prior.w_v", Some(d))?.unwrap_or_else(|| Tensor::eye(d));
            Ok(AttentionPriorParams::new(w_q, w_k, w_v, sigma, mode)?)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingSummary {
    pub a: f64,
    pub peak_x3: f64,
    pub peak_density: f64,
    /// First grid dispersion where `1 - a·Var` stops being positive.
    pub degeneracy_var: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiguresSummary {
    pub couplings: Vec<CouplingSummary>,
    pub population_pos_a: f64,
    pub population_pos_valid: usize,
    pub population_neg_a: f64,
    pub population_neg_valid: usize,
    pub population_size: usize,
    pub files: Vec<String>,
}

fn population_rows(t: &Figure3Table) -> Vec<Vec<Cell>> {
    t.rows
        .iter()
        .map(|r| vec![r.index.into(), r.var.into(), r.factor.into(), r.log_density.into(), r.valid.into()])
        .collect()
}

fn population_svg(t: &Figure3Table) -> String {
    let pick = |valid: bool| Series {
        label: if valid { "valid".into() } else { "invalid".into() },
        points: t.rows.iter().filter(|r| r.valid == valid).map(|r| (r.var, r.factor)).collect(),
    };
    plot(
        &format!("a = {}: {}/{} valid", t.a, t.valid_count, t.rows.len()),
        "attention-weighted variance",
        "diagonal factor",
        &[pick(true), pick(false)],
        Style::Markers,
    )
}

/// Positive versus negative coupling: conditional densities and diagonal
/// factors for the scalar prior, plus random-population validity counts.
pub fn theory_figures(cfg: &RunConfig) -> Result<FiguresSummary> {
    let out = out_dir(cfg)?;
    let seed = cfg.seed()?;
    let fig2 = Figure2Config {
        x1: cfg.get("figures.x1")?,
        x2: cfg.get("figures.x2")?,
        sigma: cfg.get("prior.sigma")?,
        x3_min: cfg.get("figures.x3_min")?,
        x3_max: cfg.get("figures.x3_max")?,
        x3_points: cfg.get("figures.x3_points")?,
        couplings: cfg.list("figures.couplings")?,
        var_max: cfg.get("figures.var_max")?,
        var_points: cfg.get("figures.var_points")?,
    };
    let table = figure2_sweep(&fig2)?;
    write_csv(
        &out.join("fig2_density.csv"),
        &["a", "x3", "density", "factor", "var"],
        &table.density.iter().map(|r| vec![r.a.into(), r.x3.into(), r.density.into(), r.factor.into(), r.var.into()]).collect::<Vec<_>>(),
    )?;
    write_csv(
        &out.join("fig2_factor.csv"),
        &["a", "var", "factor"],
        &table.factor.iter().map(|r| vec![r.a.into(), r.var.into(), r.factor.into()]).collect::<Vec<_>>(),
    )?;
    let series = |f: &dyn Fn(f64) -> Vec<(f64, f64)>| -> Vec<Series> {
        fig2.couplings.iter().map(|&a| Series { label: format!("a = {a}"), points: f(a) }).collect()
    };
    write_text(
        &out.join("fig2_density.svg"),
        &plot(
            &format!("density of x3 given x1 = {}, x2 = {}", fig2.x1, fig2.x2),
            "x3",
            "density",
            &series(&|a| table.density.iter().filter(|r| r.a == a).map(|r| (r.x3, r.density)).collect()),
            Style::Lines,
        ),
    )?;
    write_text(
        &out.join("fig2_factor.svg"),
        &plot(
            "diagonal factor 1 - a Var",
            "Var",
            "factor",
            &series(&|a| table.factor.iter().filter(|r| r.a == a).map(|r| (r.var, r.factor)).collect()),
            Style::Lines,
        ),
    )?;

    let fig3 = Figure3Config {
        sequences: cfg.get("figures.population_size")?,
        len: cfg.get("figures.population_len")?,
        embed_std: cfg.get("figures.population_std")?,
        sigma: cfg.get("prior.sigma")?,
    };
    let a_pos: f64 = cfg.get::<f64>("figures.population_a")?.abs();
    let pos = figure3_population(&fig3, a_pos, seed)?;
    let neg = figure3_population(&fig3, -a_pos, seed)?;
    let header = ["index", "var", "factor", "log_density", "valid"];
    for (name, t) in [("pos", &pos), ("neg", &neg)] {
        write_csv(&out.join(format!("fig3_population_{name}.csv")), &header, &population_rows(t))?;
        write_text(&out.join(format!("fig3_population_{name}.svg")), &population_svg(t))?;
    }
    write_manifest(&out, &manifest(cfg, "theory-figures")?)?;

    let couplings = fig2
        .couplings
        .iter()
        .map(|&a| {
            let (peak_x3, peak_density) = table.peak(a).unwrap_or((f64::NAN, f64::NAN));
            CouplingSummary { a, peak_x3, peak_density, degeneracy_var: table.degeneracy_var(a) }
        })
        .collect();
    let files = ["fig2_density", "fig2_factor", "fig3_population_pos", "fig3_population_neg"]
        .iter()
        .flat_map(|s| [format!("{s}.csv"), format!("{s}.svg")])
        .collect();
    Ok(FiguresSummary {
        couplings,
        population_pos_a: a_pos,
        population_pos_valid: pos.valid_count,
        population_neg_a: -a_pos,
        population_neg_valid: neg.valid_count,
        population_size: fig3.sequences,
        files,
    })
}

/// Scores the `L x d` embedding matrix in `input` under the configured prior
/// and writes `density.json`.
pub fn density(cfg: &RunConfig, input: &Path) -> Result<DensityReport> {
    let rows = crate::output::read_matrix_csv(input)?;
    let x = EmbeddingSequence::from_rows(&rows)?;
    let params = prior_from_config(cfg)?;
    let report = log_density(&params, &x)?;
    let out = out_dir(cfg)?;
    write_json(&out.join("density.json"), &report)?;
    write_manifest(&out, &manifest(cfg, "density")?)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckReport>,
    pub counterexample: (f64, f64),
    pub pass: bool,
}

const CACHE_INSTANCES: u64 = 50;
const CACHE_TOL: f64 = 1e-10;

/// The cached coupling against `W_Kᵀ W_Q`, and the strict diagonal block
/// against `I - Σ·A` formed with the cached coupling, on random sequences.
fn cache_checks(params: &AttentionPriorParams, seed: u64) -> Result<Vec<CheckReport>> {
    let consistent = params.coupling_cache_consistent();
    let cache = CheckReport::within("coupling_cache", "A = W_K^T W_Q", if consistent { 0.0 } else { 1.0 }, 0.0);
    let d = params.dim();
    let mut worst: f64 = 0.0;
    for i in 0..CACHE_INSTANCES {
        let mut rng = derived_rng(seed, i);
        let x = EmbeddingSequence::new(Tensor::matrix(4, d, normal_vec(&mut rng, 4 * d, 1.0))?)?;
        for s in all_stats(params, &x)? {
            let sa = s.cov_times_coupling(params);
            for r in 0..d {
                for c in 0..d {
                    let want = if r == c { 1.0 } else { 0.0 } - sa[r * d + c];
                    worst = worst.max((s.diag_block[r * d + c] - want).abs());
                }
            }
        }
    }
    let block = CheckReport::within("block_equals_identity_minus_cov_coupling", format!("{CACHE_INSTANCES} sequences, L = 4"), worst, CACHE_TOL);
    Ok(vec![cache, block])
}

fn cache_prior(seed: u64) -> Result<AttentionPriorParams> {
    let mut rng = derived_rng(seed, u64::MAX);
    let m = |rng: &mut _| Tensor::matrix(3, 3, normal_vec(rng, 9, 0.5));
    Ok(AttentionPriorParams::new(m(&mut rng)?, m(&mut rng)?, Tensor::eye(3), 1.0, Masking::Strict)?)
}

/// Runs every executable invariant and writes `verify.json`. With
/// `corrupt_cache`, the coupling cache of the cache-check prior is perturbed
/// first, so the run must fail.
pub fn verify(cfg: &RunConfig, corrupt_cache: bool) -> Result<VerifyReport> {
    let seed = cfg.seed()?;
    let mut reports = checks::run_checks(seed)?;
    reports.extend(process_consistency::run_checks(seed)?);
    reports.extend(depth_hierarchy::run_checks(seed)?);
    let mut params = cache_prior(seed)?;
    if corrupt_cache {
        params.corrupt_coupling_cache(1e-3);
    }
    reports.extend(cache_checks(&params, seed)?);
    let report = VerifyReport {
        pass: reports.iter().all(|r| r.pass),
        counterexample: process_consistency::two_token_counterexample(),
        checks: reports,
    };
    let out = out_dir(cfg)?;
    write_json(&out.join("verify.json"), &report)?;
    write_manifest(&out, &manifest(cfg, "verify")?)?;
    Ok(report)
}

fn load_corpus(cfg: &RunConfig) -> Result<(PathBuf, Corpus)> {
    let path = cfg.corpus();
    let corpus = Corpus::load(&path, cfg.get("train.min_count")?)?;
    Ok((path, corpus))
}

fn epoch_rows(log: &TrainLog) -> Vec<Vec<Cell>> {
    log.epochs
        .iter()
        .map(|e| vec![e.epoch.into(), e.train_bpc.into(), e.val_bpc.into(), e.margin_loss.into(), e.saturated.into()])
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub lambda_m: f64,
    pub final_val_bpc: f64,
    pub clean_bpc: f64,
    pub decreasing_epochs: usize,
    pub checkpoint: String,
}

/// One training run at the configured `λ_m`. Writes per-epoch and per-step
/// CSVs, the run record, a checkpoint and a BPC plot.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let (path, corpus) = load_corpus(cfg)?;
    let train_cfg = cfg.train()?;
    let out = out_dir(cfg)?;
    let (trained, record) = run(&corpus, &cfg.gpt()?, &train_cfg, &[0.0], 1)?;
    let log = &trained.log;
    write_csv(&out.join("train_epochs.csv"), &["epoch", "train_bpc", "val_bpc", "margin_loss", "saturated"], &epoch_rows(log))?;
    write_csv(
        &out.join("train_loss.csv"),
        &["step", "loss", "margin"],
        &log.loss_trace
            .iter()
            .zip(&log.margin_trace)
            .enumerate()
            .map(|(i, (&l, &m))| vec![(i + 1).into(), l.into(), m.into()])
            .collect::<Vec<_>>(),
    )?;
    write_json(&out.join("train_record.json"), &record)?;
    let ckpt = out.join("model.ckpt");
    Checkpoint { model: trained.model.clone(), prior: trained.prior.clone(), vocab: corpus.vocab.clone() }.save(&ckpt)?;
    let curve = |label: &str, f: &dyn Fn(&attnprior_lm::train::EpochRecord) -> f64| Series {
        label: label.into(),
        points: std::iter::once((0.0, if label == "train" { log.initial_train_bpc } else { f64::NAN }))
            .chain(log.epochs.iter().map(|e| (e.epoch as f64, f(e))))
            .collect(),
    };
    write_text(
        &out.join("train_bpc.svg"),
        &plot(
            &format!("BPC, lambda = {}", train_cfg.lambda_m),
            "epoch",
            "bits per character",
            &[curve("train", &|e| e.train_bpc), curve("val", &|e| e.val_bpc)],
            Style::Lines,
        ),
    )?;
    write_manifest(&out, &manifest(cfg, "train")?.with_corpus(&path, &corpus.hash))?;
    Ok(TrainSummary {
        lambda_m: train_cfg.lambda_m,
        final_val_bpc: log.final_val_bpc(),
        clean_bpc: record.clean_bpc,
        decreasing_epochs: log.decreasing_epochs(),
        checkpoint: ckpt.display().to_string(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessSummary {
    pub runs: Vec<RobustnessRun>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessRun {
    pub lambda_m: f64,
    pub clean_bpc: f64,
    /// `(sigma, degradation)` over the grid.
    pub degradation: Vec<(f64, f64)>,
}

/// Trains the CE-only baseline and the configured `λ_m`, then evaluates both
/// on the noise grid.
pub fn robustness(cfg: &RunConfig) -> Result<RobustnessSummary> {
    let (path, corpus) = load_corpus(cfg)?;
    let base = cfg.train()?;
    let gpt = cfg.gpt()?;
    let sigmas = cfg.sigma_grid()?;
    let draws: usize = cfg.get("robustness.draws")?;
    let mut lambdas = vec![0.0];
    if base.lambda_m != 0.0 {
        lambdas.push(base.lambda_m);
    }
    let sweep = run_lambda_sweep(&corpus, &gpt, &base, &lambdas, &sigmas, draws)?;
    let out = out_dir(cfg)?;
    let mut header = vec!["lambda".to_string(), "sigma".into(), "mean_bpc".into(), "degradation".into()];
    header.extend((0..draws).map(|j| format!("draw_{j}")));
    let rows: Vec<Vec<Cell>> = sweep
        .records
        .iter()
        .flat_map(|rec| {
            rec.robustness.rows.iter().map(move |r| {
                let mut row = vec![rec.lambda_m.into(), r.sigma.into(), r.mean_bpc.into(), r.degradation.into()];
                row.extend((0..draws).map(|j| r.draws.get(j).copied().map_or(Cell::Na, Cell::F)));
                row
            })
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("robustness.csv"), &header, &rows)?;
    let curves = |f: &dyn Fn(&attnprior_lm::robustness::RobustnessRow) -> f64| -> Vec<Series> {
        sweep
            .records
            .iter()
            .map(|rec| Series {
                label: format!("lambda = {}", rec.lambda_m),
                points: rec.robustness.rows.iter().map(|r| (r.sigma, f(r))).collect(),
            })
            .collect()
    };
    write_text(
        &out.join("robustness_bpc.svg"),
        &plot("BPC under embedding noise", "sigma", "bits per character", &curves(&|r| r.mean_bpc), Style::Lines),
    )?;
    write_text(
        &out.join("robustness_degradation.svg"),
        &plot("degradation ratio", "sigma", "noisy / clean BPC", &curves(&|r| r.degradation), Style::Lines),
    )?;
    write_json(&out.join("robustness_records.json"), &sweep)?;
    write_manifest(&out, &manifest(cfg, "robustness")?.with_corpus(&path, &corpus.hash))?;
    Ok(RobustnessSummary {
        runs: sweep
            .records
            .iter()
            .map(|r| RobustnessRun {
                lambda_m: r.lambda_m,
                clean_bpc: r.clean_bpc,
                degradation: r.robustness.rows.iter().map(|x| (x.sigma, x.degradation)).collect(),
            })
            .collect(),
    })
}

fn final_margin(r: &TrainRunRecord) -> Option<f64> {
    (r.lambda_m > 0.0).then(|| r.log.epochs.last().map_or(f64::NAN, |e| e.margin_loss))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub sigma: f64,
    pub lambdas: Vec<f64>,
    pub clean_bpc: Vec<f64>,
    pub degradation: Vec<f64>,
    pub interior_minimum: Option<f64>,
}

/// One run per `λ_m` in the sweep grid, evaluated clean and at the sweep
/// noise level.
pub fn lambda_sweep(cfg: &RunConfig) -> Result<(LambdaSweep, SweepSummary)> {
    let (path, corpus) = load_corpus(cfg)?;
    let base = cfg.train()?;
    let lambdas = cfg.list("sweep.lambdas")?;
    if lambdas.is_empty() {
        return Err(CliError::config("sweep.lambdas", "empty grid"));
    }
    let sigma: f64 = cfg.get("sweep.sigma")?;
    let draws: usize = cfg.get("robustness.draws")?;
    let sweep = run_lambda_sweep(&corpus, &cfg.gpt()?, &base, &lambdas, &[0.0, sigma], draws)?;
    let out = out_dir(cfg)?;
    let rows: Vec<Vec<Cell>> = sweep
        .records
        .iter()
        .map(|r| {
            let diag = r.diagnostics.as_ref();
            vec![
                r.lambda_m.into(),
                r.clean_bpc.into(),
                r.noisy_bpc(sigma).into(),
                r.degradation(sigma).into(),
                diag.map(|d| d.snr).into(),
                diag.map(|d| d.var_norm).into(),
                final_margin(r).into(),
                r.total_saturated().into(),
                r.log.decreasing_epochs().into(),
            ]
        })
        .collect();
    write_csv(
        &out.join("lambda_sweep.csv"),
        &["lambda", "clean_bpc", "noisy_bpc", "degradation", "snr", "var_norm", "final_margin_loss", "saturated", "decreasing_epochs"],
        &rows,
    )?;
    let degradation = sweep.degradations(sigma);
    // λ = 0 cannot sit on a log axis, so plot against grid index.
    write_text(
        &out.join("lambda_sweep.svg"),
        &plot(
            &format!("degradation at sigma = {sigma} over lambda grid {lambdas:?}"),
            "grid index",
            "noisy / clean BPC",
            &[Series { label: "degradation".into(), points: degradation.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect() }],
            Style::Lines,
        ),
    )?;
    write_json(&out.join("lambda_sweep_records.json"), &sweep)?;
    write_manifest(&out, &manifest(cfg, "lambda-sweep")?.with_corpus(&path, &corpus.hash))?;
    let summary = SweepSummary {
        sigma,
        interior_minimum: sweep.interior_minimum(sigma).map(|i| lambdas[i]),
        clean_bpc: sweep.records.iter().map(|r| r.clean_bpc).collect(),
        degradation,
        lambdas,
    };
    Ok((sweep, summary))
}
