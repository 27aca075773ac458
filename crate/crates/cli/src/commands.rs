use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use pwgee::dataset::{load_long_csv, standardize_covariates, Standardization};
use pwgee::experiment::{format_table, SummaryRow};
use pwgee::metrics::{mean_sd, selection_metrics, squared_error, SelectionTruth};
use pwgee::simgen::{generate, replicate_seed, Example, ScenarioSpec};
use pwgee::tuning::{cv_select, lambda_max, log_grid};
use pwgee::{
    fit_pwgee, run_experiment, CovariateColumns, ExperimentGrid, FitConfig, FitResult,
    LongitudinalDataset, ModelSpec, PenaltyKind,
};

use crate::output::{
    AnyFit, Coefficient, ConfigEcho, CvOutput, Diagnostics, FitOutput, SimulatedFile,
    SimulationManifest, TruthFile,
};
use crate::{
    BenchArgs, CvArgs, DataArgs, FitArgs, MetricsArgs, ModelArgs, SimulateArgs, SolverArgs,
};

const INTERCEPT: &str = "(Intercept)";

struct Prepared {
    data: LongitudinalDataset,
    scaling: Option<Standardization>,
}

fn prepare(args: &DataArgs) -> Result<Prepared> {
    let columns = match &args.covariates {
        Some(c) => CovariateColumns::Named(c.clone()),
        None => CovariateColumns::AllRemaining,
    };
    let mut data = load_long_csv(&args.data, &args.response, &args.cluster, &columns)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let mut scaling = None;
    if args.standardize {
        let (d, s) = standardize_covariates(&data)?;
        data = d;
        scaling = Some(s);
    }
    if args.intercept {
        data = data.with_intercept(INTERCEPT)?;
    }
    Ok(Prepared { data, scaling })
}

fn penalty_kind(s: &SolverArgs) -> Result<PenaltyKind> {
    let kind = match s.penalty.to_ascii_lowercase().as_str() {
        "scad" => PenaltyKind::Scad { a: s.scad_a },
        "mcp" => PenaltyKind::Mcp { gamma: s.mcp_gamma },
        "lasso" => PenaltyKind::Lasso,
        other => bail!("unknown penalty '{other}'; expected scad, mcp or lasso"),
    };
    kind.validate()?;
    Ok(kind)
}

fn model_spec(m: &ModelArgs) -> ModelSpec {
    let spec = ModelSpec::new(m.family, m.corr, m.weighting, m.seed);
    match m.rho {
        Some(r) => spec.with_rho(r),
        None => spec,
    }
}

fn fit_config(s: &SolverArgs, data: &DataArgs, names: &[String], lambda: f64) -> Result<FitConfig> {
    let mut cfg = FitConfig::new(penalty_kind(s)?.with_lambda(lambda));
    cfg.tol = s.tol;
    cfg.max_iter = s.max_iter;
    cfg.zero_threshold = s.zero_threshold;
    for name in &s.exempt {
        match names.iter().position(|n| n == name) {
            Some(j) => cfg.penalty_exempt.push(j),
            None => bail!("exempt covariate '{name}' is not in the model"),
        }
    }
    if data.intercept && !cfg.penalty_exempt.contains(&0) {
        cfg.penalty_exempt.push(0);
    }
    cfg.penalty_exempt.sort_unstable();
    cfg.penalty_exempt.dedup();
    Ok(cfg)
}

fn sparse(beta: &DVector<f64>, names: &[String]) -> Vec<Coefficient> {
    beta.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| Coefficient {
            index: j,
            name: names[j].clone(),
            value: *v,
        })
        .collect()
}

/// Slopes divided by their sds; the intercept absorbs the centering.
fn original_scale(beta: &DVector<f64>, scaling: &Standardization, intercept: bool) -> DVector<f64> {
    let offset = usize::from(intercept);
    let slopes = scaling.unscale_coefficients(&beta.rows(offset, scaling.sds.len()).into_owned());
    let mut out = beta.clone();
    out.rows_mut(offset, slopes.len()).copy_from(&slopes);
    if intercept {
        out[0] -= slopes.dot(&scaling.means);
    }
    out
}

fn fit_output(
    fit: &FitResult,
    prepared: &Prepared,
    args: (&DataArgs, &ModelArgs),
    config: &FitConfig,
) -> FitOutput {
    let (d, m) = args;
    let names = prepared.data.covariate_names().to_vec();
    let beta_original_scale = prepared
        .scaling
        .as_ref()
        .map(|sc| sparse(&original_scale(&fit.beta, sc, d.intercept), &names));
    FitOutput {
        beta: sparse(&fit.beta, &names),
        beta_original_scale,
        active_set: fit.active_set.iter().map(|&j| names[j].clone()).collect(),
        iterations: fit.iterations,
        converged: fit.converged,
        final_score_norm: fit.final_score_norm,
        rho_hat: fit.rho_hat,
        diagnostics: Diagnostics {
            variance_floors: fit.diagnostics.variance_floors,
            step_halvings: fit.diagnostics.step_halvings,
            ridge_jitters: fit.diagnostics.ridge_jitters,
        },
        config: ConfigEcho {
            data: d.data.display().to_string(),
            response: d.response.clone(),
            cluster: d.cluster.clone(),
            family: m.family.to_string(),
            corr: m.corr.to_string(),
            rho: m.rho,
            weighting: m.weighting.to_string(),
            seed: m.seed,
            penalty: config.penalty.kind,
            lambda: config.penalty.lambda,
            tol: config.tol,
            max_iter: config.max_iter,
            zero_threshold: config.zero_threshold,
            exempt: config
                .penalty_exempt
                .iter()
                .map(|&j| names[j].clone())
                .collect(),
            standardize: d.standardize,
            intercept: d.intercept,
        },
        covariates: names,
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let prepared = prepare(&a.data)?;
    let model = model_spec(&a.model);
    let config = fit_config(
        &a.solver,
        &a.data,
        prepared.data.covariate_names(),
        a.lambda,
    )?;
    let fit = fit_pwgee(&prepared.data, &model, &config)?;
    let out = fit_output(&fit, &prepared, (&a.data, &a.model), &config);
    write_json(&out, a.out.as_deref())
}

pub fn cv(a: &CvArgs) -> Result<()> {
    let prepared = prepare(&a.data)?;
    let data = &prepared.data;
    let model = model_spec(&a.model);
    let base = fit_config(&a.solver, &a.data, data.covariate_names(), 1.0)?;
    let grid = match &a.grid {
        Some(g) => g.clone(),
        None => log_grid(lambda_max(data, &model, &base)?, a.grid_ratio, a.grid_size),
    };
    let outcome = cv_select(data, &model, &base, &grid, a.rule, a.model.seed)?;
    if let Some(path) = &a.curve_out {
        let mut w =
            csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["lambda", "fold", "loss"])?;
        for p in &outcome.curve {
            w.write_record([p.lambda.to_string(), p.fold.to_string(), p.loss.to_string()])?;
        }
        w.flush()?;
    }
    let config = base.with_lambda(outcome.lambda_star);
    let fit = fit_pwgee(data, &model, &config)?;
    let out = CvOutput {
        rule: outcome.rule.to_string(),
        lambda_star: outcome.lambda_star,
        grid: outcome.grid.clone(),
        totals: outcome.totals.clone(),
        failed_fits: outcome.failed_fits,
        fit: fit_output(&fit, &prepared, (&a.data, &a.model), &config),
    };
    write_json(&out, a.out.as_deref())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    if a.reps == 0 {
        bail!("--reps must be at least 1");
    }
    let example = Example::from_number(a.example)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let width = (a.reps - 1).to_string().len().max(3);
    let mut replicates = Vec::with_capacity(a.reps);
    let mut names = None;
    let mut beta_star = None;
    for r in 0..a.reps {
        let spec = ScenarioSpec::new(example, a.n, a.p, replicate_seed(a.seed, r));
        let sim = generate(&spec)?;
        let file = format!("rep_{r:0width$}.csv");
        sim.data.write_long_csv(a.out.join(&file))?;
        names.get_or_insert_with(|| sim.data.covariate_names().to_vec());
        beta_star.get_or_insert_with(|| sim.beta_star.as_slice().to_vec());
        replicates.push(SimulatedFile {
            replicate: r,
            file,
            seed: spec.seed,
            data_hash: sim.data.content_hash(),
            log_floor_count: sim.log_floor_count,
        });
    }
    let truth = TruthFile {
        beta_star: beta_star.expect("at least one replicate"),
        covariate_names: names,
    };
    write_json(&truth, Some(&a.out.join("truth.json")))?;
    let manifest = SimulationManifest {
        example: a.example,
        n: a.n,
        p: a.p,
        master_seed: a.seed,
        replicates,
    };
    write_json(&manifest, Some(&a.out.join("manifest.json")))?;
    eprintln!("wrote {} datasets to {}", a.reps, a.out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Places a fit's named coefficients on the truth's coordinates.
fn align(fit: &FitOutput, truth: &TruthFile, source: &Path) -> Result<Vec<f64>> {
    let p = truth.beta_star.len();
    let mut beta = vec![0.0; p];
    for c in &fit.beta {
        let j = match &truth.covariate_names {
            Some(names) => match names.iter().position(|n| *n == c.name) {
                Some(j) => j,
                None if c.name == INTERCEPT => continue,
                None => bail!(
                    "{}: covariate '{}' is not in the truth file",
                    source.display(),
                    c.name
                ),
            },
            None => c.index,
        };
        if j >= p {
            bail!(
                "{}: coefficient index {j} outside the truth dimension {p}",
                source.display()
            );
        }
        beta[j] = c.value;
    }
    Ok(beta)
}

pub fn metrics(a: &MetricsArgs) -> Result<()> {
    let truth: TruthFile = read_json(&a.truth)?;
    let sel_truth = SelectionTruth::new(truth.beta_star.clone());
    let (mut tp, mut fp, mut cr, mut se) = (vec![], vec![], vec![], vec![]);
    for path in &a.fits {
        let fit = read_json::<AnyFit>(path)?.into_fit();
        let beta = align(&fit, &truth, path)?;
        let m = selection_metrics(&beta, &sel_truth)?;
        tp.push(m.tp as f64);
        fp.push(m.fp as f64);
        cr.push(f64::from(m.cr));
        se.push(squared_error(&beta, &truth.beta_star)?);
    }
    let ms = |v: &[f64]| mean_sd(v).expect("at least one fit");
    let (tp_mean, tp_sd) = ms(&tp);
    let (fp_mean, fp_sd) = ms(&fp);
    let (mse_mean, mse_sd) = ms(&se);
    let row = SummaryRow {
        method: "fits".into(),
        fits: a.fits.len(),
        failed: 0,
        tp_mean,
        tp_sd,
        fp_mean,
        fp_sd,
        cr_mean: ms(&cr).0,
        mse_mean,
        mse_sd,
        converged: 0,
        sd_degenerate: a.fits.len() < 2,
    };
    print!("{}", format_table(&[row]));
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let grid: ExperimentGrid = read_json(&a.config)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = a.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build()?;
    let report = pool.install(|| run_experiment(&grid))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    report.write_summary_csv(a.out.join("summary.csv"))?;
    report.write_records_csv(a.out.join("records.csv"))?;
    let table = report.text_table();
    fs::write(a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
