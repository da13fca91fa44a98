use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use speq::equiv::{self, CovarianceModel, SolveRecord, SolverOptions};
use speq::freeconv::{self, FreeConvOptions};
use speq::harness::{self, SweepSpec};
use speq::measure::{read_density_csv, write_density_csv, SampledDensity};
use speq::resolvent::{sample_covariance, SymmetricSpectrum};
use speq::ridge::{self, FeatureSampler, KernelProblem, QueryPoints};
use speq::sim::{self, DistKind, DistributionSpec, RunConfig, SigmaSpec};
use speq::SpectralParameter;

use crate::settings::{parse_complex, Settings};
use crate::{Cli, CliError, CliResult, Command};

struct Context {
    seed: u64,
    out: PathBuf,
    gnuplot: bool,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> CliResult<(PathBuf, BufWriter<File>)> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok((path, BufWriter::new(file)))
    }

    fn gnuplot(&self, stem: &str, body: &str) -> CliResult<Option<PathBuf>> {
        if !self.gnuplot {
            return Ok(None);
        }
        let (path, mut w) = self.create(&format!("{stem}.gp"))?;
        let script = format!("set datafile separator ','\nset key autotitle columnhead\n{body}");
        w.write_all(script.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        Ok(Some(path))
    }
}

fn prepare(cli: &Cli, settings: &mut Settings) -> CliResult<Context> {
    settings.flag("seed", cli.seed);
    settings.flag("out", cli.out.as_ref().map(|p| p.display().to_string()));
    settings.flag("threads", cli.threads);
    if let Some(path) = &cli.config {
        settings.apply_config_file(path)?;
    }
    let threads = match settings.get::<usize>("threads")? {
        Some(t) => Some(t),
        None => match std::env::var("SPEQ_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| CliError::Config(format!("SPEQ_THREADS: cannot parse {v:?}")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out = PathBuf::from(settings.raw("out").unwrap_or("."));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(Context {
        seed: settings.get_or("seed", 0)?,
        out,
        gnuplot: cli.gnuplot,
    })
}

fn require_file(settings: &Settings, key: &str) -> CliResult<Option<PathBuf>> {
    let Some(raw) = settings.raw(key) else {
        return Ok(None);
    };
    let path = PathBuf::from(raw);
    if !path.is_file() {
        return Err(CliError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(Some(path))
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string(value).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

pub(crate) fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Solve(a) => {
            let mut s = Settings::new(&["gamma", "sigma", "p", "z"]);
            s.flag("gamma", a.model.gamma);
            s.flag("sigma", a.model.sigma.as_ref());
            s.flag("p", a.model.p);
            s.flag("z", a.z.as_ref());
            let _ctx = prepare(&cli, &mut s)?;
            solve(&s)
        }
        Command::Freeconv(a) => {
            let mut s = Settings::new(&["gamma", "sigma", "p", "grid", "stieltjes_check"]);
            s.flag("gamma", a.model.gamma);
            s.flag("sigma", a.model.sigma.as_ref());
            s.flag("p", a.model.p);
            s.flag("grid", a.grid);
            s.flag("stieltjes_check", a.stieltjes_check.as_ref().map(|p| p.display().to_string()));
            let ctx = prepare(&cli, &mut s)?;
            freeconv_cmd(&ctx, &s)
        }
        Command::Simulate(a) => {
            let mut s = Settings::new(&["p", "n", "replicas", "dist", "sigma", "mean_norm", "nonlinearity", "dump"]);
            s.flag("p", a.p);
            s.flag("n", a.n);
            s.flag("replicas", a.replicas);
            s.flag("dist", a.dist.as_ref());
            s.flag("sigma", a.sigma.as_ref());
            s.flag("mean_norm", a.mean_norm);
            s.flag("nonlinearity", a.nonlinearity.as_ref());
            s.flag("dump", a.dump.then_some(true));
            let ctx = prepare(&cli, &mut s)?;
            simulate(&ctx, &s)
        }
        Command::Verify(a) => {
            let mut s = Settings::new(&["preset", "nmax"]);
            s.flag("preset", a.preset.as_ref());
            s.flag("nmax", a.nmax);
            let ctx = prepare(&cli, &mut s)?;
            verify(&ctx, &s)
        }
        Command::Kolmogorov(a) => {
            let mut s = Settings::new(&["gamma", "sigma", "dist", "ns", "replicas"]);
            s.flag("gamma", a.gamma);
            s.flag("sigma", a.sigma.as_ref());
            s.flag("dist", a.dist.as_ref());
            s.flag("ns", a.ns.as_ref());
            s.flag("replicas", a.replicas);
            let ctx = prepare(&cli, &mut s)?;
            kolmogorov(&ctx, &s)
        }
        Command::Ridge(a) => {
            let mut s = Settings::new(&[
                "kernel",
                "eigenvalues",
                "labels",
                "synthetic",
                "lambda",
                "features",
                "replicas",
                "test_points",
                "sampler",
            ]);
            let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
            s.flag("kernel", path(&a.kernel));
            s.flag("eigenvalues", path(&a.eigenvalues));
            s.flag("labels", path(&a.labels));
            s.flag("synthetic", a.synthetic);
            s.flag("lambda", a.lambda);
            s.flag("features", a.features);
            s.flag("replicas", a.replicas);
            s.flag("test_points", a.test_points);
            s.flag("sampler", a.sampler.as_ref());
            let ctx = prepare(&cli, &mut s)?;
            ridge_cmd(&ctx, &s)
        }
    }
}

fn model_from(s: &Settings) -> CliResult<CovarianceModel> {
    let gamma: f64 = s.require("gamma")?;
    let sigma = SigmaSpec::parse(s.raw("sigma").unwrap_or("identity"))?;
    let p = match (&sigma, s.get::<usize>("p")?) {
        (_, Some(p)) => p,
        (SigmaSpec::Explicit(v), None) => v.len(),
        (_, None) => 1,
    };
    if p == 0 {
        return Err(CliError::Config("p must be positive".into()));
    }
    Ok(CovarianceModel::new(sigma.eigenvalues(p)?, gamma, 0.0)?)
}

fn solve(s: &Settings) -> CliResult<()> {
    let z = SpectralParameter::new(parse_complex(s.raw("z").unwrap_or("-1"))?)?;
    let model = model_from(s)?;
    let sol = equiv::solve_fixed_point(&model, z, SolverOptions::default())?;
    print_json(&SolveRecord::new(&model, &sol)?)
}

const CHECK_POINTS: usize = 20;
const CHECK_TOLERANCE: f64 = 2e-3;

fn freeconv_cmd(ctx: &Context, s: &Settings) -> CliResult<()> {
    let check = require_file(s, "stieltjes_check")?;
    let model = model_from(s)?;
    if let Some(path) = check {
        let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
        let density = read_density_csv(file)?;
        return stieltjes_check(ctx, &model, &density);
    }
    let opts = FreeConvOptions {
        grid_size: s.get_or("grid", FreeConvOptions::default().grid_size)?,
        ..FreeConvOptions::default()
    };
    let result = freeconv::free_multiplicative_mp(&model, &opts)?;

    let (density_path, mut w) = ctx.create("freeconv_density.csv")?;
    write_density_csv(result.density(), &mut w)?;
    w.flush().map_err(|e| CliError::io(&density_path, e))?;

    let (cdf_path, w) = ctx.create("freeconv_cdf.csv")?;
    let cdf = result.cdf();
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Config(e.to_string());
    csv.write_record(["x", "cdf"]).map_err(io)?;
    for &x in result.density().grid() {
        csv.write_record([x.to_string(), cdf.value(x).to_string()]).map_err(io)?;
    }
    csv.flush().map_err(|e| CliError::io(&cdf_path, e))?;

    let plot = ctx.gnuplot(
        "freeconv",
        &format!(
            "plot '{}' using 1:2 with lines, '{}' using 1:2 with lines axes x1y2\n",
            density_path.display(),
            cdf_path.display()
        ),
    )?;
    let (lo, hi) = result.support();
    print_json(&json!({
        "gamma": model.gamma(),
        "atom_at_zero": result.atom_at_zero(),
        "support": [lo, hi],
        "extrapolation_error": result.extrapolation_error(),
        "density_csv": density_path,
        "cdf_csv": cdf_path,
        "gnuplot": plot,
    }))
}

fn stieltjes_check(ctx: &Context, model: &CovarianceModel, density: &SampledDensity) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let top = freeconv::support_upper_bound(model);
    let mut worst = 0.0_f64;
    for _ in 0..CHECK_POINTS {
        let z = SpectralParameter::upper(rng.random_range(-1.0..1.2 * top), rng.random_range(0.2..2.0))?;
        let sol = equiv::solve_fixed_point(model, z, SolverOptions::default())?;
        let exact = equiv::g_nu(model, &sol, z)?;
        worst = worst.max((density.stieltjes(z) - exact).norm() / exact.norm());
    }
    let passed = worst <= CHECK_TOLERANCE;
    print_json(&json!({
        "points": CHECK_POINTS,
        "max_relative_error": worst,
        "tolerance": CHECK_TOLERANCE,
        "passed": passed,
    }))?;
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "transform error {worst:e} exceeds {CHECK_TOLERANCE:e}"
        )))
    }
}

fn simulate(ctx: &Context, s: &Settings) -> CliResult<()> {
    let mut text = format!("seed = {}\n", ctx.seed);
    for (ours, theirs) in [
        ("p", "p"),
        ("n", "n"),
        ("replicas", "replicas"),
        ("dist", "dist.kind"),
        ("sigma", "dist.sigma.eigenvalues"),
        ("mean_norm", "dist.mean_norm"),
        ("nonlinearity", "dist.nonlinearity"),
    ] {
        if let Some(v) = s.raw(ours) {
            text.push_str(&format!("{theirs} = {v}\n"));
        }
    }
    let config = RunConfig::from_key_values(&text)?;
    let dump: bool = s.get_or("dump", false)?;
    let spectra: Vec<Vec<f64>> = (0..config.replicas())
        .into_par_iter()
        .map(|r| SymmetricSpectrum::eigenvalues_of(&sample_covariance(&sim::sample_matrix(&config, r))?))
        .collect::<speq::Result<_>>()?;

    let (path, w) = ctx.create("spectrum.csv")?;
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Config(e.to_string());
    csv.write_record(["replica", "index", "eigenvalue"]).map_err(io)?;
    for (r, eig) in spectra.iter().enumerate() {
        for (i, v) in eig.iter().enumerate() {
            csv.write_record([r.to_string(), i.to_string(), v.to_string()]).map_err(io)?;
        }
    }
    csv.flush().map_err(|e| CliError::io(&path, e))?;

    let mut dumps = Vec::new();
    if dump {
        for r in 0..config.replicas() {
            let (p, mut w) = ctx.create(&format!("matrix_{r}.bin"))?;
            sim::write_matrix_dump(&sim::sample_matrix(&config, r), &mut w)?;
            w.flush().map_err(|e| CliError::io(&p, e))?;
            dumps.push(p);
        }
    }
    let plot = ctx.gnuplot(
        "spectrum",
        &format!("set style fill solid 0.5\nbinwidth = 0.05\nbin(x) = binwidth * floor(x / binwidth)\nplot '{}' using (bin($3)):(1.0) smooth freq with boxes\n", path.display()),
    )?;
    print_json(&json!({
        "p": config.p(),
        "n": config.n(),
        "gamma": config.gamma(),
        "replicas": config.replicas(),
        "spectrum_csv": path,
        "dumps": dumps,
        "gnuplot": plot,
    }))
}

fn write_rows(ctx: &Context, name: &str, rows: &[harness::SweepPoint]) -> CliResult<PathBuf> {
    let (path, mut w) = ctx.create(name)?;
    harness::write_sweep_csv(rows, &mut w)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn sweep_plot(csv: &Path) -> String {
    format!(
        "set logscale xy\nplot '{0}' using 2:3 with linespoints title 'value', '{0}' using 2:5 with lines title 'bound'\n",
        csv.display()
    )
}

fn verify(ctx: &Context, s: &Settings) -> CliResult<()> {
    let preset = s.raw("preset").unwrap_or("gaussian-mp");
    if preset != "gaussian-mp" {
        return Err(CliError::Config(format!("unknown preset {preset:?}, expected gaussian-mp")));
    }
    let nmax = s.get_or("nmax", 512)?;
    let outcome = harness::verify_gaussian_mp(nmax, ctx.seed)?;
    let path = write_rows(ctx, "verify_gaussian_mp.csv", &outcome.rows)?;
    let plot = ctx.gnuplot("verify_gaussian_mp", &sweep_plot(&path))?;
    print_json(&json!({
        "preset": preset,
        "nmax": nmax,
        "csv": path,
        "checks": outcome.checks,
        "passed": outcome.passed(),
        "gnuplot": plot,
    }))?;
    if outcome.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = outcome.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

fn parse_ns(raw: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("ns: cannot parse {v:?}")))
        })
        .collect()
}

fn kolmogorov(ctx: &Context, s: &Settings) -> CliResult<()> {
    let gamma = s.get_or("gamma", 0.5)?;
    let sigma = SigmaSpec::parse(s.raw("sigma").unwrap_or("identity"))?;
    let kind = DistKind::parse(s.raw("dist").unwrap_or("gaussian"))?;
    let ns = parse_ns(s.raw("ns").unwrap_or("128,256,512,1024"))?;
    let replicas = s.get_or("replicas", harness::MIN_REPLICAS)?;
    let sweep = SweepSpec::new(ns, gamma, DistributionSpec::new(kind, sigma), ctx.seed, replicas)?;
    let report = harness::kolmogorov_rate(&sweep)?;
    let path = write_rows(ctx, "kolmogorov.csv", &report.distance.points)?;
    let plot = ctx.gnuplot("kolmogorov", &sweep_plot(&path))?;
    let means: Vec<(usize, f64)> = report.distance.points.iter().map(|p| (p.n, p.value)).collect();
    print_json(&json!({
        "gamma": gamma,
        "means": means,
        "decays": report.decays,
        "reduction_residual": report.reduction_residual,
        "csv": path,
        "gnuplot": plot,
    }))?;
    if means.len() >= 2 && !report.decays {
        return Err(CliError::CheckFailed("distance does not decay across the sweep".into()));
    }
    Ok(())
}

fn read_numbers(path: &Path) -> CliResult<(usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let mut rows = 0;
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        rows += 1;
        for field in rec.iter().filter(|f| !f.is_empty()) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("{}: bad number {field:?}", path.display())))?,
            );
        }
    }
    Ok((rows, values))
}

fn ridge_problem(ctx: &Context, s: &Settings, lambda: f64, features: usize) -> CliResult<KernelProblem> {
    let kernel = require_file(s, "kernel")?;
    let eigen = require_file(s, "eigenvalues")?;
    let labels = require_file(s, "labels")?;
    if let Some(n) = s.get::<usize>("synthetic")? {
        return Ok(ridge::laplace_regression_problem(n, 4, 0.7, lambda, features, ctx.seed)?);
    }
    let labels = labels.ok_or_else(|| CliError::Config("labels file required".into()))?;
    let y = DVector::from_vec(read_numbers(&labels)?.1);
    match (kernel, eigen) {
        (Some(k), None) => {
            let (rows, values) = read_numbers(&k)?;
            if rows * rows != values.len() {
                return Err(CliError::Config(format!("{}: kernel must be square", k.display())));
            }
            let m = DMatrix::from_row_slice(rows, rows, &values);
            Ok(KernelProblem::new(m, y, lambda, features)?)
        }
        (None, Some(e)) => Ok(KernelProblem::from_eigenvalues(&read_numbers(&e)?.1, y, lambda, features)?),
        _ => Err(CliError::Config("give exactly one of kernel, eigenvalues or synthetic".into())),
    }
}

fn ridge_cmd(ctx: &Context, s: &Settings) -> CliResult<()> {
    let lambda = s.get_or("lambda", 1.0)?;
    let features: usize = s.require("features")?;
    let replicas = s.get_or("replicas", 400)?;
    let count = s.get_or("test_points", 10)?;
    let sampler = FeatureSampler::parse(s.raw("sampler").unwrap_or("gaussian"))?;
    let problem = ridge_problem(ctx, s, lambda, features)?;
    let effective = ridge::effective_ridge(problem.eigenvalues(), problem.samples(), features, lambda)?;
    let idx = ridge::most_sensitive_points(&problem, effective.lambda_tilde, count)?;
    let queries = QueryPoints::training(&problem, &idx)?;
    let report = ridge::debias_experiment(&problem, sampler, &queries, replicas, ctx.seed)?;
    print_json(&report)
}
