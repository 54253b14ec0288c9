//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use descent_mean::data::{rng_for, unit_sphere};
use descent_mean::harness::{
    check_bounded_difference, check_contraction, check_dominance, check_monotonicity, gaussian_regime,
    run_concentration, run_experiment, ExperimentOutput, ExperimentSpec, PropertyCheck,
};
use descent_mean::mt::{distance_estimate, gradient_estimate, MtBackend, MtSolver, SearchConfig};
use descent_mean::sdp::SdpConfig;
use descent_mean::Result;

const SEED: u64 = 20240;

struct Verdict {
    passed: bool,
    detail: String,
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Result<Verdict> + 'a>);

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn solver() -> MtSolver {
    MtSolver::new(MtBackend::Factored, SdpConfig::descent())
}

fn property(check: PropertyCheck) -> Result<Verdict> {
    verdict(
        check.passed(),
        format!(
            "{} of {} cases failed, worst {:.3e} against {:.3e}, {} degraded solves",
            check.failures, check.cases, check.worst, check.tolerance, check.degraded
        ),
    )
}

/// Mass of the relaxation never falls below the exact count (50 instances,
/// effective dimension at most 2, under two minutes).
fn relaxation_dominance() -> Result<Verdict> {
    let start = Instant::now();
    let check = check_dominance(SEED, 50, &solver())?;
    let elapsed = start.elapsed();
    let mut v = property(check)?;
    v.passed &= elapsed <= Duration::from_secs(120);
    v.detail += &format!(", {:.2} s", elapsed.as_secs_f64());
    Ok(v)
}

fn monotonicity() -> Result<Verdict> {
    property(check_monotonicity(SEED, 20, 8, &solver())?)
}

fn bounded_difference() -> Result<Verdict> {
    property(check_bounded_difference(SEED, 50, &solver())?)
}

/// Gaussian bucket means around `μ`, queried at distance twenty quantile
/// radii. Returns `(d′ / d̃, ⟨g, Δ⟩)` per seed.
fn far_query_regime() -> Result<Vec<(f64, f64)>> {
    let search = SearchConfig::default();
    (0..20)
        .map(|seed| {
            let mut rng = rng_for(SEED, seed);
            let (z, mu, radius) = gaussian_regime(30, 5, 1.0, &mut rng)?;
            let gap = 20.0 * radius;
            let toward = unit_sphere(5, &mut rng);
            let x = &mu - &toward * gap;
            let est = distance_estimate(&z, &x, &search, &solver())?;
            let g = gradient_estimate(&z, &x, &search, &solver())?;
            Ok((est.distance / gap, g.dot(&toward)))
        })
        .collect()
}

fn distance_band(regime: &[(f64, f64)]) -> Result<Verdict> {
    let lo = regime.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = regime.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        lo >= 0.9 && hi <= 1.3,
        format!("d'/d~ in [{lo:.4}, {hi:.4}] over {} seeds, band [0.9, 1.3]", regime.len()),
    )
}

fn gradient_alignment(regime: &[(f64, f64)]) -> Result<Verdict> {
    let worst = regime.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    verdict(
        worst >= 1.0 / 15.0,
        format!("min <g, delta> = {worst:.6} over {} seeds, bound 1/15", regime.len()),
    )
}

fn contraction() -> Result<Verdict> {
    property(check_contraction(SEED, 20, &solver(), &SearchConfig::default())?)
}

fn quantile(out: &ExperimentOutput, name: &str, median: bool) -> f64 {
    let s = out.summary.estimators.iter().find(|e| e.estimator == name).unwrap();
    if median {
        s.median_error
    } else {
        s.quantile_error
    }
}

fn statistical_ordering() -> Result<Verdict> {
    let spec = ExperimentSpec::from_json(
        r#"{
            "generator": {"kind": "contaminated_gaussian", "sigma": 1.0, "radius": 1000.0, "prob": 0.05},
            "n": 2000, "d": 10, "trials": 200, "seed": 7, "delta": 0.01,
            "estimators": ["empirical_mean", "median_of_means", "descent"],
            "estimator_cfg": {"k_override": 40}
        }"#,
    )?;
    let start = Instant::now();
    let out = run_experiment(&spec)?;
    let elapsed = start.elapsed();
    let (emp, mom, ours) = (
        quantile(&out, "empirical_mean", false),
        quantile(&out, "median_of_means", false),
        quantile(&out, "descent", false),
    );
    let ordered = ours <= mom;
    let fifth = ours <= emp / 5.0 && mom <= emp / 5.0;
    verdict(
        ordered && fifth && elapsed <= Duration::from_secs(1800),
        format!(
            "0.99-quantiles: descent {ours:.4}, median of means {mom:.4}, empirical {emp:.4}; \
             descent <= mom: {ordered}; both <= empirical/5 ({:.4}): {fifth}; {:.1} s",
            emp / 5.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn gaussian_non_degradation() -> Result<Verdict> {
    let spec = ExperimentSpec::from_json(
        r#"{
            "generator": {"kind": "gaussian"},
            "n": 2000, "d": 20, "trials": 50, "seed": 8, "delta": 0.01,
            "estimators": ["empirical_mean", "descent"],
            "estimator_cfg": {"k_override": 30}
        }"#,
    )?;
    let out = run_experiment(&spec)?;
    let (emp, ours) = (quantile(&out, "empirical_mean", true), quantile(&out, "descent", true));
    verdict(
        ours <= 3.0 * emp,
        format!("median errors: descent {ours:.4}, empirical {emp:.4}, ratio {:.3}, bound 3", ours / emp),
    )
}

fn concentration() -> Result<Verdict> {
    let rows = run_concentration(30, 10, 200, &[1.0, 2.0, 4.0, 8.0], SEED, &solver())?;
    let fractions: Vec<f64> = rows.iter().map(|r| r.exceed_fraction).collect();
    let monotone = fractions.windows(2).all(|w| w[1] <= w[0]);
    let last = *fractions.last().unwrap();
    verdict(
        monotone && last == 0.0,
        format!("exceedance fractions for c = 1, 2, 4, 8: {fractions:?}"),
    )
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_descent-mean"))
        .args(args)
        .output()
        .expect("failed to launch the CLI");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn determinism() -> Result<Verdict> {
    let dir = std::env::temp_dir().join(format!("descent-mean-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        r#"{
            "generator": {"kind": "student_t", "nu": 3.0},
            "n": 300, "d": 3, "trials": 8, "seed": 5,
            "estimators": ["empirical_mean", "geometric_median", "median_of_means", "descent", "descent_exact"],
            "estimator_cfg": {"k_override": 15}
        }"#,
    )?;
    let bench = |tag: &str| -> Result<(Vec<u8>, Vec<u8>)> {
        let (csv, summary) = (dir.join(format!("{tag}.csv")), dir.join(format!("{tag}.json")));
        run_cli(&["bench", "--spec", path(&spec), "--out", path(&csv), "--summary", path(&summary)]);
        Ok((std::fs::read(csv)?, std::fs::read(summary)?))
    };
    let props_same = run_cli(&["props", "--seed", "3"]) == run_cli(&["props", "--seed", "3"]);
    let bench_same = bench("a")? == bench("b")?;
    std::fs::remove_dir_all(&dir)?;
    verdict(
        props_same && bench_same,
        format!("props identical: {props_same}; bench CSV and summary identical: {bench_same}"),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn main() -> ExitCode {
    let regime = far_query_regime();
    let criteria: Vec<Criterion> = vec![
        ("relaxation dominance", Box::new(relaxation_dominance)),
        ("monotonicity in r", Box::new(monotonicity)),
        ("bounded difference", Box::new(bounded_difference)),
        ("distance estimation band", Box::new(|| distance_band(regime.as_ref().map_err(clone_err)?))),
        ("gradient alignment", Box::new(|| gradient_alignment(regime.as_ref().map_err(clone_err)?))),
        ("contraction", Box::new(contraction)),
        ("statistical ordering", Box::new(statistical_ordering)),
        ("gaussian non-degradation", Box::new(gaussian_non_degradation)),
        ("concentration", Box::new(concentration)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (passed, detail) = match run() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {:>2} {:<26} {}  {detail}",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" }
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn clone_err(e: &descent_mean::Error) -> descent_mean::Error {
    descent_mean::Error::InvalidConfig(e.to_string())
}
