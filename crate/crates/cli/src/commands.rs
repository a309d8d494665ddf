use std::fmt::Write as _;
use std::path::Path;

use linkedcausal::design::{self, CostSpec, DesignSolution, GammaEstimates, LinkageCheck};
use linkedcausal::estimators::{self, DrawConfig, EstimateReport, EstimatorKind};
use linkedcausal::inference::{self, CiMethod, MarDiagnostic, Pipeline};
use linkedcausal::sim::{DgmSpec, McConfig, McIntervals, McResult, McTable, ReplicateFailure, EstimatorSummary, Scenario};
use linkedcausal::{streams, Error, LinkedDataset, ModelSpec, OutcomeFamily, NuisanceFit, Result, VERSION};
use serde::Serialize;
use serde_json::json;

use crate::config::{DesignConfig, EstimateConfig, Format, RunConfig, SimulateConfig};

/// Rendered report plus any side files (name suffix, contents).
pub struct Output {
    pub main: String,
    pub extra: Vec<(&'static str, String)>,
    pub warnings: Vec<String>,
}

pub fn run(cfg: &RunConfig) -> Result<Output> {
    match cfg {
        RunConfig::Estimate(c) => estimate(cfg, c),
        RunConfig::Simulate(c) => simulate(cfg, c),
        RunConfig::Design(c) => run_design(cfg, c),
    }
}

fn load(path: &Path, family: OutcomeFamily) -> Result<LinkedDataset> {
    linkedcausal::load_csv(path, family).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn header_lines(cfg: &RunConfig) -> String {
    let config = serde_json::to_string(cfg).expect("config serializes");
    format!("# linkedcausal {VERSION} seed={}\n# config={config}\n", cfg.seed())
}

fn to_json<T: Serialize>(cfg: &RunConfig, body: T) -> String {
    let mut v = json!({ "version": VERSION, "seed": cfg.seed(), "config": cfg });
    let body = serde_json::to_value(body).expect("report serializes");
    if let (Some(obj), serde_json::Value::Object(extra)) = (v.as_object_mut(), body) {
        obj.extend(extra);
    }
    let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
    s.push('\n');
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct DataSummary {
    n: usize,
    linked: usize,
    p: usize,
    q: usize,
}

fn summary_of(ds: &LinkedDataset) -> DataSummary {
    DataSummary {
        n: ds.len(),
        linked: ds.n_linked(),
        p: ds.p(),
        q: ds.q(),
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum MarOutcome {
    Fit(MarDiagnostic),
    Failed { error: String },
}

#[derive(Serialize)]
struct EstimateBody {
    data: DataSummary,
    estimates: Vec<EstimateReport>,
    mar_check: MarOutcome,
    warnings: Vec<String>,
}

fn estimate(cfg: &RunConfig, c: &EstimateConfig) -> Result<Output> {
    if c.estimators.is_empty() {
        return Err(Error::Validation("no estimators selected".into()));
    }
    if !(c.ci_level > 0.0 && c.ci_level < 1.0) {
        return Err(Error::Validation(format!("ci level must lie in (0, 1), got {}", c.ci_level)));
    }
    let ds = load(&c.input, c.family)?;
    let spec = ModelSpec::default_for(ds.p(), ds.q());
    let draw_seed = c.seed;
    let boot_seed = streams::child_seed(&mut streams::seeded(c.seed));
    let pipe = Pipeline::new(spec.clone(), c.estimators.clone(), c.target, DrawConfig::new(c.d, draw_seed));
    let (fit, pred) = pipe.fit(&ds, draw_seed)?;
    let mut warnings = fit.warnings();
    let mut reports: Vec<EstimateReport> = c
        .estimators
        .iter()
        .map(|&k| EstimateReport::from_predictions(&pred, k, c.target, c.seed))
        .collect::<Result<_>>()?;

    let mut boot: Vec<usize> = Vec::new();
    for (j, &k) in c.estimators.iter().enumerate() {
        if c.ci == CiMethod::Plugin && k == EstimatorKind::Tr {
            let rep = inference::eif_inference(&estimators::eif_terms(&pred)?, c.target, c.ci_level)?;
            reports[j].inference = Some(rep.summary());
        } else if c.b > 0 {
            if c.ci == CiMethod::Plugin {
                reports[j].notes.push("plug-in interval exists only for tr; bootstrap used".into());
            }
            boot.push(j);
        } else {
            reports[j].notes.push("no interval (B = 0)".into());
        }
    }
    if !boot.is_empty() {
        let sub = Pipeline::new(spec, boot.iter().map(|&j| c.estimators[j]).collect(), c.target, pipe.draws);
        let draws = sub.bootstrap(&ds, c.b, boot_seed)?;
        for (col, &j) in boot.iter().enumerate() {
            let rep = inference::summarize_replicates(reports[j].estimate, &draws.component(col), c.b, c.ci_level, boot_seed)?;
            reports[j].inference = Some(rep.summary());
            if draws.dropped > 0 {
                reports[j].notes.push(format!("{} degenerate bootstrap replicates dropped", draws.dropped));
            }
        }
    }

    let mar = match inference::mar_check(&ds) {
        Ok(m) => {
            if m.separation {
                warnings.push("missingness check: selection is perfectly predicted; p-values suppressed".into());
            }
            MarOutcome::Fit(m)
        }
        Err(e) => MarOutcome::Failed { error: e.to_string() },
    };
    let body = EstimateBody {
        data: summary_of(&ds),
        estimates: reports,
        mar_check: mar,
        warnings: warnings.clone(),
    };
    let main = match c.format {
        Format::Json => to_json(cfg, &body),
        Format::Csv | Format::Pretty => {
            let mut rows = vec![vec![
                "method", "target", "estimate", "se", "ci_low", "ci_high", "ci_level", "interval", "D", "truncated",
            ]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()];
            for r in &body.estimates {
                let iv = r.inference.as_ref();
                rows.push(vec![
                    r.method.to_string(),
                    r.target.tag().to_string(),
                    format!("{}", r.estimate),
                    fmt_opt(iv.map(|i| i.se)),
                    fmt_opt(iv.map(|i| i.ci_low)),
                    fmt_opt(iv.map(|i| i.ci_high)),
                    fmt_opt(iv.map(|i| i.ci_level)),
                    iv.map_or(String::new(), |i| i.method.clone()),
                    r.d.map_or(String::new(), |d| d.to_string()),
                    r.truncation_count.to_string(),
                ]);
            }
            let mut s = header_lines(cfg);
            if c.format == Format::Csv {
                for r in rows {
                    s.push_str(&r.join(","));
                    s.push('\n');
                }
            } else {
                s.push_str(&align(&rows));
                if let MarOutcome::Fit(m) = &body.mar_check {
                    s.push_str("\nmissingness check (logistic of r on 1, z, x, y)\n");
                    let mut mrows = vec![vec!["term".to_string(), "z".to_string(), "p".to_string()]];
                    for (i, t) in m.terms.iter().enumerate() {
                        mrows.push(vec![t.clone(), format!("{:.3}", m.z[i]), m.p_value[i].map_or("-".into(), |p| format!("{p:.4}"))]);
                    }
                    s.push_str(&align(&mrows));
                }
            }
            s
        }
    };
    Ok(Output {
        main,
        extra: Vec::new(),
        warnings,
    })
}

#[derive(Serialize)]
struct SimCell<'a> {
    scenario: Scenario,
    n: usize,
    truth: f64,
    replications: usize,
    failures: &'a [ReplicateFailure],
    summaries: &'a [EstimatorSummary],
}

fn simulate(cfg: &RunConfig, c: &SimulateConfig) -> Result<Output> {
    if c.reps < 2 {
        return Err(Error::Validation(format!("reps must be at least 2, got {}", c.reps)));
    }
    let mut results: Vec<McResult> = Vec::new();
    let mut warnings = Vec::new();
    for &n in &c.n {
        for &sc in &c.scenarios {
            let mut mc = McConfig::new(DgmSpec::for_family(c.family, n), sc, c.reps, c.seed);
            mc.estimators = c.estimators.clone();
            mc.target = c.target;
            mc.d = c.d;
            mc.intervals = McIntervals {
                tr: c.ci,
                others: CiMethod::Bootstrap,
                b: c.b,
                level: c.ci_level,
            };
            let r = linkedcausal::sim::run_monte_carlo(&mc)?;
            if !r.failures.is_empty() {
                warnings.push(format!("scenario {} n = {n}: {} replicates failed", sc.tag(), r.failures.len()));
            }
            results.push(r);
        }
    }
    let table = McTable { results: &results };
    let main = match c.format {
        Format::Json => {
            let cells: Vec<SimCell> = results
                .iter()
                .map(|r| SimCell {
                    scenario: r.config.scenario,
                    n: r.config.dgm.n,
                    truth: r.truth,
                    replications: r.replications,
                    failures: &r.failures,
                    summaries: &r.summaries,
                })
                .collect();
            to_json(cfg, json!({ "results": cells, "table_csv": table.to_csv() }))
        }
        Format::Csv => header_lines(cfg) + &table.to_csv(),
        Format::Pretty => header_lines(cfg) + &table.to_pretty(),
    };
    Ok(Output {
        main,
        extra: Vec::new(),
        warnings,
    })
}

#[derive(Serialize)]
struct DesignBody<'a> {
    gamma1: f64,
    gamma2: f64,
    rho_star: f64,
    n_star: f64,
    data: DataSummary,
    gammas: &'a GammaEstimates,
    linkage_check: &'a LinkageCheck,
    solution: &'a DesignSolution,
    warnings: &'a [String],
}

fn run_design(cfg: &RunConfig, c: &DesignConfig) -> Result<Output> {
    let costs = CostSpec::new(c.total, c.c1, c.c2)?;
    let ds = load(&c.input, c.family)?;
    let mut warnings = Vec::new();
    let check = design::linkage_check(&ds)?;
    if check.flagged {
        warnings.push(format!(
            "linkage depends on x (|z| > {}); the allocation assumes completely random linkage",
            design::LINKAGE_Z_LIMIT
        ));
    }
    let fit = NuisanceFit::fit(&ds, &ModelSpec::default_for(ds.p(), ds.q()))?;
    warnings.extend(fit.warnings());
    let gammas = design::estimate_gammas(&ds, &fit, DrawConfig::new(c.d, c.seed), c.correction).map_err(|e| match e {
        Error::SingularCorrection(which) => {
            eprintln!("hint: rerun with --correction fallback or --correction off");
            Error::SingularCorrection(which)
        }
        other => other,
    })?;
    let sol = design::optimal_allocation(&gammas, &costs)?;
    let curve = header_lines(cfg) + &sol.curve_csv();
    let main = match c.format {
        Format::Json => to_json(
            cfg,
            DesignBody {
                gamma1: sol.gamma1,
                gamma2: sol.gamma2,
                rho_star: sol.rho_star,
                n_star: sol.n_star,
                data: summary_of(&ds),
                gammas: &gammas,
                linkage_check: &check,
                solution: &DesignSolution { curve: Vec::new(), ..sol.clone() },
                warnings: &warnings,
            },
        ),
        Format::Csv => curve.clone(),
        Format::Pretty => {
            let mut s = header_lines(cfg);
            let _ = writeln!(s, "gamma1     {}", sol.gamma1);
            let _ = writeln!(s, "gamma2     {}", sol.gamma2);
            let _ = writeln!(s, "rho_star   {}", sol.rho_star);
            let _ = writeln!(s, "n_star     {} (floor {}, ceil {})", sol.n_star, sol.n_star_floor, sol.n_star_ceil);
            let _ = writeln!(s, "rho range  [{}, 1]", sol.rho_min);
            s
        }
    };
    Ok(Output {
        main,
        extra: vec![("curve.csv", curve)],
        warnings,
    })
}
