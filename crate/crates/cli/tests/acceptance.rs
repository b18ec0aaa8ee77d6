//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines are always shown.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;
#[path = "support/cli.rs"]
mod support;

use std::collections::BTreeMap;
use std::time::Instant;

use didmed::contrast::{EstimationConfig, Execution};
use didmed::data::{load_dataset, Design, Schema};
use didmed::estimators::{estimate, EffectEstimate};
use didmed::simulation::{generate, run_replications, summarize, true_effects, DgpKind, DgpSpec, EstimandSummary};
use oracle::{all_ids, catalogue, exact_set, misspecified, population, slope, Direction, Part};

const DESIGNS: [Design; 2] = [Design::RepeatedCrossSection, Design::Panel];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Per-replication draws of every effect, keyed by name.
struct Draws {
    by_name: Vec<(String, Vec<EffectEstimate>)>,
    failures: usize,
    residuals: Vec<f64>,
}

fn monte_carlo(kind: DgpKind, n: usize, reps: usize) -> Draws {
    let spec = DgpSpec::new(kind, n, 1);
    let cfg = EstimationConfig::default();
    let mut by_name: Vec<(String, Vec<EffectEstimate>)> = Vec::new();
    let mut failures = 0;
    let mut residuals = Vec::new();
    for res in run_replications(&spec, &kind.default_estimands(), &cfg, reps) {
        let Ok(effects) = res else {
            failures += 1;
            continue;
        };
        let value = |name: &str| effects.iter().find(|e| e.name == name).map(|e| e.value);
        if let (Some(t), Some(d), Some(i)) = (value("total"), value("nde"), value("nie")) {
            residuals.push(t - d - i);
        }
        for e in effects {
            match by_name.iter_mut().find(|(k, _)| *k == e.name) {
                Some((_, v)) => v.push(e),
                None => by_name.push((e.name.clone(), vec![e])),
            }
        }
    }
    Draws { by_name, failures, residuals }
}

fn summaries(kind: DgpKind, draws: &Draws) -> Vec<EstimandSummary> {
    let truths = true_effects(kind, 100);
    draws.by_name.iter().map(|(name, v)| summarize(name.clone(), truths[name], v)).collect()
}

fn fmt_summary(s: &EstimandSummary) -> String {
    format!("{} bias={:+.3} std={:.3} avse={:.3} cover={:.3}", s.name, s.bias, s.std, s.avse, s.cover)
}

fn criterion_1(draws: &Draws) -> Outcome {
    let reference: BTreeMap<&str, f64> = [("total", 0.266), ("nde", 0.264), ("nie", 0.137)].into();
    let sums = summaries(DgpKind::RcsContinuousMediator, draws);
    let mut pass = draws.failures == 0 && sums.len() == 3;
    let mut parts = vec![];
    for s in &sums {
        let ratio = s.std / reference[s.name.as_str()];
        let ok = s.bias.abs() <= 0.12 && (0.6..=1.4).contains(&ratio) && (0.88..=0.97).contains(&s.cover);
        pass &= ok;
        parts.push(format!("{} std/ref={ratio:.2}{}", fmt_summary(s), if ok { "" } else { " <-" }));
    }
    outcome(pass, format!("failures={} | {}", draws.failures, parts.join(" | ")))
}

fn criterion_2(draws: &Draws) -> Outcome {
    let sums = summaries(DgpKind::RcsBinaryMediator, draws);
    let mut pass = draws.failures == 0 && sums.len() == 3;
    let mut parts = vec![];
    for s in &sums {
        let ok = s.bias.abs() <= 0.15 && (0.88..=0.97).contains(&s.cover);
        pass &= ok;
        parts.push(format!("{}{}", fmt_summary(s), if ok { "" } else { " <-" }));
    }
    outcome(pass, format!("failures={} | {}", draws.failures, parts.join(" | ")))
}

fn criterion_3(small: &Draws, large: &Draws) -> Outcome {
    let (a, b) = (summaries(DgpKind::RcsBinaryMediator, small), summaries(DgpKind::RcsBinaryMediator, large));
    let mut pass = large.failures == 0 && a.len() == 3 && b.len() == 3;
    let mut parts = vec![];
    for (s, l) in a.iter().zip(&b) {
        let ratio = l.std / s.std;
        let ok = s.name == l.name && (0.4..=0.6).contains(&ratio) && l.reps_ok >= 100;
        pass &= ok;
        parts.push(format!("{} std {:.3}->{:.3} ratio={ratio:.3}{}", s.name, s.std, l.std, if ok { "" } else { " <-" }));
    }
    outcome(pass, parts.join(" | "))
}

fn criterion_4() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for seed in 0..8 {
        for design in DESIGNS {
            let ds = population(design, seed);
            let nu = exact_set(&ds, &all_ids(design));
            let builders: Vec<_> = catalogue().into_iter().filter(|b| b.design == design).collect();
            let values: Vec<f64> = builders.iter().map(|b| (b.eval)(&ds, &nu)).collect();
            for (b, v) in builders.iter().zip(&values) {
                let gap = (v - (b.regression)(&ds)).abs();
                checked += 1;
                if !(gap <= worst.0) {
                    worst = (gap, b.name.clone());
                }
            }
            // Per-row and sum-over-mediator forms of the same counterfactual.
            for sum in builders.iter().zip(&values).filter(|(b, _)| b.name.contains("treated-mediator sum")) {
                let tag = &sum.0.name[sum.0.name.rfind('(').unwrap()..];
                for (b, v) in builders.iter().zip(&values).filter(|(b, _)| b.name.contains("treated-mediator") && b.name.ends_with(tag)) {
                    let gap = (v - sum.1).abs();
                    checked += 1;
                    if !(gap <= worst.0) {
                        worst = (gap, format!("{} vs {}", b.name, sum.0.name));
                    }
                }
            }
        }
    }
    outcome(worst.0 <= 1e-10, format!("{checked} comparisons, max |gap|={:.2e} ({})", worst.0, worst.1))
}

fn criterion_5() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    for design in DESIGNS {
        let ds = population(design, 3);
        for b in catalogue().into_iter().filter(|b| b.design == design) {
            for k in 0..5 {
                let s = slope(&b, &ds, &Direction::new(1000 + k), 1e-4).abs();
                n += 1;
                if !(s <= worst.0) {
                    worst = (s, b.name.clone());
                }
            }
        }
    }
    outcome(worst.0 <= 1e-6, format!("{n} builder-direction pairs, max |slope|={:.2e} ({})", worst.0, worst.1))
}

fn criterion_6() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut sensitive = true;
    let mut names = vec![];
    for design in DESIGNS {
        for seed in 0..4 {
            let ds = population(design, seed);
            let ids = all_ids(design);
            for b in catalogue().into_iter().filter(|b| b.design == design && b.doubly_robust) {
                let truth = (b.regression)(&ds);
                for part in [Part::Outcome, Part::Propensity] {
                    let gap = ((b.eval)(&ds, &misspecified(&ds, &ids, part, 50 + seed)) - truth).abs();
                    if !(gap <= worst.0) {
                        worst = (gap, format!("{} wrong {part:?}", b.name));
                    }
                }
                sensitive &= ((b.eval)(&ds, &misspecified(&ds, &ids, Part::All, 50 + seed)) - truth).abs() > 1e-6;
                if seed == 0 {
                    names.push(b.name);
                }
            }
        }
    }
    outcome(
        worst.0 <= 1e-10 && sensitive,
        format!("{} builders, max |gap|={:.2e} ({}); both-wrong moves value: {sensitive}", names.len(), worst.0, worst.1),
    )
}

fn criterion_7(draws: &Draws) -> Outcome {
    let worst = draws.residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let ok = !draws.residuals.is_empty() && worst <= 1e-12;
    outcome(ok, format!("{} decompositions, max |total-nde-nie|={worst:.2e}", draws.residuals.len()))
}

fn criterion_8() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let csv = dir.path().join("det.csv");
    let csv_s = csv.to_str().unwrap();
    let emitted = support::didmed(&["simulate", "--dgp", "rcs-binary", "--n", "1500", "--p", "30", "--reps", "1", "--seed", "5", "--emit-data", csv_s]);
    let estimate_with = |w: &str| {
        support::didmed(&["estimate", "-i", csv_s, "--design", "rcs", "--estimand", "atet-joint", "--m", "1", "--m-prime", "0", "--workers", w]).stdout
    };
    let est: Vec<String> = ["1", "2", "8"].iter().map(|w| estimate_with(w)).collect();
    let simulate_with = |w: &str| support::didmed(&["simulate", "--dgp", "panel-binary", "--n", "800", "--p", "20", "--reps", "4", "--workers", w]).stdout;
    let sim: Vec<String> = ["1", "3"].iter().map(|w| simulate_with(w)).collect();

    let ds = generate(&DgpSpec::new(DgpKind::RcsContinuousMediator, 1000, 9).with_p(20));
    let c = &DgpKind::RcsContinuousMediator.default_estimands()[0];
    let bits = |execution| -> Vec<u64> {
        let e = estimate(&ds, c, &EstimationConfig { execution, ..Default::default() }).unwrap();
        e.effects().iter().flat_map(|x| [x.value.to_bits(), x.std_error.to_bits(), x.ci_low.to_bits()]).collect()
    };
    let in_process = bits(Execution::Sequential) == bits(Execution::Parallel);
    let ok = emitted.code == 0 && !est[0].is_empty() && est.iter().all(|s| *s == est[0]) && sim.iter().all(|s| *s == sim[0]) && in_process;
    outcome(
        ok,
        format!(
            "estimate reports identical across 1/2/8 workers: {}; simulation reports identical across 1/3 workers: {}; sequential = parallel in process: {in_process}",
            est.iter().all(|s| *s == est[0]),
            sim.iter().all(|s| *s == sim[0])
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let csv = dir.path().join("rep0.csv");
    let csv_s = csv.to_str().unwrap();
    let seed = "11";
    let sim = support::didmed(&["simulate", "--dgp", "rcs-continuous", "--n", "2000", "--p", "100", "--reps", "1", "--seed", seed, "--emit-data", csv_s]);
    let est = support::didmed(&[
        "estimate", "-i", csv_s, "--design", "rcs", "--estimand", "natural-decomposition", "--mediator", "continuous", "--seed", seed,
    ]);
    if sim.code != 0 || est.code != 0 {
        return outcome(false, format!("simulate exit {} / estimate exit {}: {}{}", sim.code, est.code, sim.stdout, est.stdout));
    }
    let cli = support::effects(&est.json);
    // Against the simulation report: bias = estimate - truth and avse = se for a single replication.
    let mut report_match = true;
    for ((name, value, se), s) in cli.iter().zip(sim.json["estimands"].as_array().unwrap()) {
        report_match &= s["name"] == name.as_str()
            && (value - s["truth"].as_f64().unwrap()).to_bits() == s["bias"].as_f64().unwrap().to_bits()
            && se.to_bits() == s["avse"].as_f64().unwrap().to_bits();
    }
    // Against the library on the in-memory replication and on the re-read file.
    let spec = DgpSpec::new(DgpKind::RcsContinuousMediator, 2000, 11);
    let cfg = EstimationConfig { seed: 11, ..Default::default() };
    let c = &DgpKind::RcsContinuousMediator.default_estimands()[0];
    let lib = run_replications(&spec, std::slice::from_ref(c), &cfg, 1).remove(0).unwrap();
    let loaded = load_dataset(std::fs::File::open(&csv).unwrap(), &Schema::default(), Design::RepeatedCrossSection).unwrap();
    let data_match = loaded == generate(&spec);
    let lib_match = lib.len() == cli.len()
        && lib.iter().zip(&cli).all(|(e, (name, v, se))| e.name == *name && e.value.to_bits() == v.to_bits() && e.std_error.to_bits() == se.to_bits());
    outcome(
        report_match && data_match && lib_match,
        format!(
            "csv re-read equals generated data: {data_match}; estimate = simulate report: {report_match}; estimate = library replication: {lib_match}; {}",
            cli.iter().map(|(n, v, se)| format!("{n}={v:.4} (se {se:.4})")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut lines = vec![];
    let mut record = |k: usize, title: &str, t: Instant, o: Outcome| {
        let line = format!("criterion {k} {}: {title} [{:.0}s] {}", if o.pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64(), o.detail);
        println!("{line}");
        lines.push((o.pass, line));
    };

    let t = Instant::now();
    record(4, "population identities", t, criterion_4());
    let t = Instant::now();
    record(5, "first-order insensitivity", t, criterion_5());
    let t = Instant::now();
    record(6, "double robustness", t, criterion_6());
    let t = Instant::now();
    record(8, "determinism", t, criterion_8());
    let t = Instant::now();
    record(9, "CLI round trip", t, criterion_9());

    let t = Instant::now();
    let continuous = monte_carlo(DgpKind::RcsContinuousMediator, 2000, 200);
    record(1, "continuous mediator, n=2000, 200 reps", t, criterion_1(&continuous));
    record(7, "decomposition identity", Instant::now(), criterion_7(&continuous));

    let t = Instant::now();
    let binary = monte_carlo(DgpKind::RcsBinaryMediator, 2000, 200);
    record(2, "binary mediator, n=2000, 200 reps", t, criterion_2(&binary));

    let t = Instant::now();
    let binary_large = monte_carlo(DgpKind::RcsBinaryMediator, 8000, 100);
    record(3, "root-n scaling, binary mediator n=8000 vs 2000, 100 reps", t, criterion_3(&binary, &binary_large));

    lines.sort_by_key(|(_, l)| l.split_whitespace().nth(1).and_then(|k| k.parse::<usize>().ok()));
    println!("\nacceptance summary ({:.0}s)", start.elapsed().as_secs_f64());
    for (_, l) in &lines {
        println!("{}", l.split(": ").next().unwrap_or(l));
    }
    let failed = lines.iter().filter(|(p, _)| !p).count();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
