//! Grid execution and aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{fit_g, fit_predictor, g_checkpoint, generate, predictor_checkpoint, score, ExperimentConfig, HarnessError, RunSpec};
use crate::detect::{results_csv, Detector, ResultRow, RESULT_HEADER};
use crate::training::Ablation;

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub ablation: Ablation,
    pub row: ResultRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub spec: RunSpec,
    pub ablation: Option<Ablation>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggRow {
    pub benchmark: String,
    pub ablation: Ablation,
    pub test_domain: String,
    pub detector: Detector,
    pub n: usize,
    pub auroc_mean: Option<f64>,
    pub auroc_stderr: Option<f64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_stderr: Option<f64>,
}

pub const AGG_HEADER: &str =
    "benchmark,ablation,test_domain,detector,n,auroc_mean,auroc_stderr,ind_accuracy_mean,ind_accuracy_stderr";

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

impl AggRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.benchmark,
            self.ablation,
            self.test_domain,
            self.detector,
            self.n,
            na(self.auroc_mean),
            na(self.auroc_stderr),
            na(self.accuracy_mean),
            na(self.accuracy_stderr)
        )
    }
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value). Values are sorted first so the result
/// does not depend on their order.
pub fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Groups by (benchmark, ablation, test domain, detector) across seeds and
/// OOD classes.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggRow> {
    type Key = (String, Ablation, String, Detector);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.row.benchmark.clone(), r.ablation, r.row.test_domain.clone(), r.row.detector);
        let g = groups.entry(key).or_default();
        g.2 += 1;
        if let Some(a) = r.row.auroc {
            g.0.push(a);
        }
        if let Some(a) = r.row.ind_accuracy {
            g.1.push(a);
        }
    }
    groups
        .into_iter()
        .map(|((benchmark, ablation, test_domain, detector), (au, acc, n))| {
            let a = mean_stderr(&au);
            let c = mean_stderr(&acc);
            AggRow {
                benchmark,
                ablation,
                test_domain,
                detector,
                n,
                auroc_mean: a.map(|x| x.0),
                auroc_stderr: a.map(|x| x.1),
                accuracy_mean: c.map(|x| x.0),
                accuracy_stderr: c.map(|x| x.1),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggRow]) -> String {
    let mut s = String::from(AGG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn parse_cell(s: &str) -> Result<Option<f64>, String> {
    if s == "NA" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
    }
}

/// Reads a per-run results CSV written by [`crate::detect::results_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULT_HEADER) {
        return Err("missing results header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(format!("expected 7 fields in {l:?}"));
            }
            Ok(ResultRow {
                benchmark: f[0].into(),
                seed: f[1].parse().map_err(|_| format!("bad seed {:?}", f[1]))?,
                ood_class: f[2].into(),
                test_domain: f[3].into(),
                detector: f[4].parse()?,
                auroc: parse_cell(f[5])?,
                ind_accuracy: parse_cell(f[6])?,
            })
        })
        .collect()
}

/// Re-reads every `cells/*/results-<ablation>.csv` below `out`.
pub fn collect_runs(out: &Path) -> Result<Vec<RunRow>, HarnessError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |e| HarnessError::Io { path, source: e }
    };
    let cells = out.join("cells");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&cells)
        .map_err(io(&cells))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    for d in dirs {
        for a in Ablation::ALL {
            let p = d.join(format!("results-{a}.csv"));
            if !p.exists() {
                continue;
            }
            let text = fs::read_to_string(&p).map_err(io(&p))?;
            let parsed = parse_results_csv(&text).map_err(|m| HarnessError::Mismatch(format!("{}: {m}", p.display())))?;
            rows.extend(parsed.into_iter().map(|row| RunRow { ablation: a, row }));
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub runs: Vec<RunRow>,
    pub aggregate: Vec<AggRow>,
    pub failures: Vec<Failure>,
}

pub fn grid(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &seed in &cfg.seeds {
        for &ood_class in &cfg.ood_classes {
            for &test_domain in &cfg.test_domains {
                specs.push(RunSpec { seed, ood_class, test_domain });
            }
        }
    }
    specs
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e })
}

/// One grid point: `G` is trained once and shared by every ablation.
fn run_cell(cfg: &ExperimentConfig, spec: RunSpec, dir: Option<&Path>) -> (Vec<RunRow>, Vec<Failure>) {
    let fail = |ablation, e: HarnessError| Failure { spec, ablation, error: e.to_string() };
    let prepared = generate(cfg, &spec).and_then(|s| fit_g(cfg, &spec, &s.train).map(|g| (s, g.0)));
    let (split, g) = match prepared {
        Ok(v) => v,
        Err(e) => return (Vec::new(), vec![fail(None, e)]),
    };
    if let Some(d) = dir {
        if let Err(e) = fs::create_dir_all(d)
            .map_err(|e| HarnessError::Io { path: d.display().to_string(), source: e })
            .and_then(|_| g_checkpoint(cfg, &spec, &g).save(&d.join("g.sodm")).map_err(HarnessError::from))
        {
            return (Vec::new(), vec![fail(None, e)]);
        }
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &a in &cfg.ablations {
        let res = fit_predictor(cfg, &spec, &split.train, &g, a).and_then(|t| {
            let ev = score(cfg, &t, &split.test)?;
            let r = ev.rows(&cfg.benchmark.name, spec.seed, &spec.ood_class.to_string());
            if let Some(d) = dir {
                predictor_checkpoint(cfg, &spec, a, &t).save(&d.join(format!("predictor-{a}.sodm")))?;
                write(&d.join(format!("train-log-{a}.csv")), &t.outcome.log_csv())?;
                write(&d.join(format!("results-{a}.csv")), &results_csv(&r))?;
            }
            Ok(r)
        });
        match res {
            Ok(r) => rows.extend(r.into_iter().map(|row| RunRow { ablation: a, row })),
            Err(e) => {
                log::warn!("cell {} ablation {a} failed: {e}", spec.dir_name());
                failures.push(fail(Some(a), e));
            }
        }
    }
    (rows, failures)
}

/// Runs the whole grid in parallel. With `out`, every cell writes its own
/// subdirectory and the sweep writes `runs.csv`, `aggregate.csv` and
/// `failed.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SweepSummary, HarnessError> {
    let specs = grid(cfg);
    log::info!("sweep: {} cells x {} ablations", specs.len(), cfg.ablations.len());
    let results: Vec<(Vec<RunRow>, Vec<Failure>)> = specs
        .par_iter()
        .map(|&spec| {
            let dir = out.map(|o| o.join("cells").join(spec.dir_name()));
            let r = run_cell(cfg, spec, dir.as_deref());
            log::info!("cell {} done", spec.dir_name());
            r
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in results {
        runs.extend(r);
        failures.extend(f);
    }
    let aggregate = aggregate(&runs);
    if let Some(o) = out {
        let mut text = format!("ablation,{RESULT_HEADER}\n");
        for r in &runs {
            text.push_str(&format!("{},{}\n", r.ablation, r.row.csv()));
        }
        write(&o.join("runs.csv"), &text)?;
        write(&o.join("aggregate.csv"), &aggregate_csv(&aggregate))?;
        let mut f = String::from("seed,ood_class,test_domain,ablation,error\n");
        for x in &failures {
            let a = x.ablation.map_or_else(|| "all".to_string(), |a| a.to_string());
            f.push_str(&format!(
                "{},{},{},{a},\"{}\"\n",
                x.spec.seed,
                x.spec.ood_class,
                x.spec.test_domain,
                x.error.replace('"', "'")
            ));
        }
        write(&o.join("failed.csv"), &f)?;
    }
    Ok(SweepSummary { runs, aggregate, failures })
}
