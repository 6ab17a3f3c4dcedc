//! One-axis parameter sweeps over a seed bank.
//!
//! An epsilon sweep runs every radius under both norms: a bare value such as
//! `0.5` expands to `l2:0.5` and `linf:0.5`, while a prefixed value runs only
//! the named norm.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiment::{run_experiment, run_experiment_in_memory, RunRecord};
use crate::error::{Error, Result};
use crate::perturb::NormKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    KSteps,
    Epsilon,
    Norm,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_steps" | "k" => Ok(SweepAxis::KSteps),
            "epsilon" => Ok(SweepAxis::Epsilon),
            "norm" => Ok(SweepAxis::Norm),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (k_steps, epsilon, norm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    /// Empty for regression runs.
    pub final_val_acc: Option<f64>,
    pub ece: Option<f64>,
}

/// `count` consecutive seeds starting at `base`.
pub fn seed_bank(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Parallelism cap from `SALT_THREADS`; 1 when unset or invalid.
pub fn threads_from_env() -> usize {
    std::env::var("SALT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad sweep value {v:?}")))
}

/// Expands raw values into (label, config) pairs in a fixed order.
pub fn expand_axis(
    template: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut out = Vec::new();
    for raw in values {
        let raw = raw.trim();
        match axis {
            SweepAxis::KSteps => {
                let mut c = template.clone();
                c.adv.k_steps = parse_num(raw)?;
                out.push((raw.to_string(), c));
            }
            SweepAxis::Norm => {
                let mut c = template.clone();
                c.adv.norm = raw.parse()?;
                out.push((c.adv.norm.to_string(), c));
            }
            SweepAxis::Epsilon => {
                let (norms, eps) = match raw.split_once(':') {
                    Some((n, e)) => (vec![n.parse::<NormKind>()?], e),
                    None => (vec![NormKind::L2, NormKind::LInf], raw),
                };
                let eps: f64 = parse_num(eps)?;
                for norm in norms {
                    let mut c = template.clone();
                    c.adv.epsilon = eps;
                    c.adv.norm = norm;
                    out.push((format!("{norm}:{eps}"), c));
                }
            }
        }
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

/// Runs every (value, seed) pair. With `out_dir`, each run writes into
/// `<out_dir>/<axis_value>/seed_<seed>/` and the summary goes to
/// `<out_dir>/sweep.csv`. Rows come back in (value, seed) order whatever the
/// thread count.
pub fn sweep(
    template: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    threads: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    let mut jobs = Vec::new();
    for (label, cfg) in expand_axis(template, axis, values)? {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            if let Some(dir) = out_dir {
                c.output_dir = dir.join(label.replace(':', "_")).join(format!("seed_{seed}"));
            }
            jobs.push((label.clone(), c));
        }
    }
    let run = |c: &ExperimentConfig| -> Result<RunRecord> {
        if out_dir.is_some() {
            run_experiment(c)
        } else {
            run_experiment_in_memory(c)
        }
    };

    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run(&jobs[i].1);
                results.lock().expect("sweep worker panicked")[i] = Some(r);
            });
        }
    });

    let mut rows = Vec::with_capacity(jobs.len());
    let results = results.into_inner().expect("sweep worker panicked");
    for ((label, cfg), r) in jobs.iter().zip(results) {
        let record = r.expect("every job ran")?;
        let last = record.last();
        rows.push(SweepRow {
            axis_value: label.clone(),
            seed: cfg.seed,
            final_train_loss: last.train_loss,
            final_val_loss: last.val_loss,
            final_val_acc: last.val_acc,
            ece: last.ece,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_sweep_csv(&rows, std::fs::File::create(dir.join("sweep.csv"))?)?;
    }
    Ok(rows)
}

/// Header: `axis_value,seed,final_train_loss,final_val_loss,final_val_acc,ece`.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `f` over the rows of each axis value, in first-seen order.
pub fn mean_by_value(rows: &[SweepRow], f: impl Fn(&SweepRow) -> f64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _, _)| *v == r.axis_value) {
            Some(e) => {
                e.1 += f(r);
                e.2 += 1;
            }
            None => out.push((r.axis_value.clone(), f(r), 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::DatasetSpec;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::canonical();
        c.epochs = 2;
        c.model.layers = vec![2, 6, 2];
        c.dataset = DatasetSpec::TwoMoons {
            n_train: 24,
            n_test: 12,
            noise: 0.1,
        };
        c
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn epsilon_values_expand_to_both_norms() {
        let e = expand_axis(&tiny(), SweepAxis::Epsilon, &strings(&["0.5", "linf:2"])).unwrap();
        let labels: Vec<_> = e.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["l2:0.5", "linf:0.5", "linf:2"]);
        assert_eq!(e[1].1.adv.norm, NormKind::LInf);
        assert_eq!(e[2].1.adv.epsilon, 2.0);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(expand_axis(&tiny(), SweepAxis::KSteps, &strings(&["two"])).is_err());
        assert!(expand_axis(&tiny(), SweepAxis::Norm, &strings(&["l3"])).is_err());
        assert!(expand_axis(&tiny(), SweepAxis::Epsilon, &strings(&["-1"])).is_err());
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn rows_cover_values_times_seeds_and_ignore_thread_count() {
        let seeds = seed_bank(3, 2);
        let a = sweep(&tiny(), SweepAxis::KSteps, &strings(&["0", "1", "2"]), &seeds, 1, None).unwrap();
        assert_eq!(a.len(), 6);
        let b = sweep(&tiny(), SweepAxis::KSteps, &strings(&["0", "1", "2"]), &seeds, 4, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].seed, 4);
        assert_eq!(mean_by_value(&a, |r| r.seed as f64)[0], ("0".to_string(), 3.5));
    }

    #[test]
    fn sweep_writes_csv_and_per_run_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep(&tiny(), SweepAxis::Epsilon, &strings(&["0.5"]), &[1], 1, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 2);
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "axis_value,seed,final_train_loss,final_val_loss,final_val_acc,ece"
        );
        assert_eq!(lines.count(), 2);
        assert!(dir.path().join("linf_0.5/seed_1/metrics.jsonl").exists());
    }
}
