//! Summary tables over a history stream.

use morphnas::reinforce::Candidate;
use morphnas::resources::{reward, ConstraintSet, Metric, ResourceUsage};
use std::collections::BTreeMap;
use std::io::BufRead;

#[derive(Debug, Default)]
pub struct History {
    pub records: Vec<Candidate>,
    pub corrupt: usize,
}

/// Parses a history stream; unparsable lines are counted, not fatal.
pub fn read_history(input: impl BufRead) -> std::io::Result<History> {
    let mut h = History::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Candidate>(&line) {
            Ok(c) => h.records.push(c),
            Err(_) => h.corrupt += 1,
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub candidates: usize,
    pub failed: usize,
    pub best_reward: f64,
    pub mean_reward: f64,
    pub satisfied_fraction: f64,
}

pub fn episode_rows(records: &[Candidate]) -> Vec<EpisodeRow> {
    let mut by: BTreeMap<usize, Vec<&Candidate>> = BTreeMap::new();
    for r in records {
        by.entry(r.episode).or_default().push(r);
    }
    by.into_iter()
        .map(|(episode, rs)| {
            let n = rs.len() as f64;
            EpisodeRow {
                episode,
                candidates: rs.len(),
                failed: rs.iter().filter(|c| c.failed()).count(),
                best_reward: rs.iter().map(|c| c.reward).fold(f64::NEG_INFINITY, f64::max),
                mean_reward: rs.iter().map(|c| c.reward).sum::<f64>() / n,
                satisfied_fraction: rs.iter().filter(|c| c.satisfied).count() as f64 / n,
            }
        })
        .collect()
}

/// Whether smaller values of `metric` are preferable.
pub fn lower_is_better(metric: Metric) -> bool {
    !matches!(metric, Metric::ComputeIntensity)
}

pub fn metric_name(metric: Metric) -> &'static str {
    match metric {
        Metric::ModelSize => "model_size",
        Metric::ComputeComplexity => "compute_complexity",
        Metric::ComputeIntensity => "compute_intensity",
    }
}

/// Indices of the records not dominated in (performance up, `metric`
/// better), in order of improving metric.
pub fn pareto_front(records: &[Candidate], metric: Metric) -> Vec<usize> {
    let lower = lower_is_better(metric);
    let mut pts: Vec<(usize, f64, f64)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, c)| Some((i, c.performance?, c.usage?.metric(metric))))
        .filter(|(_, p, v)| p.is_finite() && v.is_finite())
        // values oriented so that smaller is better
        .map(|(i, p, v)| (i, p, if lower { v } else { -v }))
        .collect();
    pts.sort_by(|a, b| a.2.total_cmp(&b.2).then(b.1.total_cmp(&a.1)).then(a.0.cmp(&b.0)));
    let mut front = Vec::new();
    let mut best_prev = f64::NEG_INFINITY;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j < pts.len() && pts[j].2 == pts[i].2 {
            j += 1;
        }
        let group_max = pts[i].1;
        if group_max > best_prev {
            front.extend(pts[i..j].iter().filter(|p| p.1 == group_max).map(|p| p.0));
            best_prev = group_max;
        }
        i = j;
    }
    front
}

/// Records whose stored reward differs from one recomputed from their
/// performance and usage.
pub fn reward_mismatches(records: &[Candidate], cs: &ConstraintSet) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.failed())
        .filter(|(_, c)| {
            let recomputed = match (c.performance, c.usage) {
                (Some(p), Some(u)) => reward(p, &u, cs).ok(),
                _ => None,
            };
            recomputed != Some(c.reward)
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn episodes_csv(rows: &[EpisodeRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "candidates", "failed", "best_reward", "mean_reward", "satisfied_fraction"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.candidates.to_string(),
            r.failed.to_string(),
            r.best_reward.to_string(),
            r.mean_reward.to_string(),
            r.satisfied_fraction.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn pareto_csv(records: &[Candidate], metrics: &[Metric]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "episode", "branch", "step", "performance", "value"]).expect("in-memory write");
    for &m in metrics {
        for i in pareto_front(records, m) {
            let c = &records[i];
            let usage: ResourceUsage = c.usage.expect("front members have usage");
            w.write_record([
                metric_name(m).to_string(),
                c.episode.to_string(),
                c.branch.to_string(),
                c.step.to_string(),
                c.performance.expect("front members have performance").to_string(),
                usage.metric(m).to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// The constrained metrics in first-seen order, or all metrics when there are
/// no constraints.
pub fn report_metrics(cs: Option<&ConstraintSet>) -> Vec<Metric> {
    let mut out = Vec::new();
    for c in cs.map(|c| c.0.as_slice()).unwrap_or_default() {
        if !out.contains(&c.metric) {
            out.push(c.metric);
        }
    }
    if out.is_empty() {
        out = vec![Metric::ModelSize, Metric::ComputeComplexity, Metric::ComputeIntensity];
    }
    out
}
