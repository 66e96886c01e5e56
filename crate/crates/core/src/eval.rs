//! Post-hoc evaluation: threshold-based pair classification, precision-recall
//! curves with average precision, convergence traces from worker logs, and
//! speedup factors.
//!
//! A pair is predicted similar when its squared distance is <= the
//! threshold; "similar" is the positive class. Precision at zero predictions
//! is defined as 1 to anchor the curve.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metric::{pair_distance_sq, Dataset, MetricFactor, PairSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// One point of a precision-recall sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// Sorted by ascending recall.
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

/// Report of time-to-target across worker counts; `factor = t1 / tn`.
#[derive(Debug, Clone)]
pub struct SpeedupReport {
    pub baseline_time: f64,
    /// (worker count, seconds to target); None when the run never got there.
    pub times: Vec<(usize, Option<f64>)>,
    /// Only runs that reached the target appear here.
    pub factors: Vec<(usize, f64)>,
}

/// Squared distances of every pair under `L`, split by label.
pub fn pair_distances(
    l: &MetricFactor,
    data: &Dataset,
    pairs: &PairSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    pairs.validate(data.n())?;
    let dist = |list: &[(usize, usize)]| -> Result<Vec<f64>> {
        list.iter()
            .map(|&(i, j)| pair_distance_sq(l, data.vector(i), data.vector(j)))
            .collect()
    };
    Ok((dist(&pairs.similar)?, dist(&pairs.dissimilar)?))
}

/// Confusion counts at a single threshold `t`.
pub fn classify_pairs(
    l: &MetricFactor,
    data: &Dataset,
    pairs: &PairSet,
    t: f64,
) -> Result<ConfusionCounts> {
    if t < 0.0 {
        return Err(Error::Config("threshold must be >= 0".into()));
    }
    let (sim, dis) = pair_distances(l, data, pairs)?;
    let tp = sim.iter().filter(|&&d| d <= t).count();
    let fp = dis.iter().filter(|&&d| d <= t).count();
    Ok(ConfusionCounts {
        tp,
        fp,
        tn: dis.len() - fp,
        fn_: sim.len() - tp,
    })
}

/// Precision-recall sweep over every distinct pair distance (plus 0 and
/// +inf), from precomputed distances.
pub fn pr_curve_from_distances(sim: &[f64], dis: &[f64]) -> Result<EvalCurve> {
    if sim.is_empty() || dis.is_empty() {
        return Err(Error::Config(
            "PR curve needs at least one similar and one dissimilar pair".into(),
        ));
    }
    let mut thresholds: Vec<f64> = sim.iter().chain(dis.iter()).copied().collect();
    thresholds.push(0.0);
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut sim_sorted = sim.to_vec();
    sim_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut dis_sorted = dis.to_vec();
    dis_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count_le = |sorted: &[f64], t: f64| -> usize { sorted.partition_point(|&d| d <= t) };

    let n_sim = sim.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        let tp = count_le(&sim_sorted, t);
        let fp = count_le(&dis_sorted, t);
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / n_sim;
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
        });
    }
    // thresholds ascend, so recall is already nondecreasing
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in &points {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(EvalCurve {
        points,
        average_precision: ap,
    })
}

pub fn pr_curve(l: &MetricFactor, data: &Dataset, pairs: &PairSet) -> Result<EvalCurve> {
    let (sim, dis) = pair_distances(l, data, pairs)?;
    pr_curve_from_distances(&sim, &dis)
}

/// Threshold maximizing pair-classification accuracy, from precomputed
/// distances. Returns (threshold, accuracy).
pub fn best_threshold(sim: &[f64], dis: &[f64]) -> (f64, f64) {
    let mut thresholds: Vec<f64> = sim.iter().chain(dis.iter()).copied().collect();
    thresholds.push(0.0);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut sim_sorted = sim.to_vec();
    sim_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut dis_sorted = dis.to_vec();
    dis_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total = (sim.len() + dis.len()) as f64;
    let mut best = (0.0, f64::MIN);
    for t in thresholds {
        let tp = sim_sorted.partition_point(|&d| d <= t);
        let fp = dis_sorted.partition_point(|&d| d <= t);
        let tn = dis.len() - fp;
        let acc = (tp + tn) as f64 / total;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

/// Parses one worker trace file: `local_step,wall_seconds,batch_objective`
/// per line. Malformed lines are skipped with a warning.
pub fn read_trace(path: &Path) -> Result<Vec<(f64, f64)>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = if fields.len() == 3 {
            fields[1]
                .trim()
                .parse::<f64>()
                .ok()
                .zip(fields[2].trim().parse::<f64>().ok())
        } else {
            None
        };
        match parsed {
            Some((wall, obj)) => out.push((wall, obj)),
            None => log::warn!("{}:{}: skipping malformed trace line", path.display(), lineno + 1),
        }
    }
    Ok(out)
}

/// Merges per-worker traces into one time-bucketed series: mean batch
/// objective per `bucket_secs` window, emitted at the bucket's end time.
pub fn objective_trace(traces: &[Vec<(f64, f64)>], bucket_secs: f64) -> Result<Vec<(f64, f64)>> {
    if bucket_secs <= 0.0 {
        return Err(Error::Config("bucket width must be > 0".into()));
    }
    let mut merged: Vec<(f64, f64)> = traces.iter().flatten().copied().collect();
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut bucket_idx: Option<u64> = None;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (wall, obj) in merged {
        let idx = (wall / bucket_secs).floor() as u64;
        if bucket_idx.is_some() && bucket_idx != Some(idx) {
            let b = bucket_idx.unwrap();
            out.push(((b + 1) as f64 * bucket_secs, sum / count as f64));
            sum = 0.0;
            count = 0;
        }
        bucket_idx = Some(idx);
        sum += obj;
        count += 1;
    }
    if let Some(b) = bucket_idx {
        out.push(((b + 1) as f64 * bucket_secs, sum / count as f64));
    }
    Ok(out)
}

/// First time at which the bucketed series reaches (<=) the target.
pub fn time_to_target(series: &[(f64, f64)], target: f64) -> Option<f64> {
    series.iter().find(|&&(_, obj)| obj <= target).map(|&(t, _)| t)
}

/// Builds the speedup report from measured times-to-target. `times` must
/// include worker count 1 (the baseline).
pub fn speedup(times: &[(usize, Option<f64>)]) -> Result<SpeedupReport> {
    let baseline_time = times
        .iter()
        .find(|(n, _)| *n == 1)
        .and_then(|(_, t)| *t)
        .ok_or_else(|| Error::Config("speedup needs a 1-worker run that reached the target".into()))?;
    let factors = times
        .iter()
        .filter_map(|&(n, t)| t.map(|t| (n, baseline_time / t)))
        .collect();
    Ok(SpeedupReport {
        baseline_time,
        times: times.to_vec(),
        factors,
    })
}

/// Writes a PR curve as `threshold,precision,recall` CSV.
pub fn write_pr_curve_csv(path: &Path, curve: &EvalCurve) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a speedup report as `workers,seconds,factor` CSV; unreachable runs
/// get empty fields.
pub fn write_speedup_csv(path: &Path, report: &SpeedupReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "workers,seconds,factor")?;
    for &(n, t) in &report.times {
        match t {
            Some(t) => writeln!(w, "{n},{t},{}", report.baseline_time / t)?,
            None => writeln!(w, "{n},,")?,
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Dataset, MetricFactor, PairSet) {
        // points on a line; identity metric in d=1
        let data = Dataset::new(1, vec![0.0, 0.1, 1.0, 1.1, 5.0], None).unwrap();
        let l = MetricFactor::identity(1, 1);
        let pairs = PairSet {
            similar: vec![(0, 1), (2, 3)],
            dissimilar: vec![(0, 2), (1, 4), (3, 4)],
        };
        (data, l, pairs)
    }

    #[test]
    fn threshold_zero_predicts_nothing_similar() {
        let (data, l, pairs) = toy();
        let c = classify_pairs(&l, &data, &pairs, 0.0).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
        assert_eq!(c.fn_, 2);
        assert_eq!(c.tn, 3);
    }

    #[test]
    fn threshold_infinity_predicts_everything_similar() {
        let (data, l, pairs) = toy();
        let c = classify_pairs(&l, &data, &pairs, f64::INFINITY).unwrap();
        assert_eq!((c.tn, c.fn_), (0, 0));
        assert_eq!(c.tp, 2);
        assert_eq!(c.fp, 3);
    }

    #[test]
    fn counts_match_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let vectors: Vec<f32> = (0..20 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = Dataset::new(d, vectors, None).unwrap();
        let l = crate::metric::init_factor(3, 4, 0).unwrap();
        let pairs = PairSet {
            similar: (0..8).map(|i| (i, i + 1)).collect(),
            dissimilar: (0..8).map(|i| (i, 19 - i)).collect(),
        };
        for t in [0.01, 0.1, 0.5, 2.0] {
            let c = classify_pairs(&l, &data, &pairs, t).unwrap();
            let mut want = ConfusionCounts::default();
            for &(i, j) in &pairs.similar {
                if pair_distance_sq(&l, data.vector(i), data.vector(j)).unwrap() <= t {
                    want.tp += 1;
                } else {
                    want.fn_ += 1;
                }
            }
            for &(i, j) in &pairs.dissimilar {
                if pair_distance_sq(&l, data.vector(i), data.vector(j)).unwrap() <= t {
                    want.fp += 1;
                } else {
                    want.tn += 1;
                }
            }
            assert_eq!(c, want);
            assert_eq!(c.tp + c.fn_, pairs.similar.len());
            assert_eq!(c.tn + c.fp, pairs.dissimilar.len());
        }
    }

    #[test]
    fn perfect_separation_gives_ap_one() {
        let sim = vec![0.1, 0.2, 0.3];
        let dis = vec![1.0, 2.0, 3.0];
        let curve = pr_curve_from_distances(&sim, &dis).unwrap();
        assert_relative_eq!(curve.average_precision, 1.0, epsilon = 1e-12);
        for w in curve.points.windows(2) {
            assert!(w[0].recall <= w[1].recall);
        }
    }

    #[test]
    fn random_labels_give_ap_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // balanced pairs, distances assigned independently of the label
        let sim: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0)).collect();
        let dis: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0)).collect();
        let curve = pr_curve_from_distances(&sim, &dis).unwrap();
        assert!(
            (curve.average_precision - 0.5).abs() < 0.05,
            "AP {}",
            curve.average_precision
        );
    }

    #[test]
    fn curve_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sim: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..2.0)).collect();
        let dis: Vec<f64> = (0..200).map(|_| rng.random_range(0.5..3.0)).collect();
        let a = pr_curve_from_distances(&sim, &dis).unwrap();
        let f = |d: f64| (3.0 * d).exp() + d; // strictly increasing
        let sim2: Vec<f64> = sim.iter().map(|&d| f(d)).collect();
        let dis2: Vec<f64> = dis.iter().map(|&d| f(d)).collect();
        let b = pr_curve_from_distances(&sim2, &dis2).unwrap();
        assert_relative_eq!(a.average_precision, b.average_precision, epsilon = 1e-12);
        for (pa, pb) in a.points.iter().zip(b.points.iter()) {
            assert_relative_eq!(pa.precision, pb.precision, epsilon = 1e-12);
            assert_relative_eq!(pa.recall, pb.recall, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_side_is_configuration_error() {
        assert!(pr_curve_from_distances(&[], &[1.0]).is_err());
        assert!(pr_curve_from_distances(&[1.0], &[]).is_err());
    }

    #[test]
    fn trace_single_log_passthrough() {
        let series = vec![vec![(0.5, 10.0), (1.5, 8.0), (2.5, 6.0)]];
        let out = objective_trace(&series, 1.0).unwrap();
        assert_eq!(out, vec![(1.0, 10.0), (2.0, 8.0), (3.0, 6.0)]);
    }

    #[test]
    fn trace_merges_time_ordered() {
        let a = vec![(0.2, 10.0), (1.2, 6.0)];
        let b = vec![(0.7, 8.0), (1.7, 4.0)];
        let out = objective_trace(&[a, b], 1.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], (1.0, 9.0));
        assert_eq!(out[1], (2.0, 5.0));
        assert!(out[0].0 < out[1].0);
    }

    #[test]
    fn trace_bucket_mean_matches_fixture() {
        // 10-line fixture, bucket width 2s: means computed by hand
        let fixture = vec![
            (0.1, 10.0),
            (0.9, 9.0),
            (1.1, 8.0),
            (1.9, 7.0), // bucket [0,2): mean 8.5
            (2.1, 6.0),
            (2.9, 5.0),
            (3.5, 4.0), // bucket [2,4): mean 5.0
            (4.2, 3.0),
            (5.0, 2.0),
            (5.9, 1.0), // buckets [4,6): mean 2.0
        ];
        let out = objective_trace(&[fixture], 2.0).unwrap();
        assert_eq!(out, vec![(2.0, 8.5), (4.0, 5.0), (6.0, 2.0)]);
    }

    #[test]
    fn trace_file_skips_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w0.csv");
        std::fs::write(&path, "1,0.5,10.0\ngarbage\n2,1.5,8.0\n3,not_a_number,x\n").unwrap();
        let t = read_trace(&path).unwrap();
        assert_eq!(t, vec![(0.5, 10.0), (1.5, 8.0)]);
    }

    #[test]
    fn speedup_identical_traces_give_factor_one() {
        let report = speedup(&[(1, Some(10.0)), (2, Some(10.0))]).unwrap();
        assert_eq!(report.factors, vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn speedup_half_time_gives_factor_two() {
        let report = speedup(&[(1, Some(10.0)), (2, Some(5.0)), (4, None)]).unwrap();
        assert_eq!(report.baseline_time, 10.0);
        assert_eq!(report.factors, vec![(1, 1.0), (2, 2.0)]);
        assert_eq!(report.times[2], (4, None));
    }

    #[test]
    fn time_to_target_finds_first_crossing() {
        let series = vec![(1.0, 10.0), (2.0, 5.0), (3.0, 2.0)];
        assert_eq!(time_to_target(&series, 5.0), Some(2.0));
        assert_eq!(time_to_target(&series, 0.5), None);
    }
}
