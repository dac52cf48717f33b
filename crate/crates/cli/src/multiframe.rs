//! Accuracy of pooled multi-frame solves against the number of pooled frames.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgta::metrics::finite_median;
use sgta::simulator::SequenceSample;
use sgta::solver::{multiframe_pnp, RansacConfig};

use crate::config::MultiframeConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub l: usize,
    pub combinations: usize,
    pub failed: usize,
    pub mean_add_mm: f64,
    pub median_add_mm: f64,
    pub min_add_mm: f64,
    pub max_add_mm: f64,
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn all_combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// The frame subsets evaluated for one video: every subset when there are at
/// most `max` of them, otherwise `max` uniformly drawn ones.
pub fn combinations(n: usize, l: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if binomial(n, l) <= max as u128 {
        return all_combinations(n, l);
    }
    (0..max)
        .map(|_| {
            let mut c = index::sample(rng, n, l).into_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

fn stream_seed(seed: u64, l: usize, video: usize) -> u64 {
    seed.wrapping_add(((l as u64) << 32) | video as u64)
}

/// ADD (mm) of every evaluated combination of one video; infinite where the
/// solve failed.
pub fn video_errors(
    sample: &SequenceSample,
    l: usize,
    cfg: &MultiframeConfig,
    ransac: &RansacConfig,
    seed: u64,
) -> Result<Vec<f64>, CliError> {
    if sample.frames.len() < cfg.positions {
        return Err(CliError::Config(format!(
            "video {} has {} frames, multiframe needs {}",
            sample.video,
            sample.frames.len(),
            cfg.positions
        )));
    }
    if sample.frames.iter().any(|f| f.pose != sample.pose) {
        return Err(CliError::Config(format!("video {} does not have a static camera", sample.video)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, l, sample.video));
    let combos = combinations(cfg.positions, l, cfg.max_combinations, &mut rng);
    Ok(combos
        .iter()
        .map(|c| {
            let frames: Vec<_> = c
                .iter()
                .map(|&i| (sample.frames[i].kp2d_det.clone(), sample.frames[i].kp3d.clone()))
                .collect();
            match multiframe_pnp(&frames, &sample.intrinsics, ransac) {
                Ok(r) => {
                    let (sum, n) = frames.iter().flat_map(|(_, p)| &p.points).fold((0.0, 0usize), |(s, n), p| {
                        let d = r.pose.transform_point(p) - sample.pose.transform_point(p);
                        (s + d.norm(), n + 1)
                    });
                    1e3 * sum / n as f64
                }
                Err(_) => f64::INFINITY,
            }
        })
        .collect())
}

/// Summary statistics over finite errors of all videos for each `l`.
pub fn multiframe_sweep(
    videos: &[SequenceSample],
    cfg: &MultiframeConfig,
    ransac: &RansacConfig,
    seed: u64,
) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    cfg.sweep
        .iter()
        .map(|&l| {
            let per_video = videos
                .par_iter()
                .map(|s| video_errors(s, l, cfg, ransac, seed))
                .collect::<Result<Vec<_>, _>>()?;
            let all: Vec<f64> = per_video.into_iter().flatten().collect();
            let finite: Vec<f64> = all.iter().copied().filter(|e| e.is_finite()).collect();
            let (mean, min, max) = if finite.is_empty() {
                (f64::INFINITY, f64::INFINITY, f64::INFINITY)
            } else {
                (
                    finite.iter().sum::<f64>() / finite.len() as f64,
                    finite.iter().copied().fold(f64::INFINITY, f64::min),
                    finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            Ok(SweepRow {
                l,
                combinations: all.len(),
                failed: all.len() - finite.len(),
                mean_add_mm: mean,
                median_add_mm: finite_median(&all).unwrap_or(f64::INFINITY),
                min_add_mm: min,
                max_add_mm: max,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("l,combinations,failed,mean_add_mm,median_add_mm,min_add_mm,max_add_mm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.l, r.combinations, r.failed, r.mean_add_mm, r.median_add_mm, r.min_add_mm, r.max_add_mm
        ));
    }
    out
}

/// Medians averaged with their sweep neighbours (two-point at the ends).
pub fn smoothed_medians(rows: &[SweepRow]) -> Vec<f64> {
    let m: Vec<f64> = rows.iter().map(|r| r.median_add_mm).collect();
    (0..m.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(m.len() - 1);
            let window = &m[lo..=hi];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}
