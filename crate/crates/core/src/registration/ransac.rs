use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kabsch::fit_rigid;
use super::{RansacConfig, RegistrationResult};
use crate::descriptors::CorrespondenceSet;
use crate::error::{invalid, Error, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::par;

/// Hypotheses drawn and scored per parallel batch. Selection replays the
/// batch in draw order, so the result does not depend on this value.
const BATCH: usize = 256;

struct Hypothesis {
    transform: RigidTransform,
    inliers: usize,
    rmse: f64,
}

fn score(t: &RigidTransform, src: &[Point3], tgt: &[Point3], eps2: f64) -> (usize, f64) {
    src.iter().zip(tgt).fold((0, 0.0), |(c, s), (p, q)| {
        let r2 = (t.transform_point(p) - q).norm_squared();
        if r2 < eps2 {
            (c + 1, s + r2)
        } else {
            (c, s)
        }
    })
}

fn edge_lengths_compatible(sample: &[usize], src: &[Point3], tgt: &[Point3], ratio: f64) -> bool {
    for a in 0..sample.len() {
        for b in a + 1..sample.len() {
            let ls = (src[sample[a]] - src[sample[b]]).norm();
            let lt = (tgt[sample[a]] - tgt[sample[b]]).norm();
            if ls.min(lt) < ratio * ls.max(lt) {
                return false;
            }
        }
    }
    true
}

/// Checks the optional hypothesis bounds. Translation is measured as the
/// displacement of `pivot` (the source centroid), which unlike the raw
/// translation does not depend on where the frame origin lies.
fn within_bounds(t: &RigidTransform, pivot: &Point3, cfg: &RansacConfig) -> bool {
    cfg.max_rotation_deg.is_none_or(|r| t.rotation_angle() <= r.to_radians())
        && cfg.max_translation.is_none_or(|d| (t.transform_point(pivot) - pivot).norm() <= d)
}

/// Iterations needed to draw one all-inlier sample with probability
/// `confidence` given inlier ratio `w`.
fn required_iterations(w: f64, sample_size: usize, confidence: f64, cap: usize) -> usize {
    let p = w.powi(sample_size as i32);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    if n.is_finite() && n < cap as f64 {
        (n as usize).max(1)
    } else {
        cap
    }
}

/// RANSAC over putative correspondences.
///
/// Each iteration samples `sample_size` correspondences, discards samples
/// whose pairwise edge lengths disagree, fits a rigid transform in closed
/// form, and counts correspondences with residual below the threshold. The
/// best hypothesis (most inliers, then lower inlier RMSE, then earliest) is
/// re-fit on its inlier set. Bit-reproducible for a given seed.
pub fn ransac_coarse(
    src: &PointCloud,
    tgt: &PointCloud,
    corr: &CorrespondenceSet,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let n = corr.len();
    if n < cfg.sample_size {
        return Err(Error::InsufficientCorrespondences {
            needed: cfg.sample_size,
            got: n,
        });
    }
    if let Some(&(s, t)) = corr.pairs.iter().find(|&&(s, t)| s >= src.len() || t >= tgt.len()) {
        return Err(invalid(format!("correspondence ({s}, {t}) out of range")));
    }
    let sp: Vec<Point3> = corr.pairs.iter().map(|&(s, _)| src.points()[s]).collect();
    let tp: Vec<Point3> = corr.pairs.iter().map(|&(_, t)| tgt.points()[t]).collect();
    let eps2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let pivot = Point3::from(sp.iter().fold(crate::geometry::Vector3::zeros(), |acc, p| acc + p.coords) / n as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Hypothesis> = None;
    let mut limit = cfg.max_iterations;
    let mut done = 0;
    'outer: while done < limit {
        let batch = BATCH.min(limit - done);
        let samples: Vec<Vec<usize>> = (0..batch)
            .map(|_| index::sample(&mut rng, n, cfg.sample_size).into_vec())
            .collect();
        let scored = par::map_slice(&samples, |sample| {
            if !edge_lengths_compatible(sample, &sp, &tp, cfg.edge_length_check_ratio) {
                return None;
            }
            let s: Vec<Point3> = sample.iter().map(|&i| sp[i]).collect();
            let t: Vec<Point3> = sample.iter().map(|&i| tp[i]).collect();
            let transform = fit_rigid(&s, &t).ok()?;
            if !within_bounds(&transform, &pivot, cfg) {
                return None;
            }
            let (inliers, sse) = score(&transform, &sp, &tp, eps2);
            (inliers >= cfg.min_inliers.max(1)).then(|| Hypothesis {
                transform,
                inliers,
                rmse: (sse / inliers as f64).sqrt(),
            })
        });
        for (j, hyp) in scored.into_iter().enumerate() {
            let iteration = done + j;
            if let Some(h) = hyp {
                let better = best
                    .as_ref()
                    .is_none_or(|b| h.inliers > b.inliers || (h.inliers == b.inliers && h.rmse < b.rmse));
                if better {
                    limit = limit.min(required_iterations(
                        h.inliers as f64 / n as f64,
                        cfg.sample_size,
                        cfg.confidence,
                        cfg.max_iterations,
                    ));
                    best = Some(h);
                }
            }
            if iteration + 1 >= limit {
                done = iteration + 1;
                break 'outer;
            }
        }
        done += batch;
    }

    let Some(best) = best else {
        return Ok(RegistrationResult {
            transform: RigidTransform::identity(),
            fitness: 0.0,
            inlier_rmse: 0.0,
            iterations_used: done,
            converged: false,
            low_confidence: true,
            monotonic_violations: 0,
        });
    };

    // re-fit on the full inlier set of the winning hypothesis
    let (is, it): (Vec<Point3>, Vec<Point3>) = sp
        .iter()
        .zip(&tp)
        .filter(|(p, q)| (best.transform.transform_point(p) - *q).norm_squared() < eps2)
        .map(|(p, q)| (*p, *q))
        .unzip();
    let refit = fit_rigid(&is, &it).ok().and_then(|t| {
        let (c, sse) = score(&t, &sp, &tp, eps2);
        (c > 0).then(|| Hypothesis {
            transform: t,
            inliers: c,
            rmse: (sse / c as f64).sqrt(),
        })
    });
    let chosen = match refit {
        Some(r) if r.inliers >= best.inliers && within_bounds(&r.transform, &pivot, cfg) => r,
        _ => best,
    };
    Ok(RegistrationResult {
        transform: chosen.transform,
        fitness: chosen.inliers as f64 / n as f64,
        inlier_rmse: chosen.rmse,
        iterations_used: done,
        converged: true,
        low_confidence: false,
        monotonic_violations: 0,
    })
}
