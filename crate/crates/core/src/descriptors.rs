//! Fast Point Feature Histograms and descriptor matching.
//!
//! Each descriptor is three 11-bin histograms over the Darboux-frame pair
//! features `alpha` (cosine, `[-1, 1]`), `phi` (cosine, `[-1, 1]`) and
//! `theta` (angle, `[-pi, pi]`), concatenated in that order. Every
//! sub-histogram is normalized to sum to 100, or is all zero for points
//! without usable neighbors.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{KdTree, Neighbor, Point3, PointCloud, SpatialIndex, Vector3};
use crate::par;

pub const BINS_PER_FEATURE: usize = 11;
pub const FPFH_DIM: usize = 3 * BINS_PER_FEATURE;
const TIE_EPS: f64 = 1e-6;

/// A 33-bin FPFH signature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpfhDescriptor(pub [f64; FPFH_DIM]);

impl FpfhDescriptor {
    pub fn zero() -> Self {
        Self([0.0; FPFH_DIM])
    }

    pub fn bins(&self) -> &[f64; FPFH_DIM] {
        &self.0
    }

    /// Bins of feature `f` (0 = alpha, 1 = phi, 2 = theta).
    pub fn feature(&self, f: usize) -> &[f64] {
        &self.0[f * BINS_PER_FEATURE..(f + 1) * BINS_PER_FEATURE]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0.0)
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpfhParams {
    /// Neighborhood radius in meters.
    pub radius: f64,
    /// Cap on neighbors considered per point, nearest first.
    pub max_neighbors: usize,
}

impl FpfhParams {
    pub fn new(radius: f64) -> Self {
        Self {
            radius,
            max_neighbors: 100,
        }
    }
}

/// Darboux-frame features `(alpha, phi, theta)` of an oriented point pair.
///
/// The frame is anchored at whichever point's normal makes the smaller angle
/// with the connecting line. Returns `None` for coincident points or when the
/// anchor normal is parallel to the connecting line.
pub fn pair_features(p1: &Point3, n1: &Vector3, p2: &Point3, n2: &Vector3) -> Option<(f64, f64, f64)> {
    let mut d = p2 - p1;
    let len = d.norm();
    if len == 0.0 {
        return None;
    }
    let angle1 = n1.dot(&d) / len;
    let angle2 = n2.dot(&d) / len;
    // Exact ties (coplanar pairs) and theta at the +-pi cut (antiparallel
    // normals) are common in man-made scenes; decide them with a margin so
    // rounding from a rigid motion cannot flip the result.
    let (u, n_other, phi) = if angle2.abs() - angle1.abs() > TIE_EPS {
        d = -d;
        (n2, n1, -angle2)
    } else {
        (n1, n2, angle1)
    };
    let v = d.cross(u);
    let v_norm = v.norm();
    if v_norm <= 1e-12 * len {
        return None;
    }
    let v = v / v_norm;
    let w = u.cross(&v);
    let alpha = v.dot(n_other);
    let mut theta = w.dot(n_other).atan2(u.dot(n_other));
    if theta > PI - TIE_EPS {
        theta = -PI;
    }
    Some((alpha, phi, theta))
}

#[inline]
fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = (BINS_PER_FEATURE as f64 * (value - lo) / (hi - lo)).floor();
    b.clamp(0.0, (BINS_PER_FEATURE - 1) as f64) as usize
}

fn normalize_sub_histograms(h: &mut [f64; FPFH_DIM]) {
    for f in 0..3 {
        let sub = &mut h[f * BINS_PER_FEATURE..(f + 1) * BINS_PER_FEATURE];
        let sum: f64 = sub.iter().sum();
        if sum > 0.0 {
            sub.iter_mut().for_each(|b| *b *= 100.0 / sum);
        }
    }
}

fn spfh(points: &[Point3], normals: &[Vector3], i: usize, nbrs: &[Neighbor]) -> [f64; FPFH_DIM] {
    let mut h = [0.0; FPFH_DIM];
    for nb in nbrs {
        if let Some((alpha, phi, theta)) = pair_features(&points[i], &normals[i], &points[nb.id], &normals[nb.id]) {
            h[bin(alpha, -1.0, 1.0)] += 1.0;
            h[BINS_PER_FEATURE + bin(phi, -1.0, 1.0)] += 1.0;
            h[2 * BINS_PER_FEATURE + bin(theta, -PI, PI)] += 1.0;
        }
    }
    normalize_sub_histograms(&mut h);
    h
}

/// FPFH with the default neighbor cap of 100.
pub fn compute_fpfh(c: &PointCloud, radius: f64) -> Result<Vec<FpfhDescriptor>> {
    let index = SpatialIndex::new(c.clone().without_normals());
    compute_fpfh_with(c, &index, &FpfhParams::new(radius))
}

/// One descriptor per point:
/// `SPFH(p) + (1/k) * sum_k SPFH(p_k) / |p - p_k|` over the radius
/// neighbors, then normalized per feature.
pub fn compute_fpfh_with(c: &PointCloud, index: &SpatialIndex, params: &FpfhParams) -> Result<Vec<FpfhDescriptor>> {
    let all: Vec<usize> = (0..c.len()).collect();
    compute_fpfh_subset(c, index, params, &all)
}

/// Descriptors of the points `ids` only, equal to the matching entries of
/// [`compute_fpfh_with`]. Histograms are built just for `ids` and their
/// neighbors.
pub fn compute_fpfh_subset(
    c: &PointCloud,
    index: &SpatialIndex,
    params: &FpfhParams,
    ids: &[usize],
) -> Result<Vec<FpfhDescriptor>> {
    let normals = c.normals().ok_or(Error::MissingNormals)?;
    if !(params.radius > 0.0) {
        return Err(invalid(format!("FPFH radius must be positive, got {}", params.radius)));
    }
    if params.max_neighbors == 0 {
        return Err(invalid("FPFH neighbor cap must be positive"));
    }
    if index.len() != c.len() {
        return Err(Error::LengthMismatch {
            what: "index vs cloud",
            left: index.len(),
            right: c.len(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= c.len()) {
        return Err(invalid(format!("point {bad} out of range for {} points", c.len())));
    }
    let points = c.points();
    let neighbors_of = |i: usize| {
        // one extra slot for the query point itself
        let mut nbrs = index.knn_within(&points[i], params.max_neighbors + 1, params.radius);
        nbrs.retain(|nb| nb.id != i && nb.distance > 0.0);
        nbrs.truncate(params.max_neighbors);
        nbrs
    };
    let mut neighborhoods: Vec<Option<Vec<Neighbor>>> = vec![None; c.len()];
    for (&i, nbrs) in ids.iter().zip(par::map_slice(ids, |&i| neighbors_of(i))) {
        neighborhoods[i] = Some(nbrs);
    }
    let mut needed: Vec<usize> = ids
        .iter()
        .flat_map(|&i| neighborhoods[i].iter().flatten().map(|nb| nb.id))
        .filter(|&j| neighborhoods[j].is_none())
        .collect();
    needed.sort_unstable();
    needed.dedup();
    for (&j, nbrs) in needed.iter().zip(par::map_slice(&needed, |&j| neighbors_of(j))) {
        neighborhoods[j] = Some(nbrs);
    }
    let described: Vec<usize> = (0..c.len()).filter(|&i| neighborhoods[i].is_some()).collect();
    let mut spfhs = vec![[0.0; FPFH_DIM]; c.len()];
    for (&i, h) in described.iter().zip(par::map_slice(&described, |&i| {
        spfh(points, normals, i, neighborhoods[i].as_deref().unwrap_or_default())
    })) {
        spfhs[i] = h;
    }
    Ok(par::map_slice(ids, |&i| {
        let nbrs = neighborhoods[i].as_deref().unwrap_or_default();
        let mut h = spfhs[i];
        if !nbrs.is_empty() {
            let k = nbrs.len() as f64;
            for nb in nbrs {
                let w = 1.0 / (k * nb.distance);
                for (acc, v) in h.iter_mut().zip(&spfhs[nb.id]) {
                    *acc += w * v;
                }
            }
        }
        normalize_sub_histograms(&mut h);
        FpfhDescriptor(h)
    }))
}

/// Putative `(source id, target id)` pairs from descriptor matching.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    /// Whether pairs passed the mutual-nearest check.
    pub mutual: bool,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Index over a descriptor set for nearest-neighbor matching.
pub struct DescriptorIndex {
    tree: KdTree<FPFH_DIM>,
}

impl DescriptorIndex {
    pub fn new(descs: &[FpfhDescriptor]) -> Self {
        let pts: Vec<[f64; FPFH_DIM]> = descs.iter().map(|d| d.0).collect();
        Self { tree: KdTree::build(&pts) }
    }

    pub fn nearest(&self, d: &FpfhDescriptor) -> Option<usize> {
        self.tree.nearest_squared(&d.0).map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}

/// Pairs each source descriptor with its Euclidean-nearest target
/// descriptor (ties to the lowest target id). With `mutual`, only pairs that
/// are nearest in both directions are kept.
pub fn match_descriptors(src: &[FpfhDescriptor], tgt: &[FpfhDescriptor], mutual: bool) -> Result<CorrespondenceSet> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyInput("descriptor matching needs non-empty inputs"));
    }
    let (tgt_index, src_index) = par::join(
        || DescriptorIndex::new(tgt),
        || mutual.then(|| DescriptorIndex::new(src)),
    );
    match_with_indices(src, tgt, &tgt_index, src_index.as_ref())
}

/// As [`match_descriptors`], with prebuilt indices. `src_index` enables the
/// mutual check.
pub fn match_with_indices(
    src: &[FpfhDescriptor],
    tgt: &[FpfhDescriptor],
    tgt_index: &DescriptorIndex,
    src_index: Option<&DescriptorIndex>,
) -> Result<CorrespondenceSet> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyInput("descriptor matching needs non-empty inputs"));
    }
    let forward: Vec<usize> = par::map_slice(src, |d| tgt_index.nearest(d).expect("non-empty"));
    let pairs = match src_index {
        None => forward.into_iter().enumerate().collect(),
        Some(si) => {
            let keep = par::map_range(forward.len(), |i| si.nearest(&tgt[forward[i]]) == Some(i));
            forward
                .into_iter()
                .enumerate()
                .zip(keep)
                .filter_map(|(p, k)| k.then_some(p))
                .collect()
        }
    };
    Ok(CorrespondenceSet {
        pairs,
        mutual: src_index.is_some(),
    })
}

/// Writes descriptors as CSV, one row of 33 values per point.
pub fn write_descriptors_csv<W: Write>(descs: &[FpfhDescriptor], mut w: W) -> Result<()> {
    let header: Vec<String> = ["alpha", "phi", "theta"]
        .iter()
        .flat_map(|f| (0..BINS_PER_FEATURE).map(move |b| format!("{f}_{b}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for d in descs {
        let row: Vec<String> = d.0.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::estimate_normals;
    use rand::{Rng, SeedableRng};

    fn random_desc(rng: &mut impl Rng) -> FpfhDescriptor {
        FpfhDescriptor(std::array::from_fn(|_| rng.random_range(0.0..30.0)))
    }

    #[test]
    fn tied_pairs_survive_rotation_rounding() {
        let t = crate::RigidTransform::from_euler(0.7, -0.4, 2.1, Vector3::new(30.0, -12.0, 5.0));
        let (p1, p2) = (Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0));
        // antiparallel normals sit on the theta cut; equal ones tie the swap
        for (n1, n2) in [(Vector3::z(), -Vector3::z()), (Vector3::z(), Vector3::new(0.0, 0.6, 0.8))] {
            let a = pair_features(&p1, &n1, &p2, &n2).unwrap();
            let r = t.rotation();
            let b = pair_features(&t.transform_point(&p1), &(r * n1), &t.transform_point(&p2), &(r * n2)).unwrap();
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9, "{a:?} {b:?}");
        }
    }

    #[test]
    fn coplanar_points_concentrate_in_one_bin() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 3]> = (0..400)
            .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), 0.0])
            .collect();
        let n = vec![Vector3::z(); pts.len()];
        let c = PointCloud::from_xyz(&pts, "s").unwrap().with_normals(n).unwrap();
        let descs = compute_fpfh(&c, 1.5).unwrap();
        for d in &descs {
            for f in 0..3 {
                let sub = d.feature(f);
                let max = sub.iter().copied().fold(0.0, f64::max);
                assert!(max >= 99.0, "{sub:?}");
            }
        }
    }

    #[test]
    fn sub_histograms_sum_to_100() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    .normalize()
                    * 4.0;
                [v.x, v.y, v.z]
            })
            .collect();
        let c = estimate_normals(&PointCloud::from_xyz(&pts, "s").unwrap(), 10).unwrap();
        for d in compute_fpfh(&c, 1.2).unwrap() {
            assert!(d.0.iter().all(|&b| b >= 0.0));
            for f in 0..3 {
                let s: f64 = d.feature(f).iter().sum();
                assert!((s - 100.0).abs() < 1e-6 || s == 0.0, "{s}");
            }
        }
    }

    #[test]
    fn isolated_point_has_zero_descriptor() {
        let c = PointCloud::from_xyz(&[[0.0; 3]], "s")
            .unwrap()
            .with_normals(vec![Vector3::z()])
            .unwrap();
        let d = compute_fpfh(&c, 1.0).unwrap();
        assert!(d[0].is_zero());
    }

    #[test]
    fn missing_normals_is_an_error() {
        let c = PointCloud::from_xyz(&[[0.0; 3]], "s").unwrap();
        assert!(matches!(compute_fpfh(&c, 1.0), Err(Error::MissingNormals)));
    }

    #[test]
    fn permuting_points_permutes_descriptors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..1.0)])
            .collect();
        let c = estimate_normals(&PointCloud::from_xyz(&pts, "s").unwrap(), 8).unwrap();
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.reverse();
        perm.swap(3, 100);
        let pts2: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let n2: Vec<Vector3> = perm.iter().map(|&i| c.normals().unwrap()[i]).collect();
        let c2 = PointCloud::from_xyz(&pts2, "s").unwrap().with_normals(n2).unwrap();
        let d1 = compute_fpfh(&c, 1.0).unwrap();
        let d2 = compute_fpfh(&c2, 1.0).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!(d1[i].l1_distance(&d2[j]) < 1e-9);
        }
    }

    #[test]
    fn self_matching_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let d: Vec<_> = (0..100).map(|_| random_desc(&mut rng)).collect();
        for mutual in [false, true] {
            let c = match_descriptors(&d, &d, mutual).unwrap();
            assert_eq!(c.pairs, (0..100).map(|i| (i, i)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_source_matches_linear_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let tgt: Vec<_> = (0..1000).map(|_| random_desc(&mut rng)).collect();
        for _ in 0..20 {
            let src = [random_desc(&mut rng)];
            let c = match_descriptors(&src, &tgt, false).unwrap();
            let dist2 = |a: &FpfhDescriptor, b: &FpfhDescriptor| -> f64 {
                a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum()
            };
            let oracle = (0..tgt.len())
                .min_by(|&a, &b| dist2(&src[0], &tgt[a]).total_cmp(&dist2(&src[0], &tgt[b])))
                .unwrap();
            assert_eq!(c.pairs, vec![(0, oracle)]);
        }
    }

    #[test]
    fn mutual_check_drops_asymmetric_pairs() {
        let mk = |v: f64| FpfhDescriptor(std::array::from_fn(|i| if i == 0 { v } else { 0.0 }));
        // A's nearest target is B, but B's nearest source is C, not A.
        let (a, c) = (mk(0.0), mk(3.6));
        let (b, far) = (mk(3.0), mk(10.0));
        let src = [a, c];
        let tgt = [b, far];
        let plain = match_descriptors(&src, &tgt, false).unwrap();
        assert_eq!(plain.pairs, vec![(0, 0), (1, 0)]);
        let mutual = match_descriptors(&src, &tgt, true).unwrap();
        assert_eq!(mutual.pairs, vec![(1, 0)]);
    }

    #[test]
    fn empty_inputs_rejected() {
        let d = [FpfhDescriptor::zero()];
        assert!(matches!(match_descriptors(&[], &d, false), Err(Error::EmptyInput(_))));
        assert!(matches!(match_descriptors(&d, &[], true), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn subset_matches_full_computation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<[f64; 3]> = (0..400)
            .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-0.5..0.5)])
            .collect();
        let cloud = PointCloud::from_xyz(&pts, "s").unwrap();
        let with_normals = estimate_normals(&cloud, 10).unwrap();
        let index = SpatialIndex::new(cloud);
        let params = FpfhParams::new(1.5);
        let full = compute_fpfh_with(&with_normals, &index, &params).unwrap();
        let ids = [3, 250, 17, 399, 17];
        let part = compute_fpfh_subset(&with_normals, &index, &params, &ids).unwrap();
        for (d, &i) in part.iter().zip(&ids) {
            assert_eq!(d, &full[i]);
        }
        assert!(compute_fpfh_subset(&with_normals, &index, &params, &[400]).is_err());
    }

    #[test]
    fn csv_has_33_columns() {
        let mut buf = Vec::new();
        write_descriptors_csv(&[FpfhDescriptor::zero()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines() {
            assert_eq!(line.split(',').count(), 33);
        }
    }
}
