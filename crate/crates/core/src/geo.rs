//! Spherical geometry helpers: great-circle distance, exact k-nearest-neighbor
//! search, kernel edge weights and terrain descriptors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Above this many points `knn_geo` switches from the all-pairs scan to the
/// latitude-band search.
const BRUTE_FORCE_LIMIT: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinate ({}, {})",
                self.lat, self.lon
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::invalid(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        Ok(())
    }
}

/// Great-circle distance in kilometers.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    if !(a.lat.is_finite() && a.lon.is_finite() && b.lat.is_finite() && b.lon.is_finite()) {
        return Err(Error::invalid("haversine on non-finite coordinates"));
    }
    Ok(haversine_unchecked(a, b))
}

pub(crate) fn haversine_unchecked(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let s_lat = (dlat * 0.5).sin();
    let s_lon = (dlon * 0.5).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// One entry of a neighbor list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub km: f64,
}

#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Max-heap on (distance, index): the top is the current worst candidate.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Exact k nearest neighbors (self excluded) for every point, sorted by
/// ascending distance with ties broken by ascending index.
pub fn knn_geo(points: &[GeoPoint], k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k >= points.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be smaller than the number of points ({})",
            points.len()
        )));
    }
    for p in points {
        p.validate()?;
    }
    if points.len() <= BRUTE_FORCE_LIMIT {
        Ok((0..points.len())
            .into_par_iter()
            .map(|i| knn_brute(points, points[i], Some(i), k))
            .collect())
    } else {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].lat.total_cmp(&points[b].lat).then(a.cmp(&b)));
        let lats: Vec<f64> = order.iter().map(|&i| points[i].lat).collect();
        Ok((0..points.len())
            .into_par_iter()
            .map(|i| knn_banded(points, &order, &lats, points[i], Some(i), k))
            .collect())
    }
}

/// k nearest points of `pool` to an arbitrary query (no exclusion).
pub fn knn_query(pool: &[GeoPoint], query: GeoPoint, k: usize) -> Result<Vec<Neighbor>> {
    query.validate()?;
    if k == 0 || k > pool.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} for this pool",
            pool.len()
        )));
    }
    Ok(knn_brute(pool, query, None, k))
}

fn finish(heap: BinaryHeap<HeapEntry>) -> Vec<Neighbor> {
    heap.into_sorted_vec()
        .into_iter()
        .map(|HeapEntry(km, index)| Neighbor { index, km })
        .collect()
}

fn push_candidate(heap: &mut BinaryHeap<HeapEntry>, k: usize, entry: HeapEntry) {
    if heap.len() < k {
        heap.push(entry);
    } else if let Some(top) = heap.peek() {
        if entry < *top {
            heap.pop();
            heap.push(entry);
        }
    }
}

fn knn_brute(points: &[GeoPoint], q: GeoPoint, skip: Option<usize>, k: usize) -> Vec<Neighbor> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (j, &p) in points.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        push_candidate(&mut heap, k, HeapEntry(haversine_unchecked(q, p), j));
    }
    finish(heap)
}

/// Expands outward from the query's latitude in the latitude-sorted order.
/// Any point whose latitude differs by `dlat` is at least `R * dlat` away, so
/// the scan stops once that bound exceeds the current k-th distance.
fn knn_banded(
    points: &[GeoPoint],
    order: &[usize],
    lats: &[f64],
    q: GeoPoint,
    skip: Option<usize>,
    k: usize,
) -> Vec<Neighbor> {
    let lower_bound = |lat: f64| EARTH_RADIUS_KM * (lat - q.lat).abs().to_radians() - 1e-9;
    let start = lats.partition_point(|&l| l < q.lat);
    let (mut lo, mut hi) = (start, start);
    let mut heap = BinaryHeap::with_capacity(k + 1);
    loop {
        let down = (lo > 0).then(|| lower_bound(lats[lo - 1]));
        let up = (hi < lats.len()).then(|| lower_bound(lats[hi]));
        let (bound, take_down) = match (down, up) {
            (None, None) => break,
            (Some(d), None) => (d, true),
            (None, Some(u)) => (u, false),
            (Some(d), Some(u)) => {
                if d <= u {
                    (d, true)
                } else {
                    (u, false)
                }
            }
        };
        if heap.len() == k && bound > heap.peek().map_or(f64::INFINITY, |e: &HeapEntry| e.0) {
            break;
        }
        let j = if take_down {
            lo -= 1;
            order[lo]
        } else {
            hi += 1;
            order[hi - 1]
        };
        if Some(j) != skip {
            push_candidate(&mut heap, k, HeapEntry(haversine_unchecked(q, points[j]), j));
        }
    }
    finish(heap)
}

/// Gaussian kernel `exp(-d^2 / (2 kappa^2))`.
pub fn gaussian_static_weight(d_km: f64, kappa_km: f64) -> Result<f64> {
    if !(kappa_km > 0.0) || !kappa_km.is_finite() {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa_km}")));
    }
    if !(d_km >= 0.0) {
        return Err(Error::invalid(format!("distance must be non-negative, got {d_km}")));
    }
    Ok((-(d_km * d_km) / (2.0 * kappa_km * kappa_km)).exp())
}

/// Elevation samples around a station: the center cell plus its neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationWindow {
    pub center: f64,
    pub neighbors: Vec<f64>,
}

impl ElevationWindow {
    fn validate(&self) -> Result<()> {
        if self.neighbors.is_empty() {
            return Err(Error::invalid("elevation window has no neighbors"));
        }
        if !self.center.is_finite() || self.neighbors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("elevation window contains non-finite values"));
        }
        Ok(())
    }
}

/// Topographic position index: center minus mean neighbor elevation.
pub fn tpi(w: &ElevationWindow) -> Result<f64> {
    w.validate()?;
    // Offsets from the center keep constant windows exactly flat.
    let mean_offset = w.neighbors.iter().map(|v| v - w.center).sum::<f64>() / w.neighbors.len() as f64;
    Ok(-mean_offset)
}

/// Population standard deviation over the whole window, center included.
pub fn roughness(w: &ElevationWindow) -> Result<f64> {
    w.validate()?;
    let n = (w.neighbors.len() + 1) as f64;
    let offsets = || w.neighbors.iter().map(|v| v - w.center).chain(std::iter::once(0.0));
    let mean = offsets().sum::<f64>() / n;
    let var = offsets().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn haversine_reference_values() {
        assert_eq!(haversine(pt(0.0, 0.0), pt(0.0, 0.0)).unwrap(), 0.0);
        let antipodal = haversine(pt(0.0, 0.0), pt(0.0, 180.0)).unwrap();
        assert!((antipodal - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-9);
        assert!((antipodal - 20015.09).abs() < 0.01);
        // Paris -> London, scripted oracle value 343.56 km.
        let d = haversine(pt(48.8566, 2.3522), pt(51.5074, -0.1278)).unwrap();
        assert!((d - 343.5).abs() < 1.0, "{d}");
    }

    #[test]
    fn haversine_rejects_non_finite() {
        let bad = GeoPoint { lat: f64::NAN, lon: 0.0 };
        assert!(haversine(bad, pt(0.0, 0.0)).is_err());
    }

    #[test]
    fn dateline_longitudes_coincide() {
        let d = haversine(pt(10.0, -180.0), pt(10.0, 180.0)).unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn knn_collinear_equator() {
        let pts = [pt(0.0, 0.0), pt(0.0, 1.0), pt(0.0, 2.0)];
        let k1 = knn_geo(&pts, 1).unwrap();
        assert_eq!(k1[1][0].index, 0);
        let k2 = knn_geo(&pts, 2).unwrap();
        let deg_km = std::f64::consts::PI * EARTH_RADIUS_KM / 180.0;
        assert_eq!(k2[1].iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 2]);
        for n in &k2[1] {
            assert!((n.km - deg_km).abs() < 1e-9);
            assert!((n.km - 111.19).abs() < 0.01);
        }
    }

    #[test]
    fn knn_pair_and_bounds() {
        let pts = [pt(1.0, 1.0), pt(2.0, 2.0)];
        let k = knn_geo(&pts, 1).unwrap();
        assert_eq!(k[0][0].index, 1);
        assert_eq!(k[1][0].index, 0);
        assert!(knn_geo(&pts, 2).is_err());
        assert!(knn_geo(&pts, 0).is_err());
    }

    #[test]
    fn banded_search_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<GeoPoint> = (0..600)
            .map(|_| pt(rng.random_range(-89.0..89.0), rng.random_range(-180.0..180.0)))
            .collect();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| pts[a].lat.total_cmp(&pts[b].lat).then(a.cmp(&b)));
        let lats: Vec<f64> = order.iter().map(|&i| pts[i].lat).collect();
        for i in 0..pts.len() {
            let a = knn_brute(&pts, pts[i], Some(i), 7);
            let b = knn_banded(&pts, &order, &lats, pts[i], Some(i), 7);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gaussian_weight_values() {
        assert_eq!(gaussian_static_weight(0.0, 100.0).unwrap(), 1.0);
        assert!((gaussian_static_weight(100.0, 100.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_static_weight(300.0, 100.0).unwrap() - 0.011109).abs() < 1e-6);
        assert!(gaussian_static_weight(1.0, 0.0).is_err());
        assert!(gaussian_static_weight(1.0, -3.0).is_err());
    }

    #[test]
    fn terrain_descriptors() {
        let w = |c: f64, n: &[f64]| ElevationWindow { center: c, neighbors: n.to_vec() };
        assert_eq!(tpi(&w(100.0, &[100.0, 100.0])).unwrap(), 0.0);
        assert_eq!(tpi(&w(100.0, &[80.0, 80.0, 80.0])).unwrap(), 20.0);
        assert_eq!(tpi(&w(50.0, &[100.0])).unwrap(), -50.0);
        assert_eq!(roughness(&w(250.0, &[250.0, 250.0])).unwrap(), 0.0);
        assert_eq!(roughness(&w(0.0, &[10.0])).unwrap(), 5.0);
        assert!((roughness(&w(0.0, &[0.0, 0.0, 12.0])).unwrap() - 3.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!(tpi(&w(1.0, &[])).is_err());
        assert!(roughness(&w(1.0, &[])).is_err());
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    proptest! {
        #[test]
        fn haversine_metric_properties(a in arb_point(), b in arb_point(), c in arb_point()) {
            let ab = haversine(a, b).unwrap();
            prop_assert_eq!(ab, haversine(b, a).unwrap());
            prop_assert_eq!(haversine(a, a).unwrap(), 0.0);
            prop_assert!(ab >= 0.0 && ab <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
            let ac = haversine(a, c).unwrap();
            let cb = haversine(c, b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn gaussian_weight_monotone(d1 in 0.0f64..2000.0, d2 in 0.0f64..2000.0, kappa in 1.0f64..500.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(gaussian_static_weight(lo, kappa).unwrap() >= gaussian_static_weight(hi, kappa).unwrap());
        }

        #[test]
        fn constant_window_is_flat(v in -500.0f64..9000.0, n in 1usize..20) {
            let w = ElevationWindow { center: v, neighbors: vec![v; n] };
            prop_assert_eq!(tpi(&w).unwrap(), 0.0);
            prop_assert_eq!(roughness(&w).unwrap(), 0.0);
        }
    }
}
