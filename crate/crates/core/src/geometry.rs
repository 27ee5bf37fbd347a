//! Spherical math on view directions.
//!
//! Points are `(yaw, pitch)` in radians with yaw in `[-pi, pi)` and pitch in
//! `[-pi/2, pi/2]`. Yaw is the azimuth about the vertical axis, pitch the
//! elevation of the view direction.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_io::HeadSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("sample count mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("viewport extent {0} rad outside (0, pi]")]
    InvalidExtent(f64),
    #[error("coverage grid must have at least one cell per axis")]
    EmptyGrid,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    if (-PI..PI).contains(&angle) {
        return angle;
    }
    let w = (angle + PI).rem_euclid(TAU) - PI;
    // rem_euclid may round up to exactly TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Unwraps a yaw sequence so consecutive values never differ by more than
/// pi. The first value is kept as is.
pub fn unwrap_yaw<I>(yaws: I) -> Vec<f64>
where
    I: IntoIterator<Item = f64>,
{
    let mut out: Vec<f64> = Vec::new();
    let mut prev_raw = 0.0;
    for y in yaws {
        match out.last().copied() {
            None => out.push(y),
            Some(prev) => out.push(prev + wrap_angle(y - prev_raw)),
        }
        prev_raw = y;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub yaw: f64,
    pub pitch: f64,
}

impl SphericalPoint {
    /// Builds a point, wrapping yaw and clamping pitch into range.
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            pitch: pitch.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    /// Unit view vector, z up.
    pub fn to_unit_vector(self) -> [f64; 3] {
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        [cp * cy, cp * sy, sp]
    }

    pub fn from_unit_vector(v: [f64; 3]) -> Self {
        let horiz = v[0].hypot(v[1]);
        Self::new(v[1].atan2(v[0]), v[2].atan2(horiz))
    }
}

/// Central angle between two view directions, in `[0, pi]`.
///
/// Equal to `acos(sin pa sin pb + cos pa cos pb cos(ya - yb))`, evaluated
/// through `atan2(|a x b|, a . b)` which stays accurate for nearly equal
/// and nearly antipodal points.
pub fn geodesic(a: SphericalPoint, b: SphericalPoint) -> f64 {
    unit_geodesic(a.to_unit_vector(), b.to_unit_vector())
}

pub(crate) fn unit_geodesic(u: [f64; 3], v: [f64; 3]) -> f64 {
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    cross.atan2(dot).clamp(0.0, PI)
}

/// Angular size of the rendered viewport.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportSpec {
    pub yaw_extent: f64,
    pub pitch_extent: f64,
}

impl Default for ViewportSpec {
    fn default() -> Self {
        Self {
            yaw_extent: 100f64.to_radians(),
            pitch_extent: 100f64.to_radians(),
        }
    }
}

impl ViewportSpec {
    pub fn new(yaw_extent: f64, pitch_extent: f64) -> Result<Self, GeometryError> {
        for e in [yaw_extent, pitch_extent] {
            if !(e > 0.0 && e <= PI) {
                return Err(GeometryError::InvalidExtent(e));
            }
        }
        Ok(Self {
            yaw_extent,
            pitch_extent,
        })
    }

    pub fn from_degrees(yaw_deg: f64, pitch_deg: f64) -> Result<Self, GeometryError> {
        Self::new(yaw_deg.to_radians(), pitch_deg.to_radians())
    }

    /// Center distance at which two viewports stop sharing content.
    pub fn max_overlap_distance(&self) -> f64 {
        self.yaw_extent.min(self.pitch_extent)
    }
}

/// Linear overlap surrogate: 1 for coincident centers, 0 once the centers
/// are a full viewport extent apart.
pub fn overlap_proxy(distance: f64, vp: &ViewportSpec) -> f64 {
    (1.0 - distance / vp.max_overlap_distance()).clamp(0.0, 1.0)
}

/// Mean overlap proxy over corresponding samples of two equal-length traces.
pub fn trace_vpo(
    a: &[HeadSample],
    b: &[HeadSample],
    vp: &ViewportSpec,
) -> Result<f64, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(GeometryError::InsufficientSamples { needed: 1, got: 0 });
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| overlap_proxy(geodesic(x.point(), y.point()), vp))
        .sum();
    Ok(total / a.len() as f64)
}

/// Per-step unsigned angular speed in rad/s (great-circle step length times
/// the sampling rate).
pub fn angular_speed(samples: &[HeadSample], rate_hz: f64) -> Result<Vec<f64>, GeometryError> {
    if samples.len() < 2 {
        return Err(GeometryError::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    Ok(samples
        .windows(2)
        .map(|w| geodesic(w[0].point(), w[1].point()) * rate_hz)
        .collect())
}

/// Per-step signed yaw and pitch rates in rad/s. Yaw differences are taken
/// the short way around the circle.
pub fn axis_rates(
    samples: &[HeadSample],
    rate_hz: f64,
) -> Result<(Vec<f64>, Vec<f64>), GeometryError> {
    if samples.len() < 2 {
        return Err(GeometryError::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    Ok(samples
        .windows(2)
        .map(|w| {
            (
                wrap_angle(w[1].yaw - w[0].yaw) * rate_hz,
                (w[1].pitch - w[0].pitch) * rate_hz,
            )
        })
        .unzip())
}

/// Equirectangular grid used to estimate covered solid angle. Coverage uses
/// only the pitch rows; `yaw_cells` sets the column count of heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageGrid {
    pub yaw_cells: usize,
    pub pitch_cells: usize,
}

impl Default for CoverageGrid {
    fn default() -> Self {
        Self {
            yaw_cells: 360,
            pitch_cells: 180,
        }
    }
}

impl CoverageGrid {
    /// Square cells of `deg` degrees.
    pub fn with_cell_deg(deg: f64) -> Self {
        Self {
            yaw_cells: ((360.0 / deg).round() as usize).max(1),
            pitch_cells: ((180.0 / deg).round() as usize).max(1),
        }
    }
}

/// Percentage of the sphere covered by the union of the viewport boxes
/// centered at each sample.
///
/// The sphere is cut into `pitch_cells` latitude rows. A row is covered
/// along the union of the yaw arcs `|dyaw| <= yaw_extent/2` of every sample
/// whose pitch is within `pitch_extent/2` of the row center, and contributes
/// `cos(pitch_row) * arc_length * dpitch / 4pi`. The yaw arcs are measured
/// exactly rather than on `yaw_cells` bins, which makes the estimate
/// independent of global yaw rotation and of sample order.
pub fn sphere_coverage(
    samples: &[HeadSample],
    vp: &ViewportSpec,
    grid: CoverageGrid,
) -> Result<f64, GeometryError> {
    if grid.pitch_cells == 0 {
        return Err(GeometryError::EmptyGrid);
    }
    if samples.is_empty() {
        return Err(GeometryError::InsufficientSamples { needed: 1, got: 0 });
    }
    let d_pitch = PI / grid.pitch_cells as f64;
    let half_yaw = vp.yaw_extent / 2.0;
    let half_pitch = vp.pitch_extent / 2.0;

    let mut arcs: Vec<(f64, f64)> = Vec::with_capacity(2 * samples.len());
    let mut covered = 0.0;
    for row in 0..grid.pitch_cells {
        let pitch_c = -FRAC_PI_2 + (row as f64 + 0.5) * d_pitch;
        arcs.clear();
        let mut full_row = false;
        for s in samples {
            if (pitch_c - s.pitch).abs() > half_pitch {
                continue;
            }
            if 2.0 * half_yaw >= TAU {
                full_row = true;
                break;
            }
            let lo = wrap_angle(s.yaw - half_yaw);
            let hi = lo + 2.0 * half_yaw;
            if hi <= PI {
                arcs.push((lo, hi));
            } else {
                arcs.push((lo, PI));
                arcs.push((-PI, hi - TAU));
            }
        }
        let length = if full_row { TAU } else { union_length(&mut arcs) };
        covered += length * pitch_c.cos();
    }
    let pct = covered * d_pitch / (4.0 * PI) * 100.0;
    Ok(pct.clamp(0.0, 100.0))
}

/// Total length of the union of closed intervals.
fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for &(lo, hi) in intervals.iter() {
        current = match current {
            Some((clo, chi)) if lo <= chi => Some((clo, chi.max(hi))),
            Some((clo, chi)) => {
                total += chi - clo;
                Some((lo, hi))
            }
            None => Some((lo, hi)),
        };
    }
    if let Some((clo, chi)) = current {
        total += chi - clo;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(yaw: f64, pitch: f64) -> SphericalPoint {
        SphericalPoint::new(yaw, pitch)
    }

    fn samples(points: &[(f64, f64)], rate: f64) -> Vec<HeadSample> {
        points
            .iter()
            .enumerate()
            .map(|(n, &(y, p))| HeadSample::new(n as f64 / rate, y, p))
            .collect()
    }

    fn constant(yaw: f64, pitch: f64, n: usize) -> Vec<HeadSample> {
        samples(&vec![(yaw, pitch); n], 10.0)
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(wrap_angle(-1e-300) < PI);
        for k in -5..5 {
            let w = wrap_angle(0.3 + k as f64 * TAU);
            assert!((w - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn unwrap_crosses_seam_short_way() {
        let u = unwrap_yaw([3.1, -3.1, -2.9]);
        assert_eq!(u[0], 3.1);
        assert!((u[1] - (TAU - 3.1)).abs() < 1e-12);
        assert!((u[2] - (TAU - 2.9)).abs() < 1e-12);
    }

    #[test]
    fn geodesic_trivial_cases() {
        assert_eq!(geodesic(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
        assert!((geodesic(pt(0.0, 0.0), pt(PI - 1e-9, 0.0)) - PI).abs() < 1e-6);
        assert!((geodesic(pt(0.0, 0.0), pt(FRAC_PI_2, 0.0)) - FRAC_PI_2).abs() < 1e-12);
        assert!((geodesic(pt(0.0, FRAC_PI_2), pt(1.0, 0.0)) - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn overlap_proxy_examples() {
        let vp = ViewportSpec::default();
        let tmax = vp.max_overlap_distance();
        assert_eq!(overlap_proxy(0.0, &vp), 1.0);
        assert_eq!(overlap_proxy(tmax, &vp), 0.0);
        assert!((overlap_proxy(tmax / 2.0, &vp) - 0.5).abs() < 1e-12);
        assert_eq!(overlap_proxy(PI, &vp), 0.0);
    }

    #[test]
    fn viewport_spec_validation() {
        assert!(ViewportSpec::new(0.0, 1.0).is_err());
        assert!(ViewportSpec::new(1.0, PI + 1e-6).is_err());
        assert!(ViewportSpec::new(PI, PI).is_ok());
        assert!((ViewportSpec::default().yaw_extent - 1.745329).abs() < 1e-6);
    }

    #[test]
    fn trace_vpo_examples() {
        let vp = ViewportSpec::default();
        let tmax = vp.max_overlap_distance();
        let a = constant(0.0, 0.0, 20);
        assert_eq!(trace_vpo(&a, &a, &vp).unwrap(), 1.0);
        let far = constant(tmax, 0.0, 20);
        assert!(trace_vpo(&a, &far, &vp).unwrap().abs() < 1e-12);
        let half = constant(tmax / 2.0, 0.0, 20);
        assert!((trace_vpo(&a, &half, &vp).unwrap() - 0.5).abs() < 1e-12);
        let short = constant(0.0, 0.0, 19);
        assert_eq!(
            trace_vpo(&a, &short, &vp),
            Err(GeometryError::LengthMismatch { left: 20, right: 19 })
        );
    }

    #[test]
    fn angular_speed_examples() {
        let still = constant(0.4, 0.1, 20);
        assert!(angular_speed(&still, 10.0).unwrap().iter().all(|&s| s == 0.0));

        let drift: Vec<(f64, f64)> = (0..20).map(|n| (0.05 * n as f64, 0.0)).collect();
        for s in angular_speed(&samples(&drift, 10.0), 10.0).unwrap() {
            assert!((s - 0.5).abs() < 1e-9);
        }
        assert!(matches!(
            angular_speed(&constant(0.0, 0.0, 1), 10.0),
            Err(GeometryError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn seam_crossing_speed_has_no_spike() {
        // Unwrapped oracle: yaw advances 0.05 rad per step through +pi.
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|n| (wrap_angle(3.0 + 0.05 * n as f64), 0.0))
            .collect();
        let s = samples(&pts, 10.0);
        for v in angular_speed(&s, 10.0).unwrap() {
            assert!((v - 0.5).abs() < 1e-9, "{v}");
        }
        let (yaw_rates, pitch_rates) = axis_rates(&s, 10.0).unwrap();
        for (y, p) in yaw_rates.iter().zip(&pitch_rates) {
            assert!((y - 0.5).abs() < 1e-9);
            assert_eq!(*p, 0.0);
        }
    }

    #[test]
    fn static_coverage_matches_band_integral() {
        let vp = ViewportSpec::default();
        let analytic = vp.yaw_extent * 2.0 * 50f64.to_radians().sin() / (4.0 * PI) * 100.0;
        let cov = sphere_coverage(&constant(0.0, 0.0, 20), &vp, CoverageGrid::default()).unwrap();
        assert!((cov - analytic).abs() < 0.5, "{cov} vs {analytic}");
        assert!((analytic - 21.28).abs() < 0.01);
    }

    #[test]
    fn tiny_viewport_coverage() {
        let vp = ViewportSpec::from_degrees(1.0, 1.0).unwrap();
        let fine = CoverageGrid::with_cell_deg(0.1);
        let cov = sphere_coverage(&constant(0.2, 0.3, 20), &vp, fine).unwrap();
        // closed form: 1 deg x 2 sin(0.5 deg) cos(0.3) / 4pi
        let analytic =
            1f64.to_radians() * 2.0 * 0.5f64.to_radians().sin() * 0.3f64.cos() / (4.0 * PI) * 100.0;
        assert!(cov < 0.01);
        assert!((cov - analytic).abs() < 0.002, "{cov} vs {analytic}");
    }

    #[test]
    fn coverage_is_order_invariant() {
        let vp = ViewportSpec::default();
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|n| (0.1 * n as f64 - 1.0, 0.03 * n as f64))
            .collect();
        let fwd = samples(&pts, 10.0);
        let mut rev = fwd.clone();
        rev.reverse();
        rev.swap(3, 11);
        let grid = CoverageGrid::default();
        assert_eq!(
            sphere_coverage(&fwd, &vp, grid).unwrap(),
            sphere_coverage(&rev, &vp, grid).unwrap()
        );
    }

    #[test]
    fn full_yaw_extent_covers_whole_rows() {
        let vp = ViewportSpec::new(PI, PI).unwrap();
        let s = samples(&[(0.0, 0.0), (-PI, 0.0)], 10.0);
        let cov = sphere_coverage(&s, &vp, CoverageGrid::default()).unwrap();
        assert!((cov - 100.0).abs() < 1e-9, "{cov}");
    }

    #[test]
    fn coverage_grid_convergence() {
        let vp = ViewportSpec::default();
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|n| (0.12 * n as f64, 0.4 * (n as f64 * 0.3).sin()))
            .collect();
        let s = samples(&pts, 10.0);
        let coarse = sphere_coverage(&s, &vp, CoverageGrid::with_cell_deg(1.0)).unwrap();
        let fine = sphere_coverage(&s, &vp, CoverageGrid::with_cell_deg(0.5)).unwrap();
        assert!((coarse - fine).abs() < 0.5);
    }

    fn arb_point() -> impl Strategy<Value = SphericalPoint> {
        (-PI..PI, -FRAC_PI_2..=FRAC_PI_2).prop_map(|(y, p)| SphericalPoint::new(y, p))
    }

    proptest! {
        #[test]
        fn geodesic_symmetric_and_bounded(a in arb_point(), b in arb_point()) {
            let d = geodesic(a, b);
            prop_assert_eq!(d, geodesic(b, a));
            prop_assert!((0.0..=PI).contains(&d));
        }

        #[test]
        fn geodesic_triangle(a in arb_point(), b in arb_point(), c in arb_point()) {
            prop_assert!(geodesic(a, c) <= geodesic(a, b) + geodesic(b, c) + 1e-9);
        }

        #[test]
        fn unit_vector_roundtrip(p in arb_point()) {
            let back = SphericalPoint::from_unit_vector(p.to_unit_vector());
            prop_assert!(geodesic(p, back) < 1e-9);
        }

        #[test]
        fn coverage_monotone_under_union(
            base in proptest::collection::vec((-PI..PI, -1.4f64..1.4), 1..8),
            extra in proptest::collection::vec((-PI..PI, -1.4f64..1.4), 1..8),
        ) {
            let vp = ViewportSpec::default();
            let grid = CoverageGrid::with_cell_deg(2.0);
            let a = samples(&base, 10.0);
            let mut joined = base.clone();
            joined.extend(extra);
            let b = samples(&joined, 10.0);
            let ca = sphere_coverage(&a, &vp, grid).unwrap();
            let cb = sphere_coverage(&b, &vp, grid).unwrap();
            prop_assert!(cb >= ca - 1e-12);
            prop_assert!((0.0..=100.0).contains(&cb));
        }

        #[test]
        fn overlap_proxy_monotone(d1 in 0.0..PI, d2 in 0.0..PI) {
            let vp = ViewportSpec::default();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(overlap_proxy(lo, &vp) >= overlap_proxy(hi, &vp));
        }
    }
}
