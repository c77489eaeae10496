use crate::error::{Error, Result};
use crate::grid::Contour;

/// Point set sorted along the row axis for nearest-neighbour queries.
struct SortedPoints {
    pts: Vec<[f64; 2]>,
}

impl SortedPoints {
    fn new(mut pts: Vec<[f64; 2]>) -> Self {
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        Self { pts }
    }

    /// Exact Euclidean distance from `q` to the closest stored point.
    fn nearest(&self, q: [f64; 2]) -> f64 {
        let start = self.pts.partition_point(|p| p[0] < q[0]);
        let mut best = f64::INFINITY;
        for p in &self.pts[start..] {
            let dx = p[0] - q[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dx * dx + (p[1] - q[1]).powi(2));
        }
        for p in self.pts[..start].iter().rev() {
            let dx = q[0] - p[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dx * dx + (p[1] - q[1]).powi(2));
        }
        best.sqrt()
    }
}

/// Nearest distances in mm from every point of `a` to `b`.
fn directed(a: &Contour, b: &Contour) -> Vec<f64> {
    let target = SortedPoints::new(b.points_mm());
    a.points_mm().into_iter().map(|q| target.nearest(q)).collect()
}

fn check(a: &Contour, b: &Contour) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyContour);
    }
    if a.spacing() != b.spacing() {
        return Err(Error::GridMismatch(format!(
            "contour spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Symmetric mean surface distance in mm.
pub fn mean_absolute_distance(a: &Contour, b: &Contour) -> Result<f64> {
    check(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(directed(a, b)) + mean(directed(b, a))))
}

/// Symmetric Hausdorff distance in mm.
pub fn hausdorff(a: &Contour, b: &Contour) -> Result<f64> {
    check(a, b)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(max(directed(a, b)).max(max(directed(b, a))))
}
