//! Exact nearest-neighbor queries on 2-D points via a k-d tree.

use rayon::prelude::*;

const LEAF: usize = 8;

/// Static k-d tree over borrowed points. Results are ordered by squared
/// distance, then index, so ties resolve the same way as a brute-force scan.
pub(crate) struct PointTree<'a> {
    pts: &'a [[f64; 2]],
    /// Point indices, arranged so each subtree is a contiguous range whose
    /// middle element is the splitting point.
    order: Vec<usize>,
    /// Split axis of the node whose splitting point sits at each position.
    axis: Vec<u8>,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl<'a> PointTree<'a> {
    pub(crate) fn new(pts: &'a [[f64; 2]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut tree = PointTree {
            pts,
            order: (0..pts.len()).collect(),
            axis: vec![0; pts.len()],
            lo,
            hi,
        };
        tree.build(0, pts.len());
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF {
            return;
        }
        let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for &i in &self.order[lo..hi] {
            for a in 0..2 {
                min[a] = min[a].min(self.pts[i][a]);
                max[a] = max[a].max(self.pts[i][a]);
            }
        }
        let ax = usize::from(max[1] - min[1] > max[0] - min[0]);
        let mid = (lo + hi) / 2;
        let pts = self.pts;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| pts[a][ax].total_cmp(&pts[b][ax]).then(a.cmp(&b)));
        self.axis[mid] = ax as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// The `k` nearest other points to `pts[i]` as `(index, squared distance)`.
    pub(crate) fn nearest(&self, i: usize, k: usize) -> Vec<(usize, f64)> {
        self.query(self.pts[i], k, Some(i))
    }

    /// The `k` nearest indexed points to an arbitrary location.
    pub(crate) fn query(&self, q: [f64; 2], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut best = Vec::with_capacity(k + 1);
        if k > 0 && !self.pts.is_empty() {
            let off = [0, 1].map(|a| (self.lo[a] - q[a]).max(q[a] - self.hi[a]).max(0.0));
            let rd = off[0] * off[0] + off[1] * off[1];
            self.search(0, self.pts.len(), q, k, exclude, &mut best, off, rd);
        }
        best
    }

    fn offer(&self, j: usize, q: [f64; 2], k: usize, exclude: Option<usize>, best: &mut Vec<(usize, f64)>) {
        if Some(j) == exclude {
            return;
        }
        let p = self.pts[j];
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        let before = |c: &(usize, f64)| c.1.total_cmp(&d).then(c.0.cmp(&j)).is_lt();
        if best.len() == k {
            if before(&best[k - 1]) {
                return;
            }
            best.pop();
        }
        let at = best.partition_point(before);
        best.insert(at, (j, d));
    }

    /// `off` holds per-axis distances from `q` to the box of the current
    /// subtree and `rd` their squared norm, a lower bound for every point in it.
    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        lo: usize,
        hi: usize,
        q: [f64; 2],
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(usize, f64)>,
        off: [f64; 2],
        rd: f64,
    ) {
        if hi - lo <= LEAF {
            for &j in &self.order[lo..hi] {
                self.offer(j, q, k, exclude, best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let split = self.order[mid];
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - self.pts[split][ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, k, exclude, best, off, rd);
        self.offer(split, q, k, exclude, best);
        let mut far_off = off;
        far_off[ax] = diff.abs();
        let far_rd = rd - off[ax] * off[ax] + diff * diff;
        // Equal distances must still be visited so the index tie-break holds.
        if best.len() < k || far_rd <= best[k - 1].1 {
            self.search(far.0, far.1, q, k, exclude, best, far_off, far_rd);
        }
    }
}

/// `k` nearest other points of every point; `k` must be below `pts.len()`.
pub(crate) fn k_nearest(pts: &[[f64; 2]], k: usize) -> Vec<Vec<(usize, f64)>> {
    let tree = PointTree::new(pts);
    (0..pts.len()).into_par_iter().map(|i| tree.nearest(i, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(pts: &[[f64; 2]], i: usize, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..pts.len())
            .filter(|&j| j != i)
            .map(|j| (j, (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_on_clustered_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts: Vec<[f64; 2]> = (0..400).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        pts.extend((0..30).map(|_| [50.0 + rng.random::<f64>(), -20.0 + rng.random::<f64>()]));
        pts.push([1000.0, 1000.0]);
        let got = k_nearest(&pts, 7);
        for (i, row) in got.iter().enumerate() {
            assert_eq!(row, &brute(&pts, i, 7), "row {i}");
        }
    }

    #[test]
    fn identical_and_collinear_points() {
        let same = vec![[3.0, 3.0]; 12];
        for row in k_nearest(&same, 11) {
            assert_eq!(row.len(), 11);
        }
        let line: Vec<[f64; 2]> = (0..50).map(|i| [i as f64, 0.0]).collect();
        let got = k_nearest(&line, 3);
        for (i, row) in got.iter().enumerate() {
            assert_eq!(row, &brute(&line, i, 3));
        }
    }

    #[test]
    fn query_outside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 2]> = (0..200)
            .map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>()])
            .collect();
        let tree = PointTree::new(&pts);
        for q in [[-30.0, 0.5], [5.0, 40.0], [100.0, -100.0], [4.2, 0.3]] {
            let mut all: Vec<(usize, f64)> = (0..pts.len())
                .map(|j| (j, (pts[j][0] - q[0]).powi(2) + (pts[j][1] - q[1]).powi(2)))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(5);
            assert_eq!(tree.query(q, 5, None), all, "{q:?}");
        }
    }
}
