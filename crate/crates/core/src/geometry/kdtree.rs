//! Static 3-d tree for nearest-neighbour queries.

use crate::Vec3;

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree: `order[mid]` is the splitting point of a range.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::build(&points, &mut order, &mut axes, 0, points.len());
        Self { points, order, axes }
    }

    fn build(points: &[Vec3], order: &mut [usize], axes: &mut [u8], start: usize, end: usize) {
        if end - start <= 1 {
            return;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &order[start..end] {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        axes[mid] = axis as u8;
        Self::build(points, order, axes, start, mid);
        Self::build(points, order, axes, mid + 1, end);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and squared distance of the nearest point; ties go to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best = None;
        self.visit(q, 0, self.points.len(), &mut best);
        best
    }

    fn visit(
        &self,
        q: &Vec3,
        start: usize,
        end: usize,
        best: &mut Option<(usize, f64)>,
    ) {
        if start >= end {
            return;
        }
        let mid = (start + end) / 2;
        let i = self.order[mid];
        let d2 = (self.points[i] - q).norm_squared();
        let better = match *best {
            None => true,
            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
        };
        if better {
            *best = Some((i, d2));
        }
        if end - start == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        let (first, second) = if diff <= 0.0 {
            ((start, mid), (mid + 1, end))
        } else {
            ((mid + 1, end), (start, mid))
        };
        self.visit(q, first.0, first.1, best);
        if best.is_none_or(|(_, bd)| diff * diff <= bd) {
            self.visit(q, second.0, second.1, best);
        }
    }

    /// The `k` nearest points sorted by (distance, index).
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.visit_k(q, 0, self.points.len(), k, &mut heap);
        }
        heap
    }

    fn visit_k(&self, q: &Vec3, start: usize, end: usize, k: usize, out: &mut Vec<(usize, f64)>) {
        if start >= end {
            return;
        }
        let mid = (start + end) / 2;
        let i = self.order[mid];
        let d2 = (self.points[i] - q).norm_squared();
        let pos = out
            .iter()
            .position(|&(j, dj)| d2 < dj || (d2 == dj && i < j))
            .unwrap_or(out.len());
        if pos < k {
            out.insert(pos, (i, d2));
            out.truncate(k);
        }
        if end - start == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        let (first, second) = if diff <= 0.0 {
            ((start, mid), (mid + 1, end))
        } else {
            ((mid + 1, end), (start, mid))
        };
        self.visit_k(q, first.0, first.1, k, out);
        let bound = if out.len() < k {
            f64::INFINITY
        } else {
            out[k - 1].1
        };
        if diff * diff <= bound {
            self.visit_k(q, second.0, second.1, k, out);
        }
    }
}
