const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    point: u32,
    axis: u32,
    left: u32,
    right: u32,
}

/// Static kd-tree for nearest-neighbour queries over a row-major point set.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    nodes: Vec<Node>,
    root: u32,
}

impl KdTree {
    pub fn build(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut idx: Vec<u32> = (0..n as u32).collect();
        let mut tree = KdTree {
            dim,
            points: points.to_vec(),
            nodes: Vec::with_capacity(n),
            root: NONE,
        };
        tree.root = tree.build_rec(&mut idx);
        tree
    }

    fn coord(&self, p: u32, axis: usize) -> f64 {
        self.points[p as usize * self.dim + axis]
    }

    fn build_rec(&mut self, idx: &mut [u32]) -> u32 {
        if idx.is_empty() {
            return NONE;
        }
        let mut axis = 0;
        let mut best = -1.0;
        for a in 0..self.dim {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                let v = self.coord(p, a);
                (lo.min(v), hi.max(v))
            });
            if hi - lo > best {
                best = hi - lo;
                axis = a;
            }
        }
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            self.coord(a, axis).total_cmp(&self.coord(b, axis)).then(a.cmp(&b))
        });
        let point = idx[mid];
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build_rec(l);
        let right = self.build_rec(&mut r[1..]);
        self.nodes.push(Node {
            point,
            axis: axis as u32,
            left,
            right,
        });
        (self.nodes.len() - 1) as u32
    }

    /// Index of the nearest point to `q` and its squared distance. Ties go
    /// to the lower index.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        best
    }

    fn search(&self, node: u32, q: &[f64], best: &mut (usize, f64)) {
        if node == NONE {
            return;
        }
        let nd = self.nodes[node as usize];
        let p = nd.point as usize;
        let d2: f64 = self.points[p * self.dim..(p + 1) * self.dim]
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d2 < best.1 || (d2 == best.1 && p < best.0) {
            *best = (p, d2);
        }
        let diff = q[nd.axis as usize] - self.coord(nd.point, nd.axis as usize);
        let (near, far) = if diff < 0.0 { (nd.left, nd.right) } else { (nd.right, nd.left) };
        self.search(near, q, best);
        if diff * diff <= best.1 {
            self.search(far, q, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in proptest::collection::vec(-10.0f64..10.0, 3..300),
            q in proptest::collection::vec(-12.0f64..12.0, 3),
        ) {
            let dim = 3;
            let n = pts.len() / dim;
            let pts = &pts[..n * dim];
            let tree = KdTree::build(pts, dim);
            let (i, d) = tree.nearest(&q);
            let brute = (0..n)
                .map(|j| (j, pts[j * dim..(j + 1) * dim].iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold((usize::MAX, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
            prop_assert_eq!(d, brute.1);
            prop_assert_eq!(i, brute.0);
        }
    }
}
