//! Watertight ray/triangle intersection and a BVH over surface triangles.
//!
//! Edge rule: the intersection test is the shear-and-scale watertight
//! formulation, so a ray crossing a shared edge or vertex reports a hit on
//! every triangle incident to it and never slips through. When several
//! triangles report the same nearest `t` exactly, the lowest triangle index
//! wins.

use crate::Vec3;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleHit {
    pub t: f64,
    /// Weights of the triangle's three corners at the hit point.
    pub barycentric: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub face: usize,
    pub hit: TriangleHit,
}

/// Nearest intersection with `t > 0` of a ray with a double-sided triangle.
pub fn ray_triangle_intersect(ray: &Ray, tri: &[Vec3; 3]) -> Option<TriangleHit> {
    let d = ray.direction;
    let kz = if d.x.abs() >= d.y.abs() && d.x.abs() >= d.z.abs() {
        0
    } else if d.y.abs() >= d.z.abs() {
        1
    } else {
        2
    };
    if d[kz] == 0.0 {
        return None;
    }
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if d[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = d[kx] / d[kz];
    let sy = d[ky] / d[kz];
    let sz = 1.0 / d[kz];

    let a = tri[0] - ray.origin;
    let b = tri[1] - ray.origin;
    let c = tri[2] - ray.origin;
    let ax = a[kx] - sx * a[kz];
    let ay = a[ky] - sy * a[kz];
    let bx = b[kx] - sx * b[kz];
    let by = b[ky] - sy * b[kz];
    let cx = c[kx] - sx * c[kz];
    let cy = c[ky] - sy * c[kz];

    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let az = sz * a[kz];
    let bz = sz * b[kz];
    let cz = sz * c[kz];
    let t_scaled = u * az + v * bz + w * cz;
    if (det > 0.0 && t_scaled <= 0.0) || (det < 0.0 && t_scaled >= 0.0) {
        return None;
    }
    let inv = 1.0 / det;
    Some(TriangleHit {
        t: t_scaled * inv,
        barycentric: [u * inv, v * inv, w * inv],
    })
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    /// Slab test; returns the entry distance if the box is hit before `t_max`.
    fn entry(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for k in 0..3 {
            let mut ta = (self.min[k] - origin[k]) * inv_dir[k];
            let mut tb = (self.max[k] - origin[k]) * inv_dir[k];
            if ta.is_nan() || tb.is_nan() {
                // Ray parallel to and inside the slab plane.
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            // Inflate slightly so hits exactly on a box face are not culled.
            t1 = t1.min(tb * (1.0 + 4.0 * f64::EPSILON) + 1e-300);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

/// Bounding volume hierarchy over a triangle soup, rebuilt per state.
#[derive(Clone, Debug)]
pub struct Bvh {
    triangles: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(triangles: Vec<[Vec3; 3]>) -> Self {
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (t[0] + t[1] + t[2]) / 3.0)
            .collect();
        let mut nodes = Vec::new();
        if !triangles.is_empty() {
            Self::build_node(&triangles, &centroids, &mut order, 0, triangles.len(), &mut nodes);
        }
        Self {
            triangles,
            order,
            nodes,
        }
    }

    pub fn from_faces(faces: &[[usize; 3]], positions: &[Vec3]) -> Self {
        Self::build(
            faces
                .iter()
                .map(|f| [positions[f[0]], positions[f[1]], positions[f[2]]])
                .collect(),
        )
    }

    fn build_node(
        tris: &[[Vec3; 3]],
        centroids: &[Vec3],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &i in &order[start..end] {
            for p in &tris[i] {
                bounds.grow(p);
            }
            cbounds.grow(&centroids[i]);
        }
        let id = nodes.len();
        if end - start <= LEAF_SIZE {
            nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        let extent = cbounds.max - cbounds.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        order[start..end].sort_by(|&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        let mid = (start + end) / 2;
        nodes.push(Node::Leaf { bounds, start, end });
        let left = Self::build_node(tris, centroids, order, start, mid, nodes);
        let right = Self::build_node(tris, centroids, order, mid, end, nodes);
        nodes[id] = Node::Inner {
            bounds,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Nearest hit, ties on `t` broken by lowest triangle index.
    pub fn first_hit(&self, ray: &Ray) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(
            1.0 / ray.direction.x,
            1.0 / ray.direction.y,
            1.0 / ray.direction.z,
        );
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let t_max = best.map(|b| b.hit.t).unwrap_or(f64::INFINITY);
            match &self.nodes[n] {
                Node::Leaf { bounds, start, end } => {
                    if bounds.entry(&ray.origin, &inv, t_max).is_none() {
                        continue;
                    }
                    for &i in &self.order[*start..*end] {
                        if let Some(h) = ray_triangle_intersect(ray, &self.triangles[i]) {
                            let better = match best {
                                None => true,
                                Some(b) => h.t < b.hit.t || (h.t == b.hit.t && i < b.face),
                            };
                            if better {
                                best = Some(RayHit { face: i, hit: h });
                            }
                        }
                    }
                }
                Node::Inner {
                    bounds,
                    left,
                    right,
                } => {
                    if bounds.entry(&ray.origin, &inv, t_max).is_some() {
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
            }
        }
        best
    }
}
