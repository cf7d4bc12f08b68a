use crate::geometry::{MaterialAnchor, ParticleState, SurfaceMesh};
use crate::Vec3;

use super::{DissectionSegment, ExposureError, Result, RingSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingHit {
    pub point: Vec3,
    pub anchor: MaterialAnchor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingIntersection {
    pub center: Vec3,
    pub direction: Vec3,
    /// Side reference `s = n_local × d_t`; left points have `(p - c)·s > 0`.
    pub side_reference: Vec3,
    pub left: RingHit,
    pub right: RingHit,
}

struct Candidate {
    point: Vec3,
    face: usize,
    bary: [f64; 3],
    side: f64,
}

/// Both roots of `|p + t (q - p) - c|^2 = r^2`, ascending, unclipped.
fn sphere_roots(p: &Vec3, q: &Vec3, c: &Vec3, r: f64) -> Option<(f64, f64)> {
    let e = q - p;
    let f = p - c;
    let a = e.norm_squared();
    if a == 0.0 {
        return None;
    }
    let b = f.dot(&e);
    let c0 = f.norm_squared() - r * r;
    let disc = b * b - a * c0;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable pair.
    let qv = -(b + if b >= 0.0 { sq } else { -sq });
    if qv == 0.0 {
        return Some((0.0, 0.0));
    }
    let (t1, t2) = (qv / a, c0 / qv);
    Some((t1.min(t2), t1.max(t2)))
}

struct Cut {
    face: usize,
    p: Vec3,
    q: Vec3,
    bp: [f64; 3],
    bq: [f64; 3],
}

/// Intersects the ring `(r, D(k), d_t)` with the surface: the plane through
/// `D(k)` normal to `d_t` cuts each face in at most one segment, and the
/// points on those segments at distance `r` from `D(k)` are the candidates.
/// One candidate per side is kept: the one best aligned with `±s`, ties to
/// the lowest face index.
pub fn ring_surface_intersection(
    surface: &SurfaceMesh,
    state: &ParticleState,
    ring: &RingSpec,
    segment: &DissectionSegment,
) -> Result<RingIntersection> {
    let x = &state.positions;
    let dir = segment.direction(surface, state)?;
    let c = segment.point(surface, state, ring.k);

    let mut cuts = Vec::new();
    for f in 0..surface.face_count() {
        let tri = surface.faces[f];
        let h = tri.map(|v| (x[v] - c).dot(&dir));
        // Vertices exactly on the plane count as the positive side.
        let pos = h.map(|v| v >= 0.0);
        let mut ends: Vec<(Vec3, [f64; 3])> = Vec::with_capacity(2);
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            if pos[i] == pos[j] {
                continue;
            }
            let t = h[i] / (h[i] - h[j]);
            let mut bary = [0.0; 3];
            bary[i] = 1.0 - t;
            bary[j] = t;
            let p = if h[i] == 0.0 {
                x[tri[i]]
            } else if h[j] == 0.0 {
                x[tri[j]]
            } else {
                x[tri[i]] + t * (x[tri[j]] - x[tri[i]])
            };
            ends.push((p, bary));
        }
        if let [(p, bp), (q, bq)] = ends[..] {
            cuts.push(Cut { face: f, p, q, bp, bq });
        }
    }

    // Local normal: unit face normals weighted by the length of the
    // cross-section profile inside the ring.
    let mut normal = Vec3::zeros();
    for cut in &cuts {
        if let Some((t1, t2)) = sphere_roots(&cut.p, &cut.q, &c, ring.radius) {
            let (lo, hi) = (t1.max(0.0), t2.min(1.0));
            if hi > lo {
                let n = surface.area_normal(cut.face, x);
                normal += (hi - lo) * (cut.q - cut.p).norm() * n.normalize();
            }
        }
    }
    let s = normal.cross(&dir);
    let s = if s.norm() > 0.0 { s.normalize() } else { s };

    let mut candidates = Vec::new();
    for cut in &cuts {
        let Some((t1, t2)) = sphere_roots(&cut.p, &cut.q, &c, ring.radius) else {
            continue;
        };
        let mut ts = vec![t1];
        if t2 != t1 {
            ts.push(t2);
        }
        for t in ts.into_iter().filter(|t| (0.0..=1.0).contains(t)) {
            let point = if t == 0.0 {
                cut.p
            } else if t == 1.0 {
                cut.q
            } else {
                cut.p + t * (cut.q - cut.p)
            };
            let bary = [0, 1, 2].map(|i| cut.bp[i] + t * (cut.bq[i] - cut.bp[i]));
            candidates.push(Candidate {
                point,
                face: cut.face,
                bary,
                side: (point - c).dot(&s),
            });
        }
    }

    let pick = |sign: f64, name: &'static str| -> Result<RingHit> {
        let mut best: Option<&Candidate> = None;
        for cand in candidates.iter().filter(|cd| sign * cd.side > 0.0) {
            let better = match best {
                None => true,
                Some(b) => {
                    let (sa, sb) = (sign * cand.side, sign * b.side);
                    sa > sb || (sa == sb && cand.face < b.face)
                }
            };
            if better {
                best = Some(cand);
            }
        }
        let b = best.ok_or(ExposureError::RingOffSurface {
            radius: ring.radius,
            k: ring.k,
            side: name,
        })?;
        Ok(RingHit {
            point: b.point,
            anchor: MaterialAnchor::new(b.face, b.bary),
        })
    };
    Ok(RingIntersection {
        center: c,
        direction: dir,
        side_reference: s,
        left: pick(1.0, "left")?,
        right: pick(-1.0, "right")?,
    })
}
