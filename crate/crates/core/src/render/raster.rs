use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::Camera;
use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::mesh::Mesh;

const NO_FACE: u32 = u32::MAX;
const ALBEDO: f64 = 0.5;
const AMBIENT: f64 = 0.2;

/// The face seen at a pixel center and its perspective-correct barycentric
/// coordinates there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelHit {
    pub face: usize,
    pub bary: [f64; 3],
}

/// Relative depth slack within which a vertex counts as lying on the
/// visible surface at its pixel.
pub const VISIBILITY_SLACK: f64 = 0.01;

/// View depth of the surface at a hit's pixel center.
fn surface_depth(hit: &PixelHit, face: &[usize; 3], proj: &[Option<Projected>]) -> f64 {
    (0..3).map(|j| hit.bary[j] * proj[face[j]].unwrap().z).sum()
}

/// Pixel ↔ vertex correspondence for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<PixelHit>>,
    /// Pixel `[x, y]` of each visible vertex, `None` otherwise. A vertex is
    /// visible when its pixel is covered and the vertex belongs to the face
    /// seen there or lies within [`VISIBILITY_SLACK`] of its depth.
    pub vertex_pixels: Vec<Option<[usize; 2]>>,
}

impl PixelMap {
    pub fn hit(&self, x: usize, y: usize) -> Option<&PixelHit> {
        self.pixels[y * self.width + x].as_ref()
    }

    pub fn vertex_pixel(&self, v: usize) -> Option<[usize; 2]> {
        self.vertex_pixels[v]
    }

    pub fn covered_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    pub fn visible_vertices(&self) -> impl Iterator<Item = (usize, [usize; 2])> + '_ {
        self.vertex_pixels
            .iter()
            .enumerate()
            .filter_map(|(v, p)| p.map(|p| (v, p)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Projected {
    x: f64,
    y: f64,
    z: f64,
    /// Camera-space coordinates (right, up, forward).
    cam: Vector3<f64>,
}

/// Color transfer across one silhouette-crossing pixel pair.
#[derive(Debug, Clone, Copy)]
struct AaEvent {
    front: u32,
    other: u32,
    /// Edge endpoints (vertex ids) oriented so `sign·edge(u, v, ·) ≥ 0` inside.
    u: usize,
    v: usize,
    sign: f64,
    p: [f64; 2],
    q: [f64; 2],
    s: f64,
    /// Hi-res pixel receiving the blended color.
    target: usize,
}

/// A rasterized view with everything its backward pass needs.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// Image at the camera resolution, after box-downsampling the supersamples.
    pub image: Image,
    pub pixel_map: PixelMap,
    camera: Camera,
    supersample: usize,
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    light: Vector3<f64>,
    focal: f64,
    proj: Vec<Option<Projected>>,
    ids: Vec<u32>,
    colors: Vec<f64>,
    clamped: Vec<bool>,
    events: Vec<AaEvent>,
}

#[inline]
fn edge(u: [f64; 2], v: [f64; 2], x: [f64; 2]) -> f64 {
    (v[0] - u[0]) * (x[1] - u[1]) - (v[1] - u[1]) * (x[0] - u[0])
}

fn shade(n_dot_l: f64) -> f64 {
    (ALBEDO * n_dot_l.abs() + AMBIENT).clamp(0.0, 1.0)
}

impl Rendered {
    pub fn new(
        mesh: &Mesh,
        vertices: &[Point3<f64>],
        camera: &Camera,
        supersample: usize,
        silhouette_aa: bool,
    ) -> Result<Self> {
        check_len("render vertices", mesh.vertex_count(), vertices.len())?;
        camera.validate()?;
        if supersample == 0 {
            return Err(Error::InvalidArgument("supersample factor must be at least 1".into()));
        }
        let (w, h) = (camera.width * supersample, camera.height * supersample);
        let hi = camera.with_resolution(w, h);
        let frame = hi.frame();
        let focal = hi.focal();
        let light = -frame.forward;

        let proj: Vec<Option<Projected>> = vertices
            .iter()
            .map(|p| {
                let d = p - hi.position;
                let cam = Vector3::new(d.dot(&frame.right), d.dot(&frame.up), d.dot(&frame.forward));
                (cam.z > super::NEAR).then(|| Projected {
                    x: 0.5 * w as f64 + focal * cam.x / cam.z,
                    y: 0.5 * h as f64 - focal * cam.y / cam.z,
                    z: cam.z,
                    cam,
                })
            })
            .collect();

        let faces = mesh.faces().to_vec();
        let mut colors = Vec::with_capacity(faces.len());
        let mut front_facing = Vec::with_capacity(faces.len());
        for &[a, b, c] in &faces {
            let m = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
            let norm = m.norm();
            let nl = if norm > 0.0 { m.dot(&light) / norm } else { 0.0 };
            colors.push(shade(nl));
            front_facing.push(m.dot(&(hi.position - vertices[a])) > 0.0);
        }

        let mut ids = vec![NO_FACE; w * h];
        let mut depth = vec![f64::INFINITY; w * h];
        for (f, &[a, b, c]) in faces.iter().enumerate() {
            let (Some(pa), Some(pb), Some(pc)) = (proj[a], proj[b], proj[c]) else {
                continue;
            };
            let (va, vb, vc) = ([pa.x, pa.y], [pb.x, pb.y], [pc.x, pc.y]);
            let area = edge(va, vb, vc);
            if !(area.abs() > 0.0) {
                continue;
            }
            let sign = area.signum();
            let lo_x = pa.x.min(pb.x).min(pc.x);
            let hi_x = pa.x.max(pb.x).max(pc.x);
            let lo_y = pa.y.min(pb.y).min(pc.y);
            let hi_y = pa.y.max(pb.y).max(pc.y);
            let x0 = (lo_x - 0.5).ceil().max(0.0);
            let y0 = (lo_y - 0.5).ceil().max(0.0);
            let x1 = (hi_x - 0.5).floor().min(w as f64 - 1.0);
            let y1 = (hi_y - 0.5).floor().min(h as f64 - 1.0);
            if x1 < x0 || y1 < y0 {
                continue;
            }
            for y in y0 as usize..=y1 as usize {
                for x in x0 as usize..=x1 as usize {
                    let pt = [x as f64 + 0.5, y as f64 + 0.5];
                    let w0 = edge(vb, vc, pt) * sign;
                    let w1 = edge(vc, va, pt) * sign;
                    let w2 = edge(va, vb, pt) * sign;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let abs_area = area.abs();
                    let iz = (w0 / pa.z + w1 / pb.z + w2 / pc.z) / abs_area;
                    let z = 1.0 / iz;
                    let i = y * w + x;
                    if z < depth[i] {
                        depth[i] = z;
                        ids[i] = f as u32;
                    }
                }
            }
        }

        let mut hires: Vec<f64> = ids
            .iter()
            .map(|&id| if id == NO_FACE { 0.0 } else { colors[id as usize] })
            .collect();

        let mut events = Vec::new();
        if silhouette_aa {
            let ctx = AaContext {
                mesh,
                faces: &faces,
                proj: &proj,
                ids: &ids,
                depth: &depth,
                front_facing: &front_facing,
                width: w,
            };
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if x + 1 < w {
                        ctx.pair(p, p + 1, &mut events);
                    }
                    if y + 1 < h {
                        ctx.pair(p, p + w, &mut events);
                    }
                }
            }
            for ev in &events {
                let other = if ev.other == NO_FACE { 0.0 } else { colors[ev.other as usize] };
                let front = colors[ev.front as usize];
                // Moves the outer pixel toward the front color when the edge
                // lies past the midpoint, else the inner pixel toward the other.
                hires[ev.target] += (ev.s - 0.5) * (front - other);
            }
        }
        let clamped: Vec<bool> = hires.iter().map(|&v| !(0.0..=1.0).contains(&v)).collect();
        for v in &mut hires {
            *v = v.clamp(0.0, 1.0);
        }

        let (cw, ch) = (camera.width, camera.height);
        let ss = supersample;
        let inv = 1.0 / (ss * ss) as f64;
        let mut image = Image::new(cw, ch);
        for y in 0..ch {
            for x in 0..cw {
                let mut sum = 0.0;
                for dy in 0..ss {
                    for dx in 0..ss {
                        sum += hires[(y * ss + dy) * w + x * ss + dx];
                    }
                }
                image.set(x, y, sum * inv);
            }
        }

        let pixel_map = build_pixel_map(&faces, &proj, &ids, w, cw, ch, ss, vertices.len());

        Ok(Rendered {
            image,
            pixel_map,
            camera: *camera,
            supersample,
            vertices: vertices.to_vec(),
            faces,
            light,
            focal,
            proj,
            ids,
            colors,
            clamped,
            events,
        })
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// Gradient of `Σ upstream · image` with respect to every vertex, with
    /// the face seen at each supersample held fixed.
    pub fn backward(&self, upstream: &Image) -> Result<Vec<Vector3<f64>>> {
        if upstream.shape() != self.image.shape() {
            return Err(Error::InvalidArgument(format!(
                "upstream gradient is {:?}, image is {:?}",
                upstream.shape(),
                self.image.shape()
            )));
        }
        let ss = self.supersample;
        let w = self.camera.width * ss;
        let inv = 1.0 / (ss * ss) as f64;
        let g_hi = |i: usize| -> f64 {
            if self.clamped[i] {
                0.0
            } else {
                let (x, y) = (i % w, i / w);
                upstream.get(x / ss, y / ss) * inv
            }
        };

        let mut g_color = vec![0.0; self.faces.len()];
        let mut g_screen = vec![[0.0f64; 2]; self.vertices.len()];
        for (i, &id) in self.ids.iter().enumerate() {
            if id != NO_FACE {
                g_color[id as usize] += g_hi(i);
            }
        }
        for ev in &self.events {
            let g = g_hi(ev.target);
            if g == 0.0 {
                continue;
            }
            let front = self.colors[ev.front as usize];
            let other = if ev.other == NO_FACE { 0.0 } else { self.colors[ev.other as usize] };
            let (d_s, d_front, d_other) = (front - other, ev.s - 0.5, 0.5 - ev.s);
            g_color[ev.front as usize] += g * d_front;
            if ev.other != NO_FACE {
                g_color[ev.other as usize] += g * d_other;
            }
            let gs = g * d_s;
            let (pu, pv) = (self.proj[ev.u].unwrap(), self.proj[ev.v].unwrap());
            let (u, v) = ([pu.x, pu.y], [pv.x, pv.y]);
            let ep = ev.sign * edge(u, v, ev.p);
            let eq = ev.sign * edge(u, v, ev.q);
            let denom = (ep - eq) * (ep - eq);
            // ∂s/∂θ = (eq'·ep − ep'·eq) / (ep − eq)²
            let du = |x: [f64; 2]| [ev.sign * (v[1] - x[1]), ev.sign * (x[0] - v[0])];
            let dv = |x: [f64; 2]| [ev.sign * (x[1] - u[1]), -ev.sign * (x[0] - u[0])];
            let (dup, duq, dvp, dvq) = (du(ev.p), du(ev.q), dv(ev.p), dv(ev.q));
            for k in 0..2 {
                g_screen[ev.u][k] += gs * (duq[k] * ep - dup[k] * eq) / denom;
                g_screen[ev.v][k] += gs * (dvq[k] * ep - dvp[k] * eq) / denom;
            }
        }

        let mut grad = vec![Vector3::zeros(); self.vertices.len()];
        for (f, &[a, b, c]) in self.faces.iter().enumerate() {
            let gc = g_color[f];
            if gc == 0.0 {
                continue;
            }
            let e1 = self.vertices[b] - self.vertices[a];
            let e2 = self.vertices[c] - self.vertices[a];
            let m = e1.cross(&e2);
            let norm = m.norm();
            if !(norm > 0.0) {
                continue;
            }
            let n = m / norm;
            let nl = n.dot(&self.light);
            let raw = ALBEDO * nl.abs() + AMBIENT;
            if nl == 0.0 || !(0.0..=1.0).contains(&raw) {
                continue;
            }
            let g_n = self.light * (gc * ALBEDO * nl.signum());
            let g_m = (g_n - n * n.dot(&g_n)) / norm;
            let gb = e2.cross(&g_m);
            let gcv = g_m.cross(&e1);
            grad[b] += gb;
            grad[c] += gcv;
            grad[a] -= gb + gcv;
        }

        let frame = self.camera.frame();
        for (v, g2) in g_screen.iter().enumerate() {
            if g2[0] == 0.0 && g2[1] == 0.0 {
                continue;
            }
            let Some(p) = self.proj[v] else { continue };
            let z = p.z;
            let dx = (frame.right / z - frame.forward * (p.cam.x / (z * z))) * self.focal;
            let dy = -(frame.up / z - frame.forward * (p.cam.y / (z * z))) * self.focal;
            grad[v] += dx * g2[0] + dy * g2[1];
        }
        Ok(grad)
    }
}

struct AaContext<'a> {
    mesh: &'a Mesh,
    faces: &'a [[usize; 3]],
    proj: &'a [Option<Projected>],
    ids: &'a [u32],
    depth: &'a [f64],
    front_facing: &'a [bool],
    width: usize,
}

impl AaContext<'_> {
    fn center(&self, i: usize) -> [f64; 2] {
        [(i % self.width) as f64 + 0.5, (i / self.width) as f64 + 0.5]
    }

    fn pair(&self, p: usize, q: usize, out: &mut Vec<AaEvent>) {
        let (ip, iq) = (self.ids[p], self.ids[q]);
        if ip == iq {
            return;
        }
        let ev = match (ip == NO_FACE, iq == NO_FACE) {
            (false, true) => self.event(p, q),
            (true, false) => self.event(q, p),
            (false, false) => self.event(p, q).or_else(|| self.event(q, p)),
            (true, true) => None,
        };
        out.extend(ev);
    }

    /// Event for the face at `fp` occluding or bordering pixel `fq`.
    fn event(&self, fp: usize, fq: usize) -> Option<AaEvent> {
        let front = self.ids[fp];
        let other = self.ids[fq];
        let face = self.faces[front as usize];
        let pr = face.map(|v| self.proj[v].unwrap());
        let pts = pr.map(|p| [p.x, p.y]);
        let sign = edge(pts[0], pts[1], pts[2]).signum();
        let (pc, qc) = (self.center(fp), self.center(fq));
        let mut best: Option<(f64, usize)> = None;
        for k in 0..3 {
            let (u, v) = ((k + 1) % 3, (k + 2) % 3);
            let eq = sign * edge(pts[u], pts[v], qc);
            if eq >= 0.0 {
                continue;
            }
            let ep = (sign * edge(pts[u], pts[v], pc)).max(0.0);
            let s = ep / (ep - eq);
            if best.is_none_or(|(bs, _)| s < bs) {
                best = Some((s, k));
            }
        }
        let (s, k) = best?;
        let (u, v) = (face[(k + 1) % 3], face[(k + 2) % 3]);
        if other != NO_FACE {
            let fr = front as usize;
            let silhouette = self.mesh.edge_faces(u, v).iter().all(|&g| g == fr)
                || self
                    .mesh
                    .edge_faces(u, v)
                    .iter()
                    .any(|&g| g != fr && self.front_facing[g] != self.front_facing[fr]);
            if !silhouette {
                return None;
            }
            let area = sign * edge(pts[0], pts[1], pts[2]);
            let mut iz = 0.0;
            for j in 0..3 {
                let wj = sign * edge(pts[(j + 1) % 3], pts[(j + 2) % 3], qc);
                iz += wj / (area * pr[j].z);
            }
            if !(iz > 0.0 && 1.0 / iz < self.depth[fq]) {
                return None;
            }
        }
        Some(AaEvent {
            front,
            other,
            u,
            v,
            sign,
            p: pc,
            q: qc,
            s,
            target: if s >= 0.5 { fq } else { fp },
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn build_pixel_map(
    faces: &[[usize; 3]],
    proj: &[Option<Projected>],
    ids: &[u32],
    hi_width: usize,
    width: usize,
    height: usize,
    ss: usize,
    vertex_count: usize,
) -> PixelMap {
    let mut pixels = Vec::with_capacity(width * height);
    let mut counts: Vec<(u32, usize)> = Vec::with_capacity(ss * ss);
    for y in 0..height {
        for x in 0..width {
            counts.clear();
            let mut background = 0;
            for dy in 0..ss {
                for dx in 0..ss {
                    let id = ids[(y * ss + dy) * hi_width + x * ss + dx];
                    if id == NO_FACE {
                        background += 1;
                    } else if let Some(e) = counts.iter_mut().find(|e| e.0 == id) {
                        e.1 += 1;
                    } else {
                        counts.push((id, 1));
                    }
                }
            }
            let best = counts
                .iter()
                .copied()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let hit = match best {
                Some((id, n)) if n >= background => {
                    let f = id as usize;
                    let pr = faces[f].map(|v| proj[v].unwrap());
                    let pts = pr.map(|p| [p.x, p.y]);
                    let c = [(x as f64 + 0.5) * ss as f64, (y as f64 + 0.5) * ss as f64];
                    let area = edge(pts[0], pts[1], pts[2]);
                    let mut b = [0.0; 3];
                    for j in 0..3 {
                        b[j] = edge(pts[(j + 1) % 3], pts[(j + 2) % 3], c) / area / pr[j].z;
                    }
                    let sum: f64 = b.iter().sum();
                    Some(PixelHit {
                        face: f,
                        bary: b.map(|v| v / sum),
                    })
                }
                _ => None,
            };
            pixels.push(hit);
        }
    }
    let vertex_pixels = (0..vertex_count)
        .map(|v| {
            let p = proj[v]?;
            let (x, y) = (p.x / ss as f64, p.y / ss as f64);
            if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
                return None;
            }
            let (px, py) = (x as usize, y as usize);
            let hit = pixels[py * width + px].as_ref()?;
            if faces[hit.face].contains(&v) {
                return Some([px, py]);
            }
            (p.z <= surface_depth(hit, &faces[hit.face], proj) * (1.0 + VISIBILITY_SLACK)).then_some([px, py])
        })
        .collect();
    PixelMap {
        width,
        height,
        pixels,
        vertex_pixels,
    }
}

/// Renders one view at the camera resolution with `supersample`² samples per
/// pixel.
pub fn rasterize(mesh: &Mesh, vertices: &[Point3<f64>], camera: &Camera, supersample: usize) -> Result<(Image, PixelMap)> {
    let r = Rendered::new(mesh, vertices, camera, supersample, true)?;
    Ok((r.image, r.pixel_map))
}

/// Vertex gradients of `Σ upstream · rasterize(...)`.
pub fn render_gradient(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    camera: &Camera,
    supersample: usize,
    upstream: &Image,
) -> Result<Vec<Vector3<f64>>> {
    Rendered::new(mesh, vertices, camera, supersample, true)?.backward(upstream)
}

/// Binary image: 1 where the front-most face at the pixel center has at
/// least one masked vertex.
pub fn rasterize_vertex_mask(mesh: &Mesh, vertices: &[Point3<f64>], vertex_mask: &[bool], camera: &Camera) -> Result<Image> {
    check_len("vertex mask", mesh.vertex_count(), vertex_mask.len())?;
    let r = Rendered::new(mesh, vertices, camera, 1, false)?;
    let data = r
        .ids
        .iter()
        .map(|&id| {
            let hit = id != NO_FACE && r.faces[id as usize].iter().any(|&v| vertex_mask[v]);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Image::from_vec(camera.width, camera.height, data)
}
