//! Conforming P1 triangle meshes for unit cells, perforated domains and
//! homogenized domains, plus the little geometry algebra the solvers need.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("deformation inverts triangle {tri} (signed area {area:e})")]
    Deformation { tri: usize, area: f64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Star-shaped obstacle described by radius samples Φ(θ_j) at equispaced
/// angles, dimensionless relative to the unit cell Y = (−1/2,1/2)².
#[derive(Debug, Clone)]
pub struct StarShape {
    phi: Vec<f64>,
    name: String,
}

impl StarShape {
    pub fn new(phi: Vec<f64>, name: &str) -> Result<Self, MeshError> {
        if phi.len() < 8 || phi.len() % 8 != 0 {
            return Err(MeshError::Argument(format!(
                "angular sample count {} not a positive multiple of 8",
                phi.len()
            )));
        }
        if !phi.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(MeshError::Argument("radius samples must be finite and positive".into()));
        }
        Ok(StarShape { phi, name: name.to_string() })
    }

    /// Unit disk: Φ ≡ 1, scaled later by the hole scale a.
    pub fn disk(n_theta: usize) -> Result<Self, MeshError> {
        Self::new(vec![1.0; n_theta], "disk")
    }

    /// Axis-aligned square of given half-width.
    pub fn square(half_width: f64, n_theta: usize) -> Result<Self, MeshError> {
        if !(half_width > 0.0) {
            return Err(MeshError::Argument("square half-width must be positive".into()));
        }
        let phi = (0..n_theta)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / n_theta as f64;
                half_width / t.cos().abs().max(t.sin().abs())
            })
            .collect();
        Self::new(phi, "square")
    }

    /// Polygon star-shaped about the origin, sampled by ray casting.
    pub fn polygon(vertices: &[[f64; 2]], n_theta: usize, name: &str) -> Result<Self, MeshError> {
        if vertices.len() < 3 {
            return Err(MeshError::Argument("polygon needs at least 3 vertices".into()));
        }
        let mut phi = Vec::with_capacity(n_theta);
        for j in 0..n_theta {
            let t = 2.0 * PI * j as f64 / n_theta as f64;
            let (c, s) = (t.cos(), t.sin());
            let mut hit = f64::INFINITY;
            for k in 0..vertices.len() {
                let a = vertices[k];
                let b = vertices[(k + 1) % vertices.len()];
                // Solve r·(c,s) = a + u·(b−a) for r ≥ 0, u ∈ [0,1].
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let det = c * dy - s * dx;
                if det.abs() < 1e-15 {
                    continue;
                }
                let r = (a[0] * dy - a[1] * dx) / det;
                let u = (a[0] * s - a[1] * c) / det;
                if r > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
                    hit = hit.min(r);
                }
            }
            if !hit.is_finite() {
                return Err(MeshError::Geometry(format!(
                    "polygon is not star-shaped about the origin (ray {j} misses every edge)"
                )));
            }
            phi.push(hit);
        }
        Self::new(phi, name)
    }

    pub fn n_theta(&self) -> usize {
        self.phi.len()
    }

    pub fn radii(&self) -> &[f64] {
        &self.phi
    }

    pub fn max_radius(&self) -> f64 {
        self.phi.iter().cloned().fold(0.0, f64::max)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Periodic linear interpolation of Φ onto a different angular grid.
    fn resample(&self, n_theta: usize) -> Vec<f64> {
        if n_theta == self.phi.len() {
            return self.phi.clone();
        }
        let n = self.phi.len();
        (0..n_theta)
            .map(|j| {
                let s = j as f64 * n as f64 / n_theta as f64;
                let i0 = s.floor() as usize % n;
                let f = s - s.floor();
                self.phi[i0] * (1.0 - f) + self.phi[(i0 + 1) % n] * f
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    /// Hole boundary S_ε (or a·∂G₀ inside the cell).
    Particle,
    /// Outer cell boundary ∂Y, periodic interface before tiling.
    Outer,
    /// Exterior Dirichlet boundary ∂Ω.
    DirichletOuter,
}

impl BoundaryTag {
    fn label(self) -> &'static str {
        match self {
            BoundaryTag::Particle => "PARTICLE",
            BoundaryTag::Outer => "OUTER",
            BoundaryTag::DirichletOuter => "DIRICHLET",
        }
    }
}

/// Conforming triangle mesh with tagged boundary edges.  Triangles are CCW;
/// each node carries the lumped measure (one third of incident areas).
#[derive(Debug, Clone)]
pub struct TriMesh {
    nodes: Vec<[f64; 2]>,
    tris: Vec<[usize; 3]>,
    edges: Vec<(usize, usize, BoundaryTag)>,
    areas: Vec<f64>,
    node_measure: Vec<f64>,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl TriMesh {
    pub fn new(
        nodes: Vec<[f64; 2]>,
        tris: Vec<[usize; 3]>,
        edges: Vec<(usize, usize, BoundaryTag)>,
    ) -> Result<Self, MeshError> {
        let nv = nodes.len();
        for (t, tri) in tris.iter().enumerate() {
            if tri.iter().any(|&i| i >= nv) {
                return Err(MeshError::Mesh(format!("triangle {t} references a missing node")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Mesh(format!("triangle {t} repeats a node")));
            }
        }
        let areas: Vec<f64> = tris
            .iter()
            .map(|t| signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]))
            .collect();
        if let Some((t, a)) = areas.iter().enumerate().find(|(_, a)| **a <= 0.0) {
            return Err(MeshError::Mesh(format!("triangle {t} has non-positive area {a:e}")));
        }

        // Topological boundary: undirected triangle edges incident to exactly
        // one triangle.  The tagged edge list must coincide with it.
        let mut adj: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &tris {
            for e in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *adj.entry(key).or_insert(0) += 1;
            }
        }
        if let Some((e, _)) = adj.iter().find(|(_, c)| **c > 2) {
            return Err(MeshError::Mesh(format!("edge {e:?} shared by more than two triangles")));
        }
        let mut tagged: HashMap<(usize, usize), BoundaryTag> = HashMap::new();
        for &(i, j, tag) in &edges {
            if i >= nv || j >= nv {
                return Err(MeshError::Mesh("boundary edge references a missing node".into()));
            }
            let key = (i.min(j), i.max(j));
            if tagged.insert(key, tag).is_some() {
                return Err(MeshError::Mesh(format!("edge {key:?} tagged twice")));
            }
            match adj.get(&key) {
                Some(1) => {}
                Some(_) => {
                    return Err(MeshError::Mesh(format!("tagged edge {key:?} is interior")));
                }
                None => {
                    return Err(MeshError::Mesh(format!(
                        "tagged edge {key:?} is not an edge of any triangle"
                    )));
                }
            }
        }
        for (&key, &c) in &adj {
            if c == 1 && !tagged.contains_key(&key) {
                return Err(MeshError::Mesh(format!("boundary edge {key:?} carries no tag")));
            }
        }

        let mut node_measure = vec![0.0; nv];
        for (t, tri) in tris.iter().enumerate() {
            for &i in tri {
                node_measure[i] += areas[t] / 3.0;
            }
        }
        let total: f64 = areas.iter().sum();
        let lumped: f64 = node_measure.iter().sum();
        if (lumped - total).abs() > 1e-12 * total {
            return Err(MeshError::Mesh(format!(
                "lumped measures sum to {lumped:e}, mesh area is {total:e}"
            )));
        }

        Ok(TriMesh { nodes, tris, edges, areas, node_measure })
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn tris(&self) -> &[[usize; 3]] {
        &self.tris
    }

    pub fn boundary_edges(&self) -> &[(usize, usize, BoundaryTag)] {
        &self.edges
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn node_measures(&self) -> &[f64] {
        &self.node_measure
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn boundary_length(&self, tag: BoundaryTag) -> f64 {
        self.edges
            .iter()
            .filter(|(_, _, t)| *t == tag)
            .map(|&(i, j, _)| {
                let (a, b) = (self.nodes[i], self.nodes[j]);
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
            })
            .sum()
    }

    pub fn has_tag(&self, tag: BoundaryTag) -> bool {
        self.edges.iter().any(|(_, _, t)| *t == tag)
    }

    /// Nodes lying on at least one edge with the given tag.
    pub fn tagged_nodes(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        for &(i, j, t) in &self.edges {
            if t == tag {
                seen[i] = true;
                seen[j] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| seen[i]).collect()
    }

    /// Same mesh with every boundary edge re-tagged through `f`, which sees
    /// the edge endpoints and the current tag.
    pub fn with_retagged_edges(
        &self,
        f: impl Fn([f64; 2], [f64; 2], BoundaryTag) -> BoundaryTag,
    ) -> Result<TriMesh, MeshError> {
        let edges = self
            .edges
            .iter()
            .map(|&(i, j, t)| (i, j, f(self.nodes[i], self.nodes[j], t)))
            .collect();
        TriMesh::new(self.nodes.clone(), self.tris.clone(), edges)
    }
}

/// Nodal field over a mesh.
#[derive(Debug, Clone)]
pub struct GridFunction {
    values: Vec<f64>,
}

impl GridFunction {
    pub fn from_values(values: Vec<f64>) -> Self {
        GridFunction { values }
    }

    pub fn constant(mesh: &TriMesh, c: f64) -> Self {
        GridFunction { values: vec![c; mesh.nodes().len()] }
    }

    pub fn from_fn(mesh: &TriMesh, f: impl Fn(f64, f64) -> f64) -> Self {
        GridFunction { values: mesh.nodes().iter().map(|p| f(p[0], p[1])).collect() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DeformDescriptor {
    Translation([f64; 2]),
    Rotation { center: [f64; 2] },
    RadialStretch { center: [f64; 2] },
}

impl DeformDescriptor {
    fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            DeformDescriptor::Translation(v) => v,
            // Linearised rotation: θ(x) = (−(y−c₂), x−c₁).
            DeformDescriptor::Rotation { center } => [-(p[1] - center[1]), p[0] - center[0]],
            DeformDescriptor::RadialStretch { center } => [p[0] - center[0], p[1] - center[1]],
        }
    }
}

/// Per-node displacement field θ(x) for domain deformations Ω_τ = (I+τθ)Ω.
#[derive(Debug, Clone)]
pub struct DeformationField {
    disp: Vec<[f64; 2]>,
    descriptor: Option<DeformDescriptor>,
}

impl DeformationField {
    pub fn from_values(disp: Vec<[f64; 2]>) -> Result<Self, MeshError> {
        if !disp.iter().all(|d| d[0].is_finite() && d[1].is_finite()) {
            return Err(MeshError::Argument("displacement entries must be finite".into()));
        }
        Ok(DeformationField { disp, descriptor: None })
    }

    pub fn from_fn(mesh: &TriMesh, f: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self, MeshError> {
        Self::from_values(mesh.nodes().iter().map(|p| f(p[0], p[1])).collect())
    }

    pub fn analytic(mesh: &TriMesh, d: DeformDescriptor) -> Result<Self, MeshError> {
        let mut field = Self::from_values(mesh.nodes().iter().map(|&p| d.eval(p)).collect())?;
        field.descriptor = Some(d);
        Ok(field)
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.disp
    }

    pub fn descriptor(&self) -> Option<DeformDescriptor> {
        self.descriptor
    }

    /// Checks the analytic descriptor against the stored nodal values.
    pub fn validate(&self, mesh: &TriMesh) -> Result<(), MeshError> {
        if self.disp.len() != mesh.nodes().len() {
            return Err(MeshError::Argument("displacement field does not match mesh".into()));
        }
        if let Some(d) = self.descriptor {
            for (i, &p) in mesh.nodes().iter().enumerate() {
                let v = d.eval(p);
                if (v[0] - self.disp[i][0]).abs() > 1e-14 || (v[1] - self.disp[i][1]).abs() > 1e-14
                {
                    return Err(MeshError::Argument(format!(
                        "descriptor disagrees with nodal displacement at node {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Unit ray directions at 2πj/n, n divisible by 8, generated from a single
/// octant table so that the set is bitwise invariant under the dihedral
/// group of the square (reflections flip signs and swap components exactly).
fn ray_directions(n: usize) -> Vec<[f64; 2]> {
    let m = n / 8;
    let mut c = vec![0.0; m + 1];
    let mut s = vec![0.0; m + 1];
    for r in 0..=m {
        let t = 2.0 * PI * r as f64 / n as f64;
        c[r] = t.cos();
        s[r] = t.sin();
    }
    c[0] = 1.0;
    s[0] = 0.0;
    c[m] = FRAC_1_SQRT_2;
    s[m] = FRAC_1_SQRT_2;
    (0..n)
        .map(|j| {
            let (q, r) = (j / m, j % m);
            let k = m - r;
            let d = match q {
                0 => [c[r], s[r]],
                1 => [s[k], c[k]],
                2 => [-s[r], c[r]],
                3 => [-c[k], s[k]],
                4 => [-c[r], -s[r]],
                5 => [-s[k], -c[k]],
                6 => [s[r], -c[r]],
                _ => [c[k], -s[k]],
            };
            // +0.0 turns any −0.0 into +0.0 so merge hashing sees one zero.
            [d[0] + 0.0, d[1] + 0.0]
        })
        .collect()
}

/// Geometric layer ratio q with first-layer thickness h1 and total span L
/// over n layers: h1·(1 + q + … + q^{n−1}) = L.  Falls back to uniform
/// layers when even a single layer of h1 overshoots.
fn layer_ratio(h1: f64, len: f64, n: usize) -> f64 {
    let target = len / h1;
    // target < n would need a shrinking schedule whose outer layers collapse
    // into the far boundary; uniform thickness L/n is used instead.
    if target <= n as f64 + 1e-9 {
        return 1.0;
    }
    let geom_sum = |q: f64| -> f64 {
        let mut acc = 0.0;
        let mut p = 1.0;
        for _ in 0..n {
            acc += p;
            p *= q;
        }
        acc
    };
    let (mut lo, mut hi) = (1e-9, 1e9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geom_sum(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Spider-web mesh of the perforated unit cell Y∖(a·G₀): angular rays with
/// radial layers geometrically graded from the hole boundary to the square.
pub fn build_cell_mesh(
    shape: &StarShape,
    a: f64,
    n_theta: usize,
    n_r: usize,
) -> Result<TriMesh, MeshError> {
    if n_theta < 8 || n_theta % 8 != 0 {
        return Err(MeshError::Argument(format!("N_theta = {n_theta} must be a multiple of 8")));
    }
    if n_r < 2 {
        return Err(MeshError::Argument(format!("N_r = {n_r} must be at least 2")));
    }
    if !(a > 0.0) || !a.is_finite() {
        return Err(MeshError::Argument(format!("hole scale a = {a} must be positive")));
    }
    let phi = shape.resample(n_theta);
    let max_hole = a * phi.iter().cloned().fold(0.0, f64::max);
    if max_hole >= 0.5 {
        return Err(MeshError::Geometry(format!(
            "scaled hole radius {max_hole:.6} reaches the cell boundary (needs a·max Φ < 1/2)"
        )));
    }

    let dirs = ray_directions(n_theta);
    let dtheta = 2.0 * PI / n_theta as f64;

    // Node (j, k): ray j, layer k (k = 0 hole boundary, k = n_r square side).
    let mut nodes = Vec::with_capacity(n_theta * (n_r + 1));
    for k in 0..=n_r {
        for (j, d) in dirs.iter().enumerate() {
            let rho0 = a * phi[j];
            let rho1 = 0.5 / d[0].abs().max(d[1].abs());
            let r = if k == 0 {
                rho0
            } else if k == n_r {
                rho1
            } else {
                let len = rho1 - rho0;
                let h1 = rho0 * dtheta;
                let q = layer_ratio(h1, len, n_r);
                if q == 1.0 {
                    rho0 + len * k as f64 / n_r as f64
                } else {
                    let mut acc = 0.0;
                    let mut p = 1.0;
                    for _ in 0..k {
                        acc += p;
                        p *= q;
                    }
                    rho0 + h1 * acc
                }
            };
            nodes.push([r * d[0], r * d[1]]);
        }
    }

    let idx = |j: usize, k: usize| k * n_theta + (j % n_theta);
    let mut tris = Vec::with_capacity(2 * n_theta * n_r);
    for k in 0..n_r {
        for j in 0..n_theta {
            tris.push([idx(j, k), idx(j + 1, k + 1), idx(j + 1, k)]);
            tris.push([idx(j, k), idx(j, k + 1), idx(j + 1, k + 1)]);
        }
    }
    let mut edges = Vec::with_capacity(2 * n_theta);
    for j in 0..n_theta {
        edges.push((idx(j, 0), idx(j + 1, 0), BoundaryTag::Particle));
        edges.push((idx(j, n_r), idx(j + 1, n_r), BoundaryTag::Outer));
    }

    TriMesh::new(nodes, tris, edges).map_err(|e| match e {
        MeshError::Mesh(msg) => MeshError::Mesh(format!("degenerate cell mesh: {msg}")),
        other => other,
    })
}

/// Merges ε-scaled copies of a unit cell into Ω = (0,1)², ε = 1/n_cells.
/// Interface nodes are unified by rounded-coordinate hashing; the outermost
/// cell edges become the Dirichlet boundary of Ω.
pub fn tile_perforated(cell: &TriMesh, n_cells: usize) -> Result<TriMesh, MeshError> {
    if n_cells < 1 {
        return Err(MeshError::Argument("n_cells must be at least 1".into()));
    }
    if !cell.has_tag(BoundaryTag::Outer) {
        return Err(MeshError::Argument("cell mesh carries no Outer boundary".into()));
    }
    let eps = 1.0 / n_cells as f64;
    let tol = 1e-12 * eps;
    let inv = 1.0 / tol;

    let mut nodes: Vec<[f64; 2]> = Vec::new();
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut tris: Vec<[usize; 3]> = Vec::new();
    let mut particle: Vec<(usize, usize)> = Vec::new();
    let mut outer_count: HashMap<(usize, usize), u32> = HashMap::new();

    for cy in 0..n_cells {
        for cx in 0..n_cells {
            let (ox, oy) = (cx as f64 + 0.5, cy as f64 + 0.5);
            let mut map = Vec::with_capacity(cell.nodes().len());
            for p in cell.nodes() {
                let g = [(ox + p[0]) * eps, (oy + p[1]) * eps];
                let (bx, by) = ((g[0] * inv).round() as i64, (g[1] * inv).round() as i64);
                let mut found: Option<usize> = None;
                let mut hits = 0usize;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        if let Some(list) = buckets.get(&(bx + dx, by + dy)) {
                            for &i in list {
                                let q = nodes[i];
                                if (q[0] - g[0]).abs() <= tol && (q[1] - g[1]).abs() <= tol {
                                    hits += 1;
                                    found = Some(i);
                                }
                            }
                        }
                    }
                }
                let i = match hits {
                    0 => {
                        let i = nodes.len();
                        nodes.push(g);
                        buckets.entry((bx, by)).or_default().push(i);
                        i
                    }
                    1 => found.unwrap(),
                    _ => {
                        return Err(MeshError::Mesh(format!(
                            "node merge ambiguity near ({:.15}, {:.15})",
                            g[0], g[1]
                        )));
                    }
                };
                map.push(i);
            }
            for t in cell.tris() {
                tris.push([map[t[0]], map[t[1]], map[t[2]]]);
            }
            for &(i, j, tag) in cell.boundary_edges() {
                let (gi, gj) = (map[i], map[j]);
                let key = (gi.min(gj), gi.max(gj));
                match tag {
                    BoundaryTag::Particle => particle.push(key),
                    _ => *outer_count.entry(key).or_insert(0) += 1,
                }
            }
        }
    }

    let mut edges: Vec<(usize, usize, BoundaryTag)> =
        particle.iter().map(|&(i, j)| (i, j, BoundaryTag::Particle)).collect();
    for (&(i, j), &c) in &outer_count {
        match c {
            2 => {} // interior interface, absorbed
            1 => edges.push((i, j, BoundaryTag::DirichletOuter)),
            _ => {
                return Err(MeshError::Mesh(format!(
                    "interface edge ({i}, {j}) shared by {c} cells"
                )));
            }
        }
    }

    let mesh = TriMesh::new(nodes, tris, edges)?;

    // Euler characteristic of the square with n² holes: V − E + T = 1 − n².
    let mut undirected: HashMap<(usize, usize), ()> = HashMap::new();
    for t in mesh.tris() {
        for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            undirected.insert((e.0.min(e.1), e.0.max(e.1)), ());
        }
    }
    let holes = if cell.has_tag(BoundaryTag::Particle) { (n_cells * n_cells) as i64 } else { 0 };
    let chi = mesh.nodes().len() as i64 - undirected.len() as i64 + mesh.tris().len() as i64;
    if chi != 1 - holes {
        return Err(MeshError::Mesh(format!(
            "tiled mesh has Euler characteristic {chi}, expected {}",
            1 - holes
        )));
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy)]
pub enum PlainDomain {
    Rect { w: f64, h: f64 },
    Disk { r: f64 },
}

/// Structured mesh of an unperforated domain; every boundary edge is
/// Dirichlet.  Rectangles get an alternating-diagonal grid, disks a
/// spider-web with a central fan.
pub fn build_plain_mesh(domain: PlainDomain, resolution: usize) -> Result<TriMesh, MeshError> {
    if resolution < 2 {
        return Err(MeshError::Argument("resolution must be at least 2".into()));
    }
    match domain {
        PlainDomain::Rect { w, h } => {
            if !(w > 0.0 && h > 0.0) {
                return Err(MeshError::Argument(format!(
                    "rectangle sides must be positive (got {w} × {h})"
                )));
            }
            let m = resolution;
            let idx = |i: usize, j: usize| j * (m + 1) + i;
            let mut nodes = Vec::with_capacity((m + 1) * (m + 1));
            for j in 0..=m {
                for i in 0..=m {
                    nodes.push([w * i as f64 / m as f64, h * j as f64 / m as f64]);
                }
            }
            let mut tris = Vec::with_capacity(2 * m * m);
            for j in 0..m {
                for i in 0..m {
                    let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                    if (i + j) % 2 == 0 {
                        tris.push([a, b, c]);
                        tris.push([a, c, d]);
                    } else {
                        tris.push([a, b, d]);
                        tris.push([b, c, d]);
                    }
                }
            }
            let mut edges = Vec::with_capacity(4 * m);
            for i in 0..m {
                edges.push((idx(i, 0), idx(i + 1, 0), BoundaryTag::DirichletOuter));
                edges.push((idx(i, m), idx(i + 1, m), BoundaryTag::DirichletOuter));
                edges.push((idx(0, i), idx(0, i + 1), BoundaryTag::DirichletOuter));
                edges.push((idx(m, i), idx(m, i + 1), BoundaryTag::DirichletOuter));
            }
            TriMesh::new(nodes, tris, edges)
        }
        PlainDomain::Disk { r } => {
            if !(r > 0.0) {
                return Err(MeshError::Argument(format!("disk radius must be positive (got {r})")));
            }
            let m = resolution;
            let nt = 8 * m;
            let dirs = ray_directions(nt);
            let mut nodes = vec![[0.0, 0.0]];
            for k in 1..=m {
                let rad = r * k as f64 / m as f64;
                for d in &dirs {
                    nodes.push([rad * d[0], rad * d[1]]);
                }
            }
            let idx = |j: usize, k: usize| 1 + (k - 1) * nt + (j % nt);
            let mut tris = Vec::new();
            for j in 0..nt {
                tris.push([0, idx(j, 1), idx(j + 1, 1)]);
            }
            for k in 1..m {
                for j in 0..nt {
                    tris.push([idx(j, k), idx(j + 1, k + 1), idx(j + 1, k)]);
                    tris.push([idx(j, k), idx(j, k + 1), idx(j + 1, k + 1)]);
                }
            }
            let edges = (0..nt)
                .map(|j| (idx(j, m), idx(j + 1, m), BoundaryTag::DirichletOuter))
                .collect();
            TriMesh::new(nodes, tris, edges)
        }
    }
}

/// Moves nodes to x + τ·θ(x), keeping connectivity and tags.
pub fn deform_mesh(mesh: &TriMesh, theta: &DeformationField, tau: f64) -> Result<TriMesh, MeshError> {
    if theta.displacements().len() != mesh.nodes().len() {
        return Err(MeshError::Argument("displacement field does not match mesh".into()));
    }
    if !tau.is_finite() {
        return Err(MeshError::Argument("step must be finite".into()));
    }
    let nodes: Vec<[f64; 2]> = mesh
        .nodes()
        .iter()
        .zip(theta.displacements())
        .map(|(p, d)| [p[0] + tau * d[0], p[1] + tau * d[1]])
        .collect();

    let mut worst: Option<(usize, f64)> = None;
    for (t, tri) in mesh.tris().iter().enumerate() {
        let a = signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
        if a <= 0.0 && worst.map_or(true, |(_, wa)| a < wa) {
            worst = Some((t, a));
        }
    }
    if let Some((tri, area)) = worst {
        return Err(MeshError::Deformation { tri, area });
    }
    TriMesh::new(nodes, mesh.tris().to_vec(), mesh.boundary_edges().to_vec())
}

#[derive(Debug, Clone, Copy)]
pub enum Region {
    Domain,
    Boundary(BoundaryTag),
}

/// Lumped nodal quadrature over the domain, trapezoid rule over a tagged
/// part of the boundary.
pub fn integrate(mesh: &TriMesh, field: &GridFunction, region: Region) -> Result<f64, MeshError> {
    if field.len() != mesh.nodes().len() {
        return Err(MeshError::Argument("field does not live on this mesh".into()));
    }
    match region {
        Region::Domain => Ok(field
            .values()
            .iter()
            .zip(mesh.node_measures())
            .map(|(v, m)| v * m)
            .sum()),
        Region::Boundary(tag) => {
            if !mesh.has_tag(tag) {
                return Err(MeshError::Argument(format!("mesh has no {:?} boundary", tag)));
            }
            Ok(mesh
                .boundary_edges()
                .iter()
                .filter(|(_, _, t)| *t == tag)
                .map(|&(i, j, _)| {
                    let (a, b) = (mesh.nodes()[i], mesh.nodes()[j]);
                    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                    0.5 * len * (field.values()[i] + field.values()[j])
                })
                .sum())
        }
    }
}

/// Serializes to the "TRIMESH v1" text format (17 significant digits,
/// 0-based indices).
pub fn write_trimesh(mesh: &TriMesh) -> String {
    let mut out = String::new();
    out.push_str("TRIMESH v1\n");
    let _ = writeln!(
        out,
        "{} {} {}",
        mesh.nodes().len(),
        mesh.tris().len(),
        mesh.boundary_edges().len()
    );
    for p in mesh.nodes() {
        let _ = writeln!(out, "{:.16e} {:.16e}", p[0], p[1]);
    }
    for t in mesh.tris() {
        let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
    }
    for &(i, j, tag) in mesh.boundary_edges() {
        let _ = writeln!(out, "{} {} {}", i, j, tag.label());
    }
    out
}

/// Parses the "TRIMESH v1" format and validates the result as a mesh.
pub fn parse_trimesh(text: &str) -> Result<TriMesh, MeshError> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: 0, msg: format!("missing {what}") })
    };

    let (ln, header) = next("header")?;
    if header.trim() != "TRIMESH v1" {
        return Err(MeshError::Parse { line: ln + 1, msg: "expected \"TRIMESH v1\" header".into() });
    }
    let (ln, counts) = next("counts line")?;
    let counts_line = ln + 1;
    let parts: Vec<&str> = counts.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(MeshError::Parse {
            line: counts_line,
            msg: "counts line must be \"Nnodes Ntris Nedges\"".into(),
        });
    }
    let parse_count = |s: &str| -> Result<usize, MeshError> {
        s.parse::<usize>().map_err(|_| MeshError::Parse {
            line: counts_line,
            msg: format!("bad count {s:?}"),
        })
    };
    let (nn, nt, ne) = (parse_count(parts[0])?, parse_count(parts[1])?, parse_count(parts[2])?);
    const MAX_ITEMS: usize = 50_000_000;
    if nn.saturating_add(nt).saturating_add(ne) > MAX_ITEMS {
        return Err(MeshError::Parse { line: counts_line, msg: "counts out of range".into() });
    }

    let mut nodes = Vec::with_capacity(nn);
    for _ in 0..nn {
        let (ln, line) = next("node line")?;
        let mut it = line.split_whitespace();
        let mut coord = |name: &str| -> Result<f64, MeshError> {
            let tok = it.next().ok_or(MeshError::Parse {
                line: ln + 1,
                msg: format!("node line missing {name}"),
            })?;
            let v: f64 = tok.parse().map_err(|_| MeshError::Parse {
                line: ln + 1,
                msg: format!("bad coordinate {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(MeshError::Parse {
                    line: ln + 1,
                    msg: format!("non-finite coordinate {tok:?}"),
                });
            }
            Ok(v)
        };
        let (x, y) = (coord("x")?, coord("y")?);
        if it.next().is_some() {
            return Err(MeshError::Parse { line: ln + 1, msg: "extra tokens on node line".into() });
        }
        nodes.push([x, y]);
    }

    let mut tris = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, line) = next("triangle line")?;
        let mut ids = [0usize; 3];
        let mut it = line.split_whitespace();
        for slot in &mut ids {
            let tok = it.next().ok_or(MeshError::Parse {
                line: ln + 1,
                msg: "triangle line needs three indices".into(),
            })?;
            *slot = tok.parse().map_err(|_| MeshError::Parse {
                line: ln + 1,
                msg: format!("bad node index {tok:?}"),
            })?;
        }
        if it.next().is_some() {
            return Err(MeshError::Parse {
                line: ln + 1,
                msg: "extra tokens on triangle line".into(),
            });
        }
        tris.push(ids);
    }

    let mut edges = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (ln, line) = next("edge line")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(MeshError::Parse {
                line: ln + 1,
                msg: "edge line must be \"i j TAG\"".into(),
            });
        }
        let parse_idx = |s: &str| -> Result<usize, MeshError> {
            s.parse().map_err(|_| MeshError::Parse {
                line: ln + 1,
                msg: format!("bad node index {s:?}"),
            })
        };
        let tag = match parts[2] {
            "PARTICLE" => BoundaryTag::Particle,
            "OUTER" => BoundaryTag::Outer,
            "DIRICHLET" => BoundaryTag::DirichletOuter,
            other => {
                return Err(MeshError::Parse {
                    line: ln + 1,
                    msg: format!("unknown boundary tag {other:?}"),
                });
            }
        };
        edges.push((parse_idx(parts[0])?, parse_idx(parts[1])?, tag));
    }

    if let Some((ln, line)) = lines.next() {
        if !line.trim().is_empty() {
            return Err(MeshError::Parse { line: ln + 1, msg: "trailing content".into() });
        }
    }
    TriMesh::new(nodes, tris, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_directions_dihedral_exact() {
        let n = 64;
        let d = ray_directions(n);
        for j in 0..n {
            let r = d[(n - j) % n]; // reflection about the x axis
            assert_eq!(d[j][0].to_bits(), r[0].to_bits());
            assert_eq!(d[j][1].to_bits(), (-r[1] + 0.0).to_bits());
            let q = d[(j + n / 4) % n]; // rotation by π/2
            assert_eq!((-d[j][1] + 0.0).to_bits(), q[0].to_bits());
            assert_eq!((d[j][0] + 0.0).to_bits(), q[1].to_bits());
        }
    }

    #[test]
    fn layer_ratio_sums_back() {
        let (h1, len, n) = (0.01, 0.4, 16);
        let q = layer_ratio(h1, len, n);
        let mut acc = 0.0;
        let mut p = 1.0;
        for _ in 0..n {
            acc += p;
            p *= q;
        }
        assert!((h1 * acc - len).abs() < 1e-9);
    }

    #[test]
    fn square_shape_corners() {
        let s = StarShape::square(1.0, 64).unwrap();
        assert!((s.max_radius() - 2f64.sqrt()).abs() < 1e-12);
        assert!((s.radii()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polygon_matches_square() {
        let v = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let p = StarShape::polygon(&v, 64, "square4").unwrap();
        let s = StarShape::square(1.0, 64).unwrap();
        for (a, b) in p.radii().iter().zip(s.radii()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
