//! P1 finite-element and radial finite-volume solvers for the semilinear
//! problems of the theory: p-Laplacian diffusion, monotone reactions in the
//! volume and on particle boundaries, Dirichlet outer data.

use crate::linalg::{cg_jacobi, solve_tridiagonal, Csr};
use crate::mesh::{BoundaryTag, GridFunction, TriMesh};
use std::fmt::Write as _;
use std::sync::Arc;

/// Regularization of the p-flux (δ² + |∇u|²)^{(p−2)/2}; only the p ≠ 2 path
/// ever evaluates it.
pub const P_FLUX_DELTA: f64 = 1e-6;
const MAX_NONLINEAR_ITER: usize = 400;
const NEWTON_CLIP: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum PdeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("nonlinear iteration exceeded {iters} steps (last residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("linear solver failed: {0}")]
    Solver(String),
}

/// Single-valued monotone reaction term as seen by the solvers.  Multivalued
/// graphs (Heaviside at the jump, Signorini at the origin) reach the solvers
/// only through single-valued resolvents computed elsewhere.
pub trait Reaction: Send + Sync {
    fn eval(&self, s: f64) -> f64;
    /// Derivative where defined (None at kinks/jumps).
    fn deriv(&self, s: f64) -> Option<f64>;
    /// Primitive ∫₀^s of the reaction, for energy bookkeeping.
    fn primitive(&self, s: f64) -> f64 {
        // composite Simpson fallback; exact families override
        let n = 256;
        let h = s / n as f64;
        let mut acc = self.eval(0.0) + self.eval(s);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * self.eval(i as f64 * h);
        }
        acc * h / 3.0
    }
    /// Whether the term is a genuine function (no jump discontinuities).
    fn single_valued(&self) -> bool {
        true
    }
    /// Whether the slope stays bounded near the origin.  Root-type kinetics
    /// return false, which switches strongly weighted solves to continuation
    /// in the weight.
    fn lipschitz_near_zero(&self) -> bool {
        true
    }
    /// Slope used by the Newton linearization: evaluated no closer to a
    /// non-Lipschitz point than the clip, never negative, never infinite.
    fn newton_slope(&self, s: f64) -> f64 {
        let probe = if s.abs() < NEWTON_CLIP { NEWTON_CLIP.copysign(if s < 0.0 { -1.0 } else { 1.0 }) } else { s };
        match self.deriv(probe) {
            Some(d) if d.is_finite() && d > 0.0 => d.min(1e12),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub location: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Monotone scalar kinetics σ with σ(0) = 0.
#[derive(Clone)]
pub enum Kinetics {
    /// σ(s) = a·s
    Linear { slope: f64 },
    /// σ(s) = λ·sign(s)|s|^q, q ∈ (0,1]
    Power { lambda: f64, q: f64 },
    /// step graph: 0 below the origin, 1 above, [0,1] at it
    Heaviside,
    /// boundary-obstacle graph: σ₀ above the origin, (−∞,0] at it
    Signorini(Arc<Kinetics>),
    /// piecewise-linear interpolation of nondecreasing samples
    Table { samples: Arc<Vec<(f64, f64)>> },
}

impl std::fmt::Debug for Kinetics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kinetics::Linear { slope } => write!(f, "linear:{slope}"),
            Kinetics::Power { lambda, q } => write!(f, "power:{q}:{lambda}"),
            Kinetics::Heaviside => write!(f, "heaviside"),
            Kinetics::Signorini(inner) => write!(f, "signorini:{inner:?}"),
            Kinetics::Table { samples } => write!(f, "table[{} samples]", samples.len()),
        }
    }
}

impl Kinetics {
    pub fn linear(slope: f64) -> Result<Kinetics, PdeError> {
        if !(slope >= 0.0) || !slope.is_finite() {
            return Err(PdeError::Argument(format!("linear slope {slope} must be ≥ 0")));
        }
        Ok(Kinetics::Linear { slope })
    }

    pub fn power(lambda: f64, q: f64) -> Result<Kinetics, PdeError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(PdeError::Argument(format!("power weight {lambda} must be ≥ 0")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(PdeError::Argument(format!("power exponent {q} must lie in (0,1]")));
        }
        Ok(Kinetics::Power { lambda, q })
    }

    pub fn heaviside() -> Kinetics {
        Kinetics::Heaviside
    }

    pub fn signorini(inner: Kinetics) -> Kinetics {
        Kinetics::Signorini(Arc::new(inner))
    }

    pub fn table(samples: Vec<(f64, f64)>) -> Result<Kinetics, PdeError> {
        if samples.len() < 2 {
            return Err(PdeError::Argument("table needs at least two samples".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(PdeError::Argument("table abscissae must increase".into()));
            }
            if w[1].1 < w[0].1 {
                return Err(PdeError::Argument("table values must be nondecreasing".into()));
            }
        }
        if !samples.iter().all(|(s, v)| s.is_finite() && v.is_finite()) {
            return Err(PdeError::Argument("table entries must be finite".into()));
        }
        // σ(0) = 0 after the change of variable; enforce it on tables too.
        let at_zero = table_eval(&samples, 0.0);
        if at_zero.abs() > 1e-12 {
            return Err(PdeError::Argument(format!("table kinetics has σ(0) = {at_zero:e}")));
        }
        Ok(Kinetics::Table { samples: Arc::new(samples) })
    }

    /// Parses "linear:a", "power:q:lambda", "heaviside", "signorini:<inner>".
    pub fn parse(descriptor: &str) -> Result<Kinetics, PdeError> {
        let d = descriptor.trim();
        if d == "heaviside" {
            return Ok(Kinetics::Heaviside);
        }
        if let Some(rest) = d.strip_prefix("signorini:") {
            return Ok(Kinetics::signorini(Kinetics::parse(rest)?));
        }
        if let Some(rest) = d.strip_prefix("linear:") {
            let slope: f64 = rest
                .parse()
                .map_err(|_| PdeError::Argument(format!("bad linear slope {rest:?}")))?;
            return Kinetics::linear(slope);
        }
        if let Some(rest) = d.strip_prefix("power:") {
            let mut it = rest.splitn(2, ':');
            let q: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PdeError::Argument(format!("bad power exponent in {d:?}")))?;
            let lambda: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PdeError::Argument(format!("bad power weight in {d:?}")))?;
            return Kinetics::power(lambda, q);
        }
        Err(PdeError::Argument(format!("unknown kinetics descriptor {d:?}")))
    }

    pub fn jumps(&self) -> Vec<Jump> {
        match self {
            Kinetics::Heaviside => vec![Jump { location: 0.0, lower: 0.0, upper: 1.0 }],
            // The unilateral graph carries the vertical segment (−∞, 0] at the
            // origin in its maximal monotone completion.
            Kinetics::Signorini(inner) => {
                let inner_jumps = inner.jumps();
                let upper = inner_jumps
                    .iter()
                    .find(|j| j.location == 0.0)
                    .map_or(0.0, |j| j.upper)
                    .max(0.0);
                let mut v = vec![Jump { location: 0.0, lower: f64::NEG_INFINITY, upper }];
                v.extend(inner_jumps.into_iter().filter(|j| j.location > 0.0));
                v
            }
            _ => Vec::new(),
        }
    }

    /// Checks σ(0) = 0, monotonicity on a 10³-point probe grid, and jump
    /// consistency with one-sided limits.
    pub fn validate(&self) -> Result<(), PdeError> {
        if self.eval(0.0) != 0.0 {
            return Err(PdeError::Argument(format!("σ(0) = {} ≠ 0", self.eval(0.0))));
        }
        let (lo, hi) = self.probe_range();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..1000 {
            let s = lo + (hi - lo) * i as f64 / 999.0;
            let v = self.eval(s);
            if !v.is_finite() {
                return Err(PdeError::Argument(format!("σ({s}) is not finite")));
            }
            if v < prev - 1e-12 {
                return Err(PdeError::Argument(format!("σ decreases near s = {s}")));
            }
            prev = prev.max(v);
        }
        for j in self.jumps() {
            // Nearby values may exceed the one-sided limits (the graph keeps
            // rising away from the jump) but must never contradict them.  An
            // infinite bound marks a vertical segment with no limit to check.
            let below = self.eval(j.location - 1e-9);
            let above = self.eval(j.location + 1e-9);
            if (j.lower.is_finite() && below > j.lower + 1e-6)
                || (j.upper.is_finite() && above < j.upper - 1e-6)
                || j.lower > j.upper
            {
                return Err(PdeError::Argument(format!(
                    "jump list at {} inconsistent with nearby values",
                    j.location
                )));
            }
        }
        Ok(())
    }

    fn probe_range(&self) -> (f64, f64) {
        match self {
            Kinetics::Table { samples } => (samples[0].0, samples[samples.len() - 1].0),
            _ => (-3.0, 3.0),
        }
    }

    pub fn arc(self) -> Arc<dyn Reaction> {
        Arc::new(self)
    }
}

fn table_eval(samples: &[(f64, f64)], s: f64) -> f64 {
    let n = samples.len();
    if s <= samples[0].0 {
        return samples[0].1;
    }
    if s >= samples[n - 1].0 {
        return samples[n - 1].1;
    }
    let k = samples.partition_point(|(x, _)| *x <= s) - 1;
    let (x0, y0) = samples[k];
    let (x1, y1) = samples[k + 1];
    y0 + (y1 - y0) * (s - x0) / (x1 - x0)
}

impl Reaction for Kinetics {
    fn eval(&self, s: f64) -> f64 {
        match self {
            Kinetics::Linear { slope } => slope * s,
            Kinetics::Power { lambda, q } => lambda * s.abs().powf(*q).copysign(s),
            Kinetics::Heaviside => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Kinetics::Signorini(inner) => {
                if s > 0.0 {
                    inner.eval(s).max(0.0)
                } else {
                    0.0
                }
            }
            Kinetics::Table { samples } => table_eval(samples, s),
        }
    }

    fn deriv(&self, s: f64) -> Option<f64> {
        match self {
            Kinetics::Linear { slope } => Some(*slope),
            Kinetics::Power { lambda, q } => {
                if s == 0.0 && *q < 1.0 {
                    None
                } else {
                    Some(lambda * q * s.abs().powf(q - 1.0))
                }
            }
            Kinetics::Heaviside => {
                if s == 0.0 {
                    None
                } else {
                    Some(0.0)
                }
            }
            Kinetics::Signorini(inner) => {
                if s > 0.0 {
                    inner.deriv(s)
                } else if s < 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
            Kinetics::Table { samples } => {
                let n = samples.len();
                if s < samples[0].0 || s > samples[n - 1].0 {
                    return Some(0.0);
                }
                let k = (samples.partition_point(|(x, _)| *x <= s) - 1).min(n - 2);
                let (x0, y0) = samples[k];
                let (x1, y1) = samples[k + 1];
                Some((y1 - y0) / (x1 - x0))
            }
        }
    }

    fn single_valued(&self) -> bool {
        match self {
            Kinetics::Signorini(inner) => inner.single_valued(),
            _ => self.jumps().is_empty(),
        }
    }

    fn lipschitz_near_zero(&self) -> bool {
        match self {
            Kinetics::Power { q, .. } => *q >= 1.0,
            Kinetics::Heaviside => false,
            Kinetics::Signorini(inner) => inner.lipschitz_near_zero(),
            _ => true,
        }
    }

    fn primitive(&self, s: f64) -> f64 {
        match self {
            Kinetics::Linear { slope } => 0.5 * slope * s * s,
            Kinetics::Power { lambda, q } => lambda * s.abs().powf(q + 1.0) / (q + 1.0),
            Kinetics::Heaviside => s.max(0.0),
            Kinetics::Signorini(inner) => {
                if s > 0.0 {
                    inner.primitive(s) - inner.primitive(0.0)
                } else {
                    0.0
                }
            }
            Kinetics::Table { .. } => {
                // tables are piecewise linear; trapezoid on the segments is exact
                let steps = 512;
                let h = s / steps as f64;
                let mut acc = 0.0;
                for i in 0..steps {
                    let a = self.eval(i as f64 * h);
                    let b = self.eval((i + 1) as f64 * h);
                    acc += 0.5 * (a + b) * h;
                }
                acc
            }
        }
    }
}

/// Volume source: a constant or a nodal field.
#[derive(Clone)]
pub enum Source {
    Constant(f64),
    Field(Vec<f64>),
}

impl Source {
    fn at(&self, i: usize) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Field(v) => v[i],
        }
    }
}

/// Data of one elliptic solve: p-Laplacian diffusion with constant SPD
/// matrix A (identity when p ≠ 2), volume kinetics with weight λ_vol,
/// boundary kinetics on Particle edges with weight β_bnd and source g_ε,
/// volume source f, constant Dirichlet value on DirichletOuter.
#[derive(Clone)]
pub struct EllipticSpec {
    pub p: f64,
    pub diffusion: [[f64; 2]; 2],
    pub volume_kinetics: Option<(Arc<dyn Reaction>, f64)>,
    pub boundary_kinetics: Option<(Arc<dyn Reaction>, f64)>,
    pub boundary_source: f64,
    pub volume_source: Source,
    pub dirichlet: f64,
}

impl EllipticSpec {
    /// Poisson-type default: p = 2, A = I, no reactions, zero data.
    pub fn laplace() -> EllipticSpec {
        EllipticSpec {
            p: 2.0,
            diffusion: [[1.0, 0.0], [0.0, 1.0]],
            volume_kinetics: None,
            boundary_kinetics: None,
            boundary_source: 0.0,
            volume_source: Source::Constant(0.0),
            dirichlet: 0.0,
        }
    }

    fn check(&self, mesh: &TriMesh) -> Result<(), PdeError> {
        if !(self.p > 1.0) {
            return Err(PdeError::Argument(format!("p = {} must exceed 1", self.p)));
        }
        let a = &self.diffusion;
        let spd = a[0][1] == a[1][0]
            && a[0][0] > 0.0
            && a[0][0] * a[1][1] - a[0][1] * a[1][0] > 0.0;
        if !spd {
            return Err(PdeError::Argument("diffusion matrix must be symmetric positive definite".into()));
        }
        if self.p != 2.0 {
            let identity = a[0][0] == 1.0 && a[1][1] == 1.0 && a[0][1] == 0.0 && a[1][0] == 0.0;
            if !identity {
                return Err(PdeError::Argument("p ≠ 2 requires identity diffusion".into()));
            }
        }
        if let Some((_, w)) = &self.volume_kinetics {
            if !(*w >= 0.0) {
                return Err(PdeError::Argument("volume kinetics weight must be ≥ 0".into()));
            }
        }
        if let Some((_, w)) = &self.boundary_kinetics {
            if !(*w >= 0.0) {
                return Err(PdeError::Argument("boundary kinetics weight must be ≥ 0".into()));
            }
        }
        if let Source::Field(v) = &self.volume_source {
            if v.len() != mesh.nodes().len() {
                return Err(PdeError::Argument("volume source field does not match mesh".into()));
            }
        }
        Ok(())
    }
}

/// Converged solution with the achieved nonlinear residual.
pub struct SolveResult {
    pub u: GridFunction,
    pub residual: f64,
    pub iterations: usize,
}

/// Per-triangle gradient of a P1 field: returns (∂x, ∂y).
pub fn tri_gradient(mesh: &TriMesh, values: &[f64], t: usize) -> [f64; 2] {
    let tri = mesh.tris()[t];
    let [a, b, c] = [mesh.nodes()[tri[0]], mesh.nodes()[tri[1]], mesh.nodes()[tri[2]]];
    let area2 = 2.0 * mesh.areas()[t];
    let (ua, ub, uc) = (values[tri[0]], values[tri[1]], values[tri[2]]);
    [
        (ua * (b[1] - c[1]) + ub * (c[1] - a[1]) + uc * (a[1] - b[1])) / area2,
        (ua * (c[0] - b[0]) + ub * (a[0] - c[0]) + uc * (b[0] - a[0])) / area2,
    ]
}

// P1 basis gradients on triangle t.
pub(crate) fn basis_gradients(mesh: &TriMesh, t: usize) -> [[f64; 2]; 3] {
    let tri = mesh.tris()[t];
    let [a, b, c] = [mesh.nodes()[tri[0]], mesh.nodes()[tri[1]], mesh.nodes()[tri[2]]];
    let area2 = 2.0 * mesh.areas()[t];
    [
        [(b[1] - c[1]) / area2, (c[0] - b[0]) / area2],
        [(c[1] - a[1]) / area2, (a[0] - c[0]) / area2],
        [(a[1] - b[1]) / area2, (b[0] - a[0]) / area2],
    ]
}

struct RobinData {
    // per node: Σ (edge length / 2) over incident Particle edges
    weights: Vec<f64>,
}

fn robin_weights(mesh: &TriMesh) -> RobinData {
    let mut weights = vec![0.0; mesh.nodes().len()];
    for &(i, j, tag) in mesh.boundary_edges() {
        if tag == BoundaryTag::Particle {
            let (a, b) = (mesh.nodes()[i], mesh.nodes()[j]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            weights[i] += 0.5 * len;
            weights[j] += 0.5 * len;
        }
    }
    RobinData { weights }
}

/// Solves the discrete weak problem of `spec` on `mesh`: regularized
/// p-Laplacian stiffness, lumped-mass volume reaction, trapezoid Robin terms
/// on Particle edges.  Damped Picard–Newton; relative residual ≤ 1e−9.
/// Strongly weighted root-type kinetics go through continuation in the
/// weight, doubling from a tame level with warm starts.
pub fn solve_semilinear(mesh: &TriMesh, spec: &EllipticSpec) -> Result<SolveResult, PdeError> {
    spec.check(mesh)?;
    if let Some((g, _)) = &spec.volume_kinetics {
        if !g.single_valued() {
            return Err(PdeError::Unsupported(
                "jump kinetics in the volume term (use its single-valued resolvent)".into(),
            ));
        }
    }
    let stiff = |k: &Option<(Arc<dyn Reaction>, f64)>| -> f64 {
        match k {
            Some((g, w)) if !g.lipschitz_near_zero() => *w,
            _ => 0.0,
        }
    };
    let hardest = stiff(&spec.volume_kinetics).max(stiff(&spec.boundary_kinetics));
    let doublings = if hardest > 64.0 { (hardest / 64.0).log2().ceil() as i32 } else { 0 };
    let mut guess: Option<Vec<f64>> = None;
    let mut iterations = 0;
    for k in (0..=doublings).rev() {
        let s = 0.5_f64.powi(k);
        let mut staged = spec.clone();
        if let Some((_, w)) = &mut staged.volume_kinetics {
            *w *= s;
        }
        if let Some((_, w)) = &mut staged.boundary_kinetics {
            *w *= s;
        }
        let prev = guess.take();
        // intermediate stages only seed warm starts; they stop early
        let tol_rel = if k == 0 { 1e-9 } else { 1e-6 };
        let sol = solve_semilinear_from(mesh, &staged, prev.as_deref(), tol_rel)?;
        iterations += sol.iterations;
        if k == 0 {
            return Ok(SolveResult { u: sol.u, residual: sol.residual, iterations });
        }
        guess = Some(sol.u.values().to_vec());
    }
    unreachable!("continuation always reaches the target weight")
}

fn solve_semilinear_from(
    mesh: &TriMesh,
    spec: &EllipticSpec,
    initial: Option<&[f64]>,
    tol_rel: f64,
) -> Result<SolveResult, PdeError> {
    let nv = mesh.nodes().len();
    let dirichlet_nodes = mesh.tagged_nodes(BoundaryTag::DirichletOuter);
    let mut is_dirichlet = vec![false; nv];
    for &i in &dirichlet_nodes {
        is_dirichlet[i] = true;
    }
    let free: Vec<usize> = (0..nv).filter(|&i| !is_dirichlet[i]).collect();
    let free_index: Vec<Option<usize>> = {
        let mut m = vec![None; nv];
        for (k, &i) in free.iter().enumerate() {
            m[i] = Some(k);
        }
        m
    };

    let robin = robin_weights(mesh);
    let measures = mesh.node_measures();

    let mut u = match initial {
        Some(v) => v.to_vec(),
        None => vec![spec.dirichlet; nv],
    };
    for &i in &dirichlet_nodes {
        u[i] = spec.dirichlet;
    }

    // Fixed RHS (independent of u): volume source + Robin boundary source.
    let mut b = vec![0.0; nv];
    for i in 0..nv {
        b[i] += measures[i] * spec.volume_source.at(i);
        if let Some((_, beta)) = &spec.boundary_kinetics {
            b[i] += robin.weights[i] * beta * spec.boundary_source;
        }
    }

    let assemble = |u: &[f64]| -> (Vec<(usize, usize, f64)>, Vec<f64>) {
        // stiffness triplets on free nodes + full K·u product
        let mut triplets = Vec::with_capacity(9 * mesh.tris().len());
        let mut ku = vec![0.0; nv];
        for t in 0..mesh.tris().len() {
            let tri = mesh.tris()[t];
            let grads = basis_gradients(mesh, t);
            let area = mesh.areas()[t];
            let nu = if spec.p == 2.0 {
                1.0
            } else {
                let g = tri_gradient(mesh, u, t);
                (P_FLUX_DELTA * P_FLUX_DELTA + g[0] * g[0] + g[1] * g[1])
                    .powf((spec.p - 2.0) / 2.0)
            };
            let a = &spec.diffusion;
            for i in 0..3 {
                for j in 0..3 {
                    let gi = grads[i];
                    let gj = grads[j];
                    let agj = [
                        a[0][0] * gj[0] + a[0][1] * gj[1],
                        a[1][0] * gj[0] + a[1][1] * gj[1],
                    ];
                    let kij = nu * area * (gi[0] * agj[0] + gi[1] * agj[1]);
                    ku[tri[i]] += kij * u[tri[j]];
                    if let (Some(fi), Some(fj)) = (free_index[tri[i]], free_index[tri[j]]) {
                        triplets.push((fi, fj, kij));
                    }
                }
            }
        }
        (triplets, ku)
    };

    let reaction_at = |u: &[f64], i: usize| -> (f64, f64) {
        // (value, newton slope) of the lumped reaction at node i
        let mut val = 0.0;
        let mut slope = 0.0;
        if let Some((g, lam)) = &spec.volume_kinetics {
            val += measures[i] * lam * g.eval(u[i]);
            slope += measures[i] * lam * g.newton_slope(u[i]);
        }
        if let Some((s, beta)) = &spec.boundary_kinetics {
            if robin.weights[i] > 0.0 {
                val += robin.weights[i] * beta * s.eval(u[i]);
                slope += robin.weights[i] * beta * s.newton_slope(u[i]);
            }
        }
        (val, slope)
    };

    // When the data admits the zero sub- (or super-) solution, iterates are
    // projected onto the invariant cone.  Dead-core nodes then land on exact
    // zeros instead of creeping through the root singularity.
    let (source_min, source_max) = match &spec.volume_source {
        Source::Constant(c) => (*c, *c),
        Source::Field(v) => v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))),
    };
    let vol_at_zero = spec.volume_kinetics.as_ref().map_or(0.0, |(r, w)| w * r.eval(0.0));
    let bnd_gap_at_zero = spec
        .boundary_kinetics
        .as_ref()
        .map_or(0.0, |(r, w)| w * (r.eval(0.0) - spec.boundary_source));
    let clamp_below =
        spec.dirichlet >= 0.0 && vol_at_zero <= source_min && bnd_gap_at_zero <= 0.0;
    let clamp_above =
        spec.dirichlet <= 0.0 && vol_at_zero >= source_max && bnd_gap_at_zero >= 0.0;

    let parts = |u: &[f64]| -> (Vec<(usize, usize, f64)>, Vec<f64>, Vec<f64>, f64) {
        let (triplets, ku) = assemble(u);
        let mut f_free = vec![0.0; free.len()];
        let mut slopes = vec![0.0; free.len()];
        for (k, &i) in free.iter().enumerate() {
            let (rv, rs) = reaction_at(u, i);
            f_free[k] = ku[i] + rv - b[i];
            slopes[k] = rs;
        }
        let res = f_free.iter().map(|x| x * x).sum::<f64>().sqrt();
        (triplets, f_free, slopes, res)
    };

    let (mut triplets, mut f_free, mut slopes, mut residual) = parts(&u);
    let scale = residual.max(1.0);
    for iter in 0..MAX_NONLINEAR_ITER {
        if residual <= tol_rel * scale {
            return Ok(SolveResult {
                u: GridFunction::from_values(u),
                residual,
                iterations: iter,
            });
        }
        let mut all = std::mem::take(&mut triplets);
        for (k, s) in slopes.iter().enumerate() {
            all.push((k, k, *s));
        }
        let jac = Csr::from_triplets(free.len(), &all);
        let rhs: Vec<f64> = f_free.iter().map(|x| -x).collect();
        let delta = cg_jacobi(&jac, &rhs, 1e-12, 40 * free.len().max(50))
            .map_err(PdeError::Solver)?;

        // backtracking on the residual norm; the Newton direction descends
        // for monotone reactions, so some step length always makes progress
        let mut omega = 1.0_f64;
        loop {
            let mut trial = u.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += omega * delta[k];
            }
            if clamp_below {
                for v in trial.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            if clamp_above {
                for v in trial.iter_mut() {
                    if *v > 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let (t_triplets, t_f, t_slopes, t_res) = parts(&trial);
            if t_res < residual || omega <= 1e-6 {
                u = trial;
                triplets = t_triplets;
                f_free = t_f;
                slopes = t_slopes;
                residual = t_res;
                break;
            }
            omega *= 0.5;
        }
    }
    Err(PdeError::NonConvergence { iters: MAX_NONLINEAR_ITER, residual })
}

/// Solves −Δu + V·u = f with nodal Dirichlet data on DirichletOuter nodes.
/// Linear, CG with Jacobi preconditioner, residual ≤ 1e−12.
pub fn solve_linear_potential(
    mesh: &TriMesh,
    potential: &[f64],
    source: &[f64],
    dirichlet: &[f64],
) -> Result<SolveResult, PdeError> {
    let nv = mesh.nodes().len();
    if potential.len() != nv || source.len() != nv || dirichlet.len() != nv {
        return Err(PdeError::Argument("field lengths must match node count".into()));
    }
    if !potential.iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(PdeError::Argument("potential must be finite and nonnegative".into()));
    }

    let dirichlet_nodes = mesh.tagged_nodes(BoundaryTag::DirichletOuter);
    let mut is_dirichlet = vec![false; nv];
    for &i in &dirichlet_nodes {
        is_dirichlet[i] = true;
    }
    let free: Vec<usize> = (0..nv).filter(|&i| !is_dirichlet[i]).collect();
    let free_index: Vec<Option<usize>> = {
        let mut m = vec![None; nv];
        for (k, &i) in free.iter().enumerate() {
            m[i] = Some(k);
        }
        m
    };

    let mut u = vec![0.0; nv];
    for &i in &dirichlet_nodes {
        u[i] = dirichlet[i];
    }

    let mut triplets = Vec::with_capacity(9 * mesh.tris().len());
    let mut b: Vec<f64> = free
        .iter()
        .map(|&i| mesh.node_measures()[i] * source[i])
        .collect();
    for t in 0..mesh.tris().len() {
        let tri = mesh.tris()[t];
        let grads = basis_gradients(mesh, t);
        let area = mesh.areas()[t];
        for i in 0..3 {
            let Some(fi) = free_index[tri[i]] else { continue };
            for j in 0..3 {
                let gi = grads[i];
                let gj = grads[j];
                let kij = area * (gi[0] * gj[0] + gi[1] * gj[1]);
                match free_index[tri[j]] {
                    Some(fj) => triplets.push((fi, fj, kij)),
                    None => b[fi] -= kij * u[tri[j]],
                }
            }
        }
    }
    for (k, &i) in free.iter().enumerate() {
        triplets.push((k, k, mesh.node_measures()[i] * potential[i]));
    }
    let a = Csr::from_triplets(free.len(), &triplets);
    let x = cg_jacobi(&a, &b, 1e-12, 40 * free.len().max(50)).map_err(PdeError::Solver)?;
    for (k, &i) in free.iter().enumerate() {
        u[i] = x[k];
    }

    // honest algebraic residual on the free nodes
    let mut ax = vec![0.0; free.len()];
    a.matvec(&x, &mut ax);
    let res: f64 = ax
        .iter()
        .zip(&b)
        .map(|(l, r)| (l - r) * (l - r))
        .sum::<f64>()
        .sqrt();
    Ok(SolveResult { u: GridFunction::from_values(u), residual: res, iterations: 0 })
}

/// Discrete energy of a p = 2 semilinear spec at the field u:
/// ½∫A∇u·∇u + λ∫Σ(u) + β∫_S Σ_b(u) − ∫f u − β∫_S g_ε u,  Σ = ∫₀^· σ.
pub fn energy(mesh: &TriMesh, spec: &EllipticSpec, u: &GridFunction) -> Result<f64, PdeError> {
    if spec.p != 2.0 {
        return Err(PdeError::Unsupported("energy bookkeeping is kept for p = 2".into()));
    }
    if u.len() != mesh.nodes().len() {
        return Err(PdeError::Argument("field does not live on this mesh".into()));
    }
    let vals = u.values();
    let mut e = 0.0;
    let a = &spec.diffusion;
    for t in 0..mesh.tris().len() {
        let g = tri_gradient(mesh, vals, t);
        let ag = [a[0][0] * g[0] + a[0][1] * g[1], a[1][0] * g[0] + a[1][1] * g[1]];
        e += 0.5 * mesh.areas()[t] * (g[0] * ag[0] + g[1] * ag[1]);
    }
    let robin = robin_weights(mesh);
    for i in 0..mesh.nodes().len() {
        if let Some((g, lam)) = &spec.volume_kinetics {
            e += mesh.node_measures()[i] * lam * g.primitive(vals[i]);
        }
        if let Some((s, beta)) = &spec.boundary_kinetics {
            e += robin.weights[i] * beta * (s.primitive(vals[i]) - spec.boundary_source * vals[i]);
        }
        e -= mesh.node_measures()[i] * spec.volume_source.at(i) * vals[i];
    }
    Ok(e)
}

/// End condition of a radial two-point problem.  The outward conormal sign
/// is handled internally; `DecayMatched` imposes ∂_r u + ((n−2)/R)·u = 0,
/// exact for the r^{2−n} exterior tail.
#[derive(Clone)]
pub enum RadialEnd {
    Dirichlet(f64),
    Robin(f64),
    DecayMatched,
    /// flux·n + weight·(R(u) − source) = 0 with a monotone reaction R
    Kinetics { reaction: Arc<dyn Reaction>, weight: f64, source: f64 },
}

/// Radial problem −(r^{n−1}Φ_p(u′))′ + r^{n−1}(λσ(u) − f) = 0 on [r₀, r₁].
#[derive(Clone)]
pub struct RadialSpec {
    pub n: u32,
    pub p: f64,
    pub r0: f64,
    pub r1: f64,
    pub n_points: usize,
    pub volume_reaction: Option<(Arc<dyn Reaction>, f64)>,
    pub volume_source: f64,
    pub left: RadialEnd,
    pub right: RadialEnd,
}

#[derive(Debug, Clone)]
pub struct RadialProfile {
    pub r: Vec<f64>,
    pub values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl RadialProfile {
    pub fn csv(&self) -> String {
        let mut out = String::from("r,value\n");
        for (r, v) in self.r.iter().zip(&self.values) {
            let _ = writeln!(out, "{:.16e},{:.16e}", r, v);
        }
        out
    }

    /// Piecewise-linear evaluation.
    pub fn at(&self, r: f64) -> f64 {
        let n = self.r.len();
        if r <= self.r[0] {
            return self.values[0];
        }
        if r >= self.r[n - 1] {
            return self.values[n - 1];
        }
        let k = self.r.partition_point(|x| *x <= r) - 1;
        let t = (r - self.r[k]) / (self.r[k + 1] - self.r[k]);
        self.values[k] * (1.0 - t) + self.values[k + 1] * t
    }
}

fn phi_p(d: f64, p: f64) -> f64 {
    if p == 2.0 {
        d
    } else {
        (P_FLUX_DELTA * P_FLUX_DELTA + d * d).powf((p - 2.0) / 2.0) * d
    }
}

/// Solves the radial spec with a geometric grid for r₀ > 0 (uniform from the
/// origin), finite-volume fluxes weighted so the r^{2−n} fundamental solution
/// is exact at n = 3, and damped Picard–Newton with residual ≤ 1e−10.
pub fn solve_radial(spec: &RadialSpec) -> Result<RadialProfile, PdeError> {
    if !(spec.p > 1.0) {
        return Err(PdeError::Argument(format!("p = {} must exceed 1", spec.p)));
    }
    if !(spec.r1 > spec.r0) || !(spec.r0 >= 0.0) {
        return Err(PdeError::Argument(format!(
            "radial interval [{}, {}] must be increasing and nonnegative",
            spec.r0, spec.r1
        )));
    }
    if matches!(spec.left, RadialEnd::Kinetics { .. }) && spec.r0 <= 0.0 {
        return Err(PdeError::Argument("exterior kinetics condition needs r₀ > 0".into()));
    }
    if spec.n_points < 3 {
        return Err(PdeError::Argument("radial grid needs at least 3 points".into()));
    }
    let stiff_end = |e: &RadialEnd| match e {
        RadialEnd::Kinetics { reaction, weight, .. } if !reaction.lipschitz_near_zero() => *weight,
        _ => 0.0,
    };
    let hardest = spec
        .volume_reaction
        .as_ref()
        .map(|(g, w)| if g.lipschitz_near_zero() { 0.0 } else { *w })
        .unwrap_or(0.0)
        .max(stiff_end(&spec.left))
        .max(stiff_end(&spec.right));
    let doublings = if hardest > 64.0 { (hardest / 64.0).log2().ceil() as i32 } else { 0 };
    let scale_end = |e: &RadialEnd, s: f64| match e {
        RadialEnd::Kinetics { reaction, weight, source } => RadialEnd::Kinetics {
            reaction: reaction.clone(),
            weight: weight * s,
            source: *source,
        },
        other => other.clone(),
    };
    let mut guess: Option<Vec<f64>> = None;
    let mut iterations = 0;
    for k in (0..=doublings).rev() {
        let s = 0.5_f64.powi(k);
        let mut staged = spec.clone();
        if let Some((_, w)) = &mut staged.volume_reaction {
            *w *= s;
        }
        staged.left = scale_end(&spec.left, s);
        staged.right = scale_end(&spec.right, s);
        let prev = guess.take();
        let tol_rel = if k == 0 { 1e-10 } else { 1e-6 };
        let sol = solve_radial_from(&staged, prev.as_deref(), tol_rel)?;
        iterations += sol.iterations;
        if k == 0 {
            return Ok(RadialProfile { iterations, ..sol });
        }
        guess = Some(sol.values.clone());
    }
    unreachable!("continuation always reaches the target weight")
}

fn solve_radial_from(
    spec: &RadialSpec,
    initial: Option<&[f64]>,
    tol_rel: f64,
) -> Result<RadialProfile, PdeError> {
    let n_pts = spec.n_points;
    let r: Vec<f64> = if spec.r0 > 0.0 {
        let ratio = spec.r1 / spec.r0;
        (0..n_pts)
            .map(|i| spec.r0 * ratio.powf(i as f64 / (n_pts - 1) as f64))
            .collect()
    } else {
        (0..n_pts)
            .map(|i| spec.r0 + (spec.r1 - spec.r0) * i as f64 / (n_pts - 1) as f64)
            .collect()
    };
    let dim = spec.n as f64;

    // interface weight r^{n−1}; geometric mean keeps 1/r exact at n = 3
    let w_face: Vec<f64> = (0..n_pts - 1)
        .map(|i| {
            if r[i] > 0.0 {
                (r[i] * r[i + 1]).powf((dim - 1.0) / 2.0)
            } else {
                (0.5 * (r[i] + r[i + 1])).powi(spec.n as i32 - 1)
            }
        })
        .collect();
    // control volume ∫ r^{n−1} dr over the dual cell
    let cell_vol = |i: usize| -> f64 {
        let lo = if i == 0 { r[0] } else { 0.5 * (r[i - 1] + r[i]) };
        let hi = if i == n_pts - 1 { r[n_pts - 1] } else { 0.5 * (r[i] + r[i + 1]) };
        (hi.powi(spec.n as i32) - lo.powi(spec.n as i32)) / dim
    };
    let vols: Vec<f64> = (0..n_pts).map(cell_vol).collect();

    let pinned = |end: &RadialEnd| matches!(end, RadialEnd::Dirichlet(_));
    // start from the highest Dirichlet level: a supersolution for absorption
    // problems, which keeps the non-Lipschitz root kinetics away from zero
    let mut lift = 0.0_f64;
    if let RadialEnd::Dirichlet(v) = spec.left {
        lift = lift.max(v);
    }
    if let RadialEnd::Dirichlet(v) = spec.right {
        lift = lift.max(v);
    }
    let mut u = match initial {
        Some(v) => v.to_vec(),
        None => vec![lift; n_pts],
    };
    if let RadialEnd::Dirichlet(v) = spec.left {
        u[0] = v;
    }
    if let RadialEnd::Dirichlet(v) = spec.right {
        u[n_pts - 1] = v;
    }

    // invariant-cone projection, as in the 2-d solver
    let end_keeps_nonneg = |e: &RadialEnd| match e {
        RadialEnd::Dirichlet(v) => *v >= 0.0,
        RadialEnd::Robin(c) => *c >= 0.0,
        RadialEnd::DecayMatched => spec.n >= 2,
        RadialEnd::Kinetics { reaction, weight, source } => {
            weight * (reaction.eval(0.0) - source) <= 0.0
        }
    };
    let end_keeps_nonpos = |e: &RadialEnd| match e {
        RadialEnd::Dirichlet(v) => *v <= 0.0,
        RadialEnd::Robin(c) => *c >= 0.0,
        RadialEnd::DecayMatched => spec.n >= 2,
        RadialEnd::Kinetics { reaction, weight, source } => {
            weight * (reaction.eval(0.0) - source) >= 0.0
        }
    };
    let vol_at_zero = spec.volume_reaction.as_ref().map_or(0.0, |(r, w)| w * r.eval(0.0));
    let clamp_below = vol_at_zero <= spec.volume_source
        && end_keeps_nonneg(&spec.left)
        && end_keeps_nonneg(&spec.right);
    let clamp_above = vol_at_zero >= spec.volume_source
        && end_keeps_nonpos(&spec.left)
        && end_keeps_nonpos(&spec.right);

    // residual and Jacobian tridiagonal bands at the current iterate
    let eval = |u: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut f = vec![0.0; n_pts];
        let mut diag = vec![0.0; n_pts];
        let mut sub = vec![0.0; n_pts - 1];
        let mut sup = vec![0.0; n_pts - 1];
        for i in 0..n_pts - 1 {
            let h = r[i + 1] - r[i];
            let d = (u[i + 1] - u[i]) / h;
            let flux = w_face[i] * phi_p(d, spec.p);
            // Picard linearization of the flux factor
            let nu = if spec.p == 2.0 {
                1.0
            } else {
                (P_FLUX_DELTA * P_FLUX_DELTA + d * d).powf((spec.p - 2.0) / 2.0)
            };
            let k = w_face[i] * nu / h;
            f[i] -= flux;
            f[i + 1] += flux;
            diag[i] += k;
            diag[i + 1] += k;
            sub[i] -= k;
            sup[i] -= k;
        }
        for i in 0..n_pts {
            if let Some((g, lam)) = &spec.volume_reaction {
                f[i] += vols[i] * lam * g.eval(u[i]);
                diag[i] += vols[i] * lam * g.newton_slope(u[i]);
            }
            f[i] -= vols[i] * spec.volume_source;
        }
        let mut apply_end = |i: usize, end: &RadialEnd| {
            let rw = r[i].powi(spec.n as i32 - 1);
            match end {
                RadialEnd::Dirichlet(_) => {}
                RadialEnd::Robin(c) => {
                    f[i] += rw * phi_p(c * u[i], spec.p);
                    let nu = if spec.p == 2.0 {
                        *c
                    } else {
                        let d = c * u[i];
                        (P_FLUX_DELTA * P_FLUX_DELTA + d * d).powf((spec.p - 2.0) / 2.0) * c
                    };
                    diag[i] += rw * nu.max(0.0);
                }
                RadialEnd::DecayMatched => {
                    let c = (dim - 2.0) / r[i];
                    f[i] += rw * phi_p(c * u[i], spec.p);
                    let nu = if spec.p == 2.0 {
                        c
                    } else {
                        let d = c * u[i];
                        (P_FLUX_DELTA * P_FLUX_DELTA + d * d).powf((spec.p - 2.0) / 2.0) * c
                    };
                    diag[i] += rw * nu.max(0.0);
                }
                RadialEnd::Kinetics { reaction, weight, source } => {
                    f[i] += rw * weight * (reaction.eval(u[i]) - source);
                    diag[i] += rw * weight * reaction.newton_slope(u[i]);
                }
            }
        };
        apply_end(0, &spec.left);
        apply_end(n_pts - 1, &spec.right);
        (f, diag, sub, sup)
    };

    let parts = |u: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let (mut f, mut diag, mut sub, mut sup) = eval(u);
        if pinned(&spec.left) {
            f[0] = 0.0;
            diag[0] = 1.0;
            sup[0] = 0.0;
        }
        if pinned(&spec.right) {
            f[n_pts - 1] = 0.0;
            diag[n_pts - 1] = 1.0;
            sub[n_pts - 2] = 0.0;
        }
        let res = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        (f, diag, sub, sup, res)
    };

    let (mut f, mut diag, mut sub, mut sup, mut residual) = parts(&u);
    let scale = residual.max(1.0);
    for iter in 0..MAX_NONLINEAR_ITER {
        if residual <= tol_rel * scale {
            return Ok(RadialProfile { r, values: u, residual, iterations: iter });
        }
        let rhs: Vec<f64> = f.iter().map(|x| -x).collect();
        let delta = solve_tridiagonal(&sub, &diag, &sup, &rhs).map_err(PdeError::Solver)?;
        let mut omega = 1.0_f64;
        loop {
            let mut trial: Vec<f64> = u
                .iter()
                .zip(&delta)
                .map(|(ui, di)| ui + omega * di)
                .collect();
            if clamp_below {
                for v in trial.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            if clamp_above {
                for v in trial.iter_mut() {
                    if *v > 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let (t_f, t_diag, t_sub, t_sup, t_res) = parts(&trial);
            if t_res < residual || omega <= 1e-6 {
                u = trial;
                f = t_f;
                diag = t_diag;
                sub = t_sub;
                sup = t_sup;
                residual = t_res;
                break;
            }
            omega *= 0.5;
        }
    }
    Err(PdeError::NonConvergence { iters: MAX_NONLINEAR_ITER, residual })
}

/// CSV serialization "node_index,x,y,value" at 17 significant digits.
pub fn grid_csv(mesh: &TriMesh, u: &GridFunction) -> String {
    let mut out = String::from("node_index,x,y,value\n");
    for (i, (p, v)) in mesh.nodes().iter().zip(u.values()).enumerate() {
        let _ = writeln!(out, "{},{:.16e},{:.16e},{:.16e}", i, p[0], p[1], v);
    }
    out
}
